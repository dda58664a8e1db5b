"""Dynamic-memory curiosity, baseline bonuses, PPO and an experiment harness."""

__version__ = "0.1.0"
