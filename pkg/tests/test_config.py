from pathlib import Path

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dymecu import config
from dymecu.config import ConfigError, RunConfig, derive_seeds

CONFIGS = sorted((Path(__file__).resolve().parents[1] / "configs").glob("*.toml"))


def test_defaults():
    cfg = RunConfig()
    assert cfg.curiosity.alpha == 0.99
    assert (cfg.ppo.zeta, cfg.ppo.beta) == (1.0, 2.0)
    assert cfg.ppo.gamma == 0.99 and cfg.ppo.lambda_gae == 0.95 and cfg.ppo.clip_eps == 0.2


def test_round_trip_defaults():
    cfg = RunConfig()
    assert config.loads(config.dumps(cfg)) == cfg


@pytest.mark.parametrize("path", CONFIGS, ids=lambda p: p.name)
def test_shipped_configs_are_canonical(path):
    cfg = config.load(path)
    assert config.loads(config.dumps(cfg)) == cfg
    assert config.dumps(cfg) == path.read_text()


@settings(max_examples=100, deadline=None)
@given(
    alpha=st.floats(0.0, 1.0),
    lr=st.floats(0.0, 1.0),
    seeds=st.lists(st.integers(0, 10**6), min_size=1, max_size=6, unique=True),
    hidden=st.lists(st.integers(1, 256), max_size=3),
    name=st.text(st.characters(blacklist_categories=("Cs", "Cc")), min_size=1, max_size=20),
    one_hot=st.booleans(),
)
def test_round_trip_property(alpha, lr, seeds, hidden, name, one_hot):
    cfg = RunConfig().replace(
        run={"seeds": seeds, "name": name},
        env={"one_hot": one_hot},
        curiosity={"alpha": alpha, "lr": lr, "hidden": hidden},
    )
    assert config.loads(config.dumps(cfg)) == cfg


def test_unknown_field_reports_line():
    text = config.dumps(RunConfig()).replace("[ppo]\n", "[ppo]\nwarp_factor = 9\n")
    line = text.splitlines().index("warp_factor = 9") + 1
    with pytest.raises(ConfigError) as err:
        config.loads(text)
    assert err.value.line == line
    assert "ppo.warp_factor" in str(err.value)


def test_unknown_section_rejected():
    with pytest.raises(ConfigError) as err:
        config.loads('[run]\nname = "x"\n\n[extras]\nfoo = 1\n')
    assert err.value.line == 4


def test_type_errors_report_line():
    with pytest.raises(ConfigError) as err:
        config.loads('[run]\nname = "x"\ntotal_steps = "many"\n')
    assert err.value.line == 3


def test_invalid_values_report_line():
    with pytest.raises(ConfigError) as err:
        config.loads("[curiosity]\nalpha = 1.5\n")
    assert err.value.line == 2
    with pytest.raises(ConfigError):
        config.loads('[run]\nmode = "pretrain_then_finetune"\npretrain_steps = 0\n')


def test_syntax_error():
    with pytest.raises(ConfigError):
        config.loads("[run\nname = 1")


def test_partial_file_fills_defaults():
    cfg = config.loads("[ppo]\nlr = 0.001\n")
    assert cfg.ppo.lr == 1e-3 and cfg.env == RunConfig().env


def test_seed_offsets_are_distinct():
    s = derive_seeds(7)
    assert s == {"env": 7, "policy": 1007, "curiosity": 2007, "rollout": 3007, "minibatch": 4007}
