import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dymecu.nn_core import (
    ContractError,
    MlpSpec,
    ParamVector,
    backward,
    clip_grad_norm,
    ema_blend,
    forward,
    init_params,
    make_opt_state,
    optimizer_step,
    vjp,
)


def loop_forward(spec, params, x):
    """Scalar-loop reference evaluation, one neuron at a time."""
    h = [float(v) for v in x]
    for i in range(spec.n_layers):
        W, b = params[f"W{i}"], params[f"b{i}"]
        out = []
        for r in range(W.shape[0]):
            acc = float(b[r])
            for c in range(W.shape[1]):
                acc += float(W[r, c]) * h[c]
            if i != spec.n_layers - 1:
                acc = max(acc, 0.0) if spec.activation == "relu" else float(np.tanh(acc))
            out.append(acc)
        h = out
    return np.array(h)


def central_diff(f, values, eps=1e-5):
    g = np.zeros_like(values)
    for i in range(values.size):
        up, dn = values.copy(), values.copy()
        up[i] += eps
        dn[i] -= eps
        g[i] = (f(up) - f(dn)) / (2 * eps)
    return g


def random_spec(rng):
    depth = int(rng.integers(0, 3))
    hidden = tuple(int(w) for w in rng.integers(2, 6, size=depth))
    act = ["relu", "tanh"][int(rng.integers(0, 2))]
    return MlpSpec(int(rng.integers(1, 5)), hidden, int(rng.integers(1, 4)), act)


def test_zero_params_give_zero_output():
    spec = MlpSpec(3, (4,), 2)
    p = init_params(spec, 0, scheme="zeros")
    np.testing.assert_array_equal(forward(spec, p, np.array([1.0, -2.0, 3.0])), np.zeros(2))


def test_identity_linear_layer():
    spec = MlpSpec(2, (), 2)
    p = ParamVector(np.array([1.0, 0.0, 0.0, 1.0, 0.0, 0.0]), spec.layout())
    np.testing.assert_array_equal(forward(spec, p, np.array([1.0, 2.0])), [1.0, 2.0])


def test_forward_matches_scalar_loop():
    rng = np.random.default_rng(7)
    for _ in range(20):
        spec = random_spec(rng)
        p = init_params(spec, rng)
        x = rng.normal(size=spec.input_dim)
        np.testing.assert_allclose(forward(spec, p, x), loop_forward(spec, p, x), rtol=0, atol=1e-12)


def test_forward_batch_matches_rows():
    spec = MlpSpec(3, (5,), 2, "tanh")
    p = init_params(spec, 1)
    xs = np.random.default_rng(2).normal(size=(4, 3))
    batch = forward(spec, p, xs)
    for i in range(4):
        np.testing.assert_allclose(batch[i], forward(spec, p, xs[i]), atol=1e-15)


def test_dimension_mismatch_raises():
    spec = MlpSpec(3, (4,), 2)
    p = init_params(spec, 0)
    with pytest.raises(ContractError):
        forward(spec, p, np.zeros(4))
    with pytest.raises(ContractError):
        forward(MlpSpec(3, (5,), 2), p, np.zeros(3))
    with pytest.raises(ContractError):
        backward(spec, p, np.zeros(3), np.zeros(3))


def test_zero_upstream_gives_zero_gradient():
    spec = MlpSpec(3, (4,), 2)
    p = init_params(spec, 0)
    g = backward(spec, p, np.ones(3), np.zeros(2))
    np.testing.assert_array_equal(g.values, 0.0)


def test_linear_layer_gradient_closed_form():
    spec = MlpSpec(3, (), 2)
    p = init_params(spec, 4)
    x, u = np.array([0.5, -1.0, 2.0]), np.array([3.0, -0.25])
    g = backward(spec, p, x, u)
    np.testing.assert_allclose(g["W0"], np.outer(u, x), atol=1e-15)
    np.testing.assert_allclose(g["b0"], u, atol=1e-15)


def test_gradients_match_finite_differences():
    rng = np.random.default_rng(11)
    for _ in range(10):
        spec = random_spec(rng)
        p = init_params(spec, rng)
        x = rng.normal(size=spec.input_dim)
        u = rng.normal(size=spec.output_dim)
        g = backward(spec, p, x, u)
        fd = central_diff(lambda v: float(u @ forward(spec, p.like(v), x)), p.values)
        err = np.abs(g.values - fd) / np.maximum(1e-8, np.abs(g.values) + np.abs(fd))
        assert err.max() < 1e-4


def test_input_gradient_matches_finite_differences():
    spec = MlpSpec(4, (6,), 3, "tanh")
    p = init_params(spec, 3)
    x = np.random.default_rng(0).normal(size=4)
    u = np.array([1.0, -2.0, 0.5])
    _, dx = vjp(spec, p, x, u)
    fd = central_diff(lambda v: float(u @ forward(spec, p, v)), x)
    np.testing.assert_allclose(dx, fd, rtol=1e-6, atol=1e-8)


def test_sgd_step_arithmetic():
    spec = MlpSpec(1, (), 1)
    p = ParamVector(np.array([1.0, 1.0]), spec.layout())
    g = p.like(np.array([0.5, 0.0]))
    new, _ = optimizer_step(p, g, make_opt_state(p, "sgd"), 0.1)
    assert new.values[0] == pytest.approx(0.95, abs=1e-15)
    assert new.values[1] == 1.0
    same, _ = optimizer_step(p, p.like(np.zeros(2)), make_opt_state(p, "sgd"), 0.1)
    np.testing.assert_array_equal(same.values, p.values)
    np.testing.assert_array_equal(p.values, [1.0, 1.0])


def test_adam_minimizes_quadratic():
    spec = MlpSpec(2, (), 2)
    p = init_params(spec, 0)
    state = make_opt_state(p)
    for _ in range(3000):
        p, state = optimizer_step(p, p.like(2 * p.values), state, 1e-2)
    assert np.abs(p.values).max() < 1e-2
    assert state.t == 3000


def test_optimizer_layout_mismatch_raises():
    a = init_params(MlpSpec(2, (), 2), 0)
    b = init_params(MlpSpec(2, (), 3), 0)
    with pytest.raises(ContractError):
        optimizer_step(a, b, make_opt_state(a, "sgd"), 0.1)


def test_clip_grad_norm():
    spec = MlpSpec(1, (), 1)
    g = ParamVector(np.array([3.0, 4.0]), spec.layout())
    np.testing.assert_allclose(clip_grad_norm(g, 0.5).values, [0.3, 0.4])
    assert clip_grad_norm(g, 10.0) is g


def test_ema_examples():
    spec = MlpSpec(2, (3,), 2)
    n = spec.n_params
    w = ParamVector(np.zeros(n), spec.layout())
    t1 = w.like(np.ones(n))
    t2 = w.like(np.full(n, 3.0))
    np.testing.assert_array_equal(ema_blend(w, [t1, t2], 1.0).values, w.values)
    np.testing.assert_array_equal(ema_blend(w, [t1, t2], 0.0).values, np.full(n, 2.0))
    out = ema_blend(w, [t1, t1], 0.99)
    np.testing.assert_allclose(out.values, 0.01, atol=1e-15)
    for bad in (-0.1, 1.5):
        with pytest.raises(ContractError):
            ema_blend(w, [t1], bad)


finite = st.floats(-1e3, 1e3, allow_nan=False)


@settings(max_examples=200, deadline=None)
@given(st.lists(st.tuples(finite, finite, finite), min_size=1, max_size=8), st.floats(0.0, 1.0))
def test_ema_stays_between_target_and_mean(triples, alpha):
    arr = np.array(triples)
    spec = MlpSpec(1, (), len(triples) - 1) if len(triples) > 1 else MlpSpec(1, (), 1)
    n = spec.n_params
    vals = np.resize(arr, (n, 3))
    w, a, b = (ParamVector(vals[:, i].copy(), spec.layout()) for i in range(3))
    out = ema_blend(w, [a, b], alpha).values
    mean = (vals[:, 1] + vals[:, 2]) / 2
    lo, hi = np.minimum(vals[:, 0], mean), np.maximum(vals[:, 0], mean)
    tol = 1e-9 * (1 + np.abs(vals).max())
    assert np.all(out >= lo - tol) and np.all(out <= hi + tol)
