import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from flowpost.calibration import SigmaProfile
from flowpost.flowmath import PathSpec, jfm_training_pair
from flowpost.neural import (
    FlowDataset,
    FlowModel,
    Output,
    TrainConfig,
    TrainingDivergedError,
    backward,
    enhance,
    enhance_grid,
    forward,
    grid_to_tiles,
    init_model,
    load_checkpoint,
    loss_and_grad,
    save_checkpoint,
    tile_starts,
    tiles_to_grid,
    train,
)
from flowpost.odesolve import SolverConfig
from flowpost.toylab import ToyProblem, endpoint_dispersion


def randomize(model, seed=0, scale=0.5):
    """Fill every parameter (including the zero-initialised ones) with noise."""
    rng = np.random.default_rng(seed)
    for p in model.parameters():
        p[...] = scale * rng.standard_normal(p.shape)
    for shadow, live in zip(model.ema_parameters(), model.parameters()):
        shadow[...] = live
    return model


def batch(d, n=5, seed=1):
    rng = np.random.default_rng(seed)
    return (rng.standard_normal((n, d)), rng.uniform(0, 0.95, n), rng.standard_normal((n, d)),
            rng.standard_normal((n, d)))


def loop_forward(model, x, t, y):
    """Straight-line scalar evaluation of one input row."""
    emb = [t, math.sin(2 * math.pi * t), math.cos(2 * math.pi * t)]
    h = list(x) + list(y) + emb
    hidden = None
    for li, (w, b) in enumerate(zip(model.weights, model.biases)):
        nxt = []
        for j in range(w.shape[1]):
            z = b[j]
            for i in range(w.shape[0]):
                z += h[i] * w[i, j]
            nxt.append(z if li == model.n_layers - 1 else math.tanh(z))
        if li == model.n_layers - 2:
            hidden = nxt
        h = nxt
    out = list(h)
    phi = [1.0] + emb
    d = len(x)
    if model.shortcut is not None:
        for k in range(d):
            a = sum(phi[m] * model.shortcut[0, m, k] for m in range(4))
            c = sum(phi[m] * model.shortcut[1, m, k] for m in range(4))
            out[k] += a * x[k] + c * y[k]
    if model.gate is not None:
        for k in range(d):
            g = model.gate[-1, k] + sum(hidden[i] * model.gate[i, k] for i in range(len(hidden)))
            out[k] += g * y[k]
    if model.output is Output.ENDPOINT:
        out = [(o - xv) / (1 - t) for o, xv in zip(out, x)]
    return out


def test_zero_weights_zero_output():
    m = init_model(3, hidden=(8, 8), shortcut=False)
    for p in m.parameters():
        p[...] = 0.0
    x, t, y, _ = batch(3)
    np.testing.assert_array_equal(forward(m, x, t, y), 0.0)


def test_forward_deterministic():
    a = randomize(init_model(3, hidden=(8,), seed=4), 4)
    b = randomize(init_model(3, hidden=(8,), seed=4), 4)
    x, t, y, _ = batch(3)
    assert forward(a, x, t, y).tobytes() == forward(b, x, t, y).tobytes()


@pytest.mark.parametrize("output", list(Output))
@pytest.mark.parametrize("gate", [False, True])
@pytest.mark.parametrize("shortcut", [False, True])
def test_forward_matches_loop_oracle(output, gate, shortcut):
    m = randomize(init_model(2, hidden=(5, 4), output=output, gate=gate, shortcut=shortcut), 7)
    x, t, y, _ = batch(2, n=4)
    got = forward(m, x, t, y)
    for i in range(4):
        np.testing.assert_allclose(got[i], loop_forward(m, x[i], t[i], y[i]), rtol=0, atol=1e-12)


def test_initial_shortcut_is_exact_for_perfect_observation():
    x, t, y, _ = batch(3)
    field = forward(init_model(3, hidden=(6,)), x, t, y)
    np.testing.assert_allclose(field, y - x)
    endpoint_head = init_model(3, hidden=(6,), output="endpoint")
    np.testing.assert_allclose(forward(endpoint_head, x, t, y), (y - x) / (1 - t)[:, None])


def finite_difference_check(model, x, t, y, target, h=1e-5):
    _, grads = loss_and_grad(model, x, t, y, target)
    worst = 0.0
    for p, g in zip(model.parameters(), grads):
        flat, gflat = p.reshape(-1), g.reshape(-1)
        for i in range(flat.size):
            old = flat[i]
            flat[i] = old + h
            up = loss_and_grad(model, x, t, y, target)[0]
            flat[i] = old - h
            down = loss_and_grad(model, x, t, y, target)[0]
            flat[i] = old
            fd = (up - down) / (2 * h)
            worst = max(worst, abs(fd - gflat[i]) / max(abs(fd), abs(gflat[i]), 1e-7))
    return worst


@settings(max_examples=8, deadline=None)
@given(seed=st.integers(0, 1000), output=st.sampled_from(list(Output)), gate=st.booleans())
def test_gradients_match_finite_differences(seed, output, gate):
    m = randomize(init_model(2, hidden=(4, 3), output=output, gate=gate), seed)
    assert finite_difference_check(m, *batch(2, seed=seed + 1)) < 1e-4


def test_zero_output_zero_target_zero_gradient():
    m = init_model(2, hidden=(4,), shortcut=False)
    x, t, y, _ = batch(2)
    _, grads = loss_and_grad(m, x, t, y, np.zeros_like(x))
    for g in grads:
        np.testing.assert_array_equal(g, 0.0)


def test_duplicated_batch_same_gradient():
    m = randomize(init_model(3, hidden=(6, 5), gate=True), 2)
    x, t, y, u = batch(3)
    _, g1 = loss_and_grad(m, x, t, y, u)
    dup = lambda a: np.concatenate([a, a])  # noqa: E731
    _, g2 = loss_and_grad(m, dup(x), dup(t), dup(y), dup(u))
    for a, b in zip(g1, g2):
        np.testing.assert_allclose(a, b, rtol=1e-12, atol=1e-15)


def test_backward_accepts_flow_sample():
    m = randomize(init_model(2, hidden=(4,)), 3)
    rng = np.random.default_rng(0)
    s = jfm_training_pair(rng.standard_normal((6, 2)), rng.standard_normal((6, 2)), 0.3,
                          rng.standard_normal((6, 2)), rng.uniform(0, 1, 6))
    for a, b in zip(backward(m, s), loss_and_grad(m, s.x_t, s.t, s.y, s.target_u)[1]):
        np.testing.assert_array_equal(a, b)


def one_pair(d=4, seed=0):
    rng = np.random.default_rng(seed)
    return FlowDataset(rng.standard_normal((1, d)), rng.standard_normal((1, d)))


def test_single_pair_training_reduces_loss():
    history = []
    m = init_model(4, hidden=(32, 32), seed=0)
    cfg = TrainConfig(PathSpec.joint(0.01), learning_rate=0.05, iterations=5000, batch_size=64,
                      eval_every=1000)
    train(m, one_pair(), cfg, history)
    assert history[-1][1] < 0.05 * history[0][1]


def test_zero_learning_rate_is_identity():
    m = randomize(init_model(3, hidden=(6,), gate=True), 5)
    before = [p.copy() for p in m.parameters()]
    ema_before = [p.copy() for p in m.ema_parameters()]
    train(m, one_pair(3), TrainConfig(PathSpec.joint(0.2), learning_rate=0.0, iterations=20))
    for a, b in zip(before, m.parameters()):
        np.testing.assert_array_equal(a, b)
    for a, b in zip(ema_before, m.ema_parameters()):
        np.testing.assert_array_equal(a, b)


def test_ema_replay():
    m = init_model(3, hidden=(6,), ema_decay=0.9, gate=True)
    w0 = [p.copy() for p in m.parameters()]
    log = []
    n = 30
    train(m, one_pair(3), TrainConfig(PathSpec.joint(0.2), learning_rate=0.05, iterations=n),
          weight_log=log)
    d = 0.9
    for idx, shadow in enumerate(m.ema_parameters()):
        closed = d**n * w0[idx]
        for k, snap in enumerate(log, start=1):
            closed = closed + (1 - d) * d ** (n - k) * snap[idx]
        np.testing.assert_allclose(shadow, closed, rtol=1e-10, atol=1e-13)


def test_training_is_seed_deterministic():
    runs = []
    for _ in range(2):
        m = init_model(3, hidden=(6,), seed=1)
        train(m, one_pair(3), TrainConfig(PathSpec.joint(0.2), iterations=50, seed=3))
        runs.append(np.concatenate([p.ravel() for p in m.parameters()]))
    assert runs[0].tobytes() == runs[1].tobytes()


def test_divergence_reports_step():
    m = randomize(init_model(2, hidden=(4,)), 0, scale=3.0)
    with np.errstate(all="ignore"), pytest.raises(TrainingDivergedError) as err:
        train(m, one_pair(2), TrainConfig(PathSpec.joint(1.0), learning_rate=1e6, iterations=200))
    assert err.value.step >= 1


def test_enhance_one_pair_small_sigma_reaches_target():
    data = one_pair(2, seed=3)
    m = init_model(2, hidden=(32, 32), seed=0)
    train(m, data, TrainConfig(PathSpec.joint(1e-3), learning_rate=0.05, iterations=10000,
                               batch_size=64))
    x, run = enhance(m, data.y[0], 1e-3, SolverConfig("midpoint", 3))
    assert run.nfe == 6
    assert np.linalg.norm(x - data.x1[0]) < 0.05 * np.linalg.norm(data.x1[0] - data.y[0])


def test_enhance_seeding():
    m = randomize(init_model(2, hidden=(4,)), 1, scale=0.2)
    y = np.array([[0.1, 0.2], [0.3, -0.1]])
    a, _ = enhance(m, y, 0.3, seed=7)
    b, _ = enhance(m, y, 0.3, seed=7)
    c, _ = enhance(m, y, 0.3, seed=8)
    assert a.shape == y.shape
    assert a.tobytes() == b.tobytes()
    assert not np.array_equal(a, c)


def test_perfect_model_contracts_to_targets():
    prob = ToyProblem([[1.0, 0.2], [-0.8, 0.9], [0.1, -1.2]], [0.0, 0.0], 0.4)
    rep = endpoint_dispersion("oracle", prob, 64, SolverConfig("midpoint", 50), seed=2)
    assert np.max(rep.distances) < 1e-3 * prob.sigma_y


def test_tile_starts():
    assert tile_starts(48, 24) == [0, 24]
    assert tile_starts(50, 24) == [0, 24, 26]
    with pytest.raises(ValueError):
        tile_starts(10, 24)


@settings(max_examples=20, deadline=None)
@given(f=st.integers(4, 13), t=st.integers(4, 13), seed=st.integers(0, 100))
def test_tiles_roundtrip(f, t, seed):
    rng = np.random.default_rng(seed)
    g = rng.standard_normal((f, t)) + 1j * rng.standard_normal((f, t))
    np.testing.assert_array_equal(tiles_to_grid(grid_to_tiles(g, 4), g.shape, 4), g)


def test_enhance_grid_shape_and_determinism():
    tile = 4
    m = init_model(2 * tile * tile, hidden=(8,), output="endpoint", gate=True)
    y = np.random.default_rng(0).standard_normal((9, 7)) * (1 + 1j)
    prof = SigmaProfile.per_frequency(np.linspace(0.1, 0.3, 9))
    a, run = enhance_grid(m, y, prof, SolverConfig("midpoint", 3), seed=1, tile=tile)
    b, _ = enhance_grid(m, y, prof, SolverConfig("midpoint", 3), seed=1, tile=tile)
    assert a.shape == y.shape and run.nfe == 6
    assert a.tobytes() == b.tobytes()
    # the untrained endpoint head returns the observation
    np.testing.assert_allclose(a, y, atol=1e-12)


def test_checkpoint_roundtrip(tmp_path):
    m = randomize(init_model(3, hidden=(5, 4), seed=9, output="endpoint", gate=True), 9)
    m.meta["trained_steps"] = 12
    save_checkpoint(tmp_path / "a.ckpt", m)
    back = load_checkpoint(tmp_path / "a.ckpt")
    assert back.output is Output.ENDPOINT and back.meta["trained_steps"] == 12
    for a, b in zip(m.parameters() + m.ema_parameters(), back.parameters() + back.ema_parameters()):
        assert a.tobytes() == b.tobytes()
    save_checkpoint(tmp_path / "b.ckpt", back)
    assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()


def test_model_validation():
    m = init_model(2, hidden=(4,))
    with pytest.raises(ValueError):
        FlowModel([5, 4, 2], m.weights, m.biases, m.ema_weights, m.ema_biases)
    with pytest.raises(ValueError):
        forward(m, np.zeros((2, 3)), 0.5, np.zeros((2, 3)))
    with pytest.raises(ValueError):
        forward(m, np.zeros(2), 1.5, np.zeros(2))
