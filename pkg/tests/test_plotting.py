import numpy as np

from flowpost.metrics import build_report, evaluate_pair
from flowpost.odesolve import SolverConfig
from flowpost.plotting import (
    plot_dispersion,
    plot_field_grid,
    plot_metrics,
    plot_regimes,
    plot_sigma_profile,
    plot_training_history,
)
from flowpost.toylab import ToyProblem, endpoint_dispersion, field_grid, sigma_regimes_experiment

PROB = ToyProblem([[1.0, 0.6], [1.0, -0.6]], [0.0, 0.0], 0.4)
PNG = b"\x89PNG"


def render_all(d):
    plot_field_grid(d / "field.png", field_grid(PROB, 0.5, resolution=12), PROB.targets, PROB.y)
    rep = endpoint_dispersion("oracle", PROB, 20, SolverConfig("midpoint", 4))
    plot_dispersion(d / "disp.png", {"joint": rep}, PROB.targets)
    plot_regimes(d / "reg.png", sigma_regimes_experiment(PROB, (0.4,), steps=20))
    s = 0.3 * np.random.default_rng(0).standard_normal(4000)
    rows = [evaluate_pair(s + 0.05 * k, s, 16000) for k in (1, 2)]
    plot_metrics(d / "met.png", build_report(["a", "b"], rows))
    plot_training_history(d / "hist.png", [(0, 1.0), (10, 0.5), (20, 0.2)])
    plot_sigma_profile(d / "sig.png", np.linspace(0.1, 0.3, 48), 16000)
    return {p.name: p.read_bytes() for p in sorted(d.iterdir())}


def test_figures_written_and_byte_stable(tmp_path):
    (tmp_path / "a").mkdir()
    (tmp_path / "b").mkdir()
    first, second = render_all(tmp_path / "a"), render_all(tmp_path / "b")
    assert len(first) == 6
    assert all(b.startswith(PNG) for b in first.values())
    assert first == second
