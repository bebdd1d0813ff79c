"""Toy problems and experiments for the joint flow formulation.

Covers synthetic test signals, feature-domain degradations standing in for a
codec's initial decoder, field/density grids, endpoint dispersion of sampled
trajectories, and the time at which the field at the prior mean stops
pointing at the average of the targets.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Sequence

import numpy as np

from .calibration import SigmaProfile, gaussian_smooth, sigma_from_heuristic
from .features import ComplexFeatureGrid, FeatureConfig, Waveform, estimate_beta, extract
from .flowmath import FarFieldError, PathKind, marginal_field_oracle
from .odesolve import Method, SolverConfig, solve

__all__ = [
    "ToyProblem",
    "SignalKind",
    "synth_signal",
    "tone_bursts",
    "SpectralTask",
    "spectral_task",
    "DegradeKind",
    "DegradeSpec",
    "degrade",
    "FieldGrid",
    "field_grid",
    "DispersionReport",
    "endpoint_dispersion",
    "RegimeResult",
    "transition_time",
    "sigma_regimes_experiment",
    "oracle_field",
    "write_field_grid_csv",
    "write_dispersion_csv",
    "write_regimes_csv",
]


@dataclass(frozen=True)
class ToyProblem:
    """Targets ``x1_k`` sharing one observation ``y``, with prior scale ``sigma_y``."""

    targets: np.ndarray
    y: np.ndarray
    sigma_y: float

    def __post_init__(self):
        targets = np.atleast_2d(np.asarray(self.targets, dtype=np.float64))
        y = np.asarray(self.y, dtype=np.float64)
        if targets.shape[0] < 1:
            raise ValueError("a toy problem needs at least one target")
        if y.shape != targets.shape[1:]:
            raise ValueError(f"y shape {y.shape} does not match target dim {targets.shape[1]}")
        if self.sigma_y <= 0:
            raise ValueError("sigma_y must be positive")
        object.__setattr__(self, "targets", targets)
        object.__setattr__(self, "y", y)

    @property
    def dim(self) -> int:
        return self.targets.shape[1]

    def pairs(self) -> list:
        return [(x1, self.y) for x1 in self.targets]

    def with_sigma(self, sigma_y: float) -> "ToyProblem":
        return ToyProblem(self.targets, self.y, sigma_y)


def oracle_field(problem: ToyProblem, path: PathKind = PathKind.JOINT) -> Callable:
    """Exact marginal field ``(x, t) -> u`` of ``problem``."""
    pairs = problem.pairs()

    def f(x, t):
        return marginal_field_oracle(x, t, pairs, problem.sigma_y, path)[0]

    return f


class SignalKind(str, Enum):
    TONE = "tone"
    HARMONIC_STACK = "harmonic_stack"
    CHIRP = "chirp"
    NOISE_BURST = "noise_burst"


def synth_signal(kind, duration: float, sample_rate: int = 48000, seed: int = 0,
                 window_len: int = 1534, freq: float = 440.0, partials: int = 5,
                 f_end: float | None = None, peak: float = 0.9) -> Waveform:
    """Deterministic test signal with peak amplitude ``peak`` (<= 1).

    ``tone``: sinusoid at ``freq`` with a random phase. ``harmonic_stack``:
    ``partials`` harmonics of ``freq`` with 1/k amplitudes. ``chirp``:
    linear sweep from ``freq`` to ``f_end``. ``noise_burst``: white noise
    under a Hann envelope covering the middle half.
    """
    kind = SignalKind(kind)
    n = int(round(duration * sample_rate))
    if n < window_len:
        raise ValueError(
            f"duration {duration}s gives {n} samples, fewer than window_len={window_len}"
        )
    if not 0 < peak <= 1:
        raise ValueError("peak must lie in (0, 1]")
    rng = np.random.default_rng(seed)
    t = np.arange(n) / sample_rate
    if kind is SignalKind.TONE:
        x = np.sin(2 * np.pi * freq * t + rng.uniform(0, 2 * np.pi))
    elif kind is SignalKind.HARMONIC_STACK:
        phases = rng.uniform(0, 2 * np.pi, partials)
        x = sum(np.sin(2 * np.pi * k * freq * t + phases[k - 1]) / k for k in range(1, partials + 1))
    elif kind is SignalKind.CHIRP:
        f1 = f_end if f_end is not None else 4.0 * freq
        x = np.sin(2 * np.pi * (freq * t + 0.5 * (f1 - freq) / duration * t**2))
    else:
        x = np.zeros(n)
        lo, hi = n // 4, n - n // 4
        x[lo:hi] = rng.standard_normal(hi - lo) * np.hanning(hi - lo)
    m = np.max(np.abs(x))
    if m > 0:
        x = x * (peak / m)
    return Waveform(x, sample_rate)


def tone_bursts(duration: float, sample_rate: int = 16000, seed: int = 0, freq: float = 1000.0,
                floor: float = 1e-2, on_range=(0.03, 0.15), off_range=(0.03, 0.15),
                peak: float = 0.9) -> Waveform:
    """Zero-phase sinusoid switched on and off at random times, over white noise.

    Segment lengths are drawn uniformly from ``on_range`` / ``off_range``
    (seconds); the first onset falls in the first 0.125 s. When ``freq`` is a
    multiple of ``sample_rate / hop`` the tone's STFT phase is the same in
    every frame, so tiles differ only in where the bursts start and stop.
    """
    if not 0 < peak <= 1:
        raise ValueError("peak must lie in (0, 1]")
    n = int(round(duration * sample_rate))
    if n < 1:
        raise ValueError(f"duration {duration}s gives no samples")
    rng = np.random.default_rng(seed)
    t = np.arange(n) / sample_rate
    env = np.zeros(n)
    pos = int(rng.integers(0, max(1, int(0.125 * sample_rate))))
    while pos < n:
        on = int(rng.uniform(*on_range) * sample_rate)
        env[pos : pos + on] = 1.0
        pos += on + int(rng.uniform(*off_range) * sample_rate)
    x = env * np.sin(2 * np.pi * freq * t)
    m = np.max(np.abs(x))
    if m > 0:
        x = x * (peak / m)
    x = x + floor * rng.standard_normal(n)
    return Waveform(np.clip(x, -1.0, 1.0), sample_rate)


class DegradeKind(str, Enum):
    SPECTRAL_SMOOTH = "spectral_smooth"
    QUANTIZE = "quantize"
    BAND_NOISE = "band_noise"
    LOWPASS = "lowpass"


@dataclass(frozen=True)
class DegradeSpec:
    """Feature-domain degradation.

    * ``spectral_smooth``: magnitudes Gaussian-smoothed across time with std
      ``strength`` frames, phase kept (0 = identity).
    * ``quantize``: magnitudes of each row rounded to ``levels`` evenly
      spaced values between the row's min and max (0 = identity).
    * ``band_noise``: complex Gaussian noise of std ``strength`` added to
      rows ``band[0] <= f < band[1]``.
    * ``lowpass``: rows above ``cutoff`` set to zero (None = identity).
    """

    kind: DegradeKind
    strength: float = 0.0
    levels: int = 0
    cutoff: int | None = None
    band: tuple = (0, None)

    def __post_init__(self):
        object.__setattr__(self, "kind", DegradeKind(self.kind))
        if self.strength < 0:
            raise ValueError("strength must be non-negative")
        if self.levels < 0 or self.levels == 1:
            raise ValueError("levels must be 0 (off) or >= 2")
        if self.cutoff is not None and self.cutoff < 0:
            raise ValueError("cutoff must be a non-negative row index")


def degrade(features, spec: DegradeSpec, seed: int = 0):
    """Apply ``spec``; returns the same type as ``features`` with the same shape."""
    values = features.values if isinstance(features, ComplexFeatureGrid) else np.asarray(features)
    z = values.astype(np.complex128, copy=True)
    mag, phase = np.abs(z), np.exp(1j * np.angle(z))
    if spec.kind is DegradeKind.SPECTRAL_SMOOTH:
        if spec.strength > 0:
            z = gaussian_smooth(mag, spec.strength, axis=1) * phase
    elif spec.kind is DegradeKind.QUANTIZE:
        if spec.levels:
            lo = mag.min(axis=1, keepdims=True)
            span = mag.max(axis=1, keepdims=True) - lo
            step = np.where(span > 0, span / (spec.levels - 1), 1.0)
            q = lo + np.round((mag - lo) / step) * step
            z = np.where(span > 0, q, mag) * phase
    elif spec.kind is DegradeKind.BAND_NOISE:
        if spec.strength > 0:
            rng = np.random.default_rng(seed)
            lo, hi = spec.band[0], z.shape[0] if spec.band[1] is None else spec.band[1]
            rows = slice(lo, hi)
            shape = z[rows].shape
            z[rows] += spec.strength * (rng.standard_normal(shape) + 1j * rng.standard_normal(shape))
    elif spec.kind is DegradeKind.LOWPASS:
        if spec.cutoff is not None:
            z[spec.cutoff + 1 :] = 0.0
    if isinstance(features, ComplexFeatureGrid):
        return features.with_values(z)
    return z


@dataclass
class SpectralTask:
    """Paired clean/degraded feature grids for the enhancement toy task."""

    config: FeatureConfig
    degradation: DegradeSpec
    sigma: SigmaProfile
    train_clean: list
    train_degraded: list
    test_clean: list
    test_degraded: list
    test_waveforms: list

    @property
    def train_pairs(self) -> list:
        return list(zip(self.train_clean, self.train_degraded))

    @property
    def test_pairs(self) -> list:
        return list(zip(self.test_clean, self.test_degraded))


def spectral_task(n_train: int = 200, n_test: int = 8, duration: float = 0.5,
                  sample_rate: int = 16000, strength: float = 10.0, seed: int = 0,
                  window_len: int = 94, hop_len: int = 32, alpha: float = 0.3,
                  floor: float = 1e-2, bandwidth: float = 3.0) -> SpectralTask:
    """Tone-burst signals degraded by temporal magnitude smoothing.

    beta is estimated on the training signals (99.7% of compressed amplitudes
    map to <= 1) and sigma is the per-frequency heuristic over the training
    pairs, smoothed with ``bandwidth``.
    """
    signals = [tone_bursts(duration, sample_rate, seed=seed * 100_003 + i, floor=floor)
               for i in range(n_train + n_test)]
    base = FeatureConfig(window_len, hop_len, alpha, 1.0)
    beta = estimate_beta(signals[:n_train], alpha, cfg=base).beta
    cfg = FeatureConfig(window_len, hop_len, alpha, beta)
    spec = DegradeSpec(DegradeKind.SPECTRAL_SMOOTH, strength)
    clean = [extract(w, cfg) for w in signals]
    degraded = [degrade(c, spec, seed=i) for i, c in enumerate(clean)]
    sigma = sigma_from_heuristic(list(zip(clean[:n_train], degraded[:n_train])),
                                 per_frequency=True, bandwidth=bandwidth)
    return SpectralTask(cfg, spec, sigma, clean[:n_train], degraded[:n_train],
                        clean[n_train:], degraded[n_train:], signals[n_train:])


@dataclass
class FieldGrid:
    """Field samples on a regular grid; ``flag`` marks far-field points."""

    x: np.ndarray
    y: np.ndarray
    u: np.ndarray
    v: np.ndarray
    density: np.ndarray
    flag: np.ndarray
    t: float
    resolution: int
    bounds: tuple

    @property
    def cell_area(self) -> float:
        (x0, x1), (y0, y1) = self.bounds
        n = self.resolution
        return (x1 - x0) / (n - 1) * (y1 - y0) / (n - 1)


def field_grid(source, t: float, bounds=((-1.0, 2.0), (-1.5, 1.5)), resolution: int = 50,
               path: PathKind = PathKind.JOINT) -> FieldGrid:
    """Evaluate a 2-D field on a ``resolution x resolution`` grid.

    ``source`` is a :class:`ToyProblem` (exact field and mixture density) or a
    callable ``(points, t) -> u`` (density reported as NaN). Points where the
    oracle density underflows get ``u = v = density = 0`` and ``flag = 1``.
    """
    if not 0 <= t < 1:
        raise ValueError("t must lie in [0, 1)")
    if resolution < 2:
        raise ValueError("resolution must be >= 2")
    (x0, x1), (y0, y1) = bounds
    gx, gy = np.meshgrid(np.linspace(x0, x1, resolution), np.linspace(y0, y1, resolution))
    pts = np.stack([gx.ravel(), gy.ravel()], axis=1)
    flag = np.zeros(pts.shape[0], dtype=np.int64)
    if isinstance(source, ToyProblem):
        if source.dim != 2:
            raise ValueError("field_grid needs a 2-D problem")
        pairs = source.pairs()
        try:
            uv, dens = marginal_field_oracle(pts, t, pairs, source.sigma_y, path)
        except FarFieldError:
            uv = np.zeros_like(pts)
            dens = np.zeros(pts.shape[0])
            for i, p in enumerate(pts):
                try:
                    uv[i], dens[i] = marginal_field_oracle(p, t, pairs, source.sigma_y, path)
                except FarFieldError:
                    flag[i] = 1
    else:
        uv = np.asarray(source(pts, t), dtype=np.float64)
        dens = np.full(pts.shape[0], np.nan)
    return FieldGrid(pts[:, 0], pts[:, 1], uv[:, 0], uv[:, 1], dens, flag, float(t),
                     resolution, ((x0, x1), (y0, y1)))


@dataclass
class DispersionReport:
    mean_distance: float
    std: float
    endpoints: np.ndarray
    nfe: int
    distances: np.ndarray = field(repr=False, default=None)


def endpoint_dispersion(source, problem: ToyProblem, n_samples: int, solver: SolverConfig,
                        seed: int = 0, path: PathKind = PathKind.JOINT) -> DispersionReport:
    """Solve from ``n`` prior draws ``y + sigma_y * eps`` and summarize the endpoints.

    ``source`` is ``"oracle"`` (exact marginal field of ``problem`` on
    ``path``) or a callable field. ``std`` is the per-coordinate RMS spread
    of the endpoints around their mean.
    """
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    field_fn = oracle_field(problem, path) if isinstance(source, str) and source == "oracle" else source
    rng = np.random.default_rng(seed)
    x0 = problem.y[None, :] + problem.sigma_y * rng.standard_normal((n_samples, problem.dim))
    run = solve(field_fn, x0, solver)
    ends = np.asarray(run.endpoint)
    dists = np.linalg.norm(ends[:, None, :] - problem.targets[None, :, :], axis=-1).min(axis=1)
    spread = ends - ends.mean(axis=0)
    std = float(np.sqrt(np.mean(spread**2))) if n_samples > 1 else 0.0
    return DispersionReport(float(dists.mean()), std, ends, run.nfe, dists)


def _angle_deg(a, b) -> float:
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        return 180.0
    c = np.clip(np.dot(a, b) / (na * nb), -1.0, 1.0)
    return math.degrees(math.acos(c))


@dataclass
class RegimeResult:
    sigma: float
    t_star: float
    target_index: int
    times: np.ndarray
    mean_angles: np.ndarray
    target_angles: np.ndarray
    trajectory: np.ndarray


def transition_time(problem: ToyProblem, threshold_deg: float = 10.0, steps: int = 400) -> RegimeResult:
    """First time the field along the noise-free trajectory from ``y`` aims at one target.

    The trajectory starts at ``y`` (``eps = 0``) and is integrated with the
    midpoint rule on the exact field. At each grid time ``t`` the field
    direction is compared with the direction to the targets' mean and to each
    target; ``t*`` is the first time the angle to some individual target is
    within ``threshold_deg``. With one target the mean is the target, so
    ``t* = 0``. The sweep stops early if the trajectory reaches a point where
    the mixture density underflows; ``t*`` stays 1 when no target was aimed at.
    """
    pairs = problem.pairs()
    mean_target = problem.targets.mean(axis=0)
    x = problem.y.copy()
    h = 1.0 / steps
    times, mang, tang, traj = [], [], [], [x.copy()]
    t_star, which = 1.0, -1
    f = lambda p, s: marginal_field_oracle(p, s, pairs, problem.sigma_y)[0]  # noqa: E731
    for k in range(steps):
        t = k * h
        try:
            u = f(x, t)
            nxt = x + h * f(x + 0.5 * h * u, t + 0.5 * h)
        except FarFieldError:
            # a trajectory stuck between symmetric targets leaves the support near t = 1
            break
        angs = [_angle_deg(u, x1 - x) for x1 in problem.targets]
        times.append(t)
        mang.append(_angle_deg(u, mean_target - x))
        tang.append(angs)
        if which < 0 and min(angs) <= threshold_deg:
            t_star, which = t, int(np.argmin(angs))
        x = nxt
        traj.append(x.copy())
    return RegimeResult(problem.sigma_y, t_star, which, np.array(times), np.array(mang),
                        np.array(tang), np.array(traj))


def sigma_regimes_experiment(problem: ToyProblem, sigmas: Sequence[float] = (1.6, 0.4, 0.1),
                             threshold_deg: float = 10.0, steps: int = 400) -> list:
    """:func:`transition_time` for each prior scale in ``sigmas``."""
    if problem.targets.shape[0] < 1:
        raise ValueError("need at least one target")
    return [transition_time(problem.with_sigma(s), threshold_deg, steps) for s in sigmas]


def write_field_grid_csv(path, grid: FieldGrid) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["x", "y", "u", "v", "density", "far_field"])
        for row in zip(grid.x, grid.y, grid.u, grid.v, grid.density, grid.flag):
            w.writerow([f"{row[0]:.9g}", f"{row[1]:.9g}", f"{row[2]:.9g}", f"{row[3]:.9g}",
                        f"{row[4]:.9g}", int(row[5])])


def write_dispersion_csv(path, report: DispersionReport) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        dim = report.endpoints.shape[1]
        w.writerow(["sample", *[f"x{i}" for i in range(dim)], "distance_to_nearest_target"])
        for i, (e, d) in enumerate(zip(report.endpoints, report.distances)):
            w.writerow([i, *[f"{v:.9g}" for v in e], f"{d:.9g}"])
        w.writerow([])
        w.writerow(["mean_distance", f"{report.mean_distance:.9g}"])
        w.writerow(["std", f"{report.std:.9g}"])
        w.writerow(["nfe", report.nfe])


def write_regimes_csv(path, results: Sequence[RegimeResult]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["sigma", "t_star", "target_index"])
        for r in results:
            w.writerow([f"{r.sigma:.9g}", f"{r.t_star:.9g}", r.target_index])
