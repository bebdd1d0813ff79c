"""Probability paths, conditional fields and training targets.

Two paths are supported, both conditioned on a clean target ``x1`` and its
degraded observation ``y``:

* joint (contractive): ``x_t ~ N(y + t (x1 - y), (1 - t)^2 sigma^2)``, so
  ``x0 = y + sigma * eps`` and the regression target is ``x1 - x0``;
* constant sigma (baseline): ``x_t = t x1 + (1 - t) y + sigma * eps`` with
  target ``x1 - y``; the endpoint keeps noise of scale ``sigma``.

Complex arrays are treated as stacked real and imaginary channels; the noise
scale applies to both equally.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from typing import Sequence

import numpy as np
from scipy.special import logsumexp

from .calibration import SigmaProfile

__all__ = [
    "PathKind",
    "PathSpec",
    "FlowSample",
    "FarFieldError",
    "T_SINGULAR_GUARD",
    "sample_x0",
    "sample_xt",
    "conditional_field",
    "jfm_training_pair",
    "constant_sigma_training_pair",
    "training_pair",
    "jfm_loss",
    "marginal_field_oracle",
    "standard_noise",
]

T_SINGULAR_GUARD = 1e-9


class PathKind(str, Enum):
    JOINT = "joint"
    CONSTANT_SIGMA = "constant_sigma"


@dataclass(frozen=True)
class PathSpec:
    kind: PathKind
    sigma: SigmaProfile

    def __post_init__(self):
        object.__setattr__(self, "kind", PathKind(self.kind))

    @classmethod
    def joint(cls, sigma) -> "PathSpec":
        return cls(PathKind.JOINT, _profile(sigma))

    @classmethod
    def constant_sigma(cls, sigma) -> "PathSpec":
        return cls(PathKind.CONSTANT_SIGMA, _profile(sigma))

    def std(self, t: float) -> np.ndarray:
        """Per-entry standard deviation of the conditional path at time ``t``."""
        s = self.sigma.values
        if self.kind is PathKind.JOINT:
            return (1.0 - t) * s
        return s.copy()


@dataclass
class FlowSample:
    x_t: np.ndarray
    t: np.ndarray
    target_u: np.ndarray
    x0: np.ndarray
    x1: np.ndarray
    y: np.ndarray
    epsilon: np.ndarray


class FarFieldError(ValueError):
    """Every mixture component density underflowed at a query point."""

    def __init__(self, point, t):
        self.point = np.asarray(point)
        self.t = t
        super().__init__(f"mixture density underflows to zero at x={self.point.tolist()}, t={t}")


def _profile(sigma) -> SigmaProfile:
    return sigma if isinstance(sigma, SigmaProfile) else SigmaProfile.scalar(float(sigma))


def _check_shapes(*arrays):
    shape = np.shape(arrays[0])
    for a in arrays[1:]:
        if np.shape(a) != shape:
            raise ValueError(f"shape mismatch: {shape} vs {np.shape(a)}")


def _check_t(t, upper_open=False):
    t_arr = np.asarray(t, dtype=np.float64)
    if np.any(t_arr < 0) or np.any(t_arr > 1):
        raise ValueError(f"t must lie in [0, 1], got {t}")
    if upper_open and np.any(t_arr >= 1.0 - T_SINGULAR_GUARD):
        raise ValueError(f"conditional field is singular at t -> 1 (got t={t})")
    return t_arr


def _t_like(t, x):
    """Broadcast a scalar or per-row time against a batch array."""
    t = np.asarray(t, dtype=np.float64)
    if t.ndim == 0:
        return t
    return t.reshape(t.shape + (1,) * (np.ndim(x) - t.ndim))


def standard_noise(rng: np.random.Generator, like) -> np.ndarray:
    """Unit Gaussian noise shaped like ``like``; complex gets N(0, 1) per part."""
    like = np.asarray(like)
    if np.iscomplexobj(like):
        return rng.standard_normal(like.shape) + 1j * rng.standard_normal(like.shape)
    return rng.standard_normal(like.shape)


def _sigma_times(sigma, epsilon) -> np.ndarray:
    # an ndarray is taken as an explicit per-entry scale map
    if isinstance(sigma, np.ndarray) and sigma.ndim > 0:
        return np.broadcast_to(sigma, np.shape(epsilon)) * epsilon
    prof = _profile(sigma)
    return prof.broadcast_to(np.shape(epsilon)) * epsilon


def sample_x0(y, sigma, epsilon) -> np.ndarray:
    """Prior sample ``y + sigma * epsilon``; per-frequency sigma scales rows."""
    _check_shapes(y, epsilon)
    return np.asarray(y) + _sigma_times(sigma, epsilon)


def sample_xt(x1, x0, t) -> np.ndarray:
    """Straight-line interpolant ``t x1 + (1 - t) x0``."""
    _check_shapes(x1, x0)
    t = _t_like(_check_t(t), x1)
    return t * np.asarray(x1) + (1.0 - t) * np.asarray(x0)


def conditional_field(x_t, x1, t) -> np.ndarray:
    """``(x1 - x_t) / (1 - t)``; undefined as ``t -> 1``."""
    _check_shapes(x_t, x1)
    t = _t_like(_check_t(t, upper_open=True), x1)
    return (np.asarray(x1) - np.asarray(x_t)) / (1.0 - t)


def jfm_training_pair(x1, y, sigma, epsilon, t) -> FlowSample:
    """Joint-path training sample; the target ``x1 - x0`` stays finite at t = 1."""
    _check_shapes(x1, y, epsilon)
    x0 = sample_x0(y, sigma, epsilon)
    x_t = sample_xt(x1, x0, t)
    return FlowSample(x_t, np.asarray(t, dtype=np.float64), np.asarray(x1) - x0, x0,
                      np.asarray(x1), np.asarray(y), np.asarray(epsilon))


def constant_sigma_training_pair(x1, y, sigma_const, epsilon, t) -> FlowSample:
    """Constant-noise baseline: target ``x1 - y`` does not see the noise draw."""
    _check_shapes(x1, y, epsilon)
    t_arr = _t_like(_check_t(t), x1)
    x1, y = np.asarray(x1), np.asarray(y)
    noise = _sigma_times(sigma_const, epsilon)
    x_t = t_arr * x1 + (1.0 - t_arr) * y + noise
    return FlowSample(x_t, np.asarray(t, dtype=np.float64), x1 - y, y + noise, x1, y,
                      np.asarray(epsilon))


def training_pair(path: PathSpec, x1, y, epsilon, t, sigma=None) -> FlowSample:
    """Dispatch on the path kind; ``sigma`` overrides the path's own scale."""
    sigma = path.sigma if sigma is None else sigma
    if path.kind is PathKind.JOINT:
        return jfm_training_pair(x1, y, sigma, epsilon, t)
    return constant_sigma_training_pair(x1, y, sigma, epsilon, t)


def _real_view(a) -> np.ndarray:
    a = np.asarray(a)
    if np.iscomplexobj(a):
        return np.stack([a.real, a.imag])
    return a.astype(np.float64, copy=False)


def jfm_loss(model_output, target_u) -> float:
    """Mean squared error; complex entries count as two real entries."""
    _check_shapes(model_output, target_u)
    d = _real_view(model_output) - _real_view(target_u)
    return float(np.mean(d * d))


def marginal_field_oracle(x, t: float, targets: Sequence, sigma, path: PathKind | str = PathKind.JOINT):
    """Exact marginal field and density of an equal-weight Gaussian mixture path.

    Args:
        x: query points, shape ``(d,)`` or ``(n, d)``.
        t: time in ``[0, 1)``.
        targets: ``(x1_k, y_k)`` pairs, each of shape ``(d,)``.
        sigma: scalar or per-dimension noise scale.
        path: joint (default) or constant-sigma conditional paths.

    Returns:
        ``(u, density)`` with ``u`` shaped like ``x`` and one density per point.

    Raises:
        FarFieldError: when all component densities underflow at some point.
    """
    path = PathKind(path)
    t = float(_check_t(t, upper_open=(path is PathKind.JOINT)))
    if len(targets) == 0:
        raise ValueError("need at least one target")
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    pts = np.atleast_2d(x)
    x1s = np.array([np.asarray(a, dtype=np.float64) for a, _ in targets])
    ys = np.array([np.asarray(b, dtype=np.float64) for _, b in targets])
    if x1s.shape[1] != pts.shape[1]:
        raise ValueError(f"dimension mismatch: points {pts.shape[1]}, targets {x1s.shape[1]}")
    prof = _profile(sigma)
    s = prof.values if not prof.is_scalar else np.full(pts.shape[1], prof.values[0])
    if path is PathKind.JOINT:
        std = (1.0 - t) * s
        means = ys + t * (x1s - ys)
        fields = (x1s[None, :, :] - pts[:, None, :]) / (1.0 - t)
    else:
        std = s
        means = t * x1s + (1.0 - t) * ys
        fields = np.broadcast_to((x1s - ys)[None], (pts.shape[0],) + x1s.shape)

    diff = (pts[:, None, :] - means[None, :, :]) / std
    log_norm = -0.5 * pts.shape[1] * np.log(2 * np.pi) - np.sum(np.log(std))
    log_comp = -0.5 * np.sum(diff**2, axis=-1) + log_norm  # (n, K)
    log_mix = logsumexp(log_comp, axis=1) - np.log(len(targets))
    density = np.exp(log_mix)
    if np.any(density == 0.0):
        bad = int(np.argmax(density == 0.0))
        raise FarFieldError(pts[bad], t)
    w = np.exp(log_comp - logsumexp(log_comp, axis=1, keepdims=True))
    u = np.einsum("nk,nkd->nd", w, fields)
    if single:
        return u[0], float(density[0])
    return u, density
