"""Noise-scale calibration for the joint flow prior.

``sigma = sqrt(Q(|X* - Y|**2, q)) / 3`` over clean/degraded feature pairs,
either pooled globally or independently per frequency row, with optional
Gaussian smoothing of the per-frequency curve.
"""

from __future__ import annotations

import math
from fractions import Fraction
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Sequence

import numpy as np

from .features import ComplexFeatureGrid

__all__ = [
    "ProfileKind",
    "SigmaProfile",
    "linear_quantile",
    "squared_residual_quantile",
    "sigma_from_heuristic",
    "gaussian_kernel",
    "gaussian_smooth",
    "save_profile",
    "load_profile",
    "PROFILE_FLOOR",
]

PROFILE_FLOOR = 1e-4
KERNEL_TRUNCATE = 4.0


class ProfileKind(str, Enum):
    SCALAR = "scalar"
    PER_FREQUENCY = "per_frequency"


@dataclass(frozen=True)
class SigmaProfile:
    """Scalar or per-frequency-row noise scale."""

    kind: ProfileKind
    values: np.ndarray

    def __post_init__(self):
        kind = ProfileKind(self.kind)
        values = np.atleast_1d(np.asarray(self.values, dtype=np.float64))
        if values.ndim != 1:
            raise ValueError("profile values must be 1-D")
        if kind is ProfileKind.SCALAR and values.shape[0] != 1:
            raise ValueError("scalar profile holds exactly one value")
        if not np.all(values > 0) or not np.all(np.isfinite(values)):
            raise ValueError("profile values must be finite and strictly positive")
        object.__setattr__(self, "kind", kind)
        object.__setattr__(self, "values", values)

    @classmethod
    def scalar(cls, value: float) -> "SigmaProfile":
        return cls(ProfileKind.SCALAR, np.array([float(value)]))

    @classmethod
    def per_frequency(cls, values) -> "SigmaProfile":
        return cls(ProfileKind.PER_FREQUENCY, np.asarray(values, dtype=np.float64))

    @property
    def is_scalar(self) -> bool:
        return self.kind is ProfileKind.SCALAR

    def __len__(self):
        return self.values.shape[0]

    def broadcast_to(self, shape) -> np.ndarray:
        """Scale array broadcastable against an array of ``shape``.

        Per-frequency profiles index the first (row) axis.
        """
        if self.is_scalar:
            return np.float64(self.values[0])
        shape = tuple(shape)
        if not shape or shape[0] != len(self):
            raise ValueError(
                f"per-frequency profile of length {len(self)} does not match leading axis of {shape}"
            )
        return self.values.reshape((-1,) + (1,) * (len(shape) - 1))

    def scaled(self, c: float) -> "SigmaProfile":
        return SigmaProfile(self.kind, self.values * c)


def _as_array(g) -> np.ndarray:
    return g.values if isinstance(g, ComplexFeatureGrid) else np.asarray(g)


def _residuals(pairs, per_frequency: bool):
    if len(pairs) == 0:
        raise ValueError("need at least one (clean, degraded) pair")
    rows = None
    out = []
    for clean, degraded in pairs:
        a, b = _as_array(clean), _as_array(degraded)
        if a.shape != b.shape:
            raise ValueError(f"pair shape mismatch: {a.shape} vs {b.shape}")
        if per_frequency:
            if a.ndim != 2:
                raise ValueError("per-frequency mode needs 2-D F x T grids")
            if rows is not None and a.shape[0] != rows:
                raise ValueError(f"pairs disagree on F: {a.shape[0]} vs {rows}")
            rows = a.shape[0]
            out.append(np.abs(a - b) ** 2)
        else:
            out.append((np.abs(a - b) ** 2).ravel())
    return np.concatenate(out, axis=1 if per_frequency else 0)


def linear_quantile(values, q: float, axis: int = -1):
    """Sort-based quantile with linear interpolation between order statistics.

    The position ``q * (n - 1)`` is split into integer and fractional parts
    in exact rational arithmetic, so the result is a single interpolation
    ``a + g * (b - a)`` between neighbouring sorted values.
    """
    s = np.sort(np.asarray(values, dtype=np.float64), axis=axis)
    n = s.shape[axis]
    if n == 0:
        raise ValueError("quantile of an empty set")
    pos = Fraction(q) * (n - 1)
    lo = int(pos)
    g = float(pos - lo)
    a = np.take(s, lo, axis=axis)
    if lo + 1 >= n:
        return a
    b = np.take(s, lo + 1, axis=axis)
    return a + g * (b - a)


def squared_residual_quantile(pairs: Sequence, q: float = 0.997, per_frequency: bool = False):
    """Quantile ``q`` of ``|clean - degraded|**2``.

    Returns a float (global pooling) or an F-length array (per row, pooled
    over time and over all pairs). Linear interpolation between order
    statistics.
    """
    if not 0 < q < 1:
        raise ValueError(f"q must be in (0, 1), got {q}")
    res = _residuals(pairs, per_frequency)
    if per_frequency:
        return linear_quantile(res, q, axis=1)
    return float(linear_quantile(res, q))


def sigma_from_heuristic(
    pairs: Sequence,
    q: float = 0.997,
    per_frequency: bool = False,
    bandwidth: float | None = None,
    floor: float = PROFILE_FLOOR,
) -> SigmaProfile:
    """Three-sigma rule: ``sigma = sqrt(quantile) / 3``.

    Per-frequency curves are optionally smoothed with :func:`gaussian_smooth`
    and then floored at ``floor`` so silent rows keep a proper Gaussian.
    """
    quant = squared_residual_quantile(pairs, q, per_frequency)
    if per_frequency:
        sigma = np.sqrt(quant) / 3.0
        if bandwidth:
            sigma = gaussian_smooth(sigma, bandwidth)
        return SigmaProfile.per_frequency(np.maximum(sigma, floor))
    return SigmaProfile.scalar(max(math.sqrt(quant) / 3.0, floor))


def gaussian_kernel(bandwidth: float, truncate: float = KERNEL_TRUNCATE) -> np.ndarray:
    """Normalized sampled Gaussian, std ``bandwidth`` bins, support +-``truncate`` std."""
    if bandwidth <= 0:
        raise ValueError(f"bandwidth must be positive, got {bandwidth}")
    radius = int(truncate * bandwidth + 0.5)
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-0.5 * (x / bandwidth) ** 2)
    return k / k.sum()


def gaussian_smooth(profile, bandwidth: float, axis: int = -1) -> np.ndarray:
    """Convolve with :func:`gaussian_kernel` using half-sample symmetric reflection.

    That boundary keeps the mean of the profile unchanged.
    """
    p = np.asarray(profile, dtype=np.float64)
    kernel = gaussian_kernel(bandwidth)
    radius = kernel.shape[0] // 2
    p = np.moveaxis(p, axis, -1)
    pad = [(0, 0)] * (p.ndim - 1) + [(radius, radius)]
    ext = np.pad(p, pad, mode="symmetric")
    windows = np.lib.stride_tricks.sliding_window_view(ext, kernel.shape[0], axis=-1)
    out = windows @ kernel[::-1]
    return np.moveaxis(out, -1, axis)


def save_profile(path, profile: SigmaProfile, q: float, bandwidth: float | None) -> None:
    """One value per line after a single header row."""
    bw = "none" if not bandwidth else repr(float(bandwidth))
    lines = [f"# kind={profile.kind.value} F={len(profile)} q={q!r} bandwidth={bw}"]
    lines += [repr(float(v)) for v in profile.values]
    Path(path).write_text("\n".join(lines) + "\n")


def load_profile(path) -> tuple[SigmaProfile, dict]:
    text = Path(path).read_text().splitlines()
    if not text or not text[0].startswith("#"):
        raise ValueError(f"{path}: missing profile header")
    header = dict(item.split("=", 1) for item in text[0][1:].split())
    values = np.array([float(v) for v in text[1:] if v.strip()])
    if int(header["F"]) != values.shape[0]:
        raise ValueError(f"{path}: header says F={header['F']}, found {values.shape[0]} values")
    return SigmaProfile(ProfileKind(header["kind"]), values), header
