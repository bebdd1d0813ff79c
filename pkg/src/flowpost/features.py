"""Amplitude-compressed complex STFT features and their inverse.

The forward map is ``beta * |STFT(x)|**alpha * exp(i * angle(STFT(x)))`` on a
centered (reflection padded), Hann-windowed, one-sided STFT. The inverse is a
weighted overlap-add normalized by the summed squared window, which is the
least-squares inverse for any hop that keeps the window sum nonzero.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

__all__ = [
    "Waveform",
    "FeatureConfig",
    "ComplexFeatureGrid",
    "BetaEstimate",
    "hann_window",
    "num_frames",
    "stft",
    "istft",
    "compress",
    "decompress",
    "extract",
    "invert",
    "estimate_beta",
]


@dataclass(frozen=True)
class Waveform:
    """Mono audio samples with their sample rate in Hz."""

    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        samples = np.asarray(self.samples, dtype=np.float64)
        if samples.ndim != 1:
            raise ValueError(f"waveform must be 1-D, got shape {samples.shape}")
        if self.sample_rate <= 0:
            raise ValueError(f"sample_rate must be positive, got {self.sample_rate}")
        if not np.all(np.isfinite(samples)):
            raise ValueError("waveform contains non-finite samples")
        object.__setattr__(self, "samples", samples)

    def __len__(self):
        return self.samples.shape[0]

    @property
    def duration(self) -> float:
        return len(self) / self.sample_rate


@dataclass(frozen=True)
class FeatureConfig:
    """STFT and compression parameters.

    Defaults are the 48 kHz setting: 1534-sample Hann window (F = 768 bins),
    hop 384, compression exponent 0.3 and scale 0.66.
    """

    window_len: int = 1534
    hop_len: int = 384
    alpha: float = 0.3
    beta: float = 0.66

    def __post_init__(self):
        if not 0 < self.hop_len <= self.window_len:
            raise ValueError(
                f"need 0 < hop_len <= window_len, got hop={self.hop_len}, window={self.window_len}"
            )
        if not 0 < self.alpha <= 1:
            raise ValueError(f"alpha must be in (0, 1], got {self.alpha}")
        if self.beta <= 0:
            raise ValueError(f"beta must be positive, got {self.beta}")

    @property
    def n_freqs(self) -> int:
        return self.window_len // 2 + 1


@dataclass(frozen=True)
class ComplexFeatureGrid:
    """F x T complex features plus what is needed to invert them."""

    values: np.ndarray
    config: FeatureConfig = field(default_factory=FeatureConfig)
    num_samples: int = 0

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.complex128)
        if values.ndim != 2:
            raise ValueError(f"feature grid must be 2-D, got shape {values.shape}")
        if values.shape[0] != self.config.n_freqs:
            raise ValueError(
                f"grid has {values.shape[0]} rows, config implies {self.config.n_freqs}"
            )
        if not np.all(np.isfinite(values)):
            raise ValueError("feature grid contains non-finite values")
        object.__setattr__(self, "values", values)

    @property
    def shape(self):
        return self.values.shape

    def with_values(self, values: np.ndarray) -> "ComplexFeatureGrid":
        return ComplexFeatureGrid(values, self.config, self.num_samples)


def hann_window(n: int) -> np.ndarray:
    """Periodic Hann window of length ``n``."""
    return 0.5 - 0.5 * np.cos(2.0 * np.pi * np.arange(n) / n)


def num_frames(num_samples: int, cfg: FeatureConfig) -> int:
    pad = cfg.window_len // 2
    return 1 + (num_samples + 2 * pad - cfg.window_len) // cfg.hop_len


def _samples(w) -> np.ndarray:
    if isinstance(w, Waveform):
        return w.samples
    x = np.asarray(w, dtype=np.float64)
    if x.ndim != 1:
        raise ValueError(f"expected a 1-D signal, got shape {x.shape}")
    return x


def stft(w, cfg: FeatureConfig = FeatureConfig()) -> np.ndarray:
    """One-sided complex STFT, shape ``(window_len // 2 + 1, frames)``.

    Frames are centered: the signal is reflection padded by half a window on
    both sides, so frame ``m`` is centered on sample ``m * hop_len``.
    """
    x = _samples(w)
    if x.shape[0] < cfg.window_len:
        raise ValueError(
            f"waveform has {x.shape[0]} samples; at least window_len={cfg.window_len} required"
        )
    pad = cfg.window_len // 2
    padded = np.pad(x, pad, mode="reflect")
    frames = np.lib.stride_tricks.sliding_window_view(padded, cfg.window_len)[:: cfg.hop_len]
    frames = frames[: num_frames(x.shape[0], cfg)]
    return np.fft.rfft(frames * hann_window(cfg.window_len), axis=-1).T


def istft(grid: np.ndarray, cfg: FeatureConfig = FeatureConfig(), num_samples: int | None = None) -> np.ndarray:
    """Weighted overlap-add inverse of :func:`stft`.

    Raises:
        ValueError: on a grid whose row count does not match ``cfg`` or when
            the summed squared window vanishes inside the output range.
    """
    grid = np.asarray(grid)
    if grid.ndim != 2 or grid.shape[0] != cfg.n_freqs:
        raise ValueError(f"grid shape {grid.shape} inconsistent with {cfg.n_freqs} frequency rows")
    n_frames = grid.shape[1]
    pad = cfg.window_len // 2
    if num_samples is None:
        num_samples = (n_frames - 1) * cfg.hop_len
    window = hann_window(cfg.window_len)
    frames = np.fft.irfft(grid.T, n=cfg.window_len, axis=-1) * window

    total = (n_frames - 1) * cfg.hop_len + cfg.window_len
    out = np.zeros(max(total, pad + num_samples))
    norm = np.zeros_like(out)
    win_sq = window**2
    for m in range(n_frames):
        start = m * cfg.hop_len
        out[start : start + cfg.window_len] += frames[m]
        norm[start : start + cfg.window_len] += win_sq

    out = out[pad : pad + num_samples]
    norm = norm[pad : pad + num_samples]
    if num_samples and norm.min() < 1e-10:
        bad = int(np.argmin(norm))
        raise ValueError(
            f"overlap-add normalization vanishes at sample {bad}; window/hop do not cover the signal"
        )
    return out / np.where(norm > 0, norm, 1.0)


def compress(grid, alpha: float = 0.3, beta: float = 0.66) -> np.ndarray:
    """Map each entry ``m * exp(i phi)`` to ``beta * m**alpha * exp(i phi)``."""
    z = np.asarray(grid, dtype=np.complex128)
    mag = np.abs(z)
    nz = mag > 0
    scale = np.zeros_like(mag)
    scale[nz] = beta * mag[nz] ** (alpha - 1.0)
    return z * scale


def decompress(features, alpha: float = 0.3, beta: float = 0.66) -> np.ndarray:
    """Inverse of :func:`compress`."""
    z = np.asarray(features, dtype=np.complex128)
    mag = np.abs(z)
    nz = mag > 0
    scale = np.zeros_like(mag)
    # target magnitude (m / beta) ** (1 / alpha), divided by current m
    scale[nz] = (mag[nz] / beta) ** (1.0 / alpha) / mag[nz]
    return z * scale


def extract(w, cfg: FeatureConfig = FeatureConfig()) -> ComplexFeatureGrid:
    """Waveform to compressed complex features."""
    x = _samples(w)
    values = compress(stft(x, cfg), cfg.alpha, cfg.beta)
    return ComplexFeatureGrid(values, cfg, x.shape[0])


def invert(features: ComplexFeatureGrid, num_samples: int | None = None) -> np.ndarray:
    """Compressed features back to samples."""
    cfg = features.config
    n = features.num_samples if num_samples is None else num_samples
    return istft(decompress(features.values, cfg.alpha, cfg.beta), cfg, n)


@dataclass(frozen=True)
class BetaEstimate:
    quantile_value: float
    beta: float
    quantile: float
    target_bound: float


def estimate_beta(
    corpus: Sequence | Iterable,
    alpha: float = 0.3,
    quantile: float = 0.997,
    target_bound: float = 1.0,
    cfg: FeatureConfig = FeatureConfig(),
) -> BetaEstimate:
    """Calibrate the feature scale from a corpus.

    Pools ``|STFT|**alpha`` over every item and takes the requested quantile
    ``q`` (linear interpolation between order statistics). The returned
    ``beta = target_bound / q`` maps that quantile onto ``target_bound``.

    Items may be :class:`Waveform` objects, 1-D real arrays (transformed with
    ``cfg``) or complex 2-D arrays taken as precomputed spectra.
    """
    pooled = []
    for item in corpus:
        arr = item.samples if isinstance(item, Waveform) else np.asarray(item)
        if np.iscomplexobj(arr) or arr.ndim == 2:
            spec = arr
        else:
            spec = stft(arr, cfg)
        pooled.append(np.abs(spec).ravel() ** alpha)
    if not pooled:
        raise ValueError("estimate_beta needs a non-empty corpus")
    q = float(np.quantile(np.concatenate(pooled), quantile, method="linear"))
    if q <= 0:
        raise ValueError("corpus amplitude quantile is zero; corpus is silent")
    return BetaEstimate(q, target_bound / q, quantile, target_bound)
