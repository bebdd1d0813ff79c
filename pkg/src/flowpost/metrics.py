"""Objective metrics and auxiliary codec losses.

SI-SDR, frequency-weighted segmental SNR, log-spectral MSE, a direct-kernel
constant-Q transform, the multiscale CQT loss and the weighted L1 waveform
loss.
"""

from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Sequence

import numpy as np
from scipy import fft as sfft

from .features import FeatureConfig, stft

__all__ = [
    "SI_SDR_CAP_DB",
    "si_sdr",
    "log_spec_mse",
    "fwssnr",
    "FWSSNR_CLIP",
    "mel_band_weights",
    "CqtConfig",
    "cqt_frequencies",
    "cqt_magnitude",
    "multiscale_cqt_loss",
    "l1_waveform_loss",
    "MetricsReport",
    "evaluate_pair",
    "build_report",
    "write_report_csv",
]

SI_SDR_CAP_DB = 100.0
LOG_SPEC_FLOOR = 1e-8
CQT_LOG_FLOOR = 1e-5
FWSSNR_CLIP = (-10.0, 35.0)
FWSSNR_BANDS = 25
FWSSNR_GAMMA = 0.2
MULTISCALE_BINS = (16, 32, 48, 64, 80)


def _pair(estimate, reference):
    est = np.asarray(getattr(estimate, "samples", estimate), dtype=np.float64)
    ref = np.asarray(getattr(reference, "samples", reference), dtype=np.float64)
    if est.shape != ref.shape:
        raise ValueError(f"length mismatch: estimate {est.shape} vs reference {ref.shape}")
    return est, ref


def si_sdr(estimate, reference) -> float:
    """Scale-invariant SDR in dB, capped at +100 dB for a vanishing residual."""
    est, ref = _pair(estimate, reference)
    ref_energy = float(np.dot(ref, ref))
    if ref_energy == 0.0:
        raise ValueError("SI-SDR is undefined for a silent reference")
    scale = float(np.dot(est, ref)) / ref_energy
    target = scale * ref
    resid = target - est
    num, den = float(np.dot(target, target)), float(np.dot(resid, resid))
    if den == 0.0 or num == 0.0 and den == 0.0:
        return SI_SDR_CAP_DB
    if num == 0.0:
        return -math.inf
    return min(10.0 * math.log10(num / den), SI_SDR_CAP_DB)


def _analysis_config(sample_rate: int) -> FeatureConfig:
    """32 ms Hann window with 75 % overlap."""
    win = int(round(0.032 * sample_rate))
    win += win % 2
    return FeatureConfig(window_len=win, hop_len=win // 4)


def log_spec_mse(estimate, reference, sample_rate: int = 48000) -> float:
    """MSE between ``20 log10(|STFT| + 1e-8)`` spectrograms, in dB^2."""
    est, ref = _pair(estimate, reference)
    cfg = _analysis_config(sample_rate)
    a = 20.0 * np.log10(np.abs(stft(est, cfg)) + LOG_SPEC_FLOOR)
    b = 20.0 * np.log10(np.abs(stft(ref, cfg)) + LOG_SPEC_FLOOR)
    return float(np.mean((a - b) ** 2))


def _mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f) / 700.0)


def _imel(m):
    return 700.0 * (10.0 ** (np.asarray(m) / 2595.0) - 1.0)


@lru_cache(maxsize=16)
def mel_band_weights(n_fft: int, sample_rate: int, n_bands: int = FWSSNR_BANDS) -> np.ndarray:
    """Gaussian band responses, centers equally spaced on the mel scale.

    Each band's standard deviation is half the distance between its
    neighbouring centers. Shape ``(n_bands, n_fft // 2 + 1)``.
    """
    edges = _imel(np.linspace(_mel(0.0), _mel(sample_rate / 2.0), n_bands + 2))
    centers = edges[1:-1]
    widths = (edges[2:] - edges[:-2]) / 4.0
    freqs = np.arange(n_fft // 2 + 1) * sample_rate / n_fft
    w = np.exp(-0.5 * ((freqs[None, :] - centers[:, None]) / widths[:, None]) ** 2)
    w.setflags(write=False)
    return w


def fwssnr(estimate, reference, sample_rate: int = 48000) -> float:
    """Frequency-weighted segmental SNR in dB.

    Per 32 ms frame (75 % overlap) and per mel band ``j``:
    ``SNR_j = 10 log10(sum G_j |X|^2 / sum G_j |X - X_hat|^2)`` clipped to
    [-10, 35] dB, averaged with weights ``(sum G_j |X|)^0.2``. The error is
    taken on complex spectra, so a polarity flip counts as distortion.
    Frames whose reference is silent are skipped.
    """
    est, ref = _pair(estimate, reference)
    cfg = _analysis_config(sample_rate)
    x = stft(ref, cfg)
    err = x - stft(est, cfg)
    g = mel_band_weights(cfg.window_len, sample_rate)
    sig = g @ np.abs(x) ** 2
    noise = g @ np.abs(err) ** 2
    lo, hi = FWSSNR_CLIP
    with np.errstate(divide="ignore", invalid="ignore"):
        snr = 10.0 * np.log10(sig / noise)
    snr = np.where(noise == 0.0, hi, snr)
    snr = np.clip(np.nan_to_num(snr, nan=lo, neginf=lo, posinf=hi), lo, hi)
    weights = (g @ np.abs(x)) ** FWSSNR_GAMMA
    total = weights.sum(axis=0)
    keep = total > 0
    if not np.any(keep):
        raise ValueError("fwSSNR is undefined for a silent reference")
    frame_vals = np.sum(weights[:, keep] * snr[:, keep], axis=0) / total[keep]
    return float(np.mean(np.clip(frame_vals, lo, hi)))


@dataclass(frozen=True)
class CqtConfig:
    bins_per_octave: int = 48
    octaves: int = 9
    hop: int = 256
    f_min: float = 27.5
    sample_rate: int = 48000

    def __post_init__(self):
        if self.bins_per_octave < 1 or self.octaves < 1 or self.hop < 1:
            raise ValueError("bins_per_octave, octaves and hop must be positive")
        if self.f_min <= 0 or self.sample_rate <= 0:
            raise ValueError("f_min and sample_rate must be positive")

    @property
    def q_factor(self) -> float:
        return 1.0 / (2.0 ** (1.0 / self.bins_per_octave) - 1.0)


def cqt_frequencies(cfg: CqtConfig) -> np.ndarray:
    """Center frequencies ``f_min * 2**(k / B)`` for bins below Nyquist.

    Dropped bins raise a ``UserWarning``.
    """
    k = np.arange(cfg.octaves * cfg.bins_per_octave)
    # whole octaves are exact powers of two; only the fractional part is rounded
    frac = 2.0 ** ((k % cfg.bins_per_octave) / cfg.bins_per_octave)
    freqs = cfg.f_min * np.ldexp(frac, k // cfg.bins_per_octave)
    keep = freqs < cfg.sample_rate / 2.0
    if not np.all(keep):
        warnings.warn(
            f"{int((~keep).sum())} CQT bins above Nyquist ({cfg.sample_rate / 2} Hz) dropped",
            stacklevel=2,
        )
    return freqs[keep]


def _window_lengths(cfg: CqtConfig, freqs: np.ndarray) -> np.ndarray:
    return np.ceil(cfg.q_factor * cfg.sample_rate / freqs).astype(np.int64)


def _kernel(f: float, n_k: int, sample_rate: int, reach: int) -> tuple[np.ndarray, int]:
    """Hann-windowed complex exponential centered on offset 0, cut to +-``reach``.

    Returns the kernel samples and the offset of its first sample.
    """
    offsets = np.arange(n_k) - n_k // 2
    keep = (offsets >= -reach) & (offsets <= reach)
    offsets = offsets[keep]
    win = 0.5 - 0.5 * np.cos(2.0 * np.pi * (offsets + n_k // 2) / n_k)
    kern = win * np.exp(2j * np.pi * f * offsets / sample_rate) / n_k
    return kern, int(offsets[0])


def cqt_magnitude(signal, cfg: CqtConfig = CqtConfig()) -> np.ndarray:
    """Direct-kernel CQT magnitudes.

    Bin ``k`` of frame ``m`` is ``|sum_n x[n] conj(K_k[n - m * hop])|`` with
    ``K_k`` a Hann window of length ``ceil(Q sr / f_k)`` modulated to ``f_k``
    and normalized by its length. Frames are centered on ``m * hop`` for
    ``m = 0 .. L // hop`` with zeros outside the signal.

    The correlations are evaluated in the frequency domain and decimated to
    the hop exactly by spectral folding; no kernel truncation beyond the
    signal support is applied.

    Args:
        signal: ``(L,)`` or ``(batch, L)`` real samples.

    Returns:
        ``(bins, frames)`` or ``(batch, bins, frames)`` magnitudes.
    """
    x = np.asarray(getattr(signal, "samples", signal), dtype=np.float64)
    single = x.ndim == 1
    x = np.atleast_2d(x)
    length = x.shape[1]
    freqs = cqt_frequencies(cfg)
    n_frames = length // cfg.hop + 1
    lens = _window_lengths(cfg, freqs)
    reach = length
    # padded layout: [reach zeros | signal | zeros]; no circular wrap reaches a frame
    span = 3 * reach + length + 1
    n_fft = cfg.hop * sfft.next_fast_len(-(-span // cfg.hop))
    padded = np.zeros((x.shape[0], n_fft))
    padded[:, reach : reach + length] = x
    spec = sfft.fft(padded, axis=1)
    n_fold = n_fft // cfg.hop
    out = np.empty((x.shape[0], freqs.shape[0], n_frames))
    for k, (f, n_k) in enumerate(zip(freqs, lens)):
        kern, first = _kernel(f, int(n_k), cfg.sample_rate, reach)
        # kernel placed so that lag m*hop of the correlation is frame m
        kbuf = np.zeros(n_fft, dtype=np.complex128)
        s = reach + first
        kbuf[s : s + kern.shape[0]] = kern
        prod = spec * np.conj(sfft.fft(kbuf))
        folded = prod.reshape(x.shape[0], cfg.hop, n_fold).sum(axis=1)
        corr = sfft.ifft(folded, axis=1) / cfg.hop
        out[:, k, :] = np.abs(corr[:, :n_frames])
    return out[0] if single else out


def multiscale_cqt_loss(estimate, reference, sample_rate: int = 48000,
                        bins_per_octave: Sequence[int] = MULTISCALE_BINS,
                        weight: float = 1.0) -> float:
    """Sum over resolutions of ``mean|A - B| + mean|log(A + 1e-5) - log(B + 1e-5)|``."""
    est, ref = _pair(estimate, reference)
    total = 0.0
    both = np.stack([est, ref])
    for b in bins_per_octave:
        mags = cqt_magnitude(both, CqtConfig(bins_per_octave=b, sample_rate=sample_rate))
        a, r = mags[0], mags[1]
        total += float(np.mean(np.abs(a - r)))
        total += float(np.mean(np.abs(np.log(a + CQT_LOG_FLOOR) - np.log(r + CQT_LOG_FLOOR))))
    return weight * total


def l1_waveform_loss(estimate, reference, weight: float = 50.0) -> float:
    est, ref = _pair(estimate, reference)
    return weight * float(np.mean(np.abs(est - ref)))


@dataclass
class MetricsReport:
    """Per-file rows plus mean and normal-approximation 95 % half-widths."""

    names: list
    rows: list
    mean: dict = field(default_factory=dict)
    ci95: dict = field(default_factory=dict)

    METRICS = ("si_sdr", "fwssnr", "log_spec_mse")


def evaluate_pair(estimate, reference, sample_rate: int = 48000) -> dict:
    return {
        "si_sdr": si_sdr(estimate, reference),
        "fwssnr": fwssnr(estimate, reference, sample_rate),
        "log_spec_mse": log_spec_mse(estimate, reference, sample_rate),
    }


def build_report(names: Sequence[str], rows: Sequence[dict]) -> MetricsReport:
    rep = MetricsReport(list(names), list(rows))
    for key in MetricsReport.METRICS:
        vals = np.array([r[key] for r in rows], dtype=np.float64)
        rep.mean[key] = float(vals.mean())
        rep.ci95[key] = float(1.96 * vals.std(ddof=1) / math.sqrt(len(vals))) if len(vals) > 1 else 0.0
    return rep


def write_report_csv(path, report: MetricsReport) -> None:
    keys = MetricsReport.METRICS
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["file", *keys])
        for name, row in zip(report.names, report.rows):
            w.writerow([name, *(f"{row[k]:.6f}" for k in keys)])
        w.writerow(["mean", *(f"{report.mean[k]:.6f}" for k in keys)])
        w.writerow(["ci95", *(f"{report.ci95[k]:.6f}" for k in keys)])
