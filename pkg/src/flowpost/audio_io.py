"""Mono PCM WAV reading and writing (16- and 24-bit)."""

from __future__ import annotations

import wave
from pathlib import Path

import numpy as np

from .features import Waveform

__all__ = ["read_wav", "write_wav", "WavFormatError"]


class WavFormatError(ValueError):
    """Unsupported or mismatched WAV content."""


def read_wav(path, expected_rate: int | None = None) -> Waveform:
    path = Path(path)
    try:
        with wave.open(str(path), "rb") as wf:
            channels = wf.getnchannels()
            width = wf.getsampwidth()
            rate = wf.getframerate()
            raw = wf.readframes(wf.getnframes())
    except (wave.Error, EOFError) as exc:
        raise WavFormatError(f"{path}: not a readable PCM WAV file ({exc})") from exc
    if channels != 1:
        raise WavFormatError(f"{path}: expected mono audio, found {channels} channels")
    if expected_rate is not None and rate != expected_rate:
        raise WavFormatError(
            f"{path}: sample rate {rate} Hz does not match configured {expected_rate} Hz"
        )
    if width == 2:
        samples = np.frombuffer(raw, dtype="<i2").astype(np.float64) / 32768.0
    elif width == 3:
        b = np.frombuffer(raw, dtype=np.uint8).reshape(-1, 3).astype(np.int32)
        ints = b[:, 0] | (b[:, 1] << 8) | (b[:, 2] << 16)
        ints = np.where(ints >= 1 << 23, ints - (1 << 24), ints)
        samples = ints.astype(np.float64) / float(1 << 23)
    else:
        raise WavFormatError(f"{path}: unsupported sample width {8 * width} bits")
    return Waveform(samples, rate)


def write_wav(path, w: Waveform, bits: int = 16) -> None:
    """Write ``w`` as mono PCM; samples are clipped to [-1, 1)."""
    if bits not in (16, 24):
        raise ValueError(f"bits must be 16 or 24, got {bits}")
    full = float(1 << (bits - 1))
    ints = np.clip(np.round(w.samples * full), -full, full - 1).astype(np.int32)
    if bits == 16:
        data = ints.astype("<i2").tobytes()
    else:
        u = (ints & 0xFFFFFF).astype(np.uint32)
        data = np.stack([u & 0xFF, (u >> 8) & 0xFF, (u >> 16) & 0xFF], axis=1).astype(np.uint8).tobytes()
    with wave.open(str(path), "wb") as wf:
        wf.setnchannels(1)
        wf.setsampwidth(bits // 8)
        wf.setframerate(int(w.sample_rate))
        wf.writeframes(data)
