import wave

import numpy as np
import pytest

from flowpost.audio_io import WavFormatError, read_wav, write_wav
from flowpost.features import Waveform


@pytest.mark.parametrize("bits", [16, 24])
def test_roundtrip_within_one_lsb(tmp_path, bits):
    rng = np.random.default_rng(0)
    w = Waveform(rng.uniform(-0.99, 0.99, 1000), 16000)
    p = tmp_path / "a.wav"
    write_wav(p, w, bits=bits)
    back = read_wav(p, expected_rate=16000)
    assert back.sample_rate == 16000
    assert np.max(np.abs(back.samples - w.samples)) <= 1.0 / (1 << (bits - 1))


def test_rate_mismatch(tmp_path):
    p = tmp_path / "a.wav"
    write_wav(p, Waveform(np.zeros(10), 16000))
    with pytest.raises(WavFormatError, match="48000"):
        read_wav(p, expected_rate=48000)


def test_stereo_rejected(tmp_path):
    p = tmp_path / "s.wav"
    with wave.open(str(p), "wb") as wf:
        wf.setnchannels(2)
        wf.setsampwidth(2)
        wf.setframerate(16000)
        wf.writeframes(b"\x00" * 40)
    with pytest.raises(WavFormatError, match="mono"):
        read_wav(p)


def test_garbage_rejected(tmp_path):
    p = tmp_path / "g.wav"
    p.write_bytes(b"not a wav")
    with pytest.raises(WavFormatError):
        read_wav(p)


def test_bad_bit_depth(tmp_path):
    with pytest.raises(ValueError):
        write_wav(tmp_path / "x.wav", Waveform(np.zeros(4), 8000), bits=8)
