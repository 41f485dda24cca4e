import struct
import wave

import numpy as np
import pytest

from qbestd.errors import DataError, FormatError, ValidationError
from qbestd.features import (
    FeatureSequence,
    extract_mfcc,
    frame_signal,
    load_features,
    mel_filterbank,
    mel_log_energies,
    read_qbef_header,
    read_wav,
    write_features,
    MFCC_WINDOW_S,
    MFCC_HOP_S,
)


def test_roundtrip_small(tmp_path):
    seq = FeatureSequence(frames=np.arange(6, dtype=np.float32).reshape(2, 3),
                          frame_period=0.01, id="a")
    path = tmp_path / "a.qbef"
    write_features(seq, path)
    back = load_features(path)
    assert back.frames.shape == (2, 3)
    assert np.array_equal(back.frames, seq.frames)
    assert back.frame_period == seq.frame_period


def test_roundtrip_random_shapes(tmp_path, rng):
    # serialization identity over random shapes and values, bit-exact
    for k in range(25):
        t = int(rng.integers(1, 40))
        d = int(rng.integers(1, 50))
        frames = rng.normal(scale=100.0, size=(t, d)).astype(np.float32)
        seq = FeatureSequence(frames=frames, frame_period=float(rng.uniform(0.001, 1.0)),
                              id=f"r{k}")
        path = tmp_path / f"r{k}.qbef"
        write_features(seq, path)
        back = load_features(path)
        assert back.frames.tobytes() == frames.tobytes()
        assert back.frame_period == seq.frame_period
        # writing the loaded sequence again reproduces the file bytes
        path2 = tmp_path / f"r{k}b.qbef"
        write_features(back, path2)
        assert path.read_bytes() == path2.read_bytes()


def test_bad_magic(tmp_path):
    path = tmp_path / "bad.qbef"
    path.write_bytes(b"XXXX" + b"\0" * 40)
    with pytest.raises(FormatError):
        load_features(path)
    with pytest.raises(FormatError):
        read_qbef_header(path)


def test_truncated_payload(tmp_path):
    path = tmp_path / "short.qbef"
    header = struct.pack("<4sIIId", b"QBEF", 1, 3, 2, 0.01)
    path.write_bytes(header + b"\0" * (4 * 5))  # declares 6 floats, holds 5
    with pytest.raises(FormatError):
        load_features(path)


def test_rejects_nan_and_empty(tmp_path):
    with pytest.raises(DataError):
        write_features(FeatureSequence(frames=np.array([[np.nan]], dtype=np.float32),
                                       frame_period=0.01), tmp_path / "n.qbef")
    with pytest.raises(ValidationError):
        write_features(FeatureSequence(frames=np.zeros((0, 3), dtype=np.float32),
                                       frame_period=0.01), tmp_path / "e.qbef")
    with pytest.raises(ValidationError):
        write_features(FeatureSequence(frames=np.zeros((2, 2), dtype=np.float32),
                                       frame_period=0.0), tmp_path / "p.qbef")


def test_mfcc_frame_count_formula():
    # independent frame-count calculator over a range of lengths
    sr = 16000
    win = int(round(MFCC_WINDOW_S * sr))
    hop = int(round(MFCC_HOP_S * sr))
    rng = np.random.default_rng(0)
    for n in [win, win + 1, win + hop - 1, win + hop, 16000, 23456]:
        expected = (n - win) // hop + 1
        seq = extract_mfcc(rng.normal(size=n), sr)
        assert seq.n_frames == expected, n
        assert seq.dim == 39
        assert seq.frame_period == hop / sr
    # the spec's worked example: 1 s at 16 kHz
    assert extract_mfcc(rng.normal(size=16000), sr).n_frames == 98


def test_mfcc_constant_zero_signal():
    seq = extract_mfcc(np.zeros(8000), 16000)
    # log floor makes every frame identical
    assert np.allclose(seq.frames, seq.frames[0], atol=1e-5)


def test_mfcc_too_short_and_bad_rate():
    with pytest.raises(DataError):
        extract_mfcc(np.zeros(10), 16000)
    with pytest.raises(ValidationError):
        extract_mfcc(np.zeros(4000), 4000)


def test_tone_energy_lands_in_matching_mel_bands():
    # brute-force DFT oracle: windowed 1 kHz tone, energy through the module's
    # own filterbank must concentrate in filters covering 1 kHz
    sr = 16000
    freq = 1000.0
    n = 4000
    t = np.arange(n) / sr
    tone = np.sin(2 * np.pi * freq * t)

    win = int(round(MFCC_WINDOW_S * sr))
    frame = frame_signal(np.concatenate([tone[:1], tone[1:] - 0.97 * tone[:-1]]),
                         win, win)[0] * np.hamming(win)
    n_fft = 512
    k = np.arange(n_fft // 2 + 1)
    # explicit DFT sums, independent of np.fft
    angles = -2j * np.pi * np.outer(k, np.arange(win)) / n_fft
    spectrum = (np.exp(angles) @ frame)
    power = np.abs(spectrum) ** 2 / n_fft

    fb = mel_filterbank(sr, n_fft, 26)
    energies = fb @ power
    centers_hz = []
    for m in range(26):
        idx = np.argmax(fb[m])
        centers_hz.append(idx * sr / n_fft)
    best = int(np.argmax(energies))
    assert abs(centers_hz[best] - freq) < 220.0  # within one filter spacing at 1 kHz

    # module path agrees: log energies peak at the same filter
    log_e = mel_log_energies(tone, sr)
    assert abs(int(np.argmax(log_e[0])) - best) <= 1


def test_wav_roundtrip(tmp_path):
    sr = 16000
    rng = np.random.default_rng(3)
    samples = (rng.uniform(-0.5, 0.5, size=sr) * 32767).astype(np.int16)
    path = tmp_path / "t.wav"
    with wave.open(str(path), "wb") as wf:
        wf.setnchannels(1)
        wf.setsampwidth(2)
        wf.setframerate(sr)
        wf.writeframes(samples.tobytes())
    loaded, rate = read_wav(path)
    assert rate == sr
    assert len(loaded) == sr
    assert np.allclose(loaded * 32768.0, samples, atol=0.5)
    seq = extract_mfcc(loaded, rate)
    assert seq.dim == 39


def test_wav_rejects_stereo(tmp_path):
    path = tmp_path / "s.wav"
    with wave.open(str(path), "wb") as wf:
        wf.setnchannels(2)
        wf.setsampwidth(2)
        wf.setframerate(8000)
        wf.writeframes(b"\0\0\0\0" * 100)
    with pytest.raises(FormatError):
        read_wav(path)
