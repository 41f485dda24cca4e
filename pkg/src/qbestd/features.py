"""Acoustic feature sequences: QBEF binary storage, WAV ingestion, MFCC extraction.

A feature sequence is a T x d float32 matrix of per-frame features plus the
frame period in seconds. Sequences are stored in the QBEF container:

    magic "QBEF" | u32 version=1 | u32 T | u32 d | f64 frame_period | T*d f32 (row-major)

all little-endian.
"""
from __future__ import annotations

import struct
import wave
from dataclasses import dataclass, field

import numpy as np

from .errors import DataError, FormatError, ValidationError

QBEF_MAGIC = b"QBEF"
QBEF_VERSION = 1
_HEADER = struct.Struct("<4sIIId")

# MFCC recipe: 25 ms window / 10 ms hop, 26 mel filters, 13 cepstra + deltas
# + delta-deltas (regression window +-2), pre-emphasis 0.97, log floor 1e-10.
MFCC_WINDOW_S = 0.025
MFCC_HOP_S = 0.010
MFCC_N_FILTERS = 26
MFCC_N_CEPSTRA = 13
MFCC_PREEMPHASIS = 0.97
MFCC_LOG_FLOOR = 1e-10
MFCC_DELTA_HALF_WIN = 2


@dataclass
class FeatureSequence:
    """A T x d matrix of per-frame acoustic features."""

    frames: np.ndarray
    frame_period: float
    id: str = ""

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.float32)
        if self.frames.ndim != 2:
            raise ValidationError(f"frames must be 2-D, got shape {self.frames.shape}")

    @property
    def n_frames(self) -> int:
        return self.frames.shape[0]

    @property
    def dim(self) -> int:
        return self.frames.shape[1]

    def validate(self) -> "FeatureSequence":
        t, d = self.frames.shape
        if t < 1 or d < 1:
            raise ValidationError(f"feature sequence {self.id!r} has empty shape {t}x{d}")
        if not np.isfinite(self.frames).all():
            raise DataError(f"feature sequence {self.id!r} contains NaN/Inf values")
        if not (self.frame_period > 0):
            raise ValidationError(f"frame_period must be positive, got {self.frame_period}")
        return self


class QbeIOError(DataError):
    """Filesystem failure while reading or writing feature files."""


def write_features(seq: FeatureSequence, path) -> None:
    """Serialize a validated sequence to a QBEF file."""
    seq.validate()
    t, d = seq.frames.shape
    payload = np.ascontiguousarray(seq.frames, dtype="<f4").tobytes()
    try:
        with open(path, "wb") as fh:
            fh.write(_HEADER.pack(QBEF_MAGIC, QBEF_VERSION, t, d, float(seq.frame_period)))
            fh.write(payload)
    except OSError as exc:
        raise QbeIOError(f"cannot write {path}: {exc}") from exc


def read_qbef_header(path) -> tuple[int, int, float]:
    """Return (T, d, frame_period) without loading the payload."""
    with open(path, "rb") as fh:
        raw = fh.read(_HEADER.size)
    if len(raw) < _HEADER.size:
        raise FormatError(f"{path}: file shorter than QBEF header")
    magic, version, t, d, period = _HEADER.unpack(raw)
    if magic != QBEF_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    if version != QBEF_VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    return t, d, period


def load_features(path, seq_id: str = "") -> FeatureSequence:
    """Load a QBEF file, checking header consistency and payload finiteness."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < _HEADER.size:
        raise FormatError(f"{path}: file shorter than QBEF header")
    magic, version, t, d, period = _HEADER.unpack_from(raw)
    if magic != QBEF_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    if version != QBEF_VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    expected = _HEADER.size + 4 * t * d
    if len(raw) != expected:
        raise FormatError(
            f"{path}: truncated/overlong payload, expected {expected} bytes got {len(raw)}"
        )
    frames = np.frombuffer(raw, dtype="<f4", offset=_HEADER.size).reshape(t, d)
    seq = FeatureSequence(frames=frames.copy(), frame_period=period, id=seq_id or str(path))
    return seq.validate()


def read_wav(path) -> tuple[np.ndarray, int]:
    """Read a PCM 16-bit mono WAV file. Returns (samples in [-1, 1], sample_rate)."""
    with wave.open(str(path), "rb") as wf:
        if wf.getnchannels() != 1:
            raise FormatError(f"{path}: only mono WAV is supported")
        if wf.getsampwidth() != 2:
            raise FormatError(f"{path}: only 16-bit PCM WAV is supported")
        rate = wf.getframerate()
        raw = wf.readframes(wf.getnframes())
    samples = np.frombuffer(raw, dtype="<i2").astype(np.float64) / 32768.0
    return samples, rate


def hz_to_mel(hz):
    return 2595.0 * np.log10(1.0 + np.asarray(hz, dtype=np.float64) / 700.0)


def mel_to_hz(mel):
    return 700.0 * (10.0 ** (np.asarray(mel, dtype=np.float64) / 2595.0) - 1.0)


def mel_filterbank(sample_rate: int, n_fft: int, n_filters: int = MFCC_N_FILTERS) -> np.ndarray:
    """Triangular mel filterbank, shape (n_filters, n_fft // 2 + 1)."""
    low = hz_to_mel(0.0)
    high = hz_to_mel(sample_rate / 2.0)
    points_hz = mel_to_hz(np.linspace(low, high, n_filters + 2))
    bins = np.floor((n_fft + 1) * points_hz / sample_rate).astype(int)
    fb = np.zeros((n_filters, n_fft // 2 + 1))
    for m in range(1, n_filters + 1):
        left, center, right = bins[m - 1], bins[m], bins[m + 1]
        for k in range(left, center):
            fb[m - 1, k] = (k - left) / max(center - left, 1)
        for k in range(center, right):
            fb[m - 1, k] = (right - k) / max(right - center, 1)
    return fb


def frame_signal(samples: np.ndarray, frame_len: int, hop: int) -> np.ndarray:
    """Slice a 1-D signal into overlapping frames (n_frames, frame_len)."""
    n = (len(samples) - frame_len) // hop + 1
    idx = np.arange(frame_len)[None, :] + hop * np.arange(n)[:, None]
    return samples[idx]


def _delta(feat: np.ndarray, half_win: int = MFCC_DELTA_HALF_WIN) -> np.ndarray:
    # standard regression deltas with replicated edges
    padded = np.pad(feat, ((half_win, half_win), (0, 0)), mode="edge")
    denom = 2 * sum(k * k for k in range(1, half_win + 1))
    out = np.zeros_like(feat)
    for k in range(1, half_win + 1):
        out += k * (padded[half_win + k : half_win + k + len(feat)]
                    - padded[half_win - k : half_win - k + len(feat)])
    return out / denom


def mel_log_energies(samples: np.ndarray, sample_rate: int) -> np.ndarray:
    """Log mel filterbank energies per frame; the pre-DCT stage of extract_mfcc."""
    samples = np.asarray(samples, dtype=np.float64)
    if sample_rate < 8000:
        raise ValidationError(f"sample_rate must be >= 8000 Hz, got {sample_rate}")
    frame_len = int(round(MFCC_WINDOW_S * sample_rate))
    hop = int(round(MFCC_HOP_S * sample_rate))
    if len(samples) < frame_len:
        raise DataError(
            f"audio of {len(samples)} samples is shorter than one {frame_len}-sample window"
        )
    emphasized = np.concatenate([samples[:1], samples[1:] - MFCC_PREEMPHASIS * samples[:-1]])
    frames = frame_signal(emphasized, frame_len, hop) * np.hamming(frame_len)
    n_fft = 1
    while n_fft < frame_len:
        n_fft *= 2
    power = np.abs(np.fft.rfft(frames, n=n_fft, axis=1)) ** 2 / n_fft
    fb = mel_filterbank(sample_rate, n_fft, MFCC_N_FILTERS)
    energies = power @ fb.T
    return np.log(np.maximum(energies, MFCC_LOG_FLOOR))


def extract_mfcc(samples: np.ndarray, sample_rate: int, seq_id: str = "") -> FeatureSequence:
    """39-dim MFCCs (13 cepstra + deltas + delta-deltas) from a raw waveform."""
    log_e = mel_log_energies(samples, sample_rate)
    # orthonormal DCT-II over the filter axis, keep the first 13 coefficients
    from scipy.fft import dct

    cepstra = dct(log_e, type=2, norm="ortho", axis=1)[:, :MFCC_N_CEPSTRA]
    d1 = _delta(cepstra)
    d2 = _delta(d1)
    feats = np.hstack([cepstra, d1, d2]).astype(np.float32)
    hop = int(round(MFCC_HOP_S * sample_rate))
    return FeatureSequence(frames=feats, frame_period=hop / sample_rate, id=seq_id).validate()
