"""Log-mel feature extraction for fixed-rate mono clips."""

from __future__ import annotations

import struct
import wave
from dataclasses import dataclass
from fractions import Fraction
from pathlib import Path

import numpy as np
from scipy.signal import resample_poly

__all__ = [
    "FeatureConfig",
    "Waveform",
    "MelSpectrogram",
    "AudioFormatError",
    "hz_to_mel",
    "mel_to_hz",
    "n_frames",
    "hann",
    "stft",
    "mel_filterbank",
    "mel_power",
    "log_mel",
    "ingest_wav",
    "write_wav",
    "write_feature_cache",
    "read_feature_cache",
]


class AudioFormatError(ValueError):
    pass


@dataclass(frozen=True)
class FeatureConfig:
    sample_rate: int = 16000
    n_fft: int = 1024
    hop: int = 512
    n_mels: int = 64
    f_min: float = 0.0
    f_max: float = 8000.0
    log_offset: float = 1e-6

    def __post_init__(self):
        if self.n_fft <= 0 or self.n_fft & (self.n_fft - 1):
            raise ValueError(f"n_fft must be a power of two, got {self.n_fft}")
        if not 0 < self.hop <= self.n_fft:
            raise ValueError(f"hop must lie in (0, n_fft], got {self.hop}")
        if self.sample_rate <= 0:
            raise ValueError("sample_rate must be positive")
        if self.f_max > self.sample_rate / 2:
            raise ValueError(f"f_max {self.f_max} exceeds Nyquist {self.sample_rate / 2}")
        if self.log_offset <= 0:
            raise ValueError("log_offset must be positive")

    @property
    def n_bins(self) -> int:
        return self.n_fft // 2 + 1


@dataclass
class Waveform:
    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.sample_rate <= 0:
            raise ValueError("sample_rate must be positive")
        if self.samples.ndim != 1:
            raise ValueError("waveform must be mono (1-D)")
        if not np.isfinite(self.samples).all():
            raise ValueError("waveform contains non-finite samples")

    def __len__(self) -> int:
        return len(self.samples)

    @property
    def duration(self) -> float:
        return len(self.samples) / self.sample_rate


@dataclass
class MelSpectrogram:
    values: np.ndarray  # (n_mels, n_frames)
    config: FeatureConfig

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape


def hz_to_mel(f):
    """HTK mel scale: 2595·log10(1 + f/700)."""
    f = np.asarray(f, dtype=np.float64)
    if np.any(f < 0):
        raise ValueError("frequency must be non-negative")
    out = 2595.0 * np.log10(1.0 + f / 700.0)
    return out if out.ndim else float(out)


def mel_to_hz(m):
    m = np.asarray(m, dtype=np.float64)
    if np.any(m < 0):
        raise ValueError("mel value must be non-negative")
    out = 700.0 * (10.0 ** (m / 2595.0) - 1.0)
    return out if out.ndim else float(out)


def n_frames(n_samples: int, hop: int) -> int:
    return 1 + n_samples // hop


def hann(n: int) -> np.ndarray:
    """Periodic Hann window (the STFT-friendly variant)."""
    return 0.5 - 0.5 * np.cos(2 * np.pi * np.arange(n) / n)


def stft(w: Waveform | np.ndarray, n_fft: int, hop: int) -> np.ndarray:
    """One-sided STFT with reflect center padding. Returns (n_fft//2+1, frames)."""
    x = w.samples if isinstance(w, Waveform) else np.asarray(w, dtype=np.float64)
    if len(x) < 1:
        raise ValueError("cannot transform an empty signal")
    pad = n_fft // 2
    # single-sample signals cannot reflect; edge padding is the degenerate equivalent
    mode = "reflect" if len(x) > 1 else "edge"
    xp = np.pad(x, pad, mode=mode)
    count = n_frames(len(x), hop)
    frames = np.lib.stride_tricks.sliding_window_view(xp, n_fft)[::hop][:count]
    return np.fft.rfft(frames * hann(n_fft), axis=1).T


def mel_filterbank(cfg: FeatureConfig) -> np.ndarray:
    """Triangular filters, peak 1, centers uniformly spaced in mel. (n_mels, n_bins)"""
    if cfg.n_mels < 2:
        raise ValueError("need at least two mel bands")
    if cfg.f_max <= cfg.f_min:
        raise ValueError("f_max must exceed f_min")
    edges = mel_to_hz(np.linspace(hz_to_mel(cfg.f_min), hz_to_mel(cfg.f_max), cfg.n_mels + 2))
    freqs = np.arange(cfg.n_bins) * cfg.sample_rate / cfg.n_fft
    lower, center, upper = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    rising = (freqs - lower) / (center - lower)
    falling = (upper - freqs) / (upper - center)
    return np.maximum(0.0, np.minimum(rising, falling))


def mel_centers(cfg: FeatureConfig) -> np.ndarray:
    edges = mel_to_hz(np.linspace(hz_to_mel(cfg.f_min), hz_to_mel(cfg.f_max), cfg.n_mels + 2))
    return edges[1:-1]


_fbank_cache: dict[FeatureConfig, np.ndarray] = {}


def _fbank(cfg: FeatureConfig) -> np.ndarray:
    if cfg not in _fbank_cache:
        _fbank_cache[cfg] = mel_filterbank(cfg)
    return _fbank_cache[cfg]


def mel_power(w: Waveform, cfg: FeatureConfig) -> np.ndarray:
    """Mel-band power before log compression."""
    spec = stft(w, cfg.n_fft, cfg.hop)
    return _fbank(cfg) @ (spec.real**2 + spec.imag**2)


def log_mel(w: Waveform, cfg: FeatureConfig) -> MelSpectrogram:
    if w.sample_rate != cfg.sample_rate:
        raise ValueError(
            f"waveform is at {w.sample_rate} Hz but features expect {cfg.sample_rate} Hz; resample first"
        )
    values = np.log(mel_power(w, cfg) + cfg.log_offset)
    return MelSpectrogram(values.astype(np.float32), cfg)


# ---------------------------------------------------------------------------
# WAV I/O


def ingest_wav(path: str | Path, sample_rate: int = 16000) -> Waveform:
    """Read 16-bit PCM WAV, downmix to mono, scale to [-1, 1), resample."""
    path = Path(path)
    try:
        with wave.open(str(path), "rb") as fh:
            channels = fh.getnchannels()
            width = fh.getsampwidth()
            rate = fh.getframerate()
            raw = fh.readframes(fh.getnframes())
    except wave.Error as exc:
        raise AudioFormatError(f"{path}: unsupported WAV encoding ({exc})") from exc
    except OSError as exc:
        raise AudioFormatError(f"{path}: cannot read file ({exc})") from exc
    if width != 2:
        raise AudioFormatError(f"{path}: sample width is {8 * width} bits; only 16-bit PCM is supported")
    if channels not in (1, 2):
        raise AudioFormatError(f"{path}: {channels} channels; only mono or stereo is supported")
    pcm = np.frombuffer(raw, dtype="<i2").astype(np.float64) / 32768.0
    if channels == 2:
        pcm = pcm.reshape(-1, 2).mean(axis=1)
    if rate != sample_rate:
        ratio = Fraction(sample_rate, rate)
        pcm = resample_poly(pcm, ratio.numerator, ratio.denominator)
        pcm = np.clip(pcm, -1.0, 1.0)
    return Waveform(pcm, sample_rate)


def write_wav(path: str | Path, w: Waveform) -> None:
    pcm = np.clip(np.round(w.samples * 32767.0), -32768, 32767).astype("<i2")
    with wave.open(str(path), "wb") as fh:
        fh.setnchannels(1)
        fh.setsampwidth(2)
        fh.setframerate(w.sample_rate)
        fh.writeframes(pcm.tobytes())


# ---------------------------------------------------------------------------
# feature cache: b"LFT1", u32 n_mels, u32 n_frames, row-major f32 LE

_MAGIC = b"LFT1"


def write_feature_cache(path: str | Path, values: np.ndarray) -> None:
    values = np.ascontiguousarray(values, dtype="<f4")
    if values.ndim != 2:
        raise ValueError("feature cache holds a 2-D (n_mels, n_frames) matrix")
    with open(path, "wb") as fh:
        fh.write(_MAGIC + struct.pack("<II", *values.shape) + values.tobytes())


def read_feature_cache(path: str | Path) -> np.ndarray:
    blob = Path(path).read_bytes()
    if blob[:4] != _MAGIC:
        raise ValueError(f"{path}: not a feature cache file (bad magic {blob[:4]!r})")
    rows, cols = struct.unpack("<II", blob[4:12])
    body = blob[12:]
    if len(body) != 4 * rows * cols:
        raise ValueError(f"{path}: truncated feature cache")
    return np.frombuffer(body, dtype="<f4").reshape(rows, cols).astype(np.float32)
