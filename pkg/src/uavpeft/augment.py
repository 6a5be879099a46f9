"""Waveform augmentations: phase-vocoder time stretch and a sine waveshaper.

Augmented clips are extra training items; they never replace the original.
Each draw is a pure function of (global seed, clip id, augmentation index).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .dsp import Waveform, hann, stft

__all__ = [
    "AugmentationSpec",
    "AugmentationPlan",
    "time_stretch",
    "sin_distortion",
    "draw_params",
    "apply_plan",
]


@dataclass(frozen=True)
class AugmentationSpec:
    stretch_rate_range: tuple[float, float] = (0.8, 1.25)
    distortion_lambda_range: tuple[float, float] = (0.3, 0.9)
    n_fft: int = 1024

    def __post_init__(self):
        lo, hi = self.stretch_rate_range
        if not 0 < lo <= hi < 4:
            raise ValueError(f"stretch range must be a nonempty subinterval of (0, 4), got {self.stretch_rate_range}")
        lo, hi = self.distortion_lambda_range
        if not 0 < lo <= hi <= 1:
            raise ValueError(f"distortion range must lie in (0, 1], got {self.distortion_lambda_range}")


@dataclass(frozen=True)
class AugmentationPlan:
    k: int = 3
    global_seed: int = 0

    def __post_init__(self):
        if self.k < 0:
            raise ValueError("k must be non-negative")


def _phase_vocoder(spec: np.ndarray, rate: float, hop: int, n_fft: int) -> np.ndarray:
    n_bins, frames = spec.shape
    steps = np.arange(0, frames, rate)
    padded = np.concatenate([spec, np.zeros((n_bins, 2), spec.dtype)], axis=1)
    left = steps.astype(int)
    frac = steps - left
    c0, c1 = padded[:, left], padded[:, left + 1]
    mag = (1.0 - frac) * np.abs(c0) + frac * np.abs(c1)

    expected = 2 * np.pi * hop * np.arange(n_bins) / n_fft
    dphase = np.angle(c1) - np.angle(c0) - expected[:, None]
    dphase -= 2 * np.pi * np.round(dphase / (2 * np.pi))
    advance = expected[:, None] + dphase
    # phase of output frame t is the initial phase plus the advances of frames < t
    phase = np.angle(spec[:, :1]) + np.concatenate(
        [np.zeros((n_bins, 1)), np.cumsum(advance[:, :-1], axis=1)], axis=1
    )
    return mag * np.exp(1j * phase)


def _istft(spec: np.ndarray, hop: int, n_fft: int, length: int) -> np.ndarray:
    window = hann(n_fft)
    frames = np.fft.irfft(spec.T, n=n_fft, axis=1) * window
    total = n_fft + hop * (frames.shape[0] - 1)
    y = np.zeros(total)
    norm = np.zeros(total)
    for t, frame in enumerate(frames):
        y[t * hop : t * hop + n_fft] += frame
        norm[t * hop : t * hop + n_fft] += window**2
    nz = norm > 1e-8
    y[nz] /= norm[nz]
    start = n_fft // 2
    y = y[start : start + length]
    return np.pad(y, (0, max(0, length - len(y))))


def time_stretch(w: Waveform, rate: float, n_fft: int = 1024) -> Waveform:
    """Pitch-preserving speed change by ``rate``, then pad/trim to the input length.

    rate > 1 shortens (faster), rate < 1 lengthens. Output is clipped to [-1, 1].
    """
    if not 0.25 <= rate <= 4:
        raise ValueError(f"stretch rate must lie in [0.25, 4], got {rate}")
    n = len(w.samples)
    hop = n_fft // 4
    spec = stft(w, n_fft, hop)
    stretched = _phase_vocoder(spec, rate, hop, n_fft)
    y = _istft(stretched, hop, n_fft, int(round(n / rate)))
    if len(y) >= n:
        y = y[:n]
    else:
        y = np.pad(y, (0, n - len(y)))
    return Waveform(np.clip(y, -1.0, 1.0), w.sample_rate)


def sin_distortion(w: Waveform, lam: float) -> Waveform:
    """Odd, monotone waveshaper y = sin(π·λ·x/2) / sin(π·λ/2); fixes ±1."""
    if not 0 < lam <= 1:
        raise ValueError(f"distortion lambda must lie in (0, 1], got {lam}")
    x = np.clip(w.samples, -1.0, 1.0)
    y = np.sin(0.5 * np.pi * lam * x) / np.sin(0.5 * np.pi * lam)
    return Waveform(np.clip(y, -1.0, 1.0), w.sample_rate)


def draw_params(plan: AugmentationPlan, spec: AugmentationSpec, clip_id: int, aug_index: int) -> tuple[float, float]:
    """(stretch rate, distortion lambda) for one augmented copy; log-uniform rate."""
    rng = np.random.default_rng([plan.global_seed, clip_id, aug_index])
    lo, hi = spec.stretch_rate_range
    rate = float(np.exp(rng.uniform(np.log(lo), np.log(hi))))
    lam = float(rng.uniform(*spec.distortion_lambda_range))
    return rate, lam


def augment_once(w: Waveform, clip_id: int, aug_index: int, plan: AugmentationPlan, spec: AugmentationSpec) -> Waveform:
    rate, lam = draw_params(plan, spec, clip_id, aug_index)
    return sin_distortion(time_stretch(w, rate, spec.n_fft), lam)


def apply_plan(
    w: Waveform, clip_id: int, plan: AugmentationPlan, spec: AugmentationSpec | None = None
) -> list[Waveform]:
    spec = spec or AugmentationSpec()
    return [augment_once(w, clip_id, i, plan, spec) for i in range(plan.k)]
