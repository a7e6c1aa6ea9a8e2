"""Mel-spectrogram patches with dynamic range compression."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.signal import get_window

from .audio import SAMPLE_RATE, AudioError, Waveform

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class MelConfig:
    n_fft: int = 1024
    hop: int = 160
    n_mels: int = 64
    compression: float = 1000.0
    sample_rate: int = SAMPLE_RATE
    n_frames: int = 64

    def __post_init__(self):
        if self.n_fft < 2 or self.n_fft & (self.n_fft - 1):
            raise ValueError(f"n_fft must be a power of two, got {self.n_fft}")
        if not 1 <= self.hop <= self.n_fft:
            raise ValueError(f"hop must be in [1, n_fft], got {self.hop}")
        if self.n_mels < 1:
            raise ValueError("n_mels must be >= 1")

    @property
    def n_bins(self) -> int:
        return self.n_fft // 2 + 1


@dataclass
class MelSpectrogramPatch:
    values: np.ndarray  # (n_mels, n_frames), DRC-compressed
    label: Optional[int] = None


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def n_frames(n_samples: int, cfg: MelConfig = MelConfig()) -> int:
    if n_samples < cfg.n_fft:
        return 0
    return 1 + (n_samples - cfg.n_fft) // cfg.hop


def stft_magnitude(w: Waveform | np.ndarray, cfg: MelConfig = MelConfig()) -> np.ndarray:
    """Magnitude spectrogram, shape (n_fft/2 + 1, T), periodic Hann window, no centering."""
    x = w.samples if isinstance(w, Waveform) else np.asarray(w, dtype=np.float64)
    if len(x) < cfg.n_fft:
        raise AudioError(f"audio of {len(x)} samples is shorter than one {cfg.n_fft}-sample window")
    frames = np.lib.stride_tricks.sliding_window_view(x, cfg.n_fft)[:: cfg.hop]
    win = get_window("hann", cfg.n_fft, fftbins=True)
    return np.abs(np.fft.rfft(frames * win, axis=1)).T


def mel_filterbank(cfg: MelConfig = MelConfig()) -> np.ndarray:
    """Unnormalized triangular filters (peak 1), shape (n_mels, n_fft/2 + 1).

    Edge points are uniform on the mel axis from 0 Hz to Nyquist; filter i
    rises from point i to its center at point i+1 and falls to point i+2.
    """
    pts = mel_to_hz(np.linspace(0.0, hz_to_mel(cfg.sample_rate / 2), cfg.n_mels + 2))
    freqs = np.arange(cfg.n_bins) * cfg.sample_rate / cfg.n_fft
    lo, mid, hi = pts[:-2, None], pts[1:-1, None], pts[2:, None]
    rise = (freqs - lo) / (mid - lo)
    fall = (hi - freqs) / (hi - mid)
    return np.maximum(0.0, np.minimum(rise, fall))


def drc(m: np.ndarray, c: float = 1000.0) -> np.ndarray:
    """Element-wise ``ln(1 + c*m)``."""
    m = np.asarray(m, dtype=np.float64)
    if np.any(m < 0):
        raise ValueError("drc expects non-negative magnitudes")
    return np.log1p(c * m)


def mel_spectrogram(w: Waveform | np.ndarray, cfg: MelConfig = MelConfig()) -> np.ndarray:
    """DRC-compressed mel spectrogram, shape (n_mels, T)."""
    return drc(mel_filterbank(cfg) @ stft_magnitude(w, cfg), cfg.compression)


def extract_patches(w: Waveform, cfg: MelConfig = MelConfig(), stride_frames: Optional[int] = None,
                    label: Optional[int] = None) -> list[MelSpectrogramPatch]:
    """Cut the compressed mel spectrogram into (n_mels, n_frames) windows.

    Windows step by ``stride_frames`` (default: non-overlapping); a trailing
    partial window is discarded. Too-short audio yields an empty list.
    """
    stride = stride_frames or cfg.n_frames
    t = n_frames(len(w.samples), cfg)
    if t < cfg.n_frames:
        log.warning("extract_patches: %d frames available, need %d", t, cfg.n_frames)
        return []
    spec = mel_spectrogram(w, cfg)
    starts = range(0, t - cfg.n_frames + 1, stride)
    return [MelSpectrogramPatch(spec[:, s:s + cfg.n_frames].copy(), label) for s in starts]
