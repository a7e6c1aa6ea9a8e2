"""WAV I/O, resampling and energy-based silence removal."""

from __future__ import annotations

import logging
import os
from dataclasses import dataclass

import numpy as np
from scipy.io import wavfile

log = logging.getLogger(__name__)

SAMPLE_RATE = 16000


class AudioError(ValueError):
    """Unsupported, malformed or empty audio."""


@dataclass
class Waveform:
    samples: np.ndarray
    sample_rate: int = SAMPLE_RATE

    def __len__(self) -> int:
        return len(self.samples)

    @property
    def duration(self) -> float:
        return len(self.samples) / self.sample_rate


def resample_linear(x: np.ndarray, sr_in: int, sr_out: int = SAMPLE_RATE) -> np.ndarray:
    if sr_in == sr_out:
        return x
    n_out = int(round(len(x) * sr_out / sr_in))
    t_out = np.arange(n_out) * (sr_in / sr_out)
    return np.interp(t_out, np.arange(len(x)), x)


def load_wav(path: str | os.PathLike, target_rate: int = SAMPLE_RATE) -> Waveform:
    """Read a PCM16 or IEEE-float WAV as mono float64 at ``target_rate``.

    Channels are averaged; other sample rates are linearly interpolated.
    """
    try:
        sr, data = wavfile.read(path)
    except ValueError as exc:
        raise AudioError(f"{path}: malformed or unsupported WAV ({exc})") from exc
    if data.dtype == np.int16:
        x = data.astype(np.float64) / 32768.0
    elif data.dtype in (np.float32, np.float64):
        x = data.astype(np.float64)
    else:
        raise AudioError(f"{path}: unsupported sample format {data.dtype} (need PCM16 or float)")
    if x.ndim == 2:
        x = x.mean(axis=1)
    if x.size == 0:
        raise AudioError(f"{path}: no audio samples")
    x = np.clip(resample_linear(x, sr, target_rate), -1.0, 1.0)
    return Waveform(x, target_rate)


def write_wav(path: str | os.PathLike, w: Waveform) -> None:
    """Write 16-bit PCM."""
    pcm = np.round(np.clip(w.samples, -1.0, 1.0) * 32767.0).astype("<i2")
    wavfile.write(path, w.sample_rate, pcm)


def vad_trim(w: Waveform, frame_ms: float = 30.0, threshold_db: float = -40.0) -> Waveform:
    """Keep frames whose RMS exceeds ``threshold_db`` relative to the loudest frame.

    Surviving frames are concatenated in order; a trailing partial frame is
    dropped. All-silent input gives an empty waveform (and a warning).
    """
    frame = int(round(w.sample_rate * frame_ms / 1000.0))
    n = len(w.samples) // frame
    if n == 0:
        log.warning("vad_trim: audio shorter than one %g ms frame", frame_ms)
        return Waveform(np.zeros(0), w.sample_rate)
    frames = w.samples[: n * frame].reshape(n, frame)
    rms = np.sqrt(np.mean(frames ** 2, axis=1))
    peak = rms.max()
    if peak == 0:
        log.warning("vad_trim: signal is entirely silent")
        return Waveform(np.zeros(0), w.sample_rate)
    keep = rms > peak * 10.0 ** (threshold_db / 20.0)
    return Waveform(frames[keep].reshape(-1), w.sample_rate)
