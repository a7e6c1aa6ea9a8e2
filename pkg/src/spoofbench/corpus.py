"""Synthetic multi-speaker corpus.

Each speaker is a harmonic source at a jittered fundamental, shaped by a few
formant resonances and slowly amplitude-modulated. The rejection class is
band-passed white-noise bursts.
"""

from __future__ import annotations

import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.signal import butter, sosfilt

from .audio import SAMPLE_RATE, Waveform, write_wav
from .rng import stream

F0_RANGE = (80.0, 300.0)
F0_SPACING = 10.0
MIN_DURATION = 0.7
OTHER = "other"


@dataclass(frozen=True)
class SyntheticSpeakerProfile:
    f0: float
    formants: tuple[float, ...]
    bandwidths: tuple[float, ...]
    jitter: float = 0.02
    am_rate: float = 3.0

    def __post_init__(self):
        if not F0_RANGE[0] <= self.f0 <= F0_RANGE[1]:
            raise ValueError(f"f0 {self.f0} outside {F0_RANGE}")
        if any(f >= SAMPLE_RATE / 2 for f in self.formants):
            raise ValueError("formants must lie below Nyquist")
        if not 0 <= self.jitter <= 0.1:
            raise ValueError(f"jitter {self.jitter} outside [0, 0.1]")


@dataclass(frozen=True)
class CorpusSpec:
    speakers: int = 10
    utterances: int = 20
    duration: float = 2.0
    noise_utterances: int = 20
    seed: int = 0

    def __post_init__(self):
        if min(self.speakers, self.utterances, self.noise_utterances) < 1:
            raise ValueError("corpus counts must be >= 1")
        if self.duration < MIN_DURATION:
            raise ValueError(f"duration must be >= {MIN_DURATION} s")


def speaker_ids(n: int) -> list[str]:
    return [f"spk{i:02d}" for i in range(n)]


def make_profiles(n: int, seed: int) -> list[SyntheticSpeakerProfile]:
    """``n`` speakers with distinct f0 on a 10 Hz grid and random formants."""
    grid = np.arange(F0_RANGE[0], F0_RANGE[1] + 1e-9, F0_SPACING)
    if n < 1:
        raise ValueError("need at least one speaker")
    if n > len(grid):
        raise ValueError(f"at most {len(grid)} speakers fit in {F0_RANGE} Hz at {F0_SPACING} Hz spacing")
    rng = stream(seed, "profiles")
    f0s = rng.choice(grid, size=n, replace=False)
    out = []
    for f0 in f0s:
        f1 = rng.uniform(300, 900)
        f2 = rng.uniform(max(f1 + 300, 900), 2400)
        f3 = rng.uniform(2500, 3500)
        out.append(SyntheticSpeakerProfile(
            f0=float(f0),
            formants=(float(f1), float(f2), float(f3)),
            bandwidths=(float(rng.uniform(60, 120)), float(rng.uniform(90, 180)), float(rng.uniform(150, 250))),
            jitter=float(rng.uniform(0.005, 0.03)),
            am_rate=float(rng.uniform(2.0, 5.0)),
        ))
    return out


FORMANT_GAINS = (1.0, 0.3, 0.1)
TILT_HZ = 150.0  # source roll-off corner, roughly -6 dB/octave above it


def _formant_gain(p: SyntheticSpeakerProfile, f: np.ndarray) -> np.ndarray:
    g = np.full_like(f, 0.01)
    for fc, bw, amp in zip(p.formants, p.bandwidths, FORMANT_GAINS):
        g += amp / (1.0 + ((f - fc) / (bw / 2.0)) ** 2)
    return g / (1.0 + f / TILT_HZ)


def synth_utterance(p: SyntheticSpeakerProfile, duration: float, seed: int,
                    modulate: bool = True) -> Waveform:
    """Render one utterance, peak-normalized to 0.9.

    With ``jitter == 0`` and ``modulate=False`` the output is exactly periodic
    with period ``SAMPLE_RATE / f0`` samples.
    """
    if duration < MIN_DURATION:
        raise ValueError(f"duration {duration} s is shorter than {MIN_DURATION} s")
    rng = stream(seed, "utterance")
    n = int(round(duration * SAMPLE_RATE))
    t = np.arange(n) / SAMPLE_RATE
    if p.jitter > 0:
        # slow random f0 drift, smoothed white noise scaled to the jitter fraction
        knots = rng.standard_normal(int(duration * 20) + 2)
        drift = np.interp(t, np.linspace(0, duration, len(knots)), knots)
        f0_t = p.f0 * (1.0 + p.jitter * np.clip(drift, -2, 2) / 2)
    else:
        f0_t = np.full(n, p.f0)
    phase = 2 * np.pi * np.concatenate([[0.0], np.cumsum(f0_t[:-1]) / SAMPLE_RATE])
    n_harm = int((SAMPLE_RATE / 2 - 200) // (p.f0 * (1 + p.jitter)))
    k = np.arange(1, n_harm + 1)
    amps = _formant_gain(p, k * p.f0)
    offsets = rng.uniform(0, 2 * np.pi, n_harm)
    x = np.zeros(n)
    for kk, a, o in zip(k, amps, offsets):
        x += a * np.sin(kk * phase + o)
    if modulate:
        env = 0.65 + 0.35 * np.sin(2 * np.pi * p.am_rate * t + rng.uniform(0, 2 * np.pi))
        x *= env
    return Waveform(0.9 * x / np.max(np.abs(x)), SAMPLE_RATE)


def synth_noise(duration: float, seed: int) -> Waveform:
    """White noise through a random band-pass, gated into bursts."""
    rng = stream(seed, "noise")
    n = int(round(duration * SAMPLE_RATE))
    lo = rng.uniform(100, 3000)
    hi = min(lo * rng.uniform(1.5, 4.0), 7800)
    sos = butter(4, [lo, hi], btype="bandpass", fs=SAMPLE_RATE, output="sos")
    x = sosfilt(sos, rng.standard_normal(n))
    t = np.arange(n) / SAMPLE_RATE
    gate = 0.55 + 0.45 * np.sign(np.sin(2 * np.pi * rng.uniform(1.0, 4.0) * t + rng.uniform(0, 2 * np.pi)))
    x *= gate
    return Waveform(0.9 * x / np.max(np.abs(x)), SAMPLE_RATE)


def build_corpus(spec: CorpusSpec) -> dict[str, list[Waveform]]:
    """Labeled waveforms: ``spkNN`` speakers plus the ``other`` noise class."""
    profiles = make_profiles(spec.speakers, spec.seed)
    corpus: dict[str, list[Waveform]] = {}
    for s, (sid, prof) in enumerate(zip(speaker_ids(spec.speakers), profiles)):
        corpus[sid] = [synth_utterance(prof, spec.duration, seed=_utt_seed(spec.seed, s, u))
                       for u in range(spec.utterances)]
    corpus[OTHER] = [synth_noise(spec.duration, seed=_utt_seed(spec.seed, spec.speakers, u))
                     for u in range(spec.noise_utterances)]
    return corpus


def _utt_seed(seed: int, speaker: int, utt: int) -> int:
    return int(stream(seed, "utt-seed", speaker, utt).integers(2 ** 31))


def write_corpus(corpus: dict[str, list[Waveform]], root: str | os.PathLike) -> list[Path]:
    """Write ``root/<speaker>/uttNNN.wav`` as 16 kHz PCM16."""
    paths = []
    for sid, waves in corpus.items():
        d = Path(root) / sid
        d.mkdir(parents=True, exist_ok=True)
        for i, w in enumerate(waves):
            p = d / f"utt{i:03d}.wav"
            write_wav(p, w)
            paths.append(p)
    return paths
