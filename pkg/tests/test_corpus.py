"""Synthetic speaker corpus."""

import numpy as np
import pytest

from spoofbench.audio import load_wav
from spoofbench.corpus import (OTHER, CorpusSpec, SyntheticSpeakerProfile, build_corpus, make_profiles,
                               synth_noise, synth_utterance, write_corpus)
from spoofbench.features import extract_patches, mel_filterbank

SR = 16000


def autocorr_f0(x, lo=70.0, hi=320.0, frame=800, clip=0.6):
    """Median over 50 ms frames of the center-clipped autocorrelation peak.

    Center clipping (zeroing everything below 60% of the frame peak) flattens
    the formant ringing so the pitch period wins over formant periods.
    """
    lags = np.arange(int(SR / hi), int(SR / lo) + 1)
    est = []
    for start in range(0, len(x) - frame + 1, frame):
        f = x[start:start + frame] - x[start:start + frame].mean()
        c = clip * np.max(np.abs(f))
        f = np.where(np.abs(f) > c, f - np.sign(f) * c, 0.0)
        ac = np.array([np.dot(f[:-k], f[k:]) / (frame - k) for k in lags])
        est.append(SR / lags[np.argmax(ac)])
    return float(np.median(est))


def test_profiles_spacing_and_determinism():
    ps = make_profiles(10, seed=3)
    f0 = np.sort([p.f0 for p in ps])
    assert len(ps) == 10
    assert np.all(np.diff(f0) >= 10.0)
    assert ps == make_profiles(10, seed=3)
    assert make_profiles(10, seed=4) != ps
    assert len(make_profiles(1, seed=0)) == 1


def test_too_many_profiles_rejected():
    make_profiles(23, 0)
    with pytest.raises(ValueError):
        make_profiles(24, 0)
    with pytest.raises(ValueError):
        make_profiles(0, 0)


def test_profile_invariants():
    with pytest.raises(ValueError):
        SyntheticSpeakerProfile(f0=60, formants=(500,), bandwidths=(80,))
    with pytest.raises(ValueError):
        SyntheticSpeakerProfile(f0=100, formants=(8000,), bandwidths=(80,))
    with pytest.raises(ValueError):
        SyntheticSpeakerProfile(f0=100, formants=(500,), bandwidths=(80,), jitter=0.2)
    for p in make_profiles(20, 1):
        assert 80 <= p.f0 <= 300 and max(p.formants) < 8000 and 0 <= p.jitter <= 0.1


def test_utterance_basic_properties():
    p = make_profiles(1, 0)[0]
    w = synth_utterance(p, 1.0, seed=1)
    assert w.sample_rate == SR and len(w) == SR
    assert np.max(np.abs(w.samples)) == pytest.approx(0.9)
    with pytest.raises(ValueError):
        synth_utterance(p, 0.5, seed=1)


def test_zero_jitter_unmodulated_is_periodic():
    p = SyntheticSpeakerProfile(f0=160.0, formants=(500, 1500, 2500), bandwidths=(80, 120, 200), jitter=0.0)
    x = synth_utterance(p, 1.0, seed=2, modulate=False).samples
    period = SR // 160
    np.testing.assert_allclose(x[period:], x[:-period], atol=1e-9)


def test_f0_recovered_by_autocorrelation():
    for seed in range(3):
        for p in make_profiles(10, seed):
            x = synth_utterance(p, 1.0, seed=seed + 11).samples
            est = autocorr_f0(x)
            assert abs(est - p.f0) / p.f0 <= 0.05, (p.f0, est)


def test_peak_band_near_first_formant():
    fb = mel_filterbank()
    for p in make_profiles(10, 2):
        patch = extract_patches(synth_utterance(p, 1.0, seed=5))[0].values
        peak = int(patch.mean(axis=1).argmax())
        f1_band = int(fb[:, round(p.formants[0] * 1024 / SR)].argmax())
        assert abs(peak - f1_band) <= 2, (p, peak, f1_band)


def test_same_profile_different_seeds():
    p = make_profiles(3, 0)[1]
    a = synth_utterance(p, 1.0, seed=1)
    b = synth_utterance(p, 1.0, seed=2)
    assert not np.array_equal(a.samples, b.samples)
    pa = extract_patches(a)[0].values.mean(axis=1)
    pb = extract_patches(b)[0].values.mean(axis=1)
    assert abs(int(pa.argmax()) - int(pb.argmax())) <= 1


def test_noise_is_bounded_and_deterministic():
    a, b = synth_noise(1.0, 4), synth_noise(1.0, 4)
    np.testing.assert_array_equal(a.samples, b.samples)
    assert np.max(np.abs(a.samples)) == pytest.approx(0.9)
    assert not np.array_equal(a.samples, synth_noise(1.0, 5).samples)


def test_build_corpus_counts_and_determinism():
    spec = CorpusSpec(speakers=3, utterances=4, duration=0.8, noise_utterances=2, seed=9)
    c1, c2 = build_corpus(spec), build_corpus(spec)
    assert list(c1) == ["spk00", "spk01", "spk02", OTHER]
    assert [len(v) for v in c1.values()] == [4, 4, 4, 2]
    for k in c1:
        for a, b in zip(c1[k], c2[k]):
            assert a.samples.tobytes() == b.samples.tobytes()
    # labels partition the set: no waveform appears under two labels
    seen = [w.samples.tobytes() for v in c1.values() for w in v]
    assert len(set(seen)) == len(seen)


def test_full_size_spec_counts():
    spec = CorpusSpec()
    assert spec.speakers * spec.utterances == 200
    with pytest.raises(ValueError):
        CorpusSpec(speakers=0)
    with pytest.raises(ValueError):
        CorpusSpec(duration=0.5)


def test_write_corpus_tree(tmp_path):
    spec = CorpusSpec(speakers=2, utterances=2, duration=0.8, noise_utterances=1, seed=1)
    c = build_corpus(spec)
    paths = write_corpus(c, tmp_path / "c")
    assert sorted(p.relative_to(tmp_path / "c").as_posix() for p in paths) == [
        "other/utt000.wav", "spk00/utt000.wav", "spk00/utt001.wav", "spk01/utt000.wav", "spk01/utt001.wav"]
    w = load_wav(tmp_path / "c" / "spk01" / "utt001.wav")
    np.testing.assert_allclose(w.samples, c["spk01"][1].samples, atol=2.0 / 32767)
