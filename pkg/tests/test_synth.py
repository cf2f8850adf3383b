import csv

import numpy as np
import pytest

from msfusion import dsp, synth
from msfusion.manifest import parse_manifest


@pytest.fixture(scope="module")
def corpus(tmp_path_factory):
    out = tmp_path_factory.mktemp("synth")
    return synth.synth_corpus(out, synth.SynthSpec(n_controls=6, n_patients=6, duration_s=2.0), seed=11)


def _f0(x, sr=dsp.SAMPLE_RATE, fmin=80.0, fmax=320.0):
    # plain autocorrelation peak picking; independent of the generator
    x = x - x.mean()
    ac = np.correlate(x, x, "full")[len(x) - 1 :]
    lo, hi = int(sr / fmax), int(sr / fmin)
    lag = lo + int(np.argmax(ac[lo:hi]))
    return sr / lag


def _pitch_spread(path, onsets):
    clip = dsp.load_audio(path)
    f0 = []
    for t in onsets:
        a = int((t + 0.045) * clip.sample_rate_hz)
        seg = clip.samples[a : a + int(0.05 * clip.sample_rate_hz)]
        if len(seg) == int(0.05 * clip.sample_rate_hz):
            f0.append(_f0(seg))
    return float(np.std(12 * np.log2(f0)))


def test_manifest_is_balanced_and_valid(corpus):
    m = parse_manifest(corpus)
    labels = m.to_cohort().label_of()
    assert sum(v == 1 for v in labels.values()) == sum(v == -1 for v in labels.values()) == 6
    for r in m.rows:
        assert 0 <= r.severity <= 52
        if r.label == "control":
            assert r.severity <= 52 * synth.CONTROL_BETA[1] + 0.05
        else:
            assert r.severity >= 52 * synth.PATIENT_BETA[0] - 0.05
        clip = dsp.load_audio(r.path)
        assert clip.sample_rate_hz == dsp.SAMPLE_RATE and len(clip.samples) == 32000
        assert np.max(np.abs(clip.samples)) <= 0.81


def test_forty_speakers_balanced(tmp_path):
    m = synth.synth_corpus(tmp_path, synth.SynthSpec(duration_s=0.6), seed=0)
    rows = list(csv.DictReader(open(m)))
    assert len({r["speaker"] for r in rows}) == 40
    assert sum(r["label"] == "patient" for r in rows) == 20
    for label in ("control", "patient"):
        females = [r for r in rows if r["label"] == label and int(r["speaker"][-3:]) % 2]
        assert len(females) == 10


def test_same_seed_is_bit_identical(tmp_path):
    spec = synth.SynthSpec(n_controls=2, n_patients=2, duration_s=0.8)
    a = synth.synth_corpus(tmp_path / "a", spec, seed=5)
    b = synth.synth_corpus(tmp_path / "b", spec, seed=5)
    c = synth.synth_corpus(tmp_path / "c", spec, seed=6)
    assert a.read_bytes() == b.read_bytes()
    for f in sorted((tmp_path / "a" / "audio").iterdir()):
        assert f.read_bytes() == (tmp_path / "b" / "audio" / f.name).read_bytes()
    assert any(f.read_bytes() != (tmp_path / "c" / "audio" / f.name).read_bytes()
               for f in (tmp_path / "a" / "audio").glob("*.wav"))


def test_alignments_mark_bursts(corpus):
    m = parse_manifest(corpus)
    for r in m.rows:
        onsets = dsp.read_alignments(r.alignments)
        assert len(onsets) >= 8 and np.all(np.diff(onsets) > 0.12)
        detected = dsp.detect_onsets(dsp.load_audio(r.path))
        # every detected onset sits on an annotated burst
        assert all(min(abs(d - t) for t in onsets) < 0.03 for d in detected)
        recall = np.mean([min(abs(d - t) for d in detected) < 0.03 for t in onsets])
        # quiet syllables of the loudness-varied controls can fall under the rise threshold
        assert recall >= (0.8 if r.label == "patient" else 0.4)


def test_controls_have_wider_intonation(corpus):
    m = parse_manifest(corpus)
    spread = {"control": [], "patient": []}
    for r in m.rows:
        spread[r.label].append(_pitch_spread(r.path, dsp.read_alignments(r.alignments)))
    assert min(spread["control"]) > max(spread["patient"]) * 0.9
    assert np.mean(spread["control"]) > 1.5 * np.mean(spread["patient"])


def test_voice_cues_follow_beta():
    rng = np.random.default_rng(0)
    c = synth.draw_voice("c", "control", rng, female=False)
    p = synth.draw_voice("p", "patient", rng, female=False)
    assert c.pitch_spread_st > p.pitch_spread_st
    assert c.burst_attack_ms < p.burst_attack_ms and c.burst_gain > p.burst_gain
    assert c.loudness_spread_db > p.loudness_spread_db


def test_split_cues_degrade_one_trait():
    rng = np.random.default_rng(1)
    pitch = synth.draw_voice("p", "patient", rng, False, cues="split", split_cue="pitch")
    burst = synth.draw_voice("q", "patient", rng, False, cues="split", split_cue="burst")
    assert pitch.beta_pitch >= synth.PATIENT_BETA[0] and pitch.beta_burst <= synth.CONTROL_BETA[1]
    assert burst.beta_burst >= synth.PATIENT_BETA[0] and burst.beta_pitch <= synth.CONTROL_BETA[1]
    assert pitch.beta_loud == burst.beta_loud == 0.5


def test_spec_validation(tmp_path):
    with pytest.raises(ValueError):
        synth.SynthSpec(cues="some")
    with pytest.raises(ValueError):
        synth.SynthSpec(n_controls=0, n_patients=0)
