"""Synthetic /pa-ta-ka/ corpus with a controllable dysarthria-like blend.

Each speaker has a blend coefficient ``beta`` in [0, 1]. At 0 the voice has
wide, lively intonation, crisp plosive bursts and varied syllable loudness;
towards 1 the intonation flattens, bursts soften and loudness evens out.
Severity is ``52 * beta``.
"""
from __future__ import annotations

import csv
import io
import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import signal

from . import dsp
from .fileio import atomic_write_text

SEVERITY_MAX = 52.0
CONTROL_BETA = (0.0, 0.2)
PATIENT_BETA = (0.6, 1.0)
CUE_MODES = ("all", "split")

# plosive burst spectra (centre Hz, bandwidth Hz) for p, t, k
_BURSTS = ((900.0, 900.0), (4200.0, 2000.0), (2200.0, 1200.0))
_FORMANTS = ((750.0, 90.0, 1.0), (1250.0, 110.0, 0.6), (2600.0, 170.0, 0.25), (3400.0, 250.0, 0.12))


@dataclass(frozen=True)
class VoiceParams:
    speaker_id: str
    label: str
    beta: float
    f0_hz: float
    formant_scale: float
    rate_hz: float
    # per-cue blends; in "all" mode every cue equals beta
    beta_pitch: float
    beta_burst: float
    beta_loud: float

    @property
    def severity(self) -> float:
        return round(SEVERITY_MAX * self.beta, 1)

    @property
    def pitch_spread_st(self) -> float:
        return 6.0 * (1.0 - 0.9 * self.beta_pitch)

    @property
    def burst_attack_ms(self) -> float:
        return 0.3 + 20.0 * self.beta_burst

    @property
    def burst_gain(self) -> float:
        return 1.0 - 0.85 * self.beta_burst

    @property
    def loudness_spread_db(self) -> float:
        return 6.0 * (1.0 - 0.85 * self.beta_loud)


def draw_voice(speaker_id: str, label: str, rng: np.random.Generator, female: bool,
               cues: str = "all", split_cue: str = "pitch") -> VoiceParams:
    lo, hi = PATIENT_BETA if label == "patient" else CONTROL_BETA
    beta = float(rng.uniform(lo, hi))
    f0 = float(rng.uniform(185, 235) if female else rng.uniform(110, 150))
    if cues == "all":
        bp = bb = bl = beta
    elif label == "control":
        bp, bb, bl = beta, beta, 0.5
    else:
        bp = beta if split_cue == "pitch" else float(rng.uniform(*CONTROL_BETA))
        bb = beta if split_cue == "burst" else float(rng.uniform(*CONTROL_BETA))
        bl = 0.5
    return VoiceParams(speaker_id, label, beta, f0, float(rng.uniform(0.92, 1.12) * (1.12 if female else 1.0)),
                       float(rng.uniform(5.2, 6.2)), bp, bb, bl)


def _formant_gain(freqs, scale):
    g = np.zeros_like(freqs)
    for fc, bw, amp in _FORMANTS:
        g += amp / (1.0 + ((freqs - fc * scale) / bw) ** 2)
    return g + 0.01


def _vowel(f0_track, scale, sr):
    """Additive harmonic vowel following a per-sample F0 track."""
    phase = 2 * np.pi * np.cumsum(f0_track) / sr
    out = np.zeros_like(f0_track)
    n_harm = int(4000 // f0_track.min())
    for k in range(1, n_harm + 1):
        fk = k * f0_track
        out += np.where(fk < 5000, _formant_gain(fk, scale), 0.0) * np.sin(k * phase) / np.sqrt(k)
    return out


def _burst(kind, attack_ms, rng, sr):
    n = int(0.025 * sr)
    fc, bw = _BURSTS[kind]
    noise = rng.standard_normal(n + 256)
    b, a = signal.butter(2, [max(fc - bw / 2, 100) / (sr / 2), min(fc + bw / 2, 7500) / (sr / 2)], "band")
    noise = signal.lfilter(b, a, noise)[256:]
    t = np.arange(n) / sr
    attack = max(attack_ms * 1e-3, 1.0 / sr)
    env = np.minimum(t / attack, 1.0) * np.exp(-np.maximum(t - attack, 0) / 0.006)
    return noise * env / (np.std(noise) + 1e-12)


def synth_utterance(voice: VoiceParams, rng: np.random.Generator, duration_s: float = 3.0,
                    sr: int = dsp.SAMPLE_RATE):
    """Return (samples, burst onset times in seconds)."""
    n = int(duration_s * sr)
    x = np.zeros(n)
    period = 1.0 / voice.rate_hz
    t0 = float(rng.uniform(0.05, 0.12))
    onsets = []
    syl = 0
    while t0 + 0.16 < duration_s - 0.02:
        start = int(t0 * sr)
        gain = 10 ** (rng.normal(0.0, voice.loudness_spread_db) / 20)
        b = _burst(syl % 3, voice.burst_attack_ms, rng, sr) * 0.5 * voice.burst_gain * gain
        x[start : start + b.size] += b[: n - start]
        # vowel after a short voice-onset time
        v0 = start + int(0.02 * sr)
        vlen = int(min(0.11, period - 0.045) * sr)
        st_a, st_b = rng.normal(0.0, voice.pitch_spread_st, size=2)
        st = np.linspace(st_a, st_b, vlen)
        f0 = voice.f0_hz * 2 ** (st / 12) * (1 + 0.004 * rng.standard_normal(vlen).cumsum() / np.sqrt(vlen))
        env = np.minimum(1.0, np.arange(vlen) / (0.008 * sr)) * np.minimum(1.0, (vlen - np.arange(vlen)) / (0.02 * sr))
        v = _vowel(f0, voice.formant_scale, sr) * env * gain * 0.3
        end = min(v0 + vlen, n)
        x[v0:end] += v[: end - v0]
        onsets.append(round(t0, 4))
        syl += 1
        t0 += period * float(rng.uniform(0.93, 1.07))
    x += rng.standard_normal(n) * 10 ** (-50 / 20)
    peak = np.max(np.abs(x))
    return 0.8 * x / peak, onsets


@dataclass
class SynthSpec:
    n_controls: int = 20
    n_patients: int = 20
    utterances: int = 1
    duration_s: float = 3.0
    cues: str = "all"
    prefix: str = "spk"
    labels_only: str = ""  # "control" to generate a healthy background corpus

    def __post_init__(self):
        if self.cues not in CUE_MODES:
            raise ValueError(f"cues must be one of {CUE_MODES}")
        if self.n_controls < 0 or self.n_patients < 0 or self.n_controls + self.n_patients == 0:
            raise ValueError("need at least one speaker")


def synth_corpus(out_dir, spec: SynthSpec, seed: int = 0) -> Path:
    """Write WAV files, alignment files and ``manifest.csv`` under ``out_dir``."""
    out = Path(out_dir)
    try:
        (out / "audio").mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create output directory {out}: {exc}") from exc
    if not os.access(out, os.W_OK):
        raise OSError(f"output directory {out} is not writable")
    rng = np.random.default_rng(seed)
    roster = [("control", i) for i in range(spec.n_controls)] + [("patient", i) for i in range(spec.n_patients)]
    rows = []
    for label, i in roster:
        sid = f"{spec.prefix}{'C' if label == 'control' else 'P'}{i:03d}"
        voice = draw_voice(sid, label, rng, female=bool(i % 2), cues=spec.cues,
                           split_cue="pitch" if i % 2 == 0 else "burst")
        for u in range(spec.utterances):
            uid = f"ddk{u}"
            samples, onsets = synth_utterance(voice, rng, spec.duration_s)
            wav = Path("audio") / f"{sid}_{uid}.wav"
            ali = Path("audio") / f"{sid}_{uid}.txt"
            dsp.write_wav(out / wav, samples)
            atomic_write_text(out / ali, "".join(f"{t:.4f}\n" for t in onsets))
            rows.append({"path": wav.as_posix(), "speaker": sid, "utterance": uid, "label": label,
                         "severity": f"{voice.severity:.1f}", "alignments": ali.as_posix()})
    manifest = out / "manifest.csv"
    _write_csv(manifest, rows)
    return manifest


def _write_csv(path, rows):
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=["path", "speaker", "utterance", "label", "severity", "alignments"],
                       lineterminator="\n")
    w.writeheader()
    w.writerows(rows)
    atomic_write_text(path, buf.getvalue())
