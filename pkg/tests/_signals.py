"""Signal builders shared by the test modules."""
import numpy as np

from msfusion import dsp


def sine(freq, seconds=0.5, sr=16000, amp=0.5):
    t = np.arange(int(round(seconds * sr))) / sr
    return amp * np.sin(2 * np.pi * freq * t)


def segment(samples, sr=16000):
    return dsp.Segment(np.asarray(samples, dtype=float), 0.0, sr)


def chirp(f0, f1, seconds=0.5, sr=16000, amp=0.5):
    t = np.arange(int(round(seconds * sr))) / sr
    # linear chirp: instantaneous frequency f0 + (f1 - f0) t / T
    return amp * np.sin(2 * np.pi * (f0 * t + 0.5 * (f1 - f0) * t * t / seconds))


def burst_train(times, seconds=2.0, sr=16000, rng=None):
    rng = rng or np.random.default_rng(0)
    x = 1e-4 * rng.standard_normal(int(seconds * sr))
    for t in times:
        i = int(t * sr)
        n = int(0.08 * sr)
        env = np.exp(-np.arange(n) / (0.02 * sr))
        x[i : i + n] += 0.8 * env[: len(x[i : i + n])] * rng.standard_normal(min(n, len(x) - i))
    return x
