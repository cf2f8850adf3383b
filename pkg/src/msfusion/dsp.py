"""Audio loading, plosive-aligned segmentation and time-frequency images.

Three representations are produced, each a 128 x 126 image in [0, 1]:

* wideband Mel spectrogram (5 ms Hann window, 3 ms hop, 64 bands)
* narrowband Mel spectrogram (30 ms window, 10 ms hop, 128 bands)
* Morlet scalogram (64 log-spaced scales, 80 Hz to 8 kHz)
"""
from __future__ import annotations

import enum
import io
import math
import wave
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import signal
from scipy.io import wavfile

from . import kernels
from .fileio import atomic_write_bytes

SAMPLE_RATE = 16000
SEGMENT_SECONDS = 0.5
IMAGE_SHAPE = (128, 126)
LOG_FLOOR = 1e-10

ONSET_HOP_S = 0.025
ONSET_PERCENTILE = 80.0
ONSET_MIN_GAP_S = 0.150
ONSET_RELATIVE_FLOOR = 0.1  # of the largest energy rise

MORLET_W0 = 6.0
WAVELET_FMIN = 80.0
WAVELET_FMAX = 8000.0


class AudioError(Exception):
    """Base class for audio ingestion failures."""


class UnreadableAudioError(AudioError):
    pass


class MultichannelAudioError(AudioError):
    pass


class UnsupportedEncodingError(AudioError):
    pass


class Kind(str, enum.Enum):
    WIDEBAND = "wideband"
    NARROWBAND = "narrowband"
    WAVELET = "wavelet"


# (window_ms, shift_ms, n_bands); the wavelet only fixes its scale count
_FIXED_PARAMS = {Kind.WIDEBAND: (5.0, 3.0, 64), Kind.NARROWBAND: (30.0, 10.0, 128), Kind.WAVELET: (64,)}


@dataclass(frozen=True)
class RepresentationSpec:
    kind: Kind
    window_ms: float
    shift_ms: float
    n_bands: int
    target_shape: tuple = IMAGE_SHAPE

    def __post_init__(self):
        if self.n_bands <= 0:
            raise ValueError("n_bands must be positive")
        fixed = _FIXED_PARAMS[Kind(self.kind)]
        got = (self.window_ms, self.shift_ms, self.n_bands) if self.kind != Kind.WAVELET else (self.n_bands,)
        if tuple(got) != fixed:
            raise ValueError(f"{Kind(self.kind).value} representation requires {fixed}, got {tuple(got)}")
        if tuple(self.target_shape) != IMAGE_SHAPE:
            raise ValueError(f"target_shape must be {IMAGE_SHAPE}")

    @property
    def name(self) -> str:
        return self.kind.value


WIDEBAND = RepresentationSpec(Kind.WIDEBAND, 5.0, 3.0, 64)
NARROWBAND = RepresentationSpec(Kind.NARROWBAND, 30.0, 10.0, 128)
WAVELET = RepresentationSpec(Kind.WAVELET, 0.0, 0.0, 64)

SPECS = {s.name: s for s in (WIDEBAND, NARROWBAND, WAVELET)}
# stream order used whenever representations are combined
STREAM_ORDER = ("wideband", "narrowband", "wavelet")


def get_spec(name: str) -> RepresentationSpec:
    try:
        return SPECS[name]
    except KeyError:
        raise ValueError(f"unknown representation {name!r}; expected one of {sorted(SPECS)}") from None


@dataclass
class AudioClip:
    samples: np.ndarray
    sample_rate_hz: int = SAMPLE_RATE
    speaker_id: str = ""
    utterance_id: str = ""

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.ndim != 1 or self.samples.size == 0:
            raise ValueError("AudioClip needs a non-empty mono signal")
        if self.sample_rate_hz <= 0:
            raise ValueError("sample rate must be positive")
        if not np.all(np.isfinite(self.samples)):
            raise ValueError("AudioClip samples must be finite")

    @property
    def duration_s(self) -> float:
        return self.samples.size / self.sample_rate_hz


@dataclass
class Segment:
    samples: np.ndarray
    onset_time_s: float
    sample_rate_hz: int = SAMPLE_RATE
    speaker_id: str = ""
    utterance_id: str = ""
    index: int = 0


@dataclass
class TimeFreqImage:
    values: np.ndarray
    spec: RepresentationSpec
    segment_index: int = 0
    speaker_id: str = ""
    utterance_id: str = ""
    meta: dict = field(default_factory=dict)


# ---------------------------------------------------------------------------
# I/O
# ---------------------------------------------------------------------------

def load_audio(path, speaker_id: str = "", utterance_id: str = "") -> AudioClip:
    """Read a mono PCM WAV file and return it at the pipeline rate.

    8, 16 and 24-bit integer and 32-bit float encodings are accepted.
    """
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise UnreadableAudioError(f"{path}: {exc}") from exc
    if len(raw) < 12 or raw[:4] != b"RIFF" or raw[8:12] != b"WAVE":
        raise UnreadableAudioError(f"{path}: not a RIFF/WAVE file")

    try:
        with wave.open(str(path), "rb") as wf:
            channels, width, rate = wf.getnchannels(), wf.getsampwidth(), wf.getframerate()
            frames = wf.readframes(wf.getnframes())
        if channels != 1:
            raise MultichannelAudioError(f"{path}: {channels} channels, expected mono")
        samples = _decode_pcm(frames, width, path)
    except wave.Error as exc:
        if "unknown format: 3" not in str(exc):
            if "unknown format" in str(exc):
                raise UnsupportedEncodingError(f"{path}: {exc}") from exc
            raise UnreadableAudioError(f"{path}: {exc}") from exc
        samples, rate = _read_float_wav(path)
    except EOFError as exc:
        raise UnreadableAudioError(f"{path}: truncated file") from exc

    if samples.size == 0:
        raise UnreadableAudioError(f"{path}: no samples")
    if rate != SAMPLE_RATE:
        samples = resample(samples, rate, SAMPLE_RATE)
    samples = np.clip(samples, -1.0, 1.0)
    return AudioClip(samples, SAMPLE_RATE, speaker_id or path.stem, utterance_id or path.stem)


def _decode_pcm(frames: bytes, width: int, path) -> np.ndarray:
    if width == 1:
        return (np.frombuffer(frames, dtype=np.uint8).astype(np.float64) - 128.0) / 128.0
    if width == 2:
        return np.frombuffer(frames, dtype="<i2").astype(np.float64) / 32768.0
    if width == 3:
        b = np.frombuffer(frames, dtype=np.uint8).reshape(-1, 3).astype(np.int32)
        v = b[:, 0] | (b[:, 1] << 8) | (b[:, 2] << 16)
        v = np.where(v >= 1 << 23, v - (1 << 24), v)
        return v.astype(np.float64) / float(1 << 23)
    raise UnsupportedEncodingError(f"{path}: {8 * width}-bit integer PCM is not supported")


def _read_float_wav(path):
    try:
        rate, data = wavfile.read(str(path))
    except (ValueError, OSError) as exc:
        raise UnreadableAudioError(f"{path}: {exc}") from exc
    if data.ndim != 1:
        raise MultichannelAudioError(f"{path}: {data.shape[1]} channels, expected mono")
    if data.dtype != np.float32:
        raise UnsupportedEncodingError(f"{path}: float encoding {data.dtype} is not supported")
    return data.astype(np.float64), rate


def write_wav(path, samples, sample_rate: int = SAMPLE_RATE) -> None:
    """Write 16-bit mono PCM."""
    pcm = np.round(np.clip(samples, -1.0, 32767 / 32768) * 32768.0).astype("<i2")
    buf = io.BytesIO()
    with wave.open(buf, "wb") as wf:
        wf.setnchannels(1)
        wf.setsampwidth(2)
        wf.setframerate(sample_rate)
        wf.writeframes(pcm.tobytes())
    atomic_write_bytes(path, buf.getvalue())


def resample(x: np.ndarray, rate_in: int, rate_out: int) -> np.ndarray:
    """Band-limited polyphase resampling."""
    g = math.gcd(int(rate_in), int(rate_out))
    return signal.resample_poly(x, rate_out // g, rate_in // g)


def read_alignments(path) -> list[float]:
    """Parse an alignment file: one onset time in seconds per line."""
    out = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        try:
            out.append(float(line))
        except ValueError:
            raise ValueError(f"{path}:{lineno}: not a number: {line!r}") from None
    return out


# ---------------------------------------------------------------------------
# Segmentation
# ---------------------------------------------------------------------------

def detect_onsets(clip: AudioClip) -> list[float]:
    """Energy-onset stand-in for a plosive detector.

    Short-time energy is computed on non-overlapping 25 ms frames; onsets are
    peaks of its first difference that exceed the 80th percentile of that
    difference (and a tenth of its maximum, so sparse bursts in near-silence
    do not promote noise) and lie at least 150 ms apart.
    """
    sr = clip.sample_rate_hz
    hop = int(round(ONSET_HOP_S * sr))
    n = clip.samples.size // hop
    if n < 2:
        return []
    energy = np.square(clip.samples[: n * hop].reshape(n, hop)).sum(axis=1)
    rise = np.diff(energy, prepend=0.0)
    if not np.any(rise > 0):
        return []
    threshold = max(np.percentile(rise, ONSET_PERCENTILE), ONSET_RELATIVE_FLOOR * rise.max())
    peaks, _ = signal.find_peaks(
        np.concatenate([[-np.inf], rise, [-np.inf]]),
        height=max(threshold, np.finfo(float).tiny),
        distance=max(1, int(round(ONSET_MIN_GAP_S / ONSET_HOP_S))),
    )
    return [float((p - 1) * hop / sr) for p in peaks]


def segment_aligned(clip: AudioClip, alignments=None) -> list[Segment]:
    """Cut one 500 ms segment per onset, zero-padded at the clip end.

    Without explicit alignments the energy-onset detector supplies the onsets;
    if it finds none, a single segment at t = 0 is returned.
    """
    if clip.samples.size == 0:
        raise ValueError("empty clip")
    sr = clip.sample_rate_hz
    if alignments is None:
        onsets = detect_onsets(clip) or [0.0]
    else:
        onsets = [float(t) for t in alignments]
        bad = [t for t in onsets if t < 0 or t > clip.duration_s]
        if bad:
            raise ValueError(f"alignment times outside clip duration {clip.duration_s:.3f}s: {bad}")
    length = int(round(SEGMENT_SECONDS * sr))
    segments = []
    for k, t in enumerate(onsets):
        start = int(round(t * sr))
        chunk = clip.samples[start : start + length]
        buf = np.zeros(length)
        buf[: chunk.size] = chunk
        segments.append(Segment(buf, t, sr, clip.speaker_id, clip.utterance_id, k))
    return segments


def uniform_segments(clip: AudioClip, n: int, rng: np.random.Generator) -> list[Segment]:
    """Draw ``n`` segment onsets uniformly over the clip (background training data)."""
    last = max(clip.duration_s - SEGMENT_SECONDS, 0.0)
    onsets = np.sort(rng.uniform(0.0, last, size=n)) if last > 0 else np.zeros(n)
    return segment_aligned(clip, list(onsets))


# ---------------------------------------------------------------------------
# Spectral building blocks
# ---------------------------------------------------------------------------

def frame_count(length: int, window: int, hop: int) -> int:
    if length < window:
        return 0
    return (length - window) // hop + 1


def next_pow2(n: int) -> int:
    return 1 << max(0, int(n - 1).bit_length())


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_band_edges(n_bands: int, sample_rate: int = SAMPLE_RATE) -> np.ndarray:
    """Corner frequencies (Hz) of ``n_bands`` HTK-Mel triangles over 0..Nyquist.

    Filter k rises from edges[k] to its peak at edges[k+1] and falls to edges[k+2].
    """
    return mel_to_hz(np.linspace(0.0, hz_to_mel(sample_rate / 2.0), n_bands + 2))


def _tri_antiderivative(f, lo, mid, hi):
    # integral of the unit-peak triangle (lo, mid, hi) from -inf to f
    f = np.clip(f, lo, hi)
    left = np.where(f <= mid, (f - lo) ** 2 / (2 * (mid - lo)), (mid - lo) / 2)
    right = np.where(
        f > mid, (hi - mid) / 2 - (hi - f) ** 2 / (2 * (hi - mid)), 0.0
    )
    return left + right


def mel_filterbank(n_bands: int, n_fft: int, sample_rate: int = SAMPLE_RATE) -> np.ndarray:
    """Triangular Mel weights of shape (n_bands, n_fft // 2 + 1).

    Each weight is the triangle averaged over the FFT bin's frequency cell,
    so narrow low-frequency filters that fall between bin centres still
    collect energy.
    """
    edges = mel_band_edges(n_bands, sample_rate)
    df = sample_rate / n_fft
    freqs = np.arange(n_fft // 2 + 1) * df
    a, b = freqs - df / 2, freqs + df / 2
    W = np.empty((n_bands, freqs.size))
    for k in range(n_bands):
        lo, mid, hi = edges[k], edges[k + 1], edges[k + 2]
        W[k] = (_tri_antiderivative(b, lo, mid, hi) - _tri_antiderivative(a, lo, mid, hi)) / df
    return W


def power_spectrogram(x: np.ndarray, window: int, hop: int, n_fft: int) -> np.ndarray:
    """|STFT|^2 of shape (n_fft//2 + 1, frames); frames are not centred."""
    n = frame_count(x.size, window, hop)
    if n == 0:
        raise ValueError(f"signal of {x.size} samples is shorter than the {window}-sample window")
    frames = np.lib.stride_tricks.sliding_window_view(x, window)[::hop][:n]
    spec = np.fft.rfft(frames * signal.get_window("hann", window), n=n_fft, axis=1)
    return (spec.real ** 2 + spec.imag ** 2).T


def mel_energies(x: np.ndarray, spec: RepresentationSpec, sample_rate: int = SAMPLE_RATE) -> np.ndarray:
    """Mel-band power (before log), shape (n_bands, frames)."""
    window = int(round(spec.window_ms * sample_rate / 1000.0))
    hop = int(round(spec.shift_ms * sample_rate / 1000.0))
    n_fft = next_pow2(window)
    return mel_filterbank(spec.n_bands, n_fft, sample_rate) @ power_spectrogram(x, window, hop, n_fft)


def bicubic_resize(matrix, target) -> np.ndarray:
    """Resize with the Keys cubic kernel (a = -0.5), corners aligned.

    Constants, ramps and quadratics are reproduced exactly, borders included.
    """
    M = np.asarray(matrix, dtype=np.float64)
    if M.ndim != 2 or M.shape[0] < 2 or M.shape[1] < 2:
        raise ValueError(f"bicubic_resize needs at least a 2x2 matrix, got shape {M.shape}")
    rows, cols = target
    if rows < 1 or cols < 1:
        raise ValueError(f"invalid target shape {target}")
    # interpolate the offset from one reference sample so constants come back bit-exact
    ref = M.flat[0]
    return ref + kernels.bicubic_resize(M - ref, rows, cols)


def normalize_image(M: np.ndarray) -> np.ndarray:
    lo, hi = M.min(), M.max()
    if not hi > lo:
        return np.zeros_like(M)
    return (M - lo) / (hi - lo)


def _finish(log_tf: np.ndarray, spec: RepresentationSpec, segment: Segment) -> TimeFreqImage:
    values = normalize_image(bicubic_resize(log_tf, spec.target_shape))
    # bicubic overshoot is removed by the min-max step; clip guards round-off
    values = np.clip(values, 0.0, 1.0)
    return TimeFreqImage(values, spec, segment.index, segment.speaker_id, segment.utterance_id,
                         {"onset_s": segment.onset_time_s})


def mel_spectrogram(segment: Segment, spec: RepresentationSpec) -> TimeFreqImage:
    if spec.kind not in (Kind.WIDEBAND, Kind.NARROWBAND):
        raise ValueError(f"mel_spectrogram needs a wideband or narrowband spec, got {spec.kind}")
    mel = mel_energies(segment.samples, spec, segment.sample_rate_hz)
    return _finish(np.log(mel + LOG_FLOOR), spec, segment)


def wavelet_frequencies(n_scales: int = 64) -> np.ndarray:
    """Pseudo-frequencies (Hz) of the scalogram rows, highest first."""
    return np.geomspace(WAVELET_FMAX, WAVELET_FMIN, n_scales)


def wavelet_scales(n_scales: int = 64) -> np.ndarray:
    """Morlet scales in seconds, ascending; scale s has pseudo-frequency w0 / (2 pi s)."""
    return MORLET_W0 / (2.0 * np.pi * wavelet_frequencies(n_scales))


def cwt_morlet(x: np.ndarray, scales: np.ndarray, sample_rate: int = SAMPLE_RATE) -> np.ndarray:
    """Complex Morlet CWT magnitude, shape (len(scales), len(x)).

    Computed in the frequency domain with the analytic wavelet and unit
    peak gain per scale, so a unit sinusoid yields magnitude ~1 at its scale.
    """
    n = x.size
    n_pad = 2 * next_pow2(n)
    X = np.fft.fft(x, n_pad)
    omega = 2.0 * np.pi * np.fft.fftfreq(n_pad, d=1.0 / sample_rate)
    positive = omega > 0
    out = np.empty((scales.size, n))
    for k, s in enumerate(scales):
        psi_hat = np.where(positive, 2.0 * np.exp(-0.5 * (s * omega - MORLET_W0) ** 2), 0.0)
        out[k] = np.abs(np.fft.ifft(X * psi_hat)[:n])
    return out


def pool_columns(M: np.ndarray, n_cols: int) -> np.ndarray:
    """Average consecutive time samples into ``n_cols`` near-equal blocks."""
    bounds = np.round(np.linspace(0, M.shape[1], n_cols + 1)).astype(int)
    sums = np.add.reduceat(M, bounds[:-1], axis=1)
    return sums / np.diff(bounds)


def scalogram_magnitude(segment: Segment, spec: RepresentationSpec = WAVELET) -> np.ndarray:
    """Time-pooled CWT magnitude, shape (n_bands, target columns)."""
    mag = cwt_morlet(segment.samples, wavelet_scales(spec.n_bands), segment.sample_rate_hz)
    return pool_columns(mag, spec.target_shape[1])


def wavelet_scalogram(segment: Segment, spec: RepresentationSpec = WAVELET) -> TimeFreqImage:
    if spec.kind is not Kind.WAVELET:
        raise ValueError(f"wavelet_scalogram needs a wavelet spec, got {spec.kind}")
    return _finish(np.log(scalogram_magnitude(segment, spec) + LOG_FLOOR), spec, segment)


def compute_image(segment: Segment, spec: RepresentationSpec) -> TimeFreqImage:
    if spec.kind is Kind.WAVELET:
        return wavelet_scalogram(segment, spec)
    return mel_spectrogram(segment, spec)


def row_to_band(row: int, spec: RepresentationSpec) -> int:
    """Band index whose resampled position is nearest to image row ``row``."""
    rows = spec.target_shape[0]
    return int(round(row * (spec.n_bands - 1) / (rows - 1)))
