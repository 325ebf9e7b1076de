"""Audio ingestion, chunking, STFT, and the pitch <-> class grid.

Everything downstream works on 5-second chunks of 8 kHz mono audio,
analysed as 513x500 magnitude spectrograms (1024-point Hann window,
10 ms hop) and labelled per frame with one of 506 pitch classes:
class 0 is unvoiced, classes 1..505 form a geometric grid from 55 Hz
upward in eighth-semitone steps.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.io import wavfile
from scipy.signal import resample_poly

SAMPLE_RATE = 8000
CHUNK_SECONDS = 5.0
CHUNK_SAMPLES = int(SAMPLE_RATE * CHUNK_SECONDS)  # 40000
WINDOW_SIZE = 1024
HOP_SAMPLES = 80
HOP_SECONDS = HOP_SAMPLES / SAMPLE_RATE  # 0.010
FREQ_BINS = WINDOW_SIZE // 2 + 1  # 513
FRAMES_PER_CHUNK = CHUNK_SAMPLES // HOP_SAMPLES  # 500

N_CLASSES = 506
BASE_HZ = 55.0
CLASSES_PER_OCTAVE = 96  # eighth-semitone resolution
TOP_CLASS = N_CLASSES - 1  # 505
# Frequencies more than half a grid step below class 1 quantize to unvoiced.
VOICED_THRESHOLD_HZ = BASE_HZ * 2.0 ** (-0.5 / CLASSES_PER_OCTAVE)


class AudioLoadError(ValueError):
    """Raised when a file cannot be ingested as mono 8 kHz audio."""


@dataclass
class AudioClip:
    """Mono audio with amplitudes in [-1, 1]."""

    samples: np.ndarray
    sample_rate: int = SAMPLE_RATE

    @property
    def duration_seconds(self) -> float:
        return len(self.samples) / self.sample_rate


@dataclass
class AudioChunk:
    """One 5-second chunk; the tail chunk is zero padded to full length.

    ``true_length`` is the number of real samples before padding, so
    padded frames can be masked out of training and metrics.
    """

    samples: np.ndarray  # exactly CHUNK_SAMPLES at SAMPLE_RATE
    true_length: int = CHUNK_SAMPLES

    @property
    def valid_frames(self) -> int:
        return min(FRAMES_PER_CHUNK, math.ceil(self.true_length / HOP_SAMPLES))

    def frame_mask(self) -> np.ndarray:
        """Boolean mask over the chunk's frames, False on padding."""
        mask = np.zeros(FRAMES_PER_CHUNK, dtype=bool)
        mask[: self.valid_frames] = True
        return mask


@dataclass
class Spectrogram:
    """Non-negative magnitude matrix, frequency bins x time frames."""

    magnitudes: np.ndarray
    hop_seconds: float = HOP_SECONDS

    def __post_init__(self):
        mags = np.asarray(self.magnitudes)
        if mags.ndim != 2:
            raise ValueError("spectrogram must be 2-D (bins x frames)")
        self.magnitudes = mags

    @property
    def n_bins(self) -> int:
        return self.magnitudes.shape[0]

    @property
    def n_frames(self) -> int:
        return self.magnitudes.shape[1]


def _to_float(data: np.ndarray) -> np.ndarray:
    if data.dtype == np.int16:
        return data.astype(np.float32) / 32768.0
    if data.dtype == np.int32:
        return data.astype(np.float32) / 2147483648.0
    if data.dtype == np.uint8:
        return (data.astype(np.float32) - 128.0) / 128.0
    if data.dtype in (np.float32, np.float64):
        return data.astype(np.float32)
    raise AudioLoadError(f"unsupported WAV sample format: {data.dtype}")


def load_audio(path) -> AudioClip:
    """Read a PCM/float WAV file, fold to mono and resample to 8 kHz."""
    try:
        rate, data = wavfile.read(path)
    except FileNotFoundError:
        raise
    except Exception as exc:
        raise AudioLoadError(f"not a readable WAV file: {path} ({exc})") from exc
    if data.size == 0:
        raise AudioLoadError(f"zero-length audio: {path}")
    samples = _to_float(np.atleast_1d(data))
    if samples.ndim == 2:
        samples = samples.mean(axis=1)
    if rate != SAMPLE_RATE:
        g = math.gcd(SAMPLE_RATE, int(rate))
        samples = resample_poly(samples.astype(np.float64), SAMPLE_RATE // g, rate // g)
        samples = samples.astype(np.float32)
    np.clip(samples, -1.0, 1.0, out=samples)
    if not np.all(np.isfinite(samples)):
        raise AudioLoadError(f"non-finite samples in {path}")
    return AudioClip(samples=samples, sample_rate=SAMPLE_RATE)


def chunk(clip: AudioClip, chunk_seconds: float = CHUNK_SECONDS) -> list[AudioChunk]:
    """Split a clip into consecutive zero-padded chunks of fixed length."""
    if clip.sample_rate != SAMPLE_RATE:
        raise ValueError(f"expected {SAMPLE_RATE} Hz audio, got {clip.sample_rate}")
    n = len(clip.samples)
    if n == 0:
        raise ValueError("cannot chunk empty audio")
    size = int(round(chunk_seconds * SAMPLE_RATE))
    chunks = []
    for start in range(0, n, size):
        seg = np.asarray(clip.samples[start : start + size], dtype=np.float32)
        true_length = len(seg)
        if true_length < size:
            seg = np.pad(seg, (0, size - true_length))
        chunks.append(AudioChunk(samples=seg, true_length=true_length))
    return chunks


def stft_magnitude(chunk_in) -> Spectrogram:
    """Magnitude STFT of one chunk: Hann 1024, hop 80, reflect-centered.

    Frame m is centered at t = m * 10 ms, giving exactly 500 frames for
    a 40000-sample chunk and 513 frequency bins.
    """
    samples = chunk_in.samples if isinstance(chunk_in, AudioChunk) else np.asarray(chunk_in)
    if samples.shape != (CHUNK_SAMPLES,):
        raise ValueError(f"expected {CHUNK_SAMPLES} samples, got {samples.shape}")
    half = WINDOW_SIZE // 2
    padded = np.pad(samples.astype(np.float32), half, mode="reflect")
    stride = padded.strides[0]
    frames = np.lib.stride_tricks.as_strided(
        padded,
        shape=(FRAMES_PER_CHUNK, WINDOW_SIZE),
        strides=(HOP_SAMPLES * stride, stride),
    )
    window = np.hanning(WINDOW_SIZE).astype(np.float32)
    spectrum = np.fft.rfft(frames * window, axis=1)
    mags = np.abs(spectrum).T.astype(np.float32)
    return Spectrogram(magnitudes=mags)


def hz_to_class(f0):
    """Quantize frequency in Hz to a pitch class id.

    Non-positive input (and anything more than half a step below the
    55 Hz anchor) maps to the unvoiced class 0; everything else rounds
    to the nearest eighth-semitone step, clamped to [1, 505].
    Accepts scalars or arrays.
    """
    arr = np.asarray(f0, dtype=np.float64)
    if np.any(np.isnan(arr)) or np.any(np.isneginf(arr)) or np.any(np.isposinf(arr)):
        raise ValueError("pitch values must be finite")
    if np.any(arr < 0):
        raise ValueError("pitch values must be non-negative")
    voiced = arr >= VOICED_THRESHOLD_HZ
    classes = np.zeros(arr.shape, dtype=np.int64)
    if np.any(voiced):
        steps = np.rint(CLASSES_PER_OCTAVE * np.log2(arr[voiced] / BASE_HZ)).astype(np.int64)
        classes[voiced] = np.clip(1 + steps, 1, TOP_CLASS)
    if np.isscalar(f0) or arr.ndim == 0:
        return int(classes)
    return classes


def class_to_hz(c):
    """Inverse of hz_to_class: class 0 is 0 Hz, class c is 55 * 2^((c-1)/96)."""
    arr = np.asarray(c, dtype=np.int64)
    if np.any(arr < 0) or np.any(arr > TOP_CLASS):
        raise ValueError(f"class ids must be in [0, {TOP_CLASS}]")
    hz = np.where(arr == 0, 0.0, BASE_HZ * 2.0 ** ((arr - 1) / CLASSES_PER_OCTAVE))
    if np.isscalar(c) or arr.ndim == 0:
        return float(hz)
    return hz


def quantize_labels(f0_track, n_frames: int) -> np.ndarray:
    """Quantize a 10 ms f0 track to class ids, padding short tracks with 0."""
    track = np.asarray(f0_track, dtype=np.float64)
    if len(track) < n_frames:
        track = np.pad(track, (0, n_frames - len(track)))
    return hz_to_class(track[:n_frames])


def validate_labels(labels: np.ndarray, n_frames: int | None = None) -> np.ndarray:
    """Check a class-id sequence is integral and within [0, 505]."""
    arr = np.asarray(labels)
    if not np.issubdtype(arr.dtype, np.integer):
        raise ValueError("labels must be integer class ids")
    if arr.min(initial=0) < 0 or arr.max(initial=0) > TOP_CLASS:
        raise ValueError(f"labels out of range [0, {TOP_CLASS}]")
    if n_frames is not None and len(arr) != n_frames:
        raise ValueError(f"expected {n_frames} labels, got {len(arr)}")
    return arr


def read_pitch_track(path) -> np.ndarray:
    """Read the canonical label format: one Hz value per 10 ms frame, 0 = unvoiced."""
    values = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            try:
                values.append(float(line))
            except ValueError as exc:
                raise ValueError(f"{path}:{lineno}: not a pitch value: {line!r}") from exc
    return np.asarray(values, dtype=np.float64)


def write_pitch_track(path, f0_track) -> None:
    """Write a pitch track in the canonical one-value-per-line format."""
    with open(path, "w") as fh:
        for value in np.asarray(f0_track, dtype=np.float64):
            fh.write(f"{value:.3f}\n")
