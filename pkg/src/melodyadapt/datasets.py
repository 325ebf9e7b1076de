"""Dataset manifests, episode streams, and synthetic corpus generation.

A manifest is a plain-text file, one entry per line, tab separated:
audio path, label path, split tag (train/val/test), domain tag. Paths are
resolved relative to the manifest's directory. Label files follow the
canonical format from the signal module (one Hz value per 10 ms frame).

The synthesizer renders harmonic "vocal" melodies (piecewise note
trajectories with glides and silences) over a configurable accompaniment
at a chosen SNR; its labels are exact by construction, which is what
makes desk-scale domain-shift experiments possible without licensed
corpora.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.io import wavfile

from . import signal as sig

SPLITS = ("train", "val", "test")


@dataclass
class Episode:
    """One 5-second chunk as a unit of adaptation.

    ``labels`` are per-frame class ids when ground truth is known, None
    otherwise; ``valid`` masks out frames synthesized from zero padding.
    """

    id: str
    spectrogram: sig.Spectrogram
    labels: np.ndarray | None
    valid: np.ndarray

    @property
    def n_frames(self) -> int:
        return self.spectrogram.n_frames


@dataclass(frozen=True)
class ManifestEntry:
    audio: Path
    labels: Path
    split: str
    domain: str


@dataclass
class DatasetManifest:
    entries: list[ManifestEntry]
    root: Path

    def for_split(self, split: str) -> list[ManifestEntry]:
        return [e for e in self.entries if e.split == split]


def load_manifest(path) -> DatasetManifest:
    path = Path(path)
    root = path.parent
    entries: list[ManifestEntry] = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if not line or line.startswith("#"):
                continue
            parts = line.split("\t")
            if len(parts) != 4:
                raise ValueError(f"{path}:{lineno}: expected 4 tab-separated fields, got {len(parts)}")
            audio, labels, split, domain = parts
            if split not in SPLITS:
                raise ValueError(f"{path}:{lineno}: unknown split {split!r}")
            audio_path = (root / audio).resolve()
            label_path = (root / labels).resolve()
            if not audio_path.exists():
                raise FileNotFoundError(f"{path}:{lineno}: missing audio file {audio_path}")
            if not label_path.exists():
                raise FileNotFoundError(f"{path}:{lineno}: missing label file {label_path}")
            entries.append(ManifestEntry(audio=audio_path, labels=label_path, split=split, domain=domain))
    if not entries:
        raise ValueError(f"{path}: empty manifest")
    return DatasetManifest(entries=entries, root=root)


def write_manifest(path, entries: list[ManifestEntry]) -> None:
    path = Path(path)
    with open(path, "w") as fh:
        for e in entries:
            audio = Path(e.audio).resolve().relative_to(path.parent.resolve())
            labels = Path(e.labels).resolve().relative_to(path.parent.resolve())
            fh.write(f"{audio}\t{labels}\t{e.split}\t{e.domain}\n")


def episodes_from_clip(clip: sig.AudioClip, f0_track: np.ndarray | None, base_id: str) -> list[Episode]:
    """Chunk one clip and pair each chunk with its quantized labels."""
    episodes = []
    for i, ch in enumerate(sig.chunk(clip)):
        spec = sig.stft_magnitude(ch)
        labels = None
        if f0_track is not None:
            start = i * sig.FRAMES_PER_CHUNK
            labels = sig.quantize_labels(f0_track[start:], sig.FRAMES_PER_CHUNK)
        episodes.append(
            Episode(
                id=f"{base_id}#{i}",
                spectrogram=spec,
                labels=labels,
                valid=ch.frame_mask(),
            )
        )
    return episodes


def episode_stream(manifest: DatasetManifest, split: str, shuffle_seed: int | None = None) -> list[Episode]:
    """All chunks of a split, in manifest order (or seeded-shuffle order)."""
    episodes: list[Episode] = []
    for entry in manifest.for_split(split):
        clip = sig.load_audio(entry.audio)
        track = sig.read_pitch_track(entry.labels)
        expected = math.ceil(len(clip.samples) / sig.HOP_SAMPLES)
        if abs(len(track) - expected) > 1:
            raise ValueError(
                f"{entry.labels}: {len(track)} label frames but audio spans {expected}"
            )
        episodes.extend(episodes_from_clip(clip, track, Path(entry.audio).stem))
    if shuffle_seed is not None:
        rng = np.random.default_rng(shuffle_seed)
        rng.shuffle(episodes)
    return episodes


@dataclass(frozen=True)
class SynthesisSpec:
    """Recipe for one synthetic domain.

    ``partial_amplitudes`` set the harmonic timbre of the melody voice;
    ``accompaniment`` is one of drone/chord/noise mixed at ``snr_db``
    below (or above) the voiced melody level. ``note_seconds`` bounds the
    segment durations and ``vibrato_cents`` adds sinusoidal pitch motion
    within notes (labels stay exact: they record the instantaneous f0 at
    each frame).
    """

    n_clips: int
    duration_seconds: float
    pitch_range: tuple[float, float]
    partial_amplitudes: tuple[float, ...]
    accompaniment: str
    snr_db: float
    voiced_fraction: float
    seed: int
    note_seconds: tuple[float, float] = (0.30, 0.80)
    vibrato_cents: float = 0.0
    amplitude_jitter_db: float = 0.0  # slow per-frame loudness wander

    def __post_init__(self):
        if self.pitch_range[0] < 55.0 or self.pitch_range[1] > 2000.0:
            raise ValueError("pitch range must lie within [55, 2000] Hz")
        if self.pitch_range[0] >= self.pitch_range[1]:
            raise ValueError("pitch range must be increasing")
        if self.accompaniment not in ("drone", "chord", "noise"):
            raise ValueError(f"unknown accompaniment {self.accompaniment!r}")
        if not math.isfinite(self.snr_db):
            raise ValueError("snr_db must be finite")
        if not 0.0 < self.voiced_fraction <= 1.0:
            raise ValueError("voiced_fraction must be in (0, 1]")
        if self.n_clips <= 0 or self.duration_seconds <= 0:
            raise ValueError("n_clips and duration_seconds must be positive")
        if not 0.0 < self.note_seconds[0] <= self.note_seconds[1]:
            raise ValueError("note_seconds must be an increasing positive range")
        if self.vibrato_cents < 0:
            raise ValueError("vibrato_cents must be non-negative")
        if self.amplitude_jitter_db < 0:
            raise ValueError("amplitude_jitter_db must be non-negative")


def _melody_track(rng: np.random.Generator, n_frames: int, spec: SynthesisSpec) -> np.ndarray:
    lo = sig.hz_to_class(spec.pitch_range[0])
    hi = sig.hz_to_class(spec.pitch_range[1])
    f0 = np.zeros(n_frames)
    pos = 0
    prev_class = None
    prev_was_voiced = False
    while pos < n_frames:
        seg = max(1, int(rng.uniform(*spec.note_seconds) / sig.HOP_SECONDS))
        end = min(pos + seg, n_frames)
        if rng.random() < spec.voiced_fraction:
            note = int(rng.integers(lo, hi + 1))
            f0[pos:end] = sig.class_to_hz(note)
            if spec.vibrato_cents > 0:
                t = np.arange(end - pos) * sig.HOP_SECONDS
                rate = rng.uniform(4.5, 6.5)
                phase = rng.uniform(0, 2 * np.pi)
                cents = spec.vibrato_cents * np.sin(2 * np.pi * rate * t + phase)
                f0[pos:end] *= 2.0 ** (cents / 1200.0)
            if prev_was_voiced and prev_class is not None and rng.random() < 0.35:
                # short glide connecting consecutive notes, log-linear
                glide = min(6, end - pos)
                f0[pos : pos + glide] = np.exp(
                    np.linspace(
                        np.log(sig.class_to_hz(prev_class)),
                        np.log(sig.class_to_hz(note)),
                        glide,
                        endpoint=False,
                    )
                )
            prev_class = note
            prev_was_voiced = True
        else:
            prev_was_voiced = False
        pos = end
    if not np.any(f0 > 0):  # keep every clip evaluable
        mid = n_frames // 2
        note = int(rng.integers(lo, hi + 1))
        f0[mid : min(mid + 50, n_frames)] = sig.class_to_hz(note)
    return f0


def _fade_edges(wave: np.ndarray, voiced: np.ndarray, ramp: int = 40) -> None:
    edges = np.nonzero(np.diff(voiced.astype(np.int8)))[0]
    window = 0.5 * (1 - np.cos(np.linspace(0, np.pi, ramp)))
    for e in edges:
        if voiced[e + 1]:  # onset
            seg = slice(e + 1, min(e + 1 + ramp, len(wave)))
            wave[seg] *= window[: seg.stop - seg.start]
        else:  # offset
            seg = slice(max(e + 1 - ramp, 0), e + 1)
            wave[seg] *= window[::-1][: seg.stop - seg.start]


def _render_melody(f0_frames: np.ndarray, spec: SynthesisSpec, rng: np.random.Generator) -> np.ndarray:
    f0_samples = np.repeat(f0_frames, sig.HOP_SAMPLES)
    phase = 2.0 * np.pi * np.cumsum(f0_samples) / sig.SAMPLE_RATE
    wave = np.zeros_like(f0_samples)
    for k, amp in enumerate(spec.partial_amplitudes, start=1):
        wave += amp * np.sin(k * phase)
    if spec.amplitude_jitter_db > 0:
        walk = rng.standard_normal(len(f0_frames))
        kernel = np.hanning(9)
        kernel /= kernel.sum()
        slow = np.convolve(walk, kernel, mode="same")
        envelope = 10.0 ** (spec.amplitude_jitter_db * slow / 20.0)
        wave *= np.repeat(envelope, sig.HOP_SAMPLES)
    voiced = f0_samples > 0
    wave *= voiced
    _fade_edges(wave, voiced)
    return wave


def _render_accompaniment(spec: SynthesisSpec, n: int, rng: np.random.Generator) -> np.ndarray:
    t = np.arange(n) / sig.SAMPLE_RATE
    root = max(spec.pitch_range[0] / 2.0, 30.0)
    if spec.accompaniment == "drone":
        tones = [root, root * 1.5]
    elif spec.accompaniment == "chord":
        tones = [root, root * 1.25, root * 1.5]
    else:
        white = rng.standard_normal(n)
        # one-pole lowpass gives a pink-ish bed
        out = np.empty(n)
        acc = 0.0
        coeff = 0.95
        for i in range(n):
            acc = coeff * acc + (1 - coeff) * white[i]
            out[i] = acc
        return out
    wave = np.zeros(n)
    for tone in tones:
        for k, amp in [(1, 1.0), (2, 0.4), (3, 0.2)]:
            wave += amp * np.sin(2 * np.pi * tone * k * t + rng.uniform(0, 2 * np.pi))
    return wave


def _mix(melody: np.ndarray, accomp: np.ndarray, f0_frames: np.ndarray, snr_db: float) -> np.ndarray:
    voiced = np.repeat(f0_frames, sig.HOP_SAMPLES) > 0
    rms_mel = float(np.sqrt(np.mean(melody[voiced] ** 2))) if voiced.any() else 0.0
    rms_acc = float(np.sqrt(np.mean(accomp**2)))
    if rms_acc > 0 and rms_mel > 0:
        accomp = accomp * (rms_mel / (rms_acc * 10.0 ** (snr_db / 20.0)))
    mixed = melody + accomp
    peak = np.max(np.abs(mixed))
    if peak > 0.95:
        mixed = mixed * (0.95 / peak)
    return mixed


def synthesize_clip(spec: SynthesisSpec, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """One (samples, f0_per_frame) pair at 8 kHz / 10 ms grid."""
    n_frames = int(round(spec.duration_seconds / sig.HOP_SECONDS))
    f0 = _melody_track(rng, n_frames, spec)
    melody = _render_melody(f0, spec, rng)
    accomp = _render_accompaniment(spec, len(melody), rng)
    return _mix(melody, accomp, f0, spec.snr_db).astype(np.float32), f0


def synthesize_corpus(spec: SynthesisSpec, out_dir, domain: str, split: str = "train") -> list[ManifestEntry]:
    """Materialize WAV + label files; bit-reproducible from the seed."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(spec.seed)
    entries = []
    for i in range(spec.n_clips):
        samples, f0 = synthesize_clip(spec, rng)
        stem = f"{domain}_{split}_{i:04d}"
        audio_path = out_dir / f"{stem}.wav"
        label_path = out_dir / f"{stem}.f0"
        wavfile.write(audio_path, sig.SAMPLE_RATE, samples)
        sig.write_pitch_track(label_path, f0)
        entries.append(ManifestEntry(audio=audio_path, labels=label_path, split=split, domain=domain))
    return entries


def class_histogram(manifest: DatasetManifest, split: str) -> np.ndarray:
    """Per-class frame counts over a split's label files."""
    counts = np.zeros(sig.N_CLASSES, dtype=np.int64)
    for entry in manifest.for_split(split):
        classes = sig.hz_to_class(sig.read_pitch_track(entry.labels))
        counts += np.bincount(np.atleast_1d(classes), minlength=sig.N_CLASSES)
    return counts
