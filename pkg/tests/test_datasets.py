import hashlib
from pathlib import Path

import numpy as np
import pytest

from melodyadapt import datasets, signal as sig
from melodyadapt.datasets import (
    DatasetManifest,
    ManifestEntry,
    SynthesisSpec,
    class_histogram,
    episode_stream,
    load_manifest,
    synthesize_corpus,
    write_manifest,
)


def small_spec(**overrides):
    params = dict(
        n_clips=2,
        duration_seconds=5.0,
        pitch_range=(110.0, 440.0),
        partial_amplitudes=(1.0, 0.5, 0.25),
        accompaniment="drone",
        snr_db=10.0,
        voiced_fraction=0.7,
        seed=7,
    )
    params.update(overrides)
    return SynthesisSpec(**params)


def file_digest(path):
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


class TestSynthesisSpec:
    def test_rejects_out_of_range_pitch(self):
        with pytest.raises(ValueError):
            small_spec(pitch_range=(30.0, 440.0))
        with pytest.raises(ValueError):
            small_spec(pitch_range=(440.0, 110.0))

    def test_rejects_bad_accompaniment(self):
        with pytest.raises(ValueError):
            small_spec(accompaniment="theremin")

    def test_rejects_non_finite_snr(self):
        with pytest.raises(ValueError):
            small_spec(snr_db=float("inf"))


class TestSynthesize:
    def test_deterministic_bytes(self, tmp_path):
        spec = small_spec()
        a = synthesize_corpus(spec, tmp_path / "a", domain="src")
        b = synthesize_corpus(spec, tmp_path / "b", domain="src")
        for ea, eb in zip(a, b):
            assert file_digest(ea.audio) == file_digest(eb.audio)
            assert file_digest(ea.labels) == file_digest(eb.labels)

    def test_voiced_fraction_statistics(self, tmp_path):
        spec = small_spec(n_clips=30, voiced_fraction=0.7, seed=11)
        entries = synthesize_corpus(spec, tmp_path, domain="src")
        voiced = total = 0
        for e in entries:
            f0 = sig.read_pitch_track(e.labels)
            voiced += (f0 > 0).sum()
            total += len(f0)
        assert abs(voiced / total - 0.7) < 0.05

    def test_labels_exact_and_in_range(self, tmp_path):
        entries = synthesize_corpus(small_spec(), tmp_path, domain="src")
        for e in entries:
            f0 = sig.read_pitch_track(e.labels)
            assert len(f0) == 500
            voiced = f0[f0 > 0]
            assert voiced.min() >= 110.0 * 2 ** (-1 / 96)
            assert voiced.max() <= 440.0 * 2 ** (1 / 96)
            # audio spectral peak of a voiced run tracks the label
            clip = sig.load_audio(e.audio)
            assert len(clip.samples) == 40000

    def test_quantization_idempotent_on_synthetic_labels(self, tmp_path):
        entries = synthesize_corpus(small_spec(), tmp_path, domain="src")
        f0 = sig.read_pitch_track(entries[0].labels)
        classes = sig.quantize_labels(f0, 500)
        back = sig.class_to_hz(classes)
        np.testing.assert_array_equal(sig.quantize_labels(back, 500), classes)

    def test_snr_scaling_changes_mix(self, tmp_path):
        loud = synthesize_corpus(small_spec(snr_db=40.0, n_clips=1), tmp_path / "l", domain="src")
        quiet = synthesize_corpus(small_spec(snr_db=-5.0, n_clips=1), tmp_path / "q", domain="src")
        assert file_digest(loud[0].audio) != file_digest(quiet[0].audio)


class TestManifest:
    def make_corpus(self, tmp_path):
        train = synthesize_corpus(small_spec(), tmp_path, domain="src", split="train")
        val = synthesize_corpus(small_spec(n_clips=1, seed=9), tmp_path, domain="src", split="val")
        path = tmp_path / "manifest.tsv"
        write_manifest(path, train + val)
        return path

    def test_round_trip(self, tmp_path):
        path = self.make_corpus(tmp_path)
        manifest = load_manifest(path)
        assert len(manifest.for_split("train")) == 2
        assert len(manifest.for_split("val")) == 1
        assert all(e.domain == "src" for e in manifest.entries)

    def test_empty_manifest_rejected(self, tmp_path):
        path = tmp_path / "empty.tsv"
        path.write_text("")
        with pytest.raises(ValueError, match="empty"):
            load_manifest(path)

    def test_missing_label_file_named(self, tmp_path):
        path = self.make_corpus(tmp_path)
        text = path.read_text()
        first_label = text.split("\t")[1]
        (tmp_path / first_label).unlink()
        with pytest.raises(FileNotFoundError, match=first_label):
            load_manifest(path)

    def test_malformed_line(self, tmp_path):
        path = tmp_path / "bad.tsv"
        path.write_text("only two\tfields\n")
        with pytest.raises(ValueError, match="4 tab-separated"):
            load_manifest(path)

    def test_unknown_split(self, tmp_path):
        corpus = self.make_corpus(tmp_path)
        line = corpus.read_text().splitlines()[0].replace("\ttrain\t", "\tpretrain\t")
        bad = tmp_path / "bad_split.tsv"
        bad.write_text(line + "\n")
        with pytest.raises(ValueError, match="split"):
            load_manifest(bad)


class TestEpisodeStream:
    def test_five_second_file_one_episode(self, tmp_path):
        entries = synthesize_corpus(small_spec(n_clips=1), tmp_path, domain="src")
        path = tmp_path / "m.tsv"
        write_manifest(path, entries)
        episodes = episode_stream(load_manifest(path), "train")
        assert len(episodes) == 1
        ep = episodes[0]
        assert ep.spectrogram.magnitudes.shape == (513, 500)
        assert ep.valid.all()
        assert ep.labels.shape == (500,)

    def test_seven_second_file_two_episodes(self, tmp_path):
        entries = synthesize_corpus(
            small_spec(n_clips=1, duration_seconds=7.0), tmp_path, domain="src"
        )
        path = tmp_path / "m.tsv"
        write_manifest(path, entries)
        episodes = episode_stream(load_manifest(path), "train")
        assert len(episodes) == 2
        assert episodes[0].valid.all()
        assert episodes[1].valid.sum() == 200  # 2 s of real audio
        assert not episodes[1].valid[200:].any()
        # padded region is labelled unvoiced
        assert np.all(episodes[1].labels[200:] == 0)

    def test_labels_match_quantized_track(self, tmp_path):
        entries = synthesize_corpus(small_spec(n_clips=1), tmp_path, domain="src")
        path = tmp_path / "m.tsv"
        write_manifest(path, entries)
        episodes = episode_stream(load_manifest(path), "train")
        f0 = sig.read_pitch_track(entries[0].labels)
        np.testing.assert_array_equal(episodes[0].labels, sig.quantize_labels(f0, 500))

    def test_alignment_enforced(self, tmp_path):
        entries = synthesize_corpus(small_spec(n_clips=1), tmp_path, domain="src")
        sig.write_pitch_track(entries[0].labels, np.zeros(123))  # wrong length
        path = tmp_path / "m.tsv"
        write_manifest(path, entries)
        with pytest.raises(ValueError, match="label frames"):
            episode_stream(load_manifest(path), "train")

    def test_shuffle_seed_deterministic(self, tmp_path):
        entries = synthesize_corpus(small_spec(n_clips=3, seed=5), tmp_path, domain="src")
        path = tmp_path / "m.tsv"
        write_manifest(path, entries)
        manifest = load_manifest(path)
        a = [ep.id for ep in episode_stream(manifest, "train", shuffle_seed=3)]
        b = [ep.id for ep in episode_stream(manifest, "train", shuffle_seed=3)]
        c = [ep.id for ep in episode_stream(manifest, "train")]
        assert a == b
        assert sorted(a) == sorted(c)


class TestClassHistogram:
    def test_counts_sum_to_total_frames(self, tmp_path):
        entries = synthesize_corpus(small_spec(n_clips=3, seed=2), tmp_path, domain="src")
        path = tmp_path / "m.tsv"
        write_manifest(path, entries)
        counts = class_histogram(load_manifest(path), "train")
        assert counts.sum() == 3 * 500
        assert counts.shape == (506,)

    def test_unvoiced_dominates_voiced_classes(self, tmp_path):
        entries = synthesize_corpus(
            small_spec(n_clips=3, voiced_fraction=0.4, seed=3), tmp_path, domain="src"
        )
        path = tmp_path / "m.tsv"
        write_manifest(path, entries)
        counts = class_histogram(load_manifest(path), "train")
        assert counts[0] > counts[1:].max()

    def test_domain_shift_between_specs(self, tmp_path):
        src = synthesize_corpus(small_spec(n_clips=2, seed=4), tmp_path / "s", domain="src")
        tgt = synthesize_corpus(
            small_spec(n_clips=2, seed=4, pitch_range=(220.0, 880.0), partial_amplitudes=(0.3, 1.0, 0.5)),
            tmp_path / "t",
            domain="tgt",
        )
        src_hist = np.zeros(506)
        tgt_hist = np.zeros(506)
        for e in src:
            src_hist += np.bincount(sig.hz_to_class(sig.read_pitch_track(e.labels)), minlength=506)
        for e in tgt:
            tgt_hist += np.bincount(sig.hz_to_class(sig.read_pitch_track(e.labels)), minlength=506)
        # voiced support barely overlaps between the two domains
        src_support = set(np.nonzero(src_hist[1:])[0])
        tgt_support = set(np.nonzero(tgt_hist[1:])[0])
        overlap = len(src_support & tgt_support) / max(len(src_support), 1)
        assert overlap < 0.5
