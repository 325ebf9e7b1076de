import numpy as np
import pytest

from melodyadapt.datasets import Episode
from melodyadapt.model import Architecture, create_models
from melodyadapt.signal import Spectrogram


def pytest_runtest_logreport(report):
    # one visible PASS/FAIL line per acceptance criterion
    if report.when == "call" and "test_acceptance" in report.nodeid:
        name = report.nodeid.split("::")[-1].replace("test_", "", 1)
        verdict = "PASS" if report.passed else "FAIL"
        print(f"\n[ACCEPTANCE] {name}: {verdict}", flush=True)

TOY_BINS = 64
TOY_FRAMES = 40


def toy_architecture() -> Architecture:
    """Desk-preset layer structure on a small spectrogram for fast tests."""
    return Architecture.from_preset("desk", input_bins=TOY_BINS)


def tone_spectrogram(bin_index: int, n_frames: int = TOY_FRAMES, noise: float = 0.05, seed: int = 0):
    rng = np.random.default_rng(seed)
    mags = rng.uniform(0, noise, size=(TOY_BINS, n_frames)).astype(np.float32)
    mags[bin_index, :] += 1.0
    mags[min(bin_index * 2, TOY_BINS - 1), :] += 0.4  # second partial
    return Spectrogram(magnitudes=mags)


def toy_episodes(classes=(97, 193, 289), seed: int = 0) -> list[Episode]:
    """Three steady tones at distinct pitch classes, fully valid frames."""
    episodes = []
    for i, cls in enumerate(classes):
        bin_index = 6 + 10 * i
        spec = tone_spectrogram(bin_index, seed=seed + i)
        episodes.append(
            Episode(
                id=f"tone{i}",
                spectrogram=spec,
                labels=np.full(TOY_FRAMES, cls, dtype=np.int64),
                valid=np.ones(TOY_FRAMES, dtype=bool),
            )
        )
    return episodes


@pytest.fixture
def toy_models():
    return create_models(toy_architecture(), seed=0)


@pytest.fixture
def toy_dataset():
    return toy_episodes()
