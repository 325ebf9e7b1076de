"""Melody evaluation: raw pitch, raw chroma, and overall accuracy.

Semantics follow the standard melody-evaluation conventions: a frame is
pitch-correct when the estimate lies within a cent tolerance (default 50)
of the reference; chroma accuracy folds octave errors away first; overall
accuracy also credits agreeing unvoiced frames. Frames outside the valid
mask (padding) never count. Reference tracks with no voiced frames make
RPA/RCA undefined; they score 0 and set the ``empty_reference`` flag.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .signal import class_to_hz

DEFAULT_TOLERANCE_CENTS = 50.0


@dataclass
class PitchTrack:
    """Per-frame f0 in Hz (0 = unvoiced) plus a valid-frame mask."""

    f0: np.ndarray
    mask: np.ndarray = None

    def __post_init__(self):
        self.f0 = np.asarray(self.f0, dtype=np.float64)
        if np.any(self.f0 < 0):
            raise ValueError("pitch values must be non-negative")
        if self.mask is None:
            self.mask = np.ones(len(self.f0), dtype=bool)
        else:
            self.mask = np.asarray(self.mask, dtype=bool)
            if self.mask.shape != self.f0.shape:
                raise ValueError("mask length must match track length")

    def __len__(self) -> int:
        return len(self.f0)


@dataclass
class MelodyScores:
    rpa: float
    rca: float
    oa: float
    ref_voiced_frames: int
    empty_reference: bool = False


def cents_diff(f_est: float, f_ref: float):
    """Signed difference in cents: 1200 * log2(est / ref). Positive inputs only."""
    est = np.asarray(f_est, dtype=np.float64)
    ref = np.asarray(f_ref, dtype=np.float64)
    if np.any(est <= 0) or np.any(ref <= 0):
        raise ValueError("cents are defined for positive frequencies only")
    out = 1200.0 * np.log2(est / ref)
    return float(out) if out.ndim == 0 else out


def _check_pair(est: PitchTrack, ref: PitchTrack) -> np.ndarray:
    if len(est) != len(ref):
        raise ValueError(f"track lengths differ: {len(est)} vs {len(ref)}")
    return est.mask & ref.mask


def _pitch_correct(est_f0, ref_f0, tol_cents, chroma: bool) -> np.ndarray:
    """Boolean per frame: both voiced and within tolerance (octave-folded
    for chroma). Frames where either side is unvoiced come back False."""
    both = (est_f0 > 0) & (ref_f0 > 0)
    correct = np.zeros(len(est_f0), dtype=bool)
    if not both.any():
        return correct
    diff = 1200.0 * np.log2(est_f0[both] / ref_f0[both])
    if chroma:
        diff = diff - 1200.0 * np.round(diff / 1200.0)
    correct[both] = np.abs(diff) < tol_cents
    return correct


def rpa(est: PitchTrack, ref: PitchTrack, tol_cents: float = DEFAULT_TOLERANCE_CENTS) -> float:
    """Raw pitch accuracy over reference-voiced masked frames.

    The estimate's voicing decision is ignored except that an unvoiced
    estimate carries no pitch and therefore counts as incorrect.
    """
    mask = _check_pair(est, ref)
    ref_voiced = mask & (ref.f0 > 0)
    if not ref_voiced.any():
        return 0.0
    correct = _pitch_correct(est.f0, ref.f0, tol_cents, chroma=False)
    return float(correct[ref_voiced].sum() / ref_voiced.sum())


def rca(est: PitchTrack, ref: PitchTrack, tol_cents: float = DEFAULT_TOLERANCE_CENTS) -> float:
    """Raw chroma accuracy: as rpa with cent differences folded to one octave."""
    mask = _check_pair(est, ref)
    ref_voiced = mask & (ref.f0 > 0)
    if not ref_voiced.any():
        return 0.0
    correct = _pitch_correct(est.f0, ref.f0, tol_cents, chroma=True)
    return float(correct[ref_voiced].sum() / ref_voiced.sum())


def oa(est: PitchTrack, ref: PitchTrack, tol_cents: float = DEFAULT_TOLERANCE_CENTS) -> float:
    """Overall accuracy over all masked frames: agreeing unvoiced frames
    count as correct, voiced frames must be within tolerance."""
    mask = _check_pair(est, ref)
    if not mask.any():
        return 0.0
    both_unvoiced = (est.f0 == 0) & (ref.f0 == 0)
    correct = _pitch_correct(est.f0, ref.f0, tol_cents, chroma=False) | both_unvoiced
    return float(correct[mask].sum() / mask.sum())


def evaluate(est: PitchTrack, ref: PitchTrack, tol_cents: float = DEFAULT_TOLERANCE_CENTS) -> MelodyScores:
    """All three scores plus the empty-reference flag in one pass."""
    mask = _check_pair(est, ref)
    n_voiced = int((mask & (ref.f0 > 0)).sum())
    return MelodyScores(
        rpa=rpa(est, ref, tol_cents),
        rca=rca(est, ref, tol_cents),
        oa=oa(est, ref, tol_cents),
        ref_voiced_frames=n_voiced,
        empty_reference=n_voiced == 0,
    )


def classes_to_track(labels, mask=None) -> PitchTrack:
    """Bridge classifier output (class ids) to a metric-ready pitch track."""
    f0 = class_to_hz(np.asarray(labels))
    return PitchTrack(f0=np.atleast_1d(f0), mask=mask)


RESULT_COLUMNS = ("dataset", "method", "K", "s", "RPA", "RCA", "OA")


def format_results_table(rows: list[dict]) -> str:
    """Tab-separated results table: dataset, method, K, s, RPA, RCA, OA."""
    lines = ["\t".join(RESULT_COLUMNS)]
    for row in rows:
        lines.append(
            "\t".join(
                [
                    str(row["dataset"]),
                    str(row["method"]),
                    str(row["K"]),
                    str(row["s"]),
                    f"{row['RPA']:.4f}",
                    f"{row['RCA']:.4f}",
                    f"{row['OA']:.4f}",
                ]
            )
        )
    return "\n".join(lines) + "\n"


def parse_results_table(text: str) -> list[dict]:
    lines = [ln for ln in text.strip().split("\n") if ln]
    if not lines or lines[0].split("\t") != list(RESULT_COLUMNS):
        raise ValueError("not a results table: bad header")
    rows = []
    for ln in lines[1:]:
        parts = ln.split("\t")
        if len(parts) != len(RESULT_COLUMNS):
            raise ValueError(f"bad results row: {ln!r}")
        rows.append(
            {
                "dataset": parts[0],
                "method": parts[1],
                "K": int(parts[2]),
                "s": int(parts[3]),
                "RPA": float(parts[4]),
                "RCA": float(parts[5]),
                "OA": float(parts[6]),
            }
        )
    return rows
