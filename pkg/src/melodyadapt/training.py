"""Pre-training of the base classifier and training of the confidence head.

Losses here follow the per-sample convention: one 5-second chunk per
gradient step, class-weighted cross-entropy summed over its (unmasked)
frames. Confidence targets are normalized true-class probabilities:
p(true class) / p(predicted class), which is 1 exactly on correctly
predicted frames and below 1 otherwise.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import nn
from .model import BaseModel, ConfidenceModel, predict_classes, softmax_columns
from .signal import N_CLASSES

PROB_FLOOR = 1e-9  # clamp inside log


class TrainingDiverged(RuntimeError):
    def __init__(self, stage: str, epoch: int, detail: str):
        super().__init__(f"{stage} diverged at epoch {epoch}: {detail}")
        self.stage = stage
        self.epoch = epoch


@dataclass
class EpochTrace:
    epoch: int
    mean_loss: float
    wall_seconds: float


def write_training_trace(fh, trace: list[EpochTrace]) -> None:
    """Tab-separated, one line per epoch: index, mean loss, wall time."""
    for row in trace:
        fh.write(f"{row.epoch}\t{row.mean_loss:.6f}\t{row.wall_seconds:.3f}\n")


def global_class_weights(label_sets, n_classes: int = N_CLASSES) -> np.ndarray:
    """Inverse-frequency class weights over a whole dataset.

    ``label_sets`` yields per-chunk integer label arrays (already masked
    to valid frames). Weight of class c is total/(C * count_c); classes
    that never occur get weight 0.
    """
    counts = np.zeros(n_classes, dtype=np.int64)
    for labels in label_sets:
        counts += np.bincount(np.asarray(labels).ravel(), minlength=n_classes)
    total = counts.sum()
    weights = np.zeros(n_classes, dtype=np.float64)
    present = counts > 0
    weights[present] = total / (n_classes * counts[present])
    return weights


def wce_loss(
    posteriors: np.ndarray,
    labels: np.ndarray,
    weights: np.ndarray,
    frame_mask: np.ndarray | None = None,
) -> tuple[float, np.ndarray]:
    """Class-weighted cross-entropy over masked frames.

    Returns the scalar loss and its gradient with respect to the logits
    (the fused softmax + cross-entropy form: w * (p - onehot) per frame).
    """
    n_classes, n_frames = posteriors.shape
    labels = np.asarray(labels)
    if labels.shape != (n_frames,):
        raise ValueError(f"labels shape {labels.shape} does not match {n_frames} frames")
    mask = np.ones(n_frames, dtype=bool) if frame_mask is None else np.asarray(frame_mask, dtype=bool)
    d_logits = np.zeros_like(posteriors)
    idx = np.nonzero(mask)[0]
    if idx.size == 0:
        return 0.0, d_logits
    frame_labels = labels[idx]
    frame_weights = weights[frame_labels]
    p_true = np.clip(posteriors[frame_labels, idx], PROB_FLOOR, None)
    loss = float(-(frame_weights * np.log(p_true)).sum())
    d_logits[:, idx] = posteriors[:, idx] * frame_weights
    d_logits[frame_labels, idx] -= frame_weights
    return loss, d_logits


def mcp(posteriors: np.ndarray) -> np.ndarray:
    """Maximum class probability per frame (the argmax column value)."""
    return posteriors.max(axis=0)


def tcp_n(posteriors: np.ndarray, labels: np.ndarray) -> np.ndarray:
    """Normalized true-class probability per frame: p[true] / p[argmax].

    Always in (0, 1]; equals 1 exactly when the argmax class is the true
    class (or ties with it at the same probability).
    """
    labels = np.asarray(labels)
    frames = np.arange(posteriors.shape[1])
    p_true = posteriors[labels, frames]
    p_pred = posteriors.max(axis=0)
    return p_true / p_pred


def confidence_mse(
    predicted: np.ndarray,
    targets: np.ndarray,
    frame_mask: np.ndarray | None = None,
) -> tuple[float, np.ndarray]:
    """Per-sample confidence loss: mean squared error over masked frames.

    Returns the scalar and its gradient with respect to the predictions.
    """
    mask = (
        np.ones(len(predicted), dtype=bool)
        if frame_mask is None
        else np.asarray(frame_mask, dtype=bool)
    )
    d = np.zeros_like(predicted)
    n = int(mask.sum())
    if n == 0:
        return 0.0, d
    diff = predicted[mask] - targets[mask]
    loss = float(np.mean(diff**2))
    d[mask] = 2.0 * diff / n
    return loss, d


def pretrain(
    base: BaseModel,
    episodes,
    epochs: int,
    learning_rate: float,
    *,
    seed: int = 0,
    class_weights: np.ndarray | None = None,
    trace_fh=None,
) -> list[EpochTrace]:
    """Per-sample SGD over shuffled chunks; freezes the feature extractor
    when done and returns the per-epoch loss trace."""
    if base.frozen_features:
        raise ValueError("model already pre-trained: feature extractor is frozen")
    episodes = list(episodes)
    if not episodes:
        raise ValueError("empty pre-training dataset")
    if class_weights is None:
        class_weights = global_class_weights(ep.labels[ep.valid] for ep in episodes)
    rng = np.random.default_rng(seed)
    trace: list[EpochTrace] = []
    for epoch in range(epochs):
        t0 = time.monotonic()
        order = rng.permutation(len(episodes))
        losses = []
        for i in order:
            ep = episodes[i]
            feats, feat_tape = base.compute_features(ep.spectrogram, train=True)
            logits, cls_tape = base.logits_from_features(feats)
            posteriors = softmax_columns(logits)
            loss, d_logits = wce_loss(posteriors, ep.labels, class_weights, ep.valid)
            if not np.isfinite(loss):
                raise TrainingDiverged("pretrain", epoch, f"loss={loss} on episode {ep.id}")
            d_feats, cls_grads = nn.backward(cls_tape, d_logits, base.classifier_params, need_dx=True)
            # conv backward stays in the working precision
            _, feat_grads = nn.backward(feat_tape, d_feats.astype(np.float32), base.feature_params)
            nn.sgd_step(base.classifier_params, cls_grads, learning_rate)
            nn.sgd_step(base.feature_params, feat_grads, learning_rate)
            losses.append(loss)
        row = EpochTrace(epoch=epoch, mean_loss=float(np.mean(losses)), wall_seconds=time.monotonic() - t0)
        trace.append(row)
        if trace_fh is not None:
            write_training_trace(trace_fh, [row])
            trace_fh.flush()
    base.freeze_features()
    return trace


def train_confidence(
    conf: ConfidenceModel,
    base: BaseModel,
    episodes,
    epochs: int,
    learning_rate: float,
    *,
    seed: int = 0,
    trace_fh=None,
) -> list[EpochTrace]:
    """Fit the confidence head to normalized true-class probabilities.

    The base model must be pre-trained and frozen; its features and the
    per-frame targets are therefore fixed and computed once up front.
    """
    if not base.frozen_features:
        raise ValueError("pre-train (and freeze) the base model first")
    episodes = list(episodes)
    if not episodes:
        raise ValueError("empty confidence-training dataset")
    cached = []
    for ep in episodes:
        feats, _ = base.compute_features(ep.spectrogram)
        targets = tcp_n(base.posteriors_from_features(feats), ep.labels)
        cached.append((feats, targets, ep.valid, ep.id))
    rng = np.random.default_rng(seed)
    trace: list[EpochTrace] = []
    for epoch in range(epochs):
        t0 = time.monotonic()
        order = rng.permutation(len(cached))
        losses = []
        for i in order:
            feats, targets, valid, ep_id = cached[i]
            out, tape = nn.forward(conf.net, conf.params, feats)
            loss, d_conf = confidence_mse(out[0], targets, valid)
            if not np.isfinite(loss):
                raise TrainingDiverged("train_confidence", epoch, f"loss={loss} on episode {ep_id}")
            _, grads = nn.backward(tape, d_conf[None, :], conf.params)
            nn.sgd_step(conf.params, grads, learning_rate)
            losses.append(loss)
        row = EpochTrace(epoch=epoch, mean_loss=float(np.mean(losses)), wall_seconds=time.monotonic() - t0)
        trace.append(row)
        if trace_fh is not None:
            write_training_trace(trace_fh, [row])
            trace_fh.flush()
    return trace
