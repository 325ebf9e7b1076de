"""Per-episode adaptation: meta-weighted losses, confidence-guided frame
selection, inner-loop updates on annotated frames, and the meta-training
outer loop that turns the pre-trained heads into fast adapters.

Terminology: each 5-second chunk is an episode. Within an episode the
K frames picked for annotation form the support set; everything else is
the query set. Inner-loop optimization (ILO) takes N gradient steps on
episode-local copies of the classifier and confidence heads using only
support frames; outer-loop optimization (OLO) applies the query-set
gradient, evaluated at the adapted parameters, to the shared meta
parameters (a first-order meta-update).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import nn
from .datasets import Episode
from .metrics import MelodyScores, classes_to_track, evaluate
from .model import BaseModel, ConfidenceModel, predict_classes, softmax_columns
from .signal import N_CLASSES
from .training import confidence_mse, tcp_n, wce_loss

SELECTION_MODES = ("active", "random")


@dataclass(frozen=True)
class MetaHyperparameters:
    """Knobs of the adaptation loops (defaults follow the reference setup)."""

    support_size: int = 10  # frames annotated per iteration
    inner_steps: int = 10  # gradient steps per inner loop
    adapt_iterations: int = 1  # annotation rounds at test time
    inner_lr: float = 1e-5
    outer_lr: float = 1e-5
    weight_scale: float = 0.2  # amplification exponent scale
    weight_delta_cap: float = 10.0  # clamp on relative weight mismatch
    meta_epochs: int = 400

    def __post_init__(self):
        if self.support_size <= 0 or self.inner_steps < 0 or self.adapt_iterations < 0:
            raise ValueError("support size must be positive, step counts non-negative")
        if self.inner_lr < 0 or self.outer_lr < 0 or self.weight_scale < 0:
            raise ValueError("learning rates and weight scale must be non-negative")
        if self.weight_delta_cap <= 0:
            raise ValueError("weight_delta_cap must be positive")


@dataclass
class FramePartition:
    """Support (to annotate) vs query split of one episode's frames.

    ``support`` is ordered most-uncertain-first; ``annotated`` carries the
    cumulative set selected in earlier iterations, which is excluded from
    both sides.
    """

    support: np.ndarray
    query: np.ndarray
    annotated: np.ndarray = field(default_factory=lambda: np.array([], dtype=np.int64))


def episode_class_weights(labels, n_classes: int = N_CLASSES) -> np.ndarray:
    """Inverse-frequency weights within one frame set: count/|set| inverted.

    Classes absent from the set get weight zero.
    """
    labels = np.asarray(labels)
    if labels.size == 0:
        raise ValueError("cannot weight an empty frame set")
    counts = np.bincount(labels.ravel(), minlength=n_classes)
    weights = np.zeros(n_classes, dtype=np.float64)
    present = counts > 0
    weights[present] = labels.size / counts[present]
    return weights


def meta_weights(
    w_g: np.ndarray,
    predicted_labels,
    scale: float,
    delta_cap: float,
) -> np.ndarray:
    """Amplify ground-truth class weights where predictions mismatch.

    The per-class relative mismatch (w_g - w_p) / w_g is clamped to
    +-delta_cap (classes never predicted count as maximal mismatch), and
    each weight becomes w_g * exp(scale * |mismatch|). Classes absent
    from the ground truth stay at zero.
    """
    w_g = np.asarray(w_g, dtype=np.float64)
    w_p = episode_class_weights(predicted_labels, n_classes=len(w_g))
    out = np.zeros_like(w_g)
    present = w_g > 0
    delta = np.zeros_like(w_g)
    predicted = w_p > 0
    both = present & predicted
    delta[both] = (w_g[both] - w_p[both]) / w_g[both]
    delta[present & ~predicted] = -delta_cap
    delta = np.clip(delta, -delta_cap, delta_cap)
    out[present] = w_g[present] * np.exp(scale * np.abs(delta[present]))
    return out


def select_support(confidences, k: int, excluded=(), valid=None) -> FramePartition:
    """The k least-confident selectable frames, ties by lower frame index.

    ``excluded`` frames (already annotated) and frames outside ``valid``
    never land in either side of the partition.
    """
    conf = np.asarray(confidences, dtype=np.float64)
    n = len(conf)
    allowed = np.ones(n, dtype=bool)
    if valid is not None:
        allowed &= np.asarray(valid, dtype=bool)
    excluded = np.asarray(sorted(excluded), dtype=np.int64)
    if excluded.size:
        allowed[excluded] = False
    candidates = np.nonzero(allowed)[0]
    if k > candidates.size:
        raise ValueError(f"cannot select {k} frames from {candidates.size} available")
    order = candidates[np.argsort(conf[candidates], kind="stable")]
    support = order[:k]
    query = np.sort(order[k:])
    return FramePartition(support=support, query=query, annotated=excluded)


def random_partition(n_frames: int, k: int, rng: np.random.Generator, excluded=(), valid=None) -> FramePartition:
    """Uniformly random support set; the baseline against active selection."""
    allowed = np.ones(n_frames, dtype=bool)
    if valid is not None:
        allowed &= np.asarray(valid, dtype=bool)
    excluded = np.asarray(sorted(excluded), dtype=np.int64)
    if excluded.size:
        allowed[excluded] = False
    candidates = np.nonzero(allowed)[0]
    if k > candidates.size:
        raise ValueError(f"cannot select {k} frames from {candidates.size} available")
    support = np.sort(rng.choice(candidates, size=k, replace=False))
    query = np.setdiff1d(candidates, support)
    return FramePartition(support=support, query=query, annotated=excluded)


def ilo_classifier(
    base: BaseModel,
    theta: nn.ParameterSet,
    features: np.ndarray,
    labels: np.ndarray,
    support: np.ndarray,
    class_weights: np.ndarray,
    n_steps: int,
    lr: float,
) -> tuple[nn.ParameterSet, list[float]]:
    """N weighted-cross-entropy steps on the support frames; returns the
    adapted parameters (mutated in place) and the per-step loss trace."""
    feats_s = features[:, support]
    labels_s = np.asarray(labels)[support]
    losses = []
    for _ in range(n_steps):
        logits, tape = nn.forward(base.classifier_net, theta, feats_s)
        loss, d_logits = wce_loss(softmax_columns(logits), labels_s, class_weights)
        if not np.isfinite(loss):
            raise nn.DivergenceError(f"classifier inner loop diverged: loss={loss}")
        _, grads = nn.backward(tape, d_logits, theta)
        nn.sgd_step(theta, grads, lr)
        losses.append(loss)
    return theta, losses


def ilo_confidence(
    conf: ConfidenceModel,
    psi: nn.ParameterSet,
    features: np.ndarray,
    targets: np.ndarray,
    support: np.ndarray,
    n_steps: int,
    lr: float,
) -> tuple[nn.ParameterSet, list[float]]:
    """N mean-squared-error steps toward the refreshed confidence targets,
    restricted to the support frames."""
    feats_s = features[:, support]
    targets_s = np.asarray(targets)[support]
    losses = []
    for _ in range(n_steps):
        out, tape = nn.forward(conf.net, psi, feats_s)
        loss, d_conf = confidence_mse(out[0], targets_s)
        if not np.isfinite(loss):
            raise nn.DivergenceError(f"confidence inner loop diverged: loss={loss}")
        _, grads = nn.backward(tape, d_conf[None, :], psi)
        nn.sgd_step(psi, grads, lr)
        losses.append(loss)
    return psi, losses


def olo_step(
    base: BaseModel,
    conf: ConfidenceModel | None,
    episode_features: np.ndarray,
    labels: np.ndarray,
    partition: FramePartition,
    theta_adapted: nn.ParameterSet,
    psi_adapted: nn.ParameterSet | None,
    conf_targets: np.ndarray | None,
    class_weights: np.ndarray,
    outer_lr: float,
) -> tuple[float, float]:
    """One first-order meta-update from the query-set losses.

    Gradients are evaluated at the episode-adapted parameters and applied
    to the shared meta parameters held by ``base`` (and ``conf`` when a
    confidence head is in play). Returns the query losses used.
    """
    query = partition.query
    feats_q = episode_features[:, query]
    labels_q = np.asarray(labels)[query]

    logits, tape = nn.forward(base.classifier_net, theta_adapted, feats_q)
    cls_loss, d_logits = wce_loss(softmax_columns(logits), labels_q, class_weights)
    _, cls_grads = nn.backward(tape, d_logits, theta_adapted)
    nn.sgd_step(base.classifier_params, cls_grads, outer_lr)

    conf_loss = 0.0
    if conf is not None and psi_adapted is not None:
        out, tape = nn.forward(conf.net, psi_adapted, feats_q)
        conf_loss, d_conf = confidence_mse(out[0], np.asarray(conf_targets)[query])
        _, conf_grads = nn.backward(tape, d_conf[None, :], psi_adapted)
        nn.sgd_step(conf.params, conf_grads, outer_lr)
    return cls_loss, conf_loss


@dataclass
class MetaEpochTrace:
    epoch: int
    mean_query_loss: float
    mean_conf_loss: float


def meta_train(
    base: BaseModel,
    conf: ConfidenceModel,
    episodes: list[Episode],
    hyper: MetaHyperparameters,
    *,
    seed: int = 0,
    selection: str = "active",
    meta_weighting: bool = True,
    trace_fh=None,
) -> list[MetaEpochTrace]:
    """Episode-wise meta-training of the classifier and confidence heads.

    Each epoch visits every labelled episode in seeded-shuffle order,
    clones the meta parameters, runs one round of support selection and
    inner-loop adaptation on the clones, then applies a single outer-loop
    update to the meta parameters. ``selection`` picks least-confident
    frames ("active") or uniform ones ("random"); random selection runs
    without the confidence head entirely, mirroring the plain
    meta-learning baseline.
    """
    if selection not in SELECTION_MODES:
        raise ValueError(f"selection must be one of {SELECTION_MODES}")
    if not base.frozen_features:
        raise ValueError("meta_train requires a pre-trained, frozen feature extractor")
    episodes = [ep for ep in episodes if ep.labels is not None]
    if not episodes:
        raise ValueError("meta-training needs labelled episodes")
    use_conf_head = selection == "active"
    rng = np.random.default_rng(seed)
    feature_cache = {}
    for ep in episodes:
        feats, _ = base.compute_features(ep.spectrogram)
        feature_cache[ep.id] = feats

    trace: list[MetaEpochTrace] = []
    for epoch in range(hyper.meta_epochs):
        order = rng.permutation(len(episodes))
        cls_losses, conf_losses = [], []
        for i in order:
            ep = episodes[i]
            feats = feature_cache[ep.id]
            theta_b = base.classifier_params.copy()
            psi_b = conf.params.copy() if use_conf_head else None

            posteriors = base.posteriors_from_features(feats, theta_b)
            predicted = predict_classes(posteriors)
            if selection == "active":
                confidence = conf.confidence_from_features(feats, psi_b)
                partition = select_support(confidence, hyper.support_size, valid=ep.valid)
            else:
                partition = random_partition(
                    ep.n_frames, hyper.support_size, rng, valid=ep.valid
                )

            if meta_weighting:
                w_g = episode_class_weights(ep.labels[ep.valid])
                weights = meta_weights(
                    w_g, predicted[ep.valid], hyper.weight_scale, hyper.weight_delta_cap
                )
            else:
                weights = np.ones(N_CLASSES)

            theta_b, _ = ilo_classifier(
                base, theta_b, feats, ep.labels, partition.support,
                weights, hyper.inner_steps, hyper.inner_lr,
            )
            conf_targets = None
            if use_conf_head:
                adapted_posteriors = base.posteriors_from_features(feats, theta_b)
                conf_targets = tcp_n(adapted_posteriors, ep.labels)
                psi_b, _ = ilo_confidence(
                    conf, psi_b, feats, conf_targets, partition.support,
                    hyper.inner_steps, hyper.inner_lr,
                )
            cls_loss, conf_loss = olo_step(
                base, conf if use_conf_head else None, feats, ep.labels, partition,
                theta_b, psi_b, conf_targets, weights, hyper.outer_lr,
            )
            cls_losses.append(cls_loss)
            conf_losses.append(conf_loss)
        row = MetaEpochTrace(
            epoch=epoch,
            mean_query_loss=float(np.mean(cls_losses)),
            mean_conf_loss=float(np.mean(conf_losses)),
        )
        trace.append(row)
        if trace_fh is not None:
            trace_fh.write(f"{row.epoch}\t{row.mean_query_loss:.6f}\t{row.mean_conf_loss:.6f}\n")
            trace_fh.flush()
    return trace


def oracle_annotator(episode: Episode):
    """Ground-truth annotator callback for labelled episodes."""
    if episode.labels is None:
        raise ValueError(f"episode {episode.id} has no labels to answer with")
    labels = episode.labels

    def annotate(frames) -> dict[int, int]:
        return {int(f): int(labels[int(f)]) for f in frames}

    return annotate


@dataclass
class AdaptationState:
    """Live adaptation of one episode: episode-local parameter copies plus
    the cumulative annotation record. Shared by the test-time driver and
    the interactive service so both follow the identical code path."""

    episode: Episode
    features: np.ndarray
    theta: nn.ParameterSet
    psi: nn.ParameterSet
    annotated: dict[int, int] = field(default_factory=dict)
    iteration: int = 0

    @property
    def annotated_frames(self) -> np.ndarray:
        return np.asarray(sorted(self.annotated), dtype=np.int64)

    def query_frames(self) -> np.ndarray:
        mask = self.episode.valid.copy()
        if self.annotated:
            mask[self.annotated_frames] = False
        return np.nonzero(mask)[0]


def init_adaptation(base: BaseModel, conf: ConfidenceModel, episode: Episode) -> AdaptationState:
    feats, _ = base.compute_features(episode.spectrogram)
    return AdaptationState(
        episode=episode,
        features=feats,
        theta=base.classifier_params.copy(),
        psi=conf.params.copy(),
    )


def state_predictions(base: BaseModel, state: AdaptationState) -> np.ndarray:
    return predict_classes(base.posteriors_from_features(state.features, state.theta))


def state_confidence(conf: ConfidenceModel, state: AdaptationState) -> np.ndarray:
    return conf.confidence_from_features(state.features, state.psi)


@dataclass
class AdaptationIteration:
    iteration: int
    new_frames: list[int]
    classifier_losses: list[float]
    confidence_losses: list[float]
    query_scores: MelodyScores | None = None


def adapt_iteration(
    base: BaseModel,
    conf: ConfidenceModel,
    state: AdaptationState,
    new_annotations: dict[int, int],
    hyper: MetaHyperparameters,
    *,
    meta_weighting: bool = True,
    use_confidence_head: bool = True,
) -> AdaptationIteration:
    """Fold a batch of annotations in and run one inner-loop round over the
    cumulative annotated set (classifier first, then confidence head)."""
    for frame, cls in new_annotations.items():
        if not 0 <= int(cls) < N_CLASSES:
            raise ValueError(f"annotation class {cls} out of range")
        state.annotated[int(frame)] = int(cls)
    support = state.annotated_frames
    if support.size == 0:
        raise ValueError("no annotated frames to adapt on")
    labels = np.zeros(state.episode.n_frames, dtype=np.int64)
    labels[support] = [state.annotated[int(f)] for f in support]

    if meta_weighting:
        w_g = episode_class_weights(labels[support])
        predicted = state_predictions(base, state)
        weights = meta_weights(
            w_g, predicted[support], hyper.weight_scale, hyper.weight_delta_cap
        )
    else:
        weights = np.ones(N_CLASSES)

    state.theta, cls_losses = ilo_classifier(
        base, state.theta, state.features, labels, support,
        weights, hyper.inner_steps, hyper.inner_lr,
    )
    conf_losses: list[float] = []
    if use_confidence_head:
        adapted_posteriors = base.posteriors_from_features(state.features, state.theta)
        targets = tcp_n(adapted_posteriors, labels)
        state.psi, conf_losses = ilo_confidence(
            conf, state.psi, state.features, targets, support,
            hyper.inner_steps, hyper.inner_lr,
        )
    state.iteration += 1
    return AdaptationIteration(
        iteration=state.iteration,
        new_frames=sorted(int(f) for f in new_annotations),
        classifier_losses=cls_losses,
        confidence_losses=conf_losses,
    )


def _query_scores(base: BaseModel, state: AdaptationState) -> MelodyScores | None:
    if state.episode.labels is None:
        return None
    query = state.query_frames()
    mask = np.zeros(state.episode.n_frames, dtype=bool)
    mask[query] = True
    est = classes_to_track(state_predictions(base, state), mask=mask)
    ref = classes_to_track(state.episode.labels, mask=mask)
    return evaluate(est, ref)


@dataclass
class EpisodeReport:
    """Everything one test-time adaptation produced for one episode."""

    episode_id: str
    baseline_scores: MelodyScores | None
    iterations: list[AdaptationIteration]
    final_predictions: np.ndarray
    final_confidence: np.ndarray
    annotated: dict[int, int]


def summarize_reports(reports: list[EpisodeReport]) -> dict:
    """Unweighted per-episode means of the final-iteration query scores."""
    finals = []
    for rep in reports:
        scores = rep.iterations[-1].query_scores if rep.iterations else rep.baseline_scores
        if scores is not None:
            finals.append(scores)
    if not finals:
        return {"episodes": len(reports), "rpa": 0.0, "rca": 0.0, "oa": 0.0}
    return {
        "episodes": len(reports),
        "rpa": float(np.mean([s.rpa for s in finals])),
        "rca": float(np.mean([s.rca for s in finals])),
        "oa": float(np.mean([s.oa for s in finals])),
    }


REPORT_HEADER = "# melodyadapt adaptation report v1"


def write_adaptation_report(fh, reports: list[EpisodeReport], config: dict, summary_fields: dict) -> None:
    """Structured text: config echo, per-episode iteration records, summary."""
    fh.write(REPORT_HEADER + "\n")
    for key, value in sorted(config.items()):
        fh.write(f"# config\t{key}={value}\n")
    for rep in reports:
        fh.write(f"episode\t{rep.episode_id}\n")
        frames = ",".join(str(f) for f in sorted(rep.annotated))
        fh.write(f"annotated\t{frames}\n")
        if rep.baseline_scores is not None:
            b = rep.baseline_scores
            fh.write(f"baseline\trpa={b.rpa:.6f}\trca={b.rca:.6f}\toa={b.oa:.6f}\n")
        for it in rep.iterations:
            parts = [f"iteration\t{it.iteration}"]
            if it.query_scores is not None:
                q = it.query_scores
                parts += [f"rpa={q.rpa:.6f}", f"rca={q.rca:.6f}", f"oa={q.oa:.6f}"]
            parts += [
                "cls_loss=" + ",".join(f"{v:.6g}" for v in it.classifier_losses),
                "conf_loss=" + ",".join(f"{v:.6g}" for v in it.confidence_losses),
                "new_frames=" + ",".join(str(f) for f in it.new_frames),
            ]
            fh.write("\t".join(parts) + "\n")
    stats = {**summarize_reports(reports), **summary_fields}
    fields = "\t".join(f"{k}={stats[k]}" for k in sorted(stats))
    fh.write(f"summary\t{fields}\n")


def parse_adaptation_report(text: str) -> dict:
    """Back out the config echo and the summary row from a report."""
    lines = text.strip().split("\n")
    if not lines or lines[0] != REPORT_HEADER:
        raise ValueError("not an adaptation report (missing header)")
    config: dict = {}
    summary: dict = {}
    episodes = []
    for line in lines[1:]:
        if line.startswith("# config\t"):
            key, _, value = line[len("# config\t") :].partition("=")
            config[key] = value
        elif line.startswith("episode\t"):
            episodes.append(line.split("\t", 1)[1])
        elif line.startswith("summary\t"):
            for item in line.split("\t")[1:]:
                key, _, value = item.partition("=")
                summary[key] = value
    if not summary:
        raise ValueError("adaptation report has no summary row")
    return {"config": config, "episodes": episodes, "summary": summary}


def meta_test_episode(
    base: BaseModel,
    conf: ConfidenceModel,
    episode: Episode,
    annotator,
    hyper: MetaHyperparameters,
    *,
    selection: str = "active",
    meta_weighting: bool = True,
    use_confidence_head: bool | None = None,
    seed: int = 0,
) -> EpisodeReport:
    """Adapt to one (possibly unlabelled) episode via annotation rounds.

    Runs ``adapt_iterations`` rounds of: score confidence, pick the
    least-confident (or random) unannotated frames, ask the annotator,
    then inner-loop both heads on the cumulative annotated set. Query
    metrics per round cover only never-annotated valid frames; with zero
    iterations the report carries the unadapted predictions.
    """
    if selection not in SELECTION_MODES:
        raise ValueError(f"selection must be one of {SELECTION_MODES}")
    if use_confidence_head is None:
        use_confidence_head = selection == "active"
    total = hyper.support_size * hyper.adapt_iterations
    n_valid = int(episode.valid.sum())
    if total >= n_valid and hyper.adapt_iterations > 0:
        raise ValueError(
            f"support_size*iterations = {total} must stay below the {n_valid} valid frames"
        )
    rng = np.random.default_rng(seed)
    state = init_adaptation(base, conf, episode)
    baseline = _query_scores(base, state)
    iterations: list[AdaptationIteration] = []
    for _ in range(hyper.adapt_iterations):
        if selection == "active":
            confidence = state_confidence(conf, state)
            partition = select_support(
                confidence, hyper.support_size,
                excluded=state.annotated_frames, valid=episode.valid,
            )
        else:
            partition = random_partition(
                episode.n_frames, hyper.support_size, rng,
                excluded=state.annotated_frames, valid=episode.valid,
            )
        answers = annotator(partition.support)
        missing = [int(f) for f in partition.support if int(f) not in {int(a) for a in answers}]
        if missing:
            raise RuntimeError(f"annotator left frames unanswered: {missing}")
        result = adapt_iteration(
            base, conf, state, {int(f): int(c) for f, c in answers.items()}, hyper,
            meta_weighting=meta_weighting, use_confidence_head=use_confidence_head,
        )
        result.query_scores = _query_scores(base, state)
        iterations.append(result)
    return EpisodeReport(
        episode_id=episode.id,
        baseline_scores=baseline,
        iterations=iterations,
        final_predictions=state_predictions(base, state),
        final_confidence=state_confidence(conf, state),
        annotated=dict(state.annotated),
    )
