"""Command-line surface for the whole pipeline.

Subcommands: synth-data, pretrain, train-confidence, meta-train,
meta-test, evaluate, compare, serve. Exit codes: 0 success, 1 runtime
failure, 2 usage or configuration error. Failures print a single
machine-parsable line to stderr and remove partial output files.
"""

from __future__ import annotations

import argparse
import contextlib
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import adaptation, datasets, metrics, training
from .config import RunConfig, method_label, resolve_config
from .model import (
    Architecture,
    ConfidenceModel,
    create_models,
    load_models,
    read_model_tags,
    save_models,
)


class UsageError(ValueError):
    """Bad flags, bad config, or missing inputs: exit code 2."""


@contextlib.contextmanager
def atomic_output(path):
    """Write to a sibling temp file; rename on success, remove on failure."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".partial")
    try:
        with open(tmp, "w") as fh:
            yield fh
        os.replace(tmp, path)
    except BaseException:
        tmp.unlink(missing_ok=True)
        raise


def _require_file(path, what: str) -> Path:
    if path is None:
        raise UsageError(f"missing required {what}")
    p = Path(path)
    if not p.exists():
        raise UsageError(f"{what} not found: {p}")
    return p


def _load_manifest(args) -> datasets.DatasetManifest:
    return datasets.load_manifest(_require_file(args.manifest, "manifest"))


def _config_from(args) -> RunConfig:
    overrides = {}
    for key in (
        "preset", "seed", "pretrain_epochs", "confidence_epochs", "meta_epochs",
        "support_size", "inner_steps", "adapt_iterations", "lr", "outer_lr",
        "weight_scale", "weight_delta_cap", "selection", "annotator", "jobs",
        "dataset_name", "method",
    ):
        if hasattr(args, key):
            overrides[key] = getattr(args, key)
    if getattr(args, "meta_weighting", None) is not None:
        overrides["meta_weighting"] = args.meta_weighting == "on"
    try:
        return resolve_config(getattr(args, "config", None), overrides)
    except (FileNotFoundError, ValueError) as exc:
        raise UsageError(str(exc)) from exc


def _load_trained(args, need_confidence: bool):
    path = _require_file(args.weights_in, "weights file")
    base, conf = load_models(path)
    if need_confidence and conf is None:
        raise UsageError(f"{path}: no confidence head in weight file; run train-confidence first")
    return base, conf, read_model_tags(path)


def cmd_synth_data(args) -> int:
    spec = datasets.SynthesisSpec(
        n_clips=args.n_clips,
        duration_seconds=args.duration,
        pitch_range=(args.pitch_lo, args.pitch_hi),
        partial_amplitudes=tuple(float(x) for x in args.partials.split(",")),
        accompaniment=args.accompaniment,
        snr_db=args.snr,
        voiced_fraction=args.voiced_fraction,
        seed=args.seed,
    )
    out_dir = Path(args.out)
    entries = datasets.synthesize_corpus(spec, out_dir, domain=args.domain, split=args.split)
    manifest_path = Path(args.manifest) if args.manifest else out_dir / "manifest.tsv"
    existing = []
    if args.append and manifest_path.exists():
        existing = datasets.load_manifest(manifest_path).entries
    datasets.write_manifest(manifest_path, existing + entries)
    print(f"wrote {len(entries)} clips under {out_dir} ({manifest_path})")
    return 0


def cmd_pretrain(args) -> int:
    config = _config_from(args)
    manifest = _load_manifest(args)
    episodes = datasets.episode_stream(manifest, args.split)
    arch = Architecture.from_preset(config.preset)
    base, _ = create_models(arch, seed=config.seed)
    trace_fh = sys.stdout if args.trace else None
    training.pretrain(
        base, episodes, config.pretrain_epochs, config.lr,
        seed=config.seed, trace_fh=trace_fh,
    )
    save_models(args.weights_out, base)
    print(f"pre-trained on {len(episodes)} chunks -> {args.weights_out}")
    return 0


def cmd_train_confidence(args) -> int:
    config = _config_from(args)
    base, conf, _ = _load_trained(args, need_confidence=False)
    if not base.frozen_features:
        raise UsageError("weights are not pre-trained (feature extractor unfrozen)")
    manifest = _load_manifest(args)
    episodes = datasets.episode_stream(manifest, args.split)
    if conf is None:
        feat_shape = base.feature_net.out_shape((1, base.architecture.input_bins, 1))
        conf = ConfidenceModel.create(base.architecture, feat_shape, seed=config.seed + 1)
    trace_fh = sys.stdout if args.trace else None
    training.train_confidence(
        conf, base, episodes, config.confidence_epochs, config.lr,
        seed=config.seed, trace_fh=trace_fh,
    )
    save_models(args.weights_out, base, conf)
    print(f"confidence head trained on {len(episodes)} chunks -> {args.weights_out}")
    return 0


def cmd_meta_train(args) -> int:
    config = _config_from(args)
    base, conf, _ = _load_trained(args, need_confidence=config.selection == "active")
    if conf is None:
        feat_shape = base.feature_net.out_shape((1, base.architecture.input_bins, 1))
        conf = ConfidenceModel.create(base.architecture, feat_shape, seed=config.seed + 1)
    manifest = _load_manifest(args)
    episodes = datasets.episode_stream(manifest, args.split)
    adaptation.meta_train(
        base, conf, episodes, config.hyperparameters(),
        seed=config.seed, selection=config.selection,
        meta_weighting=config.meta_weighting,
        trace_fh=sys.stdout if args.trace else None,
    )
    save_models(args.weights_out, base, conf, tags={"meta_trained": True})
    print(f"meta-trained on {len(episodes)} episodes -> {args.weights_out}")
    return 0


def _run_meta_test(base, conf, episodes, config: RunConfig):
    hyper = config.hyperparameters()
    if config.annotator != "oracle":
        raise UsageError(f"unknown annotator {config.annotator!r}; the CLI supports 'oracle'")
    for ep in episodes:
        if ep.labels is None:
            raise UsageError(f"episode {ep.id} has no labels; the oracle annotator needs them")

    def run_one(item):
        index, ep = item
        return adaptation.meta_test_episode(
            base, conf, ep, adaptation.oracle_annotator(ep), hyper,
            selection=config.selection, meta_weighting=config.meta_weighting,
            seed=config.seed + index,
        )

    if config.jobs > 1:
        with ThreadPoolExecutor(max_workers=config.jobs) as pool:
            return list(pool.map(run_one, enumerate(episodes)))
    return [run_one(item) for item in enumerate(episodes)]


def cmd_meta_test(args) -> int:
    config = _config_from(args)
    base, conf, tags = _load_trained(args, need_confidence=config.selection == "active")
    if conf is None:
        feat_shape = base.feature_net.out_shape((1, base.architecture.input_bins, 1))
        conf = ConfidenceModel.create(base.architecture, feat_shape, seed=config.seed + 1)
    manifest = _load_manifest(args)
    episodes = datasets.episode_stream(manifest, args.split)
    if not episodes:
        raise UsageError(f"no episodes in split {args.split!r}")
    reports = _run_meta_test(base, conf, episodes, config)
    label = method_label(config, bool(tags.get("meta_trained", False)))
    summary_fields = {
        "dataset": config.dataset_name,
        "method": label,
        "k": config.support_size,
        "s": config.adapt_iterations,
    }
    with atomic_output(args.report) as fh:
        adaptation.write_adaptation_report(fh, reports, config.resolved(), summary_fields)
    stats = adaptation.summarize_reports(reports)
    table = metrics.format_results_table(
        [
            {
                "dataset": config.dataset_name,
                "method": label,
                "K": config.support_size,
                "s": config.adapt_iterations,
                "RPA": stats["rpa"],
                "RCA": stats["rca"],
                "OA": stats["oa"],
            }
        ]
    )
    sys.stdout.write(table)
    return 0


def cmd_evaluate(args) -> int:
    config = _config_from(args)
    base, _, _ = _load_trained(args, need_confidence=False)
    manifest = _load_manifest(args)
    episodes = datasets.episode_stream(manifest, args.split)
    if not episodes:
        raise UsageError(f"no episodes in split {args.split!r}")
    scores = []
    for ep in episodes:
        if ep.labels is None:
            raise UsageError(f"episode {ep.id} has no labels to evaluate against")
        from .model import predict_classes

        predicted = predict_classes(base.predict_posteriors(ep.spectrogram))
        est = metrics.classes_to_track(predicted, mask=ep.valid)
        ref = metrics.classes_to_track(ep.labels, mask=ep.valid)
        scores.append(metrics.evaluate(est, ref))
    row = {
        "dataset": config.dataset_name,
        "method": config.method or "CT",
        "K": 0,
        "s": 0,
        "RPA": float(np.mean([s.rpa for s in scores])),
        "RCA": float(np.mean([s.rca for s in scores])),
        "OA": float(np.mean([s.oa for s in scores])),
    }
    text = metrics.format_results_table([row])
    if args.table:
        with atomic_output(args.table) as fh:
            fh.write(text)
    sys.stdout.write(text)
    return 0


def cmd_compare(args) -> int:
    if not args.reports:
        raise UsageError("compare needs at least one report")
    rows = []
    for path in args.reports:
        text = _require_file(path, "report").read_text()
        try:
            parsed = adaptation.parse_adaptation_report(text)
        except ValueError as exc:
            raise UsageError(f"{path}: {exc}") from exc
        summary = parsed["summary"]
        try:
            rows.append(
                {
                    "dataset": summary["dataset"],
                    "method": summary["method"],
                    "K": int(summary["k"]),
                    "s": int(summary["s"]),
                    "RPA": float(summary["rpa"]),
                    "RCA": float(summary["rca"]),
                    "OA": float(summary["oa"]),
                }
            )
        except KeyError as exc:
            raise UsageError(f"{path}: summary missing field {exc}") from exc
    text = metrics.format_results_table(rows)
    if args.out:
        with atomic_output(args.out) as fh:
            fh.write(text)
    sys.stdout.write(text)
    return 0


def cmd_serve(args) -> int:
    import uvicorn

    from .service import create_app

    config = _config_from(args)
    weights = _require_file(args.weights_in, "weights file")
    app = create_app(
        weights_path=weights,
        sessions_dir=args.sessions_dir,
        manifest_path=args.manifest,
        hyper=config.hyperparameters(),
        meta_weighting=config.meta_weighting,
    )
    uvicorn.run(app, host=args.host, port=args.port, log_level="warning")
    return 0


def _add_config_flags(p: argparse.ArgumentParser, *names: str) -> None:
    flag_types = {
        "preset": str, "seed": int, "pretrain_epochs": int, "confidence_epochs": int,
        "meta_epochs": int, "lr": float, "outer_lr": float, "weight_scale": float,
        "weight_delta_cap": float, "jobs": int, "dataset_name": str, "method": str,
        "annotator": str,
    }
    for name in names:
        if name == "k":
            p.add_argument("--k", dest="support_size", type=int, default=None, help="support-set size per iteration")
        elif name == "s":
            p.add_argument("--s", dest="adapt_iterations", type=int, default=None, help="annotation iterations")
        elif name == "n":
            p.add_argument("--n", dest="inner_steps", type=int, default=None, help="inner-loop steps")
        elif name == "selection":
            p.add_argument("--selection", choices=("active", "random"), default=None)
        elif name == "meta_weighting":
            p.add_argument("--meta-weighting", dest="meta_weighting", choices=("on", "off"), default=None)
        else:
            p.add_argument(f"--{name.replace('_', '-')}", dest=name, type=flag_types[name], default=None)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="melodyadapt",
        description="Interactive singing-melody adaptation toolkit",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth-data", help="generate a synthetic corpus")
    p.add_argument("--out", required=True)
    p.add_argument("--manifest", default=None)
    p.add_argument("--append", action="store_true")
    p.add_argument("--domain", default="synth")
    p.add_argument("--split", default="train", choices=datasets.SPLITS)
    p.add_argument("--n-clips", type=int, default=8)
    p.add_argument("--duration", type=float, default=5.0)
    p.add_argument("--pitch-lo", type=float, default=110.0)
    p.add_argument("--pitch-hi", type=float, default=440.0)
    p.add_argument("--partials", default="1.0,0.5,0.25")
    p.add_argument("--accompaniment", default="drone", choices=("drone", "chord", "noise"))
    p.add_argument("--snr", type=float, default=10.0)
    p.add_argument("--voiced-fraction", type=float, default=0.7)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_synth_data)

    p = sub.add_parser("pretrain", help="pre-train the base classifier")
    p.add_argument("--config", default=None)
    p.add_argument("--manifest", required=True)
    p.add_argument("--split", default="train")
    p.add_argument("--weights-out", required=True)
    p.add_argument("--trace", action="store_true", help="print per-epoch loss trace")
    _add_config_flags(p, "preset", "seed", "pretrain_epochs", "lr")
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("train-confidence", help="train the confidence head")
    p.add_argument("--config", default=None)
    p.add_argument("--manifest", required=True)
    p.add_argument("--split", default="train")
    p.add_argument("--weights-in", required=True)
    p.add_argument("--weights-out", required=True)
    p.add_argument("--trace", action="store_true")
    _add_config_flags(p, "seed", "confidence_epochs", "lr")
    p.set_defaults(func=cmd_train_confidence)

    p = sub.add_parser("meta-train", help="episode-wise meta-training of both heads")
    p.add_argument("--config", default=None)
    p.add_argument("--manifest", required=True)
    p.add_argument("--split", default="train")
    p.add_argument("--weights-in", required=True)
    p.add_argument("--weights-out", required=True)
    p.add_argument("--trace", action="store_true")
    _add_config_flags(p, "seed", "meta_epochs", "k", "n", "lr", "outer_lr",
                      "weight_scale", "weight_delta_cap", "selection", "meta_weighting")
    p.set_defaults(func=cmd_meta_train)

    p = sub.add_parser("meta-test", help="adapt per episode with an annotator and report metrics")
    p.add_argument("--config", default=None)
    p.add_argument("--manifest", required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--weights-in", required=True)
    p.add_argument("--report", required=True)
    _add_config_flags(p, "seed", "k", "s", "n", "lr", "selection", "meta_weighting",
                      "annotator", "jobs", "dataset_name", "method", "weight_scale",
                      "weight_delta_cap")
    p.set_defaults(func=cmd_meta_test)

    p = sub.add_parser("evaluate", help="score a model on a labelled split without adaptation")
    p.add_argument("--config", default=None)
    p.add_argument("--manifest", required=True)
    p.add_argument("--split", default="val")
    p.add_argument("--weights-in", required=True)
    p.add_argument("--table", default=None)
    _add_config_flags(p, "dataset_name", "method")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("compare", help="merge adaptation reports into one results table")
    p.add_argument("reports", nargs="*")
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("serve", help="run the interactive annotation service")
    p.add_argument("--config", default=None)
    p.add_argument("--weights-in", required=True)
    p.add_argument("--sessions-dir", required=True)
    p.add_argument("--manifest", default=None)
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8765)
    _add_config_flags(p, "k", "n", "lr", "meta_weighting")
    p.set_defaults(func=cmd_serve)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse reports its own usage errors
        return 2 if exc.code not in (0, None) else 0
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # runtime failure
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
