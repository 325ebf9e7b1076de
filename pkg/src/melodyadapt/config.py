"""Run configuration: defaults, INI config files, and flag overrides.

Precedence is flags over config file over defaults. The resolved
configuration is echoed into every report header so a report is always
reproducible from its own text.
"""

from __future__ import annotations

import configparser
from dataclasses import asdict, dataclass, fields
from pathlib import Path

from .adaptation import MetaHyperparameters

_BOOL_TRUE = {"1", "true", "yes", "on"}
_BOOL_FALSE = {"0", "false", "no", "off"}


@dataclass
class RunConfig:
    """Everything a pipeline command needs; defaults follow the reference
    experiment setup (support size 10, 10 inner steps, one adaptation
    iteration, learning rates 1e-5, weight scale 0.2, epoch counts
    450/200/400, paper-size architecture)."""

    preset: str = "paper"
    seed: int = 0
    pretrain_epochs: int = 450
    confidence_epochs: int = 200
    meta_epochs: int = 400
    support_size: int = 10
    inner_steps: int = 10
    adapt_iterations: int = 1
    lr: float = 1e-5
    outer_lr: float = 1e-5
    weight_scale: float = 0.2
    weight_delta_cap: float = 10.0
    meta_weighting: bool = True
    selection: str = "active"
    annotator: str = "oracle"
    jobs: int = 1
    dataset_name: str = "dataset"
    method: str = ""  # report label; derived from toggles when empty

    def hyperparameters(self) -> MetaHyperparameters:
        return MetaHyperparameters(
            support_size=self.support_size,
            inner_steps=self.inner_steps,
            adapt_iterations=self.adapt_iterations,
            inner_lr=self.lr,
            outer_lr=self.outer_lr,
            weight_scale=self.weight_scale,
            weight_delta_cap=self.weight_delta_cap,
            meta_epochs=self.meta_epochs,
        )

    def resolved(self) -> dict:
        return {k: v for k, v in sorted(asdict(self).items())}


def _convert(name: str, kind: type, raw: str):
    if kind is bool:
        low = raw.strip().lower()
        if low in _BOOL_TRUE:
            return True
        if low in _BOOL_FALSE:
            return False
        raise ValueError(f"config key {name}: expected a boolean, got {raw!r}")
    try:
        return kind(raw)
    except ValueError as exc:
        raise ValueError(f"config key {name}: {exc}") from exc


def load_config_file(path) -> dict:
    """Flat key-value INI: sections organize, keys must be unique overall."""
    parser = configparser.ConfigParser()
    read = parser.read(path)
    if not read:
        raise FileNotFoundError(f"config file not found: {path}")
    known = {f.name: f.type for f in fields(RunConfig)}
    out: dict = {}
    for section in parser.sections():
        for key, raw in parser.items(section):
            if key not in known:
                raise ValueError(f"{path}: unknown config key {key!r} in [{section}]")
            if key in out:
                raise ValueError(f"{path}: duplicate config key {key!r}")
            kind = {"int": int, "float": float, "bool": bool, "str": str}[known[key]]
            out[key] = _convert(key, kind, raw)
    return out


def resolve_config(file_path=None, overrides: dict | None = None) -> RunConfig:
    """defaults < config file < explicit flag overrides."""
    values: dict = {}
    if file_path is not None:
        values.update(load_config_file(file_path))
    for key, val in (overrides or {}).items():
        if val is not None:
            values.update({key: val})
    return RunConfig(**values)


def method_label(config: RunConfig, meta_trained: bool) -> str:
    """Readable method name for report rows, from the ablation toggles."""
    if config.method:
        return config.method
    if config.adapt_iterations == 0:
        return "CT"
    if not meta_trained:
        return "FT/RA" if config.selection == "random" else "FT/AA"
    weighted = "w-" if config.meta_weighting else ""
    kind = "AML" if config.selection == "active" else "MAML"
    if kind == "MAML" and not config.meta_weighting:
        return "MAML/RA"
    return f"{weighted}{kind}"
