"""The base pitch classifier and the confidence head built on its features.

The base model is a conv stack over the spectrogram followed by a shared
per-frame dense representation (the feature extractor, frozen after
pre-training) and a per-frame softmax classifier over the 506 pitch
classes. The confidence head consumes the same shared representation and
emits one sigmoid score per frame.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import nn
from .signal import FREQ_BINS, N_CLASSES, Spectrogram

PRESETS = {
    # filters, dense width, confidence hidden width
    "paper": ([64, 128, 192, 256], 512, 256),
    "desk": ([8, 16, 24, 32], 64, 32),
}


@dataclass(frozen=True)
class Architecture:
    """Sizes of the conv/dense stacks; `preset` names a known combination."""

    preset: str = "desk"
    conv_filters: tuple = (8, 16, 24, 32)
    kernel: tuple = (5, 5)
    dense_width: int = 64
    confidence_hidden: int = 32
    n_classes: int = N_CLASSES
    input_bins: int = FREQ_BINS

    @classmethod
    def from_preset(cls, preset: str, input_bins: int = FREQ_BINS) -> "Architecture":
        if preset not in PRESETS:
            raise ValueError(f"unknown preset {preset!r}, expected one of {sorted(PRESETS)}")
        filters, dense, conf = PRESETS[preset]
        return cls(
            preset=preset,
            conv_filters=tuple(filters),
            dense_width=dense,
            confidence_hidden=conf,
            input_bins=input_bins,
        )

    def to_manifest(self) -> dict:
        return {
            "preset": self.preset,
            "conv_filters": list(self.conv_filters),
            "kernel": list(self.kernel),
            "dense_width": self.dense_width,
            "confidence_hidden": self.confidence_hidden,
            "n_classes": self.n_classes,
            "input_bins": self.input_bins,
        }

    @classmethod
    def from_manifest(cls, data: dict) -> "Architecture":
        return cls(
            preset=data["preset"],
            conv_filters=tuple(data["conv_filters"]),
            kernel=tuple(data["kernel"]),
            dense_width=data["dense_width"],
            confidence_hidden=data["confidence_hidden"],
            n_classes=data["n_classes"],
            input_bins=data["input_bins"],
        )


def build_feature_net(arch: Architecture) -> nn.Network:
    """Conv blocks with frequency pooling, then the shared dense layer.

    Each of the first three conv blocks halves-and-halves the frequency
    axis via factor-4 max pooling; the last block pools frequency away
    entirely so every frame ends up as a fixed-width feature vector.
    """
    layers, names = [], []
    for i, filters in enumerate(arch.conv_filters):
        layers += [nn.Conv2D(filters, arch.kernel), nn.BatchNorm(), nn.ReLU()]
        names += [f"conv{i + 1}", f"bn{i + 1}", f"relu{i + 1}"]
        is_last = i == len(arch.conv_filters) - 1
        layers.append(nn.FreqPool(0 if is_last else 4))
        names.append(f"pool{i + 1}")
    layers += [nn.DensePerFrame(arch.dense_width), nn.ReLU()]
    names += ["shared_dense", "shared_relu"]
    return nn.Network(layers=layers, names=names)


def build_classifier_net(arch: Architecture) -> nn.Network:
    return nn.Network(layers=[nn.DensePerFrame(arch.n_classes)], names=["classifier"])


def build_confidence_net(arch: Architecture) -> nn.Network:
    return nn.Network(
        layers=[
            nn.DensePerFrame(arch.confidence_hidden),
            nn.ReLU(),
            nn.DensePerFrame(1),
            nn.Sigmoid(),
        ],
        names=["conf_dense", "conf_relu", "conf_out", "conf_sigmoid"],
    )


_SOFTMAX = nn.SoftmaxPerFrame()


def softmax_columns(logits: np.ndarray) -> np.ndarray:
    # float64 so column sums hold to 1e-6 even over 506 classes
    return _SOFTMAX.forward(np.asarray(logits, dtype=np.float64), {}, False)[0]


@dataclass
class BaseModel:
    """Feature extractor (phi) plus per-frame classifier (theta)."""

    architecture: Architecture
    feature_net: nn.Network
    feature_params: nn.ParameterSet
    classifier_net: nn.Network
    classifier_params: nn.ParameterSet
    frozen_features: bool = False

    @classmethod
    def create(cls, arch: Architecture, seed: int = 0) -> "BaseModel":
        rng = np.random.default_rng(seed)
        feature_net = build_feature_net(arch)
        classifier_net = build_classifier_net(arch)
        in_shape = (1, arch.input_bins, 1)  # time extent is free
        feature_params = feature_net.init_params(rng, in_shape)
        classifier_params = classifier_net.init_params(rng, feature_net.out_shape(in_shape))
        return cls(
            architecture=arch,
            feature_net=feature_net,
            feature_params=feature_params,
            classifier_net=classifier_net,
            classifier_params=classifier_params,
        )

    def freeze_features(self) -> None:
        """Permanently stop feature-extractor updates (post pre-training)."""
        self.feature_params.freeze()
        self.frozen_features = True

    def _input_array(self, spectrogram) -> np.ndarray:
        x = spectrogram.magnitudes if isinstance(spectrogram, Spectrogram) else np.asarray(spectrogram)
        if x.ndim != 2 or x.shape[0] != self.architecture.input_bins:
            raise ValueError(
                f"expected ({self.architecture.input_bins}, frames) input, got {x.shape}"
            )
        return x[None, :, :].astype(np.float32)

    def compute_features(self, spectrogram, train: bool = False):
        """Shared per-frame representation; the single tap point for both
        the classifier and the confidence head."""
        x = self._input_array(spectrogram)
        train = train and not self.frozen_features
        feats, tape = nn.forward(self.feature_net, self.feature_params, x, train=train)
        return feats, tape

    def logits_from_features(self, features: np.ndarray, params: nn.ParameterSet | None = None):
        params = params if params is not None else self.classifier_params
        return nn.forward(self.classifier_net, params, features)

    def predict_posteriors(self, spectrogram) -> np.ndarray:
        """Class-probability matrix (n_classes x frames); columns sum to 1."""
        feats, _ = self.compute_features(spectrogram)
        logits, _ = self.logits_from_features(feats)
        return softmax_columns(logits)

    def posteriors_from_features(self, features: np.ndarray, params: nn.ParameterSet | None = None) -> np.ndarray:
        logits, _ = self.logits_from_features(features, params)
        return softmax_columns(logits)

    def feature_checksum(self) -> str:
        return self.feature_params.checksum()


@dataclass
class ConfidenceModel:
    """Small head (psi) predicting per-frame confidence from phi features."""

    net: nn.Network
    params: nn.ParameterSet

    @classmethod
    def create(cls, arch: Architecture, feature_shape: tuple, seed: int = 1) -> "ConfidenceModel":
        rng = np.random.default_rng(seed)
        net = build_confidence_net(arch)
        return cls(net=net, params=net.init_params(rng, feature_shape))

    def confidence_from_features(self, features: np.ndarray, params: nn.ParameterSet | None = None) -> np.ndarray:
        params = params if params is not None else self.params
        out, _ = nn.forward(self.net, params, features)
        return out[0]

    def predict_confidence(self, base: BaseModel, spectrogram) -> np.ndarray:
        """Per-frame confidence in [0, 1], from phi features only."""
        feats, _ = base.compute_features(spectrogram)
        return self.confidence_from_features(feats)


def predict_classes(posteriors: np.ndarray) -> np.ndarray:
    """Per-frame argmax; ties resolve to the lowest class id."""
    return np.argmax(posteriors, axis=0)


def create_models(arch: Architecture, seed: int = 0) -> tuple[BaseModel, ConfidenceModel]:
    base = BaseModel.create(arch, seed=seed)
    feat_shape = base.feature_net.out_shape((1, arch.input_bins, 1))
    conf = ConfidenceModel.create(arch, feat_shape, seed=seed + 1)
    return base, conf


def save_models(path, base: BaseModel, conf: ConfidenceModel | None = None, tags: dict | None = None) -> None:
    nets = {
        "features": (base.feature_net, base.feature_params),
        "classifier": (base.classifier_net, base.classifier_params),
    }
    if conf is not None:
        nets["confidence"] = (conf.net, conf.params)
    extra = {
        "architecture": base.architecture.to_manifest(),
        "frozen_features": base.frozen_features,
        **(tags or {}),
    }
    nn.save_weights(path, nets, extra=extra)


def read_model_tags(path) -> dict:
    """The extra/tag section of a weight file (architecture, flags)."""
    return nn.read_manifest(path).get("extra", {})


def load_models(path, expected_architecture: Architecture | None = None):
    """Rebuild (BaseModel, ConfidenceModel | None) from a weight file."""
    manifest = nn.read_manifest(path)
    extra = manifest.get("extra", {})
    if "architecture" not in extra:
        raise nn.WeightFormatError(f"{path}: missing architecture section")
    arch = Architecture.from_manifest(extra["architecture"])
    if expected_architecture is not None and arch != expected_architecture:
        raise nn.WeightFormatError(
            f"{path}: architecture mismatch: expected {expected_architecture}, found {arch}"
        )
    feature_net = build_feature_net(arch)
    classifier_net = build_classifier_net(arch)
    expected = {"features": feature_net, "classifier": classifier_net}
    has_conf = "confidence" in manifest.get("networks", {})
    if has_conf:
        expected["confidence"] = build_confidence_net(arch)
    loaded, extra = nn.load_weights(path, expected=expected)
    base = BaseModel(
        architecture=arch,
        feature_net=feature_net,
        feature_params=loaded["features"],
        classifier_net=classifier_net,
        classifier_params=loaded["classifier"],
        frozen_features=bool(extra.get("frozen_features", False)),
    )
    conf = None
    if has_conf:
        conf = ConfidenceModel(net=expected["confidence"], params=loaded["confidence"])
    return base, conf
