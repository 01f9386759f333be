"""Model / loss / training configuration and the strict JSON run-config loader.

Unknown keys anywhere in a config file are an error so hyperparameter typos
cannot silently fall back to defaults.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

from .errors import ConfigError


@dataclass(frozen=True)
class AttributeSpec:
    """One attribute: display name, its question prompt, and class count."""
    name: str
    prompt: str
    num_classes: int

    def __post_init__(self):
        if not self.name:
            raise ConfigError("attribute name must be non-empty")
        if not self.prompt:
            raise ConfigError(f"attribute '{self.name}' needs a non-empty prompt")
        if self.num_classes < 2:
            raise ConfigError(
                f"attribute '{self.name}' needs num_classes >= 2, got {self.num_classes}")


@dataclass(frozen=True)
class ModelConfig:
    """Encoder dimensions plus the attribute roster.

    Desk-scale defaults keep finite-difference tests fast; the full-size
    dimensions (768 wide, 12 layers, 224px/16px patches, 32000 vocab) remain
    expressible through the same fields.
    """
    d_model: int = 64
    num_layers: int = 2
    num_heads: int = 4
    mlp_hidden: int = 0          # 0 resolves to 4 * d_model
    patch_size: int = 8
    image_hw: int = 32
    max_tokens: int = 16
    vocab_size: int = 256
    layer_norm_eps: float = 1e-5
    attributes: tuple[AttributeSpec, ...] = ()

    def __post_init__(self):
        if self.mlp_hidden == 0:
            object.__setattr__(self, "mlp_hidden", 4 * self.d_model)
        for name, value in (("d_model", self.d_model), ("num_layers", self.num_layers),
                            ("num_heads", self.num_heads), ("mlp_hidden", self.mlp_hidden),
                            ("patch_size", self.patch_size), ("image_hw", self.image_hw),
                            ("max_tokens", self.max_tokens), ("vocab_size", self.vocab_size)):
            if name != "num_layers" and value <= 0:
                raise ConfigError(f"{name} must be positive, got {value}")
        if self.num_layers < 0:
            raise ConfigError(f"num_layers must be >= 0, got {self.num_layers}")
        if self.d_model % self.num_heads != 0:
            raise ConfigError(
                f"d_model {self.d_model} not divisible by num_heads {self.num_heads}")
        if self.image_hw % self.patch_size != 0:
            raise ConfigError(
                f"image_hw {self.image_hw} not divisible by patch_size {self.patch_size}")
        names = [a.name for a in self.attributes]
        if len(set(names)) != len(names):
            raise ConfigError(f"attribute names must be unique: {names}")

    @property
    def n_patches(self) -> int:
        side = self.image_hw // self.patch_size
        return side * side

    @property
    def head_dim(self) -> int:
        return self.d_model // self.num_heads

    @property
    def attn_scale_denominator(self) -> float:
        """The sqrt(d_k) denominator of scaled dot-product attention."""
        return math.sqrt(self.head_dim)

    @property
    def patch_input_dim(self) -> int:
        return self.patch_size * self.patch_size * 3

    @property
    def num_attributes(self) -> int:
        return len(self.attributes)


@dataclass(frozen=True)
class LossConfig:
    """Weights of the composite per-attribute loss.

    Defaults pin what the composite leaves open: unit weights on both terms,
    the canonical focusing exponent 2, and smoothing mass 0.1.
    """
    lambda_ce: float = 1.0
    lambda_focal: float = 1.0
    focal_gamma: float = 2.0
    smoothing: float = 0.1

    def __post_init__(self):
        if self.lambda_ce < 0 or self.lambda_focal < 0:
            raise ConfigError("loss weights must be nonnegative")
        if self.lambda_ce + self.lambda_focal <= 0:
            raise ConfigError("at least one of lambda_ce / lambda_focal must be positive")
        if self.focal_gamma < 0:
            raise ConfigError(f"focal_gamma must be >= 0, got {self.focal_gamma}")
        if not 0.0 <= self.smoothing < 1.0:
            raise ConfigError(f"smoothing must lie in [0, 1), got {self.smoothing}")


ABLATION_MODES = ("full", "no_cross_attention")


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 10
    batch_size: int = 16
    learning_rate: float = 1e-4
    optimizer: str = "adam"
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    ablation: str = "full"

    def __post_init__(self):
        if self.epochs < 0:
            raise ConfigError(f"epochs must be >= 0, got {self.epochs}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.learning_rate <= 0:
            raise ConfigError(f"learning_rate must be positive, got {self.learning_rate}")
        if self.optimizer not in ("sgd", "adam"):
            raise ConfigError(f"optimizer must be 'sgd' or 'adam', got '{self.optimizer}'")
        if self.ablation not in ABLATION_MODES:
            raise ConfigError(
                f"ablation must be one of {ABLATION_MODES}, got '{self.ablation}'")


@dataclass(frozen=True)
class PathsConfig:
    dataset: str = ""
    weights_in: str = ""
    weights_out: str = ""
    report_out: str = ""
    vocab: str = ""


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    model: ModelConfig = field(default_factory=ModelConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    paths: PathsConfig = field(default_factory=PathsConfig)

    def resolved(self) -> dict:
        """Fully-resolved plain-dict form, echoed into run manifests."""
        m = self.model
        return {
            "seed": self.seed,
            "model": {
                "d_model": m.d_model, "num_layers": m.num_layers,
                "num_heads": m.num_heads, "mlp_hidden": m.mlp_hidden,
                "patch_size": m.patch_size, "image_hw": m.image_hw,
                "max_tokens": m.max_tokens, "vocab_size": m.vocab_size,
                "layer_norm_eps": m.layer_norm_eps,
                "n_patches": m.n_patches, "head_dim": m.head_dim,
                "pooling": "mean",
                "attributes": [
                    {"name": a.name, "prompt": a.prompt, "num_classes": a.num_classes}
                    for a in m.attributes],
            },
            "loss": {
                "lambda_ce": self.loss.lambda_ce,
                "lambda_focal": self.loss.lambda_focal,
                "focal_gamma": self.loss.focal_gamma,
                "smoothing": self.loss.smoothing,
            },
            "train": {
                "epochs": self.train.epochs, "batch_size": self.train.batch_size,
                "learning_rate": self.train.learning_rate,
                "optimizer": self.train.optimizer,
                "adam_beta1": self.train.adam_beta1,
                "adam_beta2": self.train.adam_beta2,
                "adam_eps": self.train.adam_eps,
                "ablation": self.train.ablation,
            },
            "paths": {
                "dataset": self.paths.dataset, "weights_in": self.paths.weights_in,
                "weights_out": self.paths.weights_out,
                "report_out": self.paths.report_out, "vocab": self.paths.vocab,
            },
        }


def _require_keys(section: dict, allowed: set[str], where: str) -> None:
    unknown = sorted(set(section) - allowed)
    if unknown:
        raise ConfigError(f"unknown key(s) in {where}: {', '.join(unknown)}")


def _attribute_from_dict(d: dict, where: str) -> AttributeSpec:
    _require_keys(d, {"name", "prompt", "num_classes"}, where)
    try:
        return AttributeSpec(name=d["name"], prompt=d["prompt"],
                             num_classes=int(d["num_classes"]))
    except KeyError as exc:
        raise ConfigError(f"{where} missing required key {exc}") from None


def model_config_from_dict(d: dict, where: str = "model") -> ModelConfig:
    allowed = {"d_model", "num_layers", "num_heads", "mlp_hidden", "patch_size",
               "image_hw", "max_tokens", "vocab_size", "layer_norm_eps", "attributes"}
    _require_keys(d, allowed, where)
    attrs = tuple(
        _attribute_from_dict(a, f"{where}.attributes[{i}]")
        for i, a in enumerate(d.get("attributes", ())))
    kwargs = {k: d[k] for k in allowed - {"attributes"} if k in d}
    return ModelConfig(attributes=attrs, **kwargs)


def loss_config_from_dict(d: dict, where: str = "loss") -> LossConfig:
    allowed = {"lambda_ce", "lambda_focal", "focal_gamma", "smoothing"}
    _require_keys(d, allowed, where)
    return LossConfig(**{k: float(v) for k, v in d.items()})


def train_config_from_dict(d: dict, where: str = "train") -> TrainConfig:
    allowed = {"epochs", "batch_size", "learning_rate", "optimizer",
               "adam_beta1", "adam_beta2", "adam_eps", "ablation"}
    _require_keys(d, allowed, where)
    return TrainConfig(**d)


def paths_config_from_dict(d: dict, where: str = "paths") -> PathsConfig:
    allowed = {"dataset", "weights_in", "weights_out", "report_out", "vocab"}
    _require_keys(d, allowed, where)
    return PathsConfig(**d)


def run_config_from_dict(d: dict) -> RunConfig:
    _require_keys(d, {"seed", "model", "loss", "train", "paths"}, "run config")
    return RunConfig(
        seed=int(d.get("seed", 0)),
        model=model_config_from_dict(d.get("model", {})),
        loss=loss_config_from_dict(d.get("loss", {})),
        train=train_config_from_dict(d.get("train", {})),
        paths=paths_config_from_dict(d.get("paths", {})),
    )


def load_run_config(path: str | Path) -> RunConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    try:
        raw = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file {path} is not valid JSON: {exc}") from None
    if not isinstance(raw, dict):
        raise ConfigError(f"config file {path} must hold a JSON object")
    try:
        return run_config_from_dict(raw)
    except TypeError as exc:
        raise ConfigError(f"config file {path}: {exc}") from None
