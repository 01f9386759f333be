"""Model bundle and end-to-end forward paths.

The parameter partition follows the freeze contract: encoder weights are
fixed at initialization (or load) and never appear in gradient sets; fusion
blocks and classification heads are the trainable remainder. The ablation
variant bypasses fusion entirely and feeds mean-pooled patch features to
the heads, leaving the text path unused.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .config import ModelConfig
from .data_io import MAGIC_WEIGHTS, EmbeddedDataset, EmbeddedSample, load_container, save_container
from .encoders import EncoderWeights, encoder_checksum, init_encoder_weights
from .errors import ConfigError, DataFormatError
from .fusion import FusionBlockWeights, cosine_align, cross_attention_forward, init_fusion_block
from .heads import HeadWeights, PredictionRecord, head_forward, init_head, pool, predict
from .metrics import MetricsReport, build_report
from .tensor import derive_seeds


@dataclass
class Model:
    config: ModelConfig
    encoders: EncoderWeights
    fusion: list[FusionBlockWeights]
    heads: list[HeadWeights]

    def encoder_checksum(self) -> str:
        return encoder_checksum(self.encoders)


def init_model(cfg: ModelConfig, seed: int) -> Model:
    """Deterministic model: each weight group gets a derived child seed."""
    if not cfg.attributes:
        raise ConfigError("model config needs at least one attribute")
    n_attrs = cfg.num_attributes
    seeds = derive_seeds(seed, 1 + 2 * n_attrs)
    return Model(
        config=cfg,
        encoders=init_encoder_weights(cfg, seeds[0]),
        fusion=[init_fusion_block(cfg, seeds[1 + i]) for i in range(n_attrs)],
        heads=[init_head(cfg.d_model, a.num_classes, seeds[1 + n_attrs + i])
               for i, a in enumerate(cfg.attributes)],
    )


def trainable_parameters(model: Model, ablation: str = "full") -> dict[str, np.ndarray]:
    """Live references to every trainable array, keyed by stable names.

    Encoder weights are intentionally absent. In the no_cross_attention
    ablation the fusion blocks are excluded as well.
    """
    params: dict[str, np.ndarray] = {}
    if ablation == "full":
        for i, block in enumerate(model.fusion):
            params.update(block.named_arrays(f"fusion.{i}"))
    for i, head in enumerate(model.heads):
        params.update(head.named_arrays(f"head.{i}"))
    return params


def attribute_distributions(model: Model, sample: EmbeddedSample,
                            text_features: list[np.ndarray],
                            ablation: str = "full") -> list[np.ndarray]:
    """Per-attribute class distributions for one embedded sample."""
    cfg = model.config
    dists = []
    if ablation == "full":
        for i in range(cfg.num_attributes):
            fused = cross_attention_forward(sample.f_img, text_features[i],
                                            model.fusion[i], cfg)
            _, p = head_forward(pool(fused), model.heads[i])
            dists.append(p)
    else:
        pooled = pool(sample.f_img)
        for i in range(cfg.num_attributes):
            _, p = head_forward(pooled, model.heads[i])
            dists.append(p)
    return dists


def predict_sample(model: Model, sample: EmbeddedSample,
                   text_features: list[np.ndarray],
                   ablation: str = "full") -> list[PredictionRecord]:
    dists = attribute_distributions(model, sample, text_features, ablation)
    return [predict(p, attr.name)
            for p, attr in zip(dists, model.config.attributes)]


def predictions_matrix(model: Model, embedded: EmbeddedDataset,
                       ablation: str = "full") -> np.ndarray:
    """samples x attributes predicted class indices."""
    rows = []
    for sample in embedded.samples:
        records = predict_sample(model, sample, embedded.text_features, ablation)
        rows.append([r.predicted_class for r in records])
    return np.array(rows, dtype=np.int64).reshape(len(embedded.samples),
                                                  model.config.num_attributes)


def evaluate(model: Model, embedded: EmbeddedDataset,
             ablation: str = "full") -> MetricsReport:
    preds = predictions_matrix(model, embedded, ablation)
    return build_report(preds, embedded.labels_matrix(), list(model.config.attributes))


def per_attribute_accuracy(model: Model, embedded: EmbeddedDataset,
                           ablation: str = "full") -> list[float]:
    """Fraction of samples classified correctly, per attribute."""
    preds = predictions_matrix(model, embedded, ablation)
    labels = embedded.labels_matrix()
    return [float(np.mean(preds[:, j] == labels[:, j]))
            for j in range(model.config.num_attributes)]


def zero_shot_scores(model: Model, embedded: EmbeddedDataset) -> list[tuple[str, str, float]]:
    """(sample_id, attribute, cosine score) rows for every pair."""
    rows = []
    for sample in embedded.samples:
        for i, attr in enumerate(model.config.attributes):
            score = cosine_align(sample.cls_embed, embedded.text_features[i], i)
            rows.append((sample.sample_id, attr.name, score.score))
    return rows


# --------------------------------------------------------------------------
# Trainable-weight containers
# --------------------------------------------------------------------------

def save_trainable_weights(model: Model, path, ablation: str = "full") -> None:
    """Persist fusion + head weights; ablation containers omit fusion."""
    entries = list(trainable_parameters(model, ablation).items())
    save_container(path, entries, MAGIC_WEIGHTS)


def load_trainable_weights(model: Model, path) -> str:
    """Load a trained container into the model; returns the variant found.

    A container without fusion entries is an ablation artifact and leaves
    the model's fusion blocks untouched ("no_cross_attention"); otherwise
    every fusion and head entry must be present with matching shapes.
    """
    _, entries = load_container(path, MAGIC_WEIGHTS)
    has_fusion = any(name.startswith("fusion.") for name in entries)
    ablation = "full" if has_fusion else "no_cross_attention"
    expected = trainable_parameters(model, ablation)
    if set(entries) != set(expected):
        missing = sorted(set(expected) - set(entries))
        extra = sorted(set(entries) - set(expected))
        raise DataFormatError(
            f"{path}: weight entries do not match the model configuration "
            f"(missing {missing}, unexpected {extra})")
    for name, target in expected.items():
        loaded = entries[name]
        if loaded.shape != target.shape:
            raise DataFormatError(
                f"{path}: entry '{name}' shape {loaded.shape} incompatible "
                f"with configured {target.shape}")
        target[...] = loaded
    return ablation
