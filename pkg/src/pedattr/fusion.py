"""Two-stage vision-language fusion.

Stage 1 scores each attribute's prompt against the image class embedding by
cosine similarity (a zero-shot diagnostic; the scores feed no downstream
computation). Stage 2 refines patch features per attribute with a dedicated
multi-head cross-attention block: patches provide queries, prompt tokens
provide keys/values, and the attended output is residually combined with the
patch features under a trainable LayerNorm.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .config import ModelConfig
from .errors import ConfigError, NumericError, ShapeError
from .tensor import (check_finite, derive_seeds, layer_norm_with_cache,
                     seeded_normal, softmax_rows)

FUSION_INIT_SCALE = 0.02


@dataclass
class FusionBlockWeights:
    """Trainable cross-attention block of a single attribute."""
    w_q: np.ndarray      # d_model x d_model, column-partitioned across heads
    w_k: np.ndarray
    w_v: np.ndarray
    w_o: np.ndarray
    ln_gamma: np.ndarray
    ln_beta: np.ndarray

    def named_arrays(self, prefix: str):
        for field in ("w_q", "w_k", "w_v", "w_o", "ln_gamma", "ln_beta"):
            yield f"{prefix}.{field}", getattr(self, field)


@dataclass(frozen=True)
class AlignmentScore:
    attribute_id: int
    score: float


@dataclass
class CrossAttentionCache:
    """Forward intermediates consumed by the analytic backward pass."""
    f_img: np.ndarray
    f_text: np.ndarray
    q: np.ndarray
    k: np.ndarray
    v: np.ndarray
    attn: np.ndarray       # num_heads x N x T
    concat: np.ndarray     # N x d_model, heads concatenated before w_o
    xhat: np.ndarray
    inv_std: np.ndarray


def init_fusion_block(cfg: ModelConfig, seed: int) -> FusionBlockWeights:
    d = cfg.d_model
    seeds = derive_seeds(seed, 4)
    return FusionBlockWeights(
        w_q=seeded_normal((d, d), seeds[0], FUSION_INIT_SCALE),
        w_k=seeded_normal((d, d), seeds[1], FUSION_INIT_SCALE),
        w_v=seeded_normal((d, d), seeds[2], FUSION_INIT_SCALE),
        w_o=seeded_normal((d, d), seeds[3], FUSION_INIT_SCALE),
        ln_gamma=np.ones(d),
        ln_beta=np.zeros(d),
    )


def cosine_align(cls_embed: np.ndarray, f_text: np.ndarray,
                 attribute_id: int = 0) -> AlignmentScore:
    """Cosine similarity between the class embedding and the mean prompt token."""
    cls_embed = np.asarray(cls_embed, dtype=np.float64)
    f_text = np.asarray(f_text, dtype=np.float64)
    if f_text.ndim != 2 or cls_embed.ndim != 1 or f_text.shape[1] != cls_embed.shape[0]:
        raise ShapeError(
            f"cosine_align shapes disagree: image {cls_embed.shape}, text {f_text.shape}")
    pooled = f_text.mean(axis=0)
    denom = np.linalg.norm(cls_embed) * np.linalg.norm(pooled)
    if denom == 0.0:
        raise NumericError(f"zero-norm embedding in cosine alignment "
                           f"for attribute {attribute_id}")
    return AlignmentScore(attribute_id, float(cls_embed @ pooled / denom))


def cross_attention_with_cache(
        f_img: np.ndarray, f_text: np.ndarray, w: FusionBlockWeights,
        cfg: ModelConfig) -> tuple[np.ndarray, CrossAttentionCache]:
    """Cross-attention forward returning the fused features and the cache.

    Queries come from the N patch features, keys/values from the T prompt
    tokens; each of the num_heads heads works on its own d_k-wide column
    block, the concatenated heads pass through the output projection, and
    the result is residually added to f_img and layer-normalized.
    """
    f_img = np.asarray(f_img, dtype=np.float64)
    f_text = np.asarray(f_text, dtype=np.float64)
    d = cfg.d_model
    if f_img.ndim != 2 or f_img.shape[1] != d:
        raise ShapeError(f"f_img shape {f_img.shape} does not match d_model {d}")
    if f_text.ndim != 2 or f_text.shape[1] != d:
        raise ShapeError(f"f_text shape {f_text.shape} does not match d_model {d}")
    n, t = f_img.shape[0], f_text.shape[0]
    dk = cfg.head_dim
    scale = 1.0 / cfg.attn_scale_denominator

    q = f_img @ w.w_q
    k = f_text @ w.w_k
    v = f_text @ w.w_v
    attn = np.empty((cfg.num_heads, n, t))
    concat = np.empty((n, d))
    for head in range(cfg.num_heads):
        cols = slice(head * dk, (head + 1) * dk)
        attn[head] = softmax_rows((q[:, cols] @ k[:, cols].T) * scale)
        concat[:, cols] = attn[head] @ v[:, cols]
    a = concat @ w.w_o
    fused, xhat, inv_std = layer_norm_with_cache(
        a + f_img, w.ln_gamma, w.ln_beta, cfg.layer_norm_eps)
    check_finite(fused, "cross-attention output")
    return fused, CrossAttentionCache(f_img, f_text, q, k, v, attn, concat,
                                      xhat, inv_std)


def cross_attention_forward(f_img: np.ndarray, f_text: np.ndarray,
                            w: FusionBlockWeights, cfg: ModelConfig) -> np.ndarray:
    """Fused patch features for one attribute (same shape as f_img)."""
    fused, _ = cross_attention_with_cache(f_img, f_text, w, cfg)
    return fused


def fuse_all(f_img: np.ndarray, text_features: list[np.ndarray],
             weights: list[FusionBlockWeights], cfg: ModelConfig) -> list[np.ndarray]:
    """Apply each attribute's dedicated block independently."""
    if not (len(text_features) == len(weights) == cfg.num_attributes):
        raise ConfigError(
            f"attribute count mismatch: {cfg.num_attributes} configured, "
            f"{len(text_features)} prompt features, {len(weights)} fusion blocks")
    return [cross_attention_forward(f_img, ft, w, cfg)
            for ft, w in zip(text_features, weights)]
