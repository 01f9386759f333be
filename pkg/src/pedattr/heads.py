"""Per-attribute classification heads and the composite loss.

Each attribute owns a linear head over the mean-pooled fused features. The
loss per attribute combines label-smoothed cross-entropy with a focal term
on the unsmoothed true class; the multi-task total is the plain mean over
attributes.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .config import LossConfig
from .errors import ConfigError, InputError, ShapeError
from .tensor import derive_seeds, seeded_normal, softmax_rows

HEAD_INIT_SCALE = 0.02
PROB_FLOOR = 1e-12


@dataclass
class HeadWeights:
    """Linear classifier of a single attribute: d_model -> num_classes."""
    w: np.ndarray
    b: np.ndarray

    def named_arrays(self, prefix: str):
        yield f"{prefix}.w", self.w
        yield f"{prefix}.b", self.b


@dataclass(frozen=True)
class PredictionRecord:
    attribute: str
    predicted_class: int
    confidence: float
    distribution: np.ndarray


def init_head(d_model: int, num_classes: int, seed: int) -> HeadWeights:
    (s,) = derive_seeds(seed, 1)
    return HeadWeights(w=seeded_normal((d_model, num_classes), s, HEAD_INIT_SCALE),
                       b=np.zeros(num_classes))


def pool(h: np.ndarray) -> np.ndarray:
    """Mean over the N patch rows; bridges patch-level features to one vector."""
    h = np.asarray(h, dtype=np.float64)
    if h.ndim != 2 or h.shape[0] < 1:
        raise ShapeError(f"pool expects a non-empty N x d matrix, got {h.shape}")
    return h.mean(axis=0)


def head_forward(pooled: np.ndarray, w: HeadWeights) -> tuple[np.ndarray, np.ndarray]:
    """Logits and softmax probabilities for one attribute."""
    pooled = np.asarray(pooled, dtype=np.float64)
    if pooled.ndim != 1 or pooled.shape[0] != w.w.shape[0]:
        raise ShapeError(
            f"pooled vector {pooled.shape} does not match head weights {w.w.shape}")
    z = pooled @ w.w + w.b
    return z, softmax_rows(z)


def predict(p: np.ndarray, attribute: str = "") -> PredictionRecord:
    """Argmax class (ties break to the lowest index) and its probability."""
    p = np.asarray(p, dtype=np.float64)
    y = int(np.argmax(p))
    return PredictionRecord(attribute, y, float(p[y]), p)


def attribute_loss(p: np.ndarray, y: int, cfg: LossConfig) -> float:
    """Composite loss: smoothed cross-entropy plus focal term.

    The smoothed target puts 1 - smoothing on the true class and spreads the
    rest uniformly over the others; the focal term reweights the plain
    negative log-likelihood of the true class by (1 - p_y)^gamma.
    Probabilities are floored at 1e-12 before any log.
    """
    p = np.asarray(p, dtype=np.float64)
    k = p.shape[0]
    if not 0 <= y < k:
        raise InputError(f"label {y} outside [0, {k})")
    log_p = np.log(np.maximum(p, PROB_FLOOR))
    loss = 0.0
    if cfg.lambda_ce > 0.0:
        q = np.full(k, cfg.smoothing / (k - 1)) if cfg.smoothing > 0.0 else np.zeros(k)
        q[y] = 1.0 - cfg.smoothing
        loss += cfg.lambda_ce * float(-(q @ log_p))
    if cfg.lambda_focal > 0.0:
        loss += cfg.lambda_focal * float(-((1.0 - p[y]) ** cfg.focal_gamma) * log_p[y])
    return loss


def attribute_loss_grad_p(p: np.ndarray, y: int, cfg: LossConfig) -> np.ndarray:
    """dL/dp of attribute_loss (the floor makes clamped entries flat)."""
    p = np.asarray(p, dtype=np.float64)
    k = p.shape[0]
    g = np.zeros(k)
    active = p > PROB_FLOOR
    if cfg.lambda_ce > 0.0:
        q = np.full(k, cfg.smoothing / (k - 1)) if cfg.smoothing > 0.0 else np.zeros(k)
        q[y] = 1.0 - cfg.smoothing
        g[active] += cfg.lambda_ce * (-q[active] / p[active])
    if cfg.lambda_focal > 0.0:
        py = p[y]
        one_minus = 1.0 - py
        log_py = math.log(max(py, PROB_FLOOR))
        if cfg.focal_gamma > 0.0 and one_minus > 0.0:
            g[y] += cfg.lambda_focal * cfg.focal_gamma * one_minus ** (cfg.focal_gamma - 1.0) * log_py
        if active[y]:
            g[y] += cfg.lambda_focal * (-(one_minus ** cfg.focal_gamma) / py)
    return g


def total_loss(losses: list[float]) -> float:
    """Multi-task aggregate: arithmetic mean of the per-attribute losses."""
    if not losses:
        raise ConfigError("total_loss needs at least one per-attribute loss")
    return float(sum(losses) / len(losses))
