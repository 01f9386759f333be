"""Analytic gradients, optimizers, and the training loop.

Encoder outputs are constants under the freeze contract, so the backward
pass is hand-derived reverse-mode differentiation of the trainable subgraph
only: per-attribute cross-attention, post-fusion LayerNorm, mean pooling,
linear heads, and the composite loss. No autodiff framework is involved;
central finite differences validate every gradient in the test suite and
via the gradcheck CLI command.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .config import LossConfig, ModelConfig, TrainConfig
from .data_io import EmbeddedDataset, EmbeddedSample
from .errors import ConfigError, NumericError, PedattrError, ShapeError
from .fusion import cross_attention_with_cache
from .heads import attribute_loss, attribute_loss_grad_p, head_forward, pool, total_loss
from .pipeline import (Model, attribute_distributions, evaluate, init_model,
                       trainable_parameters)
from .tensor import Prng, derive_seeds, seeded_normal

GradientSet = dict[str, np.ndarray]


def _softmax_backward(p: np.ndarray, grad_p: np.ndarray) -> np.ndarray:
    """d(loss)/d(logits) given softmax outputs p and d(loss)/dp, rowwise."""
    inner = np.sum(grad_p * p, axis=-1, keepdims=True)
    return p * (grad_p - inner)


def _layer_norm_backward(dout: np.ndarray, xhat: np.ndarray, inv_std: np.ndarray,
                         gamma: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Backward of layer_norm over the last axis; returns (dx, dgamma, dbeta)."""
    dgamma = np.sum(dout * xhat, axis=0)
    dbeta = np.sum(dout, axis=0)
    dxhat = dout * gamma
    m1 = np.mean(dxhat, axis=-1, keepdims=True)
    m2 = np.mean(dxhat * xhat, axis=-1, keepdims=True)
    dx = inv_std[:, None] * (dxhat - m1 - xhat * m2)
    return dx, dgamma, dbeta


def _sample_losses(model: Model, sample: EmbeddedSample,
                   text_features: list[np.ndarray], loss_cfg: LossConfig,
                   ablation: str) -> list[float]:
    """Per-attribute losses for one sample (shared by loss and FD paths)."""
    dists = attribute_distributions(model, sample, text_features, ablation)
    return [attribute_loss(p, y, loss_cfg)
            for p, y in zip(dists, sample.labels)]


def batch_loss(batch: list[EmbeddedSample], model: Model,
               text_features: list[np.ndarray], loss_cfg: LossConfig,
               ablation: str = "full") -> float:
    """Scalar training objective: batch mean of per-sample attribute means."""
    if not batch:
        raise ConfigError("batch must be non-empty")
    sample_means = [total_loss(_sample_losses(model, s, text_features,
                                              loss_cfg, ablation))
                    for s in batch]
    return float(sum(sample_means) / len(sample_means))


def forward_backward(batch: list[EmbeddedSample], model: Model,
                     text_features: list[np.ndarray], loss_cfg: LossConfig,
                     ablation: str = "full") -> tuple[float, GradientSet]:
    """Loss and exact analytic gradients for every trainable tensor.

    The gradient set never contains encoder entries; in the ablation mode it
    does not contain fusion entries either.
    """
    if not batch:
        raise ConfigError("batch must be non-empty")
    cfg = model.config
    n_attrs = cfg.num_attributes
    grads: GradientSet = {name: np.zeros_like(arr)
                          for name, arr in trainable_parameters(model, ablation).items()}
    # Each (sample, attribute) term carries weight 1/(batch * attributes)
    # from the two nested means.
    weight = 1.0 / (len(batch) * n_attrs)
    loss_sum = 0.0
    for sample in batch:
        sample_loss = 0.0
        for i in range(n_attrs):
            try:
                if ablation == "full":
                    term = _attribute_forward_backward_full(
                        sample, i, model, text_features[i], loss_cfg, weight, grads)
                else:
                    term = _attribute_forward_backward_ablated(
                        sample, i, model, loss_cfg, weight, grads)
                if not np.isfinite(term):
                    raise NumericError("non-finite loss")
            except NumericError as exc:
                raise NumericError(
                    f"sample '{sample.sample_id}' attribute "
                    f"'{cfg.attributes[i].name}': {exc}") from exc
            sample_loss += term
        loss_sum += sample_loss / n_attrs
    return loss_sum / len(batch), grads


def _head_backward(pooled: np.ndarray, p: np.ndarray, y: int, head, prefix: str,
                   loss_cfg: LossConfig, weight: float,
                   grads: GradientSet) -> np.ndarray:
    """Loss -> logits -> head parameters; returns d(loss)/d(pooled)."""
    grad_p = weight * attribute_loss_grad_p(p, y, loss_cfg)
    dz = _softmax_backward(p, grad_p)
    grads[f"{prefix}.w"] += np.outer(pooled, dz)
    grads[f"{prefix}.b"] += dz
    return head.w @ dz


def _attribute_forward_backward_full(sample: EmbeddedSample, i: int, model: Model,
                                     f_text: np.ndarray, loss_cfg: LossConfig,
                                     weight: float, grads: GradientSet) -> float:
    cfg = model.config
    block = model.fusion[i]
    fused, cache = cross_attention_with_cache(sample.f_img, f_text, block, cfg)
    pooled = pool(fused)
    _, p = head_forward(pooled, model.heads[i])
    y = sample.labels[i]
    loss = attribute_loss(p, y, loss_cfg)

    dpooled = _head_backward(pooled, p, y, model.heads[i], f"head.{i}",
                             loss_cfg, weight, grads)
    n = fused.shape[0]
    dfused = np.broadcast_to(dpooled / n, fused.shape)
    dres, dgamma, dbeta = _layer_norm_backward(dfused, cache.xhat, cache.inv_std,
                                               block.ln_gamma)
    grads[f"fusion.{i}.ln_gamma"] += dgamma
    grads[f"fusion.{i}.ln_beta"] += dbeta
    # residual: d(a + f_img) flows to the attended output only (f_img frozen)
    grads[f"fusion.{i}.w_o"] += cache.concat.T @ dres
    dconcat = dres @ block.w_o.T

    dk = cfg.head_dim
    scale = 1.0 / cfg.attn_scale_denominator
    dq = np.empty_like(cache.q)
    dkey = np.empty_like(cache.k)
    dval = np.empty_like(cache.v)
    for head in range(cfg.num_heads):
        cols = slice(head * dk, (head + 1) * dk)
        attn = cache.attn[head]
        d_ctx = dconcat[:, cols]
        d_attn = d_ctx @ cache.v[:, cols].T
        dval[:, cols] = attn.T @ d_ctx
        d_scores = _softmax_backward(attn, d_attn)
        dq[:, cols] = scale * (d_scores @ cache.k[:, cols])
        dkey[:, cols] = scale * (d_scores.T @ cache.q[:, cols])
    grads[f"fusion.{i}.w_q"] += cache.f_img.T @ dq
    grads[f"fusion.{i}.w_k"] += cache.f_text.T @ dkey
    grads[f"fusion.{i}.w_v"] += cache.f_text.T @ dval
    return loss


def _attribute_forward_backward_ablated(sample: EmbeddedSample, i: int,
                                        model: Model, loss_cfg: LossConfig,
                                        weight: float, grads: GradientSet) -> float:
    pooled = pool(sample.f_img)
    _, p = head_forward(pooled, model.heads[i])
    y = sample.labels[i]
    loss = attribute_loss(p, y, loss_cfg)
    _head_backward(pooled, p, y, model.heads[i], f"head.{i}",
                   loss_cfg, weight, grads)
    return loss


# --------------------------------------------------------------------------
# Optimizers
# --------------------------------------------------------------------------

@dataclass
class OptimizerState:
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def optimizer_step(params: dict[str, np.ndarray], grads: GradientSet,
                   state: OptimizerState, cfg: TrainConfig) -> None:
    """One in-place SGD or Adam update over all parameter tensors."""
    if set(params) != set(grads):
        raise ShapeError(
            f"parameter/gradient key mismatch: {sorted(set(params) ^ set(grads))}")
    lr = cfg.learning_rate
    if cfg.optimizer == "sgd":
        for name, p in params.items():
            p -= lr * grads[name]
        return
    state.step += 1
    b1, b2, eps = cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps
    bias1 = 1.0 - b1 ** state.step
    bias2 = 1.0 - b2 ** state.step
    for name, p in params.items():
        g = grads[name]
        if name not in state.m:
            state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        state.m[name] = b1 * state.m[name] + (1.0 - b1) * g
        state.v[name] = b2 * state.v[name] + (1.0 - b2) * g * g
        m_hat = state.m[name] / bias1
        v_hat = state.v[name] / bias2
        p -= lr * m_hat / (np.sqrt(v_hat) + eps)


# --------------------------------------------------------------------------
# Training loop
# --------------------------------------------------------------------------

def train(model: Model, embedded: EmbeddedDataset, train_cfg: TrainConfig,
          loss_cfg: LossConfig, seed: int) -> tuple[Model, list[dict]]:
    """Iterate epochs of seeded-shuffle batches over the trainable parameters.

    History carries one row per epoch: sample-weighted mean training loss
    plus mA / mean F1 measured on the training set with the epoch-end
    weights. Encoder weights are checksummed before and after; any change
    aborts.
    """
    if not embedded.samples:
        raise ConfigError("training dataset is empty")
    ablation = train_cfg.ablation
    params = trainable_parameters(model, ablation)
    state = OptimizerState()
    checksum_before = model.encoder_checksum()
    n = len(embedded.samples)
    epoch_seeds = derive_seeds(seed, max(1, train_cfg.epochs))
    history: list[dict] = []
    for epoch in range(train_cfg.epochs):
        order = list(range(n))
        Prng(epoch_seeds[epoch]).shuffle(order)
        loss_total = 0.0
        for start in range(0, n, train_cfg.batch_size):
            batch = [embedded.samples[j] for j in order[start:start + train_cfg.batch_size]]
            try:
                loss, grads = forward_backward(batch, model, embedded.text_features,
                                               loss_cfg, ablation)
            except NumericError as exc:
                raise NumericError(
                    f"epoch {epoch + 1}, batch {start // train_cfg.batch_size}: {exc}"
                ) from exc
            optimizer_step(params, grads, state, train_cfg)
            loss_total += loss * len(batch)
        report = evaluate(model, embedded, ablation)
        history.append({
            "epoch": epoch + 1,
            "loss": loss_total / n,
            "mean_accuracy": report.mean_accuracy,
            "mean_f1": report.mean_f1,
        })
    if model.encoder_checksum() != checksum_before:
        raise PedattrError("freeze contract violated: encoder weights changed")
    return model, history


# --------------------------------------------------------------------------
# Finite-difference gradient check
# --------------------------------------------------------------------------

def synthesize_check_inputs(cfg: ModelConfig, seed: int, batch_size: int = 2,
                            prompt_tokens: int = 3
                            ) -> tuple[list[EmbeddedSample], list[np.ndarray]]:
    """Random frozen-side constants standing in for encoder outputs."""
    seeds = derive_seeds(seed, cfg.num_attributes + 2 * batch_size + 1)
    text_features = [seeded_normal((prompt_tokens, cfg.d_model), seeds[i])
                     for i in range(cfg.num_attributes)]
    label_prng = Prng(seeds[cfg.num_attributes])
    samples = []
    for b in range(batch_size):
        f_img = seeded_normal((cfg.n_patches, cfg.d_model),
                              seeds[cfg.num_attributes + 1 + 2 * b])
        cls_embed = seeded_normal((cfg.d_model,),
                                  seeds[cfg.num_attributes + 2 + 2 * b])
        labels = [label_prng.randint(a.num_classes) for a in cfg.attributes]
        samples.append(EmbeddedSample(f"check_{b}", f_img, cls_embed, labels))
    return samples, text_features


def gradient_check(cfg: ModelConfig, loss_cfg: LossConfig, seed: int = 0,
                   ablation: str = "full", fd_step: float = 1e-5,
                   near_zero: float = 1e-4,
                   corrupt: bool = False) -> dict[str, float]:
    """Max relative error of analytic vs central-FD gradients per tensor.

    The denominator of the relative error is floored at ``near_zero``, so a
    gradient entry below that magnitude passes the default 1e-4 tolerance
    exactly when the absolute difference stays under 1e-8. ``corrupt``
    deliberately damages one analytic entry (a negative control for the CLI
    exit path).
    """
    model = init_model(cfg, seed)
    params = trainable_parameters(model, ablation)
    # Evaluate away from the tiny-weight init so every gradient is large
    # enough for the relative comparison to bite; 1/sqrt(d) keeps attention
    # logits O(1) (unsaturated) at any model width.
    offset_seeds = derive_seeds(seed ^ 0x5EED, len(params))
    for s, arr in zip(offset_seeds, params.values()):
        arr += seeded_normal(arr.shape, s, 1.0 / np.sqrt(cfg.d_model))
    batch, text_features = synthesize_check_inputs(cfg, derive_seeds(seed, 1)[0])
    _, analytic = forward_backward(batch, model, text_features, loss_cfg, ablation)
    if corrupt:
        first = next(iter(analytic))
        analytic[first].flat[0] += 1e-2
    errors: dict[str, float] = {}
    for name, param in params.items():
        a = analytic[name]
        worst = 0.0
        flat = param.reshape(-1)
        for idx in range(flat.size):
            original = flat[idx]
            flat[idx] = original + fd_step
            up = batch_loss(batch, model, text_features, loss_cfg, ablation)
            flat[idx] = original - fd_step
            down = batch_loss(batch, model, text_features, loss_cfg, ablation)
            flat[idx] = original
            numeric = (up - down) / (2.0 * fd_step)
            diff = abs(a.flat[idx] - numeric)
            denom = max(abs(a.flat[idx]), abs(numeric), near_zero)
            worst = max(worst, diff / denom)
        errors[name] = worst
    return errors
