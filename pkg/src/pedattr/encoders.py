"""Frozen vision and text transformer encoders.

Both encoders share one layer shape: post-LN residual blocks where the
normalization wraps the residual sum (h' = LN(attn(h) + h), then
out = LN(mlp(h') + h')). The text stack applies a causal mask so position t
never attends past itself. Weights are immutable after initialization; the
training loop verifies their checksum never changes.
"""
from __future__ import annotations

import hashlib
import string
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .config import ModelConfig
from .errors import ConfigError, DataFormatError, InputError, ShapeError
from .tensor import (derive_seeds, gelu, layer_norm, seeded_normal, softmax_rows,
                     weighted_sum_rows)

INIT_SCALE = 0.02
OOV_ID = 0

_PUNCT_TABLE = str.maketrans({c: " " for c in string.punctuation})


@dataclass
class LayerWeights:
    """One transformer block: Q/K/V/output projections, two LayerNorms, MLP."""
    w_q: np.ndarray
    w_k: np.ndarray
    w_v: np.ndarray
    w_o: np.ndarray
    ln1_gamma: np.ndarray
    ln1_beta: np.ndarray
    w_mlp1: np.ndarray
    w_mlp2: np.ndarray
    ln2_gamma: np.ndarray
    ln2_beta: np.ndarray


@dataclass
class VisionWeights:
    w_patch: np.ndarray          # d_model x (P*P*3)
    pos: np.ndarray              # (N+1) x d_model, row 0 is the class token slot
    cls_token: np.ndarray        # d_model
    layers: list[LayerWeights]


@dataclass
class TextWeights:
    token_table: np.ndarray      # vocab_size x d_model
    pos: np.ndarray              # max_tokens x d_model
    layers: list[LayerWeights]


@dataclass
class EncoderWeights:
    vision: VisionWeights
    text: TextWeights

    def named_arrays(self):
        """All arrays in a fixed traversal order (checksum / freeze contract)."""
        yield "vision.w_patch", self.vision.w_patch
        yield "vision.pos", self.vision.pos
        yield "vision.cls_token", self.vision.cls_token
        for i, lw in enumerate(self.vision.layers):
            yield from _named_layer_arrays(f"vision.layer{i}", lw)
        yield "text.token_table", self.text.token_table
        yield "text.pos", self.text.pos
        for i, lw in enumerate(self.text.layers):
            yield from _named_layer_arrays(f"text.layer{i}", lw)


def _named_layer_arrays(prefix: str, lw: LayerWeights):
    for field in ("w_q", "w_k", "w_v", "w_o", "ln1_gamma", "ln1_beta",
                  "w_mlp1", "w_mlp2", "ln2_gamma", "ln2_beta"):
        yield f"{prefix}.{field}", getattr(lw, field)


def _init_layer(cfg: ModelConfig, seeds: list[int]) -> LayerWeights:
    d, m = cfg.d_model, cfg.mlp_hidden
    return LayerWeights(
        w_q=seeded_normal((d, d), seeds[0], INIT_SCALE),
        w_k=seeded_normal((d, d), seeds[1], INIT_SCALE),
        w_v=seeded_normal((d, d), seeds[2], INIT_SCALE),
        w_o=seeded_normal((d, d), seeds[3], INIT_SCALE),
        ln1_gamma=np.ones(d), ln1_beta=np.zeros(d),
        w_mlp1=seeded_normal((d, m), seeds[4], INIT_SCALE),
        w_mlp2=seeded_normal((m, d), seeds[5], INIT_SCALE),
        ln2_gamma=np.ones(d), ln2_beta=np.zeros(d),
    )


def init_encoder_weights(cfg: ModelConfig, seed: int) -> EncoderWeights:
    """Deterministic stand-in for pretrained frozen weights.

    Every tensor gets its own child seed (derived in a fixed order), so the
    result depends only on (cfg dims, seed).
    """
    per_layer = 6
    n_seeds = 5 + per_layer * 2 * cfg.num_layers
    seeds = derive_seeds(seed, n_seeds)
    vision = VisionWeights(
        w_patch=seeded_normal((cfg.d_model, cfg.patch_input_dim), seeds[0], INIT_SCALE),
        pos=seeded_normal((cfg.n_patches + 1, cfg.d_model), seeds[1], INIT_SCALE),
        cls_token=seeded_normal((cfg.d_model,), seeds[2], INIT_SCALE),
        layers=[_init_layer(cfg, seeds[5 + per_layer * i: 5 + per_layer * (i + 1)])
                for i in range(cfg.num_layers)],
    )
    base = 5 + per_layer * cfg.num_layers
    text = TextWeights(
        token_table=seeded_normal((cfg.vocab_size, cfg.d_model), seeds[3], INIT_SCALE),
        pos=seeded_normal((cfg.max_tokens, cfg.d_model), seeds[4], INIT_SCALE),
        layers=[_init_layer(cfg, seeds[base + per_layer * i: base + per_layer * (i + 1)])
                for i in range(cfg.num_layers)],
    )
    return EncoderWeights(vision=vision, text=text)


def encoder_checksum(weights: EncoderWeights) -> str:
    """SHA-256 over every array's name and raw bytes, in fixed order."""
    h = hashlib.sha256()
    for name, arr in weights.named_arrays():
        h.update(name.encode())
        h.update(np.ascontiguousarray(arr, dtype=np.float64).tobytes())
    return h.hexdigest()


def patchify(image: np.ndarray, patch_size: int) -> np.ndarray:
    """Split an HxWx3 image into rows of flattened PxPx3 patches.

    Patches are ordered row-major over the patch grid; each row flattens its
    patch in (row, column, channel) order.
    """
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 3 or image.shape[2] != 3:
        raise ShapeError(f"expected an HxWx3 image, got shape {image.shape}")
    h, w, _ = image.shape
    if h % patch_size != 0 or w % patch_size != 0:
        raise ConfigError(
            f"image shape {image.shape} not divisible by patch size {patch_size}")
    gh, gw = h // patch_size, w // patch_size
    patches = (image.reshape(gh, patch_size, gw, patch_size, 3)
               .transpose(0, 2, 1, 3, 4)
               .reshape(gh * gw, patch_size * patch_size * 3))
    return np.ascontiguousarray(patches)


def unpatchify(patches: np.ndarray, patch_size: int, image_hw: int) -> np.ndarray:
    """Inverse of patchify for square images (round-trip checks)."""
    g = image_hw // patch_size
    return (patches.reshape(g, g, patch_size, patch_size, 3)
            .transpose(0, 2, 1, 3, 4)
            .reshape(image_hw, image_hw, 3))


def embed_patches(patches: np.ndarray, weights: VisionWeights) -> np.ndarray:
    """Project patches into the model width, add positions, prepend class token."""
    patches = np.asarray(patches, dtype=np.float64)
    d, flat = weights.w_patch.shape
    if patches.ndim != 2 or patches.shape[1] != flat:
        raise ShapeError(
            f"patch matrix {patches.shape} does not match projection {weights.w_patch.shape}")
    n = patches.shape[0]
    if weights.pos.shape != (n + 1, d):
        raise ShapeError(
            f"positional table {weights.pos.shape} does not match {n} patches + class token")
    out = np.empty((n + 1, d))
    out[0] = weights.cls_token + weights.pos[0]
    out[1:] = patches @ weights.w_patch.T + weights.pos[1:]
    return out


def _self_attention(h: np.ndarray, lw: LayerWeights, num_heads: int,
                    causal: bool) -> np.ndarray:
    length, d = h.shape
    dk = d // num_heads
    scale = 1.0 / np.sqrt(dk)
    q = h @ lw.w_q
    k = h @ lw.w_k
    v = h @ lw.w_v
    ctx = np.empty_like(h)
    mask = None
    if causal:
        # -inf above the diagonal zeroes attention to later positions.
        mask = np.triu(np.full((length, length), -np.inf), k=1)
    for head in range(num_heads):
        cols = slice(head * dk, (head + 1) * dk)
        scores = (q[:, cols] @ k[:, cols].T) * scale
        if mask is not None:
            scores = scores + mask
        attn = softmax_rows(scores)
        ctx[:, cols] = weighted_sum_rows(attn, v[:, cols])
    return ctx @ lw.w_o


def encoder_layer_forward(h: np.ndarray, lw: LayerWeights, num_heads: int,
                          causal: bool, eps: float = 1e-5) -> np.ndarray:
    """One post-LN transformer block over an L x d_model token matrix."""
    h = np.asarray(h, dtype=np.float64)
    if h.ndim != 2:
        raise ShapeError(f"encoder layer expects a 2-D token matrix, got {h.shape}")
    attended = layer_norm(_self_attention(h, lw, num_heads, causal) + h,
                          lw.ln1_gamma, lw.ln1_beta, eps)
    mlp = gelu(attended @ lw.w_mlp1) @ lw.w_mlp2
    return layer_norm(mlp + attended, lw.ln2_gamma, lw.ln2_beta, eps)


def vision_forward(image: np.ndarray, weights: EncoderWeights,
                   cfg: ModelConfig) -> tuple[np.ndarray, np.ndarray]:
    """Full vision pass: returns (class embedding, N x d_model patch features)."""
    patches = patchify(image, cfg.patch_size)
    if patches.shape[0] != cfg.n_patches:
        raise ShapeError(
            f"image yields {patches.shape[0]} patches, config expects {cfg.n_patches}")
    h = embed_patches(patches, weights.vision)
    for lw in weights.vision.layers:
        h = encoder_layer_forward(h, lw, cfg.num_heads, causal=False,
                                  eps=cfg.layer_norm_eps)
    return h[0].copy(), h[1:].copy()


def load_vocab(path: str | Path) -> dict[str, int]:
    """Vocab file: one token per line, line number = id, line 0 = OOV token."""
    lines = Path(path).read_text().splitlines()
    if not lines:
        raise DataFormatError(f"vocab file {path} is empty (needs an OOV token on line 0)")
    vocab: dict[str, int] = {}
    for idx, token in enumerate(lines):
        if token in vocab:
            raise DataFormatError(f"vocab file {path}: duplicate token '{token}' at line {idx}")
        vocab[token] = idx
    return vocab


def build_vocab(prompts: list[str], oov_token: str = "<unk>") -> dict[str, int]:
    """Deterministic vocab from prompt text: OOV first, then words by first use."""
    vocab = {oov_token: OOV_ID}
    for prompt in prompts:
        for word in _split_words(prompt):
            if word not in vocab:
                vocab[word] = len(vocab)
    return vocab


def save_vocab(vocab: dict[str, int], path: str | Path) -> None:
    ordered = sorted(vocab.items(), key=lambda kv: kv[1])
    if [i for _, i in ordered] != list(range(len(ordered))):
        raise DataFormatError("vocab ids must be a contiguous range starting at 0")
    Path(path).write_text("".join(tok + "\n" for tok, _ in ordered))


def _split_words(text: str) -> list[str]:
    # Punctuation is a delimiter and is dropped, like whitespace.
    return text.lower().translate(_PUNCT_TABLE).split()


def tokenize(text: str, vocab: dict[str, int], max_tokens: int) -> list[int]:
    """Lowercase, split on whitespace/punctuation, map words to ids.

    Unknown words map to the reserved OOV id 0; the sequence truncates to
    max_tokens. Text with no tokens at all is an error.
    """
    if not text:
        raise InputError("cannot tokenize empty text")
    words = _split_words(text)
    if not words:
        raise InputError(f"text {text!r} contains no tokens")
    return [vocab.get(w, OOV_ID) for w in words[:max_tokens]]


def text_forward(ids: list[int], weights: EncoderWeights,
                 cfg: ModelConfig) -> np.ndarray:
    """Full causal text pass over a token-id sequence; returns T x d_model."""
    t = len(ids)
    if not 1 <= t <= cfg.max_tokens:
        raise InputError(f"token count {t} outside [1, {cfg.max_tokens}]")
    vocab_size = weights.text.token_table.shape[0]
    for tid in ids:
        if not 0 <= tid < vocab_size:
            raise InputError(f"token id {tid} outside [0, {vocab_size})")
    h = weights.text.token_table[np.asarray(ids, dtype=np.intp)] + weights.text.pos[:t]
    for lw in weights.text.layers:
        h = encoder_layer_forward(h, lw, cfg.num_heads, causal=True,
                                  eps=cfg.layer_norm_eps)
    return h
