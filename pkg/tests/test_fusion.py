import math

import numpy as np
import pytest

from pedattr.config import AttributeSpec, ModelConfig
from pedattr.errors import ConfigError, NumericError, ShapeError
from pedattr.fusion import (FusionBlockWeights, cosine_align, cross_attention_forward,
                            cross_attention_with_cache, fuse_all, init_fusion_block)
from pedattr.tensor import layer_norm


def cfg_for(d_model, num_heads, attributes=()):
    return ModelConfig(d_model=d_model, num_layers=1, num_heads=num_heads,
                       patch_size=4, image_hw=8, max_tokens=8, vocab_size=32,
                       attributes=attributes)


def random_block(rng, d, scale=0.5):
    return FusionBlockWeights(
        w_q=rng.standard_normal((d, d)) * scale,
        w_k=rng.standard_normal((d, d)) * scale,
        w_v=rng.standard_normal((d, d)) * scale,
        w_o=rng.standard_normal((d, d)) * scale,
        ln_gamma=rng.uniform(0.5, 1.5, d),
        ln_beta=rng.standard_normal(d) * 0.1)


def oracle_cross_attention(f_img, f_text, w, eps):
    """Loop-based single-head oracle for N x d queries over T x d keys/values."""
    n, d = f_img.shape
    t = f_text.shape[0]
    q = [[sum(f_img[i][a] * w.w_q[a][j] for a in range(d)) for j in range(d)]
         for i in range(n)]
    k = [[sum(f_text[i][a] * w.w_k[a][j] for a in range(d)) for j in range(d)]
         for i in range(t)]
    v = [[sum(f_text[i][a] * w.w_v[a][j] for a in range(d)) for j in range(d)]
         for i in range(t)]
    scale = 1.0 / math.sqrt(d)
    ctx = []
    for i in range(n):
        scores = [scale * sum(q[i][a] * k[j][a] for a in range(d)) for j in range(t)]
        peak = max(scores)
        weights = [math.exp(s - peak) for s in scores]
        total = sum(weights)
        weights = [x / total for x in weights]
        ctx.append([sum(weights[j] * v[j][a] for j in range(t)) for a in range(d)])
    attended = [[sum(ctx[i][a] * w.w_o[a][j] for a in range(d)) for j in range(d)]
                for i in range(n)]
    out = []
    for i in range(n):
        row = [attended[i][j] + f_img[i][j] for j in range(d)]
        mu = sum(row) / d
        var = sum((x - mu) ** 2 for x in row) / d
        out.append([w.ln_gamma[j] * (row[j] - mu) / math.sqrt(var + eps) + w.ln_beta[j]
                    for j in range(d)])
    return np.array(out)


class TestCosineAlign:
    def test_identical_vectors_score_one(self):
        v = np.array([1.0, 2.0, -1.0])
        score = cosine_align(v, np.vstack([v, v]), attribute_id=3)
        assert score.attribute_id == 3
        assert abs(score.score - 1.0) < 1e-12

    def test_orthogonal_vectors_score_zero(self):
        score = cosine_align(np.array([1.0, 0.0]), np.array([[0.0, 2.0]]))
        assert abs(score.score) < 1e-12

    def test_antiparallel_scores_minus_one(self):
        v = np.array([0.5, -2.0, 3.0])
        score = cosine_align(v, -v[None, :])
        assert abs(score.score + 1.0) < 1e-12

    def test_zero_norm_raises_with_attribute_id(self):
        with pytest.raises(NumericError) as exc:
            cosine_align(np.zeros(3), np.ones((2, 3)), attribute_id=7)
        assert "7" in str(exc.value)

    def test_score_uses_mean_pooled_text(self):
        rng = np.random.default_rng(0)
        cls_embed = rng.standard_normal(4)
        f_text = rng.standard_normal((3, 4))
        pooled = f_text.mean(axis=0)
        expected = cls_embed @ pooled / (np.linalg.norm(cls_embed) * np.linalg.norm(pooled))
        assert abs(cosine_align(cls_embed, f_text).score - expected) < 1e-12


class TestCrossAttention:
    def test_single_key_collapses_to_projected_value(self):
        rng = np.random.default_rng(1)
        cfg = cfg_for(8, 2)
        w = random_block(rng, 8)
        f_img = rng.standard_normal((4, 8))
        f_text = rng.standard_normal((1, 8))
        fused, cache = cross_attention_with_cache(f_img, f_text, w, cfg)
        v = f_text @ w.w_v
        assert np.allclose(cache.attn, 1.0, atol=1e-15)
        assert np.allclose(cache.concat, np.tile(v, (4, 1)), atol=1e-12)
        expected = layer_norm(v @ w.w_o + f_img, w.ln_gamma, w.ln_beta,
                              cfg.layer_norm_eps)
        assert np.allclose(fused, expected, atol=1e-12)

    def test_zero_weights_reduce_to_normalized_residual(self):
        cfg = cfg_for(8, 2)
        d = 8
        w = FusionBlockWeights(w_q=np.zeros((d, d)), w_k=np.zeros((d, d)),
                               w_v=np.zeros((d, d)), w_o=np.zeros((d, d)),
                               ln_gamma=np.ones(d), ln_beta=np.zeros(d))
        rng = np.random.default_rng(2)
        f_img = rng.standard_normal((3, d))
        fused = cross_attention_forward(f_img, rng.standard_normal((2, d)), w, cfg)
        assert np.allclose(fused, layer_norm(f_img, w.ln_gamma, w.ln_beta,
                                             cfg.layer_norm_eps), atol=1e-12)

    def test_matches_stepwise_oracle(self):
        rng = np.random.default_rng(3)
        cfg = cfg_for(4, 1)
        w = random_block(rng, 4)
        f_img = rng.standard_normal((2, 4))
        f_text = rng.standard_normal((2, 4))
        got = cross_attention_forward(f_img, f_text, w, cfg)
        want = oracle_cross_attention(f_img, f_text, w, cfg.layer_norm_eps)
        assert np.allclose(got, want, atol=1e-10)

    def test_output_shape_matches_f_img(self):
        rng = np.random.default_rng(4)
        for n, t, d, heads in ((1, 1, 4, 1), (5, 3, 8, 4), (7, 2, 16, 2)):
            cfg = cfg_for(d, heads)
            w = random_block(rng, d)
            f_img = rng.standard_normal((n, d))
            fused = cross_attention_forward(f_img, rng.standard_normal((t, d)), w, cfg)
            assert fused.shape == f_img.shape

    def test_attention_rows_sum_to_one_property(self):
        rng = np.random.default_rng(5)
        cases = 0
        while cases < 1000:
            d, heads = 8, 2
            cfg = cfg_for(d, heads)
            w = random_block(rng, d, scale=rng.uniform(0.1, 2.0))
            n = int(rng.integers(1, 6))
            t = int(rng.integers(1, 6))
            f_img = rng.standard_normal((n, d)) * rng.uniform(0.5, 3.0)
            f_text = rng.standard_normal((t, d)) * rng.uniform(0.5, 3.0)
            _, cache = cross_attention_with_cache(f_img, f_text, w, cfg)
            assert np.all(cache.attn >= 0.0)
            assert np.allclose(cache.attn.sum(axis=-1), 1.0, atol=1e-12)
            cases += cache.attn.shape[0] * n
        assert cases >= 1000

    def test_scale_denominator(self):
        paper = ModelConfig(d_model=768, num_layers=1, num_heads=8, patch_size=16,
                            image_hw=224, max_tokens=16, vocab_size=512)
        assert paper.head_dim == 96
        assert paper.attn_scale_denominator == math.sqrt(96.0)
        desk = cfg_for(8, 2)
        assert desk.attn_scale_denominator == math.sqrt(4.0)

    def test_shape_mismatch(self):
        cfg = cfg_for(8, 2)
        w = random_block(np.random.default_rng(6), 8)
        with pytest.raises(ShapeError):
            cross_attention_forward(np.zeros((4, 6)), np.zeros((2, 8)), w, cfg)


class TestFuseAll:
    def _setup(self, n_attrs, seed=7):
        attrs = tuple(AttributeSpec(f"a{i}", f"prompt {i}?", 2) for i in range(n_attrs))
        cfg = cfg_for(8, 2, attrs)
        rng = np.random.default_rng(seed)
        blocks = [random_block(rng, 8) for _ in range(n_attrs)]
        f_img = rng.standard_normal((4, 8))
        texts = [rng.standard_normal((3, 8)) for _ in range(n_attrs)]
        return cfg, blocks, f_img, texts

    def test_single_attribute_matches_direct_call(self):
        cfg, blocks, f_img, texts = self._setup(1)
        out = fuse_all(f_img, texts, blocks, cfg)
        assert len(out) == 1
        assert np.array_equal(out[0], cross_attention_forward(f_img, texts[0],
                                                              blocks[0], cfg))

    def test_swapping_blocks_and_prompts_swaps_outputs(self):
        cfg, blocks, f_img, texts = self._setup(2)
        out = fuse_all(f_img, texts, blocks, cfg)
        swapped = fuse_all(f_img, texts[::-1], blocks[::-1], cfg)
        assert np.array_equal(swapped[0], out[1])
        assert np.array_equal(swapped[1], out[0])

    def test_perturbing_one_block_leaves_others_bitwise_unchanged(self):
        cfg, blocks, f_img, texts = self._setup(3)
        base = fuse_all(f_img, texts, blocks, cfg)
        blocks[0].w_q += 0.25
        out = fuse_all(f_img, texts, blocks, cfg)
        assert np.any(out[0] != base[0])
        assert np.array_equal(out[1], base[1])
        assert np.array_equal(out[2], base[2])

    def test_count_mismatch(self):
        cfg, blocks, f_img, texts = self._setup(2)
        with pytest.raises(ConfigError):
            fuse_all(f_img, texts[:1], blocks, cfg)
