"""
Tests for multi-head attention: masks, RPE bias, top-k sparsification and the
dense oracle.
"""
import numpy as np
import pytest

import tensor as T
from attention import (AttentionConfig, AttentionWeights, EmptyAttentionRowError, causal_mask,
                       scaled_dot_attention, topk_attention)
from position import PositionGrid, RpeTable, build_rpe_bias
from tensor import Tensor


@pytest.fixture
def weights(rng):
    return AttentionWeights(8, rng, std=0.3)


# =============================================================================
# Configuration
# =============================================================================

class TestAttentionConfig:

    def test_d_k(self):
        assert AttentionConfig(12, 3).d_k == 4

    @pytest.mark.parametrize("kwargs", [dict(d_model=10, heads=3), dict(d_model=8, heads=2, k=0)])
    def test_invalid(self, kwargs):
        with pytest.raises(ValueError):
            AttentionConfig(**kwargs)


# =============================================================================
# Dense attention
# =============================================================================

class TestScaledDotAttention:

    def test_two_dimensional_input(self, rng, weights):
        out = scaled_dot_attention(Tensor(rng.normal(size=(5, 8))), weights, 2)
        assert out.shape == (5, 8)

    def test_rows_sum_to_one(self, rng, weights):
        _, attention_map = scaled_dot_attention(Tensor(rng.normal(size=(2, 5, 8))), weights, 2,
                                                mask=causal_mask(5), return_weights=True)
        attn = attention_map.weights
        assert attn.shape == (2, 2, 5, 5)
        np.testing.assert_allclose(attn.sum(axis=-1), 1.0)
        assert np.all(attn[..., np.triu_indices(5, 1)[0], np.triu_indices(5, 1)[1]] == 0)

    def test_causal_output_ignores_future(self, rng, weights):
        x = rng.normal(size=(1, 6, 8))
        base = scaled_dot_attention(Tensor(x), weights, 2, mask=causal_mask(6)).data
        x[0, 4:] += 10.0
        moved = scaled_dot_attention(Tensor(x), weights, 2, mask=causal_mask(6)).data
        np.testing.assert_allclose(moved[0, :4], base[0, :4], atol=1e-12)

    def test_empty_row_raises(self, rng, weights):
        mask = np.ones((4, 4), dtype=bool)
        mask[2] = False
        with pytest.raises(EmptyAttentionRowError):
            scaled_dot_attention(Tensor(rng.normal(size=(4, 8))), weights, 2, mask=mask)

    def test_allowed_empty_row_is_zero(self, rng, weights):
        mask = np.ones((4, 4), dtype=bool)
        mask[2] = False
        _, attention_map = scaled_dot_attention(Tensor(rng.normal(size=(1, 4, 8))), weights, 2,
                                                mask=mask, allow_empty_rows=True, return_weights=True)
        attn = attention_map.weights
        assert np.all(attn[:, :, 2] == 0)
        assert not attention_map.keep[:, :, 2].any()
        np.testing.assert_allclose(attn[:, :, [0, 1, 3]].sum(axis=-1), 1.0)

    def test_matches_per_row_loop(self, rng, weights):
        x = rng.normal(size=(1, 5, 8))
        bias = rng.normal(size=(1, 2, 5, 5))
        out = scaled_dot_attention(Tensor(x), weights, 2, Tensor(bias), causal_mask(5)).data[0]

        def project(layer, values):
            return values @ layer.weight.data + layer.bias.data

        q, key, v = (project(layer, x[0]) for layer in (weights.w_q, weights.w_k, weights.w_v))
        heads = []
        for head in range(2):
            cols = slice(4 * head, 4 * head + 4)
            rows = []
            for i in range(5):
                logits = np.array([q[i, cols] @ key[j, cols] / 2.0 + bias[0, head, i, j]
                                   for j in range(i + 1)])
                p = np.exp(logits - logits.max())
                p /= p.sum()
                rows.append(sum(p[j] * v[j, cols] for j in range(i + 1)))
            heads.append(np.array(rows))
        expected = project(weights.w_o, np.concatenate(heads, axis=1))
        np.testing.assert_allclose(out, expected, rtol=1e-9, atol=1e-12)

    def test_permutation_equivariant_without_position(self, rng, weights):
        x = rng.normal(size=(1, 6, 8))
        perm = rng.permutation(6)
        out = scaled_dot_attention(Tensor(x), weights, 2).data
        permuted = scaled_dot_attention(Tensor(x[:, perm]), weights, 2).data
        np.testing.assert_allclose(permuted, out[:, perm], atol=1e-12)

    def test_underflowed_weights_still_kept(self, rng, weights):
        bias = np.zeros((1, 2, 3, 3))
        bias[..., 2] = -1e4
        _, attention_map = scaled_dot_attention(Tensor(rng.normal(size=(1, 3, 8))), weights, 2,
                                                Tensor(bias), return_weights=True)
        assert np.all(attention_map.weights[..., 2] == 0.0)
        assert attention_map.keep.all()

    def test_mask_shape_checked(self, rng, weights):
        with pytest.raises(T.ShapeError):
            scaled_dot_attention(Tensor(rng.normal(size=(4, 8))), weights, 2,
                                 mask=np.ones((3, 3), dtype=bool))

    def test_gradient(self, rng, weights):
        grid = PositionGrid(2, 2)
        table = RpeTable(1, 4, rng, std=0.3)
        target = rng.normal(size=(1, 4, 8))

        def fn(t):
            out = scaled_dot_attention(t, weights, 2, lambda q: build_rpe_bias(grid, table, q),
                                       mask=causal_mask(4))
            return (out * target).sum()

        x = Tensor(rng.normal(size=(1, 4, 8)), requires_grad=True)
        assert T.grad_check(fn, x) < 1e-4


# =============================================================================
# Top-k
# =============================================================================

class TestTopK:

    def test_large_k_matches_dense(self, rng):
        for case in range(100):
            n = int(rng.integers(2, 9))
            w = AttentionWeights(8, rng, std=0.3)
            x = Tensor(rng.normal(size=(2, n, 8)))
            mask = causal_mask(n) if case % 2 else None
            grid = PositionGrid(1, n)
            table = RpeTable(2, 4, rng, std=0.3) if case % 3 else None
            bias = (lambda q: build_rpe_bias(grid, table, q)) if table else None
            dense = scaled_dot_attention(x, w, 2, bias, mask).data
            sparse = topk_attention(x, w, 2, bias, mask, k=n + int(rng.integers(0, 3))).data
            np.testing.assert_allclose(sparse, dense, rtol=1e-6, atol=1e-12)

    @pytest.mark.parametrize("k", [1, 2, 3])
    def test_survivors_per_row(self, rng, weights, k):
        n = 5
        _, attention_map = scaled_dot_attention(Tensor(rng.normal(size=(1, n, 8))), weights, 2,
                                                mask=causal_mask(n), k=k, return_weights=True)
        survivors = attention_map.keep.sum(axis=-1)
        assert np.all(attention_map.weights[~attention_map.keep] == 0)
        expected = np.minimum(k, np.arange(1, n + 1))
        np.testing.assert_array_equal(survivors, np.broadcast_to(expected, survivors.shape))

    def test_rejects_k_zero(self, rng, weights):
        with pytest.raises(ValueError):
            topk_attention(Tensor(rng.normal(size=(3, 8))), weights, 2, k=0)
