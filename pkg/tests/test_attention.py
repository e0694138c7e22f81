import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fsct.attention import (
    AttentionHeads,
    cosine_attention,
    cosine_attention_map,
    cosine_sim_mat,
    cosine_sim_vec,
    multi_head,
    softmax_attention,
    softmax_attention_map,
)
from fsct.tensor import ShapeError


def brute_cosine(A, B, eps=1e-8):
    out = np.zeros((A.shape[0], B.shape[1]))
    for i in range(A.shape[0]):
        for j in range(B.shape[1]):
            out[i, j] = cosine_sim_vec(A[i], B[:, j], eps).item()
    return out


def manual_heads(z_p, z_q, heads):
    """Split/run/concat reference written with plain numpy loops."""
    dh = heads.d_head
    P, K, V = z_p @ heads.w_q.data, z_q @ heads.w_k.data, z_q @ heads.w_v.data
    n, q = len(z_p), len(z_q)
    parts = []
    for h in range(heads.num_heads):
        sl = slice(h * dh, (h + 1) * dh)
        a = np.zeros((q, n))
        for i in range(q):
            for j in range(n):
                if heads.mode == "cosine":
                    a[i, j] = P[j, sl] @ K[i, sl] / (max(np.linalg.norm(P[j, sl]), 1e-8) * max(np.linalg.norm(K[i, sl]), 1e-8))
                else:
                    a[i, j] = P[j, sl] @ K[i, sl] / math.sqrt(dh)
            if heads.mode == "softmax":
                e = np.exp(a[i] - a[i].max())
                a[i] = e / e.sum()
        parts.append(a[:, :, None] * V[:, None, sl])
    return np.concatenate(parts, axis=-1) @ heads.w_o.data


def qkv(rng, n, q, d):
    return rng.standard_normal((1, n, d)), rng.standard_normal((q, 1, d)), rng.standard_normal((q, 1, d))


class TestCosineSimilarity:
    def test_vector_examples(self):
        assert cosine_sim_vec([1.0, 0.0], [0.0, 1.0]).item() == 0.0
        assert abs(cosine_sim_vec([2.0, 3.0], [2.0, 3.0]).item() - 1.0) < 1e-15
        assert abs(cosine_sim_vec([1.0, 2.0], [2.0, 4.0]).item() - 1.0) < 1e-15

    def test_length_mismatch(self):
        with pytest.raises(ShapeError):
            cosine_sim_vec([1.0, 2.0], [1.0, 2.0, 3.0])

    def test_matrix_identity(self):
        np.testing.assert_array_equal(cosine_sim_mat(np.eye(2), np.eye(2)).data, np.eye(2))

    def test_zero_column(self, rng):
        B = rng.standard_normal((6, 3))
        B[:, 1] = 0.0
        out = cosine_sim_mat(rng.standard_normal((4, 6)), B).data
        assert np.all(out[:, 1] == 0.0)

    def test_inner_mismatch(self):
        with pytest.raises(ShapeError):
            cosine_sim_mat(np.ones((2, 3)), np.ones((2, 3)))

    def test_matches_pairwise_loop(self, rng):
        A, B = rng.standard_normal((4, 6)), rng.standard_normal((6, 3))
        np.testing.assert_allclose(cosine_sim_mat(A, B).data, brute_cosine(A, B), atol=1e-12)


class TestSoftmaxAttention:
    def test_single_category(self, rng):
        qs, k, v = qkv(rng, 1, 4, 5)
        h, a = softmax_attention(qs, k, v)
        np.testing.assert_array_equal(a.data, np.ones((4, 1, 1)))
        np.testing.assert_allclose(h.data[:, 0, :], v[:, 0, :])

    def test_identical_prototypes_uniform(self, rng):
        qs = np.tile(rng.standard_normal((1, 1, 5)), (1, 4, 1))
        _, k, v = qkv(rng, 4, 3, 5)
        _, a = softmax_attention(qs, k, v)
        np.testing.assert_allclose(a.data, 0.25, atol=1e-15)

    def test_matches_loop(self, rng):
        qs, k, v = qkv(rng, 3, 4, 8)
        h, a = softmax_attention(qs, k, v)
        for i in range(4):
            s = np.array([qs[0, j] @ k[i, 0] / math.sqrt(8) for j in range(3)])
            w = np.exp(s - s.max()) / np.exp(s - s.max()).sum()
            for j in range(3):
                np.testing.assert_allclose(a.data[i, j, 0], w[j], atol=1e-12)
                np.testing.assert_allclose(h.data[i, j], w[j] * v[i, 0], atol=1e-12)

    def test_rows_sum_to_one(self, rng):
        qs, k, _ = qkv(rng, 5, 7, 4)
        a = softmax_attention_map(qs, k).data
        np.testing.assert_allclose(a.sum(axis=1), 1.0, atol=1e-9)
        assert np.all((a >= 0) & (a <= 1))

    def test_width_mismatch(self, rng):
        with pytest.raises(ShapeError):
            softmax_attention(np.ones((1, 2, 3)), np.ones((4, 1, 3)), np.ones((4, 1, 5)))


class TestCosineAttention:
    def test_all_equal_vectors(self, rng):
        vec = rng.standard_normal(6)
        qs = np.tile(vec, (1, 3, 1))
        k = np.tile(vec, (4, 1, 1))
        v = rng.standard_normal((4, 1, 6))
        h, a = cosine_attention(qs, k, v)
        np.testing.assert_allclose(a.data, 1.0, atol=1e-15)
        np.testing.assert_allclose(h.data, np.broadcast_to(v, (4, 3, 6)), atol=1e-15)

    def test_orthogonal(self):
        qs = np.array([[[1.0, 0.0]]])
        k = np.array([[[0.0, 1.0]]])
        h, a = cosine_attention(qs, k, np.array([[[5.0, 5.0]]]))
        assert a.data.item() == 0.0
        assert np.all(h.data == 0.0)

    def test_key_rescaling(self, rng):
        qs, k, v = qkv(rng, 3, 5, 4)
        base = cosine_attention(qs, k, v)[1].data
        scaled = cosine_attention(qs, k * rng.uniform(0.01, 100, (5, 1, 1)), v)[1].data
        np.testing.assert_allclose(scaled, base, atol=1e-9)

    def test_zero_vectors_finite(self):
        a = cosine_attention_map(np.zeros((1, 2, 3)), np.zeros((4, 1, 3))).data
        assert np.all(np.isfinite(a)) and np.all(a == 0.0)

    @settings(max_examples=100, deadline=None)
    @given(st.integers(0, 2**32 - 1), st.floats(1e-3, 1e3))
    def test_bounded(self, seed, scale):
        rng = np.random.default_rng(seed)
        qs, k, _ = qkv(rng, 5, 6, 8)
        a = cosine_attention_map(qs * scale, k).data
        assert np.all(np.abs(a) <= 1.0 + 1e-12)


class TestMultiHead:
    def test_output_shape(self, rng):
        heads = AttentionHeads(64, rng, num_heads=8)
        out, amap = multi_head(rng.standard_normal((5, 64)), rng.standard_normal((80, 64)), heads)
        assert out.shape == (80, 5, 64)
        assert amap.shape == (8, 80, 5)

    def test_single_identity_head_is_plain_cosine(self, rng):
        heads = AttentionHeads(4, rng, num_heads=1)
        for w in (heads.w_q, heads.w_k, heads.w_v, heads.w_o):
            w.data = np.eye(4)
        z_p, z_q = rng.standard_normal((3, 4)), rng.standard_normal((6, 4))
        out, _ = multi_head(z_p, z_q, heads)
        ref, _ = cosine_attention(z_p[None], z_q[:, None], z_q[:, None])
        np.testing.assert_allclose(out.data, ref.data, atol=1e-15)

    @pytest.mark.parametrize("mode", ["cosine", "softmax"])
    def test_two_heads_manual_split(self, rng, mode):
        heads = AttentionHeads(6, rng, num_heads=2, mode=mode)
        z_p, z_q = rng.standard_normal((3, 6)), rng.standard_normal((5, 6))
        np.testing.assert_allclose(multi_head(z_p, z_q, heads)[0].data, manual_heads(z_p, z_q, heads), atol=1e-12)

    def test_indivisible_width(self, rng):
        with pytest.raises(ValueError, match="divisible"):
            AttentionHeads(10, rng, num_heads=3)

    def test_explicit_head_width(self, rng):
        heads = AttentionHeads(6, rng, num_heads=4, d_head=5)
        assert heads.w_q.shape == (6, 20) and heads.w_o.shape == (20, 6)
        z_p, z_q = rng.standard_normal((2, 6)), rng.standard_normal((3, 6))
        np.testing.assert_allclose(multi_head(z_p, z_q, heads)[0].data, manual_heads(z_p, z_q, heads), atol=1e-12)

    def test_width_mismatch(self, rng):
        heads = AttentionHeads(8, rng, num_heads=2)
        with pytest.raises(ShapeError):
            multi_head(np.ones((2, 6)), np.ones((3, 8)), heads)
