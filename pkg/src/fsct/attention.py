"""Cosine similarity, softmax/cosine cross-attention and the multi-head wrapper.

Attention here is between category prototypes and query samples.  Prototype
queries ``q*`` have shape ``(..., 1, n, d_head)`` and query-sample keys and
values ``(..., q, 1, d_head)``, so the similarity map broadcasts to
``(..., q, n, 1)`` and the output ``map * v`` to ``(..., q, n, d_head)``.
"""
from __future__ import annotations

import math
from typing import Literal, Optional

import numpy as np

from . import tensor as T
from .nn import Module, uniform_fan_in
from .tensor import ShapeError, Tensor

EPS = 1e-8
Mode = Literal["cosine", "softmax"]
MODES = ("cosine", "softmax")


def cosine_sim_vec(a, b, eps: float = EPS) -> Tensor:
    a, b = T.as_tensor(a), T.as_tensor(b)
    if a.ndim != 1 or a.shape != b.shape:
        raise ShapeError(f"cosine_sim_vec needs equal-length vectors, got {a.shape} and {b.shape}")
    dot = (a * b).sum()
    na = T.clamp_min(T.l2_norm_rows(a), eps)
    nb = T.clamp_min(T.l2_norm_rows(b), eps)
    return dot / T.reshape(na * nb, ())


def cosine_sim_mat(A, B, eps: float = EPS) -> Tensor:
    """Entry (i, j) is the cosine similarity of row i of ``A`` and column j of ``B``."""
    A, B = T.as_tensor(A), T.as_tensor(B)
    if A.ndim != 2 or B.ndim != 2 or A.shape[1] != B.shape[0]:
        raise ShapeError(f"cosine_sim_mat needs n×k and k×m matrices, got {A.shape} and {B.shape}")
    row_norms = T.clamp_min(T.l2_norm_rows(A), eps)               # n×1
    col_norms = T.clamp_min(T.l2_norm_rows(T.transpose(B)), eps)  # m×1
    return T.matmul(A, B) / (row_norms * T.transpose(col_norms))


def _check_qkv(qs: Tensor, k: Tensor, v: Tensor) -> None:
    if not (qs.shape[-1] == k.shape[-1] == v.shape[-1]):
        raise ShapeError(f"feature width mismatch: q* {qs.shape}, k {k.shape}, v {v.shape}")
    if qs.ndim < 3 or qs.shape[-3] != 1 or k.shape[-2] != 1 or v.shape[-2] != 1:
        raise ShapeError(f"expected q* (...,1,n,d), k/v (...,q,1,d); got {qs.shape}, {k.shape}, {v.shape}")
    if k.shape != v.shape:
        raise ShapeError(f"k and v must share a shape, got {k.shape} and {v.shape}")


def softmax_attention_map(qs, k) -> Tensor:
    qs, k = T.as_tensor(qs), T.as_tensor(k)
    scores = T.matmul(qs, T.transpose(k)) / math.sqrt(qs.shape[-1])
    return T.softmax(scores, axis=-2)


def cosine_attention_map(qs, k, eps: float = EPS) -> Tensor:
    qs, k = T.as_tensor(qs), T.as_tensor(k)
    dots = T.matmul(qs, T.transpose(k))  # (..., q, n, 1)
    mq = T.clamp_min(T.l2_norm_rows(qs), eps)  # (..., 1, n, 1)
    mk = T.clamp_min(T.l2_norm_rows(k), eps)   # (..., q, 1, 1)
    return dots / (mq * mk)


def softmax_attention(qs, k, v) -> tuple[Tensor, Tensor]:
    """Scaled dot-product attention normalised over the category axis.

    Returns ``(h_a, map)`` with ``h_a[i, j] = map[i, j] * v[i]``.
    """
    qs, k, v = T.as_tensor(qs), T.as_tensor(k), T.as_tensor(v)
    _check_qkv(qs, k, v)
    amap = softmax_attention_map(qs, k)
    return amap * v, amap


def cosine_attention(qs, k, v) -> tuple[Tensor, Tensor]:
    """Cosine-similarity attention with no softmax; map entries lie in [-1, 1]."""
    qs, k, v = T.as_tensor(qs), T.as_tensor(k), T.as_tensor(v)
    _check_qkv(qs, k, v)
    amap = cosine_attention_map(qs, k)
    return amap * v, amap


ATTENTION = {"cosine": cosine_attention, "softmax": softmax_attention}


class AttentionHeads(Module):
    def __init__(
        self,
        d_model: int,
        rng: np.random.Generator,
        num_heads: int = 8,
        d_head: Optional[int] = None,
        mode: Mode = "cosine",
    ) -> None:
        if mode not in MODES:
            raise ValueError(f"unknown attention mode {mode!r}; expected one of {MODES}")
        if num_heads < 1:
            raise ValueError("num_heads must be positive")
        if d_head is None:
            if d_model % num_heads:
                raise ValueError(f"d_model={d_model} is not divisible by num_heads={num_heads}")
            d_head = d_model // num_heads
        self.d_model = d_model
        self.num_heads = num_heads
        self.d_head = d_head
        self.mode = mode
        inner = num_heads * d_head
        self.w_q = uniform_fan_in(rng, (d_model, inner), d_model)
        self.w_k = uniform_fan_in(rng, (d_model, inner), d_model)
        self.w_v = uniform_fan_in(rng, (d_model, inner), d_model)
        self.w_o = uniform_fan_in(rng, (inner, d_model), inner)

    def __call__(self, z_p: Tensor, z_q: Tensor) -> tuple[Tensor, Tensor]:
        return multi_head(z_p, z_q, self)


def _split_heads(x: Tensor, heads: int, d_head: int, prototypes: bool) -> Tensor:
    rows = x.shape[0]
    x = T.permute(T.reshape(x, (rows, heads, d_head)), (1, 0, 2))
    return T.reshape(x, (heads, 1, rows, d_head) if prototypes else (heads, rows, 1, d_head))


def multi_head(z_p, z_q, heads: AttentionHeads) -> tuple[Tensor, Tensor]:
    """Project, split into heads, attend, concatenate and project back.

    Returns the q×n×d output and the per-head attention maps (heads×q×n).
    """
    z_p, z_q = T.as_tensor(z_p), T.as_tensor(z_q)
    if z_p.ndim != 2 or z_q.ndim != 2:
        raise ShapeError(f"multi_head expects n×d prototypes and q×d queries, got {z_p.shape} and {z_q.shape}")
    if z_p.shape[1] != heads.d_model or z_q.shape[1] != heads.d_model:
        raise ShapeError(f"feature width must be {heads.d_model}, got {z_p.shape[1]} and {z_q.shape[1]}")
    h, dh = heads.num_heads, heads.d_head
    qs = _split_heads(T.matmul(z_p, heads.w_q), h, dh, prototypes=True)
    k = _split_heads(T.matmul(z_q, heads.w_k), h, dh, prototypes=False)
    v = _split_heads(T.matmul(z_q, heads.w_v), h, dh, prototypes=False)
    out, amap = ATTENTION[heads.mode](qs, k, v)  # (h, q, n, dh), (h, q, n, 1)
    q, n = out.shape[1], out.shape[2]
    merged = T.reshape(T.permute(out, (1, 2, 0, 3)), (q, n, h * dh))
    return T.matmul(merged, heads.w_o), T.reshape(amap, (h, q, n))
