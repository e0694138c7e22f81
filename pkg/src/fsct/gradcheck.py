"""Central finite-difference gradient checks.

``check_op_suite`` covers every differentiable primitive and composite on
small random inputs; ``check_model`` probes randomly chosen parameters of a
full episode loss.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np

from . import tensor as T
from .attention import AttentionHeads, cosine_attention, cosine_sim_mat, multi_head, softmax_attention
from .episodes import Episode
from .model import FewShotCosineTransformer, TransformerBlock, cosine_classify, transformer_forward
from .prototype import PrototypeWeights, proto_embed
from .tensor import Tape, Tensor, backward
from .training import episode_loss

H = 1e-5
RTOL = 1e-4
# below this gradient magnitude only an absolute check is meaningful
TINY = 1e-6
ATOL = 1e-9


@dataclass
class Probe:
    check: str
    param: str
    index: tuple
    analytic: float
    numeric: float

    @property
    def rel_err(self) -> float:
        scale = max(abs(self.analytic), abs(self.numeric))
        return abs(self.analytic - self.numeric) / scale if scale > 0 else 0.0

    @property
    def ok(self) -> bool:
        if max(abs(self.analytic), abs(self.numeric)) < TINY:
            return abs(self.analytic - self.numeric) < ATOL
        return self.rel_err < RTOL


def analytic_grads(loss_fn: Callable[[], Tensor], params: Sequence[Tensor]) -> list[np.ndarray]:
    for p in params:
        p.grad = None
    with Tape() as tape:
        loss = loss_fn()
    backward(loss, tape)
    return [np.zeros(p.shape) if p.grad is None else p.grad.copy() for p in params]


def numeric_grad(loss_fn: Callable[[], Tensor], p: Tensor, idx: tuple, h: float = H) -> float:
    orig = p.data[idx]
    p.data[idx] = orig + h
    up = loss_fn().item()
    p.data[idx] = orig - h
    down = loss_fn().item()
    p.data[idx] = orig
    return (up - down) / (2 * h)


def check(name: str, loss_fn: Callable[[], Tensor], named: Sequence[tuple[str, Tensor]],
          indices: Iterable[tuple[int, tuple]] | None = None) -> list[Probe]:
    """Compare analytic and numeric gradients at ``indices`` (all elements by default)."""
    params = [p for _, p in named]
    grads = analytic_grads(loss_fn, params)
    if indices is None:
        indices = [(i, idx) for i, p in enumerate(params) for idx in np.ndindex(p.shape)]
    probes = []
    for i, idx in indices:
        pname, p = named[i]
        probes.append(Probe(name, pname, tuple(int(j) for j in idx), float(grads[i][idx]),
                            numeric_grad(loss_fn, p, idx)))
    return probes


def _weighted_sum(out: Tensor, weights: np.ndarray) -> Tensor:
    return (out * weights).sum()


def _case(rng, name, fn, *shapes, positive=False):
    lo, hi = (0.5, 2.0) if positive else (-2.0, 2.0)
    inputs = [T.Tensor(rng.uniform(lo, hi, size=s), requires_grad=True) for s in shapes]
    probe = fn(*inputs)
    weights = rng.uniform(-1.0, 1.0, size=probe.shape)
    return name, (lambda: _weighted_sum(fn(*inputs), weights)), [(f"x{i}", x) for i, x in enumerate(inputs)]


def op_cases(rng: np.random.Generator) -> list:
    heads = AttentionHeads(8, rng, num_heads=2, mode="cosine")
    heads_soft = AttentionHeads(8, rng, num_heads=2, mode="softmax")
    block = TransformerBlock(8, rng, num_heads=2)
    block_post = TransformerBlock(8, rng, num_heads=2, norm="post")
    protos = PrototypeWeights(3, 2, 4)
    protos.theta.data = rng.uniform(-1, 1, size=protos.shape)
    labels = rng.integers(0, 3, size=4)

    cases = [
        _case(rng, "add", lambda a, b: a + b, (3, 4), (4,)),
        _case(rng, "sub", lambda a, b: a - b, (3, 1), (3, 4)),
        _case(rng, "mul", lambda a, b: a * b, (2, 3, 4), (3, 1)),
        _case(rng, "div", lambda a, b: a / b, (3, 4), (3, 4), positive=True),
        _case(rng, "scalar_ops", lambda a: (2.5 - a) * 3.0 + 1.0 / (a + 3.0), (3, 4)),
        _case(rng, "neg", lambda a: -a, (5,)),
        _case(rng, "power", lambda a: a ** 3, (3, 4)),
        _case(rng, "exp", T.exp, (3, 4)),
        _case(rng, "log", T.log, (3, 4), positive=True),
        _case(rng, "sqrt", T.sqrt, (3, 4), positive=True),
        _case(rng, "clamp_min", lambda a: T.clamp_min(a, 0.1), (3, 4)),
        _case(rng, "relu", T.relu, (3, 4)),
        _case(rng, "gelu", T.gelu, (3, 4)),
        _case(rng, "sum", lambda a: T.tensor_sum(a, axis=1), (3, 4, 2)),
        _case(rng, "mean", lambda a: T.mean(a, axis=(0, 2), keepdims=True), (3, 4, 2)),
        _case(rng, "softmax", lambda a: T.softmax(a, axis=1), (3, 4, 2)),
        _case(rng, "l2_norm_rows", T.l2_norm_rows, (3, 4)),
        _case(rng, "layer_norm", lambda x, g, b: T.layer_norm(x, g, b), (3, 5), (5,), (5,)),
        _case(rng, "reshape", lambda a: T.reshape(a, (4, 3)), (3, 4)),
        _case(rng, "permute", lambda a: T.permute(a, (2, 0, 1)), (2, 3, 4)),
        _case(rng, "transpose", T.transpose, (2, 3, 4)),
        _case(rng, "concat", lambda a, b: T.concat([a, b], axis=1), (2, 3), (2, 2)),
        _case(rng, "index", lambda a: a[1:, ::2] * a[0, 0], (3, 4)),
        _case(rng, "matmul", T.matmul, (1, 3, 4), (5, 4, 2)),
        _case(rng, "conv2d", lambda x, w, b: T.conv2d(x, w, b), (2, 2, 5, 5), (3, 2, 3, 3), (3,)),
        _case(rng, "max_pool2d", T.max_pool2d, (2, 2, 5, 4)),
        _case(rng, "cosine_sim_mat", cosine_sim_mat, (4, 6), (6, 3)),
        _case(rng, "cosine_attention", lambda q, k, v: cosine_attention(q, k, v)[0], (1, 3, 4), (5, 1, 4), (5, 1, 4)),
        _case(rng, "softmax_attention", lambda q, k, v: softmax_attention(q, k, v)[0], (1, 3, 4), (5, 1, 4), (5, 1, 4)),
        _case(rng, "cosine_classify", lambda h, w: cosine_classify(h, w), (4, 3, 6), (6, 1)),
    ]

    zp = T.Tensor(rng.uniform(-2, 2, (3, 8)), requires_grad=True)
    zq = T.Tensor(rng.uniform(-2, 2, (5, 8)), requires_grad=True)
    wts = rng.uniform(-1, 1, (5, 3, 8))
    for label, hd in (("multi_head[cosine]", heads), ("multi_head[softmax]", heads_soft)):
        cases.append((label, (lambda hd=hd: _weighted_sum(multi_head(zp, zq, hd)[0], wts)),
                      [("z_p", zp), ("z_q", zq)] + list(hd.named_parameters())))
    for label, blk in (("transformer[pre]", block), ("transformer[post]", block_post)):
        cases.append((label, (lambda blk=blk: _weighted_sum(transformer_forward(zp, zq, blk)[0], wts)),
                      [("z_p", zp), ("z_q", zq)] + list(blk.named_parameters())))
    zs = T.Tensor(rng.uniform(-2, 2, (3, 2, 4)), requires_grad=True)
    pw = rng.uniform(-1, 1, (3, 4))
    cases.append(("proto_embed", lambda: _weighted_sum(proto_embed(zs, protos), pw),
                  [("z_s", zs), ("theta_p", protos.theta)]))
    logits = T.Tensor(rng.uniform(-2, 2, (4, 3)), requires_grad=True)

    def loss_case():
        return episode_loss(T.softmax(logits, axis=1), labels)

    cases.append(("episode_loss", loss_case, [("logits", logits)]))
    return cases


def check_op_suite(seed: int = 0) -> list[Probe]:
    rng = np.random.default_rng(seed)
    probes = []
    for name, fn, named in op_cases(rng):
        probes.extend(check(name, fn, named))
    return probes


def param_group(name: str) -> str:
    parts = name.split(".")
    if parts[0] != "block":
        return parts[0]
    return "block." + ("attn" if parts[1] == "attn" else "ffn" if parts[1].startswith("ffn") else "ln")


def check_model(model: FewShotCosineTransformer, episode: Episode, probes_per_group: int = 10,
                seed: int = 0, training: bool = True) -> list[Probe]:
    """Probe ``probes_per_group`` random parameter entries in every parameter group."""
    rng = np.random.default_rng(seed)
    named = list(model.named_parameters())

    def loss_fn():
        out = model.forward(episode.support, episode.query, training=training)
        return episode_loss(out.probs, episode.query_labels)

    groups: dict[str, list[int]] = {}
    for i, (name, _) in enumerate(named):
        groups.setdefault(param_group(name), []).append(i)
    indices = []
    for members in groups.values():
        sizes = np.array([named[i][1].size for i in members], dtype=float)
        for _ in range(probes_per_group):
            i = members[rng.choice(len(members), p=sizes / sizes.sum())]
            flat = rng.integers(named[i][1].size)
            indices.append((i, np.unravel_index(flat, named[i][1].shape)))
    buffers = {k: v.copy() for k, v in model.named_buffers()}
    try:
        return check("model", loss_fn, named, indices)
    finally:
        model.load_state_arrays({**{k: p.data for k, p in named}, **buffers})


def summarize(probes: Sequence[Probe]) -> dict[str, tuple[int, int, float]]:
    """check name -> (passed, total, worst relative error)."""
    out: dict[str, list] = {}
    for p in probes:
        rec = out.setdefault(p.check, [0, 0, 0.0])
        rec[0] += p.ok
        rec[1] += 1
        if max(abs(p.analytic), abs(p.numeric)) >= TINY:
            rec[2] = max(rec[2], p.rel_err)
    return {k: tuple(v) for k, v in out.items()}
