"""Backbone, cosine-transformer block, cosine classifier and the assembled model."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Literal, Optional

import numpy as np

from . import tensor as T
from .attention import MODES, AttentionHeads, multi_head
from .episodes import Episode
from .nn import BatchNorm2d, LayerNorm, Linear, Module, uniform_fan_in
from .prototype import PrototypeWeights, proto_embed
from .tensor import ShapeError, Tensor

BACKBONES = ("conv4", "conv6", "identity")
POOLED_BLOCKS = 4


@dataclass
class ModelConfig:
    n_way: int = 5
    k_shot: int = 5
    queries_per_class: int = 16
    backbone: Literal["conv4", "conv6", "identity"] = "conv4"
    input_shape: tuple = (3, 84, 84)
    hidden_channels: int = 64
    num_heads: int = 8
    d_head: Optional[int] = None
    attention: Literal["cosine", "softmax"] = "cosine"
    prototype: Literal["learnable", "uniform"] = "learnable"
    norm: Literal["pre", "post"] = "pre"
    ffn_mult: int = 4
    classifier_scale: Optional[float] = None
    seed: int = 0

    def __post_init__(self) -> None:
        self.input_shape = tuple(int(s) for s in self.input_shape)
        if self.backbone not in BACKBONES:
            raise ValueError(f"unknown backbone {self.backbone!r}; expected one of {BACKBONES}")
        if self.attention not in MODES:
            raise ValueError(f"unknown attention {self.attention!r}; expected one of {MODES}")
        if self.prototype not in ("learnable", "uniform"):
            raise ValueError(f"unknown prototype {self.prototype!r}")
        if self.norm not in ("pre", "post"):
            raise ValueError(f"unknown norm placement {self.norm!r}")
        if self.backbone == "identity" and len(self.input_shape) != 1:
            raise ValueError(f"identity backbone takes feature vectors, got input_shape {self.input_shape}")
        if self.backbone != "identity" and len(self.input_shape) != 3:
            raise ValueError(f"conv backbones take C×H×W images, got input_shape {self.input_shape}")
        if min(self.n_way, self.k_shot, self.queries_per_class) < 1:
            raise ValueError("n_way, k_shot and queries_per_class must be positive")

    @property
    def n_query(self) -> int:
        return self.n_way * self.queries_per_class

    def to_dict(self) -> dict:
        d = asdict(self)
        d["input_shape"] = list(self.input_shape)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


class ConvBlock(Module):
    def __init__(self, c_in: int, c_out: int, rng: np.random.Generator, pool: bool) -> None:
        self.weight = uniform_fan_in(rng, (c_out, c_in, 3, 3), c_in * 9)
        self.bn = BatchNorm2d(c_out)
        self.pool = pool

    def __call__(self, x: Tensor, training: bool) -> Tensor:
        x = T.relu(self.bn(T.conv2d(x, self.weight, padding=1), training))
        return T.max_pool2d(x, 2) if self.pool else x


class Backbone(Module):
    """Conv4/Conv6 feature extractor, or the identity on feature vectors.

    Only the first four blocks pool, so Conv6 keeps the Conv4 spatial size.
    """

    def __init__(self, kind: str, input_shape: tuple, rng: np.random.Generator, channels: int = 64) -> None:
        if kind not in BACKBONES:
            raise ValueError(f"unknown backbone {kind!r}")
        self.kind = kind
        self.input_shape = tuple(input_shape)
        depth = {"conv4": 4, "conv6": 6, "identity": 0}[kind]
        blocks = []
        c_in = input_shape[0] if depth else 0
        for i in range(depth):
            blocks.append(ConvBlock(c_in, channels, rng, pool=i < POOLED_BLOCKS))
            c_in = channels
        self.blocks = blocks
        if depth:
            _, h, w = input_shape
            for i in range(min(depth, POOLED_BLOCKS)):
                h, w = h // 2, w // 2
            if h == 0 or w == 0:
                raise ValueError(f"input {input_shape} too small for {kind}")
            self.feature_dim = channels * h * w
        else:
            self.feature_dim = int(input_shape[0])

    def __call__(self, x, training: bool = False) -> Tensor:
        return extract_features(x, self, training)


def extract_features(images, backbone: Backbone, training: bool = False) -> Tensor:
    x = T.as_tensor(images)
    if tuple(x.shape[1:]) != backbone.input_shape:
        raise ShapeError(f"expected samples of shape {backbone.input_shape}, got {tuple(x.shape[1:])}")
    for block in backbone.blocks:
        x = block(x, training)
    return T.reshape(x, (x.shape[0], -1))


class TransformerBlock(Module):
    def __init__(self, d: int, rng: np.random.Generator, num_heads: int = 8, d_head: Optional[int] = None,
                 mode: str = "cosine", ffn_mult: int = 4, norm: str = "pre") -> None:
        self.d = d
        self.norm = norm
        self.ln1 = LayerNorm(d)
        self.attn = AttentionHeads(d, rng, num_heads=num_heads, d_head=d_head, mode=mode)
        self.ln2 = LayerNorm(d)
        self.ffn_in = Linear(d, ffn_mult * d, rng)
        self.ffn_out = Linear(ffn_mult * d, d, rng)

    def ffn(self, x: Tensor) -> Tensor:
        return self.ffn_out(T.gelu(self.ffn_in(x)))

    def __call__(self, z_p: Tensor, z_q: Tensor) -> tuple[Tensor, Tensor]:
        return transformer_forward(z_p, z_q, self)


def transformer_forward(z_p, z_q, block: TransformerBlock) -> tuple[Tensor, Tensor]:
    """Cross-attention from prototypes to queries plus the residual FFN.

    Returns the q×n×d output and the heads×q×n attention maps.  The residual
    adds the raw prototypes, broadcast over the query axis.
    """
    z_p, z_q = T.as_tensor(z_p), T.as_tensor(z_q)
    if z_p.ndim != 2 or z_q.ndim != 2 or z_p.shape[1] != block.d or z_q.shape[1] != block.d:
        raise ShapeError(f"expected n×{block.d} and q×{block.d} inputs, got {z_p.shape} and {z_q.shape}")
    if block.norm == "pre":
        h_att, amap = block.attn(block.ln1(z_p), block.ln1(z_q))
        x = z_p + h_att
        return x + block.ffn(block.ln2(x)), amap
    h_att, amap = block.attn(z_p, z_q)
    x = block.ln1(z_p + h_att)
    return block.ln2(x + block.ffn(x)), amap


def cosine_scores(h_out, theta_out, eps: float = 1e-8) -> Tensor:
    """Cosine similarity of every H_out[q, c, :] with the d×1 classifier weight."""
    h_out, theta_out = T.as_tensor(h_out), T.as_tensor(theta_out)
    if h_out.ndim != 3 or theta_out.shape != (h_out.shape[-1], 1):
        raise ShapeError(f"cosine classifier needs q×n×d features and d×1 weight, got {h_out.shape}, {theta_out.shape}")
    dots = T.matmul(h_out, theta_out)                        # q×n×1
    norms = T.clamp_min(T.l2_norm_rows(h_out), eps)          # q×n×1
    w_norm = T.clamp_min(T.l2_norm_rows(T.transpose(theta_out)), eps)  # 1×1
    q, n = h_out.shape[:2]
    return T.reshape(dots / (norms * w_norm), (q, n))


def cosine_classify(h_out, theta_out, scale: Optional[float] = None) -> Tensor:
    scores = cosine_scores(h_out, theta_out)
    if scale is not None:
        scores = scores * scale
    return T.softmax(scores, axis=1)


@dataclass
class ForwardOutput:
    probs: Tensor
    attention: np.ndarray  # heads×q×n
    h_out: Tensor


class FewShotCosineTransformer(Module):
    def __init__(self, config: ModelConfig) -> None:
        self.config = config
        rng = np.random.default_rng(config.seed)
        self.backbone = Backbone(config.backbone, config.input_shape, rng, config.hidden_channels)
        d = self.backbone.feature_dim
        self.prototype = (
            PrototypeWeights(config.n_way, config.k_shot, d) if config.prototype == "learnable" else None
        )
        self.block = TransformerBlock(d, rng, config.num_heads, config.d_head, config.attention,
                                      config.ffn_mult, config.norm)
        self.theta_out = uniform_fan_in(rng, (d, 1), d)

    @property
    def feature_dim(self) -> int:
        return self.backbone.feature_dim

    def check_episode(self, support: np.ndarray, query: np.ndarray) -> None:
        cfg = self.config
        if support.shape[:2] != (cfg.n_way, cfg.k_shot):
            raise ShapeError(
                f"episode is {support.shape[0]}-way {support.shape[1]}-shot, "
                f"model was built for {cfg.n_way}-way {cfg.k_shot}-shot"
            )
        if tuple(support.shape[2:]) != cfg.input_shape or tuple(query.shape[1:]) != cfg.input_shape:
            raise ShapeError(f"sample shape must be {cfg.input_shape}, got {support.shape[2:]} / {query.shape[1:]}")

    def forward(self, support: np.ndarray, query: np.ndarray, training: bool = False) -> ForwardOutput:
        support = np.asarray(support, dtype=np.float64)
        query = np.asarray(query, dtype=np.float64)
        self.check_episode(support, query)
        n, k = support.shape[:2]
        batch = np.concatenate([support.reshape((n * k,) + support.shape[2:]), query])
        feats = extract_features(batch, self.backbone, training)
        d = feats.shape[1]
        z_s = T.reshape(feats[: n * k], (n, k, d))
        z_q = feats[n * k:]
        z_p = proto_embed(z_s, self.prototype)
        h_out, amap = self.block(z_p, z_q)
        probs = cosine_classify(h_out, self.theta_out, self.config.classifier_scale)
        return ForwardOutput(probs=probs, attention=amap.data, h_out=h_out)

    __call__ = forward

    def head_orientation(self, support: np.ndarray) -> np.ndarray:
        """Per-head sign (+1/-1) making prototypes attend to themselves more than to each other.

        Cosine heads are unchanged as functions when w_q and w_v flip sign
        together, which flips that head's map; this picks the representative
        of each head whose prototype self-alignment is positive. Softmax
        heads have no such symmetry and always get +1.
        """
        support = np.asarray(support, dtype=np.float64)
        heads = self.block.attn
        if heads.mode != "cosine":
            return np.ones(heads.num_heads)
        n, k = support.shape[:2]
        feats = extract_features(support.reshape((n * k,) + support.shape[2:]), self.backbone, False)
        z_p = proto_embed(T.reshape(feats, (n, k, feats.shape[1])), self.prototype)
        if self.block.norm == "pre":
            z_p = self.block.ln1(z_p)
        _, amap = multi_head(z_p, z_p, heads)
        off = ~np.eye(n, dtype=bool)
        contrast = np.array([np.diag(m).mean() - (m[off].mean() if n > 1 else 0.0) for m in amap.data])
        return np.where(contrast < 0, -1.0, 1.0)


@dataclass
class ModelState:
    """Model parameters plus optimiser moments, the unit of checkpointing."""

    model: FewShotCosineTransformer
    optimizer: Optional[object] = None
    metadata: dict = field(default_factory=dict)

    @classmethod
    def create(cls, config: ModelConfig) -> "ModelState":
        return cls(FewShotCosineTransformer(config))

    @property
    def config(self) -> ModelConfig:
        return self.model.config


@dataclass
class Prediction:
    labels: np.ndarray
    probs: np.ndarray
    attention: np.ndarray


def predict(episode: Episode, state: ModelState) -> Prediction:
    """Eval-mode forward pass; argmax ties go to the lowest category index."""
    out = state.model.forward(episode.support, episode.query, training=False)
    probs = out.probs.data
    return Prediction(labels=probs.argmax(axis=1), probs=probs, attention=out.attention)
