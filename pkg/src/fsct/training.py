"""Episodic training, evaluation and attention heatmaps."""
from __future__ import annotations

import copy
import json
import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Callable, Optional

import numpy as np

from . import tensor as T
from .episodes import Episode, SplitDataset, episode_rng, hflip_episode, sample_episode
from .model import ModelConfig, ModelState, Prediction, predict
from .optim import AdamW
from .tensor import Tape, Tensor, backward

log = logging.getLogger(__name__)

PROB_FLOOR = 1e-12

# sub-streams of the episode generator
TRAIN_STREAM, VAL_STREAM, AUG_STREAM = 0, 1, 2


class TrainingDiverged(RuntimeError):
    def __init__(self, epoch: int, episode: int, seed: int) -> None:
        super().__init__(f"non-finite loss at epoch {epoch}, episode {episode} (episode rng = [{seed}, {TRAIN_STREAM}, {epoch}, {episode}])")
        self.epoch, self.episode, self.seed = epoch, episode, seed


def episode_loss(probs, labels) -> Tensor:
    """Mean negative log-probability of the true labels."""
    probs = T.as_tensor(probs)
    labels = np.asarray(labels, dtype=int)
    q, n = probs.shape
    onehot = np.zeros((q, n))
    onehot[np.arange(q), labels] = 1.0
    picked = T.tensor_sum(probs * onehot, axis=1)
    if np.any(picked.data <= PROB_FLOOR):
        log.warning("zero probability on %d true labels; log floored at %g",
                    int(np.sum(picked.data <= PROB_FLOOR)), PROB_FLOOR)
        picked = T.clamp_min(picked, PROB_FLOOR)
    return -T.mean(T.log(picked))


def accuracy(predicted, labels) -> float:
    predicted, labels = np.asarray(predicted), np.asarray(labels)
    return float(np.sum(predicted == labels)) / labels.size * 100.0


@dataclass
class TrainConfig:
    """Defaults are the full-scale schedule; :meth:`desk` shrinks it."""

    epochs: int = 50
    episodes_per_epoch: int = 200
    val_episodes: Optional[int] = None
    lr: float = 1e-3
    weight_decay: float = 1e-5
    seed: int = 0
    augment_flip: bool = False

    @classmethod
    def desk(cls, **overrides) -> "TrainConfig":
        return cls(**{"epochs": 5, "episodes_per_epoch": 50, **overrides})

    @property
    def n_val(self) -> int:
        return self.episodes_per_epoch if self.val_episodes is None else self.val_episodes


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_accuracy: float
    wall_time: float

    def to_json(self) -> str:
        return json.dumps(asdict(self))


def train(dataset: SplitDataset, config: TrainConfig, state: ModelState,
          on_epoch: Optional[Callable[[EpochRecord], None]] = None,
          clock: Callable[[], float] = time.perf_counter) -> tuple[ModelState, list[EpochRecord]]:
    """Episodic training with best-validation model selection.

    Returns the state of the epoch with the highest mean validation accuracy
    (earliest epoch on ties) and the per-epoch log.
    """
    model = state.model
    mc = model.config
    params = model.parameters()
    opt = state.optimizer
    if opt is None:
        opt = AdamW(params, lr=config.lr, weight_decay=config.weight_decay)
    state.optimizer = opt
    history: list[EpochRecord] = []
    if config.epochs <= 0:
        return state, history

    best_acc, best_snapshot = -math.inf, None
    for epoch in range(config.epochs):
        start = clock()
        losses = []
        for i in range(config.episodes_per_epoch):
            rng = episode_rng(config.seed, TRAIN_STREAM, epoch, i)
            ep = sample_episode(dataset.train, mc.n_way, mc.k_shot, mc.queries_per_class, rng)
            if config.augment_flip:
                ep = hflip_episode(ep, episode_rng(config.seed, AUG_STREAM, epoch, i))
            loss = train_step(ep, state, opt)
            if not math.isfinite(loss):
                raise TrainingDiverged(epoch, i, config.seed)
            losses.append(loss)
        val = evaluate(dataset.val, state, config.n_val, seed=config.seed, stream=(VAL_STREAM, epoch))
        record = EpochRecord(epoch, float(np.mean(losses)), val.mean, clock() - start)
        history.append(record)
        log.info("epoch %d loss %.4f val %.2f", epoch, record.train_loss, record.val_accuracy)
        if on_epoch is not None:
            on_epoch(record)
        if val.mean > best_acc:
            best_acc = val.mean
            best_snapshot = _snapshot(state)

    _restore(state, best_snapshot)
    state.metadata["best_val_accuracy"] = best_acc
    return state, history


def train_step(episode: Episode, state: ModelState, opt: AdamW) -> float:
    with Tape() as tape:
        out = state.model.forward(episode.support, episode.query, training=True)
        loss = episode_loss(out.probs, episode.query_labels)
    opt.zero_grad()
    backward(loss, tape)
    value = loss.item()
    if math.isfinite(value):
        opt.step()
    return value


def _snapshot(state: ModelState) -> dict:
    return {
        "model": copy.deepcopy(state.model.state_arrays()),
        "optimizer": copy.deepcopy(state.optimizer.state_arrays()) if state.optimizer else None,
    }


def _restore(state: ModelState, snap: Optional[dict]) -> None:
    if snap is None:
        return
    state.model.load_state_arrays(snap["model"])
    if snap["optimizer"] is not None:
        state.optimizer.load_state_arrays(snap["optimizer"])


@dataclass
class EpisodeLog:
    category_ids: tuple
    labels: np.ndarray
    predicted: np.ndarray
    accuracy: float


@dataclass
class EvalResult:
    mean: float
    ci95: float
    accuracies: np.ndarray
    episodes: list = field(repr=False, default_factory=list)

    def recompute(self) -> float:
        """Mean accuracy recomputed from the stored per-episode predictions."""
        return float(np.mean([accuracy(e.predicted, e.labels) for e in self.episodes]))

    def __str__(self) -> str:
        return f"{self.mean:.2f} +- {self.ci95:.2f}"


def evaluate(pool, state, num_episodes: int, seed: int = 0, stream: tuple = (),
             workers: int = 1, episode_shape: Optional[tuple] = None) -> EvalResult:
    """Mean episode accuracy (percent) with a 1.96·σ/√N interval.

    ``state`` is a :class:`ModelState` or any callable mapping an episode to
    predicted labels; a callable needs ``episode_shape=(n, k, queries_per_class)``.
    Episode ``i`` draws from ``episode_rng(seed, *stream, i)`` so the result
    does not depend on ``workers``.
    """
    if isinstance(state, ModelState):
        cfg = state.config
        n, k, qpc = cfg.n_way, cfg.k_shot, cfg.queries_per_class

        def predictor(ep):
            return predict(ep, state).labels
    else:
        if episode_shape is None:
            raise ValueError("episode_shape is required when evaluating a bare predictor")
        predictor = state
        n, k, qpc = episode_shape

    def run(i: int) -> EpisodeLog:
        ep = sample_episode(pool, n, k, qpc, episode_rng(seed, *stream, i))
        pred = np.asarray(predictor(ep))
        return EpisodeLog(ep.category_ids, ep.query_labels, pred, accuracy(pred, ep.query_labels))

    if workers > 1:
        with ThreadPoolExecutor(workers) as ex:
            logs = list(ex.map(run, range(num_episodes)))
    else:
        logs = [run(i) for i in range(num_episodes)]
    accs = np.array([e.accuracy for e in logs])
    ci = 1.96 * accs.std() / math.sqrt(len(accs)) if len(accs) else float("nan")
    return EvalResult(float(accs.mean()) if len(accs) else float("nan"), float(ci), accs, logs)


@dataclass
class Heatmap:
    per_query: np.ndarray   # q×n, head-averaged attention map
    aggregated: np.ndarray  # n×n, rows = query ground-truth category
    labels: np.ndarray
    orientation: Optional[np.ndarray] = None  # per-head signs applied before averaging


def attention_heatmap(episode: Episode, state: ModelState, orient: bool = True) -> Heatmap:
    """Head-averaged attention map and its per-category aggregate.

    With ``orient`` each cosine head is first put in its canonical sign
    (see ``FewShotCosineTransformer.head_orientation``), which uses the
    support set only.  Without it the sign of the average is arbitrary.
    """
    pred: Prediction = predict(episode, state)
    signs = state.model.head_orientation(episode.support) if orient else np.ones(len(pred.attention))
    per_query = (pred.attention * signs[:, None, None]).mean(axis=0)
    n = episode.n_way
    agg = np.stack([per_query[episode.query_labels == c].mean(axis=0) for c in range(n)])
    return Heatmap(per_query, agg, episode.query_labels, signs)


def aggregated_heatmap(pool, state: ModelState, num_episodes: int = 1, seed: int = 0,
                       orient: bool = True) -> Heatmap:
    """Heatmap of episode 0 with the aggregated matrix averaged over ``num_episodes``.

    Row/column ``c`` always means the episode's ``c``-th category, so the mean
    keeps the diagonal as same-category alignment.
    """
    if num_episodes < 1:
        raise ValueError("need at least one heatmap episode")
    cfg = state.config
    maps = []
    for i in range(num_episodes):
        ep = sample_episode(pool, cfg.n_way, cfg.k_shot, cfg.queries_per_class, episode_rng(seed, i))
        maps.append(attention_heatmap(ep, state, orient))
    first = maps[0]
    return Heatmap(first.per_query, np.mean([m.aggregated for m in maps], axis=0), first.labels, first.orientation)


@dataclass
class CompareRow:
    seed: int
    cosine: float
    softmax: float


def compare_attention(dataset: SplitDataset, model_config: ModelConfig, train_config: TrainConfig,
                      seeds, test_episodes: int = 100) -> list[CompareRow]:
    """Train both attention modes on identical seeds and test episodes."""
    rows = []
    for seed in seeds:
        accs = {}
        for mode in ("cosine", "softmax"):
            mc = ModelConfig(**{**model_config.to_dict(), "attention": mode, "seed": seed})
            tc = TrainConfig(**{**asdict(train_config), "seed": seed})
            state, _ = train(dataset, tc, ModelState.create(mc))
            accs[mode] = evaluate(dataset.test, state, test_episodes, seed=seed).mean
        rows.append(CompareRow(seed, accs["cosine"], accs["softmax"]))
    return rows
