"""Split datasets and n-way k-shot episode sampling."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

SPLITS = ("train", "val", "test")

Pool = Mapping[str, np.ndarray]


class DatasetError(ValueError):
    """Dataset or pool does not satisfy the episode/split requirements."""


@dataclass
class Episode:
    """One few-shot task.

    ``support`` is n×k×sample_shape, ``query`` is q×sample_shape.  Labels are
    episode-local (0..n-1); ``category_ids`` maps them back to the source
    categories.
    """

    support: np.ndarray
    query: np.ndarray
    query_labels: np.ndarray
    category_ids: tuple

    @property
    def n_way(self) -> int:
        return self.support.shape[0]

    @property
    def k_shot(self) -> int:
        return self.support.shape[1]

    @property
    def n_query(self) -> int:
        return self.query.shape[0]

    @property
    def support_labels(self) -> np.ndarray:
        return np.repeat(np.arange(self.n_way), self.k_shot).reshape(self.n_way, self.k_shot)


@dataclass
class SplitDataset:
    """Train/val/test category pools; category → array of samples (first axis)."""

    train: dict = field(default_factory=dict)
    val: dict = field(default_factory=dict)
    test: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        self.validate()

    def validate(self) -> None:
        seen: dict = {}
        clashes = set()
        for split in SPLITS:
            for cat in getattr(self, split):
                if cat in seen and seen[cat] != split:
                    clashes.add(cat)
                seen[cat] = split
        if clashes:
            raise DatasetError(f"categories appear in more than one split: {sorted(map(str, clashes))}")

    def pool(self, split: str) -> dict:
        if split not in SPLITS:
            raise DatasetError(f"unknown split {split!r}")
        return getattr(self, split)

    @property
    def sample_shape(self) -> tuple:
        for split in SPLITS:
            for samples in getattr(self, split).values():
                return tuple(samples.shape[1:])
        raise DatasetError("dataset is empty")

    def counts(self) -> dict:
        return {split: {c: len(s) for c, s in getattr(self, split).items()} for split in SPLITS}


def episode_rng(seed: int, *stream: int) -> np.random.Generator:
    """Independent generator for one (seed, stream...) coordinate.

    Deriving each episode's generator from its index keeps parallel and
    serial runs identical.
    """
    return np.random.default_rng([int(seed), *map(int, stream)])


def sample_episode(pool: Pool, n_way: int, k_shot: int, queries_per_class: int,
                   rng: np.random.Generator) -> Episode:
    categories = sorted(pool)
    if len(categories) < n_way:
        raise DatasetError(f"pool has {len(categories)} categories, need {n_way}")
    need = k_shot + queries_per_class
    short = {c: len(pool[c]) for c in categories if len(pool[c]) < need}
    if short:
        raise DatasetError(f"categories with fewer than {need} samples: {short}")

    chosen = rng.choice(len(categories), size=n_way, replace=False)
    support, query = [], []
    for idx in chosen:
        samples = pool[categories[idx]]
        picks = rng.choice(len(samples), size=need, replace=False)
        support.append(samples[picks[:k_shot]])
        query.append(samples[picks[k_shot:]])
    return Episode(
        support=np.stack(support).astype(np.float64),
        query=np.concatenate(query).astype(np.float64),
        query_labels=np.repeat(np.arange(n_way), queries_per_class),
        category_ids=tuple(categories[i] for i in chosen),
    )


def hflip_episode(episode: Episode, rng: np.random.Generator, p: float = 0.5) -> Episode:
    """Randomly mirror image samples left-right; feature vectors pass through."""
    if episode.query.ndim < 4:
        return episode
    support = episode.support.copy()
    query = episode.query.copy()
    flip_s = rng.random(support.shape[:2]) < p
    flip_q = rng.random(query.shape[0]) < p
    support[flip_s] = support[flip_s][..., ::-1]
    query[flip_q] = query[flip_q][..., ::-1]
    return Episode(support, query, episode.query_labels, episode.category_ids)


def nearest_centroid_predict(episode: Episode) -> np.ndarray:
    """Euclidean nearest-class-mean labels on raw samples."""
    n, k = episode.support.shape[:2]
    centroids = episode.support.reshape(n, k, -1).mean(axis=1)
    flat = episode.query.reshape(episode.n_query, -1)
    d2 = ((flat[:, None, :] - centroids[None]) ** 2).sum(-1)
    return d2.argmin(axis=1)
