"""Dataset manifests, file loaders and the synthetic cluster generator."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .episodes import SPLITS, DatasetError, SplitDataset

IMAGE_SUFFIXES = (".png", ".ppm", ".pgm")


@dataclass
class SyntheticSpec:
    """Isotropic Gaussian clusters, one per category.

    Category means are pairwise ``separation`` apart when the sample
    dimension allows a regular simplex (dim >= total categories); otherwise
    they are Gaussian with matching expected pairwise distance.  ``offset``
    is the norm of a shared non-negative component added to every mean,
    mimicking the common mean of post-ReLU backbone features; it does not
    change any between-category distance.
    """

    num_train: int = 64
    num_val: int = 16
    num_test: int = 20
    samples_per_category: int = 40
    feature_dim: Optional[int] = 64
    image_shape: Optional[tuple] = None
    separation: float = 10.0
    std: float = 1.0
    offset: float = 0.0
    seed: int = 0

    def __post_init__(self) -> None:
        if self.image_shape is not None:
            self.image_shape = tuple(int(s) for s in self.image_shape)
            self.feature_dim = None
        if (self.feature_dim is None) == (self.image_shape is None):
            raise ValueError("exactly one of feature_dim / image_shape must be set")
        if self.std <= 0 or self.separation < 0:
            raise ValueError("std must be positive and separation non-negative")
        if self.offset < 0:
            raise ValueError("offset must be non-negative")
        if min(self.num_train, self.num_val, self.num_test, self.samples_per_category) < 1:
            raise ValueError("category and sample counts must be positive")

    @property
    def sample_shape(self) -> tuple:
        return self.image_shape if self.image_shape is not None else (self.feature_dim,)

    def to_dict(self) -> dict:
        d = asdict(self)
        if self.image_shape is not None:
            d["image_shape"] = list(self.image_shape)
        return d


# named generator settings; the shared offset and the many training categories
# keep a cosine model off the chance plateau (see SyntheticSpec)
PRESETS = {
    "separable": dict(num_train=1024, samples_per_category=30, feature_dim=64, separation=10.0, offset=10.0),
    "moderate": dict(num_train=1024, samples_per_category=30, feature_dim=64, separation=3.0, offset=10.0),
}


def synthetic_spec(source: str, **overrides) -> SyntheticSpec:
    """A preset name or the path of a JSON file with SyntheticSpec fields."""
    if source in PRESETS:
        fields = dict(PRESETS[source])
    else:
        try:
            fields = json.loads(Path(source).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise DatasetError(f"synthetic spec {source!r} is neither a preset {sorted(PRESETS)} nor a readable JSON file: {exc}") from None
    fields.update(overrides)
    try:
        return SyntheticSpec(**fields)
    except TypeError as exc:
        raise DatasetError(f"bad synthetic spec {source!r}: {exc}") from None


def _category_means(count: int, dim: int, separation: float, rng: np.random.Generator) -> np.ndarray:
    if dim >= count:
        basis, _ = np.linalg.qr(rng.standard_normal((dim, count)))
        return basis.T * (separation / np.sqrt(2.0))
    return rng.normal(0.0, separation / np.sqrt(2.0 * dim), size=(count, dim))


def generate_synthetic(spec: SyntheticSpec) -> SplitDataset:
    rng = np.random.default_rng(spec.seed)
    counts = {"train": spec.num_train, "val": spec.num_val, "test": spec.num_test}
    dim = int(np.prod(spec.sample_shape))
    means = _category_means(sum(counts.values()), dim, spec.separation, rng)
    if spec.offset:
        shared = np.abs(rng.standard_normal(dim))
        means = means + shared * (spec.offset / np.linalg.norm(shared))
    pools: dict = {}
    c = 0
    for split in SPLITS:
        pool = {}
        for j in range(counts[split]):
            noise = rng.normal(0.0, spec.std, size=(spec.samples_per_category, dim))
            pool[f"{split}_{j:03d}"] = (means[c] + noise).reshape((-1,) + spec.sample_shape)
            c += 1
        pools[split] = pool
    return SplitDataset(**pools)


@dataclass
class DatasetManifest:
    """Describes where a dataset lives and how its categories are split.

    ``format`` is ``image-folder`` (``root/<category>/*.png|ppm``),
    ``feature-table`` (delimited rows ``category, f1, ..., fd`` at ``path``)
    or ``synthetic`` (``synthetic`` holds :class:`SyntheticSpec` fields).
    """

    format: str
    splits: dict = field(default_factory=dict)
    root: Optional[str] = None
    path: Optional[str] = None
    delimiter: str = ","
    image_size: Optional[tuple] = None  # (H, W)
    channels: int = 3
    mean: Optional[list] = None
    std: Optional[list] = None
    synthetic: Optional[dict] = None
    base_dir: str = "."

    @classmethod
    def from_file(cls, path) -> "DatasetManifest":
        path = Path(path)
        raw = json.loads(path.read_text())
        raw.setdefault("base_dir", str(path.parent))
        return cls(**raw)

    def resolve(self, p: str) -> Path:
        p = Path(p)
        return p if p.is_absolute() else Path(self.base_dir) / p

    def check_splits(self) -> None:
        owner: dict = {}
        clashes = set()
        for split, cats in self.splits.items():
            if split not in SPLITS:
                raise DatasetError(f"unknown split {split!r} in manifest")
            for cat in cats:
                if cat in owner:
                    clashes.add(cat)
                owner[cat] = split
        if clashes:
            raise DatasetError(f"categories assigned to more than one split: {sorted(clashes)}")


def load_dataset(manifest: DatasetManifest) -> SplitDataset:
    if manifest.format == "synthetic":
        return generate_synthetic(SyntheticSpec(**(manifest.synthetic or {})))
    manifest.check_splits()
    if manifest.format == "feature-table":
        by_category = read_feature_table(manifest.resolve(manifest.path), manifest.delimiter)
    elif manifest.format == "image-folder":
        by_category = _read_image_folder(manifest)
    else:
        raise DatasetError(f"unknown dataset format {manifest.format!r}")
    unassigned = sorted(set(by_category) - {c for cats in manifest.splits.values() for c in cats})
    if unassigned:
        raise DatasetError(f"categories not assigned to any split: {unassigned}")
    pools = {}
    for split in SPLITS:
        pool = {}
        for cat in manifest.splits.get(split, []):
            if cat not in by_category:
                raise DatasetError(f"category {cat!r} ({split}) has no samples")
            pool[cat] = by_category[cat]
        pools[split] = pool
    return SplitDataset(**pools)


def read_feature_table(path: Path, delimiter: str = ",") -> dict:
    rows: dict = {}
    width = None
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            cells = [c.strip() for c in line.split(delimiter)]
            if width is None:
                width = len(cells)
            elif len(cells) != width:
                raise DatasetError(f"{path}:{lineno}: expected {width} columns, found {len(cells)}")
            try:
                values = [float(c) for c in cells[1:]]
            except ValueError as exc:
                raise DatasetError(f"{path}:{lineno}: {exc}") from None
            rows.setdefault(cells[0], []).append(values)
    if width is None or width < 2:
        raise DatasetError(f"{path}: no feature rows")
    return {cat: np.array(v, dtype=np.float64) for cat, v in sorted(rows.items())}


def _read_image_folder(manifest: DatasetManifest) -> dict:
    from PIL import Image

    if manifest.image_size is None:
        raise DatasetError("image-folder manifests need image_size")
    h, w = (int(s) for s in manifest.image_size)
    c = manifest.channels
    mean = np.asarray(manifest.mean if manifest.mean is not None else [0.0] * c, dtype=np.float64)
    std = np.asarray(manifest.std if manifest.std is not None else [1.0] * c, dtype=np.float64)
    root = manifest.resolve(manifest.root or ".")
    out = {}
    for cat in sorted(c for cats in manifest.splits.values() for c in cats):
        folder = root / cat
        if not folder.is_dir():
            raise DatasetError(f"missing category directory {folder}")
        files = sorted(p for p in folder.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)
        if not files:
            raise DatasetError(f"no PNG/PPM images in {folder}")
        images = []
        for f in files:
            try:
                with Image.open(f) as img:
                    img = img.convert("L" if c == 1 else "RGB").resize((w, h), Image.BILINEAR)
                    arr = np.asarray(img, dtype=np.float64) / 255.0
            except (OSError, ValueError) as exc:
                raise DatasetError(f"cannot decode {f}: {exc}") from None
            arr = arr[None] if c == 1 else arr.transpose(2, 0, 1)
            images.append((arr - mean[:, None, None]) / std[:, None, None])
        out[cat] = np.stack(images)
    return out
