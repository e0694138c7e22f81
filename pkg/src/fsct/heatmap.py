"""Heatmap export as full-precision CSV or plain-text (P2) PGM."""
from __future__ import annotations

from pathlib import Path

import numpy as np


def export_heatmap(matrix, path, fmt: str = "csv") -> Path:
    m = np.asarray(matrix, dtype=np.float64)
    if m.ndim != 2 or not np.all(np.isfinite(m)):
        raise ValueError("heatmap must be a finite 2-D matrix")
    path = Path(path)
    if fmt == "csv":
        text = "\n".join(",".join(repr(float(v)) for v in row) for row in m) + "\n"
    elif fmt == "pgm":
        text = pgm_text(m)
    else:
        raise ValueError(f"unknown heatmap format {fmt!r}; expected csv or pgm")
    try:
        path.write_text(text)
    except OSError as exc:
        raise OSError(f"cannot write heatmap to {path}: {exc}") from exc
    return path


def to_gray(m: np.ndarray) -> np.ndarray:
    """Affine map of [min, max] onto 0..255; a constant matrix maps to 128."""
    lo, hi = m.min(), m.max()
    if hi == lo:
        return np.full(m.shape, 128, dtype=int)
    return np.rint((m - lo) / (hi - lo) * 255.0).astype(int)


def pgm_text(m: np.ndarray) -> str:
    rows, cols = m.shape
    gray = to_gray(m)
    body = "\n".join(" ".join(str(v) for v in row) for row in gray)
    return f"P2\n{cols} {rows}\n255\n{body}\n"


def read_csv(path) -> np.ndarray:
    return np.loadtxt(path, delimiter=",", ndmin=2)


def read_pgm(path) -> np.ndarray:
    tokens = [t for line in Path(path).read_text().splitlines()
              if not line.startswith("#") for t in line.split()]
    if tokens[0] != "P2":
        raise ValueError(f"{path}: not a plain PGM")
    cols, rows = int(tokens[1]), int(tokens[2])
    return np.array(tokens[4:4 + rows * cols], dtype=int).reshape(rows, cols)
