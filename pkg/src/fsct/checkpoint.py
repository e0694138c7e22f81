"""Versioned binary checkpoints.

Layout::

    b"FSCTCKPT" | uint64 LE header length | UTF-8 JSON header | payload

The header carries the format version, the model config, optimiser
hyper-parameters, free-form metadata and, for each named array, its shape
and byte offset into the payload.  Arrays are stored as little-endian
float64, so a round trip is lossless.
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .model import FewShotCosineTransformer, ModelConfig, ModelState
from .optim import AdamW

MAGIC = b"FSCTCKPT"
VERSION = 1


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, state: ModelState) -> Path:
    arrays = {f"model/{k}": v for k, v in state.model.state_arrays().items()}
    opt = state.optimizer
    if opt is not None:
        arrays.update({f"optimizer/{k}": v for k, v in opt.state_arrays().items()})
    entries, chunks, offset = [], [], 0
    for name, arr in arrays.items():
        raw = np.ascontiguousarray(arr, dtype="<f8").tobytes()
        entries.append({"name": name, "shape": list(np.shape(arr)), "offset": offset})
        chunks.append(raw)
        offset += len(raw)
    header = {
        "version": VERSION,
        "config": state.config.to_dict(),
        "optimizer": opt.hyperparams() if opt is not None else None,
        "metadata": state.metadata,
        "arrays": entries,
    }
    blob = json.dumps(header, sort_keys=True).encode()
    path = Path(path)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        for chunk in chunks:
            fh.write(chunk)
    return path


def read_checkpoint(path) -> tuple[dict, dict]:
    data = Path(path).read_bytes()
    if data[:8] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    (hlen,) = struct.unpack("<Q", data[8:16])
    header = json.loads(data[16:16 + hlen])
    if header.get("version") != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {header.get('version')}")
    payload = memoryview(data)[16 + hlen:]
    arrays = {}
    for e in header["arrays"]:
        count = int(np.prod(e["shape"])) if e["shape"] else 1
        buf = payload[e["offset"]:e["offset"] + 8 * count]
        arrays[e["name"]] = np.frombuffer(buf, dtype="<f8").astype(np.float64).reshape(e["shape"])
    return header, arrays


def load_checkpoint(path) -> ModelState:
    header, arrays = read_checkpoint(path)
    model = FewShotCosineTransformer(ModelConfig.from_dict(header["config"]))
    model.load_state_arrays({k[len("model/"):]: v for k, v in arrays.items() if k.startswith("model/")})
    opt = None
    if header["optimizer"] is not None:
        hp = header["optimizer"]
        opt = AdamW(model.parameters(), lr=hp["lr"], betas=tuple(hp["betas"]), eps=hp["eps"],
                    weight_decay=hp["weight_decay"])
        opt.load_state_arrays({k[len("optimizer/"):]: v for k, v in arrays.items() if k.startswith("optimizer/")})
    return ModelState(model, opt, dict(header.get("metadata") or {}))
