"""AdamW with decoupled weight decay."""
from __future__ import annotations

import numpy as np

from .tensor import Tensor


class AdamW:
    def __init__(self, params: list[Tensor], lr: float = 1e-3, betas: tuple = (0.9, 0.999),
                 eps: float = 1e-8, weight_decay: float = 1e-5) -> None:
        self.params = list(params)
        self.lr = lr
        self.betas = tuple(betas)
        self.eps = eps
        self.weight_decay = weight_decay
        self.step_count = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self) -> None:
        self.step_count += 1
        b1, b2 = self.betas
        c1 = 1.0 - b1 ** self.step_count
        c2 = 1.0 - b2 ** self.step_count
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            g = p.grad
            p.data = p.data * (1.0 - self.lr * self.weight_decay)
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            p.data = p.data - self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def state_arrays(self) -> dict[str, np.ndarray]:
        arrays = {f"m.{i}": m for i, m in enumerate(self.m)}
        arrays.update({f"v.{i}": v for i, v in enumerate(self.v)})
        arrays["step"] = np.array([float(self.step_count)])
        return arrays

    def load_state_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        self.m = [np.array(arrays[f"m.{i}"]) for i in range(len(self.params))]
        self.v = [np.array(arrays[f"v.{i}"]) for i in range(len(self.params))]
        self.step_count = int(arrays["step"][0])

    def hyperparams(self) -> dict:
        return {"lr": self.lr, "betas": list(self.betas), "eps": self.eps, "weight_decay": self.weight_decay}
