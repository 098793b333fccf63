from __future__ import annotations

from typing import Mapping

import numpy as np

from .tensor import AutodiffError, Tensor


class Adam:
    """Adam with bias correction over a named parameter set.

    Gradients are zeroed after every :meth:`step`, so several losses can be
    backpropagated and accumulated before one update.
    """

    def __init__(
        self,
        params: Mapping[str, Tensor],
        lr: float = 1e-3,
        beta1: float = 0.9,
        beta2: float = 0.999,
        eps: float = 1e-8,
    ):
        self.params = dict(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in self.params.items()}

    def step(self) -> None:
        for name, p in self.params.items():
            if not p.requires_grad or p.grad is None:
                raise AutodiffError(f"parameter {name!r} has no gradient")
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for name, p in self.params.items():
            g = p.grad
            m, v = self.m[name], self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            mhat = m / bc1
            vhat = v / bc2
            p.data = (p.data - self.lr * mhat / (np.sqrt(vhat) + self.eps)).astype(p.data.dtype, copy=False)
            p.zero_grad()

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    # checkpoint plumbing
    def state_tensors(self) -> dict[str, np.ndarray]:
        out = {}
        for k in self.params:
            out[f"adam.m.{k}"] = self.m[k]
            out[f"adam.v.{k}"] = self.v[k]
        return out

    def load_state(self, t: int, tensors: Mapping[str, np.ndarray]) -> None:
        self.t = int(t)
        for k in self.params:
            self.m[k] = np.array(tensors[f"adam.m.{k}"], dtype=self.params[k].data.dtype)
            self.v[k] = np.array(tensors[f"adam.v.{k}"], dtype=self.params[k].data.dtype)
