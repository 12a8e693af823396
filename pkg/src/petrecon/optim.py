"""Adam over named parameter dicts.

Parameters live in insertion-ordered dicts of name -> Tensor; the update
walks that order, so repeated runs apply identical floating-point
operations and training stays bit-reproducible.
"""

from __future__ import annotations

import numpy as np

from .numeric import Tensor


class TrainingDiverged(RuntimeError):
    """Loss went non-finite; carries the step index and recent losses."""

    def __init__(self, step: int, recent_losses):
        self.step = step
        self.recent_losses = list(recent_losses)
        super().__init__(
            f"training diverged at step {step}; recent losses {self.recent_losses}"
        )


class Adam:
    def __init__(self, params: dict[str, Tensor], lr: float = 1e-3,
                 betas: tuple[float, float] = (0.9, 0.99), eps: float = 1e-8):
        for name, t in params.items():
            if not t.requires_grad:
                raise ValueError(f"parameter '{name}' does not require grad")
        self.params = params
        self.lr = float(lr)
        self.betas = (float(betas[0]), float(betas[1]))
        self.eps = float(eps)
        self.t = 0
        self._m = {k: np.zeros_like(v.data) for k, v in params.items()}
        self._v = {k: np.zeros_like(v.data) for k, v in params.items()}

    def zero_grad(self) -> None:
        for t in self.params.values():
            t.grad = None

    def step(self) -> None:
        self.t += 1
        b1, b2 = self.betas
        bc1 = 1.0 - b1**self.t
        bc2 = 1.0 - b2**self.t
        for name, t in self.params.items():
            g = t.grad
            if g is None:
                continue
            m = self._m[name]
            v = self._v[name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * (g * g)
            mhat = m / bc1
            vhat = v / bc2
            t.data -= (self.lr * mhat / (np.sqrt(vhat) + self.eps)).astype(t.data.dtype)
