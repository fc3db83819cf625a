"""AdamW with decoupled weight decay over named parameter tensors."""

from __future__ import annotations

import numpy as np

from . import kernels
from .autodiff import Tensor
from .errors import NonFiniteGradient


class AdamW:
    """Standard AdamW; both decay and the moment update read the pre-step weights.

    Parameters with a ``None`` gradient are skipped entirely that step (they
    were not on the tape). The update itself runs through the selected kernel
    backend.
    """

    def __init__(self, params: dict[str, Tensor], lr: float, weight_decay: float = 0.01,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8):
        self.params = params
        self.lr = float(lr)
        self.weight_decay = float(weight_decay)
        self.beta1, self.beta2 = betas
        self.eps = float(eps)
        self.step_count = 0
        self.m = {name: np.zeros_like(t.data) for name, t in params.items()}
        self.v = {name: np.zeros_like(t.data) for name, t in params.items()}

    def step(self, grad_scale: float = 1.0) -> None:
        """Apply one update from the accumulated gradients, then clear them."""
        self.step_count += 1
        bc1 = 1.0 - self.beta1**self.step_count
        bc2 = 1.0 - self.beta2**self.step_count
        for name, tensor in self.params.items():
            if tensor.grad is None:
                continue
            grad = np.ascontiguousarray(tensor.grad, dtype=np.float64)
            if not np.all(np.isfinite(grad)):
                raise NonFiniteGradient(f"non-finite gradient in parameter group {name!r}")
            if grad_scale != 1.0:
                grad = grad * grad_scale
            kernels.adamw_update(
                tensor.data.ravel(), grad.ravel(),
                self.m[name].ravel(), self.v[name].ravel(),
                self.lr, self.beta1, self.beta2, self.eps, self.weight_decay, bc1, bc2,
            )
            tensor.grad = None

    def state_dict(self) -> dict:
        return {
            "step_count": self.step_count,
            "m": {k: v.copy() for k, v in self.m.items()},
            "v": {k: v.copy() for k, v in self.v.items()},
        }
