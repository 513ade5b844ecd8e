from __future__ import annotations

import numpy as np

from ..numerics import NumericalError, Tensor


class AdamW:
    """Adam with bias correction and decoupled weight decay.

    Parameters whose ``.grad`` is None are skipped entirely (no decay, no
    moment update), which is how frozen or unused parameters stay untouched.
    """

    def __init__(self, params: dict[str, Tensor], lr: float = 1e-3, betas=(0.9, 0.999), eps: float = 1e-8,
                 weight_decay: float = 0.01):
        self.params = params
        self.lr, self.betas, self.eps, self.weight_decay = lr, tuple(betas), eps, weight_decay
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.steps = {k: 0 for k in params}

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def step(self, lr: float | None = None) -> None:
        lr = self.lr if lr is None else lr
        b1, b2 = self.betas
        for name, p in self.params.items():
            g = p.grad
            if g is None:
                continue
            if not np.all(np.isfinite(g)):
                raise NumericalError(f"non-finite gradient for parameter {name}")
            g = g.astype(p.dtype, copy=False)
            self.steps[name] += 1
            t = self.steps[name]
            m = self.m[name]
            v = self.v[name]
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            m_hat = m / (1 - b1 ** t)
            v_hat = v / (1 - b2 ** t)
            if self.weight_decay:
                p.data *= (1 - lr * self.weight_decay)
            p.data -= (lr * m_hat / (np.sqrt(v_hat) + self.eps)).astype(p.dtype, copy=False)


def optimizer_step(params: dict[str, Tensor], lr: float, betas=(0.9, 0.999), weight_decay: float = 0.0,
                   eps: float = 1e-8, state: AdamW | None = None) -> AdamW:
    """Functional wrapper: apply one AdamW step, returning the (possibly new) state."""
    opt = state or AdamW(params, lr, betas, eps, weight_decay)
    opt.step(lr)
    return opt


def clip_grad_norm(params: dict[str, Tensor], max_norm: float) -> float:
    grads = [p.grad for p in params.values() if p.grad is not None]
    if not grads:
        return 0.0
    total = float(np.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads)))
    if max_norm > 0 and total > max_norm:
        scale = max_norm / (total + 1e-6)
        for p in params.values():
            if p.grad is not None:
                p.grad = p.grad * np.asarray(scale, dtype=p.grad.dtype)
    return total
