"""Adam with a linear warmup-then-decay schedule and decoupled weight decay.

The convention: no bias correction of the moments, weight decay added to the
update (not the gradient) for matrix-shaped parameters only, and the
learning rate rising linearly from zero to the peak over the warmup steps
then falling linearly back to zero at the horizon.
"""

from __future__ import annotations

import numpy as np

from .autodiff import Parameter

__all__ = ["WarmupAdam", "clip_global_norm"]


def clip_global_norm(params: list[Parameter], max_norm: float) -> float:
    """Scale all gradients so their joint L2 norm is at most max_norm."""
    total = 0.0
    for p in params:
        if p.grad is not None:
            total += float((p.grad * p.grad).sum())
    norm = float(np.sqrt(total))
    if norm > max_norm:
        scale = max_norm / (norm + 1e-12)
        for p in params:
            if p.grad is not None:
                p.grad = p.grad * scale
    return norm


class WarmupAdam:
    def __init__(
        self,
        params: list[Parameter],
        peak_lr: float,
        warmup: float,
        total_steps: int,
        weight_decay: float = 0.01,
        beta1: float = 0.9,
        beta2: float = 0.999,
        eps: float = 1e-6,
    ):
        if not 0.0 <= warmup <= 1.0:
            raise ValueError(f"warmup proportion {warmup} outside [0, 1]")
        names = [p.name for p in params]
        if len(set(names)) != len(names):
            raise ValueError("optimizer parameters must have unique names")
        self.params = list(params)
        self.peak_lr = peak_lr
        self.warmup = warmup
        self.total_steps = total_steps
        self.weight_decay = weight_decay
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step_count = 0
        self.m = {p.name: np.zeros_like(p.data) for p in params}
        self.v = {p.name: np.zeros_like(p.data) for p in params}

    def lr_at(self, step: int) -> float:
        warm = self.warmup * self.total_steps
        if warm > 0 and step < warm:
            return self.peak_lr * step / warm
        if self.total_steps <= warm:
            return self.peak_lr
        frac = (self.total_steps - step) / (self.total_steps - warm)
        return self.peak_lr * max(0.0, frac)

    def step(self) -> float:
        """One update over all parameters with gradients; zeroes them after."""
        lr = self.lr_at(self.step_count)
        b1, b2 = self.beta1, self.beta2
        for p in self.params:
            g = p.grad
            if g is None:
                continue
            m = self.m[p.name]
            v = self.v[p.name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * (g * g)
            update = m / (np.sqrt(v) + self.eps)
            if self.weight_decay > 0.0 and p.data.ndim >= 2:
                update = update + self.weight_decay * p.data
            p.data = p.data - lr * update
            p.grad = None
        self.step_count += 1
        return lr

    # checkpoint participation -------------------------------------------------
    def state_meta(self) -> dict:
        return {
            "step_count": self.step_count,
            "peak_lr": self.peak_lr,
            "warmup": self.warmup,
            "total_steps": self.total_steps,
            "weight_decay": self.weight_decay,
            "beta1": self.beta1,
            "beta2": self.beta2,
            "eps": self.eps,
        }

    def moment_arrays(self, tag: str) -> dict[str, np.ndarray]:
        out = {}
        for name in self.m:
            out[f"{tag}.m.{name}"] = self.m[name]
            out[f"{tag}.v.{name}"] = self.v[name]
        return out

    def load_state(self, meta: dict, arrays: dict[str, np.ndarray], tag: str) -> None:
        self.step_count = int(meta["step_count"])
        for key in ("peak_lr", "warmup", "total_steps", "weight_decay", "beta1", "beta2", "eps"):
            setattr(self, key, meta[key])
        self.total_steps = int(self.total_steps)
        for name in self.m:
            self.m[name] = arrays[f"{tag}.m.{name}"].copy()
            self.v[name] = arrays[f"{tag}.v.{name}"].copy()
