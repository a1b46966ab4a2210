"""AdamW with decoupled weight decay, global-norm gradient clipping,
and exponential-moving-average parameter tracking."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tensor


class NonFiniteGradient(RuntimeError):
    def __init__(self, name: str):
        super().__init__(f"non-finite gradient in parameter '{name}'")
        self.param_name = name


@dataclass
class AdamW:
    """Keeps first/second moments per named parameter; step() applies one
    bias-corrected update with decoupled weight decay."""

    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.95
    eps: float = 1e-8
    weight_decay: float = 0.0
    clip_norm: float | None = 3.0
    step_count: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    def step(self, params: dict[str, Tensor], lr: float | None = None) -> float:
        """Apply one update from the .grad slots; returns the pre-clip
        global gradient norm. Raises NonFiniteGradient before touching
        any parameter if a gradient contains NaN/Inf."""
        lr = self.lr if lr is None else lr
        grads = {}
        for name, p in params.items():
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            if not np.all(np.isfinite(g)):
                raise NonFiniteGradient(name)
            grads[name] = g

        sq = 0.0
        for g in grads.values():
            sq += float(np.sum(g.astype(np.float64) ** 2))
        gnorm = float(np.sqrt(sq))
        if self.clip_norm is not None and gnorm > self.clip_norm:
            scale = self.clip_norm / gnorm
            grads = {n: g * scale for n, g in grads.items()}

        self.step_count += 1
        t = self.step_count
        bc1 = 1.0 - self.beta1 ** t
        bc2 = 1.0 - self.beta2 ** t
        for name, p in params.items():
            g = grads[name]
            if name not in self.m:
                self.m[name] = np.zeros_like(p.data)
                self.v[name] = np.zeros_like(p.data)
            self.m[name] = self.beta1 * self.m[name] + (1.0 - self.beta1) * g
            self.v[name] = self.beta2 * self.v[name] + (1.0 - self.beta2) * g * g
            m_hat = self.m[name] / bc1
            v_hat = self.v[name] / bc2
            p.data = p.data - lr * (m_hat / (np.sqrt(v_hat) + self.eps)
                                    + self.weight_decay * p.data)
        return gnorm


def ema_update(ema: dict[str, np.ndarray], params: dict[str, Tensor], decay: float):
    """ema <- decay*ema + (1-decay)*params, elementwise, in place."""
    if not 0.0 <= decay <= 1.0:
        raise ValueError(f"EMA decay must be in [0,1], got {decay}")
    for name, p in params.items():
        e = ema[name]
        if e.shape != p.data.shape:
            raise ValueError(f"EMA shape mismatch for '{name}': {e.shape} vs {p.data.shape}")
        ema[name] = decay * e + (1.0 - decay) * p.data


def zero_grads(params: dict[str, Tensor]):
    for p in params.values():
        p.grad = None
