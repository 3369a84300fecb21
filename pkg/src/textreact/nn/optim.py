from __future__ import annotations

import math
from dataclasses import dataclass, field

import torch

from ..errors import TextReactError


class ShapeMismatch(TextReactError, ValueError):
    pass


@dataclass
class Schedule:
    base_lr: float = 1e-4
    total_steps: int = 1
    warmup_fraction: float = 0.1
    decay: str = "linear"  # or "cosine"

    def __post_init__(self):
        if self.decay not in ("linear", "cosine"):
            raise ValueError(f"unknown decay {self.decay!r}")

    @property
    def warmup_steps(self) -> int:
        return int(round(self.warmup_fraction * self.total_steps))

    def lr(self, step: int) -> float:
        """Learning rate for 1-based ``step``."""
        w, total = self.warmup_steps, max(self.total_steps, 1)
        if w and step <= w:
            return self.base_lr * step / w
        progress = min(max(step - w, 0) / max(total - w, 1), 1.0)
        if self.decay == "linear":
            return self.base_lr * (1.0 - progress)
        return self.base_lr * 0.5 * (1.0 + math.cos(math.pi * progress))


def adam_update(param, grad, m, v, step: int, lr: float, beta1=0.9, beta2=0.999, eps=1e-8) -> None:
    """In-place bias-corrected Adam update of ``param`` and its moments."""
    if not (param.shape == grad.shape == m.shape == v.shape):
        raise ShapeMismatch(f"param {tuple(param.shape)} vs grad {tuple(grad.shape)}")
    m.mul_(beta1).add_(grad, alpha=1 - beta1)
    v.mul_(beta2).addcmul_(grad, grad, value=1 - beta2)
    m_hat = m / (1 - beta1**step)
    v_hat = v / (1 - beta2**step)
    param.sub_(lr * m_hat / (v_hat.sqrt() + eps))


@dataclass
class AdamState:
    schedule: Schedule
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


class Adam:
    def __init__(self, named_params, schedule: Schedule, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = [(n, p) for n, p in named_params if p.requires_grad]
        self.state = AdamState(schedule, beta1, beta2, eps)
        for name, p in self.params:
            self.state.m[name] = torch.zeros_like(p)
            self.state.v[name] = torch.zeros_like(p)

    def zero_grad(self) -> None:
        for _, p in self.params:
            p.grad = None

    def step(self) -> float:
        st = self.state
        st.step += 1
        lr = st.schedule.lr(st.step)
        with torch.no_grad():
            for name, p in self.params:
                g = p.grad if p.grad is not None else torch.zeros_like(p)
                adam_update(p, g, st.m[name], st.v[name], st.step, lr, st.beta1, st.beta2, st.eps)
        return lr


def adam_step(params: dict, grads: dict, state: AdamState) -> None:
    """Functional form: update every tensor in ``params`` with the matching entry of ``grads``."""
    state.step += 1
    lr = state.schedule.lr(state.step)
    with torch.no_grad():
        for name, p in params.items():
            g = grads[name]
            if g.shape != p.shape:
                raise ShapeMismatch(f"{name}: param {tuple(p.shape)} vs grad {tuple(g.shape)}")
            m = state.m.setdefault(name, torch.zeros_like(p))
            v = state.v.setdefault(name, torch.zeros_like(p))
            adam_update(p, g, m, v, state.step, lr, state.beta1, state.beta2, state.eps)
