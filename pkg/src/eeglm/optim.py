"""AdamW with decoupled weight decay, gradient clipping and a cosine schedule."""

from __future__ import annotations

import math

import numpy as np

from .autodiff import Array, Tensor


def adamw_step(
    params: dict[str, Tensor],
    grads: dict[str, Array],
    state: dict,
    *,
    lr: float,
    betas: tuple[float, float] = (0.9, 0.999),
    eps: float = 1e-8,
    weight_decay: float = 0.0,
    lr_scales: dict[str, float] | None = None,
) -> None:
    """Apply one bias-corrected AdamW update in place.

    Weight decay is decoupled from the moment estimates:
    p <- p - lr * (m_hat / (sqrt(v_hat) + eps) + weight_decay * p).
    `state` carries {"step": int, "m": {name: arr}, "v": {name: arr}} and is
    mutated; missing moment slots are created as zeros.
    """
    b1, b2 = betas
    state["step"] = state.get("step", 0) + 1
    t = state["step"]
    m_all = state.setdefault("m", {})
    v_all = state.setdefault("v", {})
    bc1 = 1.0 - b1**t
    bc2 = 1.0 - b2**t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        m = m_all.get(name)
        if m is None:
            m = np.zeros_like(p.data)
            v_all[name] = np.zeros_like(p.data)
        v = v_all[name]
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * (g * g)
        m_all[name] = m
        v_all[name] = v
        m_hat = m / bc1
        v_hat = v / bc2
        step_lr = lr * (lr_scales.get(name, 1.0) if lr_scales else 1.0)
        p.data = p.data - step_lr * (m_hat / (np.sqrt(v_hat) + eps) + weight_decay * p.data)


class AdamW:
    """Stateful wrapper around `adamw_step` over a named parameter dict."""

    def __init__(
        self,
        params: dict[str, Tensor],
        lr: float,
        betas: tuple[float, float] = (0.9, 0.999),
        eps: float = 1e-8,
        weight_decay: float = 0.0,
        lr_scales: dict[str, float] | None = None,
    ):
        self.params = dict(params)
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.lr_scales = dict(lr_scales) if lr_scales else {}
        self.state: dict = {"step": 0, "m": {}, "v": {}}

    def step(self, grads: dict[str, Array], lr: float | None = None) -> None:
        adamw_step(
            self.params,
            grads,
            self.state,
            lr=self.lr if lr is None else lr,
            betas=self.betas,
            eps=self.eps,
            weight_decay=self.weight_decay,
            lr_scales=self.lr_scales or None,
        )

    # ---- checkpoint support ----
    def export_state(self) -> dict:
        return {
            "step": self.state["step"],
            "m": {k: v for k, v in self.state["m"].items()},
            "v": {k: v for k, v in self.state["v"].items()},
        }

    def load_state(self, state: dict) -> None:
        self.state = {
            "step": int(state["step"]),
            "m": {k: np.asarray(v, dtype=np.float64) for k, v in state["m"].items()},
            "v": {k: np.asarray(v, dtype=np.float64) for k, v in state["v"].items()},
        }


def clip_global_norm(grads: dict[str, Array], max_norm: float) -> dict[str, Array]:
    """Scale all gradients jointly so their global L2 norm is at most max_norm."""
    if max_norm is None or max_norm <= 0:
        return grads
    total = 0.0
    for g in grads.values():
        total += float(np.sum(g * g))
    norm = math.sqrt(total)
    if norm <= max_norm or norm == 0.0:
        return grads
    scale = max_norm / norm
    return {k: g * scale for k, g in grads.items()}


def cosine_schedule(
    step: int,
    total_steps: int,
    base_lr: float,
    warmup_steps: int = 0,
    min_lr: float = 0.0,
) -> float:
    """Linear warmup from zero to base_lr, then a cosine decay to min_lr."""
    if total_steps <= 0:
        return base_lr
    if warmup_steps > 0 and step < warmup_steps:
        return base_lr * (step + 1) / warmup_steps
    span = max(1, total_steps - warmup_steps)
    frac = min(max((step - warmup_steps) / span, 0.0), 1.0)
    return min_lr + 0.5 * (base_lr - min_lr) * (1.0 + math.cos(math.pi * frac))
