"""SGD with momentum, AdamW, the LookAhead wrapper, and warmup + cosine decay."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .autodiff import NonFiniteError, Tensor


@dataclass(frozen=True)
class LrSchedule:
    base_lr: float
    warmup_steps: int
    total_steps: int

    def __post_init__(self):
        if not 0 <= self.warmup_steps < max(self.total_steps, 1):
            raise ValueError("need 0 <= warmup_steps < total_steps")


def lr_at(schedule: LrSchedule, step: int) -> float:
    """Linear ramp from 0 over the warmup, then cosine decay to exactly 0."""
    if not 0 <= step <= schedule.total_steps:
        raise ValueError(f"step {step} outside [0, {schedule.total_steps}]")
    if step < schedule.warmup_steps:
        return schedule.base_lr * step / schedule.warmup_steps
    if step == schedule.total_steps:
        return 0.0
    progress = (step - schedule.warmup_steps) / (schedule.total_steps - schedule.warmup_steps)
    return schedule.base_lr * 0.5 * (1.0 + math.cos(math.pi * progress))


def default_decay_mask(name: str) -> bool:
    """AdamW skips weight decay for biases and the logit scale, and for embedding tables too."""
    leaf = name.rsplit("/", 1)[-1]
    return not (leaf.endswith("_b") or "embedding" in leaf or leaf == "logit_scale")


class Optimizer:
    """One optimizer over a flat ``name -> Tensor`` mapping.

    ``kind`` is ``sgd_momentum`` or ``adamw``. With ``lookahead=(alpha, k)`` the
    inner optimizer's weights are pulled toward slow copies every k steps.
    """

    def __init__(
        self,
        params: dict[str, Tensor],
        kind: str = "sgd_momentum",
        momentum: float = 0.9,
        weight_decay: float = 0.0,
        betas: tuple[float, float] = (0.9, 0.999),
        eps: float = 1e-8,
        lookahead: tuple[float, int] | None = None,
        decay_mask=default_decay_mask,
    ):
        if kind not in ("sgd_momentum", "adamw"):
            raise ValueError(f"unknown optimizer {kind!r}")
        self.params = dict(params)
        self.kind = kind
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.betas = tuple(betas)
        self.eps = eps
        self.step_count = 0
        self.slots: dict[str, np.ndarray] = {}
        for name, p in self.params.items():
            if kind == "sgd_momentum":
                self.slots[f"mom/{name}"] = np.zeros_like(p.data)
            else:
                self.slots[f"m/{name}"] = np.zeros_like(p.data)
                self.slots[f"v/{name}"] = np.zeros_like(p.data)
        self._decays = {name: (kind == "sgd_momentum" or decay_mask(name)) for name in self.params}
        self.lookahead = None
        if lookahead is not None:
            alpha, k = lookahead
            if not 0 < alpha <= 1 or k < 1:
                raise ValueError("lookahead needs 0 < alpha <= 1 and k >= 1")
            self.lookahead = (float(alpha), int(k))
            for name, p in self.params.items():
                self.slots[f"slow/{name}"] = p.data.copy()

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def step(self, lr: float) -> None:
        for name, p in self.params.items():
            if p.grad is not None and not np.isfinite(p.grad).all():
                raise NonFiniteError(f"non-finite gradient for parameter {name!r}")
        self.step_count += 1
        for name, p in self.params.items():
            g = np.zeros_like(p.data) if p.grad is None else p.grad
            wd = self.weight_decay if self._decays[name] else 0.0
            if self.kind == "sgd_momentum":
                v = self.slots[f"mom/{name}"]
                v *= self.momentum
                v += g + wd * p.data
                p.data -= lr * v
            else:
                b1, b2 = self.betas
                m, v = self.slots[f"m/{name}"], self.slots[f"v/{name}"]
                m *= b1
                m += (1 - b1) * g
                v *= b2
                v += (1 - b2) * g * g
                mhat = m / (1 - b1**self.step_count)
                vhat = v / (1 - b2**self.step_count)
                if wd:
                    p.data -= lr * wd * p.data
                p.data -= lr * mhat / (np.sqrt(vhat) + self.eps)
        if self.lookahead is not None:
            alpha, k = self.lookahead
            if self.step_count % k == 0:
                for name, p in self.params.items():
                    slow = self.slots[f"slow/{name}"]
                    slow += alpha * (p.data - slow)
                    p.data[...] = slow

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {k: v.copy() for k, v in self.slots.items()}

    def state_meta(self) -> dict:
        return {
            "kind": self.kind,
            "step_count": self.step_count,
            "momentum": self.momentum,
            "weight_decay": self.weight_decay,
            "betas": list(self.betas),
            "eps": self.eps,
            "lookahead": list(self.lookahead) if self.lookahead else None,
        }

    def load_state(self, arrays: dict[str, np.ndarray], meta: dict) -> None:
        if meta["kind"] != self.kind:
            raise ValueError(f"optimizer kind mismatch: {meta['kind']} vs {self.kind}")
        self.step_count = int(meta["step_count"])
        for k in self.slots:
            if arrays[k].shape != self.slots[k].shape:
                raise ValueError(f"optimizer slot {k} has the wrong shape")
            self.slots[k][...] = arrays[k]
