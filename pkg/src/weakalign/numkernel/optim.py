"""Adam with a linear warmup / linear decay learning-rate schedule.

The rate ramps linearly from 0 to the peak over the first `warmup_frac` of
`total_steps`, then decays linearly back to 0 at `total_steps`.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import Tensor


@dataclass
class AdamConfig:
    peak_lr: float = 6e-5
    warmup_frac: float = 0.1
    total_steps: int = 1000
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    grad_clip: float | None = None  # off by default

    def __post_init__(self):
        if not 0.0 <= self.warmup_frac <= 1.0:
            raise ValueError(f"warmup_frac must be in [0,1], got {self.warmup_frac}")
        if self.total_steps < 1:
            raise ValueError("total_steps must be >= 1")


def schedule_lr(step: int, peak_lr: float, warmup_frac: float, total_steps: int) -> float:
    """Learning rate at `step` (0-based): 0 -> peak over the warmup span,
    peak -> 0 over the rest. Defined on [0, total_steps]."""
    warmup_steps = int(round(warmup_frac * total_steps))
    if warmup_steps > 0 and step < warmup_steps:
        return peak_lr * step / warmup_steps
    if total_steps == warmup_steps:
        return peak_lr if step <= total_steps else 0.0
    lr = peak_lr * (total_steps - step) / (total_steps - warmup_steps)
    return max(lr, 0.0)


class Adam:
    """Standard Adam with bias correction over a named parameter dict.

    Parameters are visited in sorted-name order so updates are reproducible.
    With fresh (zero) moments and a zero gradient a step leaves parameters
    exactly unchanged.
    """

    def __init__(self, params: dict[str, Tensor], config: AdamConfig):
        self.params = dict(params)
        self.config = config
        self.step_count = 0
        self.m = {k: np.zeros(p.shape, dtype=p.dtype) for k, p in self.params.items()}
        self.v = {k: np.zeros(p.shape, dtype=p.dtype) for k, p in self.params.items()}

    def lr_at(self, step: int) -> float:
        return schedule_lr(step, self.config.peak_lr, self.config.warmup_frac, self.config.total_steps)

    def step(self) -> float:
        """Apply one update from the `.grad` slots; returns the lr used."""
        cfg = self.config
        lr = self.lr_at(self.step_count)
        t = self.step_count + 1
        bc1 = 1.0 - cfg.beta1 ** t
        bc2 = 1.0 - cfg.beta2 ** t
        if cfg.grad_clip is not None:
            total = 0.0
            for name in sorted(self.params):
                g = self.params[name].grad
                if g is not None:
                    total += float((g.astype(np.float64) ** 2).sum())
            norm = total ** 0.5
            scale = cfg.grad_clip / norm if norm > cfg.grad_clip else 1.0
        else:
            scale = 1.0
        for name in sorted(self.params):
            p = self.params[name]
            g = p.grad if p.grad is not None else np.zeros(p.shape, dtype=p.dtype)
            if scale != 1.0:
                g = g * scale
            if cfg.weight_decay:
                g = g + cfg.weight_decay * p.data
            m = self.m[name]
            v = self.v[name]
            m *= cfg.beta1
            m += (1.0 - cfg.beta1) * g
            v *= cfg.beta2
            v += (1.0 - cfg.beta2) * (g * g)
            update = (m / bc1) / (np.sqrt(v / bc2) + cfg.eps)
            p.data -= (lr * update).astype(p.dtype, copy=False)
        self.step_count += 1
        return lr

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def state_arrays(self) -> dict[str, np.ndarray]:
        """Moment arrays keyed for serialization."""
        out: dict[str, np.ndarray] = {}
        for name in sorted(self.params):
            out[f"m/{name}"] = self.m[name]
            out[f"v/{name}"] = self.v[name]
        return out

    def load_state_arrays(self, arrays: dict[str, np.ndarray], step_count: int) -> None:
        for name in sorted(self.params):
            for prefix, dest in (("m", self.m), ("v", self.v)):
                key = f"{prefix}/{name}"
                if key not in arrays:
                    raise KeyError(f"optimizer state missing {key}")
                if arrays[key].shape != dest[name].shape:
                    raise ValueError(f"optimizer state {key}: shape {arrays[key].shape} vs {dest[name].shape}")
                dest[name] = arrays[key].astype(dest[name].dtype, copy=True)
        self.step_count = int(step_count)
