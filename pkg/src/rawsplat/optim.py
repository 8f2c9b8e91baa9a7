"""Adam with bias correction and the learning-rate schedules used in training."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import TrainingError, ValidationError


@dataclass(frozen=True)
class PiecewiseLR:
    """``values[i]`` applies while ``step <= milestones[i]``; the last value after."""

    values: tuple = (1e-4, 1e-5)
    milestones: tuple = (25_000,)

    def __post_init__(self):
        if len(self.values) != len(self.milestones) + 1:
            raise ValidationError("need exactly one more lr value than milestones")

    def __call__(self, step: int) -> float:
        for lr, limit in zip(self.values, self.milestones):
            if step <= limit:
                return lr
        return self.values[-1]


@dataclass(frozen=True)
class ExpDecayLR:
    """Log-linear interpolation from ``lr_init`` to ``lr_final`` over ``max_steps``."""

    lr_init: float
    lr_final: float
    max_steps: int

    def __call__(self, step: int) -> float:
        t = min(max(step / self.max_steps, 0.0), 1.0)
        return math.exp((1 - t) * math.log(self.lr_init) + t * math.log(self.lr_final))


def constant(lr):
    return PiecewiseLR((lr,), ())


def adam_update(param, grad, m, v, step, lr, beta1=0.9, beta2=0.999, eps=1e-8):
    """One in-place Adam update of ``param`` using moment buffers ``m``, ``v``."""
    m *= beta1
    m += (1 - beta1) * grad
    v *= beta2
    v += (1 - beta2) * grad * grad
    mhat = m / (1 - beta1**step)
    vhat = v / (1 - beta2**step)
    param -= lr * mhat / (np.sqrt(vhat) + eps)


@dataclass
class AdamState:
    """Moments for a dict of parameter arrays, a step counter and schedules.

    ``schedules`` maps parameter name to a callable ``step -> lr``; the
    ``"*"`` entry is the fallback.
    """

    schedules: dict = field(default_factory=lambda: {"*": PiecewiseLR()})
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def lr(self, name: str, step: int | None = None) -> float:
        sched = self.schedules.get(name, self.schedules.get("*"))
        return sched(self.step if step is None else step)


def adam_step(params: dict, grads: dict, state: AdamState) -> dict:
    """Apply one Adam step to every entry of ``grads`` (in place)."""
    for name, g in grads.items():
        if params[name].shape != g.shape:
            raise ValidationError(f"gradient for {name!r} has shape {g.shape}, "
                                  f"parameter has {params[name].shape}")
        if not np.all(np.isfinite(g)):
            bad = np.argwhere(~np.isfinite(g))[:3].tolist()
            raise TrainingError(f"non-finite gradient for {name!r} at {bad}")
    state.step += 1
    for name, g in grads.items():
        if name not in state.m or state.m[name].shape != g.shape:
            state.m[name] = np.zeros_like(g)
            state.v[name] = np.zeros_like(g)
        adam_update(params[name], g, state.m[name], state.v[name], state.step,
                    state.lr(name), state.beta1, state.beta2, state.eps)
    return params
