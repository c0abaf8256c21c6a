"""Inner and outer optimizers.

AdamW (decoupled weight decay) drives the inner path updates, Nesterov
momentum drives the per-module outer updates, and plain SGD exists as the
degenerate-equivalence oracle. All updates are pure tree-to-tree functions.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from . import tree as pt
from .tree import ParamTree


@dataclass(frozen=True)
class LrSchedule:
    """Constant or cosine-with-warmup learning rate.

    The cosine branch ramps linearly to `peak` over `warmup_steps`, then
    decays to zero at `total_steps`.
    """

    kind: str = "constant"  # constant | cosine
    peak: float = 1e-3
    warmup_steps: int = 0
    total_steps: int = 1

    def __post_init__(self):
        if self.kind not in ("constant", "cosine"):
            raise ValueError(f"unknown schedule kind {self.kind!r}")
        if self.peak < 0:
            raise ValueError("peak learning rate must be >= 0")

    def value(self, step: int) -> float:
        if self.kind == "constant":
            return self.peak
        if step < self.warmup_steps:
            return self.peak * (step + 1) / max(self.warmup_steps, 1)
        total = max(self.total_steps, self.warmup_steps + 1)
        frac = (step - self.warmup_steps) / max(total - self.warmup_steps, 1)
        frac = min(frac, 1.0)
        return self.peak * 0.5 * (1.0 + np.cos(np.pi * frac))


@dataclass
class AdamWState:
    step: int
    m: ParamTree
    v: ParamTree
    schedule: LrSchedule
    beta1: float = 0.9
    beta2: float = 0.99
    eps: float = 1e-8
    weight_decay: float = 0.1

    @classmethod
    def init(cls, params: ParamTree, schedule: LrSchedule, **kw) -> "AdamWState":
        return cls(step=0, m=pt.zeros_like(params), v=pt.zeros_like(params), schedule=schedule, **kw)


def adamw_step(
    params: ParamTree, grads: ParamTree, state: AdamWState, step_offset: int = 0
) -> tuple[ParamTree, AdamWState]:
    """One AdamW update with decoupled weight decay.

    The learning rate is taken from the schedule at `step_offset + state.step`
    so that fresh per-phase states can follow one global schedule.
    """
    pt.check_congruent(params, grads, "params/grads")
    pt.check_congruent(params, state.m, "params/moments")
    if not pt.allfinite(grads):
        raise ValueError("non-finite gradient entries")
    t = state.step + 1
    lr = state.schedule.value(step_offset + state.step)
    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1**t
    bc2 = 1.0 - b2**t
    new_params: ParamTree = {}
    new_m: ParamTree = {}
    new_v: ParamTree = {}
    for k in params:
        m = b1 * state.m[k] + (1.0 - b1) * grads[k]
        v = b2 * state.v[k] + (1.0 - b2) * grads[k] ** 2
        update = (m / bc1) / (np.sqrt(v / bc2) + state.eps)
        p = params[k] * (1.0 - lr * state.weight_decay)
        new_params[k] = p - lr * update
        new_m[k] = m
        new_v[k] = v
    new_state = replace(state, step=t, m=new_m, v=new_v)
    return new_params, new_state


def sgd_step(params: ParamTree, grads: ParamTree, lr: float) -> ParamTree:
    pt.check_congruent(params, grads, "params/grads")
    if not pt.allfinite(grads):
        raise ValueError("non-finite gradient entries")
    return {k: params[k] - lr * grads[k] for k in params}


@dataclass
class NesterovState:
    velocity: ParamTree
    outer_lr: float = 0.7
    outer_momentum: float = 0.9

    @classmethod
    def init(cls, params: ParamTree, outer_lr: float = 0.7, outer_momentum: float = 0.9) -> "NesterovState":
        return cls(velocity=pt.zeros_like(params), outer_lr=outer_lr, outer_momentum=outer_momentum)


def nesterov_outer_step(
    theta_prev: ParamTree, delta: ParamTree, state: NesterovState
) -> tuple[ParamTree, NesterovState]:
    """Nesterov update treating delta as a gradient:

        v' = mu * v + delta
        theta' = theta_prev - lr * (mu * v' + delta)

    With mu=0 and lr=1 this reduces to theta' = theta_prev - delta.
    """
    pt.check_congruent(theta_prev, delta, "theta/delta")
    pt.check_congruent(theta_prev, state.velocity, "theta/velocity")
    if not pt.allfinite(delta):
        raise ValueError("non-finite outer delta")
    mu, lr = state.outer_momentum, state.outer_lr
    new_v: ParamTree = {}
    new_theta: ParamTree = {}
    for k in theta_prev:
        v = mu * state.velocity[k] + delta[k]
        new_v[k] = v
        new_theta[k] = theta_prev[k] - lr * (mu * v + delta[k])
    return new_theta, replace(state, velocity=new_v)
