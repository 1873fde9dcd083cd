"""Adam with bias correction plus the cosine learning-rate schedule."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import NonFiniteValue
from .params import ParamVector

BETA1 = 0.9
BETA2 = 0.999
EPS = 1e-8


@dataclass
class AdamState:
    """First/second moment accumulators; mutated in place by adam_step."""

    m: np.ndarray
    v: np.ndarray
    step: int = 0

    @classmethod
    def zeros(cls, n: int) -> "AdamState":
        return cls(m=np.zeros(n), v=np.zeros(n))


def adam_step(params: ParamVector, grads: ParamVector, state: AdamState,
              lr: float) -> ParamVector:
    """One Adam update; `params` and `state` are modified in place."""
    if len(params) != len(grads) or len(params) != state.m.size:
        raise ValueError(f"length mismatch: params={len(params)} grads={len(grads)} "
                         f"state={state.m.size}")
    g = grads.values
    if not np.all(np.isfinite(g)):
        bad = int(np.flatnonzero(~np.isfinite(g))[0])
        raise NonFiniteValue(f"non-finite gradient in segment "
                             f"'{grads.segment_of_index(bad)}' (index {bad})")
    state.step += 1
    state.m *= BETA1
    state.m += (1.0 - BETA1) * g
    state.v *= BETA2
    state.v += (1.0 - BETA2) * g * g
    mhat = state.m / (1.0 - BETA1 ** state.step)
    vhat = state.v / (1.0 - BETA2 ** state.step)
    params.values -= lr * mhat / (np.sqrt(vhat) + EPS)
    return params


def cosine_lr(step: int, total_steps: int, lr0: float) -> float:
    """Cosine decay from lr0 at step 0 to 0 at total_steps; inputs clamped."""
    if total_steps < 1:
        total_steps = 1
    s = min(max(step, 0), total_steps)
    return lr0 * 0.5 * (1.0 + math.cos(math.pi * s / total_steps))
