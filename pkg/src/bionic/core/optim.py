"""Adam with coupled L2 weight decay and mask re-application."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Sequence

import numpy as np

from .tensor import Parameter


@dataclass
class AdamState:
    lr: float = 6e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    step: int = 0
    m: Dict[int, np.ndarray] = field(default_factory=dict)
    v: Dict[int, np.ndarray] = field(default_factory=dict)


def adam_step(params: Sequence[Parameter], state: AdamState) -> None:
    """One in-place Adam update over ``params``.

    The L2 term ``weight_decay * value`` is added to the gradient before the
    moment updates, except for ``decay_exempt`` parameters. Masked entries
    have their gradient zeroed first and their value reset to +0 after.
    """
    state.step += 1
    t = state.step
    bc1 = 1 - state.beta1 ** t
    bc2 = 1 - state.beta2 ** t
    for i, p in enumerate(params):
        if p.grad is None:
            continue
        p.mask_grad()
        g = p.grad
        if state.weight_decay and not p.decay_exempt:
            g = g + state.weight_decay * p.data
        m = state.m.get(i)
        if m is None:
            m = state.m[i] = np.zeros_like(p.data)
            state.v[i] = np.zeros_like(p.data)
        v = state.v[i]
        m *= state.beta1
        m += (1 - state.beta1) * g
        v *= state.beta2
        v += (1 - state.beta2) * (g * g)
        p.data = p.data - state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
        p.enforce_mask()


class Adam:
    def __init__(self, params: Sequence[Parameter], lr: float = 6e-4, betas=(0.9, 0.999),
                 eps: float = 1e-8, weight_decay: float = 0.0):
        self.params: List[Parameter] = list(params)
        self.state = AdamState(lr=lr, beta1=betas[0], beta2=betas[1], eps=eps, weight_decay=weight_decay)

    @property
    def lr(self) -> float:
        return self.state.lr

    @lr.setter
    def lr(self, value: float) -> None:
        self.state.lr = value

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        adam_step(self.params, self.state)
