from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..errors import DimensionError, ParameterError
from .layers import Param


@dataclass
class AdamState:
    lr: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)

    def __post_init__(self):
        if self.lr <= 0:
            raise ParameterError(f"lr must be > 0, got {self.lr}")
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise ParameterError(f"betas must lie in (0, 1), got {(self.beta1, self.beta2)}")
        if self.eps <= 0:
            raise ParameterError(f"eps must be > 0, got {self.eps}")


def adam_step(params: list[np.ndarray], grads: list[np.ndarray], state: AdamState) -> None:
    """One in-place Adam update with bias correction.

    Moment buffers are created lazily on the first call and must keep matching
    the parameter shapes afterwards.
    """
    if len(params) != len(grads):
        raise DimensionError(f"{len(params)} params but {len(grads)} grads")
    if not state.m:
        state.m = [np.zeros_like(p) for p in params]
        state.v = [np.zeros_like(p) for p in params]
    if len(state.m) != len(params):
        raise DimensionError(f"optimizer tracks {len(state.m)} tensors, got {len(params)}")
    state.step_count += 1
    t = state.step_count
    b1, b2 = state.beta1, state.beta2
    c1 = 1 - b1 ** t
    c2 = 1 - b2 ** t
    for i, (p, g, m, v) in enumerate(zip(params, grads, state.m, state.v)):
        if p.shape != g.shape or p.shape != m.shape:
            raise DimensionError(f"tensor {i}: param {p.shape}, grad {g.shape}, state {m.shape}")
        dt = p.dtype.type
        m *= dt(b1)
        m += dt(1 - b1) * g
        v *= dt(b2)
        v += dt(1 - b2) * (g * g)
        p -= dt(state.lr) * (m / dt(c1)) / (np.sqrt(v / dt(c2)) + dt(state.eps))


class Adam:
    """Adam over a fixed list of :class:`Param` objects."""

    def __init__(self, params: list[Param], lr: float = 0.001, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.params = list(params)
        self.state = AdamState(lr=lr, beta1=beta1, beta2=beta2, eps=eps)

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()

    def step(self) -> None:
        adam_step([p.data for p in self.params], [p.grad for p in self.params], self.state)
