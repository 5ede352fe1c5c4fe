"""AdamW with decoupled weight decay."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import Tensor


@dataclass
class OptimizerState:
    lr: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    step: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)


class AdamW:
    def __init__(self, params, lr=3e-4, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.01,
                 no_decay=None):
        self.params: list[Tensor] = list(params)
        self.state = OptimizerState(lr=lr, beta1=betas[0], beta2=betas[1], eps=eps,
                                    weight_decay=weight_decay)
        self.state.m = [np.zeros_like(p.data) for p in self.params]
        self.state.v = [np.zeros_like(p.data) for p in self.params]
        # ids of params exempt from weight decay (biases, norms)
        self._no_decay = {id(p) for p in (no_decay or ())}

    @property
    def lr(self):
        return self.state.lr

    @lr.setter
    def lr(self, value):
        self.state.lr = float(value)

    def step(self) -> None:
        st = self.state
        for p in self.params:
            if p.grad is None:
                raise ValueError(f"parameter {p.name or p.shape} has no gradient")
        st.step += 1
        b1, b2 = st.beta1, st.beta2
        c1 = 1.0 - b1 ** st.step
        c2 = 1.0 - b2 ** st.step
        for p, m, v in zip(self.params, st.m, st.v):
            g = p.grad
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            if st.weight_decay and id(p) not in self._no_decay:
                p.data *= 1.0 - st.lr * st.weight_decay
            p.data -= st.lr * (m / c1) / (np.sqrt(v / c2) + st.eps)

    def zero_grad(self, set_to_none: bool = False) -> None:
        for p in self.params:
            if set_to_none:
                p.grad = None
            else:
                p.grad = np.zeros_like(p.data)


def adamw_step(params, opt: AdamW) -> None:
    """Functional alias: one update of ``opt`` over ``params``."""
    if [id(p) for p in params] != [id(p) for p in opt.params]:
        raise ValueError("params do not match optimizer registration")
    opt.step()


def clip_grad_norm(params, max_norm: float) -> float:
    """Scale gradients in place so their global L2 norm is at most ``max_norm``."""
    total = float(np.sqrt(sum(float((p.grad ** 2).sum()) for p in params if p.grad is not None)))
    if max_norm > 0 and total > max_norm:
        scale = max_norm / (total + 1e-12)
        for p in params:
            if p.grad is not None:
                p.grad *= scale
    return total
