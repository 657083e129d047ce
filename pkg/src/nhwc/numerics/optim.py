"""Adam with decoupled weight decay and gradient accumulation."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..exceptions import InvalidInputError, NumericalError


@dataclass
class OptimizerState:
    lr: float = 3e-4
    betas: tuple = (0.9, 0.95)
    eps: float = 1e-8
    weight_decay: float = 0.01
    accumulation_target: int = 1
    accumulation_count: int = 0
    step: int = 0
    first_moment: list = field(default_factory=list)
    second_moment: list = field(default_factory=list)
    accumulator: list = field(default_factory=list)


class Adam:
    """Adam/AdamW that only applies an update every ``accumulation_target`` calls.

    The accumulated gradients are averaged before the update, so the update
    size does not depend on how many micro-batches were folded together.
    Weight decay is applied to parameters with two or more dimensions only.
    """

    def __init__(self, params, lr=3e-4, betas=(0.9, 0.95), eps=1e-8, weight_decay=0.01,
                 accumulation_target=1):
        if int(accumulation_target) < 1:
            raise InvalidInputError("accumulation_target must be a positive integer")
        self.params = list(params)
        self.state = OptimizerState(
            lr=lr, betas=tuple(betas), eps=eps, weight_decay=weight_decay,
            accumulation_target=int(accumulation_target),
            first_moment=[np.zeros_like(p.data) for p in self.params],
            second_moment=[np.zeros_like(p.data) for p in self.params],
            accumulator=[np.zeros_like(p.data) for p in self.params],
        )

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def accumulate_and_step(self, fresh_grads=None):
        """Fold one micro-batch of gradients in; returns True when an update was applied."""
        st = self.state
        if fresh_grads is None:
            fresh_grads = [p.grad for p in self.params]
        if len(fresh_grads) != len(self.params):
            raise InvalidInputError("expected one gradient per parameter")
        for p, g in zip(self.params, fresh_grads):
            if g is not None and np.shape(g) != p.shape:
                raise InvalidInputError(f"gradient shape {np.shape(g)} does not match parameter {p.shape}")
        for acc, g in zip(st.accumulator, fresh_grads):
            if g is not None:
                if not np.all(np.isfinite(g)):
                    raise NumericalError("non-finite gradient")
                acc += g
        st.accumulation_count += 1
        if st.accumulation_count < st.accumulation_target:
            return False
        self._apply([acc / st.accumulation_target for acc in st.accumulator])
        for acc in st.accumulator:
            acc.fill(0.0)
        st.accumulation_count = 0
        return True

    def _apply(self, grads):
        st = self.state
        st.step += 1
        b1, b2 = st.betas
        bias1 = 1.0 - b1**st.step
        bias2 = 1.0 - b2**st.step
        for p, g, m, v in zip(self.params, grads, st.first_moment, st.second_moment):
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            if st.weight_decay and p.ndim >= 2:
                p.data -= (st.lr * st.weight_decay) * p.data
            p.data -= st.lr * (m / bias1) / (np.sqrt(v / bias2) + st.eps)


def accumulate_and_step(optimizer, fresh_grads=None):
    return optimizer.accumulate_and_step(fresh_grads)
