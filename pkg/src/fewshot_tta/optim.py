"""Adam optimizer over named parameter dictionaries."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .tensor import Tensor

logger = logging.getLogger(__name__)


@dataclass
class AdamState:
    """Moment buffers and step counter; one entry per named parameter."""

    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    first_moment: dict[str, np.ndarray] = field(default_factory=dict)
    second_moment: dict[str, np.ndarray] = field(default_factory=dict)
    step_count: int = 0
    skipped_steps: int = 0


class Adam:
    """Standard Adam with bias correction.

    An update with any non-finite gradient is skipped entirely (parameters,
    moments and step counter untouched) and counted in ``skipped_steps``.
    """

    def __init__(self, params: dict[str, Tensor], lr: float = 1e-3,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        if lr <= 0:
            raise ValueError(f"learning rate must be positive, got {lr}")
        self.params = dict(params)
        self.state = AdamState(lr=lr, beta1=beta1, beta2=beta2, eps=eps)
        for name, p in self.params.items():
            self.state.first_moment[name] = np.zeros_like(p.data)
            self.state.second_moment[name] = np.zeros_like(p.data)

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def step(self) -> bool:
        """Apply one update from the current ``.grad`` buffers.

        Returns True if the update was applied, False if it was skipped
        because a gradient contained NaN or Inf. A missing gradient is
        treated as zero.
        """
        grads = {}
        for name, p in self.params.items():
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            if g.shape != p.data.shape:
                raise ValueError(f"gradient shape {g.shape} does not match parameter {name!r} shape {p.data.shape}")
            if not np.all(np.isfinite(g)):
                self.state.skipped_steps += 1
                logger.warning("non-finite gradient for %r, skipping update (skipped=%d)",
                               name, self.state.skipped_steps)
                return False
            grads[name] = g

        st = self.state
        st.step_count += 1
        t = st.step_count
        bias1 = 1.0 - st.beta1 ** t
        bias2 = 1.0 - st.beta2 ** t
        for name, p in self.params.items():
            g = grads[name]
            m = st.first_moment[name]
            v = st.second_moment[name]
            m *= st.beta1
            m += (1.0 - st.beta1) * g
            v *= st.beta2
            v += (1.0 - st.beta2) * (g * g)
            p.data -= st.lr * (m / bias1) / (np.sqrt(v / bias2) + st.eps)
        return True


def adam_step(params: dict[str, Tensor], grads: dict[str, np.ndarray], state: AdamState) -> bool:
    """Functional single Adam update against explicit gradients.

    Same semantics as :meth:`Adam.step`, for callers that manage gradient
    buffers themselves.
    """
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            state.skipped_steps += 1
            logger.warning("non-finite gradient for %r, skipping update (skipped=%d)",
                           name, state.skipped_steps)
            return False
    state.step_count += 1
    t = state.step_count
    bias1 = 1.0 - state.beta1 ** t
    bias2 = 1.0 - state.beta2 ** t
    for name, p in params.items():
        g = np.asarray(grads[name], dtype=np.float64)
        if name not in state.first_moment:
            state.first_moment[name] = np.zeros_like(p.data)
            state.second_moment[name] = np.zeros_like(p.data)
        m = state.first_moment[name]
        v = state.second_moment[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        p.data -= state.lr * (m / bias1) / (np.sqrt(v / bias2) + state.eps)
    return True
