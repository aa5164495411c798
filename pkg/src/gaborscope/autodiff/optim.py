"""Adam with bias correction and a step learning-rate schedule."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import NonFiniteError, Tensor


@dataclass
class AdamState:
    lr: float = 0.000625
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


class Adam:
    """Adam over a name -> Tensor mapping.

    ``step`` reads each parameter's ``.grad`` (missing gradients count as zero)
    and updates ``.data`` in place.
    """

    def __init__(self, params: dict[str, Tensor], lr: float = 0.000625,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.state = AdamState(lr=lr, beta1=beta1, beta2=beta2, eps=eps)
        for name, p in params.items():
            self.state.m[name] = np.zeros_like(p.data)
            self.state.v[name] = np.zeros_like(p.data)

    @property
    def lr(self) -> float:
        return self.state.lr

    @lr.setter
    def lr(self, value: float) -> None:
        self.state.lr = value

    def step(self, grads: dict[str, np.ndarray] | None = None) -> None:
        st = self.state
        if grads is None:
            grads = {n: p.grad for n, p in self.params.items()}
        for name, g in grads.items():
            if g is not None and not np.all(np.isfinite(g)):
                raise NonFiniteError(f"gradient of {name}")
        st.t += 1
        c1 = 1.0 - st.beta1 ** st.t
        c2 = 1.0 - st.beta2 ** st.t
        for name, p in self.params.items():
            g = grads.get(name)
            if g is None:
                g = np.zeros_like(p.data)
            m = st.m[name] = st.beta1 * st.m[name] + (1.0 - st.beta1) * g
            v = st.v[name] = st.beta2 * st.v[name] + (1.0 - st.beta2) * g * g
            update = st.lr * (m / c1) / (np.sqrt(v / c2) + st.eps)
            p.data = (p.data - update).astype(p.data.dtype)


def step_decay(iteration: int, initial_lr: float, every: int, factor: float) -> float:
    """Learning rate after ``iteration`` completed steps: ``initial * factor ** (iteration // every)``."""
    return initial_lr * factor ** (iteration // every)
