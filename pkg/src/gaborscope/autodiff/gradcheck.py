"""Finite-difference verification of analytic gradients."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor


@dataclass
class GradCheckReport:
    max_rel_error: float
    max_abs_error: float
    worst: tuple[str, tuple[int, ...]] | None
    checked: int

    def ok(self, tol: float) -> bool:
        return self.max_rel_error < tol


def relative_error(analytic: float, numeric: float, floor: float = 1e-8) -> float:
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)


def grad_check(fn: Callable[[], Tensor], params: Sequence[Tensor] | dict[str, Tensor],
               delta: float = 1e-5, max_entries: int | None = None,
               rng: np.random.Generator | None = None, floor: float = 1e-8) -> GradCheckReport:
    """Compare reverse-mode gradients of scalar ``fn()`` with central differences.

    ``fn`` must rebuild the graph from the current ``.data`` of ``params`` on
    each call.  When ``max_entries`` is given, that many entries per parameter
    are sampled instead of checking every element.  Relative error uses
    ``max(|a|, |n|, floor)`` as denominator so exact zeros compare cleanly.
    """
    named = params.items() if isinstance(params, dict) else ((f"p{i}", p) for i, p in enumerate(params))
    named = list(named)
    out = fn()
    out.backward()
    analytic = {name: p.grad.copy() for name, p in named}

    worst_rel, worst_abs, worst, count = 0.0, 0.0, None, 0
    for name, p in named:
        flat = p.data.reshape(-1)
        idx = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            idx = (rng or np.random.default_rng(0)).choice(flat.size, max_entries, replace=False)
        for j in idx:
            orig = flat[j]
            flat[j] = orig + delta
            fp = float(fn().data)
            flat[j] = orig - delta
            fm = float(fn().data)
            flat[j] = orig
            num = (fp - fm) / (2 * delta)
            ana = float(analytic[name].reshape(-1)[j])
            rel = relative_error(ana, num, floor)
            count += 1
            worst_abs = max(worst_abs, abs(ana - num))
            if rel > worst_rel:
                worst_rel = rel
                worst = (name, np.unravel_index(j, p.shape))
    return GradCheckReport(worst_rel, worst_abs, worst, count)
