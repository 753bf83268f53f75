"""Finite-difference validation of analytic gradients."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Dict, Mapping

import numpy as np

from .tensor import Tensor

REL_FLOOR = 1e-5


@dataclass
class GradCheckReport:
    max_rel_error: Dict[str, float] = field(default_factory=dict)
    checked: Dict[str, int] = field(default_factory=dict)

    @property
    def worst(self) -> float:
        return max(self.max_rel_error.values(), default=0.0)

    def passed(self, tolerance: float) -> bool:
        return self.worst <= tolerance

    def __str__(self) -> str:
        rows = [f"  {name:<28s} n={self.checked[name]:<6d} max_rel_err={err:.3e}"
                for name, err in self.max_rel_error.items()]
        return "\n".join(["grad check"] + rows)


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = REL_FLOOR) -> np.ndarray:
    return np.abs(analytic - numeric) / np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)


def grad_check(fn: Callable[[], Tensor], params: Mapping[str, Tensor], h: float = 1e-5,
               max_entries: int | None = None, rng: np.random.Generator | None = None,
               skip: Mapping[str, np.ndarray] | None = None) -> GradCheckReport:
    """Compare autodiff gradients of scalar ``fn()`` with central differences.

    ``params`` must hold float64 tensors that ``fn`` reads on every call. When
    ``max_entries`` is set, a random subset of each group is probed. ``skip``
    maps group names to boolean arrays of entries to leave out, e.g. masked
    weights whose gradient is zero by construction on both routes.
    """
    for name, t in params.items():
        if t.dtype != np.float64:
            raise TypeError(f"grad_check needs float64 tensors; {name} is {t.dtype}")
        t.grad = None
    out = fn()
    out.backward()
    analytic = {name: (np.zeros_like(t.data) if t.grad is None else t.grad.copy()) for name, t in params.items()}

    report = GradCheckReport()
    for name, t in params.items():
        flat_idx = np.arange(t.size)
        if skip is not None and name in skip:
            flat_idx = flat_idx[~np.asarray(skip[name]).reshape(-1)]
        if max_entries is not None and flat_idx.size > max_entries:
            flat_idx = (rng or np.random.default_rng(0)).choice(flat_idx, max_entries, replace=False)
        numeric = np.empty(flat_idx.size)
        view = t.data.reshape(-1)
        for n, i in enumerate(flat_idx):
            orig = view[i]
            view[i] = orig + h
            f_plus = float(fn().data)
            view[i] = orig - h
            f_minus = float(fn().data)
            view[i] = orig
            numeric[n] = (f_plus - f_minus) / (2 * h)
        err = relative_error(analytic[name].reshape(-1)[flat_idx], numeric)
        report.max_rel_error[name] = float(err.max()) if err.size else 0.0
        report.checked[name] = int(flat_idx.size)
    return report
