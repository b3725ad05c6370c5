"""Finite-difference validation of reverse-mode gradients."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError
from .tensor import Tensor, backward, get_default_dtype, scoped_graph


@dataclass
class GradCheckReport:
    max_rel_err: float
    n_checked: int
    n_excluded: int
    failures: list = field(default_factory=list)  # (input_idx, flat_idx, analytic, numeric, err)

    @property
    def ok(self) -> bool:
        return not self.failures


def kink_mask(x: Tensor, h: float, margin: float = 10.0) -> np.ndarray:
    """Exclusion mask for entries within ``margin*h`` of the abs/relu kink."""
    return np.abs(x.data) <= margin * h


def grad_check(f, inputs: list[Tensor], h: float = 1e-5, tol: float = 1e-5,
               exclude: list[np.ndarray | None] | None = None) -> GradCheckReport:
    """Compare reverse-mode gradients of ``f(inputs)`` (a scalar) against
    central finite differences with step ``h``.

    Requires float64 mode. ``exclude`` masks entries to skip (e.g. points
    within ``h`` of a nondifferentiable kink). The relative error uses
    ``|a - n| / max(|a|, |n|, 1e-3)``.
    """
    if get_default_dtype() != np.float64:
        raise ContractError("grad_check requires float64 mode")
    if exclude is None:
        exclude = [None] * len(inputs)

    for t in inputs:
        t.requires_grad = True
        t.grad = None
    with scoped_graph():
        loss = f(*inputs)
        backward(loss)
        analytic = [t.grad.copy() if t.grad is not None else np.zeros_like(t.data) for t in inputs]

    def eval_loss():
        for t in inputs:
            t.grad = None
        with scoped_graph():
            return f(*inputs).item()

    max_err = 0.0
    n_checked = 0
    n_excluded = 0
    failures = []
    for idx, t in enumerate(inputs):
        flat = t.data.reshape(-1)
        mask = None if exclude[idx] is None else np.asarray(exclude[idx]).reshape(-1)
        for j in range(flat.size):
            if mask is not None and mask[j]:
                n_excluded += 1
                continue
            saved = flat[j]
            flat[j] = saved + h
            up = eval_loss()
            flat[j] = saved - h
            down = eval_loss()
            flat[j] = saved
            numeric = (up - down) / (2 * h)
            a = analytic[idx].reshape(-1)[j]
            err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-3)
            max_err = max(max_err, err)
            n_checked += 1
            if err > tol:
                failures.append((idx, j, float(a), float(numeric), float(err)))
    return GradCheckReport(max_rel_err=max_err, n_checked=n_checked, n_excluded=n_excluded, failures=failures)
