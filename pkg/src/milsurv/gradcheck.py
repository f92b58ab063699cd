"""Finite-difference verification of tape gradients.

Central differences (f(x+h) - f(x-h)) / 2h against the analytic gradients,
parameter by parameter, at 64-bit precision. The relative error metric is
|a - n| / max(1, |a|, |n|) so tiny gradients do not blow up the ratio.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .errors import ConfigurationError


@dataclass
class GradCheckResult:
    name: str
    max_rel_error: float
    tol: float
    note: str = ""

    @property
    def passed(self) -> bool:
        return math.isfinite(self.max_rel_error) and self.max_rel_error < self.tol

    def __str__(self) -> str:
        status = "ok" if self.passed else "FAIL"
        line = f"{self.name}: max_rel_error={self.max_rel_error:.3e} tol={self.tol:.1e} [{status}]"
        return line + (f" ({self.note})" if self.note else "")


def _rel_error(a: float, n: float) -> float:
    return abs(a - n) / max(1.0, abs(a), abs(n))


def grad_check(f: Callable[[ad.Tape | None], ad.Tensor],
               params: Sequence[tuple[str, ad.Tensor]],
               step: float = 1e-5,
               tol: float = 1e-6) -> list[GradCheckResult]:
    """Compare tape gradients of ``f`` against central differences.

    ``f(tape)`` must rebuild the same scalar loss on every call (fix any
    randomness internally). Parameters must be float64; a non-finite loss
    is reported as a failed check rather than raised.
    """
    for name, p in params:
        if p.dtype != np.float64:
            raise ConfigurationError(f"grad_check requires float64 parameters ({name} is {p.dtype})")

    for _, p in params:
        p.zero_grad()
    tape = ad.Tape()
    loss = f(tape)
    if loss.size != 1:
        raise ConfigurationError(f"grad_check loss must be scalar, got shape {loss.shape}")
    if not np.isfinite(loss.data).all():
        return [GradCheckResult(name, math.inf, tol, "non-finite loss") for name, _ in params]
    ad.backward(loss, tape)
    analytic = {name: (np.zeros_like(p.data) if p.grad is None else p.grad.copy())
                for name, p in params}

    results = []
    for name, p in params:
        worst = 0.0
        note = ""
        flat = p.data.reshape(-1)
        aflat = analytic[name].reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            f_plus = float(f(None).data.reshape(-1)[0])
            flat[i] = orig - step
            f_minus = float(f(None).data.reshape(-1)[0])
            flat[i] = orig
            if not (math.isfinite(f_plus) and math.isfinite(f_minus)):
                worst = math.inf
                note = "non-finite perturbed loss"
                break
            numeric = (f_plus - f_minus) / (2.0 * step)
            worst = max(worst, _rel_error(float(aflat[i]), numeric))
        results.append(GradCheckResult(name, worst, tol, note))
    return results


def max_error(results: Sequence[GradCheckResult]) -> float:
    return max((r.max_rel_error for r in results), default=0.0)


def all_passed(results: Sequence[GradCheckResult]) -> bool:
    return all(r.passed for r in results)
