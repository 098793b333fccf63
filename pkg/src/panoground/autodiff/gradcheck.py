"""Central finite-difference gradient checking."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np

from .tensor import Tensor, backward, no_grad


@dataclass
class GradCheckReport:
    errors: dict[str, float] = field(default_factory=dict)
    tol: float = 1e-4
    h: float = 1e-3

    @property
    def passed(self) -> bool:
        return all(e < self.tol for e in self.errors.values())

    @property
    def worst(self) -> float:
        return max(self.errors.values(), default=0.0)

    def lines(self) -> list[str]:
        return [
            f"{'ok  ' if e < self.tol else 'FAIL'} {name:<24s} max rel err {e:.3e}"
            for name, e in self.errors.items()
        ]

    def to_dict(self) -> dict:
        return {"passed": self.passed, "tol": self.tol, "h": self.h, "max_rel_err": dict(self.errors)}


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Largest elementwise discrepancy, scaled by the tensor's gradient magnitude.

    Elementwise ratios blow up wherever a gradient entry is near zero, so the
    denominator is the largest |entry| of either gradient (floored at 1e-12).
    """
    scale = max(float(np.abs(analytic).max(initial=0.0)), float(np.abs(numeric).max(initial=0.0)), 1e-12)
    return float(np.abs(analytic - numeric).max(initial=0.0)) / scale


def grad_check(
    build: Callable[[], Tensor],
    params: Mapping[str, Tensor],
    h: float = 1e-3,
    tol: float = 1e-4,
    dtype=np.float64,
    max_entries: int | None = None,
    seed: int = 0,
) -> GradCheckReport:
    """Compare backprop gradients of ``build()`` against central differences.

    Parameters are promoted to ``dtype`` for the duration of the check and
    restored afterwards. ``max_entries`` caps how many coordinates per tensor
    are perturbed (randomly chosen, seeded); None checks all of them.
    """
    saved = {k: p.data for k, p in params.items()}
    saved_grad = {k: p.grad for k, p in params.items()}
    rng = np.random.default_rng(seed)
    report = GradCheckReport(tol=tol, h=h)
    try:
        for p in params.values():
            p.data = p.data.astype(dtype)
            p.grad = np.zeros_like(p.data)
        backward(build())
        analytic = {k: p.grad.copy() for k, p in params.items()}
        for name, p in params.items():
            flat = p.data.reshape(-1)
            coords = np.arange(flat.size)
            if max_entries is not None and flat.size > max_entries:
                coords = np.sort(rng.choice(flat.size, size=max_entries, replace=False))
            numeric = np.zeros(coords.size)
            for n, i in enumerate(coords):
                orig = flat[i]
                with no_grad():
                    flat[i] = orig + h
                    fp = float(build().data)
                    flat[i] = orig - h
                    fm = float(build().data)
                flat[i] = orig
                numeric[n] = (fp - fm) / (2 * h)
            report.errors[name] = relative_error(analytic[name].reshape(-1)[coords], numeric)
    finally:
        for k, p in params.items():
            p.data = saved[k]
            p.grad = saved_grad[k]
    return report
