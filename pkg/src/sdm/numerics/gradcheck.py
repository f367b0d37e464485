"""Central finite-difference verification of analytic gradients."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .tensor import NumericError, Tensor


@dataclass
class GradCheckReport:
    passed: bool
    max_rel_err: float
    n_checked: int
    tol: float
    worst: tuple[int, tuple[int, ...]] | None = None
    failures: list[tuple[int, tuple[int, ...], float, float]] = field(default_factory=list)

    def __str__(self) -> str:
        status = "pass" if self.passed else "FAIL"
        return f"{status}: {self.n_checked} coords, max rel err {self.max_rel_err:.3e} (tol {self.tol:g})"


def rel_err(analytic: float, numeric: float, floor: float = 1e-8) -> float:
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)


def finite_diff_check(
    f: Callable[[], Tensor],
    params: Sequence[Tensor],
    eps: float = 1e-4,
    tol: float = 1e-4,
    max_coords: int | None = None,
    rng: np.random.Generator | None = None,
    floor: float = 1e-8,
) -> GradCheckReport:
    """Compare backprop gradients of ``f`` against central differences.

    ``f`` must rebuild its graph from the current contents of ``params`` on
    every call. When ``max_coords`` is set, that many coordinates are sampled
    uniformly (without replacement) across all parameters using ``rng``.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    for p in params:
        p.zero_grad()
    loss = f()
    loss.backward()
    analytic = [np.zeros(p.shape) if p.grad is None else p.grad.copy() for p in params]

    coords = [(pi, idx) for pi, p in enumerate(params) for idx in np.ndindex(p.shape)]
    if max_coords is not None and max_coords < len(coords):
        rng = rng or np.random.default_rng(0)
        pick = rng.choice(len(coords), size=max_coords, replace=False)
        coords = [coords[i] for i in sorted(pick)]

    worst_err, worst = 0.0, None
    failures = []
    for pi, idx in coords:
        p = params[pi]
        orig = p.data[idx]
        p.data[idx] = orig + eps
        fp = f().item()
        p.data[idx] = orig - eps
        fm = f().item()
        p.data[idx] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise NumericError(f"finite_diff_check: non-finite f at param {pi} index {idx}")
        numeric = (fp - fm) / (2 * eps)
        err = rel_err(float(analytic[pi][idx]), numeric, floor)
        if err > worst_err:
            worst_err, worst = err, (pi, idx)
        if err > tol:
            failures.append((pi, idx, float(analytic[pi][idx]), numeric))
    return GradCheckReport(not failures, worst_err, len(coords), tol, worst, failures)
