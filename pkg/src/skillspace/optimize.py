"""Bounded limited-memory quasi-Newton driver.

Thin wrapper over scipy's L-BFGS-B: feasible iterates under per-coordinate
lower bounds, monotone decrease along accepted steps, and termination when
the relative change between consecutive objective values drops below `tol`
(or the iteration cap is hit). Convergence by gradient norm alone is
effectively disabled so the relative-change rule governs.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np
from scipy.optimize import minimize


@dataclass
class MinimizeResult:
    x: np.ndarray
    fun: float
    n_iterations: int
    converged: bool
    message: str


def minimize_bounded(
    fun_and_grad: Callable[[np.ndarray], tuple[float, np.ndarray]],
    x0: np.ndarray,
    lower_bounds: Optional[np.ndarray] = None,
    tol: float = 1e-3,
    max_iter: int = 1000,
    memory: int = 10,
) -> MinimizeResult:
    """Minimize fun subject to x >= lower_bounds (entries may be -inf).

    `fun_and_grad` returns (value, gradient). Raises no exception on
    non-convergence; inspect `converged` on the result.
    """
    x0 = np.asarray(x0, dtype=float)
    bounds = None
    if lower_bounds is not None:
        lower_bounds = np.asarray(lower_bounds, dtype=float)
        if lower_bounds.shape != x0.shape:
            raise ValueError("lower_bounds must match x0 in shape")
        bounds = [(lb if np.isfinite(lb) else None, None) for lb in lower_bounds]
        x0 = np.maximum(x0, np.where(np.isfinite(lower_bounds), lower_bounds, -np.inf))

    if x0.size == 0:
        return MinimizeResult(x=x0, fun=float(fun_and_grad(x0)[0]), n_iterations=0, converged=True, message="empty problem")

    res = minimize(
        fun_and_grad,
        x0,
        jac=True,
        method="L-BFGS-B",
        bounds=bounds,
        options={
            "maxiter": max_iter,
            "maxcor": memory,
            "ftol": tol,
            # keep the gradient criterion from preempting the relative-change rule
            "gtol": 1e-12,
            "maxls": 50,
        },
    )
    # status 0: ftol/gtol satisfied; 1: iteration cap; 2: abnormal line search
    return MinimizeResult(
        x=np.asarray(res.x, dtype=float),
        fun=float(res.fun),
        n_iterations=int(res.nit),
        converged=bool(res.status == 0),
        message=str(res.message),
    )
