"""
Weighted nonlinear least squares by Levenberg-Marquardt.

Minimises sum(((y - f(x; theta)) / sigma)**2). The Jacobian is taken by
forward differences with a per-parameter step max(1e-6*|theta_j|, 1e-12).
Damping is Marquardt's diagonal scaling, (A + lambda*diag(A)) step = g,
with lambda starting at 1e-3, multiplied by 10 on a rejected step and
divided by 10 on an accepted one. The fit stops when an accepted step lowers
the cost by less than 1e-10 relative, when the cost falls to machine
precision of sum((y/sigma)**2), when the proposed step is shorter than
1e-12 relative to |theta|, or after 200 iterations (one iteration = one
proposed step). At least one point more than there are parameters is
required.

The covariance is inv(A) at the optimum, scaled by the reduced chi-square
unless scale_covariance is False.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import FitError

logger = logging.getLogger(__name__)

Model = Callable[[np.ndarray, np.ndarray], np.ndarray]

REL_STEP = 1e-6
ABS_STEP_FLOOR = 1e-12
LAMBDA_START = 1e-3
LAMBDA_MAX = 1e16
COST_TOL = 1e-10
STEP_TOL = 1e-12
# Cost at or below this fraction of sum((y/sigma)**2) is an exact fit.
EXACT_COST = float(np.finfo(float).eps)
MAX_ITERATIONS = 200
# Condition number of the correlation form of A beyond which A is singular.
SINGULAR_COND = 1e14


@dataclass(frozen=True, eq=False)
class FitResult:
    params: np.ndarray
    covariance: np.ndarray
    chi2_reduced: float
    iterations: int
    converged: bool
    message: str = ""
    cost: float = float("nan")
    cost_history: tuple[float, ...] = field(default_factory=tuple)

    @property
    def stderr(self) -> np.ndarray:
        diag = np.diag(self.covariance)
        return np.sqrt(np.where(diag >= 0, diag, np.nan))

    def to_dict(self, names: Sequence[str]) -> dict:
        """JSON-ready summary keyed by parameter name; NaN becomes None."""
        def clean(value):
            value = float(value)
            return value if np.isfinite(value) else None

        return {
            "params": {n: clean(v) for n, v in zip(names, self.params)},
            "stderr": {n: clean(v) for n, v in zip(names, self.stderr)},
            "chi2_reduced": clean(self.chi2_reduced),
            "converged": bool(self.converged),
            "iterations": int(self.iterations),
            "message": self.message,
        }


def _steps(theta: np.ndarray, rel: float) -> np.ndarray:
    return np.maximum(rel * np.abs(theta), ABS_STEP_FLOOR)


def _evaluate(model: Model, xs: np.ndarray, theta: np.ndarray) -> np.ndarray:
    f = np.asarray(model(xs, theta), dtype=float)
    if np.any(np.isnan(f)):
        raise FitError(f"model returned NaN at parameters {theta.tolist()}")
    return f


def forward_jacobian(model: Model, xs, theta, rel_step: float = REL_STEP) -> np.ndarray:
    """d f / d theta by forward differences."""
    xs = np.asarray(xs, dtype=float)
    theta = np.asarray(theta, dtype=float)
    f0 = _evaluate(model, xs, theta)
    jac = np.empty((f0.size, theta.size))
    for j, h in enumerate(_steps(theta, rel_step)):
        shifted = theta.copy()
        shifted[j] += h
        h = shifted[j] - theta[j]
        jac[:, j] = (_evaluate(model, xs, shifted) - f0) / h
    return jac


def central_jacobian(model: Model, xs, theta, rel_step: float = 1e-5) -> np.ndarray:
    """Central-difference Jacobian, used as a reference for forward_jacobian."""
    xs = np.asarray(xs, dtype=float)
    theta = np.asarray(theta, dtype=float)
    columns = []
    for j, h in enumerate(_steps(theta, rel_step)):
        up, down = theta.copy(), theta.copy()
        up[j] += h
        down[j] -= h
        columns.append((_evaluate(model, xs, up) - _evaluate(model, xs, down)) / (up[j] - down[j]))
    return np.column_stack(columns)


def _is_singular(a: np.ndarray) -> bool:
    diag = np.diag(a)
    if not np.all(np.isfinite(a)) or np.any(diag <= 0):
        return True
    scale = 1.0 / np.sqrt(diag)
    return np.linalg.cond(a * scale[:, None] * scale[None, :]) > SINGULAR_COND


def _normal_equations(model, xs, theta, sigmas, r):
    jac = forward_jacobian(model, xs, theta) / sigmas[:, None]
    # r = (y - f)/sigma, so the Gauss-Newton step solves (J^T J) step = J^T r.
    return jac.T @ jac, jac.T @ r


def lm_fit(
    model: Model,
    xs,
    ys,
    sigmas,
    init,
    *,
    max_iterations: int = MAX_ITERATIONS,
    scale_covariance: bool = True,
) -> FitResult:
    xs = np.asarray(xs, dtype=float)
    ys = np.asarray(ys, dtype=float)
    sigmas = np.asarray(sigmas, dtype=float)
    theta = np.array(init, dtype=float)
    n, p = ys.size, theta.size

    if not (len(xs) == n == sigmas.size):
        raise FitError(f"xs, ys and sigmas differ in length ({len(xs)}, {n}, {sigmas.size})")
    if n <= p:
        raise FitError(f"{n} points cannot determine {p} parameters")
    if not np.all(sigmas > 0):
        raise FitError("sigmas must be positive")
    if not np.all(np.isfinite(theta)):
        raise FitError(f"initial parameters must be finite, got {theta.tolist()}")
    if not np.all(np.isfinite(ys)):
        raise FitError("data contain non-finite values")

    def residuals(t):
        return (ys - _evaluate(model, xs, t)) / sigmas

    scale = float((ys / sigmas) @ (ys / sigmas))
    r = residuals(theta)
    cost = float(r @ r)
    history = [cost]
    lam = LAMBDA_START
    converged = False
    message = "maximum iterations reached"
    iterations = 0
    a = g = None

    while iterations < max_iterations:
        if a is None:
            a, g = _normal_equations(model, xs, theta, sigmas, r)
            if _is_singular(a):
                message = "singular normal equations"
                break
        if cost == 0.0:
            converged = True
            message = "exact fit"
            break

        iterations += 1
        try:
            step = np.linalg.solve(a + lam * np.diag(np.diag(a)), g)
        except np.linalg.LinAlgError:
            message = "singular normal equations"
            break
        if np.linalg.norm(step) <= STEP_TOL * (np.linalg.norm(theta) + STEP_TOL):
            converged = True
            message = "step below tolerance"
            break

        trial = theta + step
        r_trial = residuals(trial)
        cost_trial = float(r_trial @ r_trial)
        logger.debug("lm iter %d: cost %.6g -> %.6g, lambda %.1e", iterations, cost, cost_trial, lam)

        if cost_trial < cost:
            decrease = (cost - cost_trial) / cost
            theta, r, cost = trial, r_trial, cost_trial
            history.append(cost)
            lam /= 10.0
            a = None
            if cost <= EXACT_COST * scale:
                converged = True
                message = "exact fit"
                break
            if decrease < COST_TOL:
                converged = True
                message = "relative cost decrease below tolerance"
                break
        else:
            lam *= 10.0
            if lam > LAMBDA_MAX:
                message = "damping overflow"
                break

    dof = n - p
    chi2_reduced = cost / dof if dof > 0 else float("nan")
    if a is None:
        a, g = _normal_equations(model, xs, theta, sigmas, r)
    if _is_singular(a):
        converged = False
        if "singular" not in message:
            message = "singular normal equations at optimum"
        covariance = np.linalg.pinv(a)
    else:
        covariance = np.linalg.inv(a)
    if scale_covariance and dof > 0:
        covariance = covariance * chi2_reduced
    covariance = 0.5 * (covariance + covariance.T)

    if not converged:
        logger.warning("fit did not converge after %d iterations: %s", iterations, message)
    return FitResult(
        params=theta,
        covariance=covariance,
        chi2_reduced=chi2_reduced,
        iterations=iterations,
        converged=converged,
        message=message,
        cost=cost,
        cost_history=tuple(history),
    )
