"""Finite-difference analysis of an optimum.

Central-difference gradient and Hessian with validated step sizes, the
per-variable uncertainty sigma_i(eps) (displacement of one variable such
that the re-minimized objective rises by eps), the correlation matrix
rho_ij from the normalized inverse Hessian, and the sigma_inner
consistency relation.

Convention: for a quadratic written f = f0 + (x - x*)^T M (x - x*) the
uncertainty satisfying the defining condition exactly is
``sigma_i^2 = (M^-1)_ii * eps``; since the Hessian of that quadratic is
``2 M``, the default implementation uses ``sigma_i^2 = 2 (H^-1)_ii * eps``.
``convention="literal"`` drops the factor 2.
"""

from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

DEFAULT_EPSILON = 0.001

#: relative first-derivative residual accepted at a claimed minimum
FIRST_DERIV_TOL = 1e-6
#: relative agreement required between second derivatives at h and 1.15 h
STABILITY_TOL = 0.02
#: step used for the stability comparison
STABILITY_FACTOR = 1.15


class NotPositiveDefiniteError(ValueError):
    """Hessian is not positive definite (saddle point or wrong minimum)."""

    def __init__(self, eigenvalue: float, index: int):
        self.eigenvalue = eigenvalue
        self.index = index
        super().__init__(
            f"Hessian eigenvalue {index} is {eigenvalue:.6g} <= 0; "
            "the point is not a strict minimum"
        )


class StepSelectionError(RuntimeError):
    """No finite-difference step satisfied both acceptance criteria."""

    def __init__(self, variable: int, best_step: float, residual: float, ratio: float):
        self.variable = variable
        self.best_step = best_step
        self.residual = residual
        self.ratio = ratio
        super().__init__(
            f"no step accepted for variable {variable}: best candidate "
            f"h={best_step:.3g} has first-derivative residual {residual:.3g} "
            f"and stability ratio {ratio:.3g}; the point may not be a minimum"
        )


def _steps_vector(steps, n: int) -> np.ndarray:
    arr = np.broadcast_to(np.asarray(steps, dtype=float), (n,)).copy()
    if np.any(arr <= 0.0) or not np.all(np.isfinite(arr)):
        raise ValueError("steps must be positive and finite")
    return arr


def _checked(f: Callable[[np.ndarray], float], x: np.ndarray) -> float:
    value = float(f(x))
    if not math.isfinite(value):
        raise ValueError(f"objective returned non-finite value {value!r} at {x!r}")
    return value


def fd_gradient(f: Callable[[np.ndarray], float], x, steps) -> np.ndarray:
    """Central-difference gradient with per-coordinate steps."""
    x = np.asarray(x, dtype=float)
    h = _steps_vector(steps, x.size)
    grad = np.empty(x.size)
    for k in range(x.size):
        e = np.zeros(x.size)
        e[k] = h[k]
        grad[k] = (_checked(f, x + e) - _checked(f, x - e)) / (2.0 * h[k])
    return grad


def fd_hessian(f: Callable[[np.ndarray], float], x, steps) -> np.ndarray:
    """Central-difference Hessian, symmetrized.

    Diagonal from the 3-point stencil, off-diagonal from the 4-point cross
    stencil (+,+) - (+,-) - (-,+) + (-,-) over 4 h_k h_j.
    """
    x = np.asarray(x, dtype=float)
    n = x.size
    h = _steps_vector(steps, n)
    hess = np.empty((n, n))
    f0 = _checked(f, x)
    for k in range(n):
        ek = np.zeros(n)
        ek[k] = h[k]
        hess[k, k] = (_checked(f, x + ek) - 2.0 * f0 + _checked(f, x - ek)) / h[k] ** 2
        for j in range(k + 1, n):
            ej = np.zeros(n)
            ej[j] = h[j]
            cross = (
                _checked(f, x + ek + ej)
                - _checked(f, x + ek - ej)
                - _checked(f, x - ek + ej)
                + _checked(f, x - ek - ej)
            ) / (4.0 * h[k] * h[j])
            hess[k, j] = cross
            hess[j, k] = cross
    return 0.5 * (hess + hess.T)


@dataclass(frozen=True)
class StepDiagnostics:
    """Acceptance evidence for the chosen finite-difference steps."""

    first_deriv_residual: np.ndarray  # |f'| * h / max(|f|, tiny), per variable
    stability_ratio: np.ndarray  # relative d2 change under a 1.15x step


def choose_steps(f: Callable[[np.ndarray], float], x, h_init=0.1,
                 trials: int = 12) -> tuple[np.ndarray, StepDiagnostics]:
    """Validated per-variable steps at a claimed minimum ``x``.

    Candidates ``h_init * 2^-k`` are scanned per variable; the largest step
    is accepted for which (a) the central first derivative is negligible
    against the function value and (b) the diagonal second derivative agrees
    within 2% when the step grows by 15%.  Raises
    :class:`StepSelectionError` (reporting the best candidate) when no
    candidate passes, which signals that ``x`` is not a minimum or that the
    function is too noisy.
    """
    x = np.asarray(x, dtype=float)
    n = x.size
    h0 = _steps_vector(h_init, n)
    if trials < 1:
        raise ValueError("trials must be at least 1")
    f0 = _checked(f, x)
    f_scale = max(abs(f0), 1e-12)
    # curvatures below this floor count as zero when comparing stability
    curvature_floor = 1e-6 * (1.0 + abs(f0))

    steps = np.empty(n)
    residuals = np.empty(n)
    ratios = np.empty(n)
    for k in range(n):
        e = np.zeros(n)
        best = None  # (residual, ratio, h) of the closest-to-passing candidate
        chosen = None
        for trial in range(trials):
            h = h0[k] * 0.5**trial
            e[k] = h
            fp, fm = _checked(f, x + e), _checked(f, x - e)
            d1 = (fp - fm) / (2.0 * h)
            residual = abs(d1) * h / f_scale
            d2 = (fp - 2.0 * f0 + fm) / h**2
            e[k] = STABILITY_FACTOR * h
            fp2, fm2 = _checked(f, x + e), _checked(f, x - e)
            d2b = (fp2 - 2.0 * f0 + fm2) / (STABILITY_FACTOR * h) ** 2
            scale = max(abs(d2), abs(d2b), curvature_floor)
            ratio = abs(d2 - d2b) / scale
            e[k] = 0.0
            if best is None or (residual, ratio) < best[:2]:
                best = (residual, ratio, h)
            if residual < FIRST_DERIV_TOL and ratio <= STABILITY_TOL:
                chosen = (h, residual, ratio)
                break
        if chosen is None:
            assert best is not None
            raise StepSelectionError(k, best[2], best[0], best[1])
        steps[k], residuals[k], ratios[k] = chosen
    return steps, StepDiagnostics(first_deriv_residual=residuals, stability_ratio=ratios)


def _invert_spd(hessian: np.ndarray) -> tuple[np.ndarray, float]:
    """Inverse of a symmetric positive-definite matrix plus its condition.

    Near-singular matrices (condition above 1e12) degrade to a
    pseudo-inverse with a warning; flat directions are exactly the
    interesting case, so the analysis keeps going.
    """
    h = np.asarray(hessian, dtype=float)
    h = 0.5 * (h + h.T)
    eigvals = np.linalg.eigvalsh(h)
    worst = int(np.argmin(eigvals))
    if eigvals[worst] <= 0.0:
        raise NotPositiveDefiniteError(float(eigvals[worst]), worst)
    condition = float(eigvals[-1] / eigvals[0])
    if condition > 1e12:
        warnings.warn(
            f"Hessian condition number {condition:.3g} exceeds 1e12; "
            "using a pseudo-inverse",
            RuntimeWarning,
            stacklevel=2,
        )
        return np.linalg.pinv(h), condition
    return np.linalg.inv(h), condition


def uncertainties(hessian: np.ndarray, epsilon: float, convention: str = "appendix") -> np.ndarray:
    """Per-variable uncertainty sigma_i(eps) from the inverse Hessian.

    ``convention="appendix"`` (default) uses ``sigma_i^2 = 2 (H^-1)_ii eps``,
    which satisfies the defining constrained-minimum condition exactly for
    quadratics; ``"literal"`` uses ``sigma_i^2 = (H^-1)_ii eps``.
    """
    if epsilon <= 0.0:
        raise ValueError("epsilon must be positive")
    if convention not in ("appendix", "literal"):
        raise ValueError("convention must be 'appendix' or 'literal'")
    inv, _ = _invert_spd(hessian)
    factor = 2.0 if convention == "appendix" else 1.0
    diag = np.diag(inv)
    return np.sqrt(factor * diag * epsilon)


def correlations(hessian: np.ndarray) -> np.ndarray:
    """Correlation matrix rho_ij = (H^-1)_ij / sqrt((H^-1)_ii (H^-1)_jj)."""
    inv, _ = _invert_spd(hessian)
    d = np.sqrt(np.diag(inv))
    rho = inv / np.outer(d, d)
    np.fill_diagonal(rho, 1.0)
    return rho


def sigma_inner(sigma_j: float, rho_ij: float) -> float:
    """Would-be uncertainty of variable j with its partner frozen."""
    if abs(rho_ij) > 1.0:
        raise ValueError("correlation must lie in [-1, 1]")
    return sigma_j * math.sqrt(1.0 - rho_ij**2)


@dataclass(frozen=True)
class HessianReport:
    """Full sensitivity analysis of a minimum."""

    x_star: np.ndarray
    f_star: float
    hessian: np.ndarray
    hessian_inv: np.ndarray
    steps: np.ndarray
    epsilon: float
    sigma: np.ndarray
    rho: np.ndarray
    diagnostics: StepDiagnostics
    condition: float


def hessian_report(f: Callable[[np.ndarray], float], x_star, epsilon: float = DEFAULT_EPSILON,
                   h_init=0.1, trials: int = 12, steps=None,
                   convention: str = "appendix") -> HessianReport:
    """Validate steps, difference the Hessian and assemble the report."""
    x_star = np.asarray(x_star, dtype=float)
    if steps is None:
        steps, diagnostics = choose_steps(f, x_star, h_init=h_init, trials=trials)
    else:
        steps = _steps_vector(steps, x_star.size)
        grad = fd_gradient(f, x_star, steps)
        f_scale = max(abs(_checked(f, x_star)), 1e-12)
        diagnostics = StepDiagnostics(
            first_deriv_residual=np.abs(grad) * steps / f_scale,
            stability_ratio=np.zeros(x_star.size),
        )
    hess = fd_hessian(f, x_star, steps)
    inv, condition = _invert_spd(hess)
    sigma = uncertainties(hess, epsilon, convention=convention)
    rho = correlations(hess)
    return HessianReport(
        x_star=x_star,
        f_star=_checked(f, x_star),
        hessian=hess,
        hessian_inv=inv,
        steps=steps,
        epsilon=epsilon,
        sigma=sigma,
        rho=rho,
        diagnostics=diagnostics,
        condition=condition,
    )


def write_sensitivity_csv(report: HessianReport, names: Sequence[str], path) -> None:
    """Per-variable table: value at the minimum, step, sigma, diagnostics."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["variable", "value_at_min", "step", "sigma",
                         "first_deriv_residual", "stability_ratio"])
        for i, name in enumerate(names):
            writer.writerow([
                name,
                repr(float(report.x_star[i])),
                repr(float(report.steps[i])),
                repr(float(report.sigma[i])),
                repr(float(report.diagnostics.first_deriv_residual[i])),
                repr(float(report.diagnostics.stability_ratio[i])),
            ])


def write_correlation_csv(rho: np.ndarray, names: Sequence[str], path) -> None:
    """Full correlation matrix with a header row/column of variable names."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["variable", *names])
        for i, name in enumerate(names):
            writer.writerow([name, *[repr(float(v)) for v in rho[i]]])
