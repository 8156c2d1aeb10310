"""Smoothing of per-bin fixed effects and adjusted random components.

Each covariate's local estimates are smoothed separately with a cubic
P-spline (equally spaced knots, second-order difference penalty) whose
smoothing parameter minimizes generalized cross-validation.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np
from scipy import optimize
from scipy.interpolate import BSpline

from .errors import SmoothingError

DEGREE = 3
MAX_BASIS = 35
LOG10_LAMBDA_RANGE = (-8.0, 8.0)


def basis_dimension(M: int) -> int:
    return max(DEGREE + 1, min(math.ceil(M / 2), MAX_BASIS))


def pspline_knots(lo, hi, n_basis, degree=DEGREE):
    nseg = n_basis - degree
    h = (hi - lo) / nseg
    return lo + h * np.arange(-degree, nseg + degree + 1)


def difference_penalty(n_basis, order=2):
    D = np.diff(np.eye(n_basis), n=order, axis=0)
    return D.T @ D


def _design(x, knots, degree=DEGREE):
    # clip into the base interval; design_matrix rejects points outside it
    lo, hi = knots[degree], knots[-degree - 1]
    return BSpline.design_matrix(np.clip(x, lo, hi), knots, degree).toarray()


@dataclass(frozen=True, eq=False)
class FunctionalCoefficients:
    """Smoothed functional fixed effects beta~(s), one P-spline per covariate."""

    knots: np.ndarray
    coef: np.ndarray  # (n_basis, p)
    lam: np.ndarray  # (p,)
    names: tuple
    domain_bounds: tuple
    degree: int = DEGREE
    penalty_order: int = 2

    @property
    def n_basis(self) -> int:
        return self.coef.shape[0]

    @property
    def p(self) -> int:
        return self.coef.shape[1]

    def evaluate(self, s) -> np.ndarray:
        """Values beta~(s), shape (len(s), p)."""
        s = np.atleast_1d(np.asarray(s, dtype=float))
        return _design(s, self.knots, self.degree) @ self.coef

    __call__ = evaluate


def _gcv_path(B, P, y, log10_lams):
    BtB = B.T @ B
    Bty = B.T @ y
    n = len(y)
    out = []
    for ll in log10_lams:
        A = BtB + 10.0**ll * P
        c = np.linalg.solve(A, Bty)
        resid = y - B @ c
        edf = np.trace(np.linalg.solve(A, BtB))
        out.append(n * (resid @ resid) / max(n - edf, 1e-10) ** 2)
    return np.array(out)


def select_lambda(B, P, y):
    """GCV-optimal smoothing parameter over a log grid, refined by Brent's method."""
    grid = np.linspace(*LOG10_LAMBDA_RANGE, 81)
    scores = _gcv_path(B, P, y, grid)
    k = int(np.argmin(scores))
    at_edge = k in (0, len(grid) - 1)
    if not at_edge:
        res = optimize.minimize_scalar(
            lambda ll: _gcv_path(B, P, y, [ll])[0],
            bounds=(grid[k - 1], grid[k + 1]),
            method="bounded",
            options={"xatol": 1e-4},
        )
        best = float(res.x) if res.fun <= scores[k] else float(grid[k])
    else:
        best = float(grid[k])
    return 10.0**best, at_edge


def smooth_coefficients(beta_hats, centers, domain_bounds=None, *, lam=None, names=None) -> FunctionalCoefficients:
    """Smooth the M x p local fixed-effect estimates along the domain.

    Rows with NaN (failed bins) are left out for that covariate. ``lam``
    fixes the smoothing parameter(s) instead of selecting them by GCV.
    """
    beta_hats = np.asarray(beta_hats, dtype=float)
    if beta_hats.ndim == 1:
        beta_hats = beta_hats[:, None]
    centers = np.asarray(centers, dtype=float)
    M, p = beta_hats.shape
    if domain_bounds is None:
        domain_bounds = (centers.min(), centers.max())
    lo, hi = map(float, domain_bounds)
    K = basis_dimension(M)
    knots = pspline_knots(lo, hi, K)
    P = difference_penalty(K)
    B_all = _design(centers, knots)
    names = tuple(names) if names is not None else tuple(f"x{k}" for k in range(p))
    lams = np.broadcast_to(np.asarray(lam, dtype=float), (p,)) if lam is not None else None

    coef = np.zeros((K, p))
    chosen = np.zeros(p)
    for k in range(p):
        ok = np.isfinite(beta_hats[:, k])
        if ok.sum() < DEGREE + 1:
            raise SmoothingError(f"covariate {names[k]!r}: {ok.sum()} usable bins, need at least {DEGREE + 1}")
        B, y = B_all[ok], beta_hats[ok, k]
        if lams is None:
            lk, edge = select_lambda(B, P, y)
            if edge:
                warnings.warn(
                    f"GCV optimum for {names[k]!r} at search boundary; using lambda={lk:.3g}",
                    stacklevel=2,
                )
        else:
            lk = float(lams[k])
        coef[:, k] = np.linalg.solve(B.T @ B + lk * P, B.T @ y)
        chosen[k] = lk
    return FunctionalCoefficients(knots=knots, coef=coef, lam=chosen, names=names, domain_bounds=(lo, hi))


@dataclass(frozen=True, eq=False)
class AdjustedComponents:
    """r^a_ij(c_m) = eta^_ij(c_m) - X_ij beta~(c_m), NaN where the local fit is missing."""

    values: np.ndarray  # (V, M)
    grid: np.ndarray  # bin centers
    visit_subject: np.ndarray  # (V,)

    @property
    def missing(self) -> np.ndarray:
        return np.isnan(self.values)


def adjusted_random_components(fits, fcoef: FunctionalCoefficients, X, visit_subject, grid) -> AdjustedComponents:
    """Subtract the smoothed fixed part from every local linear predictor.

    ``fits`` is one :class:`~frim.glmm.LocalFit` per bin, in layout order.
    Non-converged fits contribute missing values for all visits.
    """
    grid = np.asarray(grid, dtype=float)
    X = np.asarray(X, dtype=float)
    fixed = X @ fcoef.evaluate(grid).T  # (V, M)
    eta = np.full(fixed.shape, np.nan)
    for m, fit in enumerate(fits):
        if fit.converged:
            eta[:, m] = fit.eta_hat
    return AdjustedComponents(values=eta - fixed, grid=grid, visit_subject=np.asarray(visit_subject))


def stack_beta_hats(fits, p) -> np.ndarray:
    out = np.full((len(fits), p), np.nan)
    for m, fit in enumerate(fits):
        if fit.converged:
            out[m] = fit.beta_hat
    return out
