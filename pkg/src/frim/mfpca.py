"""Two-level functional PCA of adjusted random components.

Covariances are moment estimates on the bin-center grid. Products within a
visit estimate the total covariance; products across distinct visits of the
same subject estimate the subject-level (between) covariance; the difference
is the visit-level (within) covariance. Local-estimation noise only inflates
the diagonal of the within covariance and is removed by extrapolating the
off-diagonal entries to the diagonal.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import MFPCAError

POLICIES = ("drop_incomplete_visits", "pairwise_complete")
_POLICY_ALIASES = {"drop": "drop_incomplete_visits", "pairwise": "pairwise_complete"}


def check_policy(policy: str) -> str:
    policy = _POLICY_ALIASES.get(policy, policy)
    if policy not in POLICIES:
        raise ValueError(f"unknown missing-data policy {policy!r}")
    return policy


def trapezoid_weights(grid) -> np.ndarray:
    grid = np.asarray(grid, dtype=float)
    h = np.diff(grid)
    w = np.zeros_like(grid)
    w[:-1] += h / 2
    w[1:] += h / 2
    return w


@dataclass(frozen=True, eq=False)
class CovarianceEstimate:
    G_between: np.ndarray
    G_within: np.ndarray  # noise removed from the diagonal
    G_total: np.ndarray
    raw_within_diagonal: np.ndarray
    sigma2_noise: float
    n_visits_used: int
    n_subjects_used: int
    policy: str


def _moments(vals, visit_subject, n_sub):
    obs = ~np.isnan(vals)
    O = obs.astype(float)
    Z = np.where(obs, vals, 0.0)
    with np.errstate(invalid="ignore", divide="ignore"):
        mean = Z.sum(axis=0) / O.sum(axis=0)
    R = np.where(obs, vals - mean, 0.0)

    S = np.zeros((n_sub, vals.shape[1]))
    np.add.at(S, visit_subject, R)
    Os = np.zeros((n_sub, vals.shape[1]))
    np.add.at(Os, visit_subject, O)

    RtR = R.T @ R
    cnt_total = O.T @ O
    num_between = S.T @ S - RtR
    cnt_between = Os.T @ Os - cnt_total
    with np.errstate(invalid="ignore", divide="ignore"):
        G_total = RtR / cnt_total
        G_between = num_between / cnt_between
    G_between = 0.5 * (G_between + G_between.T)
    return G_total, G_between


def extrapolate_diagonal(G, max_lag=5) -> np.ndarray:
    """Per row, fit a quadratic in |m - m'| to off-diagonal entries with lag <= ``max_lag``
    and evaluate it at lag 0."""
    M = G.shape[0]
    out = np.full(M, np.nan)
    for m in range(M):
        lags = []
        vals = []
        for mp in range(max(0, m - max_lag), min(M, m + max_lag + 1)):
            if mp != m and np.isfinite(G[m, mp]):
                lags.append(abs(m - mp))
                vals.append(G[m, mp])
        lags = np.asarray(lags, dtype=float)
        if len(np.unique(lags)) >= 3:
            coef = np.polyfit(lags, vals, 2)
            out[m] = coef[-1]
        elif len(lags):
            out[m] = float(np.mean(vals))
    return out


def estimate_covariances(ac, policy="drop_incomplete_visits", *, max_lag=5, diagonal="smooth") -> CovarianceEstimate:
    """Between, within and total covariance of adjusted components.

    Parameters
    ----------
    ac : AdjustedComponents
    policy : {'drop_incomplete_visits', 'pairwise_complete'}
        ``drop_incomplete_visits`` excludes visits with any missing bin;
        ``pairwise_complete`` averages each entry over the available pairs.
    diagonal : {'smooth', 'shift'}
        ``smooth`` replaces the raw within diagonal by its extrapolation;
        ``shift`` subtracts the (constant) noise estimate from it.
    """
    policy = check_policy(policy)
    vals = np.asarray(ac.values, dtype=float)
    vsub = np.asarray(ac.visit_subject)
    if policy == "drop_incomplete_visits":
        keep = ~np.isnan(vals).any(axis=1)
    else:
        keep = ~np.isnan(vals).all(axis=1)
    vals = vals[keep]
    subjects, vsub = np.unique(vsub[keep], return_inverse=True)
    per_sub = np.bincount(vsub, minlength=len(subjects))
    if np.sum(per_sub >= 2) < 2:
        raise MFPCAError(
            "fewer than 2 subjects with 2 or more usable visits; visit-level covariance is unidentified"
        )
    G_total, G_between = _moments(vals, vsub, len(subjects))
    if not (np.all(np.isfinite(G_total)) and np.all(np.isfinite(G_between))):
        raise MFPCAError("some covariance entries have no contributing pairs; use a wider bin or the drop policy")
    G_within = G_total - G_between
    raw = np.diag(G_within).copy()
    smooth = extrapolate_diagonal(G_within, max_lag)
    sigma2 = max(float(np.mean(raw - smooth)), 0.0)
    G_within = G_within.copy()
    if diagonal == "smooth":
        np.fill_diagonal(G_within, smooth)
    elif diagonal == "shift":
        np.fill_diagonal(G_within, raw - sigma2)
    elif diagonal != "raw":
        raise ValueError(f"unknown diagonal treatment {diagonal!r}")
    return CovarianceEstimate(
        G_between=G_between,
        G_within=G_within,
        G_total=G_total,
        raw_within_diagonal=raw,
        sigma2_noise=sigma2,
        n_visits_used=int(keep.sum()),
        n_subjects_used=int(np.sum(per_sub > 0)),
        policy=policy,
    )


@dataclass(frozen=True, eq=False)
class Eigenpairs:
    values: np.ndarray  # nonincreasing, negatives floored at 0
    functions: np.ndarray  # (M, K) orthonormal under ``weights``
    weights: np.ndarray


def eigendecompose(G, weights) -> Eigenpairs:
    """Weighted eigenproblem ``G W phi = lambda phi`` with ``phi' W phi = 1``.

    Each eigenfunction is signed so its entry of largest magnitude is positive.
    """
    G = np.asarray(G, dtype=float)
    w = np.asarray(weights, dtype=float)
    if not np.allclose(G, G.T, rtol=1e-10, atol=1e-12 * max(np.abs(G).max(), 1.0)):
        raise ValueError("covariance matrix is not symmetric")
    sw = np.sqrt(w)
    A = sw[:, None] * G * sw[None, :]
    A = 0.5 * (A + A.T)
    vals, vecs = np.linalg.eigh(A)
    order = np.argsort(vals)[::-1]
    vals = np.maximum(vals[order], 0.0)
    funcs = vecs[:, order] / sw[:, None]
    idx = np.argmax(np.abs(funcs), axis=0)
    signs = np.sign(funcs[idx, np.arange(funcs.shape[1])])
    signs[signs == 0] = 1.0
    return Eigenpairs(values=vals, functions=funcs * signs, weights=w)


def choose_components(values, pve_threshold=0.95, K_max=10) -> tuple[int, np.ndarray]:
    """Smallest K whose cumulative PVE reaches the threshold, capped at ``K_max``.

    Returns ``(K, cumulative_pve)``; zero eigenvalues never count toward K.
    """
    if not 0 < pve_threshold < 1:
        raise ValueError("pve_threshold must be in (0, 1)")
    vals = np.maximum(np.asarray(values, dtype=float), 0.0)
    total = vals.sum()
    if total <= 0:
        return 0, np.zeros_like(vals)
    cum = np.cumsum(vals) / total
    K = int(np.searchsorted(cum, pve_threshold - 1e-12) + 1)
    K = min(K, int(K_max), int(np.sum(vals > 0)))
    return K, cum


@dataclass(frozen=True, eq=False)
class MFPCAResult:
    grid: np.ndarray
    weights: np.ndarray
    phi: np.ndarray  # (M, K1)
    psi: np.ndarray  # (M, K2)
    lambda1: np.ndarray
    lambda2: np.ndarray
    sigma2_noise: float
    pve1: np.ndarray  # cumulative PVE over all level-1 components
    pve2: np.ndarray
    K1: int
    K2: int
    covariance: CovarianceEstimate | None = field(default=None, repr=False)

    def summary(self) -> dict:
        return {
            "K1": self.K1,
            "K2": self.K2,
            "lambda1": self.lambda1.tolist(),
            "lambda2": self.lambda2.tolist(),
            "pve1": float(self.pve1[self.K1 - 1]) if self.K1 else 0.0,
            "pve2": float(self.pve2[self.K2 - 1]) if self.K2 else 0.0,
            "sigma2_noise": float(self.sigma2_noise),
        }


def truncate_pve(level1: Eigenpairs, level2: Eigenpairs, grid, pve_threshold=0.95, K_max=10,
                 sigma2_noise=0.0, covariance=None) -> MFPCAResult:
    K1, cum1 = choose_components(level1.values, pve_threshold, K_max)
    K2, cum2 = choose_components(level2.values, pve_threshold, K_max)
    return MFPCAResult(
        grid=np.asarray(grid, dtype=float),
        weights=level1.weights,
        phi=level1.functions[:, :K1],
        psi=level2.functions[:, :K2],
        lambda1=level1.values[:K1],
        lambda2=level2.values[:K2],
        sigma2_noise=float(sigma2_noise),
        pve1=cum1,
        pve2=cum2,
        K1=K1,
        K2=K2,
        covariance=covariance,
    )


def fit_mfpca(ac, policy="drop_incomplete_visits", pve_threshold=0.95, K_max=10, *, diagonal="smooth") -> MFPCAResult:
    """Covariance estimation, weighted eigendecomposition and PVE truncation."""
    cov = estimate_covariances(ac, policy, diagonal=diagonal)
    w = trapezoid_weights(ac.grid)
    e1 = eigendecompose(cov.G_between, w)
    e2 = eigendecompose(cov.G_within, w)
    return truncate_pve(e1, e2, ac.grid, pve_threshold, K_max, cov.sigma2_noise, cov)


def project(values, functions, weights) -> np.ndarray:
    """Scores <f, phi_k> of each row of ``values`` under the quadrature weights."""
    return (np.asarray(values) * weights) @ functions
