"""Per-bin random-intercept GLMMs.

Each bin is fit with the model

    g(E[Y | a_i, b_ij]) = X_ij beta + a_i + b_ij,

``a_i ~ N(0, s2_a)`` for subjects and ``b_ij ~ N(0, s2_b)`` for visits nested
in subjects. Because covariates are visit-level and both random effects are
intercepts, the linear predictor is constant within a visit and every
quantity reduces to per-visit sufficient statistics.

Gaussian bins use REML, profiling out ``beta`` and the residual variance and
optimizing the two variance ratios on the log scale. Binomial bins use the
Laplace approximation with the joint mode found by penalized IRLS.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy import optimize
from scipy.special import expit

from .errors import GLMMError, SingularDesignError


@dataclass(frozen=True)
class GLMMControls:
    lower: float = 1e-8
    upper: float = 1e8
    ftol: float = 1e-8
    gtol: float = 1e-6
    max_outer: int = 200
    max_inner: int = 50
    # skip the outer loop: (s2_a, s2_b, s2_eps) for gaussian, (s2_a, s2_b) for binomial
    fixed_variances: tuple | None = None


@dataclass
class LocalFit:
    """Output of one local GLMM.

    ``a_hat``, ``b_hat`` and ``eta_hat`` are indexed by the dataset's subject
    and visit codes; entries for units without records in the bin are NaN.
    """

    bin_index: int
    beta_hat: np.ndarray
    a_hat: np.ndarray
    b_hat: np.ndarray
    eta_hat: np.ndarray
    x_beta: np.ndarray  # X_ij beta_hat per visit
    variance_components: dict
    converged: bool
    iterations: int
    objective_trace: list = field(default_factory=list)
    messages: list = field(default_factory=list)

    @property
    def r_hat(self) -> np.ndarray:
        """Local random component a_i + b_ij per visit."""
        return self.eta_hat - self.x_beta

    def summary(self) -> dict:
        return {
            "bin": self.bin_index,
            "beta_hat": [float(b) for b in self.beta_hat],
            "variance_components": {k: float(v) for k, v in self.variance_components.items()},
            "converged": bool(self.converged),
            "iterations": int(self.iterations),
            "messages": list(self.messages),
        }


def failed_fit(bin_index, p, I, V, message) -> LocalFit:
    return LocalFit(
        bin_index=bin_index,
        beta_hat=np.full(p, np.nan),
        a_hat=np.full(I, np.nan),
        b_hat=np.full(V, np.nan),
        eta_hat=np.full(V, np.nan),
        x_beta=np.full(V, np.nan),
        variance_components={},
        converged=False,
        iterations=0,
        messages=[message],
    )


# ---------------------------------------------------------------------------
# structured linear algebra
# ---------------------------------------------------------------------------


def nested_solve(Wv, xv, vsub, n_sub, ia, ib, gv, gi, gb):
    """Solve the mixed-model system for nested random intercepts.

    The system matrix is ``[X Za Zb]' W [X Za Zb] + blockdiag(0, ia I, ib I)``
    with ``W`` constant within a visit (total weight ``Wv``). Visit effects
    are eliminated first, then subject effects, leaving a p x p system.

    Returns ``beta, a, b, logdet_rr, C`` where ``logdet_rr`` is the log
    determinant of the random-effects block and ``C`` the Schur complement
    for ``beta`` (``X' H^{-1} X`` in the Gaussian case).
    """
    # written so that ia, ib may be 0 or inf (zero or infinite variance)
    D = Wv + ib
    e = Wv / (1.0 + Wv / ib)
    At = ia + np.bincount(vsub, weights=e, minlength=n_sub)
    u = np_bincount2(vsub, e[:, None] * xv, n_sub)
    WgD = Wv * gv / D
    gi_t = gi - np.bincount(vsub, weights=WgD, minlength=n_sub)
    C = (xv * e[:, None]).T @ xv - (u / At[:, None]).T @ u
    rhs = gb - xv.T @ WgD - u.T @ (gi_t / At)
    beta = np.linalg.solve(C, rhs)
    a = (gi_t - u @ beta) / At
    b = (gv - Wv * a[vsub] - Wv * (xv @ beta)) / D
    logdet = float(np.sum(np.log(D)) + np.sum(np.log(At)))
    return beta, a, b, logdet, C


def np_bincount2(idx, values, n):
    out = np.zeros((n, values.shape[1]))
    np.add.at(out, idx, values)
    return out


def check_design(xv, names=None):
    """Raise :class:`SingularDesignError` if the visit-level design is rank deficient."""
    p = xv.shape[1]
    if np.linalg.matrix_rank(xv) == p:
        return
    names = list(names) if names is not None else [f"x{k}" for k in range(p)]
    bad = []
    for k in range(p):
        cols = [j for j in range(k + 1) if names[j] not in bad]
        if np.linalg.matrix_rank(xv[:, cols]) < len(cols):
            bad.append(names[k])
    raise SingularDesignError(f"collinear covariate column(s): {bad}")


# ---------------------------------------------------------------------------
# per-visit data for one bin
# ---------------------------------------------------------------------------


@dataclass
class _BinStats:
    visits: np.ndarray  # dataset visit codes present in the bin
    subjects: np.ndarray  # dataset subject codes present in the bin
    vsub: np.ndarray  # local subject index per local visit
    n: np.ndarray  # records per visit
    sy: np.ndarray  # sum of y per visit
    yy: float
    xv: np.ndarray  # (V_b, p)

    @property
    def N(self):
        return float(self.n.sum())


def _bin_stats(y, visit, visit_subject, X) -> _BinStats:
    visits, vloc = np.unique(visit, return_inverse=True)
    n = np.bincount(vloc).astype(float)
    sy = np.bincount(vloc, weights=y)
    subjects, vsub = np.unique(visit_subject[visits], return_inverse=True)
    return _BinStats(visits, subjects, vsub, n, sy, float(y @ y), X[visits])


def _identifiable(st: _BinStats) -> str | None:
    if len(st.subjects) < 2:
        return "fewer than 2 subjects in bin"
    per_sub = np.bincount(st.vsub)
    if per_sub.max() < 2:
        return "no subject has 2 or more visits in bin; visit-level variance unidentified"
    return None


# ---------------------------------------------------------------------------
# gaussian REML
# ---------------------------------------------------------------------------


def reml_criterion(log_theta, st: _BinStats):
    """-2 x restricted log-likelihood (up to a constant), profiled over s2_eps.

    Also returns ``(beta, a, b, s2_eps)`` at the given variance ratios.
    """
    ta, tb = np.exp(log_theta)
    I = len(st.subjects)
    V = len(st.visits)
    p = st.xv.shape[1]
    gv = st.sy
    gi = np.bincount(st.vsub, weights=gv, minlength=I)
    gb = st.xv.T @ gv
    beta, a, b, logdet_rr, C = nested_solve(st.n, st.xv, st.vsub, I, 1.0 / ta, 1.0 / tb, gv, gi, gb)
    q = st.yy - beta @ gb - a @ gi - b @ gv
    dof = st.N - p
    q = max(q, 1e-300)
    logdet_H = I * np.log(ta) + V * np.log(tb) + logdet_rr
    sign, logdet_C = np.linalg.slogdet(C)
    crit = dof * np.log(q / dof) + logdet_H + logdet_C
    return float(crit), (beta, a, b, q / dof)


def _fit_gaussian(st: _BinStats, controls: GLMMControls):
    lo, hi = np.log(controls.lower), np.log(controls.upper)
    trace = []
    if controls.fixed_variances is not None:
        va, vb, ve = controls.fixed_variances
        with np.errstate(divide="ignore", invalid="ignore"):
            crit, (beta, a, b, _) = reml_criterion(np.log([va / ve, vb / ve]), st)
        s2e = float(ve)
        return beta, a, b, {"a": va, "b": vb, "eps": s2e}, True, 0, [crit], []

    fun = lambda x: reml_criterion(x, st)[0]  # noqa: E731
    x0 = _gaussian_start(st, lo, hi)
    trace.append(fun(x0))
    res = optimize.minimize(
        fun,
        x0,
        method="L-BFGS-B",
        jac="3-point",
        bounds=[(lo, hi), (lo, hi)],
        callback=lambda xk: trace.append(fun(xk)),
        options={"maxiter": controls.max_outer, "ftol": controls.ftol, "gtol": controls.gtol},
    )
    crit, (beta, a, b, s2e) = reml_criterion(res.x, st)
    ta, tb = np.exp(res.x)
    msgs = [] if res.success else [f"REML optimizer: {res.message}"]
    vc = {"a": ta * s2e, "b": tb * s2e, "eps": s2e}
    return beta, a, b, vc, bool(res.success), int(res.nit), trace, msgs


def _gaussian_start(st: _BinStats, lo, hi):
    """Crude ANOVA start for the two log variance ratios."""
    beta_ols = np.linalg.lstsq(st.xv * np.sqrt(st.n)[:, None], st.sy / np.sqrt(st.n), rcond=None)[0]
    vmean = st.sy / st.n - st.xv @ beta_ols
    within = (st.yy - np.sum(st.sy**2 / st.n)) / max(st.N - len(st.n), 1.0)
    within = max(within, 1e-8)
    I = len(st.subjects)
    smean = np.bincount(st.vsub, weights=vmean, minlength=I) / np.bincount(st.vsub, minlength=I)
    vb = max(np.var(vmean - smean[st.vsub]) - within / st.n.mean(), 0.05 * within)
    va = max(np.var(smean) - vb / max(np.bincount(st.vsub).mean(), 1.0), 0.05 * within)
    return np.clip(np.log([va / within, vb / within]), lo + 1.0, hi - 1.0)


# ---------------------------------------------------------------------------
# binomial Laplace
# ---------------------------------------------------------------------------


def _neg_log_post(eta, st: _BinStats, a, b, ia, ib):
    # binomial log-likelihood with n trials and sy successes per visit
    ll = st.sy * eta - st.n * np.logaddexp(0.0, eta)
    return float(-ll.sum() + 0.5 * ia * (a @ a) + 0.5 * ib * (b @ b))


def pirls(st: _BinStats, va, vb, start=None, max_iter=50, tol=1e-10):
    """Joint mode of (beta, a, b) for a logit GLMM at fixed variances.

    Newton steps with step-halving. Returns
    ``(beta, a, b, objective, logdet_rr, converged, iterations)``.
    """
    I = len(st.subjects)
    V = len(st.visits)
    p = st.xv.shape[1]
    ia, ib = 1.0 / va, 1.0 / vb
    if start is None:
        beta, a, b = np.zeros(p), np.zeros(I), np.zeros(V)
    else:
        beta, a, b = (np.array(z, dtype=float) for z in start)

    def eta_of(beta, a, b):
        return st.xv @ beta + a[st.vsub] + b

    eta = eta_of(beta, a, b)
    f = _neg_log_post(eta, st, a, b, ia, ib)
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        mu = expit(eta)
        Wv = st.n * mu * (1 - mu)
        R = st.sy - st.n * mu
        gv = R - ib * b
        gi = np.bincount(st.vsub, weights=R, minlength=I) - ia * a
        gb = st.xv.T @ R
        d_beta, d_a, d_b, _, _ = nested_solve(Wv, st.xv, st.vsub, I, ia, ib, gv, gi, gb)
        step = 1.0
        for _ in range(30):
            nb, na, nbb = beta + step * d_beta, a + step * d_a, b + step * d_b
            neta = eta_of(nb, na, nbb)
            nf = _neg_log_post(neta, st, na, nbb, ia, ib)
            if nf <= f + 1e-12 * abs(f):
                break
            step *= 0.5
        else:
            break
        change = f - nf
        beta, a, b, eta, f = nb, na, nbb, neta, nf
        dmax = step * max(np.abs(d_beta).max(initial=0), np.abs(d_a).max(initial=0), np.abs(d_b).max(initial=0))
        if change <= tol * (1 + abs(f)) or dmax < 1e-8:
            converged = True
            break
    mu = expit(eta)
    Wv = st.n * mu * (1 - mu)
    gv = np.zeros(V)
    _, _, _, logdet_rr, _ = nested_solve(Wv, st.xv, st.vsub, I, ia, ib, gv, np.zeros(I), np.zeros(p))
    return beta, a, b, f, logdet_rr, converged, it


def laplace_objective(log_var, st: _BinStats, start=None, max_iter=50):
    """Negative Laplace-approximated log marginal likelihood (up to a constant)."""
    va, vb = np.exp(log_var)
    beta, a, b, f, logdet_rr, conv, it = pirls(st, va, vb, start, max_iter)
    I = len(st.subjects)
    V = len(st.visits)
    obj = f + 0.5 * (I * np.log(va) + V * np.log(vb) + logdet_rr)
    return float(obj), (beta, a, b, conv, it)


def _fit_binomial(st: _BinStats, controls: GLMMControls):
    lo, hi = np.log(controls.lower), np.log(min(controls.upper, 1e4))
    msgs = []
    total = st.sy.sum()
    separated = total == 0 or total == st.N
    if controls.fixed_variances is not None or separated:
        if separated:
            msgs.append("complete separation: all outcomes equal; variances fixed at lower bound")
            warnings.warn(msgs[-1], stacklevel=3)
            va = vb = controls.lower
        else:
            va, vb = controls.fixed_variances
        obj, (beta, a, b, conv, it) = laplace_objective(np.log([va, vb]), st, max_iter=controls.max_inner)
        return beta, a, b, {"a": va, "b": vb}, conv, 0, [obj], msgs

    state = {"start": None}

    def fun(x):
        obj, sol = laplace_objective(x, st, state["start"], controls.max_inner)
        state["start"] = sol[:3]
        return obj

    x0 = np.log([0.5, 0.5])
    trace = [fun(x0)]
    res = optimize.minimize(
        fun,
        x0,
        method="L-BFGS-B",
        jac="3-point",
        bounds=[(lo, hi), (lo, hi)],
        callback=lambda xk: trace.append(fun(xk)),
        options={"maxiter": controls.max_outer, "ftol": controls.ftol, "gtol": controls.gtol},
    )
    obj, (beta, a, b, conv, it) = laplace_objective(res.x, st, state["start"], controls.max_inner)
    if not conv:
        msgs.append("PIRLS did not converge at the optimum")
    if not res.success:
        msgs.append(f"Laplace optimizer: {res.message}")
    va, vb = np.exp(res.x)
    return beta, a, b, {"a": va, "b": vb}, bool(res.success and conv), int(res.nit), trace, msgs


# ---------------------------------------------------------------------------
# public entry points
# ---------------------------------------------------------------------------


def fit_local_glmm(
    y,
    visit,
    visit_subject,
    X,
    family="gaussian",
    controls: GLMMControls | None = None,
    *,
    bin_index=0,
    covariate_names=None,
) -> LocalFit:
    """Fit the random-intercept GLMM to the records of one bin.

    Parameters
    ----------
    y, visit : arrays (n_bin,)
        Outcomes and dataset visit codes of the records in the bin.
    visit_subject : array (V,)
        Subject code of every visit in the dataset.
    X : array (V, p)
        Visit-level design for every visit in the dataset.

    Raises
    ------
    GLMMError
        When the variance components are not identified in this bin.
    SingularDesignError
        When the design restricted to the bin is rank deficient.
    """
    controls = controls or GLMMControls()
    y = np.asarray(y, dtype=float)
    visit = np.asarray(visit)
    X = np.asarray(X, dtype=float)
    V, p = X.shape
    I = int(visit_subject.max()) + 1
    st = _bin_stats(y, visit, visit_subject, X)
    reason = _identifiable(st)
    if reason:
        raise GLMMError(f"bin {bin_index}: {reason}")
    check_design(st.xv, covariate_names)

    if family == "gaussian":
        beta, a, b, vc, conv, nit, trace, msgs = _fit_gaussian(st, controls)
    elif family == "binomial":
        beta, a, b, vc, conv, nit, trace, msgs = _fit_binomial(st, controls)
    else:
        raise ValueError(f"unknown family {family!r}")

    a_full = np.full(I, np.nan)
    a_full[st.subjects] = a
    b_full = np.full(V, np.nan)
    b_full[st.visits] = b
    xb = np.full(V, np.nan)
    xb[st.visits] = st.xv @ beta
    eta = xb + a_full[visit_subject] + b_full
    fit = LocalFit(
        bin_index=bin_index,
        beta_hat=beta,
        a_hat=a_full,
        b_hat=b_full,
        eta_hat=eta,
        x_beta=xb,
        variance_components=vc,
        converged=conv,
        iterations=nit,
        objective_trace=trace,
        messages=msgs,
    )
    return fit


def fit_bin(binned, m, family=None, controls=None) -> LocalFit:
    """Fit bin ``m`` of a :class:`~frim.data.BinnedDataset`."""
    ds = binned.dataset
    idx = binned.members[m]
    return fit_local_glmm(
        ds.y[idx],
        ds.visit[idx],
        ds.visit_subject,
        ds.X,
        family or ds.family,
        controls,
        bin_index=m,
        covariate_names=ds.covariate_names,
    )


def _fit_bin_task(args):
    binned, m, controls = args
    ds = binned.dataset
    try:
        return fit_bin(binned, m, controls=controls)
    except GLMMError as exc:
        return failed_fit(m, ds.p, ds.I, ds.n_visits, str(exc))


def fit_all_bins(binned, controls=None, map_fn=map) -> list:
    """Fit every bin independently; unidentified bins come back with ``converged=False``."""
    tasks = [(binned, m, controls) for m in range(binned.layout.M)]
    return list(map_fn(_fit_bin_task, tasks))
