"""Posterior sampling of functional scores given smoothed fixed effects and eigenfunctions.

The model on each record r of visit v = (i, j) is

    eta_r = o_r + Phi(s_r) xi_i + Psi(s_r) zeta_v,

with ``xi_ik ~ N(0, 1/tau_xi_k)``, ``zeta_vk ~ N(0, 1/tau_zeta_k)`` and
half-Cauchy(0, 1) priors on every precision. Gaussian outcomes add
``N(0, sigma2_eps)`` noise; binomial outcomes use a logit link handled by
Polya-Gamma augmentation, so both families share one conditionally Gaussian
score update.

Everything the score update needs is a per-visit weighted Gram matrix and
cross-product. Records are mapped to unique locations, so these reduce to a
sparse (visit x location) weight matrix times dense per-location tables.
"""

from __future__ import annotations

import logging
import struct
import time
import warnings
from dataclasses import dataclass, field

import numpy as np
from polyagamma import random_polyagamma
from scipy import sparse

from .data import FunctionalDataset
from .diagnostics import ess, split_rhat
from .errors import InputError, SamplerError

log = logging.getLogger(__name__)

RHAT_WARN = 1.1


INTERPOLATIONS = ("linear", "cubic")


def interpolate_functions(values, centers, s, method="linear") -> np.ndarray:
    """Interpolate grid functions (M, K) to points ``s``; constant beyond the end centers.

    ``linear`` reproduces grid values exactly and averages neighbours at
    midpoints. ``cubic`` uses a not-a-knot cubic spline through the grid
    values, which resolves oscillations spanning only a few bins.
    """
    values = np.asarray(values, dtype=float)
    centers = np.asarray(centers, dtype=float)
    s = np.asarray(s, dtype=float)
    if method == "linear":
        out = np.empty((len(s), values.shape[1]))
        for k in range(values.shape[1]):
            out[:, k] = np.interp(s, centers, values[:, k])
        return out
    if method == "cubic":
        if values.shape[1] == 0:
            return np.empty((len(s), 0))
        from scipy.interpolate import CubicSpline

        inside = np.clip(s, centers[0], centers[-1])
        return CubicSpline(centers, values, axis=0)(inside)
    raise ValueError(f"unknown interpolation {method!r}; choose from {INTERPOLATIONS}")


@dataclass(frozen=True, eq=False)
class SamplerInputs:
    """Offsets, per-location basis tables and index maps for :func:`run_mcmc`.

    Records must be grouped by visit in increasing visit order. Visits with
    no records are allowed; their scores are drawn from the prior.
    """

    y: np.ndarray  # (N,)
    offsets: np.ndarray  # (N,) X beta~(s)
    record_visit: np.ndarray  # (N,)
    loc_index: np.ndarray  # (N,) into ``locations``
    locations: np.ndarray  # (U,)
    Phi_u: np.ndarray  # (U, K1)
    Psi_u: np.ndarray  # (U, K2)
    visit_subject: np.ndarray  # (V,)
    family: str
    grid: np.ndarray  # bin centers
    phi_grid: np.ndarray  # (M, K1)
    psi_grid: np.ndarray  # (M, K2)
    init_var_xi: np.ndarray = None
    init_var_zeta: np.ndarray = None
    init_sigma2: float = 1.0
    subject_ids: np.ndarray = None
    visit_ids: np.ndarray = None  # (V,) visit label within subject
    interpolation: str = "linear"

    def __post_init__(self):
        if np.any(np.diff(self.record_visit) < 0):
            raise InputError("records must be grouped by visit")
        for name, K in (("init_var_xi", self.K1), ("init_var_zeta", self.K2)):
            if getattr(self, name) is None:
                object.__setattr__(self, name, np.ones(K))
        if self.subject_ids is None:
            object.__setattr__(self, "subject_ids", np.arange(self.I))
        if self.visit_ids is None:
            object.__setattr__(self, "visit_ids", _within_subject_index(self.visit_subject))

    @property
    def N(self) -> int:
        return len(self.y)

    @property
    def I(self) -> int:  # noqa: E743
        return int(self.visit_subject.max()) + 1 if len(self.visit_subject) else 0

    @property
    def V(self) -> int:
        return len(self.visit_subject)

    @property
    def K1(self) -> int:
        return self.Phi_u.shape[1]

    @property
    def K2(self) -> int:
        return self.Psi_u.shape[1]

    @property
    def Phi(self) -> np.ndarray:
        return self.Phi_u[self.loc_index]

    @property
    def Psi(self) -> np.ndarray:
        return self.Psi_u[self.loc_index]

    def subject_index(self, subject_id) -> int:
        hit = np.flatnonzero(self.subject_ids == subject_id)
        if len(hit) != 1:
            raise KeyError(f"unknown subject {subject_id!r}")
        return int(hit[0])

    def visit_index(self, subject_id, visit_id) -> int:
        i = self.subject_index(subject_id)
        hit = np.flatnonzero((self.visit_subject == i) & (self.visit_ids == visit_id))
        if len(hit) != 1:
            raise KeyError(f"unknown visit ({subject_id!r}, {visit_id!r})")
        return int(hit[0])


def _within_subject_index(visit_subject):
    out = np.zeros(len(visit_subject), dtype=int)
    seen = {}
    for v, i in enumerate(visit_subject):
        out[v] = seen.get(i, 0)
        seen[i] = out[v] + 1
    return out


def make_inputs(y, offsets, record_visit, s, visit_subject, grid, phi_grid, psi_grid, family, *,
                interpolation="linear", **kw) -> SamplerInputs:
    """Assemble :class:`SamplerInputs` from per-record arrays and grid eigenfunctions."""
    s = np.asarray(s, dtype=float)
    locations, loc_index = np.unique(s, return_inverse=True)
    grid = np.asarray(grid, dtype=float)
    phi_grid = np.asarray(phi_grid, dtype=float).reshape(len(grid), -1)
    psi_grid = np.asarray(psi_grid, dtype=float).reshape(len(grid), -1)
    return SamplerInputs(
        y=np.asarray(y, dtype=float),
        offsets=np.asarray(offsets, dtype=float),
        record_visit=np.asarray(record_visit),
        loc_index=loc_index,
        locations=locations,
        Phi_u=interpolate_functions(phi_grid, grid, locations, interpolation),
        Psi_u=interpolate_functions(psi_grid, grid, locations, interpolation),
        visit_subject=np.asarray(visit_subject),
        family=family,
        grid=grid,
        phi_grid=phi_grid,
        psi_grid=psi_grid,
        interpolation=interpolation,
        **kw,
    )


def build_design(dataset: FunctionalDataset, fcoef, mfpca, interpolation="linear") -> SamplerInputs:
    """Offsets X beta~(s) and eigenfunction evaluations for every record."""
    lo, hi = dataset.domain_bounds
    if np.any(dataset.s < lo) or np.any(dataset.s > hi):
        raise InputError("record location outside the domain")
    locations, loc_index = np.unique(dataset.s, return_inverse=True)
    beta_u = fcoef.evaluate(locations)  # (U, p)
    offsets = np.einsum("rp,rp->r", dataset.X[dataset.visit], beta_u[loc_index])
    resid = dataset.y - offsets
    if dataset.family == "gaussian":
        init_s2 = max(float(np.var(resid)) - float(np.sum(mfpca.lambda1) + np.sum(mfpca.lambda2)), 0.1 * float(np.var(resid)))
    else:
        init_s2 = 1.0
    return make_inputs(
        dataset.y,
        offsets,
        dataset.visit,
        dataset.s,
        dataset.visit_subject,
        mfpca.grid,
        mfpca.phi,
        mfpca.psi,
        dataset.family,
        init_var_xi=np.maximum(mfpca.lambda1, 1e-6),
        init_var_zeta=np.maximum(mfpca.lambda2, 1e-6),
        init_sigma2=max(init_s2, 1e-6),
        subject_ids=dataset.subject_ids,
        visit_ids=np.asarray(dataset.visit_ids),
        interpolation=interpolation,
    )


@dataclass(frozen=True)
class SamplerConfig:
    chains: int = 4
    warmup: int = 1000
    draws: int = 2000
    seed: int = 0
    thin: int = 1
    prior_scale: float = 1.0  # half-Cauchy scale on each precision
    fixed_var_xi: tuple | None = None
    fixed_var_zeta: tuple | None = None
    fixed_sigma2: float | None = None
    store_zeta: bool = True
    interweave: bool = True  # extra non-centered scale update per component

    def __post_init__(self):
        if self.chains < 1 or self.draws < 1 or self.warmup < 0 or self.thin < 1:
            raise InputError("chains, draws and thin must be positive and warmup nonnegative")

    @property
    def kept(self) -> int:
        return len(range(0, self.draws, self.thin))


@dataclass(eq=False)
class PosteriorDraws:
    """Draws laid out as ``(chain, draw, ...)``."""

    xi: np.ndarray  # (C, S, I, K1)
    zeta: np.ndarray | None  # (C, S, V, K2)
    var_xi: np.ndarray  # (C, S, K1)
    var_zeta: np.ndarray  # (C, S, K2)
    sigma2_eps: np.ndarray | None  # (C, S), Gaussian only
    family: str
    seconds: float = 0.0
    meta: dict = field(default_factory=dict)

    @property
    def chains(self) -> int:
        return self.var_xi.shape[0]

    @property
    def n_draws(self) -> int:
        return self.var_xi.shape[1]

    @property
    def total(self) -> int:
        return self.chains * self.n_draws

    def pooled(self, name) -> np.ndarray:
        x = getattr(self, name)
        return x.reshape(self.total, *x.shape[2:])

    def variance_draws(self) -> dict:
        out = {"var_xi": self.var_xi, "var_zeta": self.var_zeta}
        if self.sigma2_eps is not None:
            out["sigma2_eps"] = self.sigma2_eps[..., None]
        return out

    def variance_rhat(self) -> dict:
        if self.n_draws < 4:
            return {k: np.full(v.shape[2:], np.nan) for k, v in self.variance_draws().items()}
        return {k: split_rhat(v) for k, v in self.variance_draws().items()}

    def max_variance_rhat(self) -> float:
        vals = [r for r in self.variance_rhat().values() if r.size]
        if not vals:
            return float("nan")
        allr = np.concatenate([np.ravel(r) for r in vals])
        return float(np.nanmax(allr)) if np.any(np.isfinite(allr)) else float("nan")

    def diagnostics(self) -> dict:
        """Split R-hat and ESS per variance component plus score-level extremes."""
        out = {"chains": self.chains, "draws_per_chain": self.n_draws, "seconds": self.seconds}
        if self.n_draws < 4:
            return out
        for k, v in self.variance_draws().items():
            out[k] = {"rhat": split_rhat(v).tolist(), "ess": ess(v).tolist(), "mean": v.mean(axis=(0, 1)).tolist()}
        for k in ("xi", "zeta"):
            x = getattr(self, k)
            if x is not None and x.size:
                r, e = split_rhat(x), ess(x)
                out[k] = {"max_rhat": float(np.nanmax(r)), "min_ess": float(np.nanmin(e))}
        out["max_variance_rhat"] = self.max_variance_rhat()
        return out


# -- building blocks ----------------------------------------------------------


def _visit_sum_matrix(inputs: SamplerInputs):
    counts = np.bincount(inputs.record_visit, minlength=inputs.V)
    indptr = np.concatenate([[0], np.cumsum(counts)])
    U = len(inputs.locations)

    def visit_sum(weights):
        W = sparse.csr_matrix((weights, inputs.loc_index, indptr), shape=(inputs.V, U))
        return W

    return visit_sum


def _slice(u, logf, rng, width=2.0, max_steps=50):
    """One stepping-out slice-sampling update for each entry of ``u``, vectorized."""
    level = logf(u) + np.log(rng.random(u.shape))
    left = u - width * rng.random(u.shape)
    right = left + width
    for _ in range(max_steps):
        grow = logf(left) > level
        if not grow.any():
            break
        left = np.where(grow, left - width, left)
    for _ in range(max_steps):
        grow = logf(right) > level
        if not grow.any():
            break
        right = np.where(grow, right + width, right)
    out = u.copy()
    todo = np.ones(u.shape, dtype=bool)
    for _ in range(200):
        prop = left + (right - left) * rng.random(u.shape)
        ok = todo & (logf(prop) > level)
        out = np.where(ok, prop, out)
        todo &= ~ok
        if not todo.any():
            break
        shrink_left = todo & (prop < u)
        left = np.where(shrink_left, prop, left)
        right = np.where(todo & ~shrink_left, prop, right)
    return out


def _log_prior_u(u, c2):
    # half-Cauchy(0, c) on tau = exp(u), including the Jacobian of the log transform
    return u - np.logaddexp(0.0, 2.0 * u - np.log(c2))


def _draw_precision(tau, n, S, c2, rng):
    """Centered update: tau | scores with density tau^(n/2) exp(-tau S / 2) x prior."""
    a, b = n / 2.0, S / 2.0
    u = _slice(np.log(tau), lambda x: a * x - b * np.exp(x) + _log_prior_u(x, c2), rng)
    return np.exp(u)


def _mvn_precision(P, b, rng):
    """Draw from N(P^{-1} b, P^{-1}) for a stack of precision matrices."""
    try:
        L = np.linalg.cholesky(P)
    except np.linalg.LinAlgError as exc:
        raise SamplerError("score conditional precision is not positive definite") from exc
    mean = np.linalg.solve(P, b[..., None])[..., 0]
    z = rng.standard_normal(b.shape)
    noise = np.linalg.solve(np.swapaxes(L, -1, -2), z[..., None])[..., 0]
    return mean + noise


def _group_sum(x, groups, n):
    out = np.zeros((n,) + x.shape[1:])
    np.add.at(out, groups, x)
    return out


class _Chain:
    def __init__(self, inputs: SamplerInputs, config: SamplerConfig, seed_seq):
        self.inp = inputs
        self.cfg = config
        self.rng = np.random.default_rng(seed_seq)
        K1, K2 = inputs.K1, inputs.K2
        self.K1, self.K2 = K1, K2
        B_u = np.column_stack([inputs.Phi_u, inputs.Psi_u])
        self.B_u = B_u
        K = K1 + K2
        self.BB_u = (B_u[:, :, None] * B_u[:, None, :]).reshape(len(B_u), K * K)
        self.visit_sum = _visit_sum_matrix(inputs)
        self.c2 = config.prior_scale**2
        jitter = lambda n: np.exp(0.5 * self.rng.standard_normal(n))  # noqa: E731
        self.tau_xi = (
            1.0 / np.asarray(config.fixed_var_xi, dtype=float)
            if config.fixed_var_xi is not None
            else jitter(K1) / inputs.init_var_xi
        )
        self.tau_zeta = (
            1.0 / np.asarray(config.fixed_var_zeta, dtype=float)
            if config.fixed_var_zeta is not None
            else jitter(K2) / inputs.init_var_zeta
        )
        self.gaussian = inputs.family == "gaussian"
        if self.gaussian:
            self.s2 = float(config.fixed_sigma2) if config.fixed_sigma2 is not None else inputs.init_sigma2 * float(jitter(1)[0])
            ystar = inputs.y - inputs.offsets
            self.G = self._gram(np.ones(inputs.N))
            self.h = self.visit_sum(ystar) @ B_u
            self.yy = np.bincount(inputs.record_visit, weights=ystar**2, minlength=inputs.V)
        else:
            self.s2 = 1.0
            self.kappa = inputs.y - 0.5
            self._augment(np.zeros((inputs.V, K)))
        self.xi = np.zeros((inputs.I, K1))
        self.zeta = np.zeros((inputs.V, K2))

    def _gram(self, w):
        K = self.K1 + self.K2
        return np.asarray(self.visit_sum(w) @ self.BB_u).reshape(self.inp.V, K, K)

    def _augment(self, theta):
        inp = self.inp
        if inp.V * len(inp.locations) <= 2e7:
            # visits share few locations: one small matmul then a gather
            eta = inp.offsets + (theta @ self.B_u.T)[inp.record_visit, inp.loc_index]
        else:
            eta = inp.offsets + np.einsum("rk,rk->r", self.B_u[inp.loc_index], theta[inp.record_visit])
        omega = random_polyagamma(1.0, eta, random_state=self.rng)
        self.G = self._gram(omega)
        self.h = self.visit_sum(self.kappa - omega * inp.offsets) @ self.B_u

    def theta(self):
        return np.concatenate([self.xi[self.inp.visit_subject], self.zeta], axis=1)

    def _interweave(self):
        """Redraw each component scale with its standardized scores held fixed.

        Given z = score * sqrt(tau), the (working Gaussian) likelihood is a
        quadratic in sd = tau^(-1/2); alternating this with the centered
        update removes the slow mixing of small variance components.
        """
        K1 = self.K1
        th = self.theta()
        G, h, s2 = self.G, self.h, self.s2
        for k in range(K1 + self.K2):
            level1 = k < K1
            if (self.cfg.fixed_var_xi if level1 else self.cfg.fixed_var_zeta) is not None:
                continue
            tau = self.tau_xi[k] if level1 else self.tau_zeta[k - K1]
            sd = tau**-0.5
            col = th[:, k]
            z = col / sd
            other = np.einsum("vl,vl->v", G[:, k, :], th) - G[:, k, k] * col
            A = float(np.sum(G[:, k, k] * z * z))
            B = float(np.sum(z * (h[:, k] - other)))

            def logf(u, A=A, B=B):
                sdu = np.exp(-0.5 * u)
                return -(A * sdu * sdu - 2.0 * B * sdu) / (2.0 * s2) + _log_prior_u(u, self.c2)

            u = _slice(np.array([np.log(tau)]), logf, self.rng)[0]
            ratio = np.exp(-0.5 * u) / sd
            th[:, k] = col * ratio
            if level1:
                self.tau_xi[k] = np.exp(u)
                self.xi[:, k] *= ratio
            else:
                self.tau_zeta[k - K1] = np.exp(u)
                self.zeta[:, k - K1] *= ratio

    def step(self):
        inp, K1, K2 = self.inp, self.K1, self.K2
        G, h, s2 = self.G / self.s2, self.h / self.s2, self.s2
        Gaa, Gab, Gbb = G[:, :K1, :K1], G[:, :K1, K1:], G[:, K1:, K1:]
        ha, hb = h[:, :K1], h[:, K1:]
        if K2:
            A = Gbb + np.diag(self.tau_zeta)
            AinvGba = np.linalg.solve(A, np.swapaxes(Gab, 1, 2))
            Ainvhb = np.linalg.solve(A, hb[..., None])[..., 0]
        if K1:
            # subject scores with the visit scores integrated out
            Q, q = Gaa, ha
            if K2:
                Q = Gaa - Gab @ AinvGba
                q = ha - np.einsum("vab,vb->va", Gab, Ainvhb)
            P = _group_sum(Q, inp.visit_subject, inp.I) + np.diag(self.tau_xi)
            r = _group_sum(q, inp.visit_subject, inp.I)
            self.xi = _mvn_precision(P, r, self.rng)
        if K2:
            rhs = hb - np.einsum("vba,va->vb", np.swapaxes(Gab, 1, 2), self.xi[inp.visit_subject]) if K1 else hb
            self.zeta = _mvn_precision(A, rhs, self.rng)
        if not (np.all(np.isfinite(self.xi)) and np.all(np.isfinite(self.zeta))):
            raise SamplerError("non-finite score draw")

        rng = self.rng
        if K1 and self.cfg.fixed_var_xi is None:
            self.tau_xi = _draw_precision(self.tau_xi, inp.I, np.sum(self.xi**2, axis=0), self.c2, rng)
        if K2 and self.cfg.fixed_var_zeta is None:
            self.tau_zeta = _draw_precision(self.tau_zeta, inp.V, np.sum(self.zeta**2, axis=0), self.c2, rng)
        if self.cfg.interweave:
            self._interweave()
        if self.gaussian:
            if self.cfg.fixed_sigma2 is None:
                th = self.theta()
                ssr = self.yy.sum() - 2 * np.sum(th * self.h) + np.einsum("vk,vkl,vl->", th, self.G, th)
                ssr = max(float(ssr), 0.0)
                tau = _draw_precision(np.array([1.0 / s2]), inp.N, np.array([ssr]), self.c2, rng)
                self.s2 = float(1.0 / tau[0])
        else:
            self._augment(self.theta())
        if not (np.all(np.isfinite(self.tau_xi)) and np.all(np.isfinite(self.tau_zeta)) and np.isfinite(self.s2)):
            raise SamplerError("non-finite variance draw")


def _run_chain(args):
    inputs, config, chain, seed_seq = args
    ch = _Chain(inputs, config, seed_seq)
    S = config.kept
    xi = np.empty((S, inputs.I, inputs.K1))
    zeta = np.empty((S, inputs.V, inputs.K2)) if config.store_zeta else None
    var_xi = np.empty((S, inputs.K1))
    var_zeta = np.empty((S, inputs.K2))
    s2 = np.empty(S)
    k = 0
    for it in range(config.warmup + config.draws):
        try:
            ch.step()
        except SamplerError as exc:
            raise SamplerError(f"chain {chain}, iteration {it}: {exc}") from exc
        d = it - config.warmup
        if d >= 0 and d % config.thin == 0:
            xi[k] = ch.xi
            if zeta is not None:
                zeta[k] = ch.zeta
            var_xi[k] = 1.0 / ch.tau_xi
            var_zeta[k] = 1.0 / ch.tau_zeta
            s2[k] = ch.s2
            k += 1
    return xi, zeta, var_xi, var_zeta, s2


def run_mcmc(inputs: SamplerInputs, config: SamplerConfig | None = None, *, map_fn=map) -> PosteriorDraws:
    """Run independent chains and stack their draws.

    Chain c uses the c-th child of ``SeedSequence(config.seed)``, so results
    depend only on the seed and inputs. ``map_fn`` may run chains in parallel.
    """
    config = config or SamplerConfig()
    if inputs.family == "binomial" and inputs.K1 + inputs.K2 == 0:
        raise InputError("binomial sampling needs at least one score component")
    t0 = time.perf_counter()
    seeds = np.random.SeedSequence(config.seed).spawn(config.chains)
    results = list(map_fn(_run_chain, [(inputs, config, c, seeds[c]) for c in range(config.chains)]))
    xi, zeta, var_xi, var_zeta, s2 = (np.stack(parts) if parts[0] is not None else None for parts in zip(*results))
    draws = PosteriorDraws(
        xi=xi,
        zeta=zeta,
        var_xi=var_xi,
        var_zeta=var_zeta,
        sigma2_eps=s2 if inputs.family == "gaussian" else None,
        family=inputs.family,
        seconds=time.perf_counter() - t0,
        meta={"seed": config.seed, "warmup": config.warmup, "thin": config.thin},
    )
    rmax = draws.max_variance_rhat()
    if config.chains > 1 and np.isfinite(rmax) and rmax > RHAT_WARN:
        msg = f"NOT CONVERGED: split R-hat {rmax:.3f} > {RHAT_WARN} on a variance component"
        log.warning(msg)
        warnings.warn(msg, stacklevel=2)
    return draws


# -- summaries ------------------------------------------------------------------


def _eval_basis(inputs: SamplerInputs, grid):
    if grid is None:
        return inputs.grid, inputs.phi_grid, inputs.psi_grid
    grid = np.asarray(grid, dtype=float)
    m = inputs.interpolation
    return (grid, interpolate_functions(inputs.phi_grid, inputs.grid, grid, m),
            interpolate_functions(inputs.psi_grid, inputs.grid, grid, m))


def _resolve(inputs, level, entities):
    if level == "subject":
        if entities is None:
            return np.arange(inputs.I)
        return np.array([inputs.subject_index(e) for e in entities], dtype=int)
    if level in ("subject_visit", "combined"):
        if entities is None:
            return np.arange(inputs.V)
        return np.array([inputs.visit_index(*e) for e in entities], dtype=int)
    raise ValueError(f"unknown level {level!r}")


def random_effect_draws(draws: PosteriorDraws, inputs: SamplerInputs, level, rows, grid=None) -> np.ndarray:
    """Pooled draws of a_i(s), b_ij(s) or r_ij(s) for the given rows, shape (draws, len(rows), G)."""
    grid, Phi, Psi = _eval_basis(inputs, grid)
    rows = np.asarray(rows, dtype=int)
    if level == "subject":
        return draws.pooled("xi")[:, rows] @ Phi.T
    if draws.zeta is None:
        raise InputError("visit-level draws were not stored")
    out = draws.pooled("zeta")[:, rows] @ Psi.T
    if level == "combined":
        out += draws.pooled("xi")[:, inputs.visit_subject[rows]] @ Phi.T
    return out


def summarize_random_effects(draws: PosteriorDraws, inputs: SamplerInputs, level="combined", alpha=0.05, *,
                             grid=None, entities=None, max_chunk_values=2e7):
    """Pointwise posterior means and equal-tailed (type-7) credible bands.

    ``level`` is 'subject' for a_i(s), 'subject_visit' for b_ij(s) or
    'combined' for r_ij(s). ``entities`` lists subject ids or
    ``(subject_id, visit_id)`` pairs; default is every entity.
    """
    from .inference import CredibleBands

    if not 0 < alpha < 1:
        raise ValueError("alpha must be in (0, 1)")
    rows = _resolve(inputs, level, entities)
    g = _eval_basis(inputs, grid)[0]
    S = draws.total
    step = max(1, int(max_chunk_values // max(S * len(g), 1)))
    mean = np.empty((len(rows), len(g)))
    lower = np.empty_like(mean)
    upper = np.empty_like(mean)
    for st in range(0, len(rows), step):
        sl = slice(st, st + step)
        vals = random_effect_draws(draws, inputs, level, rows[sl], grid)
        lo, hi = np.quantile(vals, [alpha / 2, 1 - alpha / 2], axis=0)
        # a mean outside its own equal-tailed band is only possible for wildly skewed draws
        mean[sl] = np.clip(vals.mean(axis=0), lo, hi)
        lower[sl], upper[sl] = lo, hi
    subj = rows if level == "subject" else inputs.visit_subject[rows]
    visit = np.full(len(rows), -1) if level == "subject" else inputs.visit_ids[rows]
    return CredibleBands(
        level=level,
        subject=inputs.subject_ids[subj],
        visit=visit,
        grid=g,
        mean=mean,
        lower=lower,
        upper=upper,
        alpha=alpha,
        rows=rows,
    )


# -- serialization ------------------------------------------------------------

_MAGIC = b"FRIMDRW1"
_FAMILIES = {"gaussian": 0, "binomial": 1}
_HEADER = struct.Struct("<8sIIQQQQQQQ")  # magic, version, family, C, S, I, K1, V, K2, has_zeta


def write_draws(path, draws: PosteriorDraws):
    """Little-endian binary: fixed header of dimensions, then row-major float64 arrays
    xi, zeta (if stored), var_xi, var_zeta, sigma2_eps (Gaussian)."""
    C, S, I, K1 = draws.xi.shape
    V, K2 = (draws.zeta.shape[2], draws.zeta.shape[3]) if draws.zeta is not None else (0, draws.var_zeta.shape[2])
    header = _HEADER.pack(_MAGIC, 1, _FAMILIES[draws.family], C, S, I, K1, V, K2, int(draws.zeta is not None))
    with open(path, "wb") as fh:
        fh.write(header)
        for arr in (draws.xi, draws.zeta, draws.var_xi, draws.var_zeta, draws.sigma2_eps):
            if arr is not None:
                fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def read_draws(path) -> PosteriorDraws:
    with open(path, "rb") as fh:
        buf = fh.read()
    magic, version, fam, C, S, I, K1, V, K2, has_zeta = _HEADER.unpack_from(buf)
    if magic != _MAGIC or version != 1:
        raise InputError(f"{path}: not a draws file")
    family = {v: k for k, v in _FAMILIES.items()}[fam]
    pos = _HEADER.size

    def take(shape):
        nonlocal pos
        n = int(np.prod(shape))
        arr = np.frombuffer(buf, dtype="<f8", count=n, offset=pos).reshape(shape).astype(float)
        pos += 8 * n
        return arr

    xi = take((C, S, I, K1))
    zeta = take((C, S, V, K2)) if has_zeta else None
    var_xi = take((C, S, K1))
    var_zeta = take((C, S, K2))
    s2 = take((C, S)) if family == "gaussian" else None
    return PosteriorDraws(xi, zeta, var_xi, var_zeta, s2, family)


def draws_to_frame(draws: PosteriorDraws, include_scores=False):
    """One row per draw: chain, draw, variance components and optionally all scores."""
    import pandas as pd

    C, S = draws.chains, draws.n_draws
    cols = {"chain": np.repeat(np.arange(C), S), "draw": np.tile(np.arange(S), C)}
    for k in range(draws.var_xi.shape[2]):
        cols[f"var_xi_{k + 1}"] = draws.var_xi[:, :, k].ravel()
    for k in range(draws.var_zeta.shape[2]):
        cols[f"var_zeta_{k + 1}"] = draws.var_zeta[:, :, k].ravel()
    if draws.sigma2_eps is not None:
        cols["sigma2_eps"] = draws.sigma2_eps.ravel()
    frame = pd.DataFrame(cols)
    if include_scores:
        parts = [frame]
        xi = draws.xi.reshape(C * S, -1)
        I, K1 = draws.xi.shape[2:]
        parts.append(pd.DataFrame(xi, columns=[f"xi_{i}_{k + 1}" for i in range(I) for k in range(K1)]))
        if draws.zeta is not None:
            V, K2 = draws.zeta.shape[2:]
            parts.append(
                pd.DataFrame(draws.zeta.reshape(C * S, -1), columns=[f"zeta_{v}_{k + 1}" for v in range(V) for k in range(K2)])
            )
        frame = pd.concat(parts, axis=1)
    return frame
