"""Multilevel functional data generator, block missingness and coverage studies."""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from .data import FunctionalDataset, check_family
from .errors import ConvergenceBudgetError, FRIMError, InputError

log = logging.getLogger(__name__)

_SCORE_STREAM = 0
_REPLICATE_STREAM = 1
_MISSING_STREAM = 2
_SPLIT_STREAM = 3

SQ2 = np.sqrt(2.0)


def level1_basis(s) -> np.ndarray:
    s = np.asarray(s, dtype=float)
    return np.column_stack(
        [SQ2 * np.sin(4 * np.pi * s), SQ2 * np.cos(4 * np.pi * s), SQ2 * np.sin(6 * np.pi * s), SQ2 * np.cos(6 * np.pi * s)]
    )


def level2_basis(s, case="case1") -> np.ndarray:
    s = np.asarray(s, dtype=float)
    if _case(case) == "case1":
        return np.column_stack(
            [SQ2 * np.sin(8 * np.pi * s), SQ2 * np.cos(8 * np.pi * s), SQ2 * np.sin(10 * np.pi * s), SQ2 * np.cos(10 * np.pi * s)]
        )
    # shifted Legendre polynomials, orthonormal on [0, 1]
    return np.column_stack(
        [
            np.ones_like(s),
            np.sqrt(3) * (2 * s - 1),
            np.sqrt(5) * (6 * s**2 - 6 * s + 1),
            np.sqrt(7) * (20 * s**3 - 30 * s**2 + 12 * s - 1),
        ]
    )


def fixed_effect(s) -> np.ndarray:
    return SQ2 * np.sin(2 * np.pi * np.asarray(s, dtype=float))


def _case(case) -> str:
    c = str(case).lower().replace(" ", "").replace("_", "")
    if c in ("case1", "1"):
        return "case1"
    if c in ("case2", "2"):
        return "case2"
    raise InputError(f"unknown basis case {case!r}")


@dataclass(frozen=True)
class SimConfig:
    I: int = 100
    J: int = 10
    L: int = 100
    family: str = "gaussian"
    case: str = "case1"
    K1: int = 4
    K2: int = 4
    lambda1: tuple | None = None  # default 0.5 ** (k - 1)
    lambda2: tuple | None = None
    sigma2_eps: float = 1.0
    p_visit: float = 0.2
    missing_frac: float = 0.0
    seed: int = 0
    fixed_scores: bool = True
    level2_scale: float = 1.0

    def __post_init__(self):
        if self.L < 2:
            raise InputError("L must be at least 2")
        if not 0 <= self.missing_frac < 1:
            raise InputError("missing_frac must be in [0, 1)")
        if self.I < 1 or self.J < 1:
            raise InputError("I and J must be positive")
        if not (1 <= self.K1 <= 4 and 0 <= self.K2 <= 4):
            raise InputError("K1 must be in 1..4 and K2 in 0..4")
        object.__setattr__(self, "family", check_family(self.family))
        object.__setattr__(self, "case", _case(self.case))

    @property
    def eigenvalues1(self) -> np.ndarray:
        if self.lambda1 is not None:
            return np.asarray(self.lambda1, dtype=float)
        return 0.5 ** np.arange(self.K1)

    @property
    def eigenvalues2(self) -> np.ndarray:
        if self.lambda2 is not None:
            return np.asarray(self.lambda2, dtype=float)
        return 0.5 ** np.arange(self.K2)

    @property
    def grid(self) -> np.ndarray:
        return np.arange(1, self.L + 1) / self.L

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True, eq=False)
class SimTruth:
    grid: np.ndarray  # (L,)
    visit_subject: np.ndarray  # (V,)
    xi: np.ndarray  # (I, K1)
    zeta: np.ndarray  # (V, K2)
    beta: np.ndarray  # (L,)
    a: np.ndarray  # (V, L) level-1 part
    b: np.ndarray  # (V, L) level-2 part
    missing: np.ndarray = field(default=None)  # (V, L) True where removed

    @property
    def r(self) -> np.ndarray:
        return self.a + self.b

    @property
    def eta(self) -> np.ndarray:
        return self.beta[None, :] + self.r


def _rng(seed, *stream) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed), *stream]))


def draw_scores(config: SimConfig, rng) -> tuple[np.ndarray, np.ndarray]:
    V = config.I * config.J
    xi = rng.normal(size=(config.I, config.K1)) * np.sqrt(config.eigenvalues1)
    zeta = rng.normal(size=(V, config.K2)) * np.sqrt(config.eigenvalues2) * config.level2_scale
    return xi, zeta


def generate_dataset(config: SimConfig, replicate: int = 0, eta_shift=None) -> tuple[FunctionalDataset, SimTruth]:
    """Simulate one replicate of the intercept-only multilevel design.

    With ``fixed_scores`` the scores come from the master seed alone and are
    shared by all replicates; outcomes (and missingness) always come from
    the replicate's own stream. ``eta_shift`` (visits x L) is added to the
    linear predictor before outcomes are drawn and is not part of the truth.
    """
    I, J, L = config.I, config.J, config.L
    V = I * J
    s = config.grid
    rep_rng = _rng(config.seed, _REPLICATE_STREAM, replicate)
    score_rng = _rng(config.seed, _SCORE_STREAM) if config.fixed_scores else _rng(config.seed, _SCORE_STREAM, replicate)
    xi, zeta = draw_scores(config, score_rng)
    phi = level1_basis(s)[:, : config.K1]
    psi = level2_basis(s, config.case)[:, : config.K2]
    vsub = np.repeat(np.arange(I), J)
    a = xi[vsub] @ phi.T
    b = zeta @ psi.T
    beta = fixed_effect(s)
    eta = beta[None, :] + a + b
    if eta_shift is not None:
        eta = eta + np.broadcast_to(np.asarray(eta_shift, dtype=float), eta.shape)
    if config.family == "gaussian":
        y = eta + rep_rng.normal(scale=np.sqrt(config.sigma2_eps), size=eta.shape)
    else:
        y = (rep_rng.random(eta.shape) < 1.0 / (1.0 + np.exp(-eta))).astype(float)

    ds = FunctionalDataset.from_records(
        np.repeat(vsub, L),
        np.tile(np.repeat(np.arange(J), L), I),
        np.tile(s, V),
        y.ravel(),
        None,
        family=config.family,
        domain_bounds=(0.0, 1.0),
    )
    missing = np.zeros((V, L), dtype=bool)
    if config.missing_frac > 0 and config.p_visit > 0:
        miss_rng = _rng(config.seed, _MISSING_STREAM, replicate)
        ds, removed = inject_missingness(ds, config.p_visit, config.missing_frac, miss_rng, return_mask=True)
        missing = removed.reshape(V, L)
    truth = SimTruth(grid=s, visit_subject=vsub, xi=xi, zeta=zeta, beta=beta, a=a, b=b, missing=missing)
    return ds, truth


def inject_missingness(dataset: FunctionalDataset, p_visit: float, frac: float, rng=None, *, return_mask=False):
    """Remove one contiguous block from randomly chosen visits.

    Each visit is hit with probability ``p_visit``. Its block starts at a
    location drawn uniformly from the visit's own locations and covers
    ``[s_a, s_a + frac * range)``, truncated at the right edge of the domain.
    """
    if not 0 <= frac < 1:
        raise InputError("frac must be in [0, 1)")
    rng = np.random.default_rng(rng)
    removed = np.zeros(dataset.n, dtype=bool)
    if frac == 0 or p_visit == 0:
        return (dataset, removed) if return_mask else dataset
    lo, hi = dataset.domain_bounds
    span = hi - lo
    bounds = dataset.visit_slices
    hit = rng.random(dataset.n_visits) < p_visit
    for v in np.flatnonzero(hit):
        st, en = bounds[v], bounds[v + 1]
        s = dataset.s[st:en]
        s_a = s[rng.integers(len(s))]
        end = s_a + frac * span - 1e-9 * span
        removed[st:en] = (s >= s_a) & (s < end)
    out = dataset.subset_records(~removed)
    return (out, removed) if return_mask else out


# -- coverage studies ---------------------------------------------------------


@dataclass
class ReplicateResult:
    replicate: int
    covered: np.ndarray | None  # (V, L) bool
    width: np.ndarray | None
    missing: np.ndarray | None
    max_rhat: float = float("nan")
    error: str | None = None
    seconds: float = 0.0


def _run_replicate(args):
    import time

    from .inference import covered_indicator
    from .pipeline import fit_frim
    from .sampler import summarize_random_effects

    config, settings, r = args
    t0 = time.perf_counter()
    try:
        ds, truth = generate_dataset(config, r)
        fit = fit_frim(ds, settings)
        bands = summarize_random_effects(fit.draws, fit.inputs, level="combined", alpha=settings.alpha, grid=truth.grid)
        cov = covered_indicator(bands, truth.r)
        rhat = fit.draws.max_variance_rhat()
        return ReplicateResult(r, cov, bands.upper - bands.lower, truth.missing, rhat, None, time.perf_counter() - t0)
    except FRIMError as exc:
        log.warning("replicate %d excluded: %s", r, exc)
        return ReplicateResult(r, None, None, None, error=f"{type(exc).__name__}: {exc}", seconds=time.perf_counter() - t0)


def run_coverage_study(config: SimConfig, replicates: int, settings=None, *, map_fn=map, max_excluded_frac=0.2,
                       missing_only=None):
    """Repeat generate -> fit -> bands and summarize pointwise coverage.

    ``missing_only`` restricts the MPCP to removed regions; it defaults to
    True when the config injects missingness.
    """
    from .inference import compute_mpcp
    from .pipeline import PipelineSettings

    if replicates < 2:
        raise InputError("replicates must be at least 2")
    settings = settings or PipelineSettings()
    results = list(map_fn(_run_replicate, [(config, settings, r) for r in range(replicates)]))
    ok = [res for res in results if res.error is None]
    excluded = [res for res in results if res.error is not None]
    if len(excluded) > max_excluded_frac * replicates:
        raise ConvergenceBudgetError(f"{len(excluded)} of {replicates} replicates failed: {excluded[0].error}")
    if missing_only is None:
        missing_only = config.missing_frac > 0
    covered = np.stack([res.covered for res in ok])
    mask = np.stack([res.missing for res in ok]) if missing_only else None
    report = compute_mpcp(covered, mask=mask)
    report.meta = {
        "config": config.to_dict(),
        "replicates": replicates,
        "excluded": [(res.replicate, res.error) for res in excluded],
        "max_rhat": [res.max_rhat for res in ok],
        "mean_width": float(np.mean([np.mean(res.width) for res in ok])),
        "seconds": [res.seconds for res in ok],
        "missing_only": bool(missing_only),
    }
    return report


# -- anomaly calibration ------------------------------------------------------


def level2_sd(config: SimConfig) -> np.ndarray:
    """Pointwise standard deviation of the true visit-level deviation b_ij(s)."""
    psi = level2_basis(config.grid, config.case)[:, : config.K2]
    return np.sqrt((psi**2) @ (config.eigenvalues2 * config.level2_scale**2))


@dataclass
class AnomalyReplicate:
    replicate: int
    null_fractions: dict | None  # reference -> flagged fraction of each unshifted test visit
    detected: dict | None  # reference -> shifted visit has a flagged point inside the window
    error: str | None = None


def _run_anomaly_replicate(args):
    from .pipeline import flag_test_visits

    config, settings, r, shift_sd, window, alpha, min_duration, refs = args
    try:
        rng = _rng(config.seed, _SPLIT_STREAM, r)
        I, J = config.I, config.J
        test_j = rng.integers(J, size=I)
        test = np.zeros(I * J, dtype=bool)
        test[np.arange(I) * J + test_j] = True
        i_star = int(rng.integers(I))
        target = i_star * J + int(test_j[i_star])
        shift = np.zeros((I * J, config.L))
        inside = (config.grid >= window[0]) & (config.grid <= window[1])
        shift[target, inside] = shift_sd * level2_sd(config)[inside]
        ds, _ = generate_dataset(config, r, eta_shift=shift)
        by_ref = flag_test_visits(ds, test, settings, alpha=alpha, min_duration=min_duration, reference=refs)
        null, detected = {}, {}
        for ref, flagged in by_ref.items():
            flagged = dict(flagged)
            null[ref] = np.array([rep.flagged_fraction for v, rep in flagged.items() if v != target])
            detected[ref] = any(a <= window[1] and b >= window[0] for a, b in flagged[target].intervals)
        return AnomalyReplicate(r, null, detected)
    except FRIMError as exc:
        log.warning("anomaly replicate %d excluded: %s", r, exc)
        return AnomalyReplicate(r, None, None, f"{type(exc).__name__}: {exc}")


def run_anomaly_study(config: SimConfig, replicates: int, settings=None, *, shift_sd=2.0, window=(0.4, 0.6),
                      alpha=0.05, min_duration=0.0, references=("pooled", "predictive"), map_fn=map,
                      max_excluded_frac=0.2) -> dict:
    """Null calibration and power of the visit anomaly flag.

    Each replicate holds out one random visit per subject. One held-out
    visit, chosen at random, gets ``shift_sd`` pointwise level-2 standard
    deviations added to its linear predictor on ``window``; the others
    measure the null flagged fraction. Each entry of ``references`` (see
    :func:`frim.pipeline.flag_test_visits`) is evaluated on the same fits.
    """
    from .pipeline import PipelineSettings

    if config.J < 3:
        raise InputError("anomaly studies need J >= 3 so each subject keeps two training visits")
    settings = settings or PipelineSettings()
    refs = tuple(references)
    args = [(config, settings, r, shift_sd, tuple(window), alpha, min_duration, refs) for r in range(replicates)]
    results = list(map_fn(_run_anomaly_replicate, args))
    ok = [res for res in results if res.error is None]
    excluded = [(res.replicate, res.error) for res in results if res.error is not None]
    if len(excluded) > max_excluded_frac * replicates:
        raise ConvergenceBudgetError(f"{len(excluded)} of {replicates} replicates failed: {excluded[0][1]}")
    out = {"replicates": replicates, "excluded": excluded, "shift_sd": shift_sd, "window": list(window),
           "alpha": alpha}
    for ref in refs:
        per_rep = [float(np.mean(res.null_fractions[ref])) for res in ok]
        out[ref] = {
            "null_flagged_fraction": float(np.mean(per_rep)),
            "null_flagged_by_replicate": per_rep,
            "power": float(np.mean([res.detected[ref] for res in ok])),
        }
    return out


__all__ = [
    "run_anomaly_study",
    "level2_sd",
    "SimConfig",
    "SimTruth",
    "generate_dataset",
    "inject_missingness",
    "run_coverage_study",
    "level1_basis",
    "level2_basis",
    "fixed_effect",
]
