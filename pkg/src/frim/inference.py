"""Credible bands, coverage evaluation, the leakage diagnostic and anomaly flagging."""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .errors import InputError
from .mfpca import project, trapezoid_weights


@dataclass(frozen=True, eq=False)
class CredibleBands:
    """Pointwise bands for a batch of entities; row e is subject ``subject[e]``
    (and visit ``visit[e]``, or -1 at the subject level)."""

    level: str
    subject: np.ndarray
    visit: np.ndarray
    grid: np.ndarray
    mean: np.ndarray  # (E, G)
    lower: np.ndarray
    upper: np.ndarray
    alpha: float
    rows: np.ndarray = None  # internal entity indices

    def __post_init__(self):
        if self.mean.shape != self.lower.shape or self.mean.shape != self.upper.shape:
            raise ValueError("mean, lower and upper must share a shape")
        if np.any(self.lower > self.mean) or np.any(self.mean > self.upper):
            raise ValueError("band violates lower <= mean <= upper")

    @property
    def width(self) -> np.ndarray:
        return self.upper - self.lower

    def to_frame(self):
        import pandas as pd

        E, G = self.mean.shape
        return pd.DataFrame(
            {
                "subject": np.repeat(self.subject, G),
                "visit": np.repeat(self.visit, G),
                "s": np.tile(self.grid, E),
                "mean": self.mean.ravel(),
                "lower": self.lower.ravel(),
                "upper": self.upper.ravel(),
            }
        )


def covered_indicator(bands: CredibleBands, truth) -> np.ndarray:
    """Closed-interval coverage: lower <= truth <= upper."""
    truth = np.asarray(truth, dtype=float)
    if truth.shape != bands.mean.shape:
        raise InputError(f"truth shape {truth.shape} does not match bands {bands.mean.shape}")
    return (bands.lower <= truth) & (truth <= bands.upper)


@dataclass(eq=False)
class CoverageReport:
    coverage: np.ndarray  # (E, G) fraction of included replicates covering; NaN if never included
    mpcp: float
    n_included: int  # (replicate, entity, point) triples entering the MPCP
    replicates: int
    masked: bool
    meta: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "mpcp": self.mpcp,
            "n_included": self.n_included,
            "replicates": self.replicates,
            "masked": self.masked,
            **{k: v for k, v in self.meta.items()},
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, default=_json_default)

    def subject_median(self, visit_subject) -> np.ndarray:
        """Per subject, the median across its visits of visit-level mean coverage."""
        per_visit = np.nanmean(self.coverage, axis=1)
        visit_subject = np.asarray(visit_subject)
        return np.array([np.nanmedian(per_visit[visit_subject == i]) for i in np.unique(visit_subject)])


def _json_default(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    return str(o)


def compute_mpcp(covered, mask=None, *, lower=None, upper=None, truth=None) -> CoverageReport:
    """Mean pointwise coverage probability.

    ``covered`` is a boolean array (replicates, entities, points). Bands may
    be passed instead as ``lower``/``upper``/``truth`` of that shape. ``mask``
    (same shape, or broadcastable from (entities, points)) restricts which
    triples count; the MPCP is the mean over all included triples.
    """
    if covered is None:
        lower, upper, truth = (np.asarray(a, dtype=float) for a in (lower, upper, truth))
        if not (lower.shape == upper.shape == truth.shape):
            raise InputError("bands and truth are indexed differently")
        covered = (lower <= truth) & (truth <= upper)
    covered = np.asarray(covered, dtype=bool)
    if covered.ndim == 2:
        covered = covered[None]
    R = covered.shape[0]
    if mask is None:
        incl = np.ones(covered.shape, dtype=bool)
    else:
        mask = np.asarray(mask, dtype=bool)
        try:
            incl = np.broadcast_to(mask, covered.shape)
        except ValueError as exc:
            raise InputError(f"mask shape {mask.shape} does not match coverage {covered.shape}") from exc
    n_incl = incl.sum(axis=0)
    with np.errstate(invalid="ignore", divide="ignore"):
        cell = (covered & incl).sum(axis=0) / n_incl
    cell = np.where(n_incl > 0, cell, np.nan)
    total = int(incl.sum())
    mpcp = float((covered & incl).sum() / total) if total else float("nan")
    return CoverageReport(coverage=cell, mpcp=mpcp, n_included=total, replicates=R, masked=mask is not None)


# -- leakage ------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class LeakageDiagnostic:
    """Per-visit-index deviation curves of the adjusted components and their
    projections onto the level-2 eigenfunctions."""

    visit_labels: np.ndarray
    grid: np.ndarray
    delta: np.ndarray  # (J, M)
    gamma: np.ndarray  # (J, K2)

    @property
    def rms(self) -> float:
        return float(np.sqrt(np.mean(self.gamma**2))) if self.gamma.size else 0.0


def leakage_diagnostic(adjusted, mfpca, visit_labels) -> LeakageDiagnostic:
    """Delta_j(s) = mean_i r^a_ij(s) - mean_ij r^a_ij(s), projected onto psi^.

    ``adjusted`` are the adjusted random components (V x M, NaN where
    missing) and ``visit_labels`` gives each visit's within-subject index j.
    """
    vals = np.asarray(adjusted.values, dtype=float)
    labels = np.asarray(visit_labels)
    uniq = np.unique(labels)
    grand = np.nanmean(vals, axis=0)
    delta = np.vstack([np.nanmean(vals[labels == j], axis=0) - grand for j in uniq])
    w = trapezoid_weights(adjusted.grid)
    gamma = project(np.nan_to_num(delta), mfpca.psi, w)
    return LeakageDiagnostic(visit_labels=uniq, grid=np.asarray(adjusted.grid), delta=delta, gamma=gamma)


# -- anomalies ----------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class AnomalyReport:
    grid: np.ndarray
    lower: np.ndarray
    upper: np.ndarray
    test_mean: np.ndarray
    flagged: np.ndarray  # pointwise exits from the band
    intervals: list  # [(s_l, s_u)] with duration >= min_duration
    durations: list
    min_duration: float
    alpha: float

    @property
    def flagged_fraction(self) -> float:
        return float(np.mean(self.flagged))

    def to_dict(self) -> dict:
        return {
            "alpha": self.alpha,
            "min_duration": self.min_duration,
            "flagged_fraction": self.flagged_fraction,
            "intervals": [{"start": float(a), "end": float(b), "duration": float(d)}
                          for (a, b), d in zip(self.intervals, self.durations)],
        }


def _runs(mask):
    """Maximal runs of True as (start, stop) index pairs, stop inclusive."""
    m = np.concatenate([[False], np.asarray(mask, dtype=bool), [False]])
    d = np.diff(m.astype(int))
    starts = np.flatnonzero(d == 1)
    stops = np.flatnonzero(d == -1) - 1
    return list(zip(starts, stops))


def detect_anomalies(training_draws, test_mean, grid, alpha=0.05, min_duration=0.0) -> AnomalyReport:
    """Flag where a test visit's posterior mean curve leaves the pooled training band.

    ``training_draws`` holds draws of b_ij(s) for the training visits, shape
    (draws, G) or (draws, visits, G); all are pooled, and the band is their
    pointwise inverted-CDF quantiles. An interval covering
    grid points l..u has duration ``s_u - s_l + step`` (step = grid spacing),
    so a single flagged point lasts one grid step.
    """
    grid = np.asarray(grid, dtype=float)
    draws = np.asarray(training_draws, dtype=float)
    if draws.ndim == 3:
        if draws.shape[1] < 2:
            raise InputError("at least 2 training visits required")
        draws = draws.reshape(-1, draws.shape[-1])
    if draws.shape[-1] != len(grid):
        raise InputError("training draws do not match the grid")
    test_mean = np.asarray(test_mean, dtype=float)
    if test_mean.shape != grid.shape:
        raise InputError("test mean does not match the grid")
    # inverted-CDF quantiles depend on the draws only through their empirical
    # CDF, so pooling duplicate copies of the draws leaves the band unchanged
    lower, upper = np.quantile(draws, [alpha / 2, 1 - alpha / 2], axis=0, method="inverted_cdf")
    flagged = (test_mean < lower) | (test_mean > upper)
    step = float(np.median(np.diff(grid))) if len(grid) > 1 else 0.0
    intervals, durations = [], []
    for a, b in _runs(flagged):
        dur = grid[b] - grid[a] + step
        if dur >= min_duration - 1e-12:
            intervals.append((float(grid[a]), float(grid[b])))
            durations.append(float(dur))
    return AnomalyReport(grid, lower, upper, test_mean, flagged, intervals, durations, float(min_duration), alpha)
