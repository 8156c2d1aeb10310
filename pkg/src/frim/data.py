"""Long-format multilevel functional data, bin layouts and bin assignment."""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd

from .errors import BinningError, EmptyInputError, SchemaError, ValidationError

FAMILIES = ("gaussian", "binomial")
REQUIRED_COLUMNS = ("subject_id", "visit_id", "s", "y")
INTERCEPT = "(Intercept)"

# relative slack used when testing |s - c| <= d/2, so exact ties survive round-off
_TIE_RTOL = 1e-9


def check_family(family: str) -> str:
    fam = str(family).lower()
    if fam in ("binary", "bernoulli"):
        fam = "binomial"
    if fam not in FAMILIES:
        raise ValidationError(f"unknown family {family!r}; expected one of {FAMILIES}")
    return fam


@dataclass(frozen=True, eq=False)
class FunctionalDataset:
    """Observations ``Y_ijl`` at locations ``s_ijl`` with visit-level covariates.

    Records are stored sorted by (subject, visit, location). ``subject`` and
    ``visit`` hold integer codes; the original identifiers live in
    ``subject_ids`` and ``visit_ids``. Covariates are visit-level, so ``X`` has
    one row per visit.
    """

    subject: np.ndarray
    visit: np.ndarray
    s: np.ndarray
    y: np.ndarray
    X: np.ndarray
    visit_subject: np.ndarray
    subject_ids: np.ndarray
    visit_ids: np.ndarray
    covariate_names: tuple
    family: str
    domain_bounds: tuple
    n_dropped: int = 0

    @classmethod
    def from_records(
        cls,
        subject_id,
        visit_id,
        s,
        y,
        X=None,
        *,
        family="gaussian",
        covariate_names=None,
        domain_bounds=None,
        n_dropped=0,
    ) -> "FunctionalDataset":
        """Build a dataset from per-record arrays, validating every invariant.

        ``X`` is per record (n x p); it must be constant within each visit.
        ``X=None`` gives an intercept-only design.
        """
        family = check_family(family)
        subject_id = np.asarray(subject_id)
        visit_id = np.asarray(visit_id)
        s = np.asarray(s, dtype=float)
        y = np.asarray(y, dtype=float)
        n = len(s)
        if n == 0:
            raise EmptyInputError()
        if not (len(subject_id) == len(visit_id) == len(y) == n):
            raise ValidationError("record arrays have different lengths")
        if X is None:
            X = np.ones((n, 1))
            covariate_names = (INTERCEPT,)
        X = np.asarray(X, dtype=float)
        if X.ndim == 1:
            X = X[:, None]
        if X.shape[0] != n:
            raise ValidationError("covariate matrix has wrong number of rows")
        if covariate_names is None:
            covariate_names = tuple(f"x{k}" for k in range(X.shape[1]))
        covariate_names = tuple(covariate_names)
        if len(covariate_names) != X.shape[1]:
            raise ValidationError("covariate_names does not match X")

        bad = ~np.isfinite(y)
        if bad.any():
            row = int(np.flatnonzero(bad)[0])
            raise ValidationError(f"non-finite outcome at row {row}")
        if not np.all(np.isfinite(s)):
            raise ValidationError(f"non-finite location at row {int(np.flatnonzero(~np.isfinite(s))[0])}")
        if not np.all(np.isfinite(X)):
            raise ValidationError("non-finite covariate value")
        if family == "binomial":
            bad = (y != 0) & (y != 1)
            if bad.any():
                row = int(np.flatnonzero(bad)[0])
                raise ValidationError(f"binomial outcome not in {{0,1}} at row {row}: {y[row]!r}")

        subject_ids, subject = np.unique(subject_id, return_inverse=True)
        vkeys = pd.MultiIndex.from_arrays([subject, visit_id])
        vcodes, vuniq = pd.factorize(vkeys, sort=True)
        visit_subject = np.asarray(vuniq.get_level_values(0), dtype=np.int64)
        visit_ids = np.asarray(vuniq.get_level_values(1))
        visit = np.asarray(vcodes, dtype=np.int64)

        order = np.lexsort((s, visit))
        subject = subject[order].astype(np.int64)
        visit = visit[order]
        s = s[order]
        y = y[order]
        X = X[order]

        V = len(visit_ids)
        first = np.searchsorted(visit, np.arange(V))
        Xv = X[first]
        if not np.array_equal(Xv[visit], X):
            rows = np.flatnonzero(np.any(Xv[visit] != X, axis=1))
            raise ValidationError(
                f"covariates vary within a visit (visit {visit_ids[visit[rows[0]]]!r} "
                f"of subject {subject_ids[subject[rows[0]]]!r}); covariates must be visit-level"
            )

        if domain_bounds is None:
            domain_bounds = (float(s.min()), float(s.max()))
        lo, hi = float(domain_bounds[0]), float(domain_bounds[1])
        if not hi > lo:
            raise ValidationError(f"degenerate domain bounds {domain_bounds}")
        return cls(
            subject=subject,
            visit=visit,
            s=s,
            y=y,
            X=Xv,
            visit_subject=visit_subject,
            subject_ids=subject_ids,
            visit_ids=visit_ids,
            covariate_names=covariate_names,
            family=family,
            domain_bounds=(lo, hi),
            n_dropped=int(n_dropped),
        )

    # -- sizes -------------------------------------------------------------
    @property
    def n(self) -> int:
        return len(self.s)

    @property
    def I(self) -> int:  # noqa: E743
        return len(self.subject_ids)

    @property
    def n_visits(self) -> int:
        return len(self.visit_ids)

    @property
    def p(self) -> int:
        return self.X.shape[1]

    @property
    def visits_per_subject(self) -> np.ndarray:
        return np.bincount(self.visit_subject, minlength=self.I)

    @property
    def records_per_visit(self) -> np.ndarray:
        return np.bincount(self.visit, minlength=self.n_visits)

    @property
    def visit_slices(self) -> np.ndarray:
        """Start offsets of each visit's records (length n_visits + 1)."""
        return np.searchsorted(self.visit, np.arange(self.n_visits + 1))

    def visit_index(self, subject_id, visit_id) -> int:
        """Visit code for the original (subject_id, visit_id) pair."""
        hits = np.flatnonzero(self.subject_ids == subject_id)
        if len(hits) == 0:
            raise KeyError(f"unknown subject {subject_id!r}")
        i = hits[0]
        cand = np.flatnonzero((self.visit_subject == i) & (self.visit_ids == visit_id))
        if len(cand) == 0:
            raise KeyError(f"unknown visit {visit_id!r} for subject {subject_id!r}")
        return int(cand[0])

    def records_X(self) -> np.ndarray:
        return self.X[self.visit]

    # -- subsetting --------------------------------------------------------
    def subset_records(self, keep) -> "FunctionalDataset":
        """Keep a boolean record mask; visits and subjects left empty disappear."""
        keep = np.asarray(keep, dtype=bool)
        return FunctionalDataset.from_records(
            self.subject_ids[self.subject[keep]],
            self.visit_ids[self.visit[keep]],
            self.s[keep],
            self.y[keep],
            self.records_X()[keep],
            family=self.family,
            covariate_names=self.covariate_names,
            domain_bounds=self.domain_bounds,
            n_dropped=self.n_dropped,
        )

    def subset_visits(self, visit_mask) -> "FunctionalDataset":
        visit_mask = np.asarray(visit_mask, dtype=bool)
        return self.subset_records(visit_mask[self.visit])

    def to_frame(self) -> pd.DataFrame:
        df = pd.DataFrame(
            {
                "subject_id": self.subject_ids[self.subject],
                "visit_id": self.visit_ids[self.visit],
                "s": self.s,
                "y": self.y,
            }
        )
        Xr = self.records_X()
        for k, name in enumerate(self.covariate_names):
            df[name] = Xr[:, k]
        return df


def ingest_long_csv(
    path,
    schema=None,
    family="gaussian",
    *,
    covariates=None,
    add_intercept=True,
    domain_bounds=None,
) -> FunctionalDataset:
    """Read a long-format CSV into a :class:`FunctionalDataset`.

    Parameters
    ----------
    path : path-like
        CSV file with a header row.
    schema : dict, optional
        Maps the canonical names ``subject_id, visit_id, s, y`` to column
        names in the file.
    family : {'gaussian', 'binomial'}
    covariates : list of str, optional
        Covariate columns. Defaults to every column not used by the schema.
    add_intercept : bool
        Prepend an intercept column unless one named ``(Intercept)`` exists.
    domain_bounds : (float, float), optional
        Defaults to the observed min/max location.

    Rows with a missing outcome or location are dropped; the count is kept
    in ``n_dropped``.
    """
    family = check_family(family)
    path = Path(path)
    if not path.exists():
        raise SchemaError(f"input file not found: {path}")
    if path.stat().st_size == 0:
        raise EmptyInputError()
    try:
        df = pd.read_csv(path, encoding="utf-8", float_precision="round_trip")
    except pd.errors.EmptyDataError:
        raise EmptyInputError() from None
    if len(df) == 0:
        raise EmptyInputError()

    mapping = {k: k for k in REQUIRED_COLUMNS}
    if schema:
        unknown = set(schema) - set(REQUIRED_COLUMNS)
        if unknown:
            raise SchemaError(f"unknown schema keys: {sorted(unknown)}")
        mapping.update(schema)
    missing = [mapping[k] for k in REQUIRED_COLUMNS if mapping[k] not in df.columns]
    if missing:
        raise SchemaError(f"missing column(s): {missing}")
    used = set(mapping.values())
    if covariates is None:
        covariates = [c for c in df.columns if c not in used]
    else:
        absent = [c for c in covariates if c not in df.columns]
        if absent:
            raise SchemaError(f"missing covariate column(s): {absent}")
    covariates = list(covariates)

    y = pd.to_numeric(df[mapping["y"]], errors="coerce")
    na_text = df[mapping["y"]].notna() & y.isna()
    if na_text.any():
        row = int(np.flatnonzero(na_text.to_numpy())[0])
        raise ValidationError(f"unparseable outcome at row {row}: {df[mapping['y']].iloc[row]!r}")
    s = pd.to_numeric(df[mapping["s"]], errors="coerce")
    keep = (y.notna() & s.notna()).to_numpy()
    n_dropped = int((~keep).sum())
    df = df.loc[keep]
    if len(df) == 0:
        raise EmptyInputError()

    Xcols = [np.asarray(pd.to_numeric(df[c]), dtype=float) for c in covariates]
    names = list(covariates)
    if add_intercept and INTERCEPT not in names:
        Xcols.insert(0, np.ones(len(df)))
        names.insert(0, INTERCEPT)
    if not Xcols:
        raise ValidationError("design has no columns (no covariates and add_intercept=False)")
    X = np.column_stack(Xcols)

    return FunctionalDataset.from_records(
        df[mapping["subject_id"]].to_numpy(),
        df[mapping["visit_id"]].to_numpy(),
        s.loc[keep].to_numpy(dtype=float),
        y.loc[keep].to_numpy(dtype=float),
        X,
        family=family,
        covariate_names=names,
        domain_bounds=domain_bounds,
        n_dropped=n_dropped,
    )


def write_long_csv(dataset: FunctionalDataset, path) -> None:
    dataset.to_frame().to_csv(path, index=False, float_format="%.17g")


# -- binning ------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class BinLayout:
    centers: np.ndarray
    width: float
    domain_bounds: tuple = field(default=(0.0, 1.0))

    @property
    def M(self) -> int:
        return len(self.centers)

    def reflected(self) -> "BinLayout":
        lo, hi = self.domain_bounds
        return BinLayout((lo + hi) - self.centers[::-1], self.width, self.domain_bounds)


def make_bins(domain_bounds, *, M=None, width_pct=None, width=None) -> BinLayout:
    """Equally spaced bin centers covering ``domain_bounds``.

    Give exactly one of ``M`` (number of bins), ``width_pct`` (bin width as a
    fraction of the domain) or ``width`` (absolute width). With ``M`` alone
    the bins abut; with a width, ``M = ceil(range / d)``. ``M`` may also be
    combined with a width to request overlapping bins.

    The first center sits at ``s_min + d/2`` and the last at ``s_max - d/2``.
    """
    lo, hi = map(float, domain_bounds)
    span = hi - lo
    if not span > 0:
        raise BinningError("domain must have positive length")
    if width_pct is not None and width is not None:
        raise BinningError("give width_pct or width, not both")
    if width_pct is not None:
        if not 0 < width_pct < 1:
            raise BinningError(f"width_pct must be in (0, 1), got {width_pct}")
        d = float(width_pct) * span
    elif width is not None:
        if not 0 < width < span:
            raise BinningError(f"width must be in (0, {span}), got {width}")
        d = float(width)
    else:
        d = None

    if M is None:
        if d is None:
            raise BinningError("one of M, width_pct or width is required")
        # guard against 1/0.05 = 20.000000000000004
        M = math.ceil(span / d - 1e-9)
    M = int(M)
    if M < 2:
        raise BinningError(f"need at least 2 bins, got M={M}")
    if d is None:
        d = span / M
    centers = np.linspace(lo + d / 2, hi - d / 2, M)
    spacing = centers[1] - centers[0]
    if spacing > d * (1 + _TIE_RTOL):
        raise BinningError(f"{M} bins of width {d} do not cover the domain")
    return BinLayout(centers=centers, width=d, domain_bounds=(lo, hi))


@dataclass(frozen=True, eq=False)
class BinnedDataset:
    dataset: FunctionalDataset
    layout: BinLayout
    members: tuple  # per bin: sorted record indices
    counts: np.ndarray  # (n_visits, M) records of each visit in each bin

    @property
    def missing(self) -> np.ndarray:
        """(n_visits, M) True where a visit has no records in a bin."""
        return self.counts == 0


def in_bin(s, center, width, span=1.0) -> np.ndarray:
    return np.abs(np.asarray(s) - center) <= width / 2 + _TIE_RTOL * span


def assign_bins(dataset: FunctionalDataset, layout: BinLayout) -> BinnedDataset:
    """Assign records to every bin within ``d/2`` of their location (inclusive)."""
    lo, hi = layout.domain_bounds
    if not np.allclose(dataset.domain_bounds, layout.domain_bounds):
        raise BinningError(
            f"dataset domain {dataset.domain_bounds} differs from layout domain {layout.domain_bounds}"
        )
    span = hi - lo
    V = dataset.n_visits
    members = []
    counts = np.zeros((V, layout.M), dtype=np.int64)
    for m, c in enumerate(layout.centers):
        idx = np.flatnonzero(in_bin(dataset.s, c, layout.width, span))
        if len(idx) == 0:
            raise BinningError(f"bin {m} (center {c:g}) has no records; use a larger bin width")
        members.append(idx)
        counts[:, m] = np.bincount(dataset.visit[idx], minlength=V)
    if counts.mean() < 1:
        warnings.warn(
            f"bins hold {counts.mean():.2f} records per visit on average; consider a larger width",
            stacklevel=2,
        )
    return BinnedDataset(dataset=dataset, layout=layout, members=tuple(members), counts=counts)


__all__ = [
    "FunctionalDataset",
    "BinLayout",
    "BinnedDataset",
    "ingest_long_csv",
    "write_long_csv",
    "make_bins",
    "assign_bins",
    "check_family",
]
