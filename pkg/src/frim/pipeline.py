"""End-to-end fit: local GLMMs, smoothing, multilevel FPCA, posterior sampling."""

from __future__ import annotations

import time
import warnings
from dataclasses import dataclass, field

import numpy as np

from .data import FunctionalDataset, assign_bins, make_bins
from .errors import FRIMError, InputError
from .glmm import GLMMControls, fit_all_bins
from .mfpca import check_policy, fit_mfpca
from .sampler import SamplerConfig, build_design, run_mcmc
from .smoothing import adjusted_random_components, smooth_coefficients, stack_beta_hats

STAGES = ("bin", "local_glmm", "smooth", "mfpca", "sample")
DEFAULT_WIDTH_PCT = 0.05


@dataclass(frozen=True)
class PipelineSettings:
    """Tuning for one fit. Give at most one of ``bin_width_pct`` and ``bin_width``;
    ``n_bins`` alone gives abutting bins and with a width gives overlapping ones."""

    bin_width_pct: float | None = None
    bin_width: float | None = None
    n_bins: int | None = None
    pve_threshold: float = 0.95
    K_max: int = 10
    missing_policy: str = "drop_incomplete_visits"
    diagonal: str = "smooth"
    interpolation: str = "linear"
    glmm: GLMMControls = field(default_factory=GLMMControls)
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    alpha: float = 0.05

    def __post_init__(self):
        object.__setattr__(self, "missing_policy", check_policy(self.missing_policy))

    def layout_for(self, domain_bounds):
        pct = self.bin_width_pct
        if pct is None and self.bin_width is None and self.n_bins is None:
            pct = DEFAULT_WIDTH_PCT
        return make_bins(domain_bounds, M=self.n_bins, width_pct=pct, width=self.bin_width)


class StageError(FRIMError):
    """Wraps a module error with the stage in which it occurred."""

    def __init__(self, stage, error):
        super().__init__(f"{stage}: {error}")
        self.stage = stage
        self.error = error


@dataclass(eq=False)
class FRIMFit:
    dataset: FunctionalDataset
    settings: PipelineSettings
    layout: object = None
    binned: object = None
    fits: list = None
    fcoef: object = None
    adjusted: object = None
    mfpca: object = None
    inputs: object = None
    draws: object = None
    timings: dict = field(default_factory=dict)
    warnings: list = field(default_factory=list)

    @property
    def failed_bins(self) -> list:
        return [f.bin_index for f in (self.fits or []) if not f.converged]

    def summary(self) -> dict:
        out = {
            "family": self.dataset.family,
            "I": self.dataset.I,
            "n_visits": self.dataset.n_visits,
            "n_records": self.dataset.n,
            "timings": self.timings,
        }
        if self.layout is not None:
            out.update(M=self.layout.M, bin_width=self.layout.width)
        if self.fits is not None:
            out["failed_bins"] = self.failed_bins
        if self.mfpca is not None:
            out.update(self.mfpca.summary())
        if self.draws is not None:
            out["max_variance_rhat"] = self.draws.max_variance_rhat()
        return out


def _stage(fit, name, fn):
    t0 = time.perf_counter()
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        try:
            out = fn()
        except FRIMError as exc:
            raise StageError(name, exc) from exc
        finally:
            fit.timings[name] = fit.timings.get(name, 0.0) + time.perf_counter() - t0
    for w in caught:
        fit.warnings.append(f"{name}: {w.message}")
        warnings.warn_explicit(w.message, w.category, w.filename, w.lineno)
    return out


def fit_frim(dataset: FunctionalDataset, settings: PipelineSettings | None = None, *, map_fn=map,
             sample=True) -> FRIMFit:
    """Run the three-step method on ``dataset``.

    ``map_fn`` parallelizes bins and chains. With ``sample=False`` the fit
    stops after the eigendecomposition (useful for scoring new visits with
    :func:`score_visits`).
    """
    settings = settings or PipelineSettings()
    fit = FRIMFit(dataset=dataset, settings=settings)
    fit.layout = _stage(fit, "bin", lambda: settings.layout_for(dataset.domain_bounds))
    fit.binned = _stage(fit, "bin", lambda: assign_bins(dataset, fit.layout))
    fit.fits = _stage(fit, "local_glmm", lambda: fit_all_bins(fit.binned, settings.glmm, map_fn=map_fn))

    def smooth():
        bh = stack_beta_hats(fit.fits, dataset.p)
        fc = smooth_coefficients(bh, fit.layout.centers, dataset.domain_bounds, names=dataset.covariate_names)
        ac = adjusted_random_components(fit.fits, fc, dataset.X, dataset.visit_subject, fit.layout.centers)
        return fc, ac

    fit.fcoef, fit.adjusted = _stage(fit, "smooth", smooth)
    fit.mfpca = _stage(
        fit,
        "mfpca",
        lambda: fit_mfpca(fit.adjusted, settings.missing_policy, settings.pve_threshold, settings.K_max,
                          diagonal=settings.diagonal),
    )
    if sample:
        fit.inputs = _stage(fit, "sample", lambda: build_design(dataset, fit.fcoef, fit.mfpca, settings.interpolation))
        fit.draws = _stage(fit, "sample", lambda: run_mcmc(fit.inputs, settings.sampler, map_fn=map_fn))
    return fit


def score_visits(trained: FRIMFit, dataset: FunctionalDataset, config: SamplerConfig | None = None, *, map_fn=map):
    """Sample scores for ``dataset`` holding the trained fixed effects and eigenfunctions fixed."""
    config = config or trained.settings.sampler
    inputs = build_design(dataset, trained.fcoef, trained.mfpca, trained.settings.interpolation)
    return inputs, run_mcmc(inputs, config, map_fn=map_fn)


def stage_seconds(fit: FRIMFit) -> float:
    return float(np.sum(list(fit.timings.values())))


REFERENCES = ("pooled", "predictive")


def flag_test_visits(dataset: FunctionalDataset, test_mask, settings: PipelineSettings | None = None, *,
                     alpha=0.05, min_duration=0.0, reference="pooled", map_fn=map):
    """Train on the visits outside ``test_mask`` and flag each test visit.

    Components are estimated from training visits only; scores for every
    visit are then sampled with those components held fixed, and a test
    visit's posterior mean b_ij(s) is compared with a reference band.

    ``reference='pooled'`` pools the draws of the subject's own training
    visits. With few training visits that band is close to the range of a
    handful of curves, so the null exceedance rate sits well above alpha.
    ``reference='predictive'`` instead draws a fresh visit curve for each
    posterior draw of the level-2 variances, which is calibrated under the
    model. A tuple of references returns a dict keyed by reference.
    Otherwise the result is ``[(visit_row, AnomalyReport)]`` for test visits
    whose subject keeps at least two training visits.
    """
    from .inference import detect_anomalies
    from .sampler import random_effect_draws, summarize_random_effects

    refs = (reference,) if isinstance(reference, str) else tuple(reference)
    for ref in refs:
        if ref not in REFERENCES:
            raise InputError(f"unknown reference {ref!r}; choose from {REFERENCES}")
    settings = settings or PipelineSettings()
    test = np.asarray(test_mask, dtype=bool)
    if test.shape != (dataset.n_visits,):
        raise InputError("test mask must have one entry per visit")
    trained = fit_frim(dataset.subset_visits(~test), settings, map_fn=map_fn, sample=False)
    inputs, draws = score_visits(trained, dataset, settings.sampler, map_fn=map_fn)
    bands = summarize_random_effects(draws, inputs, "subject_visit", alpha)
    predictive = None
    if "predictive" in refs:
        rng = np.random.default_rng(np.random.SeedSequence([settings.sampler.seed, 5]))
        var = draws.pooled("var_zeta")
        predictive = (rng.standard_normal(var.shape) * np.sqrt(var)) @ inputs.psi_grid.T
    out = {ref: [] for ref in refs}
    for v in np.flatnonzero(test):
        train_rows = np.flatnonzero((dataset.visit_subject == dataset.visit_subject[v]) & ~test)
        if len(train_rows) < 2:
            continue
        for ref in refs:
            band = predictive if ref == "predictive" else random_effect_draws(draws, inputs, "subject_visit", train_rows)
            out[ref].append((int(v), detect_anomalies(band, bands.mean[v], bands.grid, alpha, min_duration)))
    return out[reference] if isinstance(reference, str) else out
