"""Functional random-effects inference for multilevel functional data.

The method fits local mixed models in bins along the functional domain,
smooths the local fixed effects, decomposes the adjusted random components
with two-level functional PCA and samples the scores by MCMC.
"""

from .data import BinLayout, FunctionalDataset, assign_bins, ingest_long_csv, make_bins
from .glmm import GLMMControls, LocalFit, fit_local_glmm
from .inference import CredibleBands, compute_mpcp, detect_anomalies, leakage_diagnostic
from .mfpca import MFPCAResult, fit_mfpca
from .pipeline import FRIMFit, PipelineSettings, fit_frim, flag_test_visits, score_visits
from .sampler import PosteriorDraws, SamplerConfig, run_mcmc, summarize_random_effects
from .simulate import SimConfig, generate_dataset, inject_missingness, run_anomaly_study, run_coverage_study

__version__ = "0.1.0"

__all__ = [
    "BinLayout",
    "CredibleBands",
    "FRIMFit",
    "FunctionalDataset",
    "GLMMControls",
    "LocalFit",
    "MFPCAResult",
    "PipelineSettings",
    "PosteriorDraws",
    "SamplerConfig",
    "SimConfig",
    "assign_bins",
    "compute_mpcp",
    "detect_anomalies",
    "fit_frim",
    "fit_local_glmm",
    "fit_mfpca",
    "flag_test_visits",
    "generate_dataset",
    "ingest_long_csv",
    "inject_missingness",
    "leakage_diagnostic",
    "make_bins",
    "run_anomaly_study",
    "run_coverage_study",
    "run_mcmc",
    "score_visits",
    "summarize_random_effects",
]
