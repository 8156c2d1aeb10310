"""Multi-chain convergence diagnostics: split R-hat and effective sample size.

Both take draws shaped ``(chains, draws, ...)`` and return one value per
trailing scalar.
"""

from __future__ import annotations

import numpy as np


def _split(x):
    C, N = x.shape[:2]
    half = N // 2
    if half < 2:
        raise ValueError("need at least 4 draws per chain")
    first = x[:, :half]
    second = x[:, N - half :]
    return np.concatenate([first, second], axis=0)


def split_rhat(x) -> np.ndarray:
    """Potential scale reduction on split chains; NaN for constant scalars."""
    x = np.asarray(x, dtype=float)
    y = _split(x)
    n = y.shape[1]
    W = y.var(axis=1, ddof=1).mean(axis=0)
    B_over_n = y.mean(axis=1).var(axis=0, ddof=1)
    var_plus = (n - 1) / n * W + B_over_n
    with np.errstate(invalid="ignore", divide="ignore"):
        rhat = np.sqrt(var_plus / W)
    return np.where(W > 0, rhat, np.nan)


def _autocovariance(y):
    # y: (C, n, P), FFT along the draw axis
    n = y.shape[1]
    yc = y - y.mean(axis=1, keepdims=True)
    size = 1 << int(np.ceil(np.log2(2 * n)))
    f = np.fft.rfft(yc, n=size, axis=1)
    acov = np.fft.irfft(f * np.conj(f), n=size, axis=1)[:, :n]
    return acov / n


def ess(x) -> np.ndarray:
    """Effective sample size with Geyer's initial monotone sequence estimator."""
    x = np.asarray(x, dtype=float)
    shape = x.shape[2:]
    y = _split(x).reshape(2 * x.shape[0], -1, int(np.prod(shape, dtype=int)))
    m, n, P = y.shape
    acov = _autocovariance(y)
    W = acov[:, 0].mean(axis=0) * n / (n - 1)
    var_plus = W * (n - 1) / n + y.mean(axis=1).var(axis=0, ddof=1)
    out = np.full(P, np.nan)
    ok = W > 0
    with np.errstate(invalid="ignore", divide="ignore"):
        rho = 1.0 - (W - acov.mean(axis=0)) / var_plus  # (n, P)
    rho[0] = 1.0
    npairs = n // 2
    pairs = rho[: 2 * npairs].reshape(npairs, 2, P).sum(axis=1)
    # truncate at the first negative pair sum, then enforce monotonicity
    neg = pairs < 0
    first_neg = np.where(neg.any(axis=0), neg.argmax(axis=0), npairs)
    keep = np.arange(npairs)[:, None] < first_neg[None, :]
    pairs = np.where(keep, pairs, 0.0)
    pairs = np.minimum.accumulate(np.where(keep, pairs, np.inf), axis=0)
    pairs = np.where(keep, pairs, 0.0)
    tau = -1.0 + 2.0 * pairs.sum(axis=0)
    tau = np.maximum(tau, 1.0 / np.log10(max(m * n, 10)))
    out[ok] = (m * n / tau)[ok]
    return out.reshape(shape)


def mcse_mean(x) -> np.ndarray:
    """Monte Carlo standard error of the posterior mean."""
    x = np.asarray(x, dtype=float)
    sd = x.reshape(-1, *x.shape[2:]).std(axis=0, ddof=1)
    return sd / np.sqrt(ess(x))
