import numpy as np
import pytest
from scipy import stats

from frim.diagnostics import ess, mcse_mean, split_rhat
from frim.errors import InputError
from frim.sampler import (
    SamplerConfig,
    interpolate_functions,
    make_inputs,
    read_draws,
    run_mcmc,
    summarize_random_effects,
    write_draws,
    draws_to_frame,
)

from oracles import gaussian_score_posterior, indicator

CENTERS = (np.arange(10) + 0.5) / 10


def toy(rng, I=4, J=2, n=6, K1=1, K2=0, s2=0.5, with_empty_visit=False):
    V = I * J
    vsub = np.repeat(np.arange(I), J)
    phi = np.column_stack([np.sqrt(2) * np.sin(2 * np.pi * CENTERS), np.ones(10)])[:, :K1]
    psi = np.column_stack([np.sqrt(2) * np.cos(2 * np.pi * CENTERS), np.sqrt(2) * np.sin(4 * np.pi * CENTERS)])[:, :K2]
    counts = np.full(V, n)
    if with_empty_visit:
        counts[-1] = 0
    rv = np.repeat(np.arange(V), counts)
    s = rng.choice(CENTERS, size=len(rv))
    o = rng.normal(size=len(rv))
    Phi = interpolate_functions(phi, CENTERS, s)
    Psi = interpolate_functions(psi, CENTERS, s)
    xi = rng.normal(size=(I, K1))
    zeta = rng.normal(size=(V, K2)) * 0.5
    y = o + np.sum(Phi * xi[vsub[rv]], axis=1) + np.sum(Psi * zeta[rv], axis=1) + rng.normal(scale=np.sqrt(s2), size=len(rv))
    inp = make_inputs(y, o, rv, s, vsub, CENTERS, phi, psi, "gaussian")
    return inp, Phi, Psi


def dense_Z(inp, Phi, Psi):
    Za = indicator(inp.visit_subject[inp.record_visit], inp.I)
    Zb = indicator(inp.record_visit, inp.V)
    blocks = [Za * Phi[:, [k]] for k in range(inp.K1)] + [Zb * Psi[:, [k]] for k in range(inp.K2)]
    return np.hstack(blocks)


def test_interpolation_identities():
    vals = np.random.default_rng(0).normal(size=(10, 3))
    np.testing.assert_array_equal(interpolate_functions(vals, CENTERS, CENTERS), vals)
    mid = 0.5 * (CENTERS[:-1] + CENTERS[1:])
    np.testing.assert_allclose(interpolate_functions(vals, CENTERS, mid), 0.5 * (vals[:-1] + vals[1:]), atol=1e-14)
    ends = interpolate_functions(vals, CENTERS, [0.0, 1.0])
    np.testing.assert_array_equal(ends, vals[[0, -1]])


def test_conjugate_single_component():
    rng = np.random.default_rng(1)
    inp, Phi, Psi = toy(rng, K1=1, K2=0, s2=0.5)
    cfg = SamplerConfig(chains=2, warmup=50, draws=2000, seed=3, fixed_var_xi=(0.8,), fixed_sigma2=0.5)
    dr = run_mcmc(inp, cfg)
    Z = dense_Z(inp, Phi, Psi)
    mean, cov = gaussian_score_posterior(inp.y - inp.offsets, Z, [0.8] * inp.I, 0.5)
    est = dr.xi[..., 0].mean(axis=(0, 1))
    se = mcse_mean(dr.xi[..., 0])
    assert np.all(np.abs(est - mean) < 3 * se)
    np.testing.assert_allclose(dr.pooled("xi")[:, :, 0].var(axis=0), np.diag(cov), rtol=0.1)


def test_conjugate_two_levels_joint():
    rng = np.random.default_rng(2)
    inp, Phi, Psi = toy(rng, I=3, J=3, K1=2, K2=2, s2=0.3)
    pv = [0.9, 0.4, 0.5, 0.2]
    cfg = SamplerConfig(chains=2, warmup=50, draws=3000, seed=5, fixed_var_xi=pv[:2], fixed_var_zeta=pv[2:], fixed_sigma2=0.3)
    dr = run_mcmc(inp, cfg)
    Z = dense_Z(inp, Phi, Psi)
    prior = [pv[0]] * inp.I + [pv[1]] * inp.I + [pv[2]] * inp.V + [pv[3]] * inp.V
    mean, cov = gaussian_score_posterior(inp.y - inp.offsets, Z, prior, 0.3)
    draws = np.concatenate(
        [dr.xi[..., 0], dr.xi[..., 1], dr.zeta[..., 0], dr.zeta[..., 1]], axis=2
    )  # (C, S, params) in the dense column order
    se = mcse_mean(draws)
    assert np.all(np.abs(draws.mean(axis=(0, 1)) - mean) < 4 * se)
    np.testing.assert_allclose(draws.reshape(-1, len(mean)).var(axis=0), np.diag(cov), rtol=0.12)


def test_no_random_effects_samples_residual_variance():
    rng = np.random.default_rng(4)
    vsub = np.repeat(np.arange(20), 2)
    rv = np.repeat(np.arange(40), 25)
    o = rng.normal(size=1000)
    y = o + rng.normal(scale=1.5, size=1000)
    inp = make_inputs(y, o, rv, rng.random(1000), vsub, CENTERS, np.zeros((10, 0)), np.zeros((10, 0)), "gaussian")
    dr = run_mcmc(inp, SamplerConfig(chains=2, warmup=100, draws=500, seed=1))
    assert dr.sigma2_eps.mean() == pytest.approx(np.mean((y - o) ** 2), rel=0.05)


def test_determinism_and_chain_order_invariance():
    rng = np.random.default_rng(6)
    inp, *_ = toy(rng, K1=1, K2=1)
    cfg = SamplerConfig(chains=3, warmup=20, draws=50, seed=9)
    a, b = run_mcmc(inp, cfg), run_mcmc(inp, cfg)
    assert np.array_equal(a.xi, b.xi) and np.array_equal(a.var_zeta, b.var_zeta)
    ba = summarize_random_effects(a, inp, "combined")
    perm = a.__class__(a.xi[::-1], a.zeta[::-1], a.var_xi[::-1], a.var_zeta[::-1], a.sigma2_eps[::-1], a.family)
    bp = summarize_random_effects(perm, inp, "combined")
    np.testing.assert_allclose(ba.lower, bp.lower, atol=1e-12)
    np.testing.assert_allclose(ba.upper, bp.upper, atol=1e-12)


def test_variance_draws_positive_and_counts():
    rng = np.random.default_rng(7)
    inp, *_ = toy(rng, K1=2, K2=2)
    dr = run_mcmc(inp, SamplerConfig(chains=2, warmup=30, draws=40, seed=1))
    assert dr.total == 80
    for v in (dr.var_xi, dr.var_zeta, dr.sigma2_eps):
        assert np.all(v > 0)


def test_prior_recovery_for_fully_missing_visit():
    rng = np.random.default_rng(8)
    inp, *_ = toy(rng, I=6, J=3, K1=1, K2=1, with_empty_visit=True)
    dr = run_mcmc(inp, SamplerConfig(chains=1, warmup=200, draws=2000, seed=2))
    z = dr.zeta[0, :, -1, 0] / np.sqrt(dr.var_zeta[0, :, 0])
    assert stats.kstest(z, "norm").pvalue > 0.01


def test_binomial_sampler_runs_and_is_sane():
    rng = np.random.default_rng(10)
    I, J, n = 30, 3, 40
    vsub = np.repeat(np.arange(I), J)
    rv = np.repeat(np.arange(I * J), n)
    s = np.tile(np.linspace(0.05, 0.95, n), I * J)
    phi = np.ones((10, 1))
    xi = rng.normal(size=I) * 1.2
    y = (rng.random(len(rv)) < 1 / (1 + np.exp(-xi[vsub[rv]]))).astype(float)
    inp = make_inputs(y, np.zeros(len(rv)), rv, s, vsub, CENTERS, phi, np.zeros((10, 0)), "binomial")
    dr = run_mcmc(inp, SamplerConfig(chains=2, warmup=200, draws=400, seed=0))
    assert dr.sigma2_eps is None
    assert np.corrcoef(dr.xi[..., 0].mean(axis=(0, 1)), xi)[0, 1] > 0.9
    assert 0.5 < dr.var_xi.mean() < 3.0


def test_collapsed_band_for_constant_draws():
    rng = np.random.default_rng(11)
    inp, *_ = toy(rng, K1=1, K2=1)
    dr = run_mcmc(inp, SamplerConfig(chains=1, warmup=0, draws=10, seed=0))
    dr.zeta[:] = 0.7
    b = summarize_random_effects(dr, inp, "subject_visit")
    np.testing.assert_allclose(b.upper - b.lower, 0.0, atol=1e-14)
    np.testing.assert_allclose(b.mean, np.broadcast_to(0.7 * inp.psi_grid[:, 0], b.mean.shape), atol=1e-14)


def test_type7_quantile_indices():
    rng = np.random.default_rng(12)
    inp, *_ = toy(rng, K1=1, K2=0)
    dr = run_mcmc(inp, SamplerConfig(chains=1, warmup=0, draws=2000, seed=0))
    b = summarize_random_effects(dr, inp, "subject", alpha=0.05)
    vals = np.sort(dr.xi[0, :, 0, 0][:, None] * inp.phi_grid[:, 0][None, :], axis=0)
    # type 7: h = (n - 1) p, so p = 0.025 sits at 49.975 between sorted[49] and sorted[50]
    lo = vals[49] + 0.975 * (vals[50] - vals[49])
    hi = vals[1949] + 0.025 * (vals[1950] - vals[1949])
    np.testing.assert_allclose(b.lower[0], np.minimum(lo, hi), atol=1e-12)
    np.testing.assert_allclose(b.upper[0], np.maximum(lo, hi), atol=1e-12)


def test_lookup_errors_and_entities():
    rng = np.random.default_rng(13)
    inp, *_ = toy(rng, K1=1, K2=1)
    dr = run_mcmc(inp, SamplerConfig(chains=1, warmup=0, draws=5, seed=0))
    b = summarize_random_effects(dr, inp, "combined", entities=[(1, 0), (2, 1)])
    assert b.mean.shape == (2, 10) and list(b.subject) == [1, 2] and list(b.visit) == [0, 1]
    with pytest.raises(KeyError):
        summarize_random_effects(dr, inp, "combined", entities=[(99, 0)])
    g = np.linspace(0, 1, 7)
    assert summarize_random_effects(dr, inp, "subject", grid=g).mean.shape == (inp.I, 7)


@pytest.mark.filterwarnings("ignore:NOT CONVERGED")
def test_draws_roundtrip(tmp_path):
    rng = np.random.default_rng(14)
    inp, *_ = toy(rng, K1=2, K2=1)
    dr = run_mcmc(inp, SamplerConfig(chains=2, warmup=0, draws=8, seed=0))
    write_draws(tmp_path / "d.bin", dr)
    back = read_draws(tmp_path / "d.bin")
    for name in ("xi", "zeta", "var_xi", "var_zeta", "sigma2_eps"):
        assert np.array_equal(getattr(back, name), getattr(dr, name))
    raw = (tmp_path / "d.bin").read_bytes()
    assert raw[:8] == b"FRIMDRW1"
    frame = draws_to_frame(dr, include_scores=True)
    assert len(frame) == 16 and "xi_0_2" in frame and "zeta_3_1" in frame


def test_binomial_without_components_rejected():
    inp = make_inputs([0.0, 1.0], [0.0, 0.0], [0, 1], [0.1, 0.2], [0, 0], CENTERS, np.zeros((10, 0)),
                      np.zeros((10, 0)), "binomial")
    with pytest.raises(InputError):
        run_mcmc(inp, SamplerConfig(chains=1, draws=5))


def test_diagnostics_on_iid_and_stuck_chains():
    rng = np.random.default_rng(15)
    x = rng.normal(size=(4, 1000, 3))
    r = split_rhat(x)
    assert np.all(r < 1.01)
    e = ess(x)
    assert np.all((e > 2500) & (e < 6000))
    bad = x + np.arange(4)[:, None, None]
    assert np.all(split_rhat(bad) > 1.5)
    # AR(1) with phi=0.9 has integrated autocorrelation time 19
    ar = np.zeros((4, 4000))
    for t in range(1, 4000):
        ar[:, t] = 0.9 * ar[:, t - 1] + rng.normal(size=4)
    assert ess(ar[:, :, None])[0] == pytest.approx(16000 / 19, rel=0.3)
