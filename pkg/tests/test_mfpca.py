import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from frim.errors import MFPCAError
from frim.mfpca import (
    choose_components,
    eigendecompose,
    estimate_covariances,
    fit_mfpca,
    project,
    trapezoid_weights,
)
from frim.simulate import level1_basis, level2_basis
from frim.smoothing import AdjustedComponents

from oracles import trapezoid_weights as oracle_weights

GRID = np.linspace(0, 1, 100)
LAMBDAS = np.array([1.0, 0.5, 0.25, 0.125])


def test_trapezoid_weights_match_oracle():
    g = np.sort(np.random.default_rng(0).random(17))
    np.testing.assert_allclose(trapezoid_weights(g), oracle_weights(g), rtol=1e-14)


def test_isotropic_covariance():
    h = GRID[1] - GRID[0]
    w = np.full(100, h)
    e = eigendecompose(np.eye(100) * h, w)
    np.testing.assert_allclose(e.values, h * h, rtol=1e-12)  # all equal
    np.testing.assert_allclose(e.functions.T @ (w[:, None] * e.functions), np.eye(100), atol=1e-10)


def test_case1_eigen_recovery():
    phi = level1_basis(GRID)
    G = phi @ np.diag(LAMBDAS) @ phi.T
    w = trapezoid_weights(GRID)
    e = eigendecompose(G, w)
    np.testing.assert_allclose(e.values[:4], LAMBDAS, atol=1e-6)
    assert np.max(e.values[4:]) < 1e-10
    for k in range(4):
        f = e.functions[:, k]
        cos = abs(np.sum(w * f * phi[:, k])) / np.sqrt(np.sum(w * f * f) * np.sum(w * phi[:, k] ** 2))
        assert cos > 1 - 1e-8


def test_negative_eigenvalue_floored_and_excluded():
    phi = level1_basis(GRID)
    w = trapezoid_weights(GRID)
    G = phi @ np.diag([1.0, 0.5, 0.25, -0.3]) @ phi.T
    e = eigendecompose(G, w)
    assert np.all(e.values >= 0)
    np.testing.assert_allclose(e.values[:3], [1.0, 0.5, 0.25], atol=1e-6)
    K, cum = choose_components(e.values, 0.999)
    assert K == 3 and cum[2] == pytest.approx(1.0)


def test_sign_convention():
    phi = level1_basis(GRID)
    e = eigendecompose(phi @ np.diag(LAMBDAS) @ phi.T, trapezoid_weights(GRID))
    f = e.functions[:, :4]
    idx = np.argmax(np.abs(f), axis=0)
    assert np.all(f[idx, np.arange(4)] > 0)


def test_pve_rule_examples():
    K, cum = choose_components(LAMBDAS, 0.9)
    assert K == 3 and cum[2] == pytest.approx(0.9333333, abs=1e-6)
    assert choose_components(LAMBDAS, 0.99999, K_max=10)[0] == 4
    assert choose_components(LAMBDAS, 0.99999, K_max=2)[0] == 2


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(0, 10), min_size=1, max_size=12), st.floats(0.05, 0.99), st.integers(1, 12))
def test_pve_rule_property(vals, thr, kmax):
    vals = np.sort(np.array(vals))[::-1]
    K, cum = choose_components(vals, thr, kmax)
    if vals.sum() == 0:
        assert K == 0
        return
    assert K <= kmax
    if K < min(kmax, np.sum(vals > 0)):
        assert cum[K - 1] >= thr - 1e-12
    if K > 1:
        assert cum[K - 2] < thr or K == np.sum(vals > 0)


def _hand_covariances(vals, vsub):
    V, M = vals.shape
    R = vals - vals.mean(axis=0)
    Gt = sum(np.outer(R[v], R[v]) for v in range(V)) / V
    pairs = [(u, v) for u in range(V) for v in range(V) if u != v and vsub[u] == vsub[v]]
    Gb = sum(np.outer(R[u], R[v]) for u, v in pairs) / len(pairs)
    return Gt, 0.5 * (Gb + Gb.T)


def test_hand_computed_tiny_instance():
    vals = np.array(
        [[1.0, 2.0, 0.0], [0.5, 1.0, -1.0], [-1.0, 0.0, 2.0], [0.0, 1.0, 1.0], [2.0, -1.0, 0.5], [1.5, 0.0, 0.0]]
    )
    vsub = np.repeat(np.arange(3), 2)
    ac = AdjustedComponents(vals, np.array([1 / 6, 0.5, 5 / 6]), vsub)
    cov = estimate_covariances(ac)
    Gt, Gb = _hand_covariances(vals, vsub)
    np.testing.assert_allclose(cov.G_total, Gt, rtol=1e-13, atol=1e-15)
    np.testing.assert_allclose(cov.G_between, Gb, rtol=1e-13, atol=1e-15)
    off = ~np.eye(3, dtype=bool)
    np.testing.assert_allclose(cov.G_within[off], (Gt - Gb)[off], atol=1e-14)


def test_single_level_gives_zero_within():
    rng = np.random.default_rng(0)
    I, J = 40, 3
    g = (np.arange(20) + 0.5) / 20
    xi = rng.normal(size=I)
    vals = np.repeat(xi, J)[:, None] * level1_basis(g)[:, 0][None, :]
    ac = AdjustedComponents(vals, g, np.repeat(np.arange(I), J))
    cov = estimate_covariances(ac)
    assert np.linalg.norm(cov.G_within) < 1e-8
    assert np.linalg.matrix_rank(cov.G_between, tol=1e-8) == 1


def _noiseless(I=100, J=5, seed=0, case="case2"):
    rng = np.random.default_rng(seed)
    g = (np.arange(1, 101)) / 100
    phi, psi = level1_basis(g), level2_basis(g, case)
    xi = rng.normal(size=(I, 4)) * np.sqrt(LAMBDAS)
    zeta = rng.normal(size=(I * J, 4)) * np.sqrt(LAMBDAS)
    vsub = np.repeat(np.arange(I), J)
    vals = xi[vsub] @ phi.T + zeta @ psi.T
    return AdjustedComponents(vals, g, vsub)


def test_orthonormality_and_ordering():
    res = fit_mfpca(_noiseless(), K_max=10)
    for F in (res.phi, res.psi):
        gram = F.T @ (res.weights[:, None] * F)
        assert np.max(np.abs(gram - np.eye(F.shape[1]))) < 1e-6
    for lam in (res.lambda1, res.lambda2):
        assert np.all(lam >= 0) and np.all(np.diff(lam) <= 0)
    assert res.pve1[res.K1 - 1] >= 0.95 and res.pve2[res.K2 - 1] >= 0.95


def test_reconstruction_noiseless():
    ac = _noiseless()
    res = fit_mfpca(ac, pve_threshold=0.999, K_max=10)
    R = ac.values - ac.values.mean(axis=0)
    basis = np.column_stack([res.phi, res.psi])
    # weighted least-squares projection onto span of both levels
    W = res.weights
    A = basis.T @ (W[:, None] * basis)
    coef = np.linalg.solve(A, basis.T @ (W[:, None] * R.T))
    fitted = (basis @ coef).T
    explained = 1 - np.sum(W * (R - fitted) ** 2) / np.sum(W * R**2)
    assert explained > 0.99


def test_policy_equivalence_without_missingness():
    ac = _noiseless(I=30, J=3, case="case1")
    a = estimate_covariances(ac, "drop_incomplete_visits")
    b = estimate_covariances(ac, "pairwise_complete")
    for name in ("G_between", "G_within", "G_total"):
        assert np.array_equal(getattr(a, name), getattr(b, name))
    assert a.sigma2_noise == b.sigma2_noise


def test_policies_differ_with_missingness():
    ac = _noiseless(I=30, J=3, case="case1")
    vals = ac.values.copy()
    vals[0, 10:20] = np.nan
    ac = AdjustedComponents(vals, ac.grid, ac.visit_subject)
    a = estimate_covariances(ac, "drop")
    b = estimate_covariances(ac, "pairwise")
    assert a.n_visits_used == 89 and b.n_visits_used == 90
    assert not np.array_equal(a.G_total, b.G_total)


def test_noise_lands_on_diagonal_only():
    ac = _noiseless(I=200, J=5, case="case2")
    rng = np.random.default_rng(1)
    noisy = AdjustedComponents(ac.values + rng.normal(scale=0.3, size=ac.values.shape), ac.grid, ac.visit_subject)
    cov = estimate_covariances(noisy)
    assert cov.sigma2_noise == pytest.approx(0.09, rel=0.15)


def test_unidentified_within_level():
    g = np.linspace(0.1, 0.9, 5)
    ac = AdjustedComponents(np.random.default_rng(0).normal(size=(4, 5)), g, np.array([0, 1, 2, 3]))
    with pytest.raises(MFPCAError):
        estimate_covariances(ac)


def test_project_recovers_scores():
    phi = level1_basis(GRID)
    w = trapezoid_weights(GRID)
    scores = np.array([[1.0, -2.0, 0.5, 0.0]])
    np.testing.assert_allclose(project(scores @ phi.T, phi, w), scores, atol=1e-10)
