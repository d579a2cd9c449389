import inspect

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from knockoff_ensemble.errors import DataError, KnockoffError
from knockoff_ensemble.knockoff import (
    KnockoffModel,
    augmented_header,
    equicorrelated_s,
    fit_gaussian_model,
    make_knockoffs,
    read_augmented,
    sample_scit_knockoffs,
    sample_single_knockoffs,
    shrink_covariance,
    write_augmented,
)

N_MC = 20_000


def correlated_gaussian(n, p, seed, rho=0.4):
    """Rows from an AR(1)-style covariance with unit variances."""
    idx = np.arange(p)
    cov = rho ** np.abs(idx[:, None] - idx[None, :])
    rng = np.random.default_rng(seed)
    return rng.standard_normal((n, p)) @ np.linalg.cholesky(cov).T


def max_moment_errors(aug):
    """Largest deviations of Cov(Xk) from Cov(X) and of Cov(X, Xk) from Sigma - diag(s)."""
    p, M = aug.p, aug.M
    C = np.cov(aug.Xaug, rowvar=False)
    target_cross = aug.model.Sigma - np.diag(aug.model.s)
    cov_err = cross_err = 0.0
    for m in range(1, M + 1):
        blk = slice(m * p, (m + 1) * p)
        cov_err = max(cov_err, np.abs(C[blk, blk] - C[:p, :p]).max())
        cross_err = max(cross_err, np.abs(C[:p, blk] - target_cross).max())
    return cov_err, cross_err


def test_identity_data_gives_unit_s():
    X = np.random.default_rng(0).standard_normal((N_MC, 4))
    model = fit_gaussian_model(X)
    np.testing.assert_allclose(model.Sigma, np.eye(4), atol=0.05)
    np.testing.assert_allclose(model.s, np.diag(model.Sigma))


def test_equicorrelated_two_by_two():
    # Correlation [[1, .5], [.5, 1]] has eigenvalues 1.5 and 0.5, so min(1, 2 * 0.5) = 1.
    np.testing.assert_allclose(equicorrelated_s(np.array([[1.0, 0.5], [0.5, 1.0]])), [1.0, 1.0])
    np.testing.assert_allclose(equicorrelated_s(np.array([[4.0, 1.6], [1.6, 1.0]])), [4 * 0.4, 0.4])


def test_fit_rejects_bad_inputs():
    with pytest.raises(DataError):
        fit_gaussian_model(np.ones((2, 3)))
    with pytest.raises(DataError):
        fit_gaussian_model(np.ones((5, 0)))
    X = np.random.default_rng(0).normal(size=(10, 3))
    X[:, 1] = 2.0
    with pytest.raises(KnockoffError):
        fit_gaussian_model(X)


def test_shrinkage_regularizes_singular_covariance():
    X = np.random.default_rng(1).normal(size=(10, 30))
    S = np.cov(X, rowvar=False)
    Sigma, w = shrink_covariance(S)
    assert 0 < w < 1
    assert np.linalg.eigvalsh(Sigma)[0] >= 1e-6 * (1 - 1e-9)
    np.testing.assert_allclose(np.diag(Sigma), np.diag(S))
    np.testing.assert_array_equal(shrink_covariance(np.eye(3))[0], np.eye(3))


@settings(max_examples=30, deadline=None)
@given(st.integers(3, 40), st.integers(1, 25), st.integers(0, 10_000))
def test_model_invariants(n, p, seed):
    X = np.random.default_rng(seed).normal(size=(n, p)) * np.arange(1, p + 1)
    model = fit_gaussian_model(X)
    assert np.allclose(model.Sigma, model.Sigma.T)
    assert np.linalg.eigvalsh(model.Sigma)[0] > 0
    assert np.all(model.s >= 0)
    assert np.linalg.eigvalsh(2 * model.Sigma - np.diag(model.s))[0] > -1e-8


def test_single_knockoffs_independent_for_identity():
    X = np.random.default_rng(2).standard_normal((N_MC, 4))
    aug = make_knockoffs(X, 1, seed=3)
    C = np.corrcoef(aug.Xaug, rowvar=False)
    assert np.abs(np.diag(C[:4, 4:])).max() < 0.05


@pytest.mark.parametrize("M", [1, 2])
def test_knockoff_moments(M):
    X = correlated_gaussian(N_MC, 5, seed=10 + M)
    aug = make_knockoffs(X, M, seed=4)
    cov_err, cross_err = max_moment_errors(aug)
    assert cov_err < 0.1 and cross_err < 0.1


def test_scit_single_copy_matches_single_construction_moments_for_identity():
    X = np.random.default_rng(21).standard_normal((N_MC, 4))
    model = fit_gaussian_model(X)
    a = sample_single_knockoffs(X, model, seed=1)
    b = sample_scit_knockoffs(X, model, seed=2)
    Ca, Cb = np.cov(a.Xaug, rowvar=False), np.cov(b.Xaug, rowvar=False)
    assert np.abs(Ca - Cb).max() < 0.1


def test_scit_identity_gives_iid_copies():
    X = np.random.default_rng(5).standard_normal((N_MC, 1))
    aug = make_knockoffs(X, 3, seed=6)
    C = np.corrcoef(aug.Xaug, rowvar=False)
    off = C[np.triu_indices(4, 1)]
    assert np.abs(off).max() < 0.05
    np.testing.assert_allclose(aug.Xaug[:, 1:].std(axis=0), 1.0, atol=0.03)


def test_swap_exchangeability_multiple_copies():
    rng = np.random.default_rng(7)
    p, M = 5, 2
    aug = make_knockoffs(correlated_gaussian(N_MC, p, seed=8), M, seed=9)
    C = np.cov(aug.Xaug, rowvar=False)
    for _ in range(10):
        J = np.flatnonzero(rng.random(p) < 0.5)
        m = int(rng.integers(1, M + 1))
        perm = np.arange((1 + M) * p)
        perm[J], perm[m * p + J] = m * p + J, J
        assert np.abs(C[np.ix_(perm, perm)] - C).max() < 0.1


@pytest.mark.parametrize("M", [1, 3])
def test_sampling_is_deterministic(M):
    X = correlated_gaussian(50, 6, seed=0)
    a, b = make_knockoffs(X, M, seed=12), make_knockoffs(X, M, seed=12)
    assert a.Xaug.tobytes() == b.Xaug.tobytes()
    assert a.Xaug.shape == (50, (1 + M) * 6)
    np.testing.assert_array_equal(a.original(), X)


def test_samplers_never_see_the_response():
    for fn in (fit_gaussian_model, sample_single_knockoffs, sample_scit_knockoffs, make_knockoffs):
        assert "y" not in inspect.signature(fn).parameters


def test_single_sampler_needs_one_copy():
    X = correlated_gaussian(20, 3, seed=0)
    with pytest.raises(KnockoffError):
        sample_single_knockoffs(X, fit_gaussian_model(X, M=2))


def test_high_dimensional_scit_runs():
    X = np.random.default_rng(3).normal(size=(15, 25))
    aug = make_knockoffs(X, 2, seed=0)
    assert np.all(np.isfinite(aug.Xaug))


def test_header_and_roundtrip(tmp_path):
    assert augmented_header(2, 2) == ["X_1", "X_2", "K1_1", "K1_2", "K2_1", "K2_2"]
    aug = make_knockoffs(correlated_gaussian(12, 3, seed=1), 2, seed=0)
    write_augmented(aug, tmp_path / "a.csv", tmp_path / "m.json")
    back = read_augmented(tmp_path / "a.csv", tmp_path / "m.json")
    np.testing.assert_array_equal(back.Xaug, aug.Xaug)
    np.testing.assert_array_equal(back.model.Sigma, aug.model.Sigma)
    assert back.model.M == 2
    assert KnockoffModel.from_json(aug.model.to_json()).s.tolist() == aug.model.s.tolist()
