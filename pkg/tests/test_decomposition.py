import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from averis_lab.decomposition import (
    anisotropic_activations,
    attribute_outliers,
    decompose,
    default_rank,
    mean_diagnostics,
    outlier_count,
    r_ratio,
)
from averis_lab.extreme_stats import normal_cdf, normal_quantile
from averis_lab.linalg import ContractError, full_svd


def test_default_rank_rule():
    assert default_rank(50) == 1
    assert default_rank(256) == 2
    assert default_rank(4096) == 40


def test_narrow_matrix_records_rank_note(rng):
    d = decompose(rng.standard_normal((10, 20)))
    assert d.k == 1 and "floor" in d.rank_note
    assert decompose(rng.standard_normal((10, 200))).rank_note == ""


def test_pure_mean_has_no_spike_or_tail():
    x = np.tile([3.0, -1.0, 2.0, 0.5], (20, 1))
    d = decompose(x, k=1)
    assert d.spike_energy == pytest.approx(0.0, abs=1e-20)
    assert d.tail_energy == pytest.approx(0.0, abs=1e-20)
    assert d.mean_energy == pytest.approx(np.sum(x * x), rel=1e-14)


def test_rank_one_centered_leaves_no_tail(rng):
    a = rng.standard_normal(40)
    x = np.outer(a - a.mean(), rng.standard_normal(12))
    d = decompose(x, k=1)
    assert d.tail_energy <= 1e-20 * d.total_energy
    assert d.mean_energy <= 1e-20 * d.total_energy


def test_energy_identity_against_brute_force(rng):
    mu = rng.normal(0, 10, size=128)
    x = mu + rng.standard_normal((200, 128))
    d = decompose(x, k=3)
    brute_mean = np.sum(d.mean_matrix() ** 2)
    brute_spike = np.sum(d.spike_matrix() ** 2)
    brute_tail = np.sum(d.tail_matrix(x) ** 2)
    total = np.sum(x**2)
    assert abs(total - (brute_mean + brute_spike + brute_tail)) <= 1e-8 * total
    assert abs(d.total_energy - (d.mean_energy + d.spike_energy + d.tail_energy)) <= 1e-8 * total
    np.testing.assert_allclose(d.mean_matrix() + d.spike_matrix() + d.tail_matrix(x), x, atol=1e-10)


def test_spike_matches_exact_svd(rng):
    x = rng.standard_normal((60, 30)) + np.outer(rng.standard_normal(60), rng.standard_normal(30)) * 4
    d = decompose(x, k=2)
    ref = full_svd(x - x.mean(axis=0))
    np.testing.assert_allclose(d.spike.s, ref.s[:2], rtol=1e-9)


def test_decompose_rejects_degenerate(rng):
    with pytest.raises(ContractError):
        decompose(rng.standard_normal((1, 5)))
    with pytest.raises(ContractError):
        decompose(rng.standard_normal((5, 5)), k=6)


def test_outlier_count_rule():
    assert outlier_count(10, 10) == 1
    assert outlier_count(1024, 256) == 262


def test_pure_mean_attribution():
    mu = np.linspace(-5, 5, 64)
    mu[mu == 0] = 1.0
    x = np.tile(mu, (50, 1))
    a = attribute_outliers(x, decompose(x, k=1))
    np.testing.assert_allclose(a.rho_mean, 1.0, rtol=1e-12)
    np.testing.assert_allclose(a.rho_spike, 0.0, atol=1e-20)
    np.testing.assert_allclose(a.rho_tail, 0.0, atol=1e-20)


def test_pure_spike_attribution(rng):
    a = rng.standard_normal(300)
    x = np.outer(a - a.mean(), rng.standard_normal(50))
    rep = attribute_outliers(x, decompose(x, k=1))
    np.testing.assert_allclose(rep.rho_spike, 1.0, rtol=1e-9)
    assert rep.aggregate["rho_spike"] == pytest.approx(1.0, rel=1e-9)


def test_mean_share_capped_by_noise_at_threshold(rng):
    # With |mu_j| = 8 and unit noise the top 0.1% satisfy |x| >= t*, where
    # P(|8 + Z| > t*) = 0.001, so every outlier has rho_mean <= (8 / t*)^2.
    mu = rng.choice([-1.0, 1.0], size=256) * 8.0
    x = mu + rng.standard_normal((1024, 256))
    rep = attribute_outliers(x, decompose(x))
    t_star = 8.0 + normal_quantile(1 - 0.001)
    assert rep.aggregate["rho_mean"] <= (8.0 / t_star) ** 2 * 1.02
    assert rep.aggregate["rho_mean"] > 0.4


def test_mean_share_high_when_mean_spread_dominates(rng):
    mu = rng.normal(0, 8, size=256)
    x = mu + rng.standard_normal((1024, 256))
    rep = attribute_outliers(x, decompose(x))
    assert rep.aggregate["rho_mean"] > 0.85


def test_outlier_ranking_and_ties():
    x = np.zeros((10, 100))
    x[3, 7] = x[1, 9] = x[1, 2] = -5.0  # three-way tie
    rep = attribute_outliers(x, decompose(x, k=1))
    assert rep.requested == 1
    assert rep.outlier_indices.tolist() == [[1, 2]]


def test_zero_entries_never_attributed():
    x = np.zeros((40, 40))
    x[0, 0] = 1.0
    rep = attribute_outliers(x, decompose(x, k=1))
    assert rep.requested == 1 and rep.outlier_indices.tolist() == [[0, 0]]


def test_shares_sum_with_cross_terms(rng):
    x = rng.standard_normal((100, 60)) + 2.0
    rep = attribute_outliers(x, decompose(x))
    np.testing.assert_allclose(rep.rho_mean + rep.rho_spike + rep.rho_tail + rep.cross_terms, 1.0)
    assert len(rep.rows()) == rep.values.size


def test_coherent_mean_diagnostics(rng):
    mu = rng.normal(0, 5, size=32)
    x = mu + 1e-6 * rng.standard_normal((200, 32))
    diag = mean_diagnostics(x)
    assert diag.projection_sign_fraction == 1.0
    assert diag.cos_mu_v1 == pytest.approx(1.0, abs=1e-9)
    assert r_ratio(x) == pytest.approx(1.0, abs=1e-6)


def test_alpha_expansion_reconstructs_mean(rng):
    x = rng.standard_normal((40, 6)) + rng.normal(0, 3, size=6)
    svd = full_svd(x)
    diag = mean_diagnostics(x, svd=svd)
    np.testing.assert_allclose(svd.v @ diag.alpha, x.mean(axis=0), atol=1e-12)


def test_null_model_diagnostics(rng):
    l, m = 16384, 16
    x = rng.standard_normal((l, m))
    diag = mean_diagnostics(x)
    assert diag.r_ratio < 3 * np.sqrt(m / l) / np.sqrt(m)
    # Projecting on the sample mean's own direction shifts each token by ~sqrt(m / l),
    # so the null sign fraction is Phi(sqrt(m / l)) rather than exactly 1/2.
    expected = normal_cdf(np.sqrt(m / l))
    assert abs(diag.projection_sign_fraction - expected) < 4 * np.sqrt(0.25 / l)
    assert abs(diag.projection_sign_fraction - 0.5) < 0.03


def test_anisotropic_generator_alignment():
    hits = sum(mean_diagnostics(anisotropic_activations(seed=s)).cos_mu_v1 >= 0.99 for s in range(5))
    assert hits == 5


@settings(max_examples=30, deadline=None)
@given(
    l=st.integers(2, 40),
    m=st.integers(2, 40),
    shift=st.floats(-100, 100),
    seed=st.integers(0, 2**31 - 1),
)
def test_energy_identity_property(l, m, shift, seed):
    x = np.random.default_rng(seed).standard_normal((l, m)) + shift
    d = decompose(x, k=1, seed=seed)
    assert abs(d.total_energy - (d.mean_energy + d.spike_energy + d.tail_energy)) <= 1e-8 * d.total_energy
