import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from pwgd import diagnostics, models
from pwgd.diagnostics import IterationRecord
from pwgd.errors import ConfigurationError


def unit_oracle(d=1, var=1.0):
    return models.GaussianDensity(np.zeros(d), var * np.eye(d))


def test_rmse_mean_examples():
    oracle = models.GaussianDensity(np.array([1.0, -2.0]), np.eye(2))
    assert diagnostics.rmse_mean(np.tile(oracle.mean, (5, 1)), oracle) == 0.0
    assert diagnostics.rmse_mean(np.array([[0.0], [2.0]]), unit_oracle()) == 1.0


def test_rmse_mean_clt_bound(linear17):
    post = models.analytic_posterior(linear17)
    n = 100_000
    X = post.sample(n, seed=0)
    bound = 3 * np.sqrt(np.trace(post.covariance) / (n * 17))
    assert diagnostics.rmse_mean(X, post) <= bound


def test_rmse_variance_two_points():
    s = 2.5
    X = np.array([[np.sqrt(s)], [-np.sqrt(s)]])
    assert diagnostics.rmse_variance(X, unit_oracle(var=s)) == pytest.approx(s)


def test_rmse_variance_collapsed(linear17):
    post = models.analytic_posterior(linear17)
    X = np.tile(post.mean, (8, 1))
    expected = np.linalg.norm(np.diag(post.covariance)) / np.sqrt(17)
    assert diagnostics.rmse_variance(X, post) == pytest.approx(expected)
    assert diagnostics.collapsed_rmse_variance(post) == pytest.approx(expected)


def test_rmse_variance_needs_two():
    with pytest.raises(ConfigurationError):
        diagnostics.rmse_variance(np.zeros((1, 2)), unit_oracle(2))


def test_rmse_variance_decay_rate(linear17):
    post = models.analytic_posterior(linear17)
    sizes = [100, 1000, 10000]
    errs = [np.mean([diagnostics.rmse_variance(post.sample(n, seed=s), post) for s in range(20)])
            for n in sizes]
    slope = np.polyfit(np.log(sizes), np.log(errs), 1)[0]
    assert -0.65 <= slope <= -0.35


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000))
def test_rmse_permutation_invariant(seed):
    rng = np.random.default_rng(seed)
    oracle = models.GaussianDensity(rng.standard_normal(3), np.diag(rng.uniform(0.5, 2, 3)))
    X = rng.standard_normal((9, 3))
    perm = rng.permutation(9)
    assert diagnostics.rmse_mean(X[perm], oracle) == pytest.approx(diagnostics.rmse_mean(X, oracle),
                                                                   rel=1e-12, abs=1e-15)
    assert diagnostics.rmse_variance(X[perm], oracle) == pytest.approx(
        diagnostics.rmse_variance(X, oracle), rel=1e-12)


def test_kl_bound_report_d17(linear17):
    rows = diagnostics.kl_bound_report(linear17)
    assert [row.r for row in rows] == list(range(1, 18))
    assert min(row.slack for row in rows) >= -1e-8
    assert rows[-1].kl_exact == pytest.approx(0.0, abs=1e-8)
    assert rows[-1].bound == 0.0
    assert all(row.kl_exact >= -1e-10 for row in rows)


def test_kl_bound_report_rejects_toy():
    with pytest.raises(ConfigurationError):
        diagnostics.kl_bound_report(models.toy_model("bimodal"))


def test_profile_ratio_report_d17(linear17):
    report = diagnostics.profile_ratio_report(linear17)
    assert report.grid.shape == (100, report.rank)
    assert report.delta2 <= 1.0 <= report.delta1
    assert report.within_bounds


def test_toy_reference_bimodal_moments():
    ref = diagnostics.toy_reference(models.toy_model("bimodal"))
    np.testing.assert_allclose(ref.mean, 0.0, atol=1e-10)
    # Mixture of N((+-2, 0), I) likelihoods against a N(0, 4I) prior:
    # components become N((+-1.6, 0), 0.8 I) with equal weights.
    np.testing.assert_allclose(np.diag(ref.covariance), [0.8 + 1.6**2, 0.8], rtol=1e-6)


def test_csv_writers_format(tmp_path):
    records = [IterationRecord(iter=1, step_norm=0.1, alpha=1e-3, n_backtracks=2, r=3,
                               rmse_mean=0.5, rmse_var=0.25, wall_ms=1.0,
                               phase_ms={"grad": 0.5}, spectrum=np.array([2.0, 1.0]))]
    diagnostics.write_trace(tmp_path / "trace.csv", records)
    diagnostics.write_eigs(tmp_path / "eigs.csv", records)
    diagnostics.write_timing(tmp_path / "timing.csv", records)
    trace = (tmp_path / "trace.csv").read_bytes().decode("utf-8")
    assert trace.splitlines()[0] == "iter,step_norm,alpha,n_backtracks,r,rmse_mean,rmse_var"
    assert trace.splitlines()[1] == "1,0.10000000000000001,0.001,2,3,0.5,0.25"
    assert "\r" not in trace
    assert (tmp_path / "eigs.csv").read_text().splitlines() == [
        "iteration,eig_index,eig_value", "1,1,2", "1,2,1"]
    timing = (tmp_path / "timing.csv").read_text().splitlines()
    assert timing[0] == "iter,wall_ms,grad_ms,kernel_ms,projection_ms,update_ms"
    assert timing[1] == "1,1,0.5,0,0,0"
