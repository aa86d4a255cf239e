import numpy as np
import pytest
import scipy.linalg as sla
from hypothesis import given, settings, strategies as st
from scipy import integrate

from pwgd import models, projection
from pwgd.errors import ConfigurationError

from conftest import central_fd


# ---------------------------------------------------------------------------
# Priors
# ---------------------------------------------------------------------------


def test_laplacian_prior_dimension_17():
    prior = models.build_laplacian_prior(4, 0.1, 1.0, 1)
    assert prior.dim == 17


@pytest.mark.parametrize("k,alpha", [(4, 1), (4, 2), (6, 1)])
def test_prior_invariants(k, alpha):
    prior = models.build_laplacian_prior(k, 0.1, 1.0, alpha)
    d = prior.dim
    c, g, f = prior.covariance, prior.precision, prior.sampling_factor
    assert np.linalg.norm(c @ g - np.eye(d)) / np.sqrt(d) <= 1e-10
    np.testing.assert_allclose(f @ f.T, c, atol=1e-10 * np.abs(c).max())
    assert np.array_equal(c, c.T)
    assert np.allclose(f, np.tril(f))


def test_identity_limit_on_three_nodes():
    prior = models.build_laplacian_prior(1, 1e-12, 1.0, 1)
    assert prior.dim == 3
    np.testing.assert_allclose(prior.covariance, np.eye(3), atol=1e-6)


@pytest.mark.parametrize("delta,gamma", [(0.0, 1.0), (-0.1, 1.0), (0.1, 0.0)])
def test_nonpositive_coefficients_rejected(delta, gamma):
    with pytest.raises(ConfigurationError):
        models.build_laplacian_prior(4, delta, gamma, 1)


def test_unsupported_alpha_rejected():
    with pytest.raises(ConfigurationError):
        models.build_laplacian_prior(4, 0.1, 1.0, 3)


def test_alpha2_matches_dense_oracle():
    k, delta, gamma = 2, 0.1, 1.0
    n = 2**k
    h = 1.0 / n
    d = n + 1
    lap = np.zeros((d, d))
    for i in range(d):
        lap[i, i] = 2.0 / h**2
        if i > 0:
            lap[i, i - 1] = -1.0 / h**2
        if i < d - 1:
            lap[i, i + 1] = -1.0 / h**2
    op = delta * lap + gamma * np.eye(d)
    expected = np.linalg.inv(op @ op)
    prior = models.build_laplacian_prior(k, delta, gamma, 2)
    np.testing.assert_allclose(prior.covariance, expected, rtol=1e-10, atol=1e-14)


def test_prior_sample_identity_statistics():
    prior = models.gaussian_prior(np.zeros(3), np.eye(3))
    x = models.prior_sample(prior, 100_000, seed=0)
    assert np.all(np.abs(x.mean(axis=0)) <= 0.02)
    assert np.all(np.abs(x.var(axis=0) - 1.0) <= 0.05)


def test_prior_sample_deterministic():
    prior = models.build_laplacian_prior(4, 0.1, 1.0, 1)
    np.testing.assert_array_equal(models.prior_sample(prior, 5, 7), models.prior_sample(prior, 5, 7))


def test_prior_sample_covariance():
    prior = models.build_laplacian_prior(4, 0.1, 1.0, 1)
    x = models.prior_sample(prior, 100_000, seed=1)
    emp = np.cov(x, rowvar=False)
    assert np.linalg.norm(emp - prior.covariance) / np.linalg.norm(prior.covariance) <= 0.05


def test_prior_sample_rejects_zero_count():
    with pytest.raises(ConfigurationError):
        models.prior_sample(models.gaussian_prior(np.zeros(1), np.eye(1)), 0, 0)


def test_grad_log_prior_examples():
    prior = models.gaussian_prior(np.zeros(2), np.eye(2))
    np.testing.assert_array_equal(models.grad_log_prior(prior, np.zeros(2)), np.zeros(2))
    np.testing.assert_allclose(models.grad_log_prior(prior, np.array([1.0, 2.0])), [-1.0, -2.0])


def test_grad_log_prior_finite_differences(rng):
    prior = models.build_laplacian_prior(4, 0.1, 1.0, 1)
    x = rng.standard_normal(17)
    fd = central_fd(lambda v: models.log_prior(prior, v), x, rel=1e-6)
    np.testing.assert_allclose(models.grad_log_prior(prior, x), fd, rtol=1e-6, atol=1e-6)


def test_grad_log_prior_dimension_mismatch():
    prior = models.gaussian_prior(np.zeros(2), np.eye(2))
    with pytest.raises(ValueError):
        models.grad_log_prior(prior, np.zeros(3))


# ---------------------------------------------------------------------------
# Linear PDE model
# ---------------------------------------------------------------------------


def test_zero_truth_zero_noise_gives_zero_data():
    model = models.assemble_linear_model(4, 0.0, 0, x_true=np.zeros(17),
                                         prior=models.build_laplacian_prior(4, 0.1, 1.0, 1))
    np.testing.assert_array_equal(model.data, np.zeros(15))


def test_constant_source_symmetric():
    k = 6
    u = models.solve_pde(k, np.ones(2**k + 1))
    j = np.arange(1, 16)
    idx = models.observation_indices(k)
    mirrored = np.rint((1.0 - j / 16) * 2**k).astype(int)
    np.testing.assert_allclose(u[idx], u[mirrored], atol=1e-12)


def test_single_node_source_matches_tridiagonal_solve():
    k = 4
    d = 17
    h = 1.0 / 16
    src = np.zeros(d)
    src[5] = 1.0
    ab = np.zeros((3, d))
    ab[0, 1:] = -1.0 / h**2
    ab[1, :] = 2.0 / h**2 + 1.0
    ab[2, :-1] = -1.0 / h**2
    ab[1, 0] = ab[1, -1] = 1.0
    ab[0, 1] = 0.0
    ab[2, -2] = 0.0
    expected = sla.solve_banded((1, 1), ab, src)
    np.testing.assert_allclose(models.solve_pde(k, src), expected, rtol=1e-12, atol=1e-15)


def test_forward_rows_nonzero(linear17):
    a = linear17.forward_matrix
    assert a.shape == (15, 17)
    assert np.all(np.isfinite(a))
    assert np.all(np.abs(a).sum(axis=1) > 0)
    assert linear17.dim == 2**4 + 1


def test_mesh_too_coarse():
    with pytest.raises(ConfigurationError):
        models.linear_problem(3)


def test_linear_gradient_finite_differences(linear17, rng):
    for _ in range(10):
        x = rng.standard_normal(17)
        fd = central_fd(linear17.log_likelihood, x)
        np.testing.assert_allclose(linear17.grad_log_likelihood(x), fd, rtol=1e-5,
                                   atol=1e-5 * np.abs(fd).max())


def test_linear_gradient_zero_at_exact_fit(linear17):
    x = np.linalg.lstsq(linear17.forward_matrix, linear17.data, rcond=None)[0]
    g = models.grad_log_likelihood_linear(linear17, x)
    assert np.abs(g).max() <= 1e-6 * np.abs(linear17.grad_log_likelihood(np.zeros(17))).max()


def test_doubling_sigma_quarters_gradient(linear17, rng):
    x = rng.standard_normal(17)
    other = models.LinearPDEModel(linear17.forward_matrix, linear17.data, 2 * linear17.noise_std,
                                  prior=linear17.prior)
    np.testing.assert_allclose(other.grad_log_likelihood(x), linear17.grad_log_likelihood(x) / 4,
                               rtol=1e-12)


def test_zero_noise_likelihood_rejected(linear17):
    m = models.LinearPDEModel(linear17.forward_matrix, linear17.data, 0.0, prior=linear17.prior)
    with pytest.raises(ConfigurationError):
        m.log_likelihood(np.zeros(17))


# ---------------------------------------------------------------------------
# Analytic posterior
# ---------------------------------------------------------------------------


def _scalar_model(sigma, y=1.0):
    prior = models.gaussian_prior(np.zeros(1), np.eye(1))
    return models.LinearPDEModel(np.eye(1), np.array([y]), sigma, prior=prior)


def test_scalar_conjugate_posterior():
    post = models.analytic_posterior(_scalar_model(1.0))
    np.testing.assert_allclose(post.mean, [0.5])
    np.testing.assert_allclose(post.covariance, [[0.5]])


def test_uninformative_data_gives_prior(linear17):
    m = models.LinearPDEModel(linear17.forward_matrix, linear17.data, 1e8, prior=linear17.prior)
    post = models.analytic_posterior(m)
    np.testing.assert_allclose(post.mean, linear17.prior.mean, atol=1e-6)
    np.testing.assert_allclose(post.covariance, linear17.prior.covariance, atol=1e-6)


@pytest.mark.parametrize("k", [4, 6])
def test_posterior_stationarity(k):
    model = models.linear_problem(k)
    post = models.analytic_posterior(model)
    a, s2, p = model.forward_matrix, model.noise_std**2, model.prior
    res = a.T @ (a @ post.mean - model.data) / s2 + p.precision @ (post.mean - p.mean)
    assert np.abs(res).max() <= 1e-8


def test_posterior_loewner_below_prior(linear17):
    post = models.analytic_posterior(linear17)
    assert np.linalg.eigvalsh(linear17.prior.covariance - post.covariance).min() >= -1e-10


# ---------------------------------------------------------------------------
# KL between Gaussians
# ---------------------------------------------------------------------------


def test_kl_identical_is_zero(linear17):
    post = models.analytic_posterior(linear17)
    assert abs(models.kl_gaussian(post, post)) <= 1e-8


def test_kl_unit_shift():
    p = models.GaussianDensity(np.zeros(1), np.eye(1))
    q = models.GaussianDensity(np.ones(1), np.eye(1))
    assert models.kl_gaussian(p, q) == pytest.approx(0.5)


def test_kl_asymmetric():
    p = models.GaussianDensity(np.zeros(2), np.diag([1.0, 2.0]))
    q = models.GaussianDensity(np.zeros(2), np.diag([3.0, 0.5]))
    assert abs(models.kl_gaussian(p, q) - models.kl_gaussian(q, p)) > 1e-3


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000))
def test_kl_nonnegative(seed):
    rng = np.random.default_rng(seed)
    a = rng.standard_normal((3, 3))
    b = rng.standard_normal((3, 3))
    p = models.GaussianDensity(rng.standard_normal(3), a @ a.T + 0.1 * np.eye(3))
    q = models.GaussianDensity(rng.standard_normal(3), b @ b.T + 0.1 * np.eye(3))
    assert models.kl_gaussian(p, q) >= -1e-10


def test_gaussian_density_rejects_indefinite():
    with pytest.raises(Exception):
        models.GaussianDensity(np.zeros(2), np.diag([1.0, -1.0]))


# ---------------------------------------------------------------------------
# Toy targets
# ---------------------------------------------------------------------------


@pytest.mark.parametrize("name", models.TOY_NAMES)
def test_toy_gradient_finite_differences(name, rng):
    model = models.toy_model(name)
    for _ in range(20):
        x = rng.uniform(-1.5, 1.5, size=2)
        fd = central_fd(model.log_posterior, x)
        lp, g = models.toy_log_posterior(name, x)
        np.testing.assert_allclose(g, fd, rtol=1e-5, atol=1e-5 * max(1.0, np.abs(fd).max()))
        assert lp == pytest.approx(model.log_posterior(x))


def test_bimodal_midpoint_symmetric():
    _, g = models.toy_log_posterior("bimodal", np.array([0.0, 0.7]))
    assert abs(g[0]) <= 1e-14


def test_double_banana_zero_gradient_on_manifold():
    model = models.toy_model("double_banana")
    # F(x1, x2) = log 30 on the curve x2 = x1^2 + sqrt((30 - (1 - x1)^2) / 100)
    x1 = 0.3
    x2 = x1**2 + np.sqrt((30.0 - (1.0 - x1) ** 2) / 100.0)
    np.testing.assert_allclose(model.grad_log_likelihood(np.array([x1, x2])), 0.0, atol=1e-10)


def test_unknown_toy_rejected():
    with pytest.raises(ConfigurationError):
        models.toy_model("triple_banana")


def test_gaussian_target_score():
    model = models.GaussianTarget([1.0, -1.0], np.diag([2.0, 0.5]))
    np.testing.assert_allclose(model.grad_log_posterior(np.array([3.0, 0.0])), [-1.0, -2.0])


# ---------------------------------------------------------------------------
# Optimal profile
# ---------------------------------------------------------------------------


def test_profile_full_rank_equals_likelihood(linear17, rng):
    basis = projection.ProjectionBasis.full(linear17.prior)
    for _ in range(5):
        w = rng.standard_normal(17)
        g = models.optimal_profile_linear(linear17, linear17.prior, basis, w, log=True)
        f = linear17.log_likelihood(w)
        assert abs(g - f) <= 1e-12 * abs(f)


def test_profile_identity_prior_complement_mean():
    rng = np.random.default_rng(3)
    x0 = rng.standard_normal(4)
    prior = models.gaussian_prior(x0, np.eye(4))
    basis = projection.basis_from_vectors(rng.standard_normal((4, 2)), prior)
    comp = models.complement_prior(prior, basis)
    perp = np.eye(4) - basis.psi @ basis.psi.T
    np.testing.assert_allclose(comp.mean, perp @ x0, atol=1e-12)
    np.testing.assert_allclose(comp.cov, perp, atol=1e-12)


def test_profile_matches_quadrature_d3():
    rng = np.random.default_rng(5)
    a = rng.standard_normal((2, 3))
    b = rng.standard_normal((3, 3))
    prior = models.gaussian_prior(rng.standard_normal(3), b @ b.T + np.eye(3))
    model = models.LinearPDEModel(a, rng.standard_normal(2), 0.7, prior=prior)
    basis = projection.basis_from_vectors(rng.standard_normal((3, 2)), prior)
    phi = models.complement_prior(prior, basis).phi[:, 0]
    w = rng.standard_normal(2)
    xr = basis.psi @ w

    def joint(t, with_f):
        x = xr + t * phi
        val = models.log_prior(prior, x)
        if with_f:
            val = val + model.log_likelihood(x)
        return np.exp(val)

    # Conditional complement law along phi: p0(Psi w + t phi) normalized over t.
    num = integrate.quad(joint, -np.inf, np.inf, args=(True,), epsabs=0, epsrel=1e-12)[0]
    den = integrate.quad(joint, -np.inf, np.inf, args=(False,), epsabs=0, epsrel=1e-12)[0]
    g = models.optimal_profile_linear(model, prior, basis, w)
    assert g == pytest.approx(num / den, rel=1e-6)
