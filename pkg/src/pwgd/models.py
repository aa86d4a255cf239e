"""Target posteriors, Gaussian priors and closed-form oracles.

Two families of targets live here:

* the 1-D contaminant-diffusion inverse problem ``-kappa u'' + nu u = x`` on
  ``(0, 1)`` with ``u(0) = u(1) = 0``, observed at 15 interior points, with a
  Gaussian prior whose covariance is an inverse power of a shifted Laplacian;
* two 2-D toy posteriors (``bimodal`` and ``double_banana``).

For the linear problem everything is Gaussian, so the exact posterior, the
expected gradient outer product ``H`` and the optimal profile function of a
subspace projection are all available in closed form and are used as test
oracles elsewhere in the package.
"""

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla

from .errors import ConfigurationError, NumericalError

N_OBSERVATIONS = 15
TOY_NAMES = ("bimodal", "double_banana")


def _as_points(x, dim):
    x = np.asarray(x, dtype=float)
    if x.shape[-1] != dim or x.ndim > 2:
        raise ValueError(f"expected points of dimension {dim}, got shape {x.shape}")
    return x


def _cholesky(matrix, what):
    try:
        return sla.cho_factor(matrix, lower=True, check_finite=True)
    except (sla.LinAlgError, ValueError) as exc:
        cond = np.linalg.cond(matrix)
        raise NumericalError(
            f"{what} is not positive definite (condition number {cond:.3e})"
        ) from exc


def _symmetrize(a):
    return 0.5 * (a + a.T)


# ---------------------------------------------------------------------------
# Gaussian building blocks
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class GaussianPrior:
    """Gaussian prior ``N(mean, covariance)`` with its precision and a factor.

    ``sampling_factor`` is the lower Cholesky factor of ``covariance``.
    """

    mean: np.ndarray
    covariance: np.ndarray
    precision: np.ndarray
    sampling_factor: np.ndarray

    @property
    def dim(self):
        return self.mean.shape[0]


@dataclass(frozen=True)
class GaussianDensity:
    mean: np.ndarray
    covariance: np.ndarray

    def __post_init__(self):
        cov = np.asarray(self.covariance, dtype=float)
        mean = np.asarray(self.mean, dtype=float)
        if cov.shape != (mean.shape[0], mean.shape[0]):
            raise ValueError("covariance shape does not match mean")
        eig = np.linalg.eigvalsh(_symmetrize(cov))
        if eig.size and eig[0] < -1e-12 * max(eig[-1], 0.0):
            raise NumericalError(f"covariance is indefinite (min eigenvalue {eig[0]:.3e})")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "covariance", cov)

    @property
    def dim(self):
        return self.mean.shape[0]

    def sample(self, n, seed):
        rng = np.random.default_rng(seed)
        w, v = np.linalg.eigh(_symmetrize(self.covariance))
        root = v * np.sqrt(np.clip(w, 0.0, None))
        return self.mean + rng.standard_normal((n, self.dim)) @ root.T


def gaussian_prior(mean, covariance, precision=None):
    """Assemble a :class:`GaussianPrior`, symmetrizing the operators."""
    cov = _symmetrize(np.asarray(covariance, dtype=float))
    d = cov.shape[0]
    mean = np.zeros(d) if mean is None else np.asarray(mean, dtype=float)
    if mean.shape != (d,):
        raise ConfigurationError(f"prior mean must have shape ({d},), got {mean.shape}")
    factor = np.tril(_cholesky(cov, "prior covariance")[0])
    if precision is None:
        precision = sla.cho_solve((factor, True), np.eye(d))
    precision = _symmetrize(np.asarray(precision, dtype=float))
    return GaussianPrior(mean=mean, covariance=cov, precision=precision, sampling_factor=factor)


def laplacian_1d(k):
    """Negative second-difference matrix on the ``2**k + 1`` nodes of ``[0, 1]``.

    Homogeneous Dirichlet data are imposed through zero ghost values beyond
    the end nodes, so the end rows keep the ``2/h**2`` diagonal and the
    matrix is symmetric positive definite.
    """
    if k < 1:
        raise ConfigurationError(f"mesh exponent must be >= 1, got {k}")
    n = 2**k
    d = n + 1
    h = 1.0 / n
    main = np.full(d, 2.0)
    off = np.full(d - 1, -1.0)
    return (np.diag(main) + np.diag(off, 1) + np.diag(off, -1)) / h**2


def mesh_nodes(k):
    return np.linspace(0.0, 1.0, 2**k + 1)


def build_laplacian_prior(k, delta, gamma, alpha, mean=None):
    """Prior with covariance ``(delta * L + gamma * I) ** -alpha``, ``L = -Laplacian``.

    Args:
        k: mesh exponent; the prior lives on ``2**k + 1`` nodes.
        delta, gamma: positive coefficients (correlation length and scale).
        alpha: operator power, 1 or 2.
        mean: prior mean, zero if omitted.
    """
    if not (delta > 0 and gamma > 0):
        raise ConfigurationError(f"delta and gamma must be positive, got {delta}, {gamma}")
    if alpha not in (1, 2):
        raise ConfigurationError(f"alpha must be 1 or 2, got {alpha}")
    lap = laplacian_1d(k)
    d = lap.shape[0]
    op = delta * lap + gamma * np.eye(d)
    chol = _cholesky(op, "prior operator")
    op_inv = _symmetrize(sla.cho_solve(chol, np.eye(d)))
    if alpha == 1:
        cov, prec = op_inv, op
    else:
        cov, prec = op_inv @ op_inv, op @ op
    return gaussian_prior(mean, cov, precision=prec)


def prior_sample(prior, n, seed):
    """Draw ``n`` rows ``mean + L z`` with ``z`` standard normal."""
    if n < 1:
        raise ConfigurationError(f"need at least one sample, got {n}")
    rng = np.random.default_rng(seed)
    z = rng.standard_normal((n, prior.dim))
    return prior.mean + z @ prior.sampling_factor.T


def log_prior(prior, x):
    """Unnormalized prior log-density ``-(x - m)^T Gamma (x - m) / 2``."""
    diff = _as_points(x, prior.dim) - prior.mean
    return -0.5 * np.sum((diff @ prior.precision) * diff, axis=-1)


def grad_log_prior(prior, x):
    diff = _as_points(x, prior.dim) - prior.mean
    return -(diff @ prior.precision)


def kl_gaussian(p, q):
    """KL divergence ``KL(p || q)`` between two Gaussian densities."""
    if p.dim != q.dim:
        raise ValueError("densities have different dimensions")
    try:
        lq = np.linalg.cholesky(_symmetrize(q.covariance))
    except np.linalg.LinAlgError as exc:
        raise NumericalError("covariance of q is singular") from exc
    sign, logdet_p = np.linalg.slogdet(_symmetrize(p.covariance))
    if sign <= 0:
        return np.inf
    logdet_q = 2.0 * np.sum(np.log(np.diag(lq)))
    trace_term = np.trace(sla.cho_solve((lq, True), p.covariance))
    diff = q.mean - p.mean
    maha = diff @ sla.cho_solve((lq, True), diff)
    return 0.5 * (trace_term + maha - p.dim + logdet_q - logdet_p)


# ---------------------------------------------------------------------------
# Target models
# ---------------------------------------------------------------------------


class TargetModel:
    """Posterior ``pi ~ prior * f`` exposed through ``log f`` and its gradient.

    Subclasses implement :meth:`log_likelihood` and
    :meth:`grad_log_likelihood`; both accept one point ``(d,)`` or a batch
    ``(n, d)`` and are pure functions of their input.
    """

    dim: int
    prior: GaussianPrior

    def log_likelihood(self, x):
        raise NotImplementedError

    def grad_log_likelihood(self, x):
        raise NotImplementedError

    def log_posterior(self, x):
        return self.log_likelihood(x) + log_prior(self.prior, x)

    def grad_log_posterior(self, x):
        return self.grad_log_likelihood(x) + grad_log_prior(self.prior, x)


class GaussianTarget(TargetModel):
    """Posterior equal to a Gaussian ``N(mean, covariance)``: flat likelihood, that prior."""

    def __init__(self, mean, covariance):
        self.prior = gaussian_prior(np.atleast_1d(np.asarray(mean, dtype=float)),
                                    np.atleast_2d(np.asarray(covariance, dtype=float)))
        self.dim = self.prior.dim

    def log_likelihood(self, x):
        x = _as_points(x, self.dim)
        return np.zeros(x.shape[:-1]) if x.ndim > 1 else 0.0

    def grad_log_likelihood(self, x):
        return np.zeros_like(_as_points(x, self.dim))


@dataclass
class LinearPDEModel(TargetModel):
    """Linear-Gaussian inverse problem ``y = A x + noise``.

    ``log_likelihood`` is the normalized Gaussian log-density of the data,
    so ``exp(log_likelihood(x))`` is directly comparable with the optimal
    profile function.
    """

    forward_matrix: np.ndarray
    data: np.ndarray
    noise_std: float
    prior: GaussianPrior = None
    mesh_exponent: int = None
    obs_indices: np.ndarray = None
    x_true: np.ndarray = None

    def __post_init__(self):
        self.forward_matrix = np.asarray(self.forward_matrix, dtype=float)
        self.data = np.asarray(self.data, dtype=float)
        m, d = self.forward_matrix.shape
        if self.data.shape != (m,):
            raise ValueError(f"data must have shape ({m},)")
        if self.prior is not None and self.prior.dim != d:
            raise ValueError("prior and forward operator dimensions differ")
        self.dim = d

    @property
    def n_obs(self):
        return self.forward_matrix.shape[0]

    def _check_noise(self):
        if not self.noise_std > 0:
            raise ConfigurationError("likelihood undefined for zero noise level")

    def residual(self, x):
        return _as_points(x, self.dim) @ self.forward_matrix.T - self.data

    def log_likelihood(self, x):
        self._check_noise()
        res = self.residual(x)
        const = 0.5 * self.n_obs * np.log(2.0 * np.pi * self.noise_std**2)
        return -0.5 * np.sum(res * res, axis=-1) / self.noise_std**2 - const

    def grad_log_likelihood(self, x):
        self._check_noise()
        return -(self.residual(x) @ self.forward_matrix) / self.noise_std**2


def default_source(nodes):
    return np.sin(2.0 * np.pi * nodes)


def pde_system_matrix(k, kappa=1.0, nu=1.0):
    """``-kappa * Laplacian + nu * I`` with identity rows at both end nodes."""
    lap = laplacian_1d(k)
    d = lap.shape[0]
    sys_mat = kappa * lap + nu * np.eye(d)
    for b in (0, d - 1):
        sys_mat[b, :] = 0.0
        sys_mat[b, b] = 1.0
    return sys_mat


def observation_indices(k, n_obs=N_OBSERVATIONS):
    """Mesh nodes nearest to ``j / (n_obs + 1)``, ``j = 1..n_obs``."""
    n = 2**k
    pts = np.arange(1, n_obs + 1) / (n_obs + 1)
    return np.rint(pts * n).astype(int)


def solve_pde(k, source, kappa=1.0, nu=1.0):
    """Discrete solution ``u`` for a source vector (or a batch of columns)."""
    source = np.array(source, dtype=float)
    source[0] = 0.0
    source[-1] = 0.0
    return np.linalg.solve(pde_system_matrix(k, kappa, nu), source)


def assemble_linear_model(k, sigma_rel, seed, x_true=None, prior=None, kappa=1.0, nu=1.0):
    """Forward operator, synthetic data and noise level for the 1-D problem.

    The observation operator picks the 15 mesh nodes nearest to ``j/16``.
    Data are ``A x_true + eta`` with ``eta ~ N(0, sigma^2 I)`` and
    ``sigma = sigma_rel * max|A x_true|``.
    """
    d = 2**k + 1
    if d <= N_OBSERVATIONS:
        raise ConfigurationError(f"mesh 2**{k} + 1 = {d} nodes is too coarse for 15 observations")
    if sigma_rel < 0:
        raise ConfigurationError("relative noise level must be non-negative")
    nodes = mesh_nodes(k)
    x_true = default_source(nodes) if x_true is None else np.asarray(x_true, dtype=float)
    if x_true.shape != (d,):
        raise ConfigurationError(f"x_true must have shape ({d},)")

    sys_mat = pde_system_matrix(k, kappa, nu)
    interior = np.eye(d)
    interior[0, 0] = interior[-1, -1] = 0.0
    try:
        solution_op = np.linalg.solve(sys_mat, interior)
    except np.linalg.LinAlgError as exc:
        raise NumericalError("PDE system matrix is singular") from exc
    obs = observation_indices(k)
    forward = solution_op[obs, :]

    clean = forward @ x_true
    sigma = sigma_rel * np.max(np.abs(clean))
    rng = np.random.default_rng(seed)
    data = clean + sigma * rng.standard_normal(clean.shape)
    return LinearPDEModel(
        forward_matrix=forward,
        data=data,
        noise_std=sigma,
        prior=prior,
        mesh_exponent=k,
        obs_indices=obs,
        x_true=x_true,
    )


def linear_problem(k, delta=0.1, gamma=1.0, alpha=1, sigma_rel=0.01, seed=0, x_true=None):
    """Prior plus linear model in one call, with the defaults used in the presets."""
    prior = build_laplacian_prior(k, delta, gamma, alpha)
    return assemble_linear_model(k, sigma_rel, seed, x_true=x_true, prior=prior)


def grad_log_likelihood_linear(model, x):
    return model.grad_log_likelihood(x)


def analytic_posterior(model, prior=None):
    """Exact Gaussian posterior of the linear model."""
    prior = model.prior if prior is None else prior
    if prior.dim != model.dim:
        raise ValueError("model and prior dimensions differ")
    a, s2 = model.forward_matrix, model.noise_std**2
    hess = _symmetrize(a.T @ a / s2 + prior.precision)
    chol = _cholesky(hess, "posterior precision")
    cov = _symmetrize(sla.cho_solve(chol, np.eye(model.dim)))
    mean = sla.cho_solve(chol, a.T @ model.data / s2 + prior.precision @ prior.mean)
    return GaussianDensity(mean=mean, covariance=cov)


def expected_information_linear(model, posterior=None):
    """``H = E_pi[grad log f grad log f^T]`` in closed form for the linear model.

    With ``grad log f(x) = -A^T (A x - y) / sigma^2`` and ``x ~ N(m, S)``,
    ``H = A^T (A S A^T + rho rho^T) A / sigma^4`` where ``rho = A m - y``.
    """
    posterior = analytic_posterior(model) if posterior is None else posterior
    a, s2 = model.forward_matrix, model.noise_std**2
    rho = a @ posterior.mean - model.data
    inner = a @ posterior.covariance @ a.T + np.outer(rho, rho)
    return _symmetrize(a.T @ inner @ a) / s2**2


# ---------------------------------------------------------------------------
# Optimal profile function of a subspace projection (linear model only)
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ComplementPrior:
    """Prior law of the complement ``z = (I - P) x`` for a Gamma-orthogonal ``P``.

    Because ``P`` is orthogonal in the prior-precision inner product, ``z`` is
    independent of the subspace coordinates and ``z ~ N(mean, cov)`` with a
    (rank ``d - r``) covariance ``(I - P) C (I - P)^T``.

    Attributes:
        phi: (d, d - r) Euclidean-orthonormal basis of the complement range.
        mean: (d,) prior mean of ``z``.
        cov: (d, d) prior covariance of ``z``.
    """

    phi: np.ndarray
    mean: np.ndarray
    cov: np.ndarray


def complement_prior(prior, basis):
    """:class:`ComplementPrior` for the split defined by ``basis``."""
    d = basis.psi.shape[0]
    comp = np.eye(d) - basis.psi @ basis.coord_map
    cov = _symmetrize(comp @ prior.covariance @ comp.T)
    r = basis.psi.shape[1]
    if r < d:
        u, _, _ = np.linalg.svd(comp, full_matrices=False)
        phi = u[:, : d - r]
    else:
        phi = np.zeros((d, 0))
    return ComplementPrior(phi=phi, mean=comp @ prior.mean, cov=cov)


def _log_gauss(y, mean, cov):
    chol = _cholesky(cov, "marginal data covariance")
    res = y - mean
    sol = sla.cho_solve(chol, res)
    logdet = 2.0 * np.sum(np.log(np.diag(chol[0])))
    return -0.5 * (res @ sol + logdet + y.shape[0] * np.log(2.0 * np.pi))


def _profile_data_cov(model, comp):
    a = model.forward_matrix
    return _symmetrize(model.noise_std**2 * np.eye(model.n_obs) + a @ comp.cov @ a.T)


def optimal_profile_linear(model, prior, basis, w, *, log=False):
    """Optimal profile ``g*(w) = E_prior[f(Psi w + z)]`` over the complement ``z``.

    Integrating the Gaussian likelihood against the Gaussian complement prior
    gives another Gaussian in ``y``:
    ``N(y; A (Psi w + m_z), sigma^2 I + A S_z A^T)``.

    Args:
        basis: a :class:`~pwgd.projection.ProjectionBasis` (needs ``psi`` and
            ``coord_map``).
        w: subspace coordinates, shape (r,).
        log: return ``log g*`` instead of ``g*``.
    """
    comp = complement_prior(prior, basis)
    x = basis.psi @ np.asarray(w, dtype=float) + comp.mean
    value = _log_gauss(model.data, model.forward_matrix @ x, _profile_data_cov(model, comp))
    return value if log else np.exp(value)


def projected_posterior_linear(model, prior, basis):
    """Gaussian ``pi_r*(x) ~ g*(w(x)) p0(x)`` for the optimal profile."""
    comp = complement_prior(prior, basis)
    a = model.forward_matrix
    s_y = _profile_data_cov(model, comp)
    chol_y = _cholesky(s_y, "marginal data covariance")
    # g* depends on x only through A P x.
    gx = a @ basis.psi @ basis.coord_map
    c = a @ comp.mean
    hess = _symmetrize(prior.precision + gx.T @ sla.cho_solve(chol_y, gx))
    rhs = prior.precision @ prior.mean + gx.T @ sla.cho_solve(chol_y, model.data - c)
    chol = _cholesky(hess, "projected posterior precision")
    cov = _symmetrize(sla.cho_solve(chol, np.eye(model.dim)))
    return GaussianDensity(mean=sla.cho_solve(chol, rhs), covariance=cov)


# ---------------------------------------------------------------------------
# 2-D toy targets
# ---------------------------------------------------------------------------

_BIMODAL_CENTERS = np.array([[-2.0, 0.0], [2.0, 0.0]])
_BANANA_Y = np.log(30.0)
_BANANA_SIGMA = 0.3


@dataclass
class ToyModel(TargetModel):
    """2-D toy posterior.

    ``bimodal``: ``f = N(x; (-2,0), I)/2 + N(x; (2,0), I)/2`` with prior ``N(0, 4I)``.
    ``double_banana``: ``log f = -(y - F(x))^2 / (2 * 0.3^2)`` with
    ``F(x) = log((1 - x1)^2 + 100 (x2 - x1^2)^2)``, ``y = log 30``, prior ``N(0, I)``.
    """

    name: str
    prior: GaussianPrior = field(default=None)

    def __post_init__(self):
        if self.name not in TOY_NAMES:
            raise ConfigurationError(f"unknown toy target {self.name!r}; choose from {TOY_NAMES}")
        self.dim = 2
        if self.prior is None:
            var = 4.0 if self.name == "bimodal" else 1.0
            self.prior = gaussian_prior(np.zeros(2), var * np.eye(2))

    def _bimodal_logits(self, x):
        diff = x[..., None, :] - _BIMODAL_CENTERS
        return -0.5 * np.sum(diff * diff, axis=-1), diff

    def log_likelihood(self, x):
        x = _as_points(x, 2)
        if self.name == "bimodal":
            logits, _ = self._bimodal_logits(x)
            return np.logaddexp(logits[..., 0], logits[..., 1]) - np.log(2.0) - np.log(2.0 * np.pi)
        fwd = self._banana_forward(x)
        return -0.5 * (_BANANA_Y - fwd) ** 2 / _BANANA_SIGMA**2

    def grad_log_likelihood(self, x):
        x = _as_points(x, 2)
        if self.name == "bimodal":
            logits, diff = self._bimodal_logits(x)
            wts = np.exp(logits - np.logaddexp(logits[..., :1], logits[..., 1:2]))
            return -np.sum(wts[..., None] * diff, axis=-2)
        x1, x2 = x[..., 0], x[..., 1]
        inner = (1.0 - x1) ** 2 + 100.0 * (x2 - x1**2) ** 2
        d_inner = np.stack(
            [-2.0 * (1.0 - x1) - 400.0 * x1 * (x2 - x1**2), 200.0 * (x2 - x1**2)], axis=-1
        )
        scale = (_BANANA_Y - np.log(inner)) / _BANANA_SIGMA**2 / inner
        return scale[..., None] * d_inner

    @staticmethod
    def _banana_forward(x):
        x1, x2 = x[..., 0], x[..., 1]
        return np.log((1.0 - x1) ** 2 + 100.0 * (x2 - x1**2) ** 2)


def toy_model(name):
    return ToyModel(name=name)


def toy_log_posterior(name, x):
    """Unnormalized log-posterior of a toy target and its gradient."""
    model = toy_model(name)
    x = _as_points(x, 2)
    return model.log_posterior(x), model.grad_log_posterior(x)
