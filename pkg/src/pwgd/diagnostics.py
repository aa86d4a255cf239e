"""Accuracy metrics against analytic or quadrature references, and KL-bound reports."""

import csv
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla
from scipy import integrate, stats

from . import models
from .errors import ConfigurationError
from .models import GaussianDensity, LinearPDEModel
from .projection import basis_from_vectors, build_basis, generalized_eigs_dense

FLOAT_FMT = "%.17g"


@dataclass
class IterationRecord:
    iter: int
    step_norm: float
    alpha: float
    n_backtracks: int = 0
    r: int = 0
    rmse_mean: float = float("nan")
    rmse_var: float = float("nan")
    wall_ms: float = 0.0
    objective: float = float("nan")
    phase_ms: dict = field(default_factory=dict)
    spectrum: np.ndarray = None


def rmse_mean(X, oracle):
    """``|mean(X) - m*|_2 / sqrt(d)``."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    diff = X.mean(axis=0) - oracle.mean
    return float(np.linalg.norm(diff) / np.sqrt(diff.size))


def rmse_variance(X, oracle):
    """``|var(X) - diag(S*)|_2 / sqrt(d)`` with the unbiased sample variance."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    if X.shape[0] < 2:
        raise ConfigurationError("sample variance needs at least two particles")
    diff = X.var(axis=0, ddof=1) - np.diag(oracle.covariance)
    return float(np.linalg.norm(diff) / np.sqrt(diff.size))


def collapsed_rmse_variance(oracle):
    """Variance RMSE of an ensemble with zero spread: ``|diag(S*)| / sqrt(d)``."""
    v = np.diag(oracle.covariance)
    return float(np.linalg.norm(v) / np.sqrt(v.size))


def toy_reference(model, n_grid=201, limit=8.0):
    """Mean and covariance of a 2-D target by tensor-grid quadrature on ``[-limit, limit]^2``."""
    t = np.linspace(-limit, limit, n_grid)
    g1, g2 = np.meshgrid(t, t, indexing="ij")
    pts = np.column_stack([g1.ravel(), g2.ravel()])
    logp = model.log_posterior(pts)
    wts = np.exp(logp - logp.max())
    wts /= wts.sum()
    mean = wts @ pts
    diff = pts - mean
    cov = (wts[:, None] * diff).T @ diff
    return GaussianDensity(mean=mean, covariance=cov)


# ---------------------------------------------------------------------------
# KL bound for the linear-Gaussian problem
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class KLBoundRow:
    r: int
    kl_exact: float
    bound: float

    @property
    def slack(self):
        return self.bound - self.kl_exact


def kl_bound_report(model, prior=None, spectrum=None, vectors=None, check=True):
    """Exact ``KL(pi || pi_r*)`` against ``sum_{i>r} lambda_i / 2`` for ``r = 1..d``.

    ``pi_r*`` uses the optimal profile on the span of the leading ``r``
    generalized eigenvectors of the exact ``(H, Gamma)`` pencil.  The prior is
    Gaussian, so the bound constant is 1.

    Args:
        spectrum, vectors: eigenpairs to use; computed from the exact ``H``
            when omitted.
        check: raise ``AssertionError`` if any slack is below ``-1e-8``.
    """
    if not isinstance(model, LinearPDEModel):
        raise ConfigurationError("KL bound report is only available for the linear-Gaussian model")
    prior = model.prior if prior is None else prior
    post = models.analytic_posterior(model, prior)
    if spectrum is None or vectors is None:
        H = models.expected_information_linear(model, post)
        spectrum, vectors = generalized_eigs_dense(H, prior.precision, model.dim)
    lam = np.clip(np.asarray(spectrum, dtype=float), 0.0, None)
    rows = []
    for r in range(1, model.dim + 1):
        basis = basis_from_vectors(vectors[:, :r], prior, eigenvalues=lam[:r])
        approx = models.projected_posterior_linear(model, prior, basis)
        kl = models.kl_gaussian(post, approx)
        rows.append(KLBoundRow(r=r, kl_exact=float(kl), bound=float(0.5 * lam[r:].sum())))
    if check:
        worst = min(row.slack for row in rows)
        assert worst >= -1e-8, f"KL bound violated (slack {worst:.3e})"
    return rows


# ---------------------------------------------------------------------------
# CSV output
# ---------------------------------------------------------------------------


def _fmt(v):
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return FLOAT_FMT % v
    return str(v)


def write_csv(path, header, rows):
    """UTF-8, ``\\n`` line endings, floats with 17 significant digits."""
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([_fmt(v) for v in row])


TRACE_HEADER = ("iter", "step_norm", "alpha", "n_backtracks", "r", "rmse_mean", "rmse_var")
TIMING_HEADER = ("iter", "wall_ms", "grad_ms", "kernel_ms", "projection_ms", "update_ms")


def write_trace(path, records):
    write_csv(path, TRACE_HEADER, [
        (rec.iter, rec.step_norm, rec.alpha, rec.n_backtracks, rec.r, rec.rmse_mean, rec.rmse_var)
        for rec in records
    ])


def write_timing(path, records):
    write_csv(path, TIMING_HEADER, [
        (rec.iter, rec.wall_ms) + tuple(float(rec.phase_ms.get(p, 0.0))
                                        for p in ("grad", "kernel", "projection", "update"))
        for rec in records
    ])


def write_eigs(path, records):
    rows = []
    for rec in records:
        if rec.spectrum is not None:
            rows.extend((rec.iter, i + 1, float(v)) for i, v in enumerate(rec.spectrum))
    write_csv(path, ("iteration", "eig_index", "eig_value"), rows)


def write_particles(path, X):
    X = np.atleast_2d(X)
    write_csv(path, ("particle", "coord", "value"),
              ((n, j, float(X[n, j])) for n in range(X.shape[0]) for j in range(X.shape[1])))


def write_klbound(path, rows):
    write_csv(path, ("r", "kl_exact", "bound", "slack"),
              ((row.r, row.kl_exact, row.bound, row.slack) for row in rows))


def write_vector(path, values):
    write_csv(path, ("index", "value"), enumerate(float(v) for v in values))


# ---------------------------------------------------------------------------
# Profile-ratio bounds for the linear-Gaussian problem
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ProfileRatioReport:
    """Ratios ``g*(Psi w) / f(Psi w)`` on a grid, with the bounds ``[delta_2, delta_1]``.

    Attributes:
        grid: (n, r) subspace coordinates.
        ratios: (n,) profile ratios.
        eps1: gradient constant of the complement (supremum over the grid
            and over complement points with ``|z|_Gamma <= radius``).
        delta1, delta2: ``E[exp(+-eps1/2 |z|_Gamma)]`` under the complement prior.
        radius: complement radius used for ``eps1``.
        rank: subspace dimension.
    """

    grid: np.ndarray
    ratios: np.ndarray
    eps1: float
    delta1: float
    delta2: float
    radius: float
    rank: int

    @property
    def within_bounds(self):
        return bool(np.all((self.ratios >= self.delta2) & (self.ratios <= self.delta1)))


def complement_gradient_constants(model, prior, basis):
    """Constants ``(a, b)`` with ``|grad log f(Psi w + z2)^T z1| <= (a(w) + b |z2|_Gamma) |z1|_Gamma``.

    Returns a function ``a(w)`` (the Gamma-dual norm of the gradient at
    ``Psi w`` restricted to the complement) and the scalar ``b`` (largest
    generalized eigenvalue of the data misfit Hessian on the complement).
    """
    comp = models.complement_prior(prior, basis)
    phi = comp.phi
    gram = phi.T @ prior.precision @ phi
    a_mat = model.forward_matrix @ phi
    misfit = a_mat.T @ a_mat / model.noise_std**2
    b = float(sla.eigh(misfit, gram, eigvals_only=True)[-1]) if phi.shape[1] else 0.0
    chol = sla.cho_factor(gram, lower=True) if phi.shape[1] else None

    def a(w):
        if chol is None:
            return 0.0
        g = phi.T @ model.grad_log_likelihood(basis.psi @ np.asarray(w, dtype=float))
        return float(np.sqrt(max(g @ sla.cho_solve(chol, g), 0.0)))

    return a, b


def _chi_expectation(n, c):
    """``E[exp(c X)]`` for ``X`` chi-distributed with ``n`` degrees of freedom."""
    upper = stats.chi.isf(1e-16, n) + abs(c) * 10.0 + 10.0
    val, _ = integrate.quad(lambda t: np.exp(c * t + stats.chi.logpdf(t, n)), 0.0, upper,
                            limit=200, epsabs=0.0, epsrel=1e-12)
    return float(val)


def profile_ratio_report(model, prior=None, tolerance=1e-4, n_side=10, span=2.0, tail=1e-12):
    """Check ``delta_2 <= g*(Psi w)/f(Psi w) <= delta_1`` on a subspace grid.

    The subspace comes from the exact ``H`` truncated at ``tolerance``.  The
    grid is ``n_side x n_side`` over the two leading coordinates, spanning
    ``+-span`` posterior standard deviations around the posterior mean of
    ``w``; the other coordinates sit at that mean.  Under the Gaussian prior
    ``|z|_Gamma`` of the complement is chi-distributed with ``d - r``
    degrees of freedom, so both ``delta`` integrals reduce to one-dimensional
    quadrature.  ``eps1`` takes the supremum of the gradient bound over the
    grid and over complement points inside the radius that holds all but
    ``tail`` of the complement prior mass.
    """
    if not isinstance(model, LinearPDEModel):
        raise ConfigurationError("profile ratio report is only available for the linear-Gaussian model")
    prior = model.prior if prior is None else prior
    post = models.analytic_posterior(model, prior)
    H = models.expected_information_linear(model, post)
    basis = build_basis(H, prior, tolerance, model.dim)
    r, n_perp = basis.rank, model.dim - basis.rank
    if r < 2:
        raise ConfigurationError("profile ratio grid needs a subspace of dimension >= 2")

    w_mean = basis.coord_map @ post.mean
    w_std = np.sqrt(np.diag(basis.coord_map @ post.covariance @ basis.coord_map.T))
    axes = [w_mean[i] + span * w_std[i] * np.linspace(-1.0, 1.0, n_side) for i in range(2)]
    g0, g1 = np.meshgrid(*axes, indexing="ij")
    grid = np.tile(w_mean, (n_side * n_side, 1))
    grid[:, 0], grid[:, 1] = g0.ravel(), g1.ravel()

    ratios = np.array([
        np.exp(models.optimal_profile_linear(model, prior, basis, w, log=True)
               - model.log_likelihood(basis.psi @ w))
        for w in grid
    ])
    a, b = complement_gradient_constants(model, prior, basis)
    radius = float(stats.chi.isf(tail, n_perp)) if n_perp else 0.0
    eps1 = max(a(w) for w in grid) + b * radius
    if n_perp:
        delta1, delta2 = _chi_expectation(n_perp, 0.5 * eps1), _chi_expectation(n_perp, -0.5 * eps1)
    else:
        delta1 = delta2 = 1.0
    return ProfileRatioReport(grid=grid, ratios=ratios, eps1=eps1, delta1=delta1, delta2=delta2,
                              radius=radius, rank=r)
