"""Gradient-informed subspace: empirical ``H``, generalized eigenpairs, projection.

The data-informed directions are the dominant solutions of
``H psi = lambda Gamma psi`` where ``H`` averages outer products of
log-likelihood gradients and ``Gamma`` is the prior precision.  The
retained span is given a Euclidean-orthonormal basis ``Psi``, and particles
are split with the Gamma-orthogonal projector onto that span,

    P = Psi (Psi^T Gamma Psi)^{-1} Psi^T Gamma,   w = coordinates of P x,

so that ``x = Psi w + x_perp`` exactly and, under the Gaussian prior, ``w``
and ``x_perp`` are independent.  That independence is what lets the
complements stay frozen at their prior draws while ``w`` moves.
"""

import logging
from dataclasses import dataclass

import numpy as np
import scipy.linalg as sla

from .errors import ConfigurationError, NumericalError

logger = logging.getLogger(__name__)

SOLVERS = ("dense", "randomized")


@dataclass(frozen=True)
class ProjectionBasis:
    """Retained subspace and the Gaussian prior marginal on its coordinates.

    Attributes:
        psi: (d, r) Euclidean-orthonormal basis.
        coord_map: (r, d) map ``x -> w``; ``psi @ coord_map`` is the projector.
        eigenvalues: (r,) retained generalized eigenvalues, descending.
        spectrum: every eigenvalue the solver returned (for logging).
        tolerance: truncation threshold used.
        prior_mean: (r,) ``coord_map @ x0``.
        prior_cov: (r, r) ``(Psi^T Gamma Psi)^{-1}``, the prior covariance of ``w``.
        prior_precision: ``Psi^T Gamma Psi``.
    """

    psi: np.ndarray
    coord_map: np.ndarray
    eigenvalues: np.ndarray
    spectrum: np.ndarray
    tolerance: float
    prior_mean: np.ndarray
    prior_cov: np.ndarray
    prior_precision: np.ndarray

    @property
    def rank(self):
        return self.psi.shape[1]

    @property
    def dim(self):
        return self.psi.shape[0]

    def projector(self):
        return self.psi @ self.coord_map

    @classmethod
    def full(cls, prior):
        """Identity basis: ``r = d``, ``Psi = I``; pWGD then reduces to WGD."""
        d = prior.dim
        return cls(
            psi=np.eye(d),
            coord_map=np.eye(d),
            eigenvalues=np.ones(d),
            spectrum=np.ones(d),
            tolerance=0.0,
            prior_mean=prior.mean.copy(),
            prior_cov=prior.covariance.copy(),
            prior_precision=prior.precision.copy(),
        )


@dataclass(frozen=True)
class ComplementState:
    """Per-particle components orthogonal to the subspace, frozen between rebuilds."""

    x_perp: np.ndarray


def estimate_H(gradients):
    """``(1/N) sum_n g_n g_n^T`` for gradient rows ``g_n``."""
    g = np.atleast_2d(np.asarray(gradients, dtype=float))
    if g.shape[0] < 1:
        raise ConfigurationError("need at least one gradient")
    h = g.T @ g / g.shape[0]
    return 0.5 * (h + h.T)


def generalized_eigs_dense(H, gamma, r_max):
    """Top ``r_max`` pairs of ``H v = lambda Gamma v``; columns Gamma-orthonormal."""
    d = H.shape[0]
    r_max = min(int(r_max), d)
    try:
        lam, vec = sla.eigh(H, gamma, subset_by_index=[d - r_max, d - 1])
    except (sla.LinAlgError, ValueError) as exc:
        raise NumericalError(f"generalized eigensolve failed: {exc}") from exc
    return lam[::-1], vec[:, ::-1]


def _whitening_factor(gamma, cov_factor):
    if cov_factor is not None:
        return np.asarray(cov_factor, dtype=float)
    try:
        chol = np.linalg.cholesky(gamma)
    except np.linalg.LinAlgError as exc:
        raise NumericalError("prior precision is not positive definite") from exc
    # C = Gamma^{-1} = R^{-T} R^{-1}, so R^{-T} is a factor of C.
    return sla.solve_triangular(chol, np.eye(gamma.shape[0]), lower=True).T


def randomized_eigs(H_apply, gamma, r_max, oversample=10, power_iters=2, seed=0, cov_factor=None):
    """Randomized generalized eigensolver on the prior-whitened operator.

    Works with ``B = F^T H F`` where ``C = F F^T``: a Gaussian sketch of
    ``r_max + oversample`` columns, ``power_iters`` orthonormalized power
    steps, then Rayleigh-Ritz.  Eigenvectors ``F u`` of the pencil come out
    Gamma-orthonormal.  ``H_apply`` only needs to map a vector to a vector;
    the cost is ``(power_iters + 2) * (r_max + oversample)`` applications.

    Returns fewer than ``r_max`` pairs (with a warning) when the sketch is
    numerically rank deficient.
    """
    gamma = np.asarray(gamma, dtype=float)
    d = gamma.shape[0]
    k = int(r_max) + int(oversample)
    if r_max < 1 or k > d:
        raise ConfigurationError(f"need 1 <= r_max and r_max + oversample <= {d}, got {r_max} + {oversample}")
    factor = _whitening_factor(gamma, cov_factor)

    def apply_b(block):
        hv = np.column_stack([H_apply(col) for col in (factor @ block).T])
        return factor.T @ hv

    rng = np.random.default_rng(seed)
    y = apply_b(rng.standard_normal((d, k)))
    for _ in range(power_iters):
        q, _ = np.linalg.qr(y)
        y = apply_b(q)
    s = np.linalg.svd(y, compute_uv=False)
    rank = int(np.sum(s > s[0] * max(d, k) * np.finfo(float).eps)) if s[0] > 0 else 0
    q, _ = np.linalg.qr(y)
    t = q.T @ apply_b(q)
    lam, u = np.linalg.eigh(0.5 * (t + t.T))
    lam, u = lam[::-1], u[:, ::-1]
    n_keep = min(int(r_max), rank)
    if n_keep < r_max:
        logger.warning("randomized eigensolver: sketch rank %d < r_max %d; returning %d pairs",
                       rank, r_max, n_keep)
    return lam[:n_keep], factor @ (q @ u[:, :n_keep])


def truncate(eigenvalues, tolerance, r_min=1, r_max=None):
    """Largest ``r`` with ``lambda_r >= tolerance``, clamped to ``[r_min, r_max]``."""
    lam = np.asarray(eigenvalues, dtype=float)
    r_max = lam.size if r_max is None else min(r_max, lam.size)
    if not 1 <= r_min <= max(r_max, 1):
        raise ConfigurationError(f"invalid clamp range [{r_min}, {r_max}]")
    r = int(np.sum(lam >= tolerance))
    return int(min(max(r, r_min), r_max))


def orthonormalize(vectors):
    """Thin QR with the sign convention ``diag(R) >= 0``."""
    q, r = np.linalg.qr(vectors)
    signs = np.sign(np.diag(r))
    signs[signs == 0] = 1.0
    return q * signs


def build_basis(H, prior, tolerance, r_max, solver="dense", r_min=1,
                oversample=10, power_iters=2, seed=0):
    """Eigen-decompose ``(H, Gamma)``, truncate at ``tolerance``, orthonormalize."""
    d = prior.dim
    r_max = min(int(r_max), d)
    if solver == "dense":
        lam, vec = generalized_eigs_dense(H, prior.precision, r_max)
    elif solver == "randomized":
        lam, vec = randomized_eigs(
            lambda v: H @ v, prior.precision, r_max,
            oversample=min(oversample, d - r_max), power_iters=power_iters,
            seed=seed, cov_factor=prior.sampling_factor,
        )
    else:
        raise ConfigurationError(f"unknown eigensolver {solver!r}; choose from {SOLVERS}")
    if lam.size == 0:
        raise NumericalError("eigensolver returned no eigenpairs")
    r = truncate(lam, tolerance, r_min=r_min, r_max=lam.size)
    return basis_from_vectors(vec[:, :r], prior, eigenvalues=lam[:r], spectrum=lam,
                              tolerance=tolerance)


def basis_from_vectors(vectors, prior, eigenvalues=None, spectrum=None, tolerance=0.0):
    """:class:`ProjectionBasis` for the span of ``vectors``' columns."""
    psi = orthonormalize(np.asarray(vectors, dtype=float))
    r = psi.shape[1]
    prec = psi.T @ prior.precision @ psi
    prec = 0.5 * (prec + prec.T)
    try:
        chol = sla.cho_factor(prec, lower=True)
    except sla.LinAlgError as exc:
        raise NumericalError("subspace prior precision is singular") from exc
    cov = sla.cho_solve(chol, np.eye(r))
    coord_map = sla.cho_solve(chol, psi.T @ prior.precision)
    lam = np.ones(r) if eigenvalues is None else np.asarray(eigenvalues, dtype=float).copy()
    return ProjectionBasis(
        psi=psi,
        coord_map=coord_map,
        eigenvalues=lam,
        spectrum=lam.copy() if spectrum is None else np.asarray(spectrum, dtype=float).copy(),
        tolerance=float(tolerance),
        prior_mean=coord_map @ prior.mean,
        prior_cov=0.5 * (cov + cov.T),
        prior_precision=prec,
    )


def project(basis, X):
    """Coordinates ``W`` of ``P x`` and complements ``X - W Psi^T``."""
    X = np.asarray(X, dtype=float)
    w = X @ basis.coord_map.T
    return w, ComplementState(x_perp=X - w @ basis.psi.T)


def lift(basis, W, complement):
    return np.asarray(W) @ basis.psi.T + complement.x_perp


def log_subspace_prior(basis, W):
    diff = np.asarray(W, dtype=float) - basis.prior_mean
    return -0.5 * np.sum((diff @ basis.prior_precision) * diff, axis=-1)


def projected_log_posterior(basis, model, W, x_perp):
    """``log f(Psi w + x_perp) + log p0_w(w)`` up to a constant."""
    x = np.asarray(W) @ basis.psi.T + x_perp
    return model.log_likelihood(x) + log_subspace_prior(basis, W)


def projected_grad_log_posterior(basis, model, W, x_perp):
    """Gradient in ``w`` of the projected log-posterior.

    ``Psi^T grad log f(Psi w + x_perp) - P_w (w - m_w)``, with ``m_w`` and
    ``P_w`` the mean and precision of the exact prior marginal of ``w``.
    Accepts one particle or a batch (rows).
    """
    W = np.asarray(W, dtype=float)
    x = W @ basis.psi.T + x_perp
    return model.grad_log_likelihood(x) @ basis.psi - (W - basis.prior_mean) @ basis.prior_precision
