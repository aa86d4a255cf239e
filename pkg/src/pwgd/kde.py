"""Gaussian kernels, bandwidth rules and the KDE score estimate.

The density surrogate is ``rho(x) = sum_n k(x, x_n)`` with
``k(x, x') = exp(-|x - x'|^2 / (2 h))``.  Only its score
``grad log rho`` is ever needed, and the score does not depend on any
positive constant multiplying ``rho`` (neither ``1/N`` nor the Gaussian
normalization).
"""

import logging
from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp
from scipy.spatial.distance import pdist

from .errors import ConfigurationError, DegenerateEnsembleError

logger = logging.getLogger(__name__)

BANDWIDTH_RULES = ("median", "fixed")

# exp(x) underflows to 0.0 in float64 below this
_LOG_TINY = np.log(np.finfo(float).tiny)


@dataclass(frozen=True)
class Bandwidth:
    h: float
    rule: str = "fixed"
    scale: float = 1.0

    def __post_init__(self):
        if not (np.isfinite(self.h) and self.h > 0):
            raise DegenerateEnsembleError(f"bandwidth must be positive and finite, got {self.h}")
        if self.rule not in BANDWIDTH_RULES:
            raise ConfigurationError(f"unknown bandwidth rule {self.rule!r}")


def _h(h):
    return h.h if isinstance(h, Bandwidth) else float(h)


def gaussian_kernel(w, w_prime, h):
    diff = np.asarray(w, dtype=float) - np.asarray(w_prime, dtype=float)
    return np.exp(-np.sum(diff * diff, axis=-1) / (2.0 * _h(h)))


def median_bandwidth(points, scale=1.0):
    """Median of all off-diagonal pairwise squared distances, times ``scale``."""
    points = np.atleast_2d(np.asarray(points, dtype=float))
    if points.shape[0] < 2:
        raise DegenerateEnsembleError("median bandwidth needs at least two particles")
    if not scale > 0:
        raise ConfigurationError(f"bandwidth scale must be positive, got {scale}")
    med = np.median(pdist(points, "sqeuclidean"))
    if not med > 0:
        raise DegenerateEnsembleError("particles coincide; median squared distance is zero")
    return Bandwidth(h=scale * med, rule="median", scale=scale)


def select_bandwidth(points, rule="median", scale=1.0, fixed=None):
    """Bandwidth for the current ensemble according to ``rule``."""
    if rule == "median":
        return median_bandwidth(points, scale)
    if rule == "fixed":
        if fixed is None:
            raise ConfigurationError("fixed bandwidth rule needs a value")
        return Bandwidth(h=scale * float(fixed), rule="fixed", scale=scale)
    raise ConfigurationError(f"unknown bandwidth rule {rule!r}")


def _sq_dists(x, particles):
    diff = x[:, None, :] - particles[None, :, :]
    return diff, np.sum(diff * diff, axis=-1)


def kde_score(x, particles, h):
    """Score ``grad log sum_n k(x, x_n)`` at one or many query points.

    Equal to ``-(1/h) sum_n (x - x_n) k(x, x_n) / sum_n k(x, x_n)``.  The
    weights are evaluated with a max-shift so that distant queries do not
    divide zero by zero; when every raw kernel value underflows the score of
    the nearest particle, ``-(x - x_nearest)/h``, is returned with a warning.

    Args:
        x: query points, shape (r,) or (m, r).
        particles: ensemble, shape (N, r).
        h: :class:`Bandwidth` or positive float.

    Returns:
        Array with the shape of ``x``.
    """
    hv = _h(h)
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    xq = np.atleast_2d(x)
    particles = np.atleast_2d(np.asarray(particles, dtype=float))
    diff, sq = _sq_dists(xq, particles)
    logits = -sq / (2.0 * hv)
    top = logits.max(axis=1, keepdims=True)
    wts = np.exp(logits - top)
    wts /= wts.sum(axis=1, keepdims=True)
    score = -np.einsum("mn,mnr->mr", wts, diff) / hv

    far = top[:, 0] < _LOG_TINY
    if np.any(far):
        logger.warning("KDE kernel values underflow for %d query point(s); "
                       "using nearest-particle score", int(far.sum()))
        idx = np.argmax(logits[far], axis=1)
        score[far] = -diff[far, idx] / hv
    return score[0] if single else score


def kde_log_density(x, particles, h):
    """Normalized log-density of the Gaussian KDE ``(1/N) sum_n N(x; x_n, h I)``."""
    hv = _h(h)
    xq = np.atleast_2d(np.asarray(x, dtype=float))
    particles = np.atleast_2d(np.asarray(particles, dtype=float))
    n, r = particles.shape
    _, sq = _sq_dists(xq, particles)
    out = logsumexp(-sq / (2.0 * hv), axis=1) - np.log(n) - 0.5 * r * np.log(2.0 * np.pi * hv)
    return out[0] if np.asarray(x).ndim == 1 else out


@dataclass(frozen=True)
class BatchPartition:
    """Disjoint contiguous coordinate blocks covering ``0..r-1``."""

    blocks: tuple
    block_size: int

    @property
    def dim(self):
        return sum(len(b) for b in self.blocks)

    def projectors(self):
        """Diagonal 0/1 matrices, one per block; they sum to the identity."""
        out = []
        for block in self.blocks:
            p = np.zeros((self.dim, self.dim))
            p[block, block] = 1.0
            out.append(p)
        return out


def make_partition(r, b):
    if b < 1:
        raise ConfigurationError(f"block size must be >= 1, got {b}")
    if r < 1:
        raise ConfigurationError(f"dimension must be >= 1, got {r}")
    b = min(b, r)
    blocks = tuple(np.arange(s, min(s + b, r)) for s in range(0, r, b))
    return BatchPartition(blocks=blocks, block_size=b)
