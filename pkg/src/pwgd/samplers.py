"""Particle update rules and the outer iteration loop.

Every deterministic update is synchronous: gradients and kernel sums are
evaluated against a snapshot of the ensemble and applied all at once.  The
particle-parallel parts (gradients, kernel scores) go through a
:class:`~pwgd.parallel.ParticlePool`; bandwidths, ``H`` and the line-search
objective are reduced on the calling thread in particle-index order.
"""

import logging
import math
import time
from dataclasses import dataclass, replace

import numpy as np

from . import kde, projection
from .diagnostics import IterationRecord, rmse_mean, rmse_variance
from .errors import (ConfigurationError, NonFiniteError, NumericalError,
                     SamplerAborted)
from .models import prior_sample
from .parallel import PhaseTimer, serial_pool

logger = logging.getLogger(__name__)

METHODS = ("langevin", "wgd", "svgd", "pwgd", "pwgd_batch")
MAX_HALVINGS = 10


@dataclass
class ParticleEnsemble:
    """Particle positions ``X`` (N, d) at iteration ``iteration``.

    Randomness for iteration ``l`` comes from ``noise_rng(l)``, a generator
    keyed by ``(seed, l)`` whose rows are drawn in particle order, so a run
    can be resumed or replayed from any iteration.
    """

    X: np.ndarray
    iteration: int = 0
    seed: int = 0

    def __post_init__(self):
        self.X = np.atleast_2d(np.asarray(self.X, dtype=float))
        check_finite(self.X, "particle")

    @property
    def size(self):
        return self.X.shape[0]

    @property
    def dim(self):
        return self.X.shape[1]

    def noise_rng(self, iteration=None):
        it = self.iteration if iteration is None else iteration
        return np.random.default_rng([int(self.seed), int(it)])


@dataclass
class SamplerConfig:
    """Settings for :func:`run_sampler`.

    Attributes:
        method: one of ``langevin``, ``wgd``, ``svgd``, ``pwgd``, ``pwgd_batch``.
        n_particles: ensemble size ``N``.
        alpha0: initial (and, without line search, fixed) step size.
        max_iter: iteration cap.
        step_tol: stop once the mean step norm drops below this;
            ``None`` means ``1e-6 * sqrt(d)``.
        line_search: backtrack on the KDE surrogate objective (not used by Langevin).
        refresh: rebuild the projection basis every ``refresh`` iterations.
        tolerance: eigenvalue truncation threshold.
        r_max: cap on the subspace dimension (``None``: ``d``).
        solver: ``dense`` or ``randomized``.
        batch_size: KDE block size for ``pwgd_batch``.
        bandwidth_rule, bandwidth_scale, bandwidth: KDE bandwidth settings.
        seed: seed for the initial ensemble and the per-iteration noise.
        workers: threads for the particle-parallel phases.
    """

    method: str = "pwgd"
    n_particles: int = 16
    alpha0: float = 1e-3
    max_iter: int = 200
    step_tol: float = None
    line_search: bool = True
    refresh: int = 10
    tolerance: float = 1e-4
    r_max: int = None
    solver: str = "dense"
    oversample: int = 10
    power_iters: int = 2
    batch_size: int = None
    bandwidth_rule: str = "median"
    bandwidth_scale: float = 1.0
    bandwidth: float = None
    seed: int = 0
    workers: int = 1

    def __post_init__(self):
        if self.method not in METHODS:
            raise ConfigurationError(f"method must be one of {METHODS}, got {self.method!r}")
        if not (self.alpha0 > 0 and math.isfinite(self.alpha0)):
            raise ConfigurationError(f"alpha0 must be positive, got {self.alpha0}")
        if self.max_iter < 0:
            raise ConfigurationError(f"max_iter must be >= 0, got {self.max_iter}")
        if self.n_particles < 1:
            raise ConfigurationError(f"n_particles must be >= 1, got {self.n_particles}")
        if self.method in ("wgd", "pwgd", "pwgd_batch") and self.n_particles < 2:
            raise ConfigurationError(f"{self.method} needs at least two particles")
        if self.refresh < 1:
            raise ConfigurationError(f"refresh must be >= 1, got {self.refresh}")
        if self.method == "pwgd_batch" and not (self.batch_size and self.batch_size >= 1):
            raise ConfigurationError("pwgd_batch needs batch_size >= 1")
        if self.solver not in projection.SOLVERS:
            raise ConfigurationError(f"solver must be one of {projection.SOLVERS}")
        if self.bandwidth_rule not in kde.BANDWIDTH_RULES:
            raise ConfigurationError(f"bandwidth_rule must be one of {kde.BANDWIDTH_RULES}")
        if self.workers < 1:
            raise ConfigurationError(f"workers must be >= 1, got {self.workers}")

    def resolved_step_tol(self, dim):
        return 1e-6 * math.sqrt(dim) if self.step_tol is None else float(self.step_tol)


@dataclass(frozen=True)
class StepResult:
    new_X: np.ndarray
    mean_step_norm: float
    accepted_alpha: float
    n_backtracks: int = 0
    objective: float = float("nan")
    line_search_ok: bool = True


@dataclass(frozen=True)
class LineSearchResult:
    alpha: float
    n_backtracks: int
    value: float
    satisfied: bool


@dataclass
class ProjectedState:
    """Current basis, subspace coordinates and frozen complements for pWGD."""

    basis: projection.ProjectionBasis
    W: np.ndarray
    complement: projection.ComplementState
    built_at: int


def check_finite(X, what="particle"):
    bad = ~np.all(np.isfinite(X), axis=-1)
    if np.any(bad):
        idx = int(np.flatnonzero(np.atleast_1d(bad))[0])
        raise NonFiniteError(f"non-finite {what} at particle {idx}", particle=idx)


def _step(X, new_X, alpha, n_backtracks=0, objective=float("nan"), ok=True):
    check_finite(new_X)
    norms = np.linalg.norm(new_X - X, axis=1)
    return StepResult(new_X=new_X, mean_step_norm=float(norms.mean()),
                      accepted_alpha=float(alpha), n_backtracks=n_backtracks,
                      objective=objective, line_search_ok=ok)


def _bandwidth(points, rule, scale, fixed):
    return kde.select_bandwidth(points, rule=rule, scale=scale, fixed=fixed)


def _kde_scores(points, h, pool):
    return pool.map_rows(lambda q: kde.kde_score(q, points, h), points)


def _gradients(fn, X, pool, what="gradient"):
    g = pool.map_rows(fn, X)
    check_finite(g, what)
    return g


# ---------------------------------------------------------------------------
# Line search
# ---------------------------------------------------------------------------


def kde_objective(log_target, rule="median", scale=1.0, fixed=None):
    """Surrogate ``J(P) = mean_n [log rho(p_n) - log target(p_n)]``.

    ``rho`` is the normalized Gaussian KDE of the points ``P`` themselves,
    with the bandwidth recomputed from ``P``.  Returns ``nan`` when the
    bandwidth cannot be formed.
    """

    def objective(P):
        try:
            h = _bandwidth(P, rule, scale, fixed)
        except NumericalError:
            return float("nan")
        with np.errstate(all="ignore"):
            vals = kde.kde_log_density(P, P, h) - log_target(P)
        return float(np.mean(vals))

    return objective


def line_search(points, direction, alpha0, objective, max_halvings=MAX_HALVINGS, warn=True):
    """Backtracking on ``objective(points + alpha * direction)``.

    Starts at ``alpha0`` and halves up to ``max_halvings`` times until the
    objective falls strictly below its value at ``alpha = 0``.  If that never
    happens the smallest trial step is returned with a warning.  If the
    objective is non-finite at every trial (including ``alpha = 0``) the step
    is 0.  ``warn=False`` leaves reporting to the caller.
    """
    if not alpha0 > 0:
        raise ConfigurationError(f"alpha0 must be positive, got {alpha0}")
    points = np.asarray(points, dtype=float)
    direction = np.asarray(direction, dtype=float)
    base = objective(points)
    alpha = float(alpha0)
    any_finite = math.isfinite(base)
    value = float("nan")
    for k in range(max_halvings + 1):
        value = objective(points + alpha * direction)
        any_finite = any_finite or math.isfinite(value)
        if math.isfinite(value) and math.isfinite(base) and value < base:
            return LineSearchResult(alpha, k, value, True)
        if k < max_halvings:
            alpha *= 0.5
    if not any_finite:
        if warn:
            logger.error("line search: objective non-finite at every trial step; taking a zero step")
        return LineSearchResult(0.0, max_halvings, float("nan"), False)
    if warn:
        logger.warning("line search: no decrease after %d halvings; accepting alpha = %.3e",
                       max_halvings, alpha)
    return LineSearchResult(alpha, max_halvings, value, False)


def _choose_alpha(X, direction, alpha0, objective, use_line_search):
    if not use_line_search:
        return LineSearchResult(float(alpha0), 0, float("nan"), True)
    return line_search(X, direction, alpha0, objective, warn=False)


# ---------------------------------------------------------------------------
# Full-space updates
# ---------------------------------------------------------------------------


def langevin_step(X, model, alpha, rng=None, noise=None, pool=None):
    """``x' = x + alpha grad log pi(x) + sqrt(2 alpha) Z``.

    Args:
        rng: generator for ``Z``; rows are drawn in particle order.
        noise: explicit ``Z`` (N, d), overriding ``rng``.
    """
    if not alpha > 0:
        raise ConfigurationError(f"alpha must be positive, got {alpha}")
    pool = pool or serial_pool()
    X = np.atleast_2d(np.asarray(X, dtype=float))
    grad = _gradients(model.grad_log_posterior, X, pool)
    if noise is None:
        if rng is None:
            raise ConfigurationError("langevin_step needs rng or noise")
        noise = rng.standard_normal(X.shape)
    new_X = X + alpha * grad + math.sqrt(2.0 * alpha) * np.asarray(noise, dtype=float)
    return _step(X, new_X, alpha)


def wgd_direction(X, model, rule="median", scale=1.0, fixed=None, score_fn=None, pool=None):
    """``grad log pi(x_n) - xi(x_n)`` with ``xi`` the KDE score of the ensemble.

    ``score_fn`` replaces the KDE score (used to check fixed points with the
    exact target score).
    """
    pool = pool or serial_pool()
    grad = _gradients(model.grad_log_posterior, X, pool)
    if score_fn is None:
        h = _bandwidth(X, rule, scale, fixed)
        xi = _kde_scores(X, h, pool)
    else:
        xi = np.asarray(score_fn(X), dtype=float)
    return grad - xi


def wgd_step(X, model, alpha, rule="median", scale=1.0, fixed=None, score_fn=None,
             line_search_enabled=False, pool=None):
    """``x' = x + alpha (grad log pi(x) - xi(x))`` for every particle at once."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    if score_fn is None and X.shape[0] < 2:
        raise ConfigurationError("WGD needs at least two particles")
    direction = wgd_direction(X, model, rule, scale, fixed, score_fn, pool)
    if alpha == 0:
        return _step(X, X.copy(), 0.0)
    ls = _choose_alpha(X, direction, alpha, kde_objective(model.log_posterior, rule, scale, fixed),
                       line_search_enabled)
    return _step(X, X + ls.alpha * direction, ls.alpha, ls.n_backtracks, ls.value, ls.satisfied)


def svgd_direction(X, model, rule="median", scale=1.0, fixed=None, pool=None):
    """``phi(x_i) = (1/N) sum_m [grad log pi(x_m) k(x_m, x_i) + (x_i - x_m) k(x_m, x_i) / h]``."""
    pool = pool or serial_pool()
    X = np.atleast_2d(np.asarray(X, dtype=float))
    grad = _gradients(model.grad_log_posterior, X, pool)
    n = X.shape[0]
    if n == 1:
        return grad
    h = _bandwidth(X, rule, scale, fixed).h

    def phi(q):
        diff = q[:, None, :] - X[None, :, :]
        k = np.exp(-np.sum(diff * diff, axis=-1) / (2.0 * h))
        drive = k @ grad
        repulse = np.einsum("mn,mnd->md", k, diff) / h
        return (drive + repulse) / n

    return pool.map_rows(phi, X)


def svgd_step(X, model, alpha, rule="median", scale=1.0, fixed=None,
              line_search_enabled=False, pool=None):
    X = np.atleast_2d(np.asarray(X, dtype=float))
    direction = svgd_direction(X, model, rule, scale, fixed, pool)
    if alpha == 0:
        return _step(X, X.copy(), 0.0)
    ls = _choose_alpha(X, direction, alpha, kde_objective(model.log_posterior, rule, scale, fixed),
                       line_search_enabled)
    return _step(X, X + ls.alpha * direction, ls.alpha, ls.n_backtracks, ls.value, ls.satisfied)


# ---------------------------------------------------------------------------
# Projected WGD
# ---------------------------------------------------------------------------


def rebuild_basis(X, model, cfg, iteration, pool=None):
    """Estimate ``H`` from the particles' likelihood gradients and project them."""
    pool = pool or serial_pool()
    grads = _gradients(model.grad_log_likelihood, X, pool)
    H = projection.estimate_H(grads)
    r_max = model.dim if cfg.r_max is None else min(cfg.r_max, model.dim)
    if cfg.solver == "randomized":
        r_max = min(r_max, model.dim - 1)
    basis = projection.build_basis(H, model.prior, cfg.tolerance, r_max, solver=cfg.solver,
                                   oversample=cfg.oversample, power_iters=cfg.power_iters,
                                   seed=[int(cfg.seed), int(iteration)])
    W, comp = projection.project(basis, X)
    return ProjectedState(basis=basis, W=W, complement=comp, built_at=iteration)


def projected_grad(state, model, W, pool=None):
    pool = pool or serial_pool()
    basis = state.basis
    g = pool.map_rows(lambda w, xp: projection.projected_grad_log_posterior(basis, model, w, xp),
                      W, state.complement.x_perp)
    check_finite(g, "gradient")
    return g


def projected_objective(state, model, rule="median", scale=1.0, fixed=None):
    def log_target(W):
        return projection.projected_log_posterior(state.basis, model, W, state.complement.x_perp)

    return kde_objective(log_target, rule, scale, fixed)


def batched_kde_update(W, partition, grad_fn, alpha, rule="median", scale=1.0, fixed=None, pool=None):
    """One sequential sweep of block-wise WGD updates in subspace coordinates.

    For each block in order the posterior gradient is re-evaluated at the
    current coordinates, the bandwidth is recomputed from the block's own
    coordinates, and only that block moves.

    Args:
        W: (N, r) subspace coordinates.
        partition: :class:`~pwgd.kde.BatchPartition` over ``0..r-1``.
        grad_fn: maps (N, r) coordinates to (N, r) projected posterior gradients.
    """
    pool = pool or serial_pool()
    W = np.array(W, dtype=float)
    for block in partition.blocks:
        g = grad_fn(W)
        sub = W[:, block]
        h = _bandwidth(sub, rule, scale, fixed)
        xi = _kde_scores(sub, h, pool)
        W[:, block] = sub + alpha * (g[:, block] - xi)
    return W


def pwgd_iteration(X, iteration, model, state, cfg, pool=None, timer=None):
    """One iteration of projected WGD.

    Rebuilds the basis when ``state`` is ``None`` or ``iteration`` is a
    multiple of ``cfg.refresh`` (and the basis was not already built at this
    iteration).  The complements stay frozen between rebuilds.

    Returns:
        ``(StepResult, ProjectedState)``.
    """
    pool = pool or serial_pool()
    timer = timer or PhaseTimer()
    X = np.atleast_2d(np.asarray(X, dtype=float))
    if state is None or (iteration % cfg.refresh == 0 and state.built_at != iteration):
        old_r = None if state is None else state.basis.rank
        with timer("projection"):
            state = rebuild_basis(X, model, cfg, iteration, pool)
        if old_r is not None and old_r != state.basis.rank:
            logger.info("iteration %d: subspace dimension %d -> %d", iteration, old_r, state.basis.rank)

    W = state.W
    rule, scale, fixed = cfg.bandwidth_rule, cfg.bandwidth_scale, cfg.bandwidth
    with timer("grad"):
        g = projected_grad(state, model, W, pool)
    with timer("kernel"):
        h = _bandwidth(W, rule, scale, fixed)
        direction = g - _kde_scores(W, h, pool)
    with timer("update"):
        ls = _choose_alpha(W, direction, cfg.alpha0, projected_objective(state, model, rule, scale, fixed),
                           cfg.line_search)
        if cfg.method == "pwgd_batch":
            partition = kde.make_partition(state.basis.rank, cfg.batch_size)
            new_W = batched_kde_update(W, partition, lambda v: projected_grad(state, model, v, pool),
                                       ls.alpha, rule, scale, fixed, pool)
        else:
            new_W = W + ls.alpha * direction
        new_X = projection.lift(state.basis, new_W, state.complement)
    step = _step(X, new_X, ls.alpha, ls.n_backtracks, ls.value, ls.satisfied)
    return step, replace(state, W=new_W)


# ---------------------------------------------------------------------------
# Outer loop
# ---------------------------------------------------------------------------


def initial_ensemble(model, cfg):
    return ParticleEnsemble(prior_sample(model.prior, cfg.n_particles, cfg.seed), 0, cfg.seed)


def _full_step(ens, model, cfg, pool, timer):
    X = ens.X
    rule, scale, fixed = cfg.bandwidth_rule, cfg.bandwidth_scale, cfg.bandwidth
    if cfg.method == "langevin":
        with timer("grad"):
            grad = _gradients(model.grad_log_posterior, X, pool)
        with timer("update"):
            noise = ens.noise_rng().standard_normal(X.shape)
            new_X = X + cfg.alpha0 * grad + math.sqrt(2.0 * cfg.alpha0) * noise
        return _step(X, new_X, cfg.alpha0)
    with timer("grad"):
        grad = _gradients(model.grad_log_posterior, X, pool)
    with timer("kernel"):
        if cfg.method == "wgd":
            h = _bandwidth(X, rule, scale, fixed)
            direction = grad - _kde_scores(X, h, pool)
        else:
            direction = svgd_direction(X, model, rule, scale, fixed, pool)
    with timer("update"):
        ls = _choose_alpha(X, direction, cfg.alpha0, kde_objective(model.log_posterior, rule, scale, fixed),
                           cfg.line_search)
        new_X = X + ls.alpha * direction
    return _step(X, new_X, ls.alpha, ls.n_backtracks, ls.value, ls.satisfied)


def run_sampler(model, cfg, initial=None, oracle=None, pool=None, on_record=None):
    """Iterate ``cfg.method`` until the mean step norm drops below the tolerance.

    Args:
        model: target with ``prior``, ``grad_log_posterior`` and friends.
        cfg: :class:`SamplerConfig`.
        initial: starting :class:`ParticleEnsemble` (prior draws by default).
        oracle: reference :class:`~pwgd.models.GaussianDensity` for the
            RMSE columns; they are ``nan`` without one.
        pool: particle pool; a fresh one with ``cfg.workers`` threads by default.
        on_record: called with each :class:`IterationRecord` as it is made.

    Returns:
        ``(final ensemble, records)``.

    Raises:
        SamplerAborted: on any step failure, carrying the partial records.
    """
    ens = initial if initial is not None else initial_ensemble(model, cfg)
    if ens.dim != model.dim:
        raise ConfigurationError(f"ensemble dimension {ens.dim} != model dimension {model.dim}")
    step_tol = cfg.resolved_step_tol(model.dim)
    own_pool = pool is None
    if own_pool:
        from .parallel import ParticlePool
        pool = ParticlePool(cfg.workers)
    timer = PhaseTimer()
    records = []
    state = None
    floor_hits = 0
    try:
        for _ in range(cfg.max_iter):
            t0 = time.perf_counter()
            l = ens.iteration
            try:
                if cfg.method in ("pwgd", "pwgd_batch"):
                    step, state = pwgd_iteration(ens.X, l, model, state, cfg, pool, timer)
                    r = state.basis.rank
                    spectrum = state.basis.spectrum if state.built_at == l else None
                else:
                    step = _full_step(ens, model, cfg, pool, timer)
                    r, spectrum = 0, None
            except (NumericalError, FloatingPointError, ValueError) as exc:
                raise SamplerAborted(f"iteration {l}: {exc}", records, ens) from exc
            floor_hits += not step.line_search_ok
            ens = ParticleEnsemble(step.new_X, l + 1, ens.seed)
            rec = IterationRecord(
                iter=l + 1,
                step_norm=step.mean_step_norm,
                alpha=step.accepted_alpha,
                n_backtracks=step.n_backtracks,
                r=r,
                rmse_mean=rmse_mean(ens.X, oracle) if oracle is not None else float("nan"),
                rmse_var=(rmse_variance(ens.X, oracle)
                          if oracle is not None and ens.size > 1 else float("nan")),
                wall_ms=1e3 * (time.perf_counter() - t0),
                objective=step.objective,
                phase_ms=timer.reset(),
                spectrum=spectrum,
            )
            records.append(rec)
            if on_record is not None:
                on_record(rec)
            if step.mean_step_norm < step_tol:
                break
    finally:
        if own_pool:
            pool.close()
        if floor_hits:
            logger.warning("line search found no decrease in %d of %d iterations; "
                           "the smallest trial step was used", floor_hits, len(records))
    return ens, records
