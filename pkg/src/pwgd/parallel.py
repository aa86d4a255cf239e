"""Deterministic particle-parallel evaluation.

Rows are always cut into chunks of a fixed size, independent of the number
of workers, and every chunk is evaluated by the same vectorized code.  The
worker count therefore only decides which thread runs a chunk, never the
arithmetic, so results are bit-identical for any ``workers``.  BLAS is
pinned to one thread while a pool is active for the same reason.
"""

import time
from collections import defaultdict
from concurrent.futures import ThreadPoolExecutor
from contextlib import contextmanager

import numpy as np
from threadpoolctl import threadpool_limits

DEFAULT_CHUNK = 32


class ParticlePool:
    """Map a row-wise function over particle chunks.

    Use as a context manager, or call :meth:`close` when done.
    """

    def __init__(self, workers=1, chunk_size=DEFAULT_CHUNK):
        if workers < 1:
            raise ValueError(f"workers must be >= 1, got {workers}")
        if chunk_size < 1:
            raise ValueError(f"chunk_size must be >= 1, got {chunk_size}")
        self.workers = int(workers)
        self.chunk_size = int(chunk_size)
        self._executor = ThreadPoolExecutor(self.workers) if self.workers > 1 else None
        self._blas = threadpool_limits(limits=1, user_api="blas")

    def map_rows(self, fn, *arrays):
        """``fn(*chunks)`` over row chunks of ``arrays``, concatenated in order."""
        n = np.asarray(arrays[0]).shape[0]
        bounds = [(s, min(s + self.chunk_size, n)) for s in range(0, n, self.chunk_size)]

        def run(b):
            return np.asarray(fn(*(np.asarray(a)[b[0]:b[1]] for a in arrays)))

        if self._executor is None or len(bounds) == 1:
            parts = [run(b) for b in bounds]
        else:
            parts = list(self._executor.map(run, bounds))
        return np.concatenate(parts, axis=0)

    def close(self):
        if self._executor is not None:
            self._executor.shutdown(wait=True)
            self._executor = None
        if self._blas is not None:
            self._blas.restore_original_limits()
            self._blas = None

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


_SERIAL = None


def serial_pool():
    global _SERIAL
    if _SERIAL is None:
        _SERIAL = _InlinePool()
    return _SERIAL


class _InlinePool(ParticlePool):
    """Single-threaded pool that leaves BLAS threading alone."""

    def __init__(self):
        self.workers = 1
        self.chunk_size = DEFAULT_CHUNK
        self._executor = None
        self._blas = None


class PhaseTimer:
    """Accumulates wall time (ms) per named phase with a monotonic clock."""

    def __init__(self):
        self.ms = defaultdict(float)

    @contextmanager
    def __call__(self, phase):
        t0 = time.perf_counter()
        try:
            yield
        finally:
            self.ms[phase] += 1e3 * (time.perf_counter() - t0)

    def reset(self):
        out = dict(self.ms)
        self.ms.clear()
        return out
