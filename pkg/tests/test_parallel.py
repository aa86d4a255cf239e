import numpy as np
import pytest

from pwgd.parallel import ParticlePool, PhaseTimer


@pytest.mark.parametrize("workers", [1, 2, 4])
def test_map_rows_order_and_values(workers):
    X = np.arange(200.0).reshape(100, 2)
    with ParticlePool(workers, chunk_size=7) as pool:
        out = pool.map_rows(lambda a, b: a * 2 + b, X, X[:, ::-1])
    np.testing.assert_array_equal(out, X * 2 + X[:, ::-1])


def test_invalid_pool_arguments():
    with pytest.raises(ValueError):
        ParticlePool(0)
    with pytest.raises(ValueError):
        ParticlePool(1, chunk_size=0)


def test_phase_timer_accumulates_and_resets():
    timer = PhaseTimer()
    with timer("grad"):
        pass
    with timer("grad"):
        pass
    out = timer.reset()
    assert set(out) == {"grad"} and out["grad"] >= 0
    assert timer.reset() == {}
