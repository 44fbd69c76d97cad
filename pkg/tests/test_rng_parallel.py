import numpy as np
import pytest

from randpot.parallel import TaskFailure, failures, parallel_map
from randpot.rng import derive_seed, stream


def draw(task):
    seed, k = task
    return stream(seed, "test", k).standard_normal(4)


def fragile(x):
    if x == 3:
        raise RuntimeError("boom")
    return x * x


def test_stream_deterministic_and_distinct():
    a = stream(7, "field", 0, 1).random(5)
    np.testing.assert_array_equal(a, stream(7, "field", 0, 1).random(5))
    for other in (stream(8, "field", 0, 1), stream(7, "orbit", 0, 1), stream(7, "field", 1, 0)):
        assert not np.array_equal(a, other.random(5))


def test_derive_seed():
    s = derive_seed(3, "config", 2)
    assert s == derive_seed(3, "config", 2)
    assert 0 <= s < 2 ** 63
    assert len({derive_seed(3, "config", k) for k in range(100)}) == 100


def test_bad_seed_rejected():
    with pytest.raises(ValueError):
        stream(-1, "x")
    with pytest.raises(ValueError):
        stream(1 << 64, "x")


def test_parallel_map_empty():
    assert parallel_map(draw, [], workers=4) == []


@pytest.mark.parametrize("workers", [2, 8])
def test_parallel_map_matches_serial(workers):
    tasks = [(11, k) for k in range(20)]
    serial = parallel_map(draw, tasks, workers=1)
    par = parallel_map(draw, tasks, workers=workers)
    assert len(par) == 20
    for a, b in zip(serial, par):
        np.testing.assert_array_equal(a, b)


@pytest.mark.parametrize("workers", [1, 3])
def test_task_failure_isolated(workers):
    res = parallel_map(fragile, range(6), workers=workers)
    assert [r for r in res if not isinstance(r, TaskFailure)] == [0, 1, 4, 16, 25]
    (f,) = failures(res)
    assert f.index == 3 and "RuntimeError" in f.error
