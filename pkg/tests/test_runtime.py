import threading

import numpy as np
import pytest

from loopcloser.runtime import BatchError, BatchJob, PairError, Runtime, StagingBuffer, TaskPair, default_workers


def squares(lo, hi):
    return np.arange(lo, hi, dtype=np.int64) ** 2


def test_default_workers_from_env(monkeypatch):
    monkeypatch.setenv("LOOPCLOSER_WORKERS", "3")
    assert default_workers() == 3
    monkeypatch.delenv("LOOPCLOSER_WORKERS")
    assert default_workers() >= 1


def test_pair_of_constants():
    with Runtime(2) as rt:
        assert rt.run_pair(TaskPair(lambda: 1, lambda: "b")) == (1, "b")
        assert rt.run_pair(TaskPair(lambda: 1, lambda: "b"), concurrent=False) == (1, "b")


def test_failing_task_a_names_side_and_b_writes_only_its_slot():
    slots = {}

    def a():
        raise ZeroDivisionError("boom")

    def b():
        slots["b"] = 2
        return 2

    for concurrent in (False, True):
        slots.clear()
        with Runtime(2) as rt:
            with pytest.raises(PairError) as info:
                rt.run_pair(TaskPair(a, b), concurrent=concurrent)
        assert info.value.side == "a"
        assert isinstance(info.value.__cause__, ZeroDivisionError)
        assert "a" not in slots


def test_pair_really_overlaps_when_concurrent():
    barrier = threading.Barrier(2, timeout=5)
    with Runtime(2) as rt:
        assert rt.run_pair(TaskPair(lambda: barrier.wait() >= 0, lambda: barrier.wait() >= 0)) == (True, True)


def test_batch_empty():
    with Runtime(4) as rt:
        out = rt.run_batch(BatchJob(0, squares))
    assert len(out) == 0


@pytest.mark.parametrize("workers", [1, 2, 3, 8])
@pytest.mark.parametrize("chunk", [None, 1, 7, 1000])
def test_batch_squares_identical(workers, chunk):
    ref = np.arange(1000, dtype=np.int64) ** 2
    with Runtime(workers) as rt:
        out = rt.run_batch(BatchJob(1000, squares, chunk_size=chunk))
    np.testing.assert_array_equal(out, ref)


def test_batch_each_index_once():
    calls = []
    lock = threading.Lock()

    def fn(i):
        with lock:
            calls.append(i)
        return i

    with Runtime(4) as rt:
        out = rt.run_batch(BatchJob.elementwise(257, fn, chunk_size=10))
    assert out == list(range(257))
    assert sorted(calls) == list(range(257))


def test_batch_tuple_outputs_concatenate_in_order():
    def k(lo, hi):
        r = np.arange(lo, hi)
        return r, r * 2.0

    with Runtime(3) as rt:
        a, b = rt.run_batch(BatchJob(100, k, chunk_size=9))
    np.testing.assert_array_equal(a, np.arange(100))
    np.testing.assert_array_equal(b, np.arange(100) * 2.0)


@pytest.mark.parametrize("workers", [1, 4])
def test_batch_error_names_element(workers):
    def k(lo, hi):
        if lo <= 37 < hi:
            raise ValueError("bad element")
        return np.zeros(hi - lo)

    with Runtime(workers) as rt:
        with pytest.raises(BatchError) as info:
            rt.run_batch(BatchJob(100, k, name="probe", chunk_size=10))
    assert info.value.index == 37
    assert info.value.job == "probe"


def test_kernel_length_mismatch_is_an_error():
    with Runtime(1) as rt:
        with pytest.raises(BatchError):
            rt.run_batch(BatchJob(10, lambda lo, hi: np.zeros(1)))


def test_process_backend_matches_threads():
    with Runtime(2, backend="process") as rt:
        out = rt.run_batch(BatchJob(300, squares))
    np.testing.assert_array_equal(out, np.arange(300) ** 2)


def test_unknown_backend():
    with pytest.raises(ValueError):
        Runtime(1, backend="gpu")


def test_staging_reuse_contract():
    buf = StagingBuffer()
    a = {"x": np.arange(10.0), "y": np.ones((10, 3), dtype=np.uint8)}
    b = {"x": np.arange(10.0) + 1, "y": np.zeros((10, 3), dtype=np.uint8)}
    buf.stage(a)
    v = buf.stage(b)
    assert buf.allocations == 1
    assert buf.reuses == 2
    assert v["x"].tobytes() == b["x"].tobytes()
    assert v["y"].tobytes() == b["y"].tobytes()
    with pytest.raises(ValueError):
        v["x"][0] = 5.0


def test_staging_grows_by_capacity_class():
    buf = StagingBuffer()
    for n in (10, 50, 64, 65, 100, 128, 20):
        v = buf.stage({"x": np.arange(float(n))})
        np.testing.assert_array_equal(v["x"], np.arange(float(n)))
    assert buf.capacity == 128
    assert buf.allocations == 2
    assert buf.high_water == 128
    buf.stage({"x": np.arange(5), "z": np.arange(5)})  # new layout
    assert buf.allocations == 3


def test_staging_rejects_ragged_payload():
    with pytest.raises(ValueError):
        StagingBuffer().stage({"a": np.zeros(3), "b": np.zeros(4)})


def test_runtime_counters():
    with Runtime(2) as rt:
        rt.stage("p", {"x": np.zeros(5)})
        rt.stage("p", {"x": np.ones(6)})
        rt.run_batch(BatchJob(10, squares, name="sq"))
        c = rt.counters()
    assert c["allocations"] == 1 and c["reuses"] == 2
    assert c["jobs"]["sq"]["calls"] == 1
