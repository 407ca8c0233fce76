"""Execution substrate: concurrent task pairs, chunked data-parallel batches and
reusable staging buffers.

This is the only module that touches threads or processes. Callers hand over
pure work and get completed values back; nothing a job writes is visible to
the caller until the whole job has finished.

Batches use static chunking (``ceil(n / workers)`` elements per chunk, like a
grid launch). Outputs are concatenated in index order, so a pure kernel gives
the same result for every worker count and chunk size.
"""

from __future__ import annotations

import math
import os
import threading
import time
from collections import defaultdict
from concurrent.futures import Executor, ProcessPoolExecutor, ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Any, Callable

import numpy as np

WORKERS_ENV = "LOOPCLOSER_WORKERS"


class BatchError(RuntimeError):
    """A batch element failed; ``index`` is the first failing element."""

    def __init__(self, job: str, index: int, cause: BaseException | None = None):
        super().__init__(f"batch job {job!r} failed at element {index}: {cause!r}")
        self.job = job
        self.index = index
        self.cause = cause


class PairError(RuntimeError):
    """One side of a task pair failed; ``side`` is ``"a"`` or ``"b"``."""

    def __init__(self, side: str, cause: BaseException):
        super().__init__(f"task {side} of pair failed: {cause!r}")
        self.side = side
        self.cause = cause


def default_workers() -> int:
    env = os.environ.get(WORKERS_ENV)
    if env:
        return max(1, int(env))
    return os.cpu_count() or 1


@dataclass
class TaskPair:
    """Two independent computations over shared frozen input."""

    a: Callable[[], Any]
    b: Callable[[], Any]


@dataclass
class BatchJob:
    """``kernel(lo, hi)`` computes elements ``lo..hi-1`` and returns an array
    (or tuple/list of arrays) whose leading dimension is ``hi - lo``."""

    n: int
    kernel: Callable[[int, int], Any]
    chunk_size: int | None = None
    name: str = "batch"

    @classmethod
    def elementwise(cls, n: int, fn: Callable[[int], Any], name: str = "batch", chunk_size: int | None = None):
        return cls(n, _ElementKernel(fn), chunk_size=chunk_size, name=name)


class _ElementKernel:
    def __init__(self, fn):
        self.fn = fn

    def __call__(self, lo, hi):
        return [self.fn(i) for i in range(lo, hi)]


def _length(out) -> int:
    if isinstance(out, tuple):
        lens = {len(o) for o in out}
        if len(lens) != 1:
            raise ValueError("kernel returned components of different lengths")
        return lens.pop()
    return len(out)


def _concat(parts: list):
    first = parts[0]
    if isinstance(first, tuple):
        return tuple(_concat([p[k] for p in parts]) for k in range(len(first)))
    if isinstance(first, np.ndarray):
        return np.concatenate(parts, axis=0) if len(parts) > 1 else first
    out = []
    for p in parts:
        out.extend(p)
    return out


def _run_chunk(kernel, lo, hi):
    out = kernel(lo, hi)
    if _length(out) != hi - lo:
        raise ValueError(f"kernel returned {_length(out)} elements for range [{lo}, {hi})")
    return out


def _locate_failure(kernel, lo, hi) -> tuple[int, BaseException | None]:
    for i in range(lo, hi):
        try:
            _run_chunk(kernel, i, i + 1)
        except Exception as exc:  # noqa: BLE001 - reporting the offending element
            return i, exc
    return lo, None


@dataclass
class StagedView:
    """Read-only views of the first ``n`` rows of a staging buffer."""

    n: int
    arrays: dict[str, np.ndarray]

    def __getitem__(self, key: str) -> np.ndarray:
        return self.arrays[key]


class StagingBuffer:
    """Preallocated, reusable packing area.

    A *shape* is the field layout plus a power-of-two capacity class; a new
    allocation happens only when a payload needs a shape the buffer has not
    held yet. ``reuses`` counts every staging served by the buffer.
    """

    MIN_CAPACITY = 64

    def __init__(self, name: str = "buffer"):
        self.name = name
        self.capacity = 0
        self.high_water = 0
        self.allocations = 0
        self.reuses = 0
        self._layout: tuple | None = None
        self._store: dict[str, np.ndarray] = {}

    @staticmethod
    def _layout_of(payload: dict[str, np.ndarray]) -> tuple:
        return tuple((k, np.asarray(v).dtype.str, np.asarray(v).shape[1:]) for k, v in payload.items())

    def stage(self, payload: dict[str, np.ndarray]) -> StagedView:
        payload = {k: np.asarray(v) for k, v in payload.items()}
        ns = {len(v) for v in payload.values()}
        if len(ns) > 1:
            raise ValueError(f"payload fields have different lengths: {ns}")
        n = ns.pop() if ns else 0
        layout = self._layout_of(payload)
        if layout != self._layout or n > self.capacity:
            cap = max(self.MIN_CAPACITY, 1 << max(0, (n - 1)).bit_length())
            if layout == self._layout:
                cap = max(cap, self.capacity)
            self._store = {k: np.empty((cap,) + v.shape[1:], dtype=v.dtype) for k, v in payload.items()}
            self._layout = layout
            self.capacity = cap
            self.allocations += 1
        self.reuses += 1
        self.high_water = max(self.high_water, n)
        views = {}
        for k, v in payload.items():
            dst = self._store[k]
            dst[:n] = v
            view = dst[:n]
            view = view.view()
            view.setflags(write=False)
            views[k] = view
        return StagedView(n, views)

    def counters(self) -> dict:
        return {
            "capacity": self.capacity,
            "high_water": self.high_water,
            "allocations": self.allocations,
            "reuses": self.reuses,
        }


@dataclass
class JobStats:
    calls: int = 0
    wall_s: float = 0.0


class Runtime:
    """Worker pool owning all concurrency.

    ``backend="thread"`` shares memory with the caller (numpy kernels release
    the GIL inside large array operations); ``backend="process"`` needs
    picklable kernels and pays a copy per chunk, the host analogue of a device
    transfer.
    """

    def __init__(self, workers: int | None = None, backend: str = "thread"):
        if backend not in ("thread", "process"):
            raise ValueError(f"unknown backend {backend!r}")
        self.workers = max(1, int(workers) if workers else default_workers())
        self.backend = backend
        self._executor: Executor | None = None
        self._pair_executor: ThreadPoolExecutor | None = None
        self._lock = threading.Lock()
        self.buffers: dict[str, StagingBuffer] = {}
        self.job_stats: dict[str, JobStats] = defaultdict(JobStats)

    # lifecycle -----------------------------------------------------------
    def _pool(self) -> Executor:
        with self._lock:
            if self._executor is None:
                if self.backend == "thread":
                    self._executor = ThreadPoolExecutor(self.workers, thread_name_prefix="lc-worker")
                else:
                    self._executor = ProcessPoolExecutor(self.workers)
            return self._executor

    def _pairs(self) -> ThreadPoolExecutor:
        with self._lock:
            if self._pair_executor is None:
                self._pair_executor = ThreadPoolExecutor(2, thread_name_prefix="lc-pair")
            return self._pair_executor

    def close(self) -> None:
        for ex in (self._executor, self._pair_executor):
            if ex is not None:
                ex.shutdown(wait=True)
        self._executor = self._pair_executor = None

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    def _record(self, name: str, t0: float) -> None:
        with self._lock:
            st = self.job_stats[name]
            st.calls += 1
            st.wall_s += time.perf_counter() - t0

    # task parallelism ----------------------------------------------------
    def run_pair(self, pair: TaskPair, concurrent: bool | None = None):
        """Run both tasks (concurrently unless ``workers == 1`` or ``concurrent=False``)."""
        t0 = time.perf_counter()
        if concurrent is None:
            concurrent = self.workers > 1
        if not concurrent:
            out = []
            for side, fn in (("a", pair.a), ("b", pair.b)):
                try:
                    out.append(fn())
                except Exception as exc:
                    raise PairError(side, exc) from exc
            self._record("pair", t0)
            return out[0], out[1]
        pool = self._pairs()
        fa, fb = pool.submit(pair.a), pool.submit(pair.b)
        results = {}
        for side, fut in (("a", fa), ("b", fb)):
            try:
                results[side] = fut.result()
            except Exception as exc:
                (fb if side == "a" else fa).cancel()
                raise PairError(side, exc) from exc
        self._record("pair", t0)
        return results["a"], results["b"]

    # data parallelism ----------------------------------------------------
    def chunks(self, n: int, chunk_size: int | None = None, workers: int | None = None) -> list[tuple[int, int]]:
        w = workers or self.workers
        size = chunk_size or max(1, math.ceil(n / w))
        return [(lo, min(n, lo + size)) for lo in range(0, n, size)]

    def run_batch(self, job: BatchJob, workers: int | None = None):
        t0 = time.perf_counter()
        w = workers or self.workers
        if job.n == 0:
            out = job.kernel(0, 0)
            self._record(job.name, t0)
            return out
        spans = self.chunks(job.n, job.chunk_size, w)
        parts = []
        if w == 1 or len(spans) == 1:
            for lo, hi in spans:
                try:
                    parts.append(_run_chunk(job.kernel, lo, hi))
                except Exception:
                    idx, cause = _locate_failure(job.kernel, lo, hi)
                    raise BatchError(job.name, idx, cause) from cause
        else:
            pool = self._pool()
            futures = [pool.submit(_run_chunk, job.kernel, lo, hi) for lo, hi in spans]
            for (lo, hi), fut in zip(spans, futures):
                try:
                    parts.append(fut.result())
                except Exception:
                    for f in futures:
                        f.cancel()
                    idx, cause = _locate_failure(job.kernel, lo, hi)
                    raise BatchError(job.name, idx, cause) from cause
        out = _concat(parts)
        self._record(job.name, t0)
        return out

    # staging -------------------------------------------------------------
    def stage(self, name: str, payload: dict[str, np.ndarray]) -> StagedView:
        with self._lock:
            buf = self.buffers.get(name)
            if buf is None:
                buf = self.buffers[name] = StagingBuffer(name)
        return buf.stage(payload)

    def counters(self) -> dict:
        return {
            "workers": self.workers,
            "backend": self.backend,
            "allocations": sum(b.allocations for b in self.buffers.values()),
            "reuses": sum(b.reuses for b in self.buffers.values()),
            "buffers": {k: b.counters() for k, b in sorted(self.buffers.items())},
            "jobs": {k: {"calls": v.calls, "wall_ms": 1e3 * v.wall_s} for k, v in sorted(self.job_stats.items())},
        }


_SEQUENTIAL = None


def sequential() -> Runtime:
    """Shared single-worker runtime used when a caller passes no runtime."""
    global _SEQUENTIAL
    if _SEQUENTIAL is None:
        _SEQUENTIAL = Runtime(1)
    return _SEQUENTIAL
