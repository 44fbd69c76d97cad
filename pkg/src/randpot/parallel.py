"""Task pool with ordered results and per-task error isolation."""
from __future__ import annotations

import multiprocessing as mp
import traceback
from concurrent.futures import ProcessPoolExecutor
from concurrent.futures.process import BrokenProcessPool
from dataclasses import dataclass
from typing import Any, Callable, Sequence


@dataclass(frozen=True)
class TaskFailure:
    index: int
    error: str
    detail: str = ""


def _run(fn, index, task):
    try:
        return fn(task)
    except Exception as exc:  # isolated per task, reported by the caller
        return TaskFailure(index, f"{type(exc).__name__}: {exc}", traceback.format_exc())


def _run_star(args):
    return _run(*args)


def parallel_map(fn: Callable[[Any], Any], tasks: Sequence, workers: int = 1) -> list:
    """[fn(t) for t in tasks], in task order, with failures returned as TaskFailure.

    Results do not depend on the worker count as long as ``fn`` is pure and
    every task carries its own seed.
    """
    tasks = list(tasks)
    if not tasks:
        return []
    if workers <= 1 or len(tasks) == 1:
        return [_run(fn, i, t) for i, t in enumerate(tasks)]
    ctx = mp.get_context("fork") if "fork" in mp.get_all_start_methods() else mp.get_context()
    out: list = [None] * len(tasks)
    try:
        with ProcessPoolExecutor(max_workers=min(workers, len(tasks)), mp_context=ctx) as ex:
            chunk = max(1, len(tasks) // (8 * workers))
            for i, r in enumerate(ex.map(_run_star, [(fn, i, t) for i, t in enumerate(tasks)], chunksize=chunk)):
                out[i] = r
    except BrokenProcessPool as exc:
        for i, r in enumerate(out):
            if r is None:
                out[i] = TaskFailure(i, f"worker crashed: {exc}")
    return out


def failures(results: Sequence) -> list[TaskFailure]:
    return [r for r in results if isinstance(r, TaskFailure)]
