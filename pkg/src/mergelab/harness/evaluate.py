"""Accuracy tables, representation-bias metric and the stitched-network probe."""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable, Mapping, Sequence, TypeVar

import numpy as np

from .. import interventions as iv
from ..taskgen import SyntheticTask
from ..training import distill_loss, teacher_outputs
from ..transformer import EncoderConfig, accuracy, stitch_forward

EVAL_BATCH = 256
A = TypeVar("A")
B = TypeVar("B")


def thread_count() -> int:
    """Worker cap from ``MERGELAB_THREADS`` (default 1)."""
    try:
        return max(1, int(os.environ.get("MERGELAB_THREADS", "1")))
    except ValueError:
        return 1


def parallel_map(fn: Callable[[A], B], items: Sequence[A]) -> list[B]:
    """Ordered map; results never depend on the worker count."""
    n = min(thread_count(), len(items))
    if n <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=n) as pool:
        return list(pool.map(fn, items))


@dataclass
class EvalResult:
    per_task: list[float]
    average: float
    extra_params: int


def evaluate(params: Mapping | Sequence[Mapping], tasks: Sequence[SyntheticTask], cfg: EncoderConfig,
             spec: iv.InterventionSpec | None = None, iparams: Mapping | None = None) -> EvalResult:
    """Test accuracy per task, its unweighted mean and the extra-parameter count.

    ``params`` is one multi-head model, or one model per task (the Individual row).
    """
    per_model = isinstance(params, (list, tuple))

    def one(task: SyntheticTask) -> float:
        model = params[task.task_id] if per_model else params
        mods = None
        if spec is not None and iparams is not None:
            mods = iv.bind(spec, iparams, task.task_id, cfg.dim, cfg.seq_len, cfg.num_blocks)
        return accuracy(task.test_x, task.test_y, model, cfg, task.task_id, mods, EVAL_BATCH)

    accs = parallel_map(one, list(tasks))
    extra = 0
    if spec is not None and iparams is not None:
        extra = iv.count_extra_params(spec, len(tasks), cfg.num_blocks, cfg.dim)
    return EvalResult(accs, float(np.mean(accs)), extra)


def bias_metric(params: Mapping, task_models: Sequence[Mapping], data: Mapping[int, np.ndarray],
                cfg: EncoderConfig, spec: iv.InterventionSpec | None = None,
                iparams: Mapping | None = None, target: str = "features") -> dict[int, float]:
    """Per task, mean L1 gap between the task model's and the (intervened) merged representation."""
    teachers = teacher_outputs(task_models, data, cfg, target)

    def one(t: int) -> float:
        return distill_loss(params, cfg, {t: data[t]}, {t: teachers[t]}, spec, iparams, target).item()

    tasks = sorted(data)
    return dict(zip(tasks, parallel_map(one, tasks)))


def stitch_probe(merged: Mapping, task_models: Sequence[Mapping], task: SyntheticTask, cfg: EncoderConfig,
                 spec: iv.InterventionSpec | None = None, iparams: Mapping | None = None) -> list[tuple[int, float]]:
    """Accuracy of merged blocks ``1..b`` followed by the task model's remaining blocks, ``b = 0..N``.

    ``b = 0`` is the task model itself; ``b = N`` is the merged encoder with
    the task model's head (identical to the merged model's copied head).
    """
    t = task.task_id
    mods = None
    if spec is not None and iparams is not None:
        mods = iv.bind(spec, iparams, t, cfg.dim, cfg.seq_len, cfg.num_blocks)

    def one(b: int) -> tuple[int, float]:
        # same chunking as accuracy() so endpoints agree bit for bit
        hits = 0
        for i in range(0, len(task.test_y), EVAL_BATCH):
            pred, _ = stitch_forward(task.test_x[i:i + EVAL_BATCH], merged, task_models[t], b, t, cfg, mods)
            hits += int(np.sum(pred == task.test_y[i:i + EVAL_BATCH]))
        return b, hits / len(task.test_y)

    return parallel_map(one, list(range(cfg.num_blocks + 1)))
