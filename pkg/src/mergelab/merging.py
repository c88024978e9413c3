"""Merge operators that build one multi-task ParamSet from task-specific ones.

Coefficient-weighted merges are evaluated in the endpoint form
``(1 - sum_t c_t) * pre + sum_t c_t * theta_t``, which is algebraically the
task-vector sum ``pre + sum_t c_t * tau_t`` but keeps the endpoints exact:
``c = 0`` returns ``pre`` and a one-hot ``c`` returns ``theta_t`` bit for bit.
Coordinates no task vector moves are returned as ``pre`` exactly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, asdict
from typing import Mapping, Sequence

import numpy as np

from . import tensor as tn
from .errors import ContractError
from .tensor import Tensor
from .transformer import ParamSet, check_schema, head_names

METHODS = ("average", "task_arithmetic", "ties", "adamerging_taskwise", "adamerging_layerwise")
DEFAULT_LAMBDA = {"task_arithmetic": 0.4, "ties": 1.0, "adamerging_taskwise": 0.3,
                  "adamerging_layerwise": 0.3}


@dataclass(frozen=True)
class TaskVector:
    """``theta_t - theta_pre``, remembering both endpoints."""

    delta: ParamSet
    finetuned: ParamSet
    pretrained: ParamSet

    def __getitem__(self, name: str) -> np.ndarray:
        return self.delta[name]

    def norm(self) -> float:
        return math.sqrt(sum(float(np.sum(v * v)) for v in self.delta.values()))


def task_vector(theta_t: Mapping, theta_pre: Mapping) -> TaskVector:
    check_schema(theta_pre, theta_t)
    delta = ParamSet({k: np.asarray(theta_t[k], dtype=np.float64) - np.asarray(theta_pre[k], dtype=np.float64)
                      for k in theta_pre})
    return TaskVector(delta, ParamSet(theta_t), ParamSet(theta_pre))


def _check_anchor(theta_pre: Mapping, task_vectors: Sequence[TaskVector]) -> None:
    if not task_vectors:
        raise ContractError("need at least one task vector")
    for i, tv in enumerate(task_vectors):
        check_schema(theta_pre, tv.delta)
        if tv.pretrained is theta_pre:
            continue
        if any(not np.array_equal(tv.pretrained[k], theta_pre[k]) for k in theta_pre):
            raise ContractError(f"task vector #{i} was taken against a different pre-trained model")


def default_groups(params: Mapping) -> list[list[str]]:
    """One layer group per named parameter."""
    return [[name] for name in params]


def _group_index(params: Mapping, groups: Sequence[Sequence[str]]) -> dict[str, int]:
    index = {}
    for l, names in enumerate(groups):
        for n in names:
            if n in index:
                raise ContractError(f"parameter {n} listed in two layer groups")
            index[n] = l
    missing = [n for n in params if n not in index]
    if missing:
        raise ContractError(f"parameters without a layer group: {missing[:5]}")
    return index


def merge_tensors(theta_pre: Mapping, task_vectors: Sequence[TaskVector], coeffs,
                  groups: Sequence[Sequence[str]] | None = None) -> dict[str, Tensor]:
    """Differentiable coefficient merge.

    ``coeffs`` is a Tensor (or array) of shape ``(T,)`` for one coefficient per
    task or ``(T, L)`` for one per task and layer group.
    """
    _check_anchor(theta_pre, task_vectors)
    lam = coeffs if isinstance(coeffs, Tensor) else Tensor(coeffs)
    T = len(task_vectors)
    if lam.ndim == 0:
        raise ContractError("use task_arithmetic for a scalar coefficient")
    if lam.shape[0] != T or lam.ndim > 2:
        raise ContractError(f"coefficients of shape {lam.shape} do not match {T} tasks")
    layerwise = lam.ndim == 2
    if layerwise:
        groups = default_groups(theta_pre) if groups is None else groups
        if lam.shape[1] != len(groups):
            raise ContractError(f"coefficients have {lam.shape[1]} layer columns, plan has {len(groups)} groups")
        gidx = _group_index(theta_pre, groups)
    out: dict[str, Tensor] = {}
    col_cache: dict[int, tuple[Tensor, Tensor]] = {}
    for name, pre in theta_pre.items():
        if layerwise:
            l = gidx[name]
            if l not in col_cache:
                c = tn.getitem(lam, (slice(None), l))
                col_cache[l] = (tn.reshape(c, (1, T)), tn.sub(1.0, tn.tsum(c)))
            row, keep = col_cache[l]
        else:
            if -1 not in col_cache:
                col_cache[-1] = (tn.reshape(lam, (1, T)), tn.sub(1.0, tn.tsum(lam)))
            row, keep = col_cache[-1]
        pre = np.asarray(pre, dtype=np.float64)
        ends = np.stack([np.asarray(tv.finetuned[name], dtype=np.float64).reshape(-1) for tv in task_vectors])
        mixed = tn.reshape(tn.matmul(row, Tensor(ends)), pre.shape)
        merged = tn.add(tn.mul(Tensor(pre), keep), mixed)
        still = np.all(ends == pre.reshape(1, -1), axis=0).reshape(pre.shape)
        if still.any():
            # untouched coordinates stay exactly pre; their true gradient is zero
            merged = tn.add(tn.mul(merged, (~still).astype(np.float64)), Tensor(np.where(still, pre, 0.0)))
        out[name] = merged
    return out


def _to_paramset(tensors: Mapping[str, Tensor]) -> ParamSet:
    return ParamSet({k: v.numpy() for k, v in tensors.items()})


def weight_average(models: Sequence[Mapping]) -> ParamSet:
    """Element-wise mean, accumulated as offsets from the first model."""
    if not models:
        raise ContractError("weight_average needs at least one model")
    check_schema(*models)
    T = len(models)
    out = ParamSet()
    for name, first in models[0].items():
        first = np.asarray(first, dtype=np.float64)
        acc = np.zeros_like(first)
        for m in models[1:]:
            acc = acc + (np.asarray(m[name], dtype=np.float64) - first)
        out[name] = first + acc / T
    return out


def task_arithmetic(theta_pre: Mapping, task_vectors: Sequence[TaskVector], lam: float) -> ParamSet:
    """``pre + lam * sum_t tau_t``."""
    if not math.isfinite(lam):
        raise ContractError("lambda must be finite")
    return _to_paramset(merge_tensors(theta_pre, task_vectors, np.full(len(task_vectors), float(lam))))


def adamerging_apply(theta_pre: Mapping, task_vectors: Sequence[TaskVector], lam,
                     groups: Sequence[Sequence[str]] | None = None) -> ParamSet:
    """``pre + sum_l sum_t lam[t, l] tau_t^l`` (or per-task ``lam[t]``)."""
    return _to_paramset(merge_tensors(theta_pre, task_vectors, np.asarray(lam, dtype=np.float64), groups))


def _keep_count(n: int, fraction: float) -> int:
    return min(n, max(1, int(math.floor(fraction * n + 0.5))))


def ties_trim(delta: Mapping[str, np.ndarray], fraction: float) -> dict[str, np.ndarray]:
    """Zero all but the top ``fraction`` of coordinates by magnitude (ties: lower index first)."""
    names = list(delta)
    flat = np.concatenate([np.asarray(delta[n], dtype=np.float64).reshape(-1) for n in names])
    keep = _keep_count(flat.size, fraction)
    order = np.argsort(-np.abs(flat), kind="stable")[:keep]
    trimmed = np.zeros_like(flat)
    trimmed[order] = flat[order]
    out, pos = {}, 0
    for n in names:
        size = np.size(delta[n])
        out[n] = trimmed[pos:pos + size].reshape(np.shape(delta[n]))
        pos += size
    return out


def ties_vector(task_vectors: Sequence[TaskVector], trim_fraction: float = 0.2) -> dict[str, np.ndarray]:
    """Trimmed, sign-elected, disjointly averaged task vector (before scaling)."""
    if not 0 < trim_fraction <= 1:
        raise ContractError(f"trim_fraction must lie in (0, 1], got {trim_fraction}")
    kept = [ties_trim(tv.delta, trim_fraction) for tv in task_vectors]
    out = {}
    for name in kept[0]:
        stack = np.stack([k[name] for k in kept])
        # zero total elects +
        sign = np.where(stack.sum(axis=0) >= 0, 1.0, -1.0)
        agree = (stack * sign) > 0
        count = agree.sum(axis=0)
        total = np.where(agree, stack, 0.0).sum(axis=0)
        out[name] = np.where(count > 0, total / np.maximum(count, 1), 0.0)
    return out


def ties_merge(theta_pre: Mapping, task_vectors: Sequence[TaskVector], lam: float = 1.0,
               trim_fraction: float = 0.2) -> ParamSet:
    """``pre + lam * ties_vector(...)``."""
    _check_anchor(theta_pre, task_vectors)
    merged = ties_vector(task_vectors, trim_fraction)
    return ParamSet({name: np.asarray(pre, dtype=np.float64) + lam * merged[name]
                     for name, pre in theta_pre.items()})


def attach_heads(theta: Mapping, task_models: Sequence[Mapping]) -> dict:
    """Copy head ``t`` of task model ``t`` into the merged parameters."""
    out = ParamSet(theta) if isinstance(theta, ParamSet) else dict(theta)
    for t, model in enumerate(task_models):
        for name in head_names(t):
            if name in out:
                value = model[name]
                out[name] = np.array(getattr(value, "data", value), dtype=np.float64)
    return out


@dataclass(frozen=True)
class MergePlan:
    method: str = "task_arithmetic"
    lam: object = None  # scalar, per-task list, or per-task-per-layer nested list
    ties_trim_fraction: float = 0.2

    def coefficients(self, T: int, L: int) -> np.ndarray | float | None:
        if self.method == "average":
            return None
        lam = DEFAULT_LAMBDA[self.method] if self.lam is None else self.lam
        arr = np.asarray(lam, dtype=np.float64)
        if self.method in ("task_arithmetic", "ties"):
            return float(arr)
        if arr.ndim == 0:
            arr = np.full((T,) if self.method == "adamerging_taskwise" else (T, L), float(arr))
        return arr

    def problems(self, T: int | None = None, L: int | None = None) -> list[tuple[str, str]]:
        out = []
        if self.method not in METHODS:
            return [("method", f"must be one of {', '.join(METHODS)}")]
        if not 0 < self.ties_trim_fraction <= 1:
            out.append(("ties_trim_fraction", "must lie in (0, 1]"))
        if self.lam is None or self.method == "average":
            return out
        arr = np.asarray(self.lam, dtype=np.float64)
        if not np.all(np.isfinite(arr)):
            out.append(("lambda", "must be finite"))
        if self.method in ("task_arithmetic", "ties") and arr.ndim != 0:
            out.append(("lambda", f"{self.method} takes a scalar"))
        if self.method == "adamerging_taskwise" and arr.ndim not in (0, 1):
            out.append(("lambda", "task-wise coefficients are a per-task vector"))
        if self.method == "adamerging_taskwise" and arr.ndim == 1 and T is not None and arr.shape[0] != T:
            out.append(("lambda", f"expected {T} task coefficients, got {arr.shape[0]}"))
        if self.method == "adamerging_layerwise" and arr.ndim == 2 and T is not None and L is not None \
                and arr.shape != (T, L):
            out.append(("lambda", f"expected shape ({T}, {L}), got {arr.shape}"))
        if self.method == "adamerging_layerwise" and arr.ndim not in (0, 2):
            out.append(("lambda", "layer-wise coefficients are a task x layer matrix"))
        return out

    def to_dict(self) -> dict:
        d = asdict(self)
        if isinstance(d["lam"], np.ndarray):
            d["lam"] = d["lam"].tolist()
        return d


def merge(plan: MergePlan, theta_pre: Mapping, task_models: Sequence[Mapping],
          groups: Sequence[Sequence[str]] | None = None) -> ParamSet:
    """Run ``plan`` and attach each task model's own head."""
    problems = plan.problems(len(task_models), len(groups) if groups is not None else None)
    if problems:
        raise ContractError("; ".join(f"{a}: {m}" for a, m in problems))
    if plan.method == "average":
        return attach_heads(weight_average(task_models), task_models)
    tvs = [task_vector(m, theta_pre) for m in task_models]
    T = len(tvs)
    L = len(groups) if groups is not None else len(theta_pre)
    coeffs = plan.coefficients(T, L)
    if plan.method == "task_arithmetic":
        merged = task_arithmetic(theta_pre, tvs, coeffs)
    elif plan.method == "ties":
        merged = ties_merge(theta_pre, tvs, coeffs, plan.ties_trim_fraction)
    else:
        merged = adamerging_apply(theta_pre, tvs, coeffs, groups)
    return attach_heads(merged, task_models)


def entropy_objective(params: Mapping, batches: Mapping[int, np.ndarray], cfg) -> Tensor:
    """Mean prediction entropy per task on that task's unlabeled batch, averaged over tasks."""
    from .transformer import encode, head_logits

    if not batches:
        raise ContractError("entropy objective needs at least one task batch")
    terms = []
    for t, x in batches.items():
        if len(x) == 0:
            raise ContractError(f"empty batch for task {t}")
        logits = head_logits(encode(x, params, cfg), params, cfg, t)
        terms.append(tn.mean(tn.entropy(logits)))
    total = terms[0]
    for term in terms[1:]:
        total = tn.add(total, term)
    return tn.mul(total, 1.0 / len(terms))
