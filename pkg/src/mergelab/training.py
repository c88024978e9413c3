"""Distillation training of interventions, joint lambda learning and AdaMerging."""

from __future__ import annotations

import math
from dataclasses import dataclass, field, asdict
from typing import Mapping, Sequence

import numpy as np

from . import interventions as iv
from . import merging as mg
from . import tensor as tn
from .errors import ContractError, DivergenceError
from .tensor import Tensor
from .transformer import EncoderConfig, encode, head_logits


class Adam:
    """Adaptive-moment optimizer over a dict of float64 arrays (updated in place)."""

    def __init__(self, lr: float = 1e-3, betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8):
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, params: dict[str, np.ndarray], grads: Mapping[str, np.ndarray]) -> None:
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for name in sorted(grads):
            g = grads[name]
            m = self.m.get(name)
            if m is None:
                m = self.m[name] = np.zeros_like(g)
                self.v[name] = np.zeros_like(g)
            m *= self.b1
            m += (1.0 - self.b1) * g
            v = self.v[name]
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            if self.lr:
                params[name] = params[name] - self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


@dataclass(frozen=True)
class TrainConfig:
    iterations: int = 500
    batch_size: int = 16
    learning_rate: float = 2e-2
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    learn_lambdas: bool = False
    seed: int = 0
    distill_target: str = "features"  # or "logits"

    def problems(self) -> list[tuple[str, str]]:
        out = []
        if self.iterations < 1:
            out.append(("iterations", "must be >= 1"))
        if self.batch_size < 1:
            out.append(("batch_size", "must be >= 1"))
        if not self.learning_rate >= 0:
            out.append(("learning_rate", "must be >= 0"))
        for name in ("beta1", "beta2"):
            if not 0 <= getattr(self, name) < 1:
                out.append((name, "must lie in [0, 1)"))
        if self.eps <= 0:
            out.append(("eps", "must be positive"))
        if self.distill_target not in ("features", "logits"):
            out.append(("distill_target", "must be 'features' or 'logits'"))
        return out

    def optimizer(self) -> Adam:
        return Adam(self.learning_rate, (self.beta1, self.beta2), self.eps)

    def to_dict(self) -> dict:
        return asdict(self)


# ---------------------------------------------------------------- data


def subset_data(datasets: Sequence[np.ndarray], fraction: float, seed: int) -> list[np.ndarray]:
    """Per task, a fixed sorted index subset of size ``max(1, floor(fraction * n))``."""
    if not 0 < fraction <= 1:
        raise ContractError(f"fraction must lie in (0, 1], got {fraction}")
    out = []
    for t, data in enumerate(datasets):
        n = len(data)
        if n == 0:
            raise ContractError(f"task {t} has an empty dataset")
        keep = max(1, int(math.floor(fraction * n + 1e-9)))
        rng = np.random.default_rng([seed, t])
        out.append(np.sort(rng.permutation(n)[:keep]))
    return out


class BatchSampler:
    """Walks a shuffled permutation per task; reshuffles when exhausted."""

    def __init__(self, sizes: Sequence[int], batch_size: int, seed: int):
        self.sizes = list(sizes)
        self.batch = batch_size
        self.rngs = [np.random.default_rng([seed, 7919, t]) for t in range(len(sizes))]
        self.perm = [r.permutation(n) for r, n in zip(self.rngs, self.sizes)]
        self.pos = [0] * len(sizes)

    def next(self, t: int) -> np.ndarray:
        n = self.sizes[t]
        take = min(self.batch, n)
        if self.pos[t] + take > n:
            self.perm[t] = self.rngs[t].permutation(n)
            self.pos[t] = 0
        idx = self.perm[t][self.pos[t]:self.pos[t] + take]
        self.pos[t] += take
        # sorted so the reduction order depends only on batch membership
        return np.sort(idx)


# ---------------------------------------------------------------- distillation


def teacher_outputs(task_models: Sequence[Mapping], data: Mapping[int, np.ndarray], cfg: EncoderConfig,
                    target: str = "features") -> dict[int, np.ndarray]:
    """Frozen task-model outputs (final CLS features or logits) for every row of ``data[t]``."""
    out = {}
    for t, x in data.items():
        rep = encode(x, task_models[t], cfg)
        if target == "logits":
            rep = head_logits(rep, task_models[t], cfg, t)
        out[t] = rep.numpy()
    return out


def student_outputs(params: Mapping, cfg: EncoderConfig, t: int, x, interventions=None,
                    target: str = "features") -> Tensor:
    rep = encode(x, params, cfg, interventions)
    return head_logits(rep, params, cfg, t) if target == "logits" else rep


def distill_loss(params: Mapping, cfg: EncoderConfig, batches: Mapping[int, np.ndarray],
                 targets: Mapping[int, np.ndarray], spec: iv.InterventionSpec | None = None,
                 iparams: Mapping | None = None, target: str = "features") -> Tensor:
    """Mean over tasks of the mean absolute gap between teacher and intervened student outputs."""
    if not batches:
        raise ContractError("distillation needs at least one task batch")
    terms = []
    for t in sorted(batches):
        x = batches[t]
        if len(x) == 0:
            raise ContractError(f"empty distillation batch for task {t}")
        mods = None
        if spec is not None and iparams is not None:
            mods = iv.bind(spec, iparams, t, cfg.dim, cfg.seq_len, cfg.num_blocks)
        student = student_outputs(params, cfg, t, x, mods, target)
        terms.append(tn.l1_loss(student, targets[t]))
    total = terms[0]
    for term in terms[1:]:
        total = tn.add(total, term)
    return tn.mul(total, 1.0 / len(terms))


@dataclass
class LearnableMerge:
    """Rebuilds the merged parameters from trainable coefficients each step."""

    plan: mg.MergePlan
    theta_pre: Mapping
    task_models: Sequence[Mapping]
    groups: Sequence[Sequence[str]] | None = None

    def __post_init__(self):
        self.tvs = [mg.task_vector(m, self.theta_pre) for m in self.task_models]
        if self.plan.method == "ties":
            self._ties_vec = mg.ties_vector(self.tvs, self.plan.ties_trim_fraction)

    def init_coeffs(self) -> np.ndarray:
        if self.plan.method == "average":
            raise ContractError("weight averaging has no coefficients to learn")
        L = len(self.groups) if self.groups is not None else len(self.theta_pre)
        return np.array(self.plan.coefficients(len(self.tvs), L), dtype=np.float64)

    def build(self, lam: Tensor) -> dict:
        method = self.plan.method
        if method == "ties":
            merged = {k: tn.add(Tensor(np.asarray(v)), tn.mul(Tensor(self._ties_vec[k]), lam))
                      for k, v in self.theta_pre.items()}
        elif method == "task_arithmetic":
            merged = mg.merge_tensors(self.theta_pre, self.tvs, tn.broadcast_to(lam, (len(self.tvs),)))
        else:
            merged = mg.merge_tensors(self.theta_pre, self.tvs, lam, self.groups)
        return mg.attach_heads(merged, self.task_models)

    def plan_with(self, lam: np.ndarray) -> mg.MergePlan:
        value = float(lam) if np.ndim(lam) == 0 else np.asarray(lam).tolist()
        return mg.MergePlan(self.plan.method, value, self.plan.ties_trim_fraction)


@dataclass
class TrainResult:
    params: dict[str, np.ndarray]
    losses: list[float]
    lambdas: np.ndarray | None = None
    trajectory: list[np.ndarray] = field(default_factory=list)

    @property
    def initial_loss(self) -> float:
        return self.losses[0]

    @property
    def final_loss(self) -> float:
        return self.losses[-1]


def _check_finite(value: float, it: int, what: str) -> None:
    if not math.isfinite(value):
        raise DivergenceError(f"{what} became non-finite ({value}) at iteration {it}")


def train_interventions(merged: Mapping, task_models: Sequence[Mapping], spec: iv.InterventionSpec,
                        cfg: EncoderConfig, train: TrainConfig, data: Mapping[int, np.ndarray],
                        learnable: LearnableMerge | None = None,
                        init: Mapping[str, np.ndarray] | None = None) -> TrainResult:
    """Fit every task's intervention modules to its task model by distillation.

    ``data[t]`` holds the unlabeled inputs available for task ``t``. When
    ``train.learn_lambdas`` is set, ``learnable`` supplies the merge whose
    coefficients are optimised jointly; ``merged`` is then ignored.
    """
    problems = train.problems()
    if problems:
        raise ContractError("; ".join(f"{a}: {m}" for a, m in problems))
    spec.validate(cfg.dim, cfg.num_blocks)
    tasks = sorted(data)
    rng = np.random.default_rng(train.seed)
    params = dict(init) if init is not None else iv.init_params(spec, tasks, cfg.num_blocks, cfg.dim, rng)
    params = {k: np.array(v, dtype=np.float64) for k, v in params.items()}
    if train.learn_lambdas and learnable is None:
        raise ContractError("learn_lambdas needs the merge inputs (LearnableMerge)")
    lam = learnable.init_coeffs() if train.learn_lambdas else None
    targets_all = teacher_outputs(task_models, data, cfg, train.distill_target)
    sampler = BatchSampler([len(data[t]) for t in tasks], train.batch_size, train.seed)
    opt = train.optimizer()
    losses: list[float] = []
    trajectory: list[np.ndarray] = []
    for it in range(train.iterations):
        picks = {t: sampler.next(i) for i, t in enumerate(tasks)}
        batches = {t: data[t][picks[t]] for t in tasks}
        targets = {t: targets_all[t][picks[t]] for t in tasks}
        leaves = {k: Tensor(v, requires_grad=True) for k, v in params.items()}
        lam_leaf = Tensor(lam, requires_grad=True) if lam is not None else None
        with tn.Tape() as tape:
            base = learnable.build(lam_leaf) if lam_leaf is not None else merged
            loss = distill_loss(base, cfg, batches, targets, spec, leaves, train.distill_target)
        value = loss.item()
        _check_finite(value, it, "distillation loss")
        losses.append(value)
        wrt = list(leaves.values()) + ([lam_leaf] if lam_leaf is not None else [])
        tape.backward(loss, wrt=wrt)
        grads = {k: leaves[k].grad for k in params}
        if lam_leaf is not None:
            grads["__lambda__"] = lam_leaf.grad
            params["__lambda__"] = lam
        opt.step(params, grads)
        if lam_leaf is not None:
            lam = params.pop("__lambda__")
            trajectory.append(np.array(lam))
        iv.enforce_orthonormality(params)
    return TrainResult(params, losses, lam, trajectory)


def evaluate_distill_loss(base: Mapping, task_models: Sequence[Mapping], spec, iparams, cfg: EncoderConfig,
                          data: Mapping[int, np.ndarray], target: str = "features") -> float:
    targets = teacher_outputs(task_models, data, cfg, target)
    return distill_loss(base, cfg, data, targets, spec, iparams, target).item()


def train_adamerging(theta_pre: Mapping, task_models: Sequence[Mapping], data: Mapping[int, np.ndarray],
                     cfg: EncoderConfig, train: TrainConfig, layerwise: bool = True,
                     groups: Sequence[Sequence[str]] | None = None, init: float = 0.3) -> TrainResult:
    """Learn merge coefficients by minimising prediction entropy on unlabeled data."""
    method = "adamerging_layerwise" if layerwise else "adamerging_taskwise"
    learnable = LearnableMerge(mg.MergePlan(method, init), theta_pre, task_models, groups)
    lam = learnable.init_coeffs()
    tasks = sorted(data)
    sampler = BatchSampler([len(data[t]) for t in tasks], train.batch_size, train.seed)
    opt = train.optimizer()
    losses, trajectory = [], [np.array(lam)]
    for it in range(train.iterations):
        batches = {t: data[t][sampler.next(i)] for i, t in enumerate(tasks)}
        leaf = Tensor(lam, requires_grad=True)
        with tn.Tape() as tape:
            loss = mg.entropy_objective(learnable.build(leaf), batches, cfg)
        _check_finite(loss.item(), it, "entropy objective")
        losses.append(loss.item())
        tape.backward(loss, wrt=[leaf])
        holder = {"lam": lam}
        opt.step(holder, {"lam": leaf.grad})
        lam = holder["lam"]
        trajectory.append(np.array(lam))
    return TrainResult({}, losses, lam, trajectory)
