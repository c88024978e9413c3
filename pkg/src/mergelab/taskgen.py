"""Synthetic multi-task universe on a 4x4 token grid.

Every sample is a grid of noise tokens (ids ``0..7``) carrying one or more
signal tokens (ids ``8..15``). Each task reads a different property of the
signal tokens, so all tasks share low-level structure (which tokens are
signals) while their fine-tunes pull the backbone in different directions:

==========  =============================================  =======
family      label                                          signals
==========  =============================================  =======
token       which pair of signal ids: ``(s - 8) // 2``     1
row         row of the signal token                        1
column      column of the signal token                     1
diagonal    ``(row + col) % 4``                            1
antidiag    ``(row - col) % 4``                            1
parity      ``s % 4``                                      1
quadrant    2x2 quadrant of the signal token               1
count       number of signal tokens minus one              1..4
==========  =============================================  =======
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import tensor as tn
from .errors import ContractError, DivergenceError
from .tensor import Tensor
from .training import Adam, BatchSampler
from .transformer import (EncoderConfig, ParamSet, accuracy, encode, head_logits, head_names,
                          init_params)

GRID = 4
NOISE_TOKENS = 8
SIGNAL_TOKENS = 8
VOCAB = NOISE_TOKENS + SIGNAL_TOKENS
FAMILIES = ("token", "row", "column", "diagonal", "antidiag", "parity", "quadrant", "count")
NUM_CLASSES = 4


@dataclass
class SyntheticTask:
    task_id: int
    family: str
    num_classes: int
    seed: int
    train_x: np.ndarray
    train_y: np.ndarray
    test_x: np.ndarray
    test_y: np.ndarray


def label_of(family: str, grid: np.ndarray) -> int:
    """Label of one flattened 16-token grid under ``family``."""
    pos = np.flatnonzero(grid >= NOISE_TOKENS)
    if family == "count":
        return len(pos) - 1
    if len(pos) != 1:
        raise ContractError(f"{family} grids carry exactly one signal token")
    p = int(pos[0])
    r, c, s = divmod(p, GRID) + (int(grid[p]),)
    return {
        "token": (s - NOISE_TOKENS) // 2,
        "row": r,
        "column": c,
        "diagonal": (r + c) % GRID,
        "antidiag": (r - c) % GRID,
        "parity": s % 4,
        "quadrant": 2 * (r // 2) + (c // 2),
    }[family]


def _sample(family: str, label: int, rng: np.random.Generator) -> np.ndarray:
    grid = rng.integers(0, NOISE_TOKENS, size=GRID * GRID)
    if family == "count":
        cells = rng.choice(GRID * GRID, size=label + 1, replace=False)
        grid[cells] = rng.integers(NOISE_TOKENS, VOCAB, size=label + 1)
        return grid
    # draw (cell, token) uniformly among those producing ``label``
    while True:
        cell = int(rng.integers(GRID * GRID))
        tok = int(rng.integers(NOISE_TOKENS, VOCAB))
        probe = grid.copy()
        probe[cell] = tok
        if label_of(family, probe) == label:
            return probe


def _split(family: str, n: int, rng: np.random.Generator, seen: set) -> tuple[np.ndarray, np.ndarray]:
    labels = np.arange(n) % NUM_CLASSES
    rng.shuffle(labels)
    xs = []
    for y in labels:
        while True:
            g = _sample(family, int(y), rng)
            key = g.tobytes()
            if key not in seen:
                seen.add(key)
                xs.append(g)
                break
    return np.stack(xs).astype(np.int64), labels.astype(np.int64)


def gen_tasks(T: int, seed: int, n_train: int = 512, n_test: int = 256) -> list[SyntheticTask]:
    """``T`` tasks (one per family, in table order) with disjoint, class-balanced splits."""
    if not 2 <= T <= len(FAMILIES):
        raise ContractError(f"T must lie in 2..{len(FAMILIES)}")
    tasks = []
    for t in range(T):
        family = FAMILIES[t]
        rng = np.random.default_rng([seed, t])
        seen: set = set()
        tr_x, tr_y = _split(family, n_train, rng, seen)
        te_x, te_y = _split(family, n_test, rng, seen)
        tasks.append(SyntheticTask(t, family, NUM_CLASSES, seed, tr_x, tr_y, te_x, te_y))
    return tasks


def encoder_config(T: int, **overrides) -> EncoderConfig:
    base = dict(num_blocks=4, dim=32, heads=4, mlp_ratio=4.0, seq_len=GRID * GRID + 1,
                num_classes=(NUM_CLASSES,) * T, vocab_size=VOCAB)
    base.update(overrides)
    return EncoderConfig(**base)


# ---------------------------------------------------------------- training


@dataclass(frozen=True)
class FitConfig:
    steps: int = 300
    batch_size: int = 32
    learning_rate: float = 3e-3
    seed: int = 0


def presence_targets(x: np.ndarray) -> np.ndarray:
    """Multi-label pretext target: which signal ids occur in each grid."""
    out = np.zeros((len(x), SIGNAL_TOKENS))
    for i, g in enumerate(x):
        for s in g[g >= NOISE_TOKENS]:
            out[i, s - NOISE_TOKENS] = 1.0
    return out


def _fit(params: dict, trainable: Sequence[str], loss_fn, n: int, fit: FitConfig, label: str,
         on_step=None) -> list[float]:
    """Adam loop; ``on_step(step, params)`` returning True stops early."""
    opt = Adam(fit.learning_rate)
    sampler = BatchSampler([n], fit.batch_size, fit.seed)
    losses = []
    for step in range(fit.steps):
        idx = sampler.next(0)
        leaves = {k: Tensor(params[k], requires_grad=True) for k in trainable}
        view = {**params, **leaves}
        with tn.Tape() as tape:
            loss = loss_fn(view, idx)
        value = loss.item()
        if not math.isfinite(value):
            raise DivergenceError(f"{label}: loss non-finite at step {step}")
        losses.append(value)
        tape.backward(loss, wrt=leaves.values())
        opt.step(params, {k: leaves[k].grad for k in trainable})
        if on_step is not None and on_step(step + 1, params):
            break
    return losses


def pretrain(cfg: EncoderConfig, tasks: Sequence[SyntheticTask], fit: FitConfig = FitConfig(steps=400)):
    """Backbone trained to detect which signal tokens are present, pooled over all tasks' inputs.

    Returns ``(theta_pre, pretext_head, losses)``; the pretext head is not part
    of the ParamSet schema.
    """
    rng = np.random.default_rng([fit.seed, 101])
    params = dict(init_params(cfg, rng))
    params["pretext.weight"] = rng.normal(0, 1 / math.sqrt(cfg.dim), size=(cfg.dim, SIGNAL_TOKENS))
    params["pretext.bias"] = np.zeros(SIGNAL_TOKENS)
    x = np.concatenate([t.train_x for t in tasks])
    targets = presence_targets(x)
    trainable = [k for k in params if not k.startswith("heads.")]

    def loss_fn(p, idx):
        rep = encode(x[idx], p, cfg)
        logits = tn.linear(rep, p["pretext.weight"], p["pretext.bias"])
        return tn.bce_with_logits(logits, targets[idx])

    losses = _fit(params, trainable, loss_fn, len(x), fit, "pretrain")
    head = {k: params.pop(k) for k in ("pretext.weight", "pretext.bias")}
    return ParamSet(params), head, losses


def pretext_accuracy(theta_pre, head, cfg: EncoderConfig, x: np.ndarray) -> float:
    rep = encode(x, theta_pre, cfg)
    logits = tn.linear(rep, Tensor(head["pretext.weight"]), Tensor(head["pretext.bias"])).numpy()
    return float(np.mean((logits > 0) == (presence_targets(x) > 0.5)))


def finetune(theta_pre, task: SyntheticTask, cfg: EncoderConfig, fit: FitConfig = FitConfig(), on_step=None):
    """Full fine-tune of the backbone plus head ``task_id`` on the task's training split only."""
    params = dict(ParamSet(theta_pre).copy())
    t = task.task_id
    x, y = task.train_x, task.train_y
    trainable = [k for k in params if not k.startswith("heads.") or k in head_names(t)]

    def loss_fn(p, idx):
        return tn.cross_entropy(head_logits(encode(x[idx], p, cfg), p, cfg, t), y[idx])

    losses = _fit(params, trainable, loss_fn, len(x), fit, f"finetune task {t}", on_step)
    return ParamSet(params), losses


def steps_to_accuracy(theta_init, task: SyntheticTask, cfg: EncoderConfig, target: float,
                      fit: FitConfig, every: int = 25) -> int | None:
    """Fine-tuning steps until training-split accuracy first reaches ``target`` (None if never).

    Accuracy is checked every ``every`` steps of a single optimizer run.
    """
    hit: list[int] = []

    def check(step, params):
        if step % every and step != fit.steps:
            return False
        if accuracy(task.train_x, task.train_y, params, cfg, task.task_id) >= target:
            hit.append(step)
            return True
        return False

    finetune(theta_init, task, cfg, fit, on_step=check)
    return hit[0] if hit else None
