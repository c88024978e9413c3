"""Task-specific intervention modules and their parameter bookkeeping.

All formulas use row vectors: a representation ``h`` of width ``d`` is
projected to rank ``r`` by ``h @ W`` with ``W`` of shape ``(d, r)`` and
mapped back by ``v @ W.T``.

Patterns (``R`` has orthonormal columns)::

    P1  h + R^T b
    P2  h + R^T (b - R h)
    P3  h + R^T (W h + b)
    P4  h + W2^T (W1 h + b - W2 h)       # the default "full" intervention
    P5  h + R^T (W h + b - R h)
    SURGERY   W_up relu(W_down h)        # replaces the final representation
"""

from __future__ import annotations

from dataclasses import dataclass, field, asdict
from typing import Iterable, Mapping

import numpy as np

from . import tensor as tn
from .errors import ContractError, IntegrityError, NumericError
from .tensor import Tensor

PATTERNS = ("P1", "P2", "P3", "P4", "P5", "SURGERY")
R_PATTERNS = ("P1", "P2", "P3", "P5")
TOKEN_SELECTORS = ("cls", "first_patch", "middle_patch", "last_patch", "all_patches", "all_tokens")
ORTHO_TOL = 1e-8

# trainable leaves per pattern
PATTERN_LEAVES = {
    "P1": ("R", "b"),
    "P2": ("R", "b"),
    "P3": ("R", "W", "b"),
    "P4": ("W1", "W2", "b"),
    "P5": ("R", "W", "b"),
    "SURGERY": ("W_down", "W_up"),
}


def select_tokens(selector: str, S: int) -> tuple[int, ...]:
    """Sequence positions an intervention edits (position 0 is CLS)."""
    if S < 2:
        raise ContractError("sequence needs CLS plus at least one patch token")
    table = {
        "cls": (0,),
        "first_patch": (1,),
        "middle_patch": (1 + (S - 1) // 2,),
        "last_patch": (S - 1,),
        "all_patches": tuple(range(1, S)),
        "all_tokens": tuple(range(S)),
    }
    if selector not in table:
        raise ContractError(f"unknown token selector {selector!r}")
    return table[selector]


@dataclass(frozen=True)
class InterventionSpec:
    pattern: str = "P4"
    rank: int = 1
    slice: tuple[int, int] | None = None  # None: the whole representation
    shift_per_block: int | None = None  # None: shift by the slice width
    tokens: str = "cls"
    blocks: tuple[int, ...] | None = None  # None: every block; 1-based ids

    def __post_init__(self):
        if self.slice is not None:
            object.__setattr__(self, "slice", (int(self.slice[0]), int(self.slice[1])))
        if self.blocks is not None:
            object.__setattr__(self, "blocks", tuple(sorted({int(b) for b in self.blocks})))

    def problems(self, k: int | None = None, N: int | None = None) -> list[tuple[str, str]]:
        out = []
        if self.pattern not in PATTERNS:
            out.append(("pattern", f"must be one of {', '.join(PATTERNS)}"))
        if self.rank < 1:
            out.append(("rank", "must be >= 1"))
        if self.tokens not in TOKEN_SELECTORS:
            out.append(("tokens", f"must be one of {', '.join(TOKEN_SELECTORS)}"))
        if self.shift_per_block is not None and self.shift_per_block < 0:
            out.append(("shift_per_block", "must be >= 0"))
        if self.pattern == "SURGERY" and (self.slice is not None or self.shift_per_block):
            # None and 0 both mean "no shift" for the post-encoder adapter
            out.append(("pattern", "SURGERY acts on the whole final representation; no slice/shift"))
        if k is not None:
            j, p = self.slice if self.slice is not None else (0, k)
            if not 0 <= j < p <= k:
                out.append(("slice", f"need 0 <= j < p <= {k}, got [{j}:{p})"))
            elif self.rank > p - j:
                out.append(("rank", f"rank {self.rank} exceeds slice width {p - j}"))
        if N is not None and self.blocks is not None and self.pattern != "SURGERY":
            bad = [b for b in self.blocks if not 1 <= b <= N]
            if bad:
                out.append(("blocks", f"blocks {bad} outside 1..{N}"))
        return out

    def validate(self, k: int, N: int) -> None:
        problems = self.problems(k, N)
        if problems:
            raise ContractError("; ".join(f"{a}: {m}" for a, m in problems))

    def block_list(self, N: int) -> tuple[int, ...]:
        if self.pattern == "SURGERY":
            return ()
        return tuple(range(1, N + 1)) if self.blocks is None else self.blocks

    def width(self, k: int) -> int:
        j, p = self.slice if self.slice is not None else (0, k)
        return p - j

    def slice_for_block(self, b: int, k: int) -> tuple[int, int]:
        """Slice ``[start, start + width)`` used in block ``b``; shifted slices never wrap."""
        j, p = self.slice if self.slice is not None else (0, k)
        w = p - j
        if not 0 <= j < p <= k:
            raise ContractError(f"slice [{j}:{p}) invalid for width {k}")
        shift = w if self.shift_per_block is None else self.shift_per_block
        start = (j + (b - 1) * shift) % (k - w + 1)
        return start, start + w

    def to_dict(self) -> dict:
        return asdict(self)


# ---------------------------------------------------------------- formulas


def _check_orthonormal(R: np.ndarray) -> None:
    gram = R.T @ R
    err = np.abs(gram - np.eye(gram.shape[0])).max()
    if err > ORTHO_TOL:
        raise IntegrityError(f"R columns not orthonormal (max |R^T R - I| = {err:.3e})")


def pattern_delta(h: Tensor, pattern: str, params: Mapping[str, Tensor]) -> Tensor:
    """The correction term ``pattern_apply(h) - h``."""
    if pattern == "P4":
        W1, W2, b = params["W1"], params["W2"], params["b"]
        inner = tn.sub(tn.add(tn.matmul(h, W1), b), tn.matmul(h, W2))
        return tn.matmul(inner, tn.swap_last(W2))
    if pattern not in R_PATTERNS:
        raise ContractError(f"pattern {pattern!r} is not a residual intervention")
    R, b = params["R"], params["b"]
    _check_orthonormal(R.data)
    if pattern == "P1":
        inner = tn.broadcast_to(b, h.shape[:-1] + b.shape)
    elif pattern == "P2":
        inner = tn.sub(b, tn.matmul(h, R))
    elif pattern == "P3":
        inner = tn.add(tn.matmul(h, params["W"]), b)
    else:
        inner = tn.sub(tn.add(tn.matmul(h, params["W"]), b), tn.matmul(h, R))
    return tn.matmul(inner, tn.swap_last(R))


def _as_rows(h) -> tuple[Tensor, bool]:
    h = h if isinstance(h, Tensor) else Tensor(h)
    if h.ndim == 1:
        return tn.reshape(h, (1, h.shape[0])), True
    return h, False


def _tensors(params: Mapping) -> dict[str, Tensor]:
    return {k: v if isinstance(v, Tensor) else Tensor(v) for k, v in params.items()}


def pattern_apply(h, pattern: str, params: Mapping) -> Tensor:
    rows, single = _as_rows(h)
    out = tn.add(rows, pattern_delta(rows, pattern, _tensors(params)))
    return tn.reshape(out, (out.shape[-1],)) if single else out


def full_intervention(z, W1, W2, b) -> Tensor:
    """``z + W2^T (W1 z + b - W2 z)`` over the whole representation."""
    k = np.shape(z)[-1]
    r = np.shape(W1)[-1]
    if r > k:
        raise ContractError(f"rank {r} exceeds representation width {k}")
    if np.shape(W1) != (k, r) or np.shape(W2) != (k, r) or np.shape(b) != (r,):
        raise ContractError(f"P4 parameter shapes {np.shape(W1)}, {np.shape(W2)}, {np.shape(b)} do not fit width {k}")
    return pattern_apply(z, "P4", {"W1": W1, "W2": W2, "b": b})


def mini_intervention(z, pattern: str, params: Mapping, start: int, stop: int) -> Tensor:
    """Apply ``pattern`` to coordinates ``[start, stop)`` only; the rest pass through."""
    rows, single = _as_rows(z)
    k = rows.shape[-1]
    if not 0 <= start < stop <= k:
        raise ContractError(f"slice [{start}:{stop}) invalid for width {k}")
    idx = (slice(None), slice(start, stop))
    delta = pattern_delta(tn.getitem(rows, idx), pattern, _tensors(params))
    out = tn.add(rows, tn.scatter(delta, rows.shape, idx))
    return tn.reshape(out, (k,)) if single else out


def surgery_adapter(h, W_down, W_up) -> Tensor:
    """``W_up relu(W_down h)``; replaces the representation rather than adding to it."""
    rows, single = _as_rows(h)
    W_down = W_down if isinstance(W_down, Tensor) else Tensor(W_down)
    W_up = W_up if isinstance(W_up, Tensor) else Tensor(W_up)
    out = tn.matmul(tn.relu(tn.matmul(rows, W_down)), W_up)
    return tn.reshape(out, (out.shape[-1],)) if single else out


def reorthonormalize(R: np.ndarray, tol: float = 1e-10) -> np.ndarray:
    """Orthonormal basis of span(R) via sign-fixed QR; identity on orthonormal input."""
    R = np.asarray(R, dtype=np.float64)
    q, r = np.linalg.qr(R)
    diag = np.diag(r)
    scale = np.abs(R).max() if R.size else 0.0
    if R.shape[1] > R.shape[0] or np.any(np.abs(diag) <= tol * max(scale, 1.0)):
        raise NumericError(f"R of shape {R.shape} is rank deficient; cannot re-orthonormalize")
    return q * np.sign(diag)


# ---------------------------------------------------------------- accounting


def module_param_count(pattern: str, d: int, r: int) -> int:
    if pattern in ("P1", "P2"):
        return d * r + r
    if pattern in ("P3", "P4", "P5"):
        return 2 * d * r + r
    if pattern == "SURGERY":
        return 2 * d * r
    raise ContractError(f"unknown pattern {pattern!r}")


def count_extra_params(spec: InterventionSpec, T: int, N: int, k: int) -> int:
    """Trainable scalars added at inference time by all task modules."""
    if spec.pattern == "SURGERY":
        return T * module_param_count("SURGERY", k, spec.rank)
    per = module_param_count(spec.pattern, spec.width(k), spec.rank)
    return T * len(spec.block_list(N)) * per


# ---------------------------------------------------------------- parameters


def param_key(task: int, block: int | str, leaf: str) -> str:
    return f"t{task}.b{block}.{leaf}" if block != "post" else f"t{task}.post.{leaf}"


def _random_orthonormal(d: int, r: int, rng: np.random.Generator) -> np.ndarray:
    return reorthonormalize(rng.normal(size=(d, r)))


def init_params(spec: InterventionSpec, tasks: Iterable[int], N: int, k: int,
                rng: np.random.Generator, zero: bool = False) -> dict[str, np.ndarray]:
    """Fresh intervention parameters; every residual pattern except P2 starts as the identity.

    ``zero=True`` sets every non-orthonormal leaf to exactly zero (R stays
    orthonormal); that is also an identity for P1/P3/P4 but a saddle point
    with zero gradient for P4, so training uses the default init.
    """
    spec.validate(k, N)
    out: dict[str, np.ndarray] = {}
    r = spec.rank
    for t in tasks:
        if spec.pattern == "SURGERY":
            out[param_key(t, "post", "W_down")] = (np.zeros((k, r)) if zero
                                                   else rng.uniform(-0.1, 0.1, size=(k, r)))
            out[param_key(t, "post", "W_up")] = np.zeros((r, k))
            continue
        d = spec.width(k)
        for b in spec.block_list(N):
            leaves: dict[str, np.ndarray] = {"b": np.zeros(r)}
            if spec.pattern == "P4":
                W2 = np.zeros((d, r)) if zero else _random_orthonormal(d, r, rng)
                leaves["W1"], leaves["W2"] = W2.copy(), W2
            else:
                R = _random_orthonormal(d, r, rng)
                leaves["R"] = R
                if spec.pattern == "P3":
                    leaves["W"] = np.zeros((d, r))
                elif spec.pattern == "P5":
                    leaves["W"] = np.zeros((d, r)) if zero else R.copy()
            for leaf in PATTERN_LEAVES[spec.pattern]:
                out[param_key(t, b, leaf)] = leaves[leaf]
    return out


def task_keys(params: Mapping[str, object], task: int) -> list[str]:
    prefix = f"t{task}."
    return [k for k in params if k.startswith(prefix)]


def enforce_orthonormality(params: dict[str, np.ndarray]) -> None:
    for key in params:
        if key.endswith(".R"):
            params[key] = reorthonormalize(params[key])


def max_ortho_error(params: Mapping[str, np.ndarray]) -> float:
    worst = 0.0
    for key, R in params.items():
        if key.endswith(".R"):
            R = np.asarray(getattr(R, "data", R))
            worst = max(worst, float(np.abs(R.T @ R - np.eye(R.shape[1])).max()))
    return worst


# ---------------------------------------------------------------- bound modules


class BoundIntervention:
    """One task's module in one block, editing selected tokens of the MHSA output."""

    def __init__(self, task: int, block: int, pattern: str, leaves: Mapping, start: int, stop: int,
                 token_index: tuple[int, ...]):
        self.task = task
        self.block = block
        self.pattern = pattern
        self.leaves = _tensors(leaves)
        self.start, self.stop = start, stop
        self.token_index = np.asarray(token_index, dtype=np.int64)

    def __call__(self, z: Tensor) -> Tensor:
        if z.ndim != 3:
            raise ContractError("bound interventions act on (batch, seq, dim) activations")
        toks = self.token_index
        if toks.size == z.shape[1] and np.array_equal(toks, np.arange(z.shape[1])):
            idx = (slice(None), slice(None), slice(self.start, self.stop))
        else:
            idx = (slice(None), toks, slice(self.start, self.stop))
        part = tn.getitem(z, idx)
        delta = pattern_delta(part, self.pattern, self.leaves)
        return tn.add(z, tn.scatter(delta, z.shape, idx))


class SurgeryAdapter:
    def __init__(self, task: int, W_down, W_up):
        self.task = task
        self.W_down = W_down if isinstance(W_down, Tensor) else Tensor(W_down)
        self.W_up = W_up if isinstance(W_up, Tensor) else Tensor(W_up)

    def __call__(self, rep: Tensor) -> Tensor:
        return surgery_adapter(rep, self.W_down, self.W_up)


@dataclass
class TaskInterventions:
    """Every module of one task, keyed by block, plus an optional post-encoder adapter."""

    task: int
    blocks: dict[int, BoundIntervention] = field(default_factory=dict)
    post: SurgeryAdapter | None = None

    def get(self, b: int) -> BoundIntervention | None:
        return self.blocks.get(b)

    def modules(self) -> list:
        mods = list(self.blocks.values())
        if self.post is not None:
            mods.append(self.post)
        return mods


def bind(spec: InterventionSpec, params: Mapping, task: int, k: int, S: int, N: int) -> TaskInterventions:
    """Assemble task ``task``'s modules from a flat parameter dict (arrays or Tensors)."""
    if spec.pattern == "SURGERY":
        return TaskInterventions(task, {}, SurgeryAdapter(task, params[param_key(task, "post", "W_down")],
                                                          params[param_key(task, "post", "W_up")]))
    toks = select_tokens(spec.tokens, S)
    mods = {}
    for b in spec.block_list(N):
        start, stop = spec.slice_for_block(b, k)
        leaves = {leaf: params[param_key(task, b, leaf)] for leaf in PATTERN_LEAVES[spec.pattern]}
        mods[b] = BoundIntervention(task, b, spec.pattern, leaves, start, stop, toks)
    return TaskInterventions(task, mods)
