"""ViT-style token encoder with per-task heads.

Parameters live in a :class:`ParamSet` (a flat ``name -> ndarray`` dict).
Forward functions accept either arrays or :class:`~mergelab.tensor.Tensor`
values so the same code serves evaluation and training.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, asdict
from typing import Mapping

import numpy as np

from . import tensor as tn
from .errors import ContractError, DimensionError
from .tensor import Tensor


@dataclass(frozen=True)
class EncoderConfig:
    num_blocks: int = 4
    dim: int = 32
    heads: int = 4
    mlp_ratio: float = 4.0
    seq_len: int = 17  # CLS + patch tokens
    num_classes: tuple[int, ...] = (4, 4, 4, 4)
    vocab_size: int = 16

    def __post_init__(self):
        object.__setattr__(self, "num_classes", tuple(int(c) for c in self.num_classes))
        problems = self.problems()
        if problems:
            raise ContractError("; ".join(f"{k}: {v}" for k, v in problems))

    def problems(self) -> list[tuple[str, str]]:
        out = []
        if self.num_blocks < 1:
            out.append(("num_blocks", "must be >= 1"))
        if self.heads < 1 or self.dim % self.heads:
            out.append(("dim", f"{self.dim} not divisible by heads={self.heads}"))
        if self.seq_len < 2:
            out.append(("seq_len", "needs CLS plus at least one patch token"))
        if self.mlp_ratio <= 0:
            out.append(("mlp_ratio", "must be positive"))
        if not self.num_classes or min(self.num_classes) < 2:
            out.append(("num_classes", "every task needs >= 2 classes"))
        if self.vocab_size < 1:
            out.append(("vocab_size", "must be >= 1"))
        return out

    @property
    def num_tasks(self) -> int:
        return len(self.num_classes)

    @property
    def hidden(self) -> int:
        return int(round(self.dim * self.mlp_ratio))

    def to_dict(self) -> dict:
        return asdict(self)


DESK = EncoderConfig()
# parameter counting only; never instantiated for training
VITB32 = EncoderConfig(num_blocks=12, dim=768, heads=12, mlp_ratio=4.0, seq_len=50,
                             num_classes=(397, 196, 45, 10, 10, 43, 10, 47), vocab_size=1)
NAMED_CONFIGS = {"desk": DESK, "vit-b32": VITB32}


class ParamSet(dict):
    """Flat mapping of parameter name to float64 array."""

    def schema(self) -> dict[str, tuple[int, ...]]:
        return {k: tuple(np.shape(v)) for k, v in self.items()}

    def copy(self) -> "ParamSet":
        return ParamSet({k: np.array(v, dtype=np.float64) for k, v in self.items()})

    @property
    def num_params(self) -> int:
        return int(sum(np.size(v) for v in self.values()))


def check_schema(*params: Mapping[str, np.ndarray]) -> None:
    ref = {k: tuple(np.shape(v)) for k, v in params[0].items()}
    for i, p in enumerate(params[1:], 1):
        other = {k: tuple(np.shape(v)) for k, v in p.items()}
        if other != ref:
            missing = sorted(set(ref) ^ set(other))
            shapes = sorted(k for k in set(ref) & set(other) if ref[k] != other[k])
            raise ContractError(f"ParamSet #{i} schema differs (names {missing[:4]}, shapes {shapes[:4]})")


def block_names(b: int) -> list[str]:
    p = f"blocks.{b}."
    return [p + n for n in ("ln1.gamma", "ln1.beta", "attn.wq", "attn.bq", "attn.wk",
                            "attn.wv", "attn.bv", "attn.wo", "attn.bo", "ln2.gamma",
                            "ln2.beta", "mlp.w1", "mlp.b1", "mlp.w2", "mlp.b2")]


EMBED_NAMES = ("embed.token", "embed.pos", "embed.cls")
NORM_NAMES = ("norm.gamma", "norm.beta")


def head_names(t: int) -> tuple[str, str]:
    return f"heads.{t}.weight", f"heads.{t}.bias"


def param_shapes(cfg: EncoderConfig) -> dict[str, tuple[int, ...]]:
    k, hdn = cfg.dim, cfg.hidden
    shapes: dict[str, tuple[int, ...]] = {
        "embed.token": (cfg.vocab_size, k),
        "embed.pos": (cfg.seq_len, k),
        "embed.cls": (k,),
    }
    for b in range(1, cfg.num_blocks + 1):
        per = [(k,), (k,), (k, k), (k,), (k, k), (k, k), (k,), (k, k), (k,), (k,), (k,),
               (k, hdn), (hdn,), (hdn, k), (k,)]
        shapes.update(zip(block_names(b), per))
    shapes["norm.gamma"] = (k,)
    shapes["norm.beta"] = (k,)
    for t, c in enumerate(cfg.num_classes):
        w, bias = head_names(t)
        shapes[w] = (k, c)
        shapes[bias] = (c,)
    return shapes


def count_params(cfg: EncoderConfig) -> int:
    """Total parameter count ``m`` of a ParamSet for ``cfg``."""
    return int(sum(math.prod(s) for s in param_shapes(cfg).values()))


def param_groups(cfg: EncoderConfig) -> dict[str, str]:
    """Layer group of every parameter, used for layer-wise merge coefficients."""
    groups = {n: "embed" for n in EMBED_NAMES}
    for b in range(1, cfg.num_blocks + 1):
        groups.update({n: f"block{b}" for n in block_names(b)})
    groups.update({n: "norm" for n in NORM_NAMES})
    for t in range(cfg.num_tasks):
        groups.update({n: f"head{t}" for n in head_names(t)})
    return groups


def group_order(cfg: EncoderConfig) -> list[str]:
    return (["embed"] + [f"block{b}" for b in range(1, cfg.num_blocks + 1)] + ["norm"]
            + [f"head{t}" for t in range(cfg.num_tasks)])


def layer_groups(cfg: EncoderConfig) -> list[list[str]]:
    """Parameter names per layer group, in :func:`group_order`."""
    by_group = param_groups(cfg)
    return [[n for n in param_shapes(cfg) if by_group[n] == g] for g in group_order(cfg)]


def init_params(cfg: EncoderConfig, rng: np.random.Generator) -> ParamSet:
    params = ParamSet()
    for name, shape in param_shapes(cfg).items():
        leaf = name.rsplit(".", 1)[-1]
        if leaf == "gamma":
            arr = np.ones(shape)
        elif leaf in ("beta", "bias", "bq", "bv", "bo", "b1", "b2"):
            arr = np.zeros(shape)
        elif name.startswith("embed."):
            arr = rng.normal(0.0, 0.5, size=shape)
        else:
            arr = rng.normal(0.0, 1.0 / math.sqrt(shape[0]), size=shape)
        params[name] = arr
    return params


# ---------------------------------------------------------------- forward


def _t(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def mhsa(x: Tensor, p: Mapping[str, Tensor], prefix: str, heads: int) -> Tensor:
    B, S, k = x.shape
    dh = k // heads

    def split(y):
        return tn.transpose(tn.reshape(y, (B, S, heads, dh)), (0, 2, 1, 3))

    q = split(tn.linear(x, p[prefix + "wq"], p[prefix + "bq"]))
    kk = split(tn.matmul(x, p[prefix + "wk"]))
    v = split(tn.linear(x, p[prefix + "wv"], p[prefix + "bv"]))
    att = tn.softmax(tn.mul(tn.matmul(q, tn.swap_last(kk)), 1.0 / math.sqrt(dh)))
    o = tn.reshape(tn.transpose(tn.matmul(att, v), (0, 2, 1, 3)), (B, S, k))
    return tn.linear(o, p[prefix + "wo"], p[prefix + "bo"])


def block_forward(h, params: Mapping, b: int, heads: int, intervention=None) -> Tensor:
    """One transformer block; ``intervention`` edits the MHSA output before the residual add.

    ``h`` is ``(S, k)`` or ``(B, S, k)``.
    """
    h = _t(h)
    squeeze = h.ndim == 2
    if squeeze:
        h = tn.reshape(h, (1,) + h.shape)
    if intervention is not None and intervention.block != b:
        raise ContractError(f"intervention bound to block {intervention.block} applied in block {b}")
    pre = f"blocks.{b}."
    p = {n: _t(params[n]) for n in block_names(b)}
    z = mhsa(tn.layer_norm(h, p[pre + "ln1.gamma"], p[pre + "ln1.beta"]), p, pre + "attn.", heads)
    if intervention is not None:
        z = intervention(z)
    h1 = tn.add(h, z)
    m = tn.layer_norm(h1, p[pre + "ln2.gamma"], p[pre + "ln2.beta"])
    m = tn.linear(tn.gelu(tn.linear(m, p[pre + "mlp.w1"], p[pre + "mlp.b1"])), p[pre + "mlp.w2"], p[pre + "mlp.b2"])
    out = tn.add(h1, m)
    return tn.reshape(out, out.shape[1:]) if squeeze else out


def embed(x, params: Mapping, cfg: EncoderConfig) -> Tensor:
    x = np.asarray(x, dtype=np.int64)
    if x.ndim == 1:
        x = x[None]
    if x.shape[-1] + 1 != cfg.seq_len or params["embed.pos"].shape[0] != cfg.seq_len:
        raise DimensionError(
            f"input has {x.shape[-1]} patch tokens but positional embedding covers {np.shape(params['embed.pos'])[0]} positions (CLS included)")
    B = x.shape[0]
    tok = tn.embedding(_t(params["embed.token"]), x)
    cls = tn.broadcast_to(tn.reshape(_t(params["embed.cls"]), (1, 1, cfg.dim)), (B, 1, cfg.dim))
    return tn.add(tn.concat([cls, tok], axis=1), _t(params["embed.pos"]))


def _check_one_task(interventions) -> None:
    if interventions is None:
        return
    tasks = {m.task for m in interventions.modules()}
    if len(tasks) > 1:
        raise ContractError(f"interventions mix tasks {sorted(tasks)}")


def _run(x, cfg: EncoderConfig, block_params, emb_params, norm_params, interventions, apply_post: bool) -> Tensor:
    single = np.ndim(x) == 1
    h = embed(x, emb_params, cfg)
    for b in range(1, cfg.num_blocks + 1):
        iv = interventions.get(b) if interventions is not None else None
        h = block_forward(h, block_params(b), b, cfg.heads, iv)
    cls = tn.getitem(h, (slice(None), 0))
    rep = tn.layer_norm(cls, _t(norm_params["norm.gamma"]), _t(norm_params["norm.beta"]))
    post = getattr(interventions, "post", None) if apply_post else None
    if post is not None:
        rep = post(rep)
    return tn.reshape(rep, (cfg.dim,)) if single else rep


def encode(x, params: Mapping, cfg: EncoderConfig, interventions=None) -> Tensor:
    """Final (layer-normed) CLS representation; ``(k,)`` for one input, ``(B, k)`` for a batch."""
    _check_one_task(interventions)
    return _run(x, cfg, lambda b: params, params, params, interventions, True)


def head_logits(rep: Tensor, params: Mapping, cfg: EncoderConfig, t: int) -> Tensor:
    if not 0 <= t < cfg.num_tasks:
        raise ContractError(f"task {t} out of range for {cfg.num_tasks} heads")
    w, bias = head_names(t)
    return tn.linear(rep if rep.ndim == 2 else tn.reshape(rep, (1, -1)), _t(params[w]), _t(params[bias]))


def _decide(logits: Tensor) -> tuple[np.ndarray, np.ndarray]:
    probs = tn.softmax(Tensor(logits.data)).numpy()
    # argmax returns the first maximum: ties go to the lowest class index
    return np.argmax(logits.data, axis=-1), probs


def predict(x, params: Mapping, cfg: EncoderConfig, t: int, interventions=None):
    """Class indices and probability rows for task ``t``."""
    if not 0 <= t < cfg.num_tasks:
        raise ContractError(f"task {t} out of range for {cfg.num_tasks} heads")
    rep = encode(x, params, cfg, interventions)
    cls, probs = _decide(head_logits(rep, params, cfg, t))
    if np.ndim(x) == 1:
        return int(cls[0]), probs[0]
    return cls, probs


def stitch_forward(x, params_front: Mapping, params_back: Mapping, split: int, t: int,
                   cfg: EncoderConfig, front_interventions=None):
    """Blocks ``1..split`` from the front model, ``split+1..N`` from the back model.

    The embeddings travel with the first stage and the final norm (plus any
    post-encoder adapter) with the last stage, so ``split == 0`` is exactly the
    back model and ``split == N`` is exactly the front encoder; the head is
    always the back model's.
    """
    check_schema(params_front, params_back)
    N = cfg.num_blocks
    if not 0 <= split <= N:
        raise ContractError(f"split {split} outside 0..{N}")
    _check_one_task(front_interventions)
    emb = params_front if split >= 1 else params_back
    norm = params_front if split == N else params_back

    class _Front:
        post = getattr(front_interventions, "post", None)

        @staticmethod
        def get(b):
            if front_interventions is None or b > split:
                return None
            return front_interventions.get(b)

    rep = _run(x, cfg, lambda b: params_front if b <= split else params_back, emb, norm,
               _Front, split == N)
    cls, probs = _decide(head_logits(rep, params_back, cfg, t))
    if np.ndim(x) == 1:
        return int(cls[0]), probs[0]
    return cls, probs


def accuracy(x, y, params: Mapping, cfg: EncoderConfig, t: int, interventions=None,
             batch: int = 256) -> float:
    """Fraction of rows of ``x`` whose task-``t`` prediction equals ``y``."""
    y = np.asarray(y)
    if len(y) == 0:
        return float("nan")
    hits = 0
    for i in range(0, len(y), batch):
        pred, _ = predict(np.asarray(x[i:i + batch]), params, cfg, t, interventions)
        hits += int(np.sum(pred == y[i:i + batch]))
    return hits / len(y)
