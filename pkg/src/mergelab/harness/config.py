"""Line-oriented ``key = value`` experiment configs with dotted section paths.

Blank lines and ``#`` comments are ignored. Lists are comma separated.
Every problem found is reported at once, each prefixed with its key path.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass
from typing import Callable, Mapping

from .. import interventions as iv
from .. import merging as mg
from ..errors import ConfigError
from ..taskgen import FAMILIES, FitConfig, encoder_config
from ..training import TrainConfig
from ..transformer import EncoderConfig

CONFIG_VERSION = 1
STAGES = ("gen", "pretrain", "finetune", "merge", "intervene", "eval", "stitch", "report")


def _int(s: str) -> int:
    return int(s)


def _float(s: str) -> float:
    v = float(s)
    if not math.isfinite(v):
        raise ValueError("must be finite")
    return v


def _bool(s: str) -> bool:
    low = s.lower()
    if low in ("true", "yes", "1", "on"):
        return True
    if low in ("false", "no", "0", "off"):
        return False
    raise ValueError(f"expected a boolean, got {s!r}")


def _list(s: str) -> tuple[str, ...]:
    return tuple(p.strip() for p in s.split(",") if p.strip())


def _blocks(s: str):
    if s.lower() == "all":
        return None
    return tuple(int(p) for p in _list(s))


def _shift(s: str):
    return None if s.lower() == "auto" else int(s)


def _slice(s: str):
    if s.lower() in ("none", "full"):
        return None
    j, _, p = s.partition(":")
    return int(j), int(p)


# key -> (parser, default)
SCHEMA: dict[str, tuple[Callable[[str], object], object]] = {
    "version": (_int, None),
    "experiment.id": (str, "desk"),
    "experiment.seed": (_int, 0),
    "experiment.out": (str, "runs/desk"),
    "experiment.stages": (_list, STAGES),
    "tasks.count": (_int, 4),
    "tasks.n_train": (_int, 512),
    "tasks.n_test": (_int, 256),
    "encoder.num_blocks": (_int, 4),
    "encoder.dim": (_int, 32),
    "encoder.heads": (_int, 4),
    "encoder.mlp_ratio": (_float, 4.0),
    "pretrain.steps": (_int, 400),
    "pretrain.batch_size": (_int, 32),
    "pretrain.learning_rate": (_float, 3e-3),
    "finetune.steps": (_int, 300),
    "finetune.batch_size": (_int, 32),
    "finetune.learning_rate": (_float, 3e-3),
    "merge.methods": (_list, mg.METHODS),
    "merge.task_arithmetic.lambda": (_float, mg.DEFAULT_LAMBDA["task_arithmetic"]),
    "merge.ties.lambda": (_float, mg.DEFAULT_LAMBDA["ties"]),
    "merge.ties.trim_fraction": (_float, 0.2),
    "merge.adamerging.init": (_float, 0.3),
    "merge.adamerging.iterations": (_int, 100),
    "merge.adamerging.batch_size": (_int, 16),
    "merge.adamerging.learning_rate": (_float, 1e-2),
    "intervention.pattern": (str, "P4"),
    "intervention.rank": (_int, 1),
    "intervention.tokens": (str, "cls"),
    "intervention.blocks": (_blocks, None),
    "intervention.slice": (_slice, None),
    "intervention.shift_per_block": (_shift, None),
    "intervention.merges": (_list, ("all",)),
    "train.iterations": (_int, 500),
    "train.batch_size": (_int, 16),
    "train.learning_rate": (_float, 2e-2),
    "train.beta1": (_float, 0.9),
    "train.beta2": (_float, 0.999),
    "train.eps": (_float, 1e-8),
    "train.learn_lambdas": (_bool, False),
    "train.distill_target": (str, "features"),
    "data.fraction": (_float, 1.0),
    "stitch.method": (str, "task_arithmetic"),
}


def parse_text(text: str) -> tuple[dict[str, str], list[tuple[str, str]]]:
    """Raw ``key -> value`` strings plus syntax problems (unknown keys, duplicates, bad lines)."""
    raw: dict[str, str] = {}
    problems = []
    for no, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if not sep or not key:
            problems.append((f"line {no}", "expected 'key = value'"))
        elif key not in SCHEMA:
            problems.append((key, "unknown key"))
        elif key in raw:
            problems.append((key, f"duplicate key (line {no})"))
        else:
            raw[key] = value
    return raw, problems


@dataclass(frozen=True)
class ExperimentConfig:
    values: Mapping[str, object]

    def __getitem__(self, key: str):
        return self.values[key]

    @property
    def seed(self) -> int:
        return self.values["experiment.seed"]

    @property
    def out(self) -> str:
        return self.values["experiment.out"]

    @property
    def experiment_id(self) -> str:
        return self.values["experiment.id"]

    @property
    def stages(self) -> tuple[str, ...]:
        return tuple(s for s in STAGES if s in self.values["experiment.stages"])

    @property
    def encoder(self) -> EncoderConfig:
        v = self.values
        return encoder_config(v["tasks.count"], num_blocks=v["encoder.num_blocks"], dim=v["encoder.dim"],
                              heads=v["encoder.heads"], mlp_ratio=v["encoder.mlp_ratio"])

    def fit(self, stage: str) -> FitConfig:
        v = self.values
        return FitConfig(v[f"{stage}.steps"], v[f"{stage}.batch_size"], v[f"{stage}.learning_rate"], self.seed)

    @property
    def methods(self) -> tuple[str, ...]:
        return tuple(m for m in mg.METHODS if m in self.values["merge.methods"])

    @property
    def intervene_methods(self) -> tuple[str, ...]:
        chosen = self.values["intervention.merges"]
        if "all" in chosen:
            return self.methods
        return tuple(m for m in self.methods if m in chosen)

    def plan(self, method: str) -> mg.MergePlan:
        v = self.values
        lam = {"task_arithmetic": v["merge.task_arithmetic.lambda"], "ties": v["merge.ties.lambda"]}.get(
            method, v["merge.adamerging.init"] if method.startswith("adamerging") else None)
        return mg.MergePlan(method, lam, v["merge.ties.trim_fraction"])

    @property
    def spec(self) -> iv.InterventionSpec:
        v = self.values
        return iv.InterventionSpec(v["intervention.pattern"], v["intervention.rank"], v["intervention.slice"],
                                   v["intervention.shift_per_block"], v["intervention.tokens"],
                                   v["intervention.blocks"])

    @property
    def train(self) -> TrainConfig:
        v = self.values
        return TrainConfig(v["train.iterations"], v["train.batch_size"], v["train.learning_rate"],
                           v["train.beta1"], v["train.beta2"], v["train.eps"], v["train.learn_lambdas"],
                           self.seed, v["train.distill_target"])

    @property
    def adamerging_train(self) -> TrainConfig:
        v = self.values
        return TrainConfig(v["merge.adamerging.iterations"], v["merge.adamerging.batch_size"],
                           v["merge.adamerging.learning_rate"], seed=self.seed)

    def with_overrides(self, **values) -> "ExperimentConfig":
        merged = dict(self.values)
        merged.update({k.replace("__", "."): v for k, v in values.items()})
        return validate(merged)

    def to_text(self) -> str:
        """Canonical text form; parsing it yields an equal config."""
        lines = []
        for key in SCHEMA:
            lines.append(f"{key} = {_format(key, self.values[key])}")
        return "\n".join(lines) + "\n"


def _format(key: str, value) -> str:
    if key == "intervention.blocks":
        return "all" if value is None else ",".join(map(str, value))
    if key == "intervention.shift_per_block":
        return "auto" if value is None else str(value)
    if key == "intervention.slice":
        return "none" if value is None else f"{value[0]}:{value[1]}"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _range_problems(v: Mapping[str, object]) -> list[tuple[str, str]]:
    out = []

    def need(key, ok, msg):
        if not ok:
            out.append((key, msg))

    need("version", v["version"] == CONFIG_VERSION, f"must be {CONFIG_VERSION}")
    need("experiment.id", bool(v["experiment.id"]) and "," not in v["experiment.id"],
         "must be non-empty without commas")
    need("experiment.seed", v["experiment.seed"] >= 0, "must be >= 0")
    need("experiment.out", bool(v["experiment.out"]), "must be non-empty")
    bad = [s for s in v["experiment.stages"] if s not in STAGES]
    need("experiment.stages", not bad and v["experiment.stages"], f"stages must come from {', '.join(STAGES)}")
    need("tasks.count", 2 <= v["tasks.count"] <= len(FAMILIES), f"must lie in 2..{len(FAMILIES)}")
    for key in ("tasks.n_train", "tasks.n_test"):
        need(key, v[key] >= 4, "must be >= 4 (one sample per class)")
    need("encoder.num_blocks", v["encoder.num_blocks"] >= 1, "must be >= 1")
    need("encoder.dim", v["encoder.dim"] >= 1, "must be >= 1")
    need("encoder.heads", v["encoder.heads"] >= 1 and v["encoder.dim"] % max(v["encoder.heads"], 1) == 0,
         "must be >= 1 and divide encoder.dim")
    need("encoder.mlp_ratio", v["encoder.mlp_ratio"] > 0, "must be > 0")
    for stage in ("pretrain", "finetune"):
        need(f"{stage}.steps", v[f"{stage}.steps"] >= 1, "must be >= 1")
        need(f"{stage}.batch_size", v[f"{stage}.batch_size"] >= 1, "must be >= 1")
        need(f"{stage}.learning_rate", v[f"{stage}.learning_rate"] > 0, "must be > 0")
    bad = [m for m in v["merge.methods"] if m not in mg.METHODS]
    need("merge.methods", not bad and v["merge.methods"], f"methods must come from {', '.join(mg.METHODS)}")
    need("merge.ties.trim_fraction", 0 < v["merge.ties.trim_fraction"] <= 1, "must lie in (0, 1]")
    need("merge.adamerging.iterations", v["merge.adamerging.iterations"] >= 1, "must be >= 1")
    need("merge.adamerging.batch_size", v["merge.adamerging.batch_size"] >= 1, "must be >= 1")
    need("merge.adamerging.learning_rate", v["merge.adamerging.learning_rate"] > 0, "must be > 0")
    chosen = v["intervention.merges"]
    bad = [m for m in chosen if m != "all" and (m not in v["merge.methods"] or m not in mg.METHODS)]
    need("intervention.merges", not bad and chosen, "must be 'all' or a subset of merge.methods")
    if v["train.learn_lambdas"]:
        need("train.learn_lambdas", "average" not in (v["merge.methods"] if "all" in chosen else chosen),
             "weight averaging has no coefficients to learn")
    k, N = v["encoder.dim"], v["encoder.num_blocks"]
    spec = iv.InterventionSpec(v["intervention.pattern"], v["intervention.rank"], v["intervention.slice"],
                               v["intervention.shift_per_block"], v["intervention.tokens"],
                               v["intervention.blocks"])
    out += [(f"intervention.{field}", msg) for field, msg in spec.problems(k, N)]
    train = TrainConfig(v["train.iterations"], v["train.batch_size"], v["train.learning_rate"],
                        v["train.beta1"], v["train.beta2"], v["train.eps"], v["train.learn_lambdas"],
                        0, v["train.distill_target"])
    for field, msg in train.problems():
        out.append((f"train.{field}", msg))
    need("train.learning_rate", v["train.learning_rate"] > 0, "must be > 0")
    need("data.fraction", 0 < v["data.fraction"] <= 1, "must lie in (0, 1]")
    need("stitch.method", v["stitch.method"] in v["merge.methods"] and v["stitch.method"] in mg.METHODS,
         "must be one of merge.methods")
    return out


def validate(values: Mapping[str, object]) -> ExperimentConfig:
    """Range-check typed ``values`` (missing keys take defaults; ``version`` is required)."""
    full = {}
    problems = []
    for key, (_, default) in SCHEMA.items():
        if key in values:
            full[key] = values[key]
        elif key == "version":
            problems.append(("version", "required field missing"))
        else:
            full[key] = default
    unknown = sorted(set(values) - set(SCHEMA))
    problems += [(k, "unknown key") for k in unknown]
    if problems:
        raise ConfigError(problems)
    try:
        problems = _range_problems(full)
    except (TypeError, ValueError) as exc:
        raise ConfigError([("config", str(exc))]) from None
    if problems:
        raise ConfigError(problems)
    return ExperimentConfig(full)


def parse_config(text: str, overrides: Mapping[str, str] | None = None) -> ExperimentConfig:
    """Parse and validate config text; ``overrides`` are raw strings applied after parsing."""
    raw, problems = parse_text(text)
    for key, value in (overrides or {}).items():
        if key not in SCHEMA:
            problems.append((key, "unknown key"))
        else:
            raw[key] = value
    typed = {}
    for key, value in raw.items():
        parser = SCHEMA[key][0]
        try:
            typed[key] = parser(value)
        except (TypeError, ValueError) as exc:
            problems.append((key, f"cannot parse {value!r}: {exc}"))
    if problems:
        # still surface missing-version and range problems for the keys that parsed
        try:
            validate({k: v for k, v in typed.items()})
        except ConfigError as exc:
            problems += [p for p in exc.problems if p[0] not in {q[0] for q in problems}]
        raise ConfigError(problems)
    return validate(typed)


def load_config(path: str | os.PathLike, overrides: Mapping[str, str] | None = None) -> ExperimentConfig:
    with open(path, encoding="utf-8") as fh:
        return parse_config(fh.read(), overrides)


def default_config(**values) -> ExperimentConfig:
    """Desk defaults with typed overrides (``experiment__seed=1`` style or dotted dict keys)."""
    base = {"version": CONFIG_VERSION}
    base.update({k.replace("__", "."): v for k, v in values.items()})
    return validate(base)
