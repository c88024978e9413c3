"""Stage-by-stage experiment pipeline.

Each stage reads its inputs from and writes its outputs to the experiment
directory, so stages compose across separate invocations::

    data/tasks.mlb                 gen
    models/pre.mlb, pretext.mlb    pretrain
    models/task{t}.mlb             finetune
    merged/{method}.mlb            merge
    interventions/{method}.mlb     intervene (+ trajectories/{method}.csv)
    metrics/{stage}.csv            every stage that measures something
    stitch.csv                     stitch
    metrics.csv, summary.csv, summary.md   report
"""

from __future__ import annotations

import csv
import io
import logging
import os
from typing import Iterable, Mapping, Sequence

import numpy as np

from .. import interventions as iv
from .. import merging as mg
from .. import taskgen as tg
from ..errors import StageError
from ..training import LearnableMerge, subset_data, train_adamerging, train_interventions
from ..transformer import ParamSet, layer_groups
from . import checkpoint as ckpt
from .config import STAGES, ExperimentConfig, load_config
from .evaluate import bias_metric, evaluate, stitch_probe

log = logging.getLogger(__name__)

CSV_COLUMNS = ("experiment_id", "stage", "task", "metric", "value", "seed")
TRAJECTORY_COLUMNS = ("iteration", "task", "loss", "accuracy")
METHOD_LABELS = {
    "average": "Weight Averaging",
    "task_arithmetic": "Task Arithmetic",
    "ties": "TIES-Merging",
    "adamerging_taskwise": "Task-wise AdaMerging",
    "adamerging_layerwise": "AdaMerging",
}


def _fmt(value) -> str:
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    return str(value)


def _write_csv(path: str, header: Sequence[str], rows: Iterable[Sequence]) -> None:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    for row in rows:
        writer.writerow([_fmt(v) for v in row])
    tmp = path + ".tmp"
    with open(tmp, "w", encoding="utf-8", newline="") as fh:
        fh.write(buf.getvalue())
    os.replace(tmp, path)


def _read_csv(path: str) -> list[dict[str, str]]:
    with open(path, encoding="utf-8", newline="") as fh:
        return list(csv.DictReader(fh))


class Experiment:
    """Artifact store plus the stage implementations for one config."""

    def __init__(self, config: ExperimentConfig):
        self.config = config
        self.root = config.out
        self.cfg = config.encoder
        self.groups = layer_groups(self.cfg)

    # ------------------------------------------------------------ paths

    def path(self, *parts: str) -> str:
        return os.path.join(self.root, *parts)

    def _need(self, *parts: str) -> str:
        p = self.path(*parts)
        if not os.path.exists(p):
            raise StageError(f"missing artifact {p}; run the stage that produces it first")
        return p

    def _save(self, arrays: Mapping, meta: Mapping | None, *parts: str) -> None:
        os.makedirs(os.path.dirname(self.path(*parts)), exist_ok=True)
        ckpt.save(self.path(*parts), arrays, meta)

    def _clear(self, folder: str) -> None:
        """Drop a stage's previous outputs so reruns never mix configs."""
        d = self.path(folder)
        if os.path.isdir(d):
            for name in os.listdir(d):
                os.remove(os.path.join(d, name))

    def _metrics(self, stage: str, rows: Iterable[tuple[object, str, object]]) -> None:
        os.makedirs(self.path("metrics"), exist_ok=True)
        cid, seed = self.config.experiment_id, self.config.seed
        _write_csv(self.path("metrics", f"{stage}.csv"), CSV_COLUMNS,
                   [(cid, stage, task, metric, value, seed) for task, metric, value in rows])

    # ------------------------------------------------------------ loaders

    def tasks(self) -> list[tg.SyntheticTask]:
        arrays, meta = ckpt.load(self._need("data", "tasks.mlb"))
        out = []
        for t, family in enumerate(meta["families"]):
            out.append(tg.SyntheticTask(t, family, meta["num_classes"], meta["seed"],
                                        arrays[f"task{t}.train_x"], arrays[f"task{t}.train_y"],
                                        arrays[f"task{t}.test_x"], arrays[f"task{t}.test_y"]))
        return out

    def theta_pre(self) -> ParamSet:
        return ParamSet(ckpt.load(self._need("models", "pre.mlb"))[0])

    def task_models(self) -> list[ParamSet]:
        return [ParamSet(ckpt.load(self._need("models", f"task{t}.mlb"))[0])
                for t in range(self.cfg.num_tasks)]

    def merged(self, method: str) -> tuple[ParamSet, dict]:
        arrays, meta = ckpt.load(self._need("merged", f"{method}.mlb"))
        return ParamSet(arrays), meta

    def interventions(self, method: str) -> tuple[dict, dict] | None:
        p = self.path("interventions", f"{method}.mlb")
        if not os.path.exists(p):
            return None
        return ckpt.load(p)

    def unlabeled(self, tasks: Sequence[tg.SyntheticTask]) -> dict[int, np.ndarray]:
        """The available fraction of every task's test inputs (labels never exposed)."""
        xs = [t.test_x for t in tasks]
        idx = subset_data(xs, self.config["data.fraction"], self.config.seed)
        return {t.task_id: t.test_x[i] for t, i in zip(tasks, idx)}

    # ------------------------------------------------------------ stages

    def gen(self) -> None:
        c = self.config
        tasks = tg.gen_tasks(c["tasks.count"], c.seed, c["tasks.n_train"], c["tasks.n_test"])
        arrays = {}
        for t in tasks:
            for split in ("train_x", "train_y", "test_x", "test_y"):
                arrays[f"task{t.task_id}.{split}"] = getattr(t, split)
        meta = {"families": [t.family for t in tasks], "num_classes": tg.NUM_CLASSES, "seed": c.seed}
        self._save(arrays, meta, "data", "tasks.mlb")

    def pretrain(self) -> None:
        tasks = self.tasks()
        pre, head, losses = tg.pretrain(self.cfg, tasks, self.config.fit("pretrain"))
        self._save(pre, {"losses": [losses[0], losses[-1]]}, "models", "pre.mlb")
        self._save(head, None, "models", "pretext.mlb")
        x = np.concatenate([t.test_x for t in tasks])
        self._metrics("pretrain", [("all", "pretext_accuracy", tg.pretext_accuracy(pre, head, self.cfg, x)),
                                   ("all", "pretext_loss_initial", losses[0]),
                                   ("all", "pretext_loss_final", losses[-1])])

    def finetune(self) -> None:
        tasks = self.tasks()
        pre = self.theta_pre()
        fit = self.config.fit("finetune")
        rows = []
        for task in tasks:
            model, losses = tg.finetune(pre, task, self.cfg, fit)
            self._save(model, None, "models", f"task{task.task_id}.mlb")
            rows.append((task.task_id, "finetune_loss_final", losses[-1]))
        self._metrics("finetune", rows)

    def merge(self) -> None:
        pre = self.theta_pre()
        models = self.task_models()
        tasks = None
        degenerate = all(all(np.array_equal(m[k], models[0][k]) for k in models[0]) for m in models[1:])
        rows = [("all", "degenerate_identical_models", int(degenerate))]
        self._clear("merged")
        self._clear("interventions")
        for method in self.config.methods:
            plan = self.config.plan(method)
            if method.startswith("adamerging"):
                tasks = tasks or self.tasks()
                res = train_adamerging(pre, models, self.unlabeled(tasks), self.cfg,
                                       self.config.adamerging_train, method == "adamerging_layerwise",
                                       self.groups, plan.lam)
                plan = mg.MergePlan(method, res.lambdas.tolist(), plan.ties_trim_fraction)
                rows.append(("all", f"entropy_initial/{method}", res.losses[0]))
                rows.append(("all", f"entropy_final/{method}", res.losses[-1]))
            merged = mg.merge(plan, pre, models, self.groups)
            same = all(np.array_equal(merged[k], models[0][k]) for k in merged if not k.startswith("heads."))
            rows.append(("all", f"merged_equals_inputs/{method}", int(degenerate and same)))
            self._save(merged, {"plan": plan.to_dict(), "degenerate": degenerate}, "merged", f"{method}.mlb")
        self._metrics("merge", rows)

    def intervene(self) -> None:
        c = self.config
        tasks = self.tasks()
        models = self.task_models()
        data = self.unlabeled(tasks)
        spec, train = c.spec, c.train
        os.makedirs(self.path("trajectories"), exist_ok=True)
        self._clear("interventions")
        self._clear("trajectories")
        rows = []
        for method in c.intervene_methods:
            merged, meta = self.merged(method)
            learnable = None
            if train.learn_lambdas:
                plan = mg.MergePlan(**meta["plan"])
                learnable = LearnableMerge(plan, self.theta_pre(), models, self.groups)
            joint = self.path("merged", f"{method}+joint.mlb")
            if os.path.exists(joint):
                os.remove(joint)
            res = train_interventions(merged, models, spec, self.cfg, train, data, learnable)
            out_meta = {"spec": spec.to_dict(), "method": method, "losses": res.losses}
            if res.lambdas is not None:
                out_meta["lambdas"] = np.asarray(res.lambdas).tolist()
                plan = learnable.plan_with(res.lambdas)
                merged = mg.merge(plan, self.theta_pre(), models, self.groups)
                self._save(merged, {**meta, "plan": plan.to_dict(), "joint": True},
                           "merged", f"{method}+joint.mlb")
            self._save(res.params, out_meta, "interventions", f"{method}.mlb")
            accs = evaluate(merged, tasks, self.cfg, spec, res.params).per_task
            traj = [(i, "all", loss, "") for i, loss in enumerate(res.losses)]
            traj += [(len(res.losses) - 1, t, "", a) for t, a in enumerate(accs)]
            _write_csv(self.path("trajectories", f"{method}.csv"), TRAJECTORY_COLUMNS, traj)
            rows += [("all", f"distill_loss_initial/{method}", res.losses[0]),
                     ("all", f"distill_loss_final/{method}", res.losses[-1]),
                     ("all", f"ortho_error/{method}", iv.max_ortho_error(res.params))]
        self._metrics("intervene", rows)

    def _intervened_base(self, method: str) -> ParamSet:
        joint = self.path("merged", f"{method}+joint.mlb")
        if os.path.exists(joint):
            return ParamSet(ckpt.load(joint)[0])
        return self.merged(method)[0]

    def eval(self) -> None:
        c = self.config
        tasks = self.tasks()
        models = self.task_models()
        pre = self.theta_pre()
        data = self.unlabeled(tasks)
        rows = []

        def table_row(label: str, result) -> None:
            rows.extend((t, f"acc/{label}", a) for t, a in enumerate(result.per_task))
            rows.append(("avg", f"acc/{label}", result.average))
            rows.append(("all", f"extra_params/{label}", result.extra_params))

        table_row("Pre-trained", evaluate(mg.attach_heads(pre, models), tasks, self.cfg))
        table_row("Individual", evaluate(models, tasks, self.cfg))
        for method in c.methods:
            merged, _ = self.merged(method)
            table_row(METHOD_LABELS[method], evaluate(merged, tasks, self.cfg))
            before = bias_metric(merged, models, data, self.cfg)
            rows.extend((t, f"bias_pre/{METHOD_LABELS[method]}", v) for t, v in before.items())
            stored = self.interventions(method)
            if stored is None:
                continue
            iparams, meta = stored
            spec = iv.InterventionSpec(**meta["spec"])
            base = self._intervened_base(method)
            label = f"{METHOD_LABELS[method]} w/ {spec.pattern} r{spec.rank}"
            table_row(label, evaluate(base, tasks, self.cfg, spec, iparams))
            after = bias_metric(base, models, data, self.cfg, spec, iparams)
            rows.extend((t, f"bias_post/{METHOD_LABELS[method]}", v) for t, v in after.items())
        self._metrics("eval", rows)

    def stitch(self) -> None:
        method = self.config["stitch.method"]
        tasks = self.tasks()
        models = self.task_models()
        merged, _ = self.merged(method)
        variants = [("merged", merged, None, None)]
        stored = self.interventions(method)
        if stored is not None:
            iparams, meta = stored
            variants.append(("intervened", self._intervened_base(method),
                             iv.InterventionSpec(**meta["spec"]), iparams))
        out = []
        for name, base, spec, iparams in variants:
            profiles = [stitch_probe(base, models, task, self.cfg, spec, iparams) for task in tasks]
            for task, prof in zip(tasks, profiles):
                out += [(method, name, task.task_id, b, acc) for b, acc in prof]
            for b in range(self.cfg.num_blocks + 1):
                out.append((method, name, "avg", b, float(np.mean([p[b][1] for p in profiles]))))
        _write_csv(self.path("stitch.csv"), ("method", "variant", "task", "b", "accuracy"), out)

    def report(self) -> None:
        rows = []
        for stage in STAGES:
            p = self.path("metrics", f"{stage}.csv")
            if os.path.exists(p):
                rows += [[r[c] for c in CSV_COLUMNS] for r in _read_csv(p)]
        os.makedirs(self.root, exist_ok=True)
        _write_csv(self.path("metrics.csv"), CSV_COLUMNS, rows)
        write_summary(self, rows)

    def run(self, stages: Sequence[str] | None = None) -> None:
        stages = tuple(s for s in STAGES if s in (stages or self.config.stages))
        os.makedirs(self.root, exist_ok=True)
        with open(self.path("config.resolved"), "w", encoding="utf-8") as fh:
            fh.write(self.config.to_text())
        for stage in stages:
            log.info("stage %s -> %s", stage, self.root)
            getattr(self, stage)()
        if "report" not in stages:
            self.report()


def write_summary(exp: Experiment, rows: Sequence[Sequence[str]]) -> None:
    """Table-shaped accuracy grid (rows: Pre-trained, Individual, merges, merges w/ interventions)."""
    families = []
    tasks_file = exp.path("data", "tasks.mlb")
    if os.path.exists(tasks_file):
        families = ckpt.load(tasks_file)[1]["families"]
    acc: dict[str, dict[str, str]] = {}
    extra: dict[str, str] = {}
    flags = []
    for _, stage, task, metric, value, _ in rows:
        if metric.startswith("acc/"):
            acc.setdefault(metric[4:], {})[task] = value
        elif metric.startswith("extra_params/"):
            extra[metric[len("extra_params/"):]] = value
        elif metric == "degenerate_identical_models" and value == "1":
            flags.append("DEGENERATE: all task models are identical, so every merge reproduces them "
                         "and representation bias is zero.")
    T = exp.cfg.num_tasks
    header = ["Method"] + [families[t] if t < len(families) else f"task{t}" for t in range(T)] + ["Avg", "Extra params"]
    grid = []
    for label, per in acc.items():
        cells = [per.get(str(t), "") for t in range(T)] + [per.get("avg", "")]
        grid.append([label] + [f"{100 * float(v):.1f}" if v else "" for v in cells] + [extra.get(label, "0")])
    _write_csv(exp.path("summary.csv"), header, grid)
    lines = [f"# Experiment {exp.config.experiment_id} (seed {exp.config.seed})", ""]
    lines += flags + ([""] if flags else [])
    lines.append("| " + " | ".join(header) + " |")
    lines.append("|" + "---|" * len(header))
    lines += ["| " + " | ".join(r) + " |" for r in grid]
    with open(exp.path("summary.md"), "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


def run_experiment(config: ExperimentConfig | str | os.PathLike, stages: Sequence[str] | None = None) -> str:
    """Run the requested stages (default: the config's) and return the output directory."""
    if not isinstance(config, ExperimentConfig):
        config = load_config(config)
    exp = Experiment(config)
    exp.run(stages)
    return exp.root
