from __future__ import annotations

import os
import struct
import zlib

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import array_shapes, arrays

from mergelab import interventions as iv
from mergelab.errors import ChecksumError, ConfigError, ContractError, StageError
from mergelab.harness import (Experiment, bias_metric, default_config, evaluate, load_config, parse_config,
                              run_experiment, stitch_probe)
from mergelab.harness import checkpoint as ckpt
from mergelab.harness.cli import main, params_table
from mergelab.harness.config import SCHEMA
from mergelab.training import distill_loss, teacher_outputs

from conftest import perturbed, small_config, small_model

TINY = """\
version = 1
experiment.id = tiny
tasks.n_train = 48
tasks.n_test = 24
encoder.num_blocks = 2
encoder.dim = 8
encoder.heads = 2
pretrain.steps = 6
finetune.steps = 6
merge.adamerging.iterations = 3
train.iterations = 4
"""


def tiny_config(out, extra: str = "") -> "ExperimentConfig":
    return parse_config(TINY + f"experiment.out = {out}\n" + extra)


# ------------------------------------------------------------ checkpoint


def test_checkpoint_layout_is_exact():
    blob = ckpt.dumps({"a": np.array([1.5, -2.0])})
    manifest = struct.pack("<H", 1) + b"a" + struct.pack("<BB", 0, 1) + struct.pack("<Q", 2) + struct.pack("<QQ", 0, 16)
    body = b"MLB1" + struct.pack("<II", 1, 1) + manifest + np.array([1.5, -2.0], dtype="<f8").tobytes()
    assert blob == body + struct.pack("<I", zlib.crc32(body))


_dtypes = st.sampled_from([np.float64, np.float32, np.int64, np.int32, np.uint8, np.bool_])


@settings(max_examples=60, deadline=None)
@given(st.dictionaries(st.text("abcdefghij.", min_size=1, max_size=12),
                       _dtypes.flatmap(lambda dt: arrays(dt, array_shapes(min_dims=0, max_dims=3, min_side=0, max_side=4))),
                       max_size=4))
def test_checkpoint_round_trip_is_bit_exact(arrays_):
    back, meta = ckpt.loads(ckpt.dumps(arrays_))
    assert meta is None and set(back) == set(arrays_)
    for k, v in arrays_.items():
        assert back[k].dtype == v.dtype and back[k].shape == v.shape
        assert back[k].tobytes() == np.ascontiguousarray(v).tobytes()


def test_every_single_flipped_byte_is_detected():
    blob = ckpt.dumps({"w": np.arange(6.0).reshape(2, 3), "i": np.arange(3)}, {"note": "x"})
    for pos in range(len(blob)):
        for bit in (0x01, 0x80, 0xFF):
            bad = bytearray(blob)
            bad[pos] ^= bit
            with pytest.raises(ChecksumError):
                ckpt.loads(bytes(bad))


def test_checkpoint_rejects_unsupported_dtype_and_reserved_name():
    with pytest.raises(ContractError):
        ckpt.dumps({"c": np.zeros(2, dtype=np.complex128)})
    with pytest.raises(ContractError):
        ckpt.dumps({ckpt.META_KEY: np.zeros(1)})


def test_checkpoint_file_round_trip(tmp_path):
    model = small_model(small_config())
    ckpt.save(tmp_path / "m.mlb", model, {"k": [1, 2]})
    back, meta = ckpt.load(tmp_path / "m.mlb")
    assert meta == {"k": [1, 2]}
    assert all(back[k].tobytes() == model[k].tobytes() for k in model)


# ------------------------------------------------------------ config


def test_config_defaults_and_text_round_trip():
    cfg = parse_config("version = 1\n# comment\nintervention.slice = 0:8  # trailing\nintervention.pattern = P1\n")
    assert cfg["intervention.slice"] == (0, 8) and cfg.spec.pattern == "P1"
    assert cfg.train.learning_rate == 2e-2 and cfg.seed == 0
    assert parse_config(cfg.to_text()).values == cfg.values


def test_config_requires_version_and_known_keys():
    with pytest.raises(ConfigError) as exc:
        parse_config("experiment.seed = 1\nbogus.key = 3\nnot a line\n")
    paths = {p for p, _ in exc.value.problems}
    assert {"version", "bogus.key", "line 3"} <= paths


def test_config_reports_every_problem_with_its_path():
    text = "version = 2\ntasks.count = 1\ntrain.learning_rate = -1\nintervention.slice = 4:99\ndata.fraction = 0\n"
    with pytest.raises(ConfigError) as exc:
        parse_config(text)
    paths = {p for p, _ in exc.value.problems}
    assert {"version", "tasks.count", "train.learning_rate", "intervention.slice", "data.fraction"} <= paths
    assert "intervention.slice:" in str(exc.value)


def test_config_rejects_unparsable_values():
    with pytest.raises(ConfigError) as exc:
        parse_config("version = 1\nexperiment.seed = many\ntrain.learn_lambdas = maybe\n")
    assert {p for p, _ in exc.value.problems} == {"experiment.seed", "train.learn_lambdas"}


BAD_VALUES = {
    "experiment.seed": "-1", "experiment.stages": "gen,bake", "tasks.count": "9", "tasks.n_train": "2",
    "tasks.n_test": "0", "encoder.num_blocks": "0", "encoder.dim": "0", "encoder.heads": "0",
    "encoder.mlp_ratio": "0", "pretrain.steps": "0", "pretrain.batch_size": "0", "pretrain.learning_rate": "0",
    "finetune.steps": "0", "finetune.batch_size": "0", "finetune.learning_rate": "-1",
    "merge.methods": "average,magic", "merge.ties.trim_fraction": "1.5", "merge.adamerging.iterations": "0",
    "merge.adamerging.batch_size": "0", "merge.adamerging.learning_rate": "0", "intervention.pattern": "P7",
    "intervention.rank": "0", "intervention.tokens": "some", "intervention.blocks": "0,5",
    "intervention.slice": "5:2", "intervention.shift_per_block": "-2", "intervention.merges": "magic",
    "train.iterations": "0", "train.batch_size": "0", "train.learning_rate": "0", "train.beta1": "1.0",
    "train.beta2": "-0.5", "train.eps": "0", "train.distill_target": "pixels", "data.fraction": "1.5",
    "stitch.method": "magic", "version": "0", "experiment.id": "a,b", "experiment.out": "",
}


@settings(max_examples=80, deadline=None)
@given(st.sets(st.sampled_from(sorted(BAD_VALUES)), min_size=1, max_size=4))
def test_mutated_configs_are_rejected_with_their_paths(keys):
    overrides = {k: BAD_VALUES[k] for k in keys}
    with pytest.raises(ConfigError) as exc:
        parse_config("version = 1\n", overrides)
    paths = {p for p, _ in exc.value.problems}
    assert set(keys) <= paths


def test_every_schema_key_has_a_bad_value():
    assert set(BAD_VALUES) == set(SCHEMA) - {"merge.task_arithmetic.lambda", "merge.ties.lambda",
                                             "merge.adamerging.init", "train.learn_lambdas"}


def test_load_config_from_file(tmp_path):
    p = tmp_path / "c.cfg"
    p.write_text("version = 1\nexperiment.seed = 7\n")
    assert load_config(p, {"experiment.out": "x"}).seed == 7


# ------------------------------------------------------------ stages


def test_missing_dependency_is_a_stage_error(tmp_path):
    with pytest.raises(StageError):
        run_experiment(tiny_config(tmp_path), ["merge"])


def test_identical_models_are_flagged_degenerate(tmp_path):
    config = tiny_config(tmp_path, "experiment.stages = merge\nmerge.methods = average,task_arithmetic,ties\n"
                                   "stitch.method = average\n")
    exp = Experiment(config)
    model = perturbed(small_model(exp.cfg), 1)
    os.makedirs(exp.path("models"))
    ckpt.save(exp.path("models", "pre.mlb"), model)
    for t in range(exp.cfg.num_tasks):
        ckpt.save(exp.path("models", f"task{t}.mlb"), model)
    exp.run()
    for method in ("average", "task_arithmetic", "ties"):
        merged, meta = exp.merged(method)
        assert meta["degenerate"]
        assert all(np.array_equal(merged[k], model[k]) for k in model if not k.startswith("heads."))
    rows = open(exp.path("metrics.csv")).read()
    assert ",merged_equals_inputs/ties,1," in rows
    assert "DEGENERATE" in open(exp.path("summary.md")).read()


def test_tiny_pipeline_is_idempotent(tmp_path, monkeypatch):
    a = run_experiment(tiny_config(tmp_path / "a"))
    first = open(os.path.join(a, "metrics.csv"), "rb").read()
    run_experiment(tiny_config(tmp_path / "a"))
    assert open(os.path.join(a, "metrics.csv"), "rb").read() == first
    monkeypatch.setenv("MERGELAB_THREADS", "3")
    b = run_experiment(tiny_config(tmp_path / "b"))
    assert open(os.path.join(b, "metrics.csv"), "rb").read() == first
    header = first.decode().splitlines()[0]
    assert header == "experiment_id,stage,task,metric,value,seed"


def test_stages_compose_across_invocations(tmp_path):
    one = run_experiment(tiny_config(tmp_path / "one"))
    for stage in ("gen", "pretrain", "finetune", "merge", "intervene", "eval", "stitch", "report"):
        run_experiment(tiny_config(tmp_path / "split"), [stage])
    for name in ("metrics.csv", "stitch.csv", "summary.csv"):
        assert open(os.path.join(one, name), "rb").read() == open(tmp_path / "split" / name, "rb").read()


def test_summary_has_table_rows(tmp_path):
    out = run_experiment(tiny_config(tmp_path, "merge.methods = task_arithmetic,ties\n"))
    text = open(os.path.join(out, "summary.md")).read()
    for row in ("Pre-trained", "Individual", "Task Arithmetic", "TIES-Merging",
                "Task Arithmetic w/ P4 r1", "TIES-Merging w/ P4 r1"):
        assert f"| {row} |" in text


def test_joint_lambda_pipeline(tmp_path):
    exp = Experiment(tiny_config(tmp_path, "merge.methods = task_arithmetic\ntrain.learn_lambdas = true\n"))
    exp.run()
    assert os.path.exists(exp.path("merged", "task_arithmetic+joint.mlb"))
    _, meta = exp.interventions("task_arithmetic")
    assert meta["lambdas"] != 0.4


# ------------------------------------------------------------ evaluation


def test_extra_params_equal_enumerated_scalars(tmp_path):
    exp = Experiment(tiny_config(tmp_path, "merge.methods = task_arithmetic\n"))
    exp.run()
    iparams, meta = exp.interventions("task_arithmetic")
    spec = iv.InterventionSpec(**meta["spec"])
    result = evaluate(exp.merged("task_arithmetic")[0], exp.tasks(), exp.cfg, spec, iparams)
    assert result.extra_params == sum(v.size for v in iparams.values())
    assert result.average == pytest.approx(np.mean(result.per_task), abs=0)


def test_bias_metric_identities(rng):
    cfg = small_config()
    models = [small_model(cfg, 1), small_model(cfg, 2)]
    data = {t: rng.integers(0, 16, size=(8, cfg.seq_len - 1)) for t in range(2)}
    own = bias_metric(models[0], [models[0], models[0]], data, cfg)
    assert own == {0: 0.0, 1: 0.0}
    gap = bias_metric(models[0], models, data, cfg)
    targets = teacher_outputs(models, data, cfg)
    for t in range(2):
        ref = distill_loss(models[0], cfg, {t: data[t]}, {t: targets[t]}).item()
        assert abs(gap[t] - ref) < 1e-12
    joint = distill_loss(models[0], cfg, data, targets).item()
    assert abs(np.mean(list(gap.values())) - joint) < 1e-12


def test_stitch_profile_shape(tmp_path):
    exp = Experiment(tiny_config(tmp_path, "merge.methods = task_arithmetic\n"))
    exp.run()
    task = exp.tasks()[0]
    prof = stitch_probe(exp.merged("task_arithmetic")[0], exp.task_models(), task, exp.cfg)
    assert [b for b, _ in prof] == list(range(exp.cfg.num_blocks + 1))
    rows = open(exp.path("stitch.csv")).read().splitlines()
    assert rows[0] == "method,variant,task,b,accuracy"
    assert any(",intervened,avg," in r for r in rows)


# ------------------------------------------------------------ CLI


def test_params_table_and_cli(capsys):
    table = dict(params_table())
    assert table["P4 r=1, all 12 blocks"] == 147_552
    assert table["P4 r=1, last block"] == 12_296
    assert main(["params"]) == 0
    assert "147,552" in capsys.readouterr().out


def test_cli_runs_a_stage_and_reports_errors(tmp_path, capsys):
    cfg = tmp_path / "c.cfg"
    cfg.write_text(TINY)
    assert main(["gen", "--config", str(cfg), "--out", str(tmp_path / "o"), "--seed", "3"]) == 0
    assert os.path.exists(tmp_path / "o" / "data" / "tasks.mlb")
    assert "experiment.seed = 3" in open(tmp_path / "o" / "config.resolved").read()
    assert main(["merge", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 1
    assert "missing artifact" in capsys.readouterr().err
    bad = tmp_path / "bad.cfg"
    bad.write_text("version = 1\ntasks.count = 99\n")
    assert main(["run", "--config", str(bad)]) == 1
    assert "tasks.count" in capsys.readouterr().err
    assert main(["run", "--config", str(cfg), "--stage", "gen,bake"]) == 2


# ------------------------------------------------------------ desk measurements


def _desk_metrics(exp):
    import csv
    with open(exp.path("metrics.csv"), newline="") as fh:
        return {(r["task"], r["metric"]): float(r["value"]) for r in csv.DictReader(fh)}


def test_desk_merges_lose_and_interventions_recover(desk_run):
    m = _desk_metrics(desk_run)
    T = desk_run.cfg.num_tasks
    from mergelab.harness.experiment import METHOD_LABELS
    for method in desk_run.config.methods:
        label = METHOD_LABELS[method]
        assert m[("avg", f"acc/{label}")] < m[("avg", "acc/Individual")]
        assert m[("avg", f"acc/{label} w/ P4 r1")] > m[("avg", f"acc/{label}")]
        assert m[("all", f"extra_params/{label} w/ P4 r1")] == 1040
        for t in range(T):
            assert m[(str(t), f"bias_post/{label}")] < m[(str(t), f"bias_pre/{label}")]


def test_desk_intervened_stitch_profile_dominates(desk_run):
    import csv
    with open(desk_run.path("stitch.csv"), newline="") as fh:
        rows = [r for r in csv.DictReader(fh) if r["task"] == "avg"]
    prof = {v: [float(r["accuracy"]) for r in rows if r["variant"] == v] for v in ("merged", "intervened")}
    assert prof["merged"][0] == prof["intervened"][0]
    assert np.mean(prof["intervened"]) > np.mean(prof["merged"])
    assert prof["intervened"][-1] > prof["merged"][-1]
