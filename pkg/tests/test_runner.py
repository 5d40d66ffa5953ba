import hashlib
import json

import pytest

from hybridprec import runner
from hybridprec.bench import BenchProtocol
from hybridprec.runner import (
    ConfigError,
    EmptyGridError,
    ExperimentConfig,
    ModelSpec,
    execute,
    expand_grid,
    jsonable,
    load_config,
    read_records,
)

TINY = {"name": "tiny-enc", "preset": "toy-encoder",
        "overrides": {"num_layers": 1, "hidden": 32, "heads": 2, "ffn": 64, "vocab": 50, "max_positions": 32}}
TINY_DEC = {"name": "tiny-dec", "preset": "toy-decoder",
            "overrides": {"num_layers": 1, "hidden": 32, "heads": 2, "ffn": 64, "vocab": 50, "max_positions": 32}}


def tiny_config(**kw):
    base = dict(models=[TINY, TINY_DEC], policies=["fp32", "hybrid", "full_fp16"], batch_sizes=[1],
                seq_lens=[8], seeds=[0, 1], protocol={"warmup_iters": 0, "measure_iters": 2},
                tasks=["bench", "fidelity", "attention_profile", "roofline", "perplexity", "margins"])
    base.update(kw)
    return ExperimentConfig.from_dict(base)


# -- config & expansion ----------------------------------------------------------


def test_full_size_grid_has_180_runs():
    cfg = ExperimentConfig.from_dict({
        "models": ["bert-base", "gpt2"], "policies": ["fp32", "hybrid", "full_fp16"],
        "batch_sizes": [1, 2, 4, 8, 16, 32], "seq_lens": [32, 64, 128, 256, 512], "seeds": [0],
    })
    grid = expand_grid(cfg)
    assert len(grid) == 180 and not grid.filtered
    assert len({r.run_id for r in grid.runs}) == 180


def test_seq_filter_reported():
    cfg = ExperimentConfig.from_dict({
        "models": [{"preset": "toy-encoder", "overrides": {"max_positions": 128}}],
        "policies": ["fp32"], "batch_sizes": [1], "seq_lens": [32, 64, 128, 256, 512],
    })
    grid = expand_grid(cfg)
    assert [r.seq for r in grid.runs] == [32, 64, 128]
    assert sum(grid.filtered.values()) == 2
    assert "max_positions" in next(iter(grid.filtered))


def test_single_cell_and_empty_grid():
    one = ExperimentConfig.from_dict({"models": ["toy-encoder"], "policies": ["fp32"],
                                      "batch_sizes": [1], "seq_lens": [8]})
    assert len(expand_grid(one)) == 1
    empty = ExperimentConfig.from_dict({"models": ["toy-encoder"], "policies": ["fp32"],
                                        "batch_sizes": [1], "seq_lens": [1000]})
    with pytest.raises(EmptyGridError, match="max_positions"):
        expand_grid(empty)


def test_expansion_deterministic_and_ordered():
    cfg = tiny_config(batch_sizes=[2, 1], seq_lens=[16, 8])
    a, b = expand_grid(cfg), expand_grid(cfg)
    assert [r.run_id for r in a.runs] == [r.run_id for r in b.runs]
    first = a.runs[:4]
    assert [(r.batch, r.seq, r.seed) for r in first] == [(2, 16, 0), (2, 16, 1), (2, 8, 0), (2, 8, 1)]
    assert a.runs[0].policy_name == "fp32" and a.runs[0].model_name == "tiny-enc"


def test_duplicates_are_dropped():
    cfg = tiny_config(models=[TINY], seeds=[0, 0])
    grid = expand_grid(cfg)
    assert len(grid) == 3 and grid.filtered["duplicate cell"] == 3


def test_config_hash_is_content_hash():
    run = expand_grid(tiny_config()).runs[0]
    canonical = json.dumps(run.to_dict(), sort_keys=True, separators=(",", ":"))
    assert run.config_hash == hashlib.sha256(canonical.encode()).hexdigest()
    assert run.run_id == run.config_hash[:16]
    assert run.model.seed == run.seed


@pytest.mark.parametrize("patch,match", [
    ({"tasks": ["bench", "gpu_power"]}, "unknown tasks"),
    ({"policies": ["bf16"]}, "bf16"),
    ({"seeds": []}, "non-empty"),
    ({"batch_sizes": [0]}, ">= 1"),
    ({"hardware_spec": "a100"}, "a100"),
    ({"colour": "blue"}, "unknown config keys"),
    ({"models": [{"name": "x"}]}, "preset"),
])
def test_invalid_configs(patch, match):
    with pytest.raises(ValueError, match=match):
        tiny_config(**patch)


def test_load_yaml_and_json(tmp_path):
    y = tmp_path / "c.yaml"
    y.write_text("models: [toy-encoder]\npolicies: [fp32, {name: ln16, overrides: {layernorm: {dtype: f16}}}]\n"
                 "batch_sizes: [1]\nseq_lens: [4]\nprotocol: {warmup_iters: 1, measure_iters: 2}\n")
    cfg = load_config(y)
    assert cfg.protocol == BenchProtocol(1, 2)
    assert [r.policy_name for r in expand_grid(cfg).runs] == ["fp32", "ln16"]
    j = tmp_path / "c.json"
    j.write_text(json.dumps({"models": ["toy-decoder"], "policies": ["hybrid"], "batch_sizes": [2], "seq_lens": [4]}))
    assert load_config(j).models == [ModelSpec.parse("toy-decoder")]
    (tmp_path / "bad.yaml").write_text("- 1\n- 2\n")
    with pytest.raises(ConfigError):
        load_config(tmp_path / "bad.yaml")


def test_jsonable_nulls_non_finite():
    assert jsonable({"a": float("nan"), "b": [float("inf"), 1.5], "c": (1, 2)}) == {"a": None, "b": [None, 1.5], "c": [1, 2]}


# -- execution -------------------------------------------------------------------


@pytest.fixture(scope="module")
def executed(tmp_path_factory):
    out = tmp_path_factory.mktemp("grid")
    summary = execute(tiny_config(), out)
    return out, summary


def test_execute_writes_records_and_manifest(executed):
    out, summary = executed
    assert summary.computed == 12 and summary.failed == 0 and summary.all_ok
    files = sorted((out / "runs").glob("*.json"))
    assert len(files) == 12
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["grid_size"] == manifest["completed"] == 12
    assert [e["run_id"] for e in manifest["runs"]] == [r["run_id"] for r in summary.records]


def test_records_reparse_and_rehash(executed):
    out, _ = executed
    for rec in read_records(out):
        canonical = json.dumps(rec["params"], sort_keys=True, separators=(",", ":"))
        assert hashlib.sha256(canonical.encode()).hexdigest() == rec["config_hash"]
        assert rec["status"] == "ok"
        env = rec["environment"]
        assert env["cuda_version"] is None and env["gpu_temperature"] is None and env["python"]


def test_inapplicable_tasks_skipped(executed):
    _, summary = executed
    for rec in summary.records:
        enc = rec["params"]["model"]["archetype"] == "encoder_only"
        assert ("skipped" in rec["tasks"]["perplexity"]) == enc
        assert ("skipped" in rec["tasks"]["margins"]) == (not enc)


def test_resume_recomputes_nothing(executed):
    out, first = executed
    again = execute(tiny_config(), out, resume=True)
    assert again.computed == 0 and again.cached == 12
    assert [r["tasks"]["fidelity"] for r in again.records] == [r["tasks"]["fidelity"] for r in first.records]


def test_interrupted_grid_resumes_to_completion(tmp_path, monkeypatch):
    cfg = tiny_config(tasks=["fidelity"])
    calls = {"n": 0}
    real = runner.TASK_FUNCS["fidelity"]

    def dies_on_fifth(cell):
        calls["n"] += 1
        if calls["n"] == 5:
            raise KeyboardInterrupt
        return real(cell)

    monkeypatch.setitem(runner.TASK_FUNCS, "fidelity", dies_on_fifth)
    with pytest.raises(KeyboardInterrupt):
        execute(cfg, tmp_path)
    assert len(list((tmp_path / "runs").glob("*.json"))) == 4
    monkeypatch.setitem(runner.TASK_FUNCS, "fidelity", real)
    resumed = execute(cfg, tmp_path, resume=True)
    assert resumed.cached == 4 and resumed.computed == 8
    assert len(list((tmp_path / "runs").glob("*.json"))) == 12


def test_failed_cell_recorded_and_grid_continues(tmp_path, monkeypatch):
    cfg = tiny_config(tasks=["fidelity"], models=[TINY])
    real = runner.TASK_FUNCS["fidelity"]

    def fails_for_seed1_hybrid(cell):
        if cell.params.seed == 1 and cell.params.policy_name == "hybrid":
            raise ValueError("synthetic failure")
        return real(cell)

    monkeypatch.setitem(runner.TASK_FUNCS, "fidelity", fails_for_seed1_hybrid)
    summary = execute(cfg, tmp_path)
    statuses = [r["status"] for r in summary.records]
    assert statuses.count("ok") == 5 and statuses.count("failed") == 1
    bad = next(r for r in summary.records if r["status"] == "failed")
    assert "synthetic failure" in bad["error"]
    # a resumed run retries failed cells
    monkeypatch.setitem(runner.TASK_FUNCS, "fidelity", real)
    again = execute(cfg, tmp_path, resume=True)
    assert again.computed == 1 and again.all_ok


def test_parallel_workers_match_serial(tmp_path):
    cfg = tiny_config(tasks=["fidelity", "roofline", "bench"], models=[TINY_DEC])
    serial = execute(cfg, tmp_path / "a", workers=1)
    parallel = execute(cfg, tmp_path / "b", workers=3)
    assert [r["tasks"]["fidelity"] for r in serial.records] == [r["tasks"]["fidelity"] for r in parallel.records]
    assert (tmp_path / "a" / "manifest.json").read_bytes() == (tmp_path / "b" / "manifest.json").read_bytes()
