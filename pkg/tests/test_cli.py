import json

import pytest

from hybridprec.cli import main

CONFIG = """\
models:
  - {name: enc, preset: toy-encoder, overrides: {num_layers: 1, max_positions: 16}}
policies: [fp32, hybrid]
batch_sizes: [1]
seq_lens: [8, 32]
seeds: [0]
protocol: {warmup_iters: 0, measure_iters: 2}
tasks: [bench, fidelity, roofline]
"""


@pytest.fixture
def config(tmp_path):
    path = tmp_path / "grid.yaml"
    path.write_text(CONFIG)
    return path


def test_grid_expand_lists_cells(config, capsys):
    assert main(["grid", "expand", str(config)]) == 0
    out, err = capsys.readouterr()
    assert len(out.strip().splitlines()) == 2
    assert "filtered 2" in err


def test_grid_run_resume_and_report(config, tmp_path, capsys):
    out_dir = tmp_path / "out"
    assert main(["grid", "run", str(config), "--output-dir", str(out_dir)]) == 0
    assert len(list((out_dir / "runs").glob("*.json"))) == 2
    assert (out_dir / "reports" / "speedup.csv").exists()
    capsys.readouterr()
    assert main(["grid", "run", str(config), "--output-dir", str(out_dir), "--resume", "--workers", "2"]) == 0
    assert "2 cached" in capsys.readouterr().err
    assert main(["report", "fidelity", "--output-dir", str(out_dir)]) == 0
    assert capsys.readouterr().out.startswith("model,policy,max_abs_error")


def test_grid_seed_override(config, capsys):
    assert main(["grid", "expand", str(config), "--seed", "7"]) == 0
    assert "seed=7" in capsys.readouterr().out


def test_grid_run_exit_code_on_failure(tmp_path, monkeypatch):
    from hybridprec import runner

    def broken(cell):
        raise RuntimeError("nope")

    monkeypatch.setitem(runner.TASK_FUNCS, "fidelity", broken)
    path = tmp_path / "g.yaml"
    path.write_text(CONFIG)
    assert main(["grid", "run", str(path), "--output-dir", str(tmp_path / "o")]) == 1


def test_report_missing_baseline(tmp_path, capsys):
    path = tmp_path / "g.yaml"
    path.write_text(CONFIG.replace("[fp32, hybrid]", "[hybrid]"))
    assert main(["grid", "run", str(path), "--output-dir", str(tmp_path / "o")]) == 0
    assert main(["report", "speedup", "--output-dir", str(tmp_path / "o")]) == 1
    assert "fp32" in capsys.readouterr().err


def test_bad_config_is_error(tmp_path, capsys):
    path = tmp_path / "g.yaml"
    path.write_text("models: []\n")
    assert main(["grid", "expand", str(path)]) == 2
    assert "error" in capsys.readouterr().err


def test_fidelity_adversarial(capsys):
    assert main(["fidelity", "--layers", "1", "--seq", "16", "--adversarial"]) == 0
    out = json.loads(capsys.readouterr().out)
    assert out["full_fp16"]["nan_rate"] == 1.0 and out["hybrid"]["nan_rate"] == 0.0


def test_bench_command(capsys):
    assert main(["bench", "--layers", "1", "--seq", "8", "--iters", "3", "--warmup", "1"]) == 0
    out = json.loads(capsys.readouterr().out)
    assert set(out) == {"mean", "std", "p50", "p95", "p99", "throughput", "batch"}


def test_roofline_command(capsys):
    assert main(["roofline", "--model", "bert-base", "--seq", "128"]) == 0
    lines = capsys.readouterr().out.strip().splitlines()
    assert lines[0] == "op_class,flops,bytes,intensity,attainable_flops,bound"
    assert len(lines) == 8


def test_profile_attention_command(tmp_path, capsys):
    tokens = tmp_path / "t.txt"
    tokens.write_text("1 2 3 4 5 6\n7 8 9 10 11 12\n")
    assert main(["profile-attention", "--layers", "2", "--tokens", str(tokens)]) == 0
    rows = capsys.readouterr().out.strip().splitlines()
    assert rows[0].startswith("layer,kurtosis") and rows[-1].startswith("Mean,")


def test_perplexity_command(capsys):
    assert main(["perplexity", "--layers", "1", "--context-len", "16", "--stream-len", "49"]) == 0
    rows = json.loads(capsys.readouterr().out)
    assert [r["configuration"] for r in rows] == ["fp32", "hybrid", "full_fp16"]
    assert rows[0]["delta_vs_fp32_pct"] == 0.0
    assert main(["perplexity", "--model", "toy-encoder"]) == 2
