"""Config-driven experiment grids: expansion, execution, persistence and resume."""

from __future__ import annotations

import datetime as _dt
import hashlib
import itertools
import json
import logging
import math
import os
import platform
import subprocess
import threading
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Mapping, Sequence

import numpy as np
import yaml

from . import fidelity as fid
from .bench import BenchProtocol, run_benchmark
from .model import Archetype, ModelConfig, build_model, classify, flop_breakdown, forward, preset, random_tokens
from .policy import POLICY_NAMES, OpClass, resolve_policy
from .roofline import hardware_spec, roofline_report

log = logging.getLogger(__name__)

TASKS = ("bench", "fidelity", "attention_profile", "roofline", "perplexity", "margins")
BASELINE_POLICY = "fp32"


class ConfigError(ValueError):
    pass


class EmptyGridError(ConfigError):
    pass


@dataclass(frozen=True)
class ModelSpec:
    name: str
    config: ModelConfig

    @classmethod
    def parse(cls, entry: str | Mapping[str, Any]) -> ModelSpec:
        if isinstance(entry, str):
            return cls(entry, preset(entry))
        entry = dict(entry)
        overrides = dict(entry.get("overrides") or {})
        if "preset" in entry:
            cfg = preset(entry["preset"], **overrides)
            default_name = entry["preset"]
        elif "config" in entry:
            cfg = ModelConfig.from_dict({**entry["config"], **overrides})
            default_name = "custom"
        else:
            raise ConfigError(f"model entry needs 'preset' or 'config': {entry}")
        return cls(str(entry.get("name", default_name)), cfg)


@dataclass
class ExperimentConfig:
    models: list[ModelSpec]
    policies: list[str | dict]
    batch_sizes: list[int]
    seq_lens: list[int]
    seeds: list[int] = field(default_factory=lambda: [0])
    protocol: BenchProtocol = field(default_factory=BenchProtocol)
    tasks: list[str] = field(default_factory=lambda: ["bench", "fidelity"])
    hardware_spec: str | dict = "rtx3090"
    output_dir: str = "results"
    workers: int = 1

    def __post_init__(self):
        for name in ("models", "policies", "batch_sizes", "seq_lens", "seeds", "tasks"):
            if not getattr(self, name):
                raise ConfigError(f"{name} must be a non-empty list")
        bad = [t for t in self.tasks if t not in TASKS]
        if bad:
            raise ConfigError(f"unknown tasks {bad}; valid: {list(TASKS)}")
        for p in self.policies:
            resolve_policy(p)  # fail early on unknown names
        hardware_spec(self.hardware_spec)
        if any(b < 1 for b in self.batch_sizes) or any(s < 1 for s in self.seq_lens):
            raise ConfigError("batch sizes and sequence lengths must be >= 1")
        if self.workers < 1:
            raise ConfigError("workers must be >= 1")

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> ExperimentConfig:
        d = dict(d)
        unknown = set(d) - {"models", "policies", "batch_sizes", "seq_lens", "seeds", "protocol",
                            "tasks", "hardware_spec", "output_dir", "workers"}
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        missing = [k for k in ("models", "policies", "batch_sizes", "seq_lens") if k not in d]
        if missing:
            raise ConfigError(f"missing config keys: {missing}")
        try:
            d["models"] = [ModelSpec.parse(m) for m in d.get("models") or []]
        except (ValueError, TypeError) as exc:
            raise ConfigError(str(exc)) from None
        if "protocol" in d:
            try:
                d["protocol"] = BenchProtocol(**d["protocol"])
            except TypeError as exc:
                raise ConfigError(f"bad protocol: {exc}") from None
        for key in ("batch_sizes", "seq_lens", "seeds"):
            if key in d:
                d[key] = [int(x) for x in d[key]]
        return cls(**d)


def load_config(path: str | Path) -> ExperimentConfig:
    """Read an experiment config from YAML (JSON is valid YAML too)."""
    text = Path(path).read_text()
    data = yaml.safe_load(text)
    if not isinstance(data, Mapping):
        raise ConfigError(f"{path}: expected a mapping at the top level")
    return ExperimentConfig.from_dict(data)


# -- grid ------------------------------------------------------------------


def _canonical(obj: Any) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


@dataclass(frozen=True)
class RunParams:
    model_name: str
    model: ModelConfig
    policy: dict
    batch: int
    seq: int
    seed: int
    tasks: tuple[str, ...]
    protocol: BenchProtocol
    hardware: dict

    def to_dict(self) -> dict[str, Any]:
        return {
            "model_name": self.model_name,
            "model": self.model.to_dict(),
            "policy": self.policy,
            "batch": self.batch,
            "seq": self.seq,
            "seed": self.seed,
            "tasks": list(self.tasks),
            "protocol": {"warmup_iters": self.protocol.warmup_iters,
                         "measure_iters": self.protocol.measure_iters},
            "hardware": self.hardware,
        }

    @property
    def policy_name(self) -> str:
        return self.policy["name"]

    @property
    def config_hash(self) -> str:
        return hashlib.sha256(_canonical(self.to_dict()).encode()).hexdigest()

    @property
    def run_id(self) -> str:
        return self.config_hash[:16]


@dataclass
class GridExpansion:
    runs: list[RunParams]
    filtered: Counter

    def __len__(self) -> int:
        return len(self.runs)


def expand_grid(config: ExperimentConfig) -> GridExpansion:
    """Cartesian product models x policies x batch x seq x seeds, filtered.

    Cells with seq > max_positions are dropped, as are exact duplicates.
    """
    policies = [resolve_policy(p).to_dict() for p in config.policies]
    hw = hardware_spec(config.hardware_spec).to_dict()
    runs, seen, filtered = [], set(), Counter()
    for spec, pol, batch, seq, seed in itertools.product(
        config.models, policies, config.batch_sizes, config.seq_lens, config.seeds
    ):
        if seq > spec.config.max_positions:
            filtered[f"seq > max_positions ({spec.name})"] += 1
            continue
        params = RunParams(spec.name, spec.config.replace(seed=seed), pol, batch, seq, seed,
                           tuple(config.tasks), config.protocol, hw)
        if params.run_id in seen:
            filtered["duplicate cell"] += 1
            continue
        seen.add(params.run_id)
        runs.append(params)
    if not runs:
        detail = ", ".join(f"{k}: {v}" for k, v in filtered.items()) or "no cells declared"
        raise EmptyGridError(f"grid is empty after filtering ({detail})")
    return GridExpansion(runs, filtered)


# -- tasks -----------------------------------------------------------------


def jsonable(obj: Any) -> Any:
    """Convert to plain JSON types; non-finite floats become None."""
    if isinstance(obj, Mapping):
        return {str(getattr(k, "value", k)): jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return jsonable(obj.tolist())
    if isinstance(obj, (bool, np.bool_)):
        return bool(obj)
    if isinstance(obj, (int, np.integer)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        f = float(obj)
        return f if math.isfinite(f) else None
    if hasattr(obj, "value") and isinstance(getattr(obj, "value"), str):
        return obj.value
    if hasattr(obj, "to_dict"):
        return jsonable(obj.to_dict())
    return obj


class _Cell:
    """Lazily shared inputs for all tasks of one run."""

    def __init__(self, params: RunParams):
        self.params = params
        self.policy = _policy_from_dict(params.policy)
        self.model = build_model(params.model)
        self.tokens = random_tokens(params.model, params.batch, params.seq, params.seed)
        self._baseline = None

    @property
    def baseline_logits(self):
        if self._baseline is None:
            self._baseline = forward(self.model, self.tokens, BASELINE_POLICY).logits
        return self._baseline


def _policy_from_dict(d: Mapping[str, Any]):
    if d["name"] in POLICY_NAMES and resolve_policy(d["name"]).to_dict() == d:
        return resolve_policy(d["name"])
    return resolve_policy({"name": d["name"], "base": "fp32", "overrides": d["assignment"]})


def task_bench(cell: _Cell) -> dict:
    p = cell.params
    stats = run_benchmark(lambda: forward(cell.model, cell.tokens, cell.policy), p.batch, p.protocol)
    return stats.to_dict()


def task_fidelity(cell: _Cell) -> dict:
    cand = forward(cell.model, cell.tokens, cell.policy).logits
    return fid.compare_logits(cell.baseline_logits, cand).to_dict()


def task_attention_profile(cell: _Cell) -> dict:
    stats = fid.attention_profile(cell.model, cell.tokens, cell.policy)
    return {"layers": stats.table_rows(), "kurtosis_mean": stats.kurtosis_mean,
            "kurtosis_std": stats.kurtosis_std}


def task_roofline(cell: _Cell) -> dict:
    p = cell.params
    dtypes = {c: cell.policy[c].compute_dtype for c in OpClass}
    rows = roofline_report(hardware_spec(p.hardware), p.model, p.batch, p.seq, dtypes)
    flops = flop_breakdown(p.model, p.batch, p.seq)
    return {"rows": [r.to_dict() for r in rows],
            "flops": {"linear": flops.linear, "attention": flops.attention,
                      "output_projection": flops.output_projection, "total": flops.total,
                      "formula": flops.formula}}


def task_perplexity(cell: _Cell) -> dict:
    p = cell.params
    if p.model.archetype is not Archetype.DECODER_ONLY:
        return {"skipped": "perplexity needs a decoder-only model"}
    stream = random_tokens(p.model, 1, 4 * p.seq + 1, p.seed + 1)[0]
    base = fid.perplexity(cell.model, stream, p.seq, BASELINE_POLICY)
    cand = fid.perplexity(cell.model, stream, p.seq, cell.policy)
    return {"context_len": p.seq, "tokens": int(stream.size), "ppl_fp32": base, "ppl": cand,
            "delta_pct": 100.0 * (cand - base) / base}


def task_margins(cell: _Cell) -> dict:
    p = cell.params
    if p.model.archetype is not Archetype.ENCODER_ONLY:
        return {"skipped": "margin analysis needs an encoder-only model"}
    base = classify(cell.model, cell.tokens, BASELINE_POLICY)
    cand = classify(cell.model, cell.tokens, cell.policy)
    if not np.isfinite(cand).all():
        return {"nan": True, "flip_count": None}
    res = fid.margin_analysis(base, cand)
    return {"min_margin_fp32": res.min_margin_a, "min_margin": res.min_margin_b,
            "flip_count": res.flip_count, "flipped_indices": res.flipped_indices}


TASK_FUNCS: dict[str, Callable[[_Cell], dict]] = {
    "bench": task_bench,
    "fidelity": task_fidelity,
    "attention_profile": task_attention_profile,
    "roofline": task_roofline,
    "perplexity": task_perplexity,
    "margins": task_margins,
}


# -- execution -------------------------------------------------------------


def environment() -> dict[str, Any]:
    """Host metadata; GPU fields are explicit nulls at desk scale."""
    try:
        build = subprocess.run(["git", "rev-parse", "HEAD"], capture_output=True, text=True,
                               timeout=5, check=False).stdout.strip() or None
    except (OSError, subprocess.SubprocessError):
        build = None
    return {
        "os": platform.platform(),
        "cpu": _cpu_model(),
        "python": platform.python_version(),
        "numpy": np.__version__,
        "build": build,
        "cuda_version": None,
        "driver_version": None,
        "gpu_temperature": None,
        "power_draw": None,
    }


def _cpu_model() -> str | None:
    try:
        for line in Path("/proc/cpuinfo").read_text().splitlines():
            if line.startswith("model name"):
                return line.split(":", 1)[1].strip()
    except OSError:
        pass
    return platform.processor() or None


def run_cell(params: RunParams, env: Mapping[str, Any] | None = None) -> dict:
    """Execute every requested task of one cell into a run record."""
    record: dict[str, Any] = {
        "run_id": params.run_id,
        "config_hash": params.config_hash,
        "params": params.to_dict(),
        "timestamp": _dt.datetime.now(_dt.timezone.utc).isoformat(),
        "environment": dict(env) if env is not None else environment(),
        "tasks": {},
        "status": "ok",
        "error": None,
    }
    try:
        cell = _Cell(params)
        for task in params.tasks:
            record["tasks"][task] = jsonable(TASK_FUNCS[task](cell))
    except Exception as exc:
        log.warning("run %s failed: %s", params.run_id, exc)
        record["status"] = "failed"
        record["error"] = f"{type(exc).__name__}: {exc}"
    return record


def _atomic_write(path: Path, text: str) -> None:
    tmp = path.with_name(f".{path.name}.{os.getpid()}.{threading.get_ident()}.tmp")
    tmp.write_text(text)
    tmp.replace(path)


def read_records(output_dir: str | Path) -> list[dict]:
    """All run records under ``output_dir``, in manifest (grid) order when known."""
    out = Path(output_dir)
    runs = out / "runs"
    if not runs.is_dir():
        return []
    records = {p.stem: json.loads(p.read_text()) for p in sorted(runs.glob("*.json"))}
    order: list[str] = []
    manifest = out / "manifest.json"
    if manifest.exists():
        order = [e["run_id"] for e in json.loads(manifest.read_text())["runs"] if e["run_id"] in records]
    rest = [k for k in records if k not in set(order)]
    return [records[k] for k in order + rest]


@dataclass
class ExecutionSummary:
    records: list[dict]
    computed: int
    cached: int
    failed: int
    filtered: Counter

    @property
    def all_ok(self) -> bool:
        return self.failed == 0


def execute(
    config: ExperimentConfig,
    output_dir: str | Path | None = None,
    resume: bool = False,
    workers: int | None = None,
) -> ExecutionSummary:
    """Run every grid cell, persisting one JSON record per run as it completes.

    With ``resume`` any existing record whose hash matches and whose status is
    ok is reused instead of recomputed. Failures are recorded and the grid
    carries on. Timed benchmarks are serialised by the measurement token;
    everything else may run on up to ``workers`` threads.
    """
    grid = expand_grid(config)
    out = Path(output_dir or config.output_dir)
    runs_dir = out / "runs"
    runs_dir.mkdir(parents=True, exist_ok=True)
    env = environment()
    workers = workers or config.workers
    lock = threading.Lock()
    results: dict[str, dict] = {}
    counts = Counter()

    def cached_record(params: RunParams) -> dict | None:
        path = runs_dir / f"{params.run_id}.json"
        if not (resume and path.exists()):
            return None
        try:
            rec = json.loads(path.read_text())
        except (OSError, json.JSONDecodeError):
            return None
        if rec.get("status") == "ok" and rec.get("config_hash") == params.config_hash:
            return rec
        return None

    def one(params: RunParams) -> None:
        rec = cached_record(params)
        kind = "cached"
        if rec is None:
            rec = run_cell(params, env)
            _atomic_write(runs_dir / f"{params.run_id}.json", json.dumps(rec, indent=1, sort_keys=True))
            kind = "failed" if rec["status"] != "ok" else "computed"
        with lock:
            results[params.run_id] = rec
            counts[kind] += 1
            _write_manifest(out, grid.runs, results)

    if workers == 1:
        for params in grid.runs:
            one(params)
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            list(pool.map(one, grid.runs))

    records = [results[p.run_id] for p in grid.runs]
    return ExecutionSummary(records, counts["computed"], counts["cached"], counts["failed"], grid.filtered)


def _write_manifest(out: Path, runs: Sequence[RunParams], results: Mapping[str, dict]) -> None:
    entries = [
        {"run_id": p.run_id, "config_hash": p.config_hash, "status": results[p.run_id]["status"]}
        for p in runs if p.run_id in results
    ]
    manifest = {"grid_size": len(runs), "completed": len(entries), "runs": entries}
    _atomic_write(out / "manifest.json", json.dumps(manifest, indent=1, sort_keys=True))

