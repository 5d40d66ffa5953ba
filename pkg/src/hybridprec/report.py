"""Aggregate run records into CSV and JSON tables."""

from __future__ import annotations

import csv
import io
import json
import math
from collections import defaultdict
from pathlib import Path
from typing import Any, Iterable, Sequence

from .runner import BASELINE_POLICY, jsonable, read_records

REPORT_KINDS = ("speedup", "fidelity", "attention", "roofline", "perplexity", "bench")

BENCH_COLUMNS = ("config_hash", "model", "policy", "batch", "seq",
                 "mean_ms", "std_ms", "p50_ms", "p95_ms", "p99_ms", "throughput_sps")


class MissingBaselineError(LookupError):
    """A speedup was requested for a cell with no fp32 measurement."""


def _ok(records: Iterable[dict], task: str) -> list[dict]:
    return [r for r in records if r.get("status") == "ok" and task in r.get("tasks", {})]


def _p(record: dict, key: str):
    return record["params"][key]


def _policy(record: dict) -> str:
    return record["params"]["policy"]["name"]


def _ms(x):
    return None if x is None else 1e3 * x


def bench_rows(records: Sequence[dict]) -> list[dict]:
    rows = []
    for r in _ok(records, "bench"):
        b = r["tasks"]["bench"]
        rows.append({
            "config_hash": r["config_hash"], "model": _p(r, "model_name"), "policy": _policy(r),
            "batch": _p(r, "batch"), "seq": _p(r, "seq"),
            "mean_ms": _ms(b["mean"]), "std_ms": _ms(b["std"]), "p50_ms": _ms(b["p50"]),
            "p95_ms": _ms(b["p95"]), "p99_ms": _ms(b["p99"]), "throughput_sps": b["throughput"],
        })
    return rows


def speedup_rows(records: Sequence[dict]) -> list[dict]:
    """Mean latency per (model, policy, batch, seq), averaged over seeds, against fp32.

    Every declared (model, batch, seq) x policy combination gets a row; a
    policy with no successful measurement is an explicit gap (None).
    """
    means: dict[tuple, list[float]] = defaultdict(list)
    cells, policies = {}, {}
    for r in records:
        if "bench" not in r["params"]["tasks"]:
            continue
        key = (_p(r, "model_name"), _p(r, "batch"), _p(r, "seq"))
        cells.setdefault(key, None)
        policies.setdefault(_policy(r), None)
        if r.get("status") == "ok" and r["tasks"].get("bench", {}).get("mean") is not None:
            means[key + (_policy(r),)].append(r["tasks"]["bench"]["mean"])
    if not cells:
        return []
    if BASELINE_POLICY not in policies:
        raise MissingBaselineError("speedup needs the fp32 policy in the grid")
    rows = []
    for key in cells:
        base = means.get(key + (BASELINE_POLICY,))
        base_mean = math.fsum(base) / len(base) if base else None
        for pol in policies:
            xs = means.get(key + (pol,))
            mean = math.fsum(xs) / len(xs) if xs else None
            speedup = base_mean / mean if (base_mean and mean) else None
            rows.append({"model": key[0], "batch": key[1], "seq": key[2], "policy": pol,
                         "mean_ms": _ms(mean), "baseline_ms": _ms(base_mean), "speedup": speedup,
                         "seeds": len(xs or ())})
    return rows


def fidelity_rows(records: Sequence[dict]) -> list[dict]:
    """Worst case across seeds and cells: max of max error, min of cosine."""
    groups: dict[tuple, list[dict]] = defaultdict(list)
    for r in _ok(records, "fidelity"):
        groups[(_p(r, "model_name"), _policy(r))].append(r["tasks"]["fidelity"])
    rows = []
    for (model, pol), reps in groups.items():
        finite = [x for x in reps if x["max_abs_error"] is not None and x["nan_runs"] == 0]
        runs = sum(x["runs"] for x in reps)
        nan_runs = sum(x["nan_runs"] for x in reps)
        cos = [x["cosine_similarity"] for x in finite if x["cosine_similarity"] is not None]
        rows.append({
            "model": model, "policy": pol,
            "max_abs_error": max((x["max_abs_error"] for x in finite), default=None),
            "mean_abs_error": (math.fsum(x["mean_abs_error"] for x in finite) / len(finite)) if finite else None,
            "cosine_similarity": min(cos, default=None),
            "nan_rate": nan_runs / runs if runs else None,
            "runs": runs,
            "aggregation": "max_abs_error=max, cosine=min over seeds; NaN runs excluded",
        })
    return rows


def attention_rows(records: Sequence[dict]) -> list[dict]:
    """Per-layer statistics averaged over runs, plus a Mean row per model/policy."""
    groups: dict[tuple, list[list[dict]]] = defaultdict(list)
    for r in _ok(records, "attention_profile"):
        groups[(_p(r, "model_name"), _policy(r))].append(r["tasks"]["attention_profile"]["layers"])
    rows = []
    for (model, pol), runs in groups.items():
        by_layer: dict[Any, list[dict]] = defaultdict(list)
        for layers in runs:
            for row in layers:
                by_layer[row["layer"]].append(row)
        for layer, items in by_layer.items():
            out = {"model": model, "policy": pol, "layer": layer, "runs": len(items)}
            for col in ("kurtosis", "max_pre_softmax", "interhead_r"):
                vals = [x[col] for x in items if x.get(col) is not None]
                out[col] = math.fsum(vals) / len(vals) if vals else None
            rows.append(out)
    return rows


def roofline_rows(records: Sequence[dict]) -> list[dict]:
    rows, seen = [], set()
    for r in _ok(records, "roofline"):
        key = (_p(r, "model_name"), _policy(r), _p(r, "batch"), _p(r, "seq"))
        if key in seen:  # roofline numbers do not depend on the seed
            continue
        seen.add(key)
        for row in r["tasks"]["roofline"]["rows"]:
            rows.append({"model": key[0], "policy": key[1], "batch": key[2], "seq": key[3], **row})
    return rows


def perplexity_rows(records: Sequence[dict]) -> list[dict]:
    groups: dict[tuple, list[dict]] = defaultdict(list)
    for r in _ok(records, "perplexity"):
        t = r["tasks"]["perplexity"]
        if "skipped" not in t:
            groups[(_p(r, "model_name"), _policy(r), t["context_len"])].append(t)
    rows = []
    for (model, pol, ctx), items in groups.items():
        ppl = [x["ppl"] for x in items if x["ppl"] is not None]
        base = [x["ppl_fp32"] for x in items if x["ppl_fp32"] is not None]
        mean = math.fsum(ppl) / len(ppl) if ppl else None
        bmean = math.fsum(base) / len(base) if base else None
        rows.append({"model": model, "configuration": pol, "context_len": ctx,
                     "perplexity": mean,
                     "delta_vs_fp32_pct": None if not (mean and bmean) else 100.0 * (mean - bmean) / bmean})
    return rows


_BUILDERS = {
    "speedup": speedup_rows,
    "fidelity": fidelity_rows,
    "attention": attention_rows,
    "roofline": roofline_rows,
    "perplexity": perplexity_rows,
    "bench": bench_rows,
}


def build_report(kind: str, records: Sequence[dict]) -> list[dict]:
    try:
        builder = _BUILDERS[kind]
    except KeyError:
        raise ValueError(f"unknown report kind {kind!r}; valid: {list(REPORT_KINDS)}") from None
    return builder(records)


def to_csv(rows: Sequence[dict], columns: Sequence[str] | None = None) -> str:
    if not rows:
        return ""
    columns = list(columns or rows[0].keys())
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=columns, extrasaction="ignore", lineterminator="\n")
    writer.writeheader()
    for row in rows:
        writer.writerow({k: ("" if row.get(k) is None else row[k]) for k in columns})
    return buf.getvalue()


def write_report(kind: str, output_dir: str | Path) -> tuple[Path, Path, list[dict]]:
    """Build ``kind`` from the records under ``output_dir``; write CSV and JSON."""
    out = Path(output_dir)
    rows = build_report(kind, read_records(out))
    reports = out / "reports"
    reports.mkdir(parents=True, exist_ok=True)
    csv_path, json_path = reports / f"{kind}.csv", reports / f"{kind}.json"
    columns = BENCH_COLUMNS if kind == "bench" else None
    csv_path.write_text(to_csv(rows, columns))
    json_path.write_text(json.dumps(jsonable(rows), indent=1))
    return csv_path, json_path, rows
