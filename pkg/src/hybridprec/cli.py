"""Command-line entry point: ``hybridprec <command> ...``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Sequence

import numpy as np

from . import fidelity as fid
from .bench import BenchProtocol, run_benchmark
from .model import Archetype, PRESETS, build_model, forward, load_token_lines, load_token_matrix, preset, random_tokens
from .policy import POLICY_NAMES, resolve_policy
from .report import REPORT_KINDS, MissingBaselineError, build_report, to_csv, write_report
from .roofline import CSV_COLUMNS, HARDWARE_PRESETS, hardware_spec, roofline_report
from .runner import ConfigError, execute, expand_grid, jsonable, load_config, read_records

log = logging.getLogger("hybridprec")


def _emit(obj) -> None:
    print(json.dumps(jsonable(obj), indent=2))


def _model_args(p: argparse.ArgumentParser, default_model: str = "toy-encoder") -> None:
    p.add_argument("--model", default=default_model, choices=sorted(PRESETS))
    p.add_argument("--layers", type=int, help="override the preset's layer count")
    p.add_argument("--batch", type=int, default=1)
    p.add_argument("--seq", type=int, default=32)
    p.add_argument("--tokens", type=Path, help="whitespace-separated token ids, one sequence per line")


def _model(args):
    overrides = {"seed": args.seed}
    if args.layers is not None:
        overrides["num_layers"] = args.layers
    cfg = preset(args.model, **overrides)
    return cfg, build_model(cfg)


def _tokens(args, cfg):
    if args.tokens is not None:
        return load_token_matrix(args.tokens)
    return random_tokens(cfg, args.batch, args.seq, args.seed)


def _grid_config(args):
    config = load_config(args.config)
    if args.seed is not None:
        config.seeds = [args.seed]
    return config


def cmd_grid_expand(args) -> int:
    config = _grid_config(args)
    grid = expand_grid(config)
    for p in grid.runs:
        print(f"{p.run_id}  {p.model_name}  {p.policy_name}  batch={p.batch}  seq={p.seq}  seed={p.seed}")
    for reason, n in grid.filtered.items():
        print(f"filtered {n}: {reason}", file=sys.stderr)
    print(f"{len(grid)} runs", file=sys.stderr)
    return 0


def cmd_grid_run(args) -> int:
    config = _grid_config(args)
    out = args.output_dir or Path(config.output_dir)
    summary = execute(config, out, resume=args.resume, workers=args.workers)
    records = read_records(out)
    for kind in REPORT_KINDS:
        try:
            if build_report(kind, records):
                write_report(kind, out)
        except MissingBaselineError as exc:
            log.info("skipping %s report: %s", kind, exc)
    print(f"{len(summary.records)} runs: {summary.computed} computed, {summary.cached} cached, "
          f"{summary.failed} failed -> {out}", file=sys.stderr)
    return 0 if summary.all_ok else 1


def cmd_bench(args) -> int:
    cfg, model = _model(args)
    tokens = _tokens(args, cfg)
    policy = resolve_policy(args.policy)
    stats = run_benchmark(lambda: forward(model, tokens, policy), tokens.shape[0],
                          BenchProtocol(args.warmup, args.iters))
    _emit(stats.to_dict(with_samples=False))
    return 0


def cmd_fidelity(args) -> int:
    cfg, model = _model(args)
    tokens = _tokens(args, cfg)
    if args.adversarial:
        model = fid.amplify_queries(model, tokens)
    base = forward(model, tokens, "fp32").logits
    out = {}
    for name in args.policy:
        out[name] = fid.compare_logits(base, forward(model, tokens, name).logits).to_dict()
    _emit(out)
    return 0


def cmd_profile_attention(args) -> int:
    cfg, model = _model(args)
    stats = fid.attention_profile(model, _tokens(args, cfg), args.policy)
    if args.format == "csv":
        sys.stdout.write(to_csv(stats.table_rows()))
    else:
        _emit(stats.to_dict())
    return 0


def cmd_roofline(args) -> int:
    overrides = {} if args.layers is None else {"num_layers": args.layers}
    cfg = preset(args.model, **overrides)
    pol = resolve_policy(args.policy)
    rows = roofline_report(hardware_spec(args.hardware), cfg, args.batch, args.seq,
                           {c: pol[c].compute_dtype for c in pol.assignment})
    if args.format == "csv":
        sys.stdout.write(to_csv([r.csv_row() for r in rows], CSV_COLUMNS))
    else:
        _emit([r.to_dict() for r in rows])
    return 0


def cmd_perplexity(args) -> int:
    cfg, model = _model(args)
    if cfg.archetype is not Archetype.DECODER_ONLY:
        print("perplexity needs a decoder-only model", file=sys.stderr)
        return 2
    if args.tokens is not None:
        stream = np.concatenate(load_token_lines(args.tokens))
    else:
        stream = random_tokens(cfg, 1, args.stream_len, args.seed)[0]
    base = fid.perplexity(model, stream, args.context_len, "fp32")
    rows = []
    for name in args.policy:
        ppl = base if name == "fp32" else fid.perplexity(model, stream, args.context_len, name)
        rows.append({"configuration": name, "perplexity": ppl, "delta_vs_fp32_pct": 100.0 * (ppl - base) / base})
    _emit(rows)
    return 0


def cmd_report(args) -> int:
    try:
        csv_path, json_path, rows = write_report(args.kind, args.output_dir)
    except MissingBaselineError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    sys.stdout.write(csv_path.read_text())
    print(f"{len(rows)} rows -> {csv_path}, {json_path}", file=sys.stderr)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="hybridprec", description="Mixed-precision transformer inference lab.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    grid = sub.add_parser("grid", help="run or list an experiment grid")
    gsub = grid.add_subparsers(dest="grid_command", required=True)
    run = gsub.add_parser("run", help="execute every cell of a config")
    run.add_argument("config", type=Path)
    run.add_argument("--output-dir", type=Path)
    run.add_argument("--resume", action="store_true", help="reuse completed records")
    run.add_argument("--workers", type=int)
    run.add_argument("--seed", type=int, help="replace the config's seed list with this one seed")
    run.set_defaults(func=cmd_grid_run)
    exp = gsub.add_parser("expand", help="list the resolved cells without running them")
    exp.add_argument("config", type=Path)
    exp.add_argument("--seed", type=int)
    exp.set_defaults(func=cmd_grid_expand)

    def single(name: str, help_: str, default_model: str = "toy-encoder") -> argparse.ArgumentParser:
        p = sub.add_parser(name, help=help_)
        _model_args(p, default_model)
        p.add_argument("--seed", type=int, default=0)
        return p

    p = single("bench", "time the forward pass")
    p.add_argument("--policy", default="fp32", choices=POLICY_NAMES)
    p.add_argument("--warmup", type=int, default=10)
    p.add_argument("--iters", type=int, default=100)
    p.set_defaults(func=cmd_bench)

    p = single("fidelity", "compare policies against the fp32 forward pass")
    p.add_argument("--policy", nargs="+", default=["hybrid", "full_fp16"], choices=POLICY_NAMES)
    p.add_argument("--adversarial", action="store_true", help="scale query weights past the fp16 exp limit")
    p.set_defaults(func=cmd_fidelity)

    p = single("profile-attention", "kurtosis, max score and inter-head correlation per layer")
    p.add_argument("--policy", default="fp32", choices=POLICY_NAMES)
    p.add_argument("--format", choices=("json", "csv"), default="csv")
    p.set_defaults(func=cmd_profile_attention)

    p = sub.add_parser("roofline", help="analytic roofline table")
    p.add_argument("--model", default="bert-base", choices=sorted(PRESETS))
    p.add_argument("--layers", type=int)
    p.add_argument("--batch", type=int, default=1)
    p.add_argument("--seq", type=int, default=128)
    p.add_argument("--policy", default="full_fp16", choices=POLICY_NAMES)
    p.add_argument("--hardware", default="rtx3090", choices=sorted(HARDWARE_PRESETS))
    p.add_argument("--format", choices=("json", "csv"), default="csv")
    p.set_defaults(func=cmd_roofline)

    p = single("perplexity", "strided-window perplexity of a decoder", "toy-decoder")
    p.add_argument("--policy", nargs="+", default=["fp32", "hybrid", "full_fp16"], choices=POLICY_NAMES)
    p.add_argument("--context-len", type=int, default=64)
    p.add_argument("--stream-len", type=int, default=513)
    p.set_defaults(func=cmd_perplexity)

    p = sub.add_parser("report", help="aggregate run records into a table")
    p.add_argument("kind", choices=REPORT_KINDS)
    p.add_argument("--output-dir", type=Path, default=Path("results"))
    p.set_defaults(func=cmd_report)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
