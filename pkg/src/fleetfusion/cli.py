"""Command-line interface: run one scenario, sweep a parameter grid, or
print the improvement-rate report for previously emitted results."""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path

from .harness import RunConfig, apply_override, emit, run_scenario, summarize, sweep
from .noise_estimation import WindowConfig

# Paper-scale preset: a 100+100 fleet at the full tick rate.
_FULL_WORLD = dict(n_cavs=100, n_normal=100, area_side=1000.0, f_sim=50.0)
_FULL_WINDOWS = WindowConfig(
    target_min=5, target_max=250, residual_min=25, residual_max=2500, min_samples=200
)


def _load_config(path: str | None, seed: int | None, full: bool, workers: int | None,
                 repeats: int | None) -> RunConfig:
    cfg = RunConfig.from_json(path) if path else RunConfig()
    if full:
        cfg = replace(cfg, world=replace(cfg.world, **_FULL_WORLD), windows=_FULL_WINDOWS)
    if seed is not None:
        cfg = replace(cfg, world=replace(cfg.world, seed=seed))
    if workers is not None:
        cfg = replace(cfg, workers=workers)
    if repeats is not None:
        cfg = replace(cfg, repeats=repeats)
    cfg.validate()
    return cfg


def _cmd_run(args) -> int:
    cfg = _load_config(args.config, args.seed, args.full, args.workers, args.repeats)
    series = run_scenario(cfg)
    valid_t0s = [t0 for t0 in cfg.t0s if (t0 + 1.0) * cfg.world.f_sim <= series.ticks]
    summary = summarize(series, valid_t0s)
    paths = emit(series, summary, args.out, cfg)
    for name, path in sorted(paths.items()):
        print(f"{name}: {path}")
    return 0


def _parse_vary(items: list[str]) -> dict[str, list]:
    varies: dict[str, list] = {}
    for item in items:
        if "=" not in item:
            raise SystemExit(f"--vary expects key=v1,v2,... got {item!r}")
        key, _, values = item.partition("=")
        varies[key.strip()] = [_parse_number(v) for v in values.split(",") if v != ""]
    return varies


def _parse_number(text: str):
    value = float(text)
    return int(value) if value.is_integer() and "." not in text else value


def _cmd_sweep(args) -> int:
    cfg = _load_config(args.config, args.seed, args.full, args.workers, args.repeats)
    varies = _parse_vary(args.vary)
    for key in varies:
        apply_override(cfg, key, varies[key][0])  # fail fast on unknown keys
    out_dirs = sweep(cfg, varies, args.out)
    for path in out_dirs:
        print(f"cell: {path}")
    return 0


def _fmt_pct(stats: dict) -> str:
    if stats["mean"] is None:
        return "     -     "
    return f"{100 * stats['mean']:6.2f}±{100 * (stats['std'] or 0):5.2f}"


def _cmd_report(args) -> int:
    root = Path(args.in_dir)
    summary_files = sorted(root.rglob("summary.json"))
    if not summary_files:
        print(f"no summary.json found under {root}", file=sys.stderr)
        return 1
    docs = []
    for path in summary_files:
        with path.open("r", encoding="utf-8") as f:
            doc = json.load(f)
        doc["_cell"] = str(path.parent.relative_to(root)) if path.parent != root else "."
        docs.append(doc)

    t0s = sorted({t0 for doc in docs for t0 in doc["improvement"]["distributed"]}, key=float)
    header = f"{'cell':<28} {'metric':<16}" + "".join(f"  t0={t0:>4}s   " for t0 in t0s)
    print(header)
    print("-" * len(header))
    for doc in docs:
        dist = doc["improvement"]["distributed"]
        for metric in ("to_ground_truth", "to_limit"):
            row = f"{doc['_cell']:<28} {metric:<16}"
            for t0 in t0s:
                stats = dist.get(t0, {}).get(metric)
                row += f" {_fmt_pct(stats) if stats else '     -     '}"
            print(row)
    print()
    print(json.dumps({doc["_cell"]: doc["improvement"] for doc in docs}, indent=2, sort_keys=True))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fleetfusion",
        description=__doc__,
    )
    sub = parser.add_subparsers(dest="command", required=True)

    run_p = sub.add_parser("run", help="run one scenario and emit metrics")
    run_p.add_argument("--config", help="JSON run configuration", default=None)
    run_p.add_argument("--out", required=True, help="output directory")
    run_p.add_argument("--seed", type=int, default=None, help="override the master seed")
    run_p.add_argument("--full", action="store_true", help="paper-scale fleet preset")
    run_p.add_argument("--workers", type=int, default=None, help="worker pool size")
    run_p.add_argument("--repeats", type=int, default=None, help="average this many seeded runs")
    run_p.set_defaults(func=_cmd_run)

    sweep_p = sub.add_parser("sweep", help="run a cartesian parameter sweep")
    sweep_p.add_argument("--config", default=None)
    sweep_p.add_argument("--out", required=True)
    sweep_p.add_argument("--seed", type=int, default=None)
    sweep_p.add_argument("--full", action="store_true")
    sweep_p.add_argument("--workers", type=int, default=None)
    sweep_p.add_argument("--repeats", type=int, default=None)
    sweep_p.add_argument(
        "--vary",
        action="append",
        default=[],
        metavar="key=v1,v2",
        help="parameter values to sweep (repeatable), e.g. f_sub=0,1,10",
    )
    sweep_p.set_defaults(func=_cmd_sweep)

    report_p = sub.add_parser("report", help="print the improvement-rate summary")
    report_p.add_argument("--in", dest="in_dir", required=True, help="run or sweep directory")
    report_p.set_defaults(func=_cmd_report)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
