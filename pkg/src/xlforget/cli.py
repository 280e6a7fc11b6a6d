"""Command line entry point: ``xlforget <subcommand> [flags]``.

Exit codes: 0 ok, 2 usage error, 3 unreadable or invalid config, 4 missing
upstream artifact, 5 partial sweep, 6 data error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .config import ConfigError, ExperimentConfig, dump_config, load_config
from .experiment import (
    MissingArtifact,
    RunSpec,
    SEQUENTIAL,
    build_datasets,
    build_orders,
    collect_metrics,
    execute,
    load_runs,
    plan,
    plan_json,
    read_matrix,
    summarize,
    sweep,
    table_csv,
    table_text,
)
from .heatmap import STYLES, render_matrix
from .model import REGIMES
from .tasks import IngestError, export_jsonl, ingest_massive, load_vitality_map

EXIT_OK, EXIT_USAGE, EXIT_CONFIG, EXIT_MISSING, EXIT_PARTIAL, EXIT_DATA = 0, 2, 3, 4, 5, 6

log = logging.getLogger("xlforget")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _common(p: argparse.ArgumentParser, config_required: bool = False) -> None:
    p.add_argument("--config", required=config_required, help="experiment YAML file")
    p.add_argument("--out", help="output directory (defaults to the config's `out`)")
    p.add_argument("--seed", type=int, help="override the config seed")
    p.add_argument("--workers", type=int, default=1, help="parallel runs (default 1)")
    p.add_argument("--dry-run", action="store_true", help="validate and print the plan without training")
    p.add_argument("--hops", type=int, metavar="H", help="override the max hop H")
    p.add_argument("--orders", type=int, metavar="N", help="override the number of orders N")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="xlforget", description="Cross-lingual continual learning experiments.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("generate", help="write the synthetic languages as JSON-lines")
    _common(p, config_required=True)

    p = sub.add_parser("ingest", help="read a MASSIVE-style JSON-lines file")
    _common(p)
    p.add_argument("--input", help="JSON-lines file (defaults to data.path)")
    p.add_argument("--vitality", help="JSON map locale -> LOW|MID|HIGH")

    p = sub.add_parser("train", help="train one regime on one order")
    _common(p, config_required=True)
    p.add_argument("--regime", required=True, choices=REGIMES)
    p.add_argument("--rank", type=int, help="LoRA rank (must be configured)")
    p.add_argument("--order", type=int, default=1, help="1-based order / run index (default 1)")

    p = sub.add_parser("sweep", help="all configured regimes over N orders")
    _common(p, config_required=True)

    p = sub.add_parser("metrics", help="transfer reports for a finished sweep")
    _common(p)

    p = sub.add_parser("heatmap", help="render a matrix CSV as SVG")
    _common(p)
    p.add_argument("--input", required=True, help="labelled matrix CSV")
    p.add_argument("--style", choices=STYLES, default="raw")
    p.add_argument("--midpoint", type=float, help="fixed scale centre (default: column mean for raw, 0 for delta)")
    p.add_argument("--title", default="")

    p = sub.add_parser("params", help="parameter and F1 summary table for a sweep")
    _common(p)
    return parser


def _config(args) -> ExperimentConfig:
    cfg = load_config(args.config)
    return cfg.with_overrides(seed=args.seed, N=args.orders, H=args.hops, out=args.out)


def _sweep_dir(args) -> Path:
    if args.out:
        return Path(args.out)
    if args.config:
        return Path(_config(args).out)
    raise ConfigError("give --out (the sweep directory) or --config")


def _print(obj) -> None:
    sys.stdout.write(obj if isinstance(obj, str) else json.dumps(obj, indent=2, sort_keys=True) + "\n")


# -- subcommands -----------------------------------------------------------------


def cmd_generate(args) -> int:
    cfg = _config(args)
    if cfg.data.source != "synthetic":
        raise ConfigError("generate needs data.source: synthetic")
    datasets = build_datasets(cfg)
    out = Path(cfg.out)
    summary = {l: {k: len(v) for k, v in ds.splits().items()} for l, ds in datasets.items()}
    if args.dry_run:
        _print({"out": str(out / "data.jsonl"), "languages": summary})
        return EXIT_OK
    out.mkdir(parents=True, exist_ok=True)
    export_jsonl(datasets.values(), out / "data.jsonl")
    (out / "vitality.json").write_text(
        json.dumps({l: ds.spec.vitality for l, ds in datasets.items()}, indent=2, sort_keys=True) + "\n"
    )
    _print(f"wrote {len(datasets)} languages to {out / 'data.jsonl'}\n")
    return EXIT_OK


def cmd_ingest(args) -> int:
    cfg = _config(args) if args.config else None
    path = args.input or (cfg.data.path if cfg else None)
    if not path:
        raise ConfigError("give --input or a config with data.path")
    if not Path(path).exists():
        raise MissingArtifact(f"{path} not found")
    vit_path = args.vitality or (cfg.data.vitality_map if cfg else None)
    vit = load_vitality_map(vit_path) if vit_path else None
    datasets = ingest_massive(path, vit)
    summary = {
        "source": str(path),
        "vocab_size": next(iter(datasets.values())).vocab_size if datasets else 0,
        "labels": next(iter(datasets.values())).label_names if datasets else [],
        "locales": {
            l: {"vitality": ds.spec.vitality, **{k: len(v) for k, v in ds.splits().items()}}
            for l, ds in datasets.items()
        },
    }
    if args.dry_run:
        _print(summary)
        return EXIT_OK
    out = Path(args.out or (cfg.out if cfg else "ingest")) / "ingest"
    out.mkdir(parents=True, exist_ok=True)
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    (out / "vocab.json").write_text(json.dumps(next(iter(datasets.values())).vocab or [], ensure_ascii=False) + "\n")
    export_jsonl(datasets.values(), out / "normalized.jsonl")
    _print(f"ingested {len(datasets)} locales into {out}\n")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _config(args)
    datasets = build_datasets(cfg)
    n = args.order - 1
    if not 0 <= n < cfg.N:
        raise ConfigError(f"--order must be in [1, {cfg.N}]")
    orders = build_orders(cfg, datasets)
    ranks = {c.rank for c in cfg.regime_configs() if c.regime == args.regime}
    if not ranks:
        raise ConfigError(f"regime {args.regime} is not configured")
    rank = args.rank if args.rank is not None else (min(ranks, key=lambda r: (r is None, r)) if len(ranks) > 1 else next(iter(ranks)))
    if rank not in ranks:
        raise ConfigError(f"rank {rank} is not configured for {args.regime}")
    spec = RunSpec(args.regime, rank, n, cfg.seed + n, orders[n].order_id if args.regime in SEQUENTIAL else None)
    if args.dry_run:
        _print({"run": spec.relpath, "seed": spec.seed, "order": list(orders[n].langs) if spec.order_id else None})
        return EXIT_OK
    meta = execute(cfg, spec, cfg.out, datasets, orders)
    _print(f"{spec.relpath}: mean final F1 {meta['mean_final_f1']:.4f}\n")
    return EXIT_OK


def cmd_sweep(args) -> int:
    cfg = _config(args)
    if args.dry_run:
        datasets = build_datasets(cfg)
        orders = build_orders(cfg, datasets)
        _print(plan_json(cfg, orders, plan(cfg, orders)))
        return EXIT_OK
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.yaml").write_text(dump_config(cfg))
    metas, failures = sweep(cfg, out, args.workers)
    _print(f"{len(metas)} run(s) written to {out}\n")
    if failures:
        for f in failures:
            sys.stderr.write(f"failed: {f}\n")
        return EXIT_PARTIAL
    return EXIT_OK


def cmd_metrics(args) -> int:
    out = _sweep_dir(args)
    if args.dry_run:
        metas, missing = load_runs(out)
        _print({"completed": [m["path"] for m in metas], "missing": missing})
        return EXIT_OK
    reports, missing = collect_metrics(out, args.hops)
    for label, rep in sorted(reports.items()):
        _print(f"{label}: CFT {rep['cft']:.4f}  CBT {rep['cbt']:.4f}  over {rep['N']} order(s)\n")
    if missing:
        for m in missing:
            sys.stderr.write(f"missing: {m}\n")
        return EXIT_PARTIAL
    return EXIT_OK


def cmd_heatmap(args) -> int:
    rows, values, cols = read_matrix(args.input)
    target = Path(args.out) if args.out else Path(args.input).with_suffix(".svg")
    if args.dry_run:
        _print({"input": args.input, "out": str(target), "shape": list(values.shape), "style": args.style})
        return EXIT_OK
    svg = render_matrix(rows, values, cols, args.style, args.midpoint, args.title)
    target.parent.mkdir(parents=True, exist_ok=True)
    target.write_text(svg)
    _print(f"wrote {target}\n")
    return EXIT_OK


def cmd_params(args) -> int:
    out = _sweep_dir(args)
    metas, missing = load_runs(out)
    if args.dry_run:
        _print({"completed": len(metas), "missing": missing})
        return EXIT_OK
    rows = summarize(metas)
    (out / "params.csv").write_text(table_csv(rows))
    text = table_text(rows)
    (out / "params.txt").write_text(text)
    _print(text)
    if missing:
        sys.stderr.write("missing runs:\n")
        for m in missing:
            sys.stderr.write(f"  {m}\n")
        return EXIT_PARTIAL
    return EXIT_OK


COMMANDS = {
    "generate": cmd_generate,
    "ingest": cmd_ingest,
    "train": cmd_train,
    "sweep": cmd_sweep,
    "metrics": cmd_metrics,
    "heatmap": cmd_heatmap,
    "params": cmd_params,
}


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    if args.workers < 1:
        sys.stderr.write("--workers must be >= 1\n")
        return EXIT_USAGE
    try:
        return COMMANDS[args.command](args)
    except ConfigError as exc:
        sys.stderr.write(f"config error: {exc}\n")
        return EXIT_CONFIG
    except (MissingArtifact, FileNotFoundError) as exc:
        sys.stderr.write(f"missing artifact: {exc}\n")
        return EXIT_MISSING
    except (IngestError, ValueError) as exc:
        sys.stderr.write(f"data error: {exc}\n")
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
