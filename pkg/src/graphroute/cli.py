"""Command-line entry point: ``graphroute <stage> --config run.toml``."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace

from . import pipeline
from .pipeline import RunConfig, StageError


def _parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="TOML run configuration")
    common.add_argument("--seed", type=int, help="run a single seed instead of the configured list")
    common.add_argument("--k", type=int, help="number of candidate graphs")
    common.add_argument("--backend", choices=("mock", "http"), help="override the configured backend kind")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="graphroute", description="Per-query graph selection for agent pipelines.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, help_ in (
        ("optimize", "REINFORCE over edge logits; writes checkpoints"),
        ("harvest", "score checkpoints on dev and keep the top K"),
        ("build-data", "run candidates on train/dev to label designer data"),
        ("train-designer", "fit the ranking scorer"),
        ("run-full", "all stages for every seed plus the aggregated report"),
    ):
        sub.add_parser(name, parents=[common], help=help_)
    ev = sub.add_parser("evaluate", parents=[common], help="score evaluation modes on the test split")
    ev.add_argument("--mode", action="append",
                    help="fixed-<i>, adaptive, oracle, random; repeatable, default all")
    pilot = sub.add_parser("pilot", parents=[common], help="per-sample score table for the top candidates")
    pilot.add_argument("--json", action="store_true", help="print JSON instead of the text table")
    return parser


def _config(args) -> RunConfig:
    if not args.config:
        raise StageError("config", "--config is required for this command")
    try:
        cfg = pipeline.load_config(args.config)
    except Exception as exc:
        raise StageError("config", exc) from exc
    if args.k is not None:
        cfg.K = args.k
    if args.backend:
        cfg.backend = replace(cfg.backend, kind=args.backend)
    if args.seed is not None:
        cfg.seeds = [args.seed]
    return cfg


def _pilot(args) -> None:
    if not args.config:
        report = pipeline.pilot_table_report()
    else:
        cfg = _config(args)
        try:
            data = pipeline.prepare_data(cfg)
            seed = cfg.seeds[0]
            cands = pipeline.load_candidates(cfg, seed)
            samples = data.test[:15]
            report = pipeline.pilot_report(cands.graphs, samples, pipeline.make_runner(cfg, data, seed))
        except Exception as exc:
            raise StageError("pilot", exc) from exc
    print(json.dumps(report.to_json(), indent=2) if args.json else report.format(), end="" if not args.json else "\n")


def run(argv=None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "pilot":
            _pilot(args)
            return 0
        cfg = _config(args)
        if args.command == "run-full":
            print(pipeline.format_report(pipeline.run_full(cfg)), end="")
            return 0
        try:
            data = pipeline.prepare_data(cfg)
        except Exception as exc:
            raise StageError("config", exc) from exc
        for seed in cfg.seeds:
            if args.command == "optimize":
                ckpts = pipeline.stage_optimize(cfg, seed, data)
                print(f"seed {seed}: {len(ckpts)} checkpoints")
            elif args.command == "harvest":
                cands = pipeline.stage_harvest(cfg, seed, data)
                print(f"seed {seed}: dev scores {[round(s, 4) for s in cands.dev_scores]}")
            elif args.command == "build-data":
                train, dev = pipeline.stage_build_data(cfg, seed, data)
                print(f"seed {seed}: {len(train)} train / {len(dev)} dev records")
            elif args.command == "train-designer":
                pipeline.stage_train(cfg, seed)
                print(f"seed {seed}: scorer written")
            elif args.command == "evaluate":
                results = pipeline.stage_evaluate(cfg, seed, data, args.mode)
                for name, r in results.items():
                    print(f"seed {seed}: {name:<10} mean {r.mean:.4f}  latency {r.mean_latency:.3f}s")
    except StageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    return 0


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
