"""Batch experiment commands.

Every command takes a config file plus repeated --set overrides, captures
the resolved config into its output directory, and exits 0 on success, 2 on
configuration errors and 3 on runtime failures. Set PATHLM_VERBOSE=1 for
debug logging.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from pathlib import Path

from . import pipeline
from .config import ConfigError, load_config, lm_config, save_config
from .datagen import Corpus
from .harness import FaultEvent, FaultPlan, SimConfig, run_simulation
from .metrics import read_records
from .modular import ModuleStore
from .routing import ShardSet, corpus_features
from .trainer import early_stop_select

log = logging.getLogger("pathlm")

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_RUNTIME = 3


def _common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", type=Path, default=None, help="YAML experiment config")
    parser.add_argument("--out", type=Path, required=True, help="run directory")
    parser.add_argument(
        "--set", dest="overrides", action="append", default=[], metavar="SECTION.KEY=VALUE",
        help="override a config key (repeatable)",
    )


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="pathlm", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    _common(sub.add_parser("make-data", help="generate the synthetic corpus"))
    _common(sub.add_parser("pretrain", help="train the dense base model"))

    p = sub.add_parser("shard", help="fit a router and shard the corpus")
    _common(p)
    p.add_argument("--router", choices=["kmeans", "product", "discriminative"], default=None)
    p.add_argument("--k", type=int, default=None, help="modules per level (overrides modular.levels)")
    p.add_argument("--overlap", type=int, choices=[1, 2], default=None)

    p = sub.add_parser("train", help="train paths (direct, no simulation)")
    _common(p)
    p.add_argument("--mode", choices=["dipaco", "diloco", "flat", "dense"], default="dipaco")
    p.add_argument("--resume", action="store_true", help="continue from the saved state")

    p = sub.add_parser("simulate", help="train through the fault-tolerant simulation")
    _common(p)
    p.add_argument("--faults", type=Path, default=None, help="JSON fault plan")
    p.add_argument("--workers", type=int, default=None)
    p.add_argument("--executors", type=int, default=None)

    p = sub.add_parser("eval", help="evaluate a finished run")
    p.add_argument("--checkpoints", type=Path, required=True, help="run directory")
    p.add_argument("--route-every", type=int, default=0)
    p.add_argument("--early-stop", action="store_true")
    p.add_argument(
        "--set", dest="overrides", action="append", default=[], metavar="SECTION.KEY=VALUE",
    )

    p = sub.add_parser("report", help="emit convergence-curve tables from metrics")
    p.add_argument("--metrics", type=Path, required=True, help="run directory or metrics file")
    p.add_argument("--out", choices=["csv", "json"], default="csv")
    return parser


def _resolved_config(args) -> dict:
    overrides = list(args.overrides)
    if getattr(args, "router", None):
        overrides.append(f"routing.router={args.router}")
    if getattr(args, "k", None):
        overrides.append(f"modular.levels=[{args.k}, {args.k}]")
    if getattr(args, "overlap", None):
        overrides.append(f"routing.overlap={args.overlap}")
    return load_config(args.config, overrides)


def _capture(cfg: dict, out: Path) -> None:
    out.mkdir(parents=True, exist_ok=True)
    save_config(cfg, out / "config.yaml")


def cmd_make_data(args) -> int:
    cfg = _resolved_config(args)
    _capture(cfg, args.out)
    corpus = pipeline.make_data(cfg, args.out)
    print(f"wrote {len(corpus)} sequences to {args.out / pipeline.CORPUS_FILE}")
    return EXIT_OK


def cmd_pretrain(args) -> int:
    cfg = _resolved_config(args)
    _capture(cfg, args.out)
    corpus = pipeline.load_data(args.out)
    params, result = pipeline.pretrain(cfg, corpus, args.out)
    final_val = [r for r in result.records if r.kind == "ppl"]
    tail = f"; val ppl {final_val[-1].value:.3f}" if final_val else ""
    print(f"pretrained base model ({sum(v.size for v in params.values())} params){tail}")
    return EXIT_OK


def cmd_shard(args) -> int:
    cfg = _resolved_config(args)
    _capture(cfg, args.out)
    corpus = pipeline.load_data(args.out)
    base = pipeline.load_base(args.out)
    lm = lm_config(cfg)
    features = corpus_features(corpus, base, lm, cfg["data"]["prefix_len"])
    router = pipeline.build_router(cfg, corpus, base, features, args.out)
    shards = pipeline.build_shards(cfg, router, features, corpus)
    shards.save(args.out / pipeline.SHARDS_FILE)
    pipeline.save_router(router, args.out / pipeline.ROUTER_FILE)
    print(f"shard sizes: {shards.shard_sizes()} (router data: {len(shards.router_data)})")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _resolved_config(args)
    _capture(cfg, args.out)
    result = pipeline.run_training(cfg, args.out, args.mode, resume=args.resume)
    val = [r for r in result.records if r.kind == "ppl"]
    if val:
        last_step = max(r.step for r in val)
        ppl = [r.value for r in val if r.step == last_step]
        print(f"{args.mode}: final mean val ppl {sum(ppl) / len(ppl):.3f} over {len(ppl)} shards")
    else:
        print(f"{args.mode}: training complete")
    return EXIT_OK


def _load_fault_plan(path: Path | None) -> FaultPlan | None:
    if path is None:
        return None
    obj = json.loads(path.read_text())
    events = [
        FaultEvent(
            target=e["target"],
            action=e["action"],
            at_tick=e.get("at_tick"),
            on_phase_lease=e.get("on_phase_lease"),
        )
        for e in obj.get("events", [])
    ]
    return FaultPlan(events=events, speeds=obj.get("speeds", {}))


def cmd_simulate(args) -> int:
    cfg = _resolved_config(args)
    _capture(cfg, args.out)
    corpus = pipeline.load_data(args.out)
    base = pipeline.load_base(args.out)
    lm = lm_config(cfg)
    shards_path = args.out / pipeline.SHARDS_FILE
    if not shards_path.exists():
        raise FileNotFoundError(f"no shards in {args.out}; run shard first")
    shards = ShardSet.load(shards_path)
    from . import tree as pt
    from .config import train_plan

    plan = train_plan(cfg, pt.copy(base))
    modular = pipeline.modular_for_mode(cfg, lm, "dipaco", shards.n_paths)
    resharder = None
    if plan.reshard_at is not None:
        features = corpus_features(corpus, base, lm, cfg["data"]["prefix_len"])
        resharder = pipeline.make_resharder(cfg, corpus, features, shards)
    h = cfg["harness"]
    sim_cfg = SimConfig(
        n_workers=args.workers or h["workers"],
        n_executors=args.executors or h["executors"],
        lease_ticks=h["lease_ticks"],
        step_ticks=h["step_ticks"],
        monitor_ticks=h["monitor_ticks"],
    )
    result = run_simulation(
        lm, modular, corpus, shards, plan,
        store_root=args.out / pipeline.STORE_DIR,
        sim_cfg=sim_cfg,
        fault_plan=_load_fault_plan(args.faults),
        resharder=resharder,
    )
    if resharder is not None and resharder.router is not None:
        pipeline.save_router(resharder.router, args.out / pipeline.ROUTER_FILE)
    finals = {j: result.store.materialize(j) for j in range(modular.n_paths)}
    best_phase = {m.path_id: m.phase for m in early_stop_select(result.metas).values()}
    pipeline.save_run(args.out, "dipaco", finals, {}, best_phase)
    from .metrics import append_records

    append_records(args.out / pipeline.METRICS_FILE, result.records)
    result.events.save(args.out / "events.log")
    print(
        f"simulation complete at tick {result.events.entries[-1][0]}: "
        f"{result.events.count('complete')} tasks, {result.events.count('preempt')} preemptions"
    )
    return EXIT_OK


def cmd_eval(args) -> int:
    out = args.checkpoints
    cfg = load_config(out / "config.yaml", args.overrides)
    report = pipeline.run_eval(
        cfg, out, route_every=args.route_every, early_stop=args.early_stop,
        report_path=out / f"eval_w{args.route_every}.json",
    )
    print(report.to_json())
    return EXIT_OK


def cmd_report(args) -> int:
    path = args.metrics
    if path.is_dir():
        path = path / pipeline.METRICS_FILE
    records = read_records(path)
    val = [r for r in records if r.split == "val" and r.kind == "ppl"]
    if not val:
        raise RuntimeError("no validation perplexity records found")
    steps = sorted({r.step for r in val})
    paths = sorted({r.path_id for r in val})
    rows = []
    for step in steps:
        at = {r.path_id: r.value for r in val if r.step == step}
        mean = sum(at.values()) / len(at)
        rows.append({"step": step, "ppl": mean, **{f"path{p}": at.get(p) for p in paths}})
    if args.out == "json":
        print(json.dumps(rows))
    else:
        writer = csv.DictWriter(sys.stdout, fieldnames=["step", "ppl"] + [f"path{p}" for p in paths])
        writer.writeheader()
        writer.writerows(rows)
    return EXIT_OK


COMMANDS = {
    "make-data": cmd_make_data,
    "pretrain": cmd_pretrain,
    "shard": cmd_shard,
    "train": cmd_train,
    "simulate": cmd_simulate,
    "eval": cmd_eval,
    "report": cmd_report,
}


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(
        level=logging.DEBUG if os.environ.get("PATHLM_VERBOSE") else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as e:  # runtime failure
        if os.environ.get("PATHLM_VERBOSE"):
            log.exception("command failed")
        print(f"error: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
