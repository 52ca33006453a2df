"""Command-line entry point: ``heraldmis <verb> ...``."""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

from . import graph as G
from . import harness as H

LOG_LEVELS = {"error": logging.ERROR, "warn": logging.WARNING, "info": logging.INFO,
              "debug": logging.DEBUG}


def _setup_logging() -> None:
    name = os.environ.get("HERALDMIS_LOG", "warn").lower()
    if name not in LOG_LEVELS:
        raise SystemExit(f"HERALDMIS_LOG must be one of {sorted(LOG_LEVELS)}, got {name!r}")
    logging.basicConfig(level=LOG_LEVELS[name], format="%(levelname)s %(name)s: %(message)s")


def _int_list(text: str) -> list[int]:
    try:
        return [int(x) for x in text.split(",") if x.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from exc


def _config_from_args(args) -> H.RunConfig:
    data = json.loads(Path(args.config).read_text()) if args.config else {}
    data["seed"] = args.seed
    if args.F is not None:
        data["F"] = args.F
    if args.alpha is not None:
        data["alpha"] = args.alpha
    if args.max_rounds is not None:
        data["max_rounds"] = args.max_rounds
    if args.budget_multiplier is not None:
        data["budget_multiplier"] = args.budget_multiplier
    if args.audit is not None:
        data["audit"] = args.audit
    if args.preset is not None:
        data["preset"] = args.preset
    if args.graph_file:
        data["graph"] = {"file": args.graph_file}
    elif args.udg_n is not None and "graph" not in data:
        data["graph"] = {"kind": "udg", "n": args.udg_n, "avg_degree": args.avg_degree}
    elif args.udg_n is not None:
        data["graph"] = {**data["graph"], "n": args.udg_n}
    if "graph" not in data:
        raise H.ConfigError("no graph given; use --graph-file, --udg-n or a config 'graph' entry")
    if args.wake is not None:
        data["wake"] = json.loads(args.wake)
    for item in args.set or []:
        key, _, val = item.partition("=")
        data.setdefault("overrides", {})[key] = json.loads(val)
    if getattr(args, "trace", None):
        data["trace"] = {"path": args.trace}
    return H.RunConfig.from_dict(data)


def _add_run_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON RunConfig; flags below override its fields")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--F", "--channels", dest="F", type=int)
    p.add_argument("--alpha", type=int, help="bound on independent nodes within two hops")
    p.add_argument("--max-rounds", type=int)
    p.add_argument("--budget-multiplier", type=float)
    p.add_argument("--audit", choices=H.AUDIT_LEVELS)
    p.add_argument("--preset", choices=("desk", "analysis"))
    p.add_argument("--graph-file")
    p.add_argument("--udg-n", type=int, help="random unit disk graph with this many nodes")
    p.add_argument("--avg-degree", type=float, default=8.0)
    p.add_argument("--wake", help='wake schedule as JSON, e.g. {"kind": "blocks", "size": 4, "gap": 10}')
    p.add_argument("--set", action="append", metavar="KEY=JSON", help="parameter override")


def cmd_run(args) -> int:
    cfg = _config_from_args(args)
    res = H.run(cfg)
    out = res.to_dict()
    if args.output:
        Path(args.output).write_text(json.dumps(out, indent=1))
    if args.violations:
        with open(args.violations, "w") as fh:
            for v in res.violations:
                fh.write(json.dumps(v.to_dict()) + "\n")
    row = res.summary_row()
    print(json.dumps({k: row[k] for k in ("n", "F", "seed", "rounds", "makespan", "mis_size",
                                           "violations_total", "all_decided", "trace_hash")}))
    if res.stragglers:
        print(f"stragglers: {res.stragglers}", file=sys.stderr)
    return res.exit_status


def cmd_sweep(args) -> int:
    if args.F is None:
        args.F = args.F_list[0]  # base value only; every cell sets its own F
    if args.udg_n is None and not args.graph_file:
        args.udg_n = args.n[0]  # cells replace n; UDG unless the config names another graph
    cfg = _config_from_args(args)
    seeds = list(range(args.seed, args.seed + args.replicates))
    rows = H.sweep(cfg, args.n, args.F_list, seeds, jobs=args.jobs)
    text = H.rows_to_csv(rows)
    if args.output:
        Path(args.output).write_text(text)
    else:
        sys.stdout.write(text)
    return 1 if any(int(r["flagged"] or 0) for r in rows) else 0


def cmd_gen_graph(args) -> int:
    if args.kind == "udg":
        radius = args.radius if args.radius is not None else \
            G.udg_radius_for_degree(args.n, args.avg_degree, args.world)
        g = G.gen_unit_disk(args.n, radius, args.world, args.seed)
    else:
        g = G.gen_structured(args.kind, args.n, args.width)
    G.write_edge_list(g, args.output)
    print(f"{g.node_count} nodes, {g.edge_count} edges -> {args.output}")
    return 0


def cmd_verify_trace(args) -> int:
    g = G.read_edge_list(args.graph_file) if args.graph_file else None
    rep = H.verify_trace(args.trace, g)
    print(json.dumps({"schema_version": H.SCHEMA_VERSION, "hash_ok": rep.hash_ok,
                      "recomputed": rep.recomputed, "recorded": rep.recorded,
                      "illegal": rep.illegal}))
    return 0 if rep.ok else 1


def cmd_replay_node(args) -> int:
    replayed, recorded = H.replay_node(args.trace, args.node)
    same = replayed == recorded
    print(json.dumps({"node": args.node, "match": same, "replayed": replayed,
                      "recorded": recorded}))
    return 0 if same else 1


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="heraldmis", description=__doc__)
    sub = ap.add_subparsers(dest="verb", required=True)

    p = sub.add_parser("run", help="simulate one configuration under the verifier")
    _add_run_flags(p)
    p.add_argument("--output", help="write the full RunResult as JSON")
    p.add_argument("--violations", help="write violations as JSONL")
    p.add_argument("--trace", help="write a JSONL event trace")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("sweep", help="grid over n, F and seeds; CSV out")
    _add_run_flags(p)
    p.add_argument("--n", type=_int_list, required=True, help="comma-separated node counts")
    p.add_argument("--F-list", type=_int_list, required=True)
    p.add_argument("--replicates", type=int, default=1,
                   help="seeds run are seed, seed+1, ..., seed+replicates-1")
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--output")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("gen-graph", help="write a generated graph as an edge list")
    p.add_argument("kind", choices=("udg",) + G.STRUCTURED_KINDS)
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--radius", type=float)
    p.add_argument("--avg-degree", type=float, default=8.0)
    p.add_argument("--world", type=float, default=1.0)
    p.add_argument("--width", type=int)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--output", required=True)
    p.set_defaults(func=cmd_gen_graph)

    p = sub.add_parser("verify-trace", help="recompute a trace hash and audit transitions")
    p.add_argument("trace")
    p.add_argument("--graph-file")
    p.set_defaults(func=cmd_verify_trace)

    p = sub.add_parser("replay-node", help="re-run one node from its recorded deliveries")
    p.add_argument("trace")
    p.add_argument("--node", type=int, required=True)
    p.set_defaults(func=cmd_replay_node)
    return ap


def main(argv=None) -> int:
    _setup_logging()
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (H.ConfigError, G.GraphError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
