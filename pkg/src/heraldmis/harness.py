"""Experiment configuration, single runs, sweeps, traces and replay."""

from __future__ import annotations

import csv
import dataclasses
import io
import json
import logging
import math
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import graph as G
from . import protocol as P
from . import radio as R
from . import verifier as V
from ._jit import BACKEND

logger = logging.getLogger(__name__)

SCHEMA_VERSION = 1
AUDIT_LEVELS = ("full", "basic")
# Size estimate nodes are handed when the config leaves n_known unset.
# Thresholds scale with log n_known; below this the decay filter has no
# listening band and two-node cliques race their lonely counters.
N_KNOWN_FLOOR = 1024


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    graph: dict
    F: int
    seed: int
    alpha: int | None = None
    alpha_cap: int = 128
    overrides: dict = field(default_factory=dict)
    preset: str = "desk"
    wake: dict = field(default_factory=lambda: {"kind": "all_at_zero"})
    max_rounds: int | None = None
    budget_multiplier: float | None = None
    n_known: int | None = None
    trace: dict = field(default_factory=dict)
    audit: str = "full"
    degree_cap: int | None = None
    schema_version: int = SCHEMA_VERSION

    def __post_init__(self):
        if not isinstance(self.graph, dict) or not ("kind" in self.graph or "file" in self.graph):
            raise ConfigError("graph needs a 'kind' or a 'file'")
        if not isinstance(self.seed, int) or isinstance(self.seed, bool):
            raise ConfigError("seed must be an integer")
        if not isinstance(self.F, int) or self.F < 1:
            raise ConfigError("F must be a positive integer")
        if self.audit not in AUDIT_LEVELS:
            raise ConfigError(f"audit must be one of {AUDIT_LEVELS}")
        if self.alpha is not None and self.alpha < 1:
            raise ConfigError("alpha must be >= 1")

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        extra = set(d) - names
        if extra:
            raise ConfigError(f"unknown config fields: {sorted(extra)}")
        if "seed" not in d:
            raise ConfigError("config needs an explicit seed")
        try:
            return cls(**d)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc

    @classmethod
    def load(cls, path) -> "RunConfig":
        try:
            return cls.from_dict(json.loads(Path(path).read_text()))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from exc

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def replace(self, **kw) -> "RunConfig":
        return dataclasses.replace(self, **kw)


def build_graph(spec: dict, seed: int) -> G.Graph:
    if "file" in spec:
        return G.read_edge_list(spec["file"])
    kind = spec["kind"]
    n = int(spec["n"])
    if kind == "udg":
        world = float(spec.get("world", 1.0))
        if "radius" in spec:
            radius = float(spec["radius"])
        elif "avg_degree" in spec:
            radius = G.udg_radius_for_degree(n, float(spec["avg_degree"]), world)
        else:
            raise ConfigError("udg needs 'radius' or 'avg_degree'")
        return G.gen_unit_disk(n, radius, world, int(spec.get("seed", seed)))
    if kind in G.STRUCTURED_KINDS:
        return G.gen_structured(kind, n, spec.get("width"))
    raise ConfigError(f"unknown graph kind {kind!r}")


def make_schedule(kind: str, args: dict | None, n: int, seed: int) -> np.ndarray:
    args = args or {}
    if kind == "all_at_zero":
        return np.zeros(n, dtype=np.int64)
    if kind == "uniform_random":
        window = int(args["window"])
        return np.random.default_rng([seed, 0x57A4E]).integers(0, window + 1, size=n)
    if kind == "blocks":
        size, gap = int(args["size"]), int(args["gap"])
        if size < 1 or gap < 0:
            raise ConfigError("blocks need size >= 1 and gap >= 0")
        return (np.arange(n) // size) * gap
    if kind == "explicit":
        try:
            vals = [int(x) for x in Path(args["path"]).read_text().split()]
        except ValueError as exc:
            raise ConfigError(f"malformed schedule file: {exc}") from exc
        if len(vals) != n or min(vals, default=0) < 0:
            raise ConfigError(f"schedule file must list {n} non-negative wake rounds")
        return np.asarray(vals, dtype=np.int64)
    raise ConfigError(f"unknown wake schedule {kind!r}")


def _schedule_from(spec: dict, n: int, seed: int) -> np.ndarray:
    spec = dict(spec)
    return make_schedule(spec.pop("kind"), spec, n, seed)


@dataclass
class PairTracker:
    """Follows every leader-herald pair through its lifetime."""

    open: dict = field(default_factory=dict)
    bad_lifetimes: list = field(default_factory=list)
    good_pairs: int = 0
    bad_pairs: int = 0
    reversions: int = 0

    def update(self, leaders, heralds, starts, good) -> None:
        seen = set()
        for key, ok in zip(zip(leaders.tolist(), heralds.tolist(), starts.tolist()), good.tolist()):
            seen.add(key)
            rec = self.open.get(key)
            if rec is None:
                rec = self.open[key] = {"ever_good": False, "ever_bad": False, "last_good": None,
                                        "bad_rounds": 0}
            if rec["last_good"] and not ok:
                self.reversions += 1
            rec["last_good"] = ok
            if ok:
                rec["ever_good"] = True
            else:
                rec["ever_bad"] = True
                rec["bad_rounds"] += 1
        for key in [k for k in self.open if k not in seen]:
            self._close(self.open.pop(key))

    def _close(self, rec) -> None:
        self.good_pairs += rec["ever_good"]
        self.bad_pairs += rec["ever_bad"]
        if rec["ever_bad"]:
            self.bad_lifetimes.append(rec["bad_rounds"])

    def finish(self) -> None:
        for rec in self.open.values():
            self._close(rec)
        self.open.clear()


@dataclass
class RunResult:
    n: int
    F: int
    seed: int
    alpha: int
    params: P.ProtocolParams
    rounds: int
    wake: np.ndarray
    decision_round: np.ndarray
    final_state: np.ndarray
    violation_counts: dict
    violations: list
    aggregates: dict
    bad_pair_lifetimes: list
    good_pairs: int
    bad_pairs: int
    reversions: int
    max_induced_degree: int
    trace_hash: int
    backend: str = BACKEND
    engine: R.Engine | None = field(default=None, repr=False, compare=False)

    @property
    def verdicts(self) -> list[str]:
        return ["M" if s == P.M else "E" if s == P.E else "undecided" for s in self.final_state]

    @property
    def latency(self) -> np.ndarray:
        return np.where(self.decision_round >= 0, self.decision_round - self.wake, -1)

    @property
    def all_decided(self) -> bool:
        return bool(np.all(self.decision_round >= 0))

    @property
    def within_budget(self) -> bool:
        lat = self.latency
        return self.all_decided and bool(np.all(lat <= self.params.runtime_budget))

    @property
    def stragglers(self) -> list[int]:
        lat = self.latency
        return np.flatnonzero((lat < 0) | (lat > self.params.runtime_budget)).tolist()

    @property
    def makespan(self) -> int:
        lat = self.latency
        return int(lat.max()) if self.all_decided else -1

    @property
    def median_latency(self) -> float:
        lat = self.latency
        return float(np.median(lat[lat >= 0])) if np.any(lat >= 0) else math.nan

    @property
    def mis(self) -> list[int]:
        return np.flatnonzero(self.final_state == P.M).tolist()

    @property
    def safety_violations(self) -> int:
        return sum(self.violation_counts.get(k, 0) for k in V.SAFETY_KINDS)

    @property
    def exit_status(self) -> int:
        return 1 if self.safety_violations else 0

    def summary_row(self) -> dict:
        vc = self.violation_counts
        return {
            "schema_version": SCHEMA_VERSION, "n": self.n, "F": self.F, "seed": self.seed,
            "status": "ok", "rounds": self.rounds, "makespan": self.makespan,
            "median_latency": self.median_latency, "mis_size": len(self.mis),
            "violations_total": sum(vc.values()),
            "mis_adjacency": vc.get(V.MIS_ADJACENCY, 0),
            "domination_missing": vc.get(V.DOMINATION_MISSING, 0),
            "crossing_edge": vc.get(V.CROSSING_EDGE, 0),
            "undecided": vc.get(V.UNDECIDED, 0), "degree_bound": vc.get(V.DEGREE_BOUND, 0),
            "good_pairs": self.good_pairs, "bad_pairs": self.bad_pairs,
            "max_bad_lifetime": max(self.bad_pair_lifetimes, default=0),
            "reversions": self.reversions, "all_decided": int(self.all_decided),
            "trace_hash": f"{self.trace_hash:016x}", "flagged": int(self.exit_status != 0),
        }

    def to_dict(self) -> dict:
        return {
            "schema_version": SCHEMA_VERSION, "n": self.n, "F": self.F, "seed": self.seed,
            "alpha": self.alpha, "backend": self.backend, "rounds": self.rounds,
            "params": self.params.to_dict(), "trace_hash": f"{self.trace_hash:016x}",
            "wake": self.wake.tolist(), "decision_round": self.decision_round.tolist(),
            "verdict": self.verdicts, "violation_counts": self.violation_counts,
            "violations": [v.to_dict() for v in self.violations],
            "stragglers": self.stragglers, "makespan": self.makespan,
            "median_latency": self.median_latency, "mis": self.mis,
            "bad_pair_lifetimes": self.bad_pair_lifetimes, "good_pairs": self.good_pairs,
            "bad_pairs": self.bad_pairs, "reversions": self.reversions,
            "max_induced_degree": self.max_induced_degree,
            "aggregates": {k: v.tolist() for k, v in self.aggregates.items()},
        }


MAX_STORED_VIOLATIONS = 10_000
AGGREGATE_KEYS = ("active", "paired", "mis", "eliminated", "good", "bad", "max_gamma_near_good")


def resolve_alpha(cfg: RunConfig, g: G.Graph) -> int:
    if cfg.alpha is not None:
        return int(cfg.alpha)
    try:
        return G.alpha_two(g, cfg.alpha_cap)
    except G.SubsetTooLarge as exc:
        raise ConfigError(f"cannot compute alpha exactly ({exc}); set 'alpha' in the config") from exc


def run(cfg: RunConfig, *, record_deliveries: bool | None = None) -> RunResult:
    g = build_graph(cfg.graph, cfg.seed)
    n = g.node_count
    alpha = resolve_alpha(cfg, g)
    overrides = dict(cfg.overrides)
    if cfg.budget_multiplier is not None:
        overrides["budget_multiplier"] = cfg.budget_multiplier
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        params = P.derive_params(cfg.n_known or max(n, N_KNOWN_FLOOR), cfg.F, alpha, overrides, cfg.preset)
    wake = _schedule_from(cfg.wake, n, cfg.seed)
    budget = params.runtime_budget
    max_rounds = cfg.max_rounds if cfg.max_rounds is not None else int(wake.max()) + budget + 1
    if max_rounds < budget:
        raise ConfigError(f"max_rounds {max_rounds} is below the runtime budget {budget}")
    if record_deliveries is None:
        record_deliveries = bool(cfg.trace.get("path"))
    engine = R.Engine(g, params, wake, cfg.seed, record_deliveries=record_deliveries)

    full = cfg.audit == "full"
    degree_cap = cfg.degree_cap or V.default_degree_cap(n)
    counts = {k: 0 for k in V.VIOLATION_KINDS}
    stored: list[V.Violation] = []
    agg = {k: [] for k in AGGREGATE_KEYS}
    pairs = PairTracker()
    max_deg = 0

    def record(vs):
        for v in vs:
            counts[v.kind] += 1
            if len(stored) < MAX_STORED_VIOLATIONS:
                stored.append(v)

    last_wake = int(wake.max())
    while engine.round < max_rounds:
        rep = engine.advance()
        snap = V.Snapshot.from_engine(engine)
        st = snap.state
        if rep.new_m:
            record(V.check_property_p(snap))
        if rep.new_e or rep.new_m:
            record(V.check_domination(snap))
        agg["active"].append(int(np.count_nonzero(st == P.A)))
        agg["paired"].append(int(np.count_nonzero((st == P.L) | (st == P.H))))
        agg["mis"].append(int(np.count_nonzero(st == P.M)))
        agg["eliminated"].append(int(np.count_nonzero(st == P.E)))
        if full:
            ls, hs, starts = snap.pairs()
            good = V.classify_pairs(snap)
            pairs.update(ls, hs, starts, good)
            agg["good"].append(int(good.sum()))
            agg["bad"].append(int(len(good) - good.sum()))
            agg["max_gamma_near_good"].append(
                V.max_gamma_near(snap, np.concatenate([ls[good], hs[good]]),
                                 np.concatenate([ls[good], hs[good]])) if good.any() else 0.0)
            if len(ls) > 1:
                record(V.crossing_edge_audit(snap))
            deg = V.induced_degrees(snap)
            dmax = int(deg.max()) if n else 0
            max_deg = max(max_deg, dmax)
            if dmax > degree_cap:
                record(V.herald_filter_degree_probe(snap, degree_cap))
        if engine.round > last_wake and engine.all_decided():
            break
    pairs.finish()

    final = V.Snapshot.from_engine(engine, copy=True)
    final_vs = V.check_final(final, budget, wake)
    record([v for v in final_vs if v.kind == V.UNDECIDED])
    # property P and domination were monitored every round; the final pass is a cross-check
    extra = [v for v in final_vs if v.kind != V.UNDECIDED]
    if extra and counts[V.MIS_ADJACENCY] + counts[V.DOMINATION_MISSING] == 0:
        record(extra)

    result = RunResult(
        n=n, F=cfg.F, seed=cfg.seed, alpha=alpha, params=params, rounds=engine.round,
        wake=wake, decision_round=engine.decision_round.copy(), final_state=final.state,
        violation_counts={k: v for k, v in counts.items() if v},
        violations=stored, aggregates={k: np.asarray(v) for k, v in agg.items()},
        bad_pair_lifetimes=pairs.bad_lifetimes, good_pairs=pairs.good_pairs,
        bad_pairs=pairs.bad_pairs, reversions=pairs.reversions, max_induced_degree=max_deg,
        trace_hash=R.trace_hash(engine), engine=engine,
    )
    if cfg.trace.get("path"):
        emit_trace(engine, cfg.trace["path"], stride=int(cfg.trace.get("stride", 1)))
    logger.info("n=%d F=%d seed=%d: %d rounds, |M|=%d, violations=%s", n, cfg.F, cfg.seed,
                engine.round, len(result.mis), result.violation_counts)
    return result


# ------------------------------------------------------------------ sweep

SWEEP_COLUMNS = ("schema_version", "n", "F", "seed", "status", "rounds", "makespan",
                 "median_latency", "mis_size", "violations_total", "mis_adjacency",
                 "domination_missing", "crossing_edge", "undecided", "degree_bound",
                 "good_pairs", "bad_pairs", "max_bad_lifetime", "reversions", "all_decided",
                 "trace_hash", "flagged")


def _cell_config(base: RunConfig, n: int, F: int, seed: int) -> RunConfig:
    graph = dict(base.graph)
    if "file" not in graph:
        graph["n"] = n
        graph.pop("seed", None)
    return base.replace(graph=graph, F=F, seed=seed, trace={})


def _run_cell(args) -> dict:
    base, n, F, seed = args
    try:
        res = run(_cell_config(base, n, F, seed), record_deliveries=False)
        return res.summary_row()
    except Exception as exc:  # recorded as a failed row, the sweep continues
        row = {c: "" for c in SWEEP_COLUMNS}
        row.update(schema_version=SCHEMA_VERSION, n=n, F=F, seed=seed,
                   status=f"failed: {type(exc).__name__}: {exc}", flagged=1)
        return row


def sweep(base: RunConfig, n_list, F_list, seeds, jobs: int = 1) -> list[dict]:
    if not n_list or not F_list or not seeds:
        raise ConfigError("sweep grids must be non-empty")
    cells = [(base, int(n), int(F), int(s)) for n in n_list for F in F_list for s in seeds]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            rows = list(pool.map(_run_cell, cells))
    else:
        rows = [_run_cell(c) for c in cells]
    return sorted(rows, key=lambda r: (r["n"], r["F"], r["seed"]))


def rows_to_csv(rows: list[dict]) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=SWEEP_COLUMNS, lineterminator="\n")
    w.writeheader()
    for row in rows:
        w.writerow({k: row.get(k, "") for k in SWEEP_COLUMNS})
    return buf.getvalue()


# ------------------------------------------------------------------ traces

def emit_trace(engine: R.Engine, path, stride: int = 1) -> Path:
    """Write the transition/delivery JSONL trace ending in a summary record.

    ``stride`` thins delivery records only; transitions are always complete
    because the trace hash covers them.
    """
    path = Path(path)
    trans = engine.transition_log()
    deliv = engine.delivery_log()
    if stride > 1 and len(deliv):
        deliv = deliv[deliv[:, 0] % stride == 0]
    ti = di = 0
    with path.open("w") as fh:
        while ti < len(trans) or di < len(deliv):
            take_d = di < len(deliv) and (ti >= len(trans) or deliv[di, 0] <= trans[ti, 0])
            if take_d:
                r, recv, *m = deliv[di].tolist()
                msg = P.Message.from_row(m)
                rec = {"type": "delivery", "round": r, "receiver": recv, "kind": msg.kind.name,
                       "sender": msg.sender, "state": msg.state_tag.name,
                       "payload": [msg.a, msg.b, msg.c]}
                di += 1
            else:
                r, node, frm, to = trans[ti].tolist()
                rec = {"type": "transition", "round": r, "node": node,
                       "from": P.State(frm).name, "to": P.State(to).name}
                ti += 1
            fh.write(json.dumps(rec) + "\n")
        summary = {"type": "summary", "schema_version": SCHEMA_VERSION,
                   "trace_hash": f"{R.trace_hash(trans):016x}", "rounds": engine.round,
                   "seed": engine.seed, "n": engine.graph.node_count,
                   "deliveries_complete": stride <= 1 and engine.record_deliveries,
                   "params": engine.params.to_dict(), "wake": engine.wake_rounds.tolist()}
        fh.write(json.dumps(summary) + "\n")
    return path


@dataclass
class Trace:
    transitions: np.ndarray
    deliveries: list[dict]
    summary: dict

    @classmethod
    def load(cls, path) -> "Trace":
        trans, deliv, summary = [], [], None
        for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
            if not line.strip():
                continue
            rec = json.loads(line)
            t = rec.get("type")
            if t == "transition":
                trans.append((rec["round"], rec["node"], P.State[rec["from"]], P.State[rec["to"]]))
            elif t == "delivery":
                deliv.append(rec)
            elif t == "summary":
                summary = rec
            else:
                raise ValueError(f"{path}:{lineno}: unknown record type {t!r}")
        if summary is None:
            raise ValueError(f"{path}: missing summary record")
        arr = np.asarray(trans, dtype=np.int64).reshape(-1, 4)
        return cls(arr, deliv, summary)


@dataclass
class TraceReport:
    hash_ok: bool
    recomputed: str
    recorded: str
    illegal: list

    @property
    def ok(self) -> bool:
        return self.hash_ok and not self.illegal


# allowed (from, to) state changes inside one round
_STAGE = {P.ASLEEP: 0, P.W: 1, P.D: 1, P.A: 2, P.HC: 2, P.LC: 2, P.H: 2, P.L: 2, P.M: 3, P.E: 3}


def verify_trace(path, graph: G.Graph | None = None) -> TraceReport:
    """Recompute the trace hash and audit stage monotonicity per node.

    With ``graph`` the final dominator set is also checked for maximality.
    """
    tr = Trace.load(path)
    recomputed = f"{R.trace_hash(tr.transitions):016x}"
    illegal = []
    left_decay = set()
    for r, v, frm, to in tr.transitions.tolist():
        if frm in (P.M, P.E):
            illegal.append(f"round {r}: node {v} left terminal state {P.State(frm).name}")
        if _STAGE[to] < _STAGE[frm] or (v in left_decay and _STAGE[to] <= 1):
            illegal.append(f"round {r}: node {v} moved back {P.State(frm).name}->{P.State(to).name}")
        if _STAGE[to] >= 2:
            left_decay.add(v)
    if graph is not None:
        final = np.zeros(graph.node_count, dtype=np.int64)
        for _, v, _, to in tr.transitions.tolist():
            final[v] = to
        decided = (final == P.M) | (final == P.E)
        if decided.all() and not V.is_maximal_independent(graph, final == P.M):
            illegal.append("final dominator set is not a maximal independent set")
    return TraceReport(recomputed == tr.summary["trace_hash"], recomputed,
                       tr.summary["trace_hash"], illegal)


def replay_node(trace: Trace | str | Path, node: int) -> tuple[list, list]:
    """Re-run one node from its own random stream and recorded deliveries.

    Returns ``(replayed, recorded)`` transition lists of (round, from, to).
    """
    tr = trace if isinstance(trace, Trace) else Trace.load(trace)
    s = tr.summary
    if not s.get("deliveries_complete", False):
        raise ValueError("trace lacks the complete delivery log needed for replay")
    params = P.ProtocolParams.from_dict(s["params"])
    wake_at = int(s["wake"][node])
    inbox = {d["round"]: P.Message.from_dict(d) for d in tr.deliveries if d["receiver"] == node}
    recorded = [tuple(x) for x in tr.transitions[tr.transitions[:, 1] == node][:, [0, 2, 3]].tolist()]
    ctx = P.NodeCtx(id=node, seed=int(s["seed"]))
    replayed = []
    for r in range(wake_at, int(s["rounds"])):
        before = ctx.state
        if r == wake_at:
            ctx = dataclasses.replace(ctx, state=P.State.W, count=0, lonely=0, gamma=0.0)
        if ctx.state != P.State.E:
            _, ctx = P.full_round(ctx, params, inbox.get(r))
        if ctx.state != before:
            replayed.append((r, int(before), int(ctx.state)))
        if ctx.state in P.DECIDED:
            break
    return replayed, recorded
