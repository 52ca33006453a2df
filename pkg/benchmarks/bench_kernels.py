"""Time the hot kernels under both backends.

Each backend runs in its own interpreter because HERALDMIS_BACKEND is read
at import time. Compilation is excluded by a warm-up pass; the end-to-end
trace hashes are compared so a speedup never hides a divergence.

    python benchmarks/bench_kernels.py --n 512 --rounds 200 --repeats 3
"""

from __future__ import annotations

import argparse
import json
import os
import subprocess
import sys

WORKER = r"""
import json, sys, time, warnings
import numpy as np
from heraldmis import graph as G, harness as H, protocol as P, radio as R, rng
from heraldmis._jit import BACKEND

n, F, rounds, repeats, seed = (int(x) for x in sys.argv[1:6])
g = G.gen_unit_disk(n, G.udg_radius_for_degree(n, 8.0), 1.0, seed)
with warnings.catch_warnings():
    warnings.simplefilter("ignore")
    params = P.derive_params(max(n, H.N_KNOWN_FLOOR), F, 9)

def best(fn):
    fn()
    times = []
    for _ in range(repeats):
        t = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t)
    return min(times)

ids = np.arange(n, dtype=np.int64)
steps = np.zeros(n, dtype=np.int64)
def draws():
    for s in range(rounds):
        steps[:] = s
        rng.draw_round(seed, ids, steps, params.n_D, params.n_R, params.n_A)

gen = np.random.default_rng(seed)
act = gen.integers(0, 3, n).astype(np.int64)
chan = gen.integers(0, 4, n).astype(np.int64)
recv = np.empty(n, dtype=np.int64)
def resolve():
    for _ in range(rounds):
        R.resolve_arrays(g, act, chan, recv, BACKEND)

def engine():
    e = R.Engine(g, params, np.zeros(n, dtype=np.int64), seed)
    for _ in range(rounds):
        e.advance()
    return R.trace_hash(e)

out = {"backend": BACKEND, "draw_round": best(draws), "resolve": best(resolve),
       "engine_rounds": best(engine), "trace_hash": f"{engine():016x}"}
print(json.dumps(out))
"""

KERNELS = ("draw_round", "resolve", "engine_rounds")


def run_backend(name: str, args) -> dict:
    env = {**os.environ, "HERALDMIS_BACKEND": name}
    argv = [sys.executable, "-c", WORKER, str(args.n), str(args.F), str(args.rounds),
            str(args.repeats), str(args.seed)]
    res = subprocess.run(argv, env=env, capture_output=True, text=True, check=True)
    return json.loads(res.stdout)


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--n", type=int, default=512)
    ap.add_argument("--F", type=int, default=8)
    ap.add_argument("--rounds", type=int, default=200)
    ap.add_argument("--repeats", type=int, default=3)
    ap.add_argument("--seed", type=int, default=1)
    args = ap.parse_args(argv)

    fast, slow = run_backend("numba", args), run_backend("numpy", args)
    if fast["backend"] != "numba":
        print("numba is not importable; only the numpy backend ran", file=sys.stderr)
    print(f"n={args.n} F={args.F} rounds={args.rounds} (best of {args.repeats})")
    print(f"{'kernel':<14}{'numba s':>10}{'numpy s':>10}{'speedup':>10}")
    for k in KERNELS:
        print(f"{k:<14}{fast[k]:>10.4f}{slow[k]:>10.4f}{slow[k] / fast[k]:>9.1f}x")
    same = fast["trace_hash"] == slow["trace_hash"]
    print(f"trace hash {fast['trace_hash']} {'matches' if same else 'DIFFERS from ' + slow['trace_hash']}")
    return 0 if same else 1


if __name__ == "__main__":
    sys.exit(main())
