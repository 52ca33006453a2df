import os
import sys
import subprocess

import networkx as nx
import numpy as np
import pytest

from heraldmis import graph as G
from heraldmis import protocol as P


def to_nx(g: G.Graph) -> nx.Graph:
    h = nx.Graph()
    h.add_nodes_from(range(g.node_count))
    h.add_edges_from(g.edges.tolist())
    return h


def nx_mis_size(h: nx.Graph) -> int:
    # maximum independent set == maximum clique of the complement
    if h.number_of_nodes() == 0:
        return 0
    return max(len(c) for c in nx.find_cliques(nx.complement(h)))


def quiet_params(n, F=8, alpha=2, **ov):
    import warnings
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        return P.derive_params(n, F, alpha, ov or None)


def run_cli(*args, env=None, cwd=None):
    e = dict(os.environ)
    e.update(env or {})
    return subprocess.run([sys.executable, "-m", "heraldmis.cli", *map(str, args)],
                          capture_output=True, text=True, env=e, cwd=cwd)


@pytest.fixture
def small_udg():
    return G.gen_unit_disk(40, 0.25, seed=11)


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
