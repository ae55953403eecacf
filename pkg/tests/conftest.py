import sys

import numpy as np
import pytest
from hypothesis import settings

from predictor.model import Circuit, LinkSpec, NetworkTopology, NodeSpec, SourceModel

settings.register_profile("default", deadline=None, max_examples=60)
settings.load_profile("default")


def make_topology(caps, paths, queue_limit=50.0, delay=0.04, source=None):
    """Nodes named n0.., links created for every consecutive hop pair."""
    nodes = tuple(NodeSpec(f"n{i}", float(c), float(c), queue_limit) for i, c in enumerate(caps))
    pairs = []
    for p in paths:
        for a, b in zip(p, p[1:]):
            if (a, b) not in pairs:
                pairs.append((a, b))
    links = tuple(LinkSpec(f"n{a}", f"n{b}", delay) for a, b in pairs)
    src = source or SourceModel("infinite", 0.0)
    circuits = tuple(Circuit(i, tuple(f"n{h}" for h in p), src) for i, p in enumerate(paths))
    return NetworkTopology(nodes, links, circuits)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(results):
        ok, detail = results[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
