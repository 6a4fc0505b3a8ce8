import numpy as np
import pytest

from seedex.embed import EmbeddingTable
from seedex.graph import TypedGraph
from seedex.synth import SynthConfig, generate_dataset


def make_graph(n, edges, relations=("r0",), types=("t",), type_ids=None):
    type_ids = [0] * n if type_ids is None else type_ids
    return TypedGraph(list(types), list(relations), type_ids, [f"node {i}" for i in range(n)], edges)


def unit_rows(rng, n, d):
    x = rng.standard_normal((n, d))
    return EmbeddingTable.from_array(x)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_dataset():
    cfg = SynthConfig(node_counts={"disease": 150, "gene": 150, "pathway": 150, "drug": 150}, num_queries=60, seed=3)
    return generate_dataset(cfg)


def pytest_terminal_summary(terminalreporter):
    """One pass/fail line per acceptance criterion, in criterion order."""
    import sys
    mod = sys.modules.get("test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for num in sorted(results):
        ok, detail = results[num]
        terminalreporter.write_line(f"criterion {num:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
