import numpy as np
import pytest
from hypothesis import strategies as st

from hierlearn.hierarchy import build_tree

FIG1_EDGES = [
    ("11", "21"), ("11", "22"),
    ("21", "31"), ("21", "32"), ("21", "33"),
    ("22", "34"), ("22", "35"), ("22", "36"),
]


def fig1_tree():
    return build_tree(FIG1_EDGES)


def random_tree(rng: np.random.Generator, max_nodes: int = 12, prefix: str = "v"):
    """Random rooted tree with between 2 and ``max_nodes`` nodes; no single-child chains required."""
    n = int(rng.integers(2, max_nodes + 1))
    labels = [f"{prefix}{i}" for i in range(n)]
    edges = [(labels[int(rng.integers(0, i))], labels[i]) for i in range(1, n)]
    return build_tree(edges)


def random_spd(rng: np.random.Generator, n: int, cond: float = 50.0) -> np.ndarray:
    Q, _ = np.linalg.qr(rng.normal(size=(n, n)))
    eig = np.exp(rng.uniform(0, np.log(cond), n))
    return (Q * eig) @ Q.T


@st.composite
def trees(draw, max_nodes: int = 12, prefix: str = "v"):
    n = draw(st.integers(2, max_nodes))
    parents = [draw(st.integers(0, i - 1)) for i in range(1, n)]
    labels = [f"{prefix}{i}" for i in range(n)]
    return build_tree([(labels[p], labels[i]) for i, p in enumerate(parents, start=1)])


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


_ACCEPTANCE = {}


def pytest_runtest_logreport(report):
    if "test_acceptance.py::test_criterion_" not in report.nodeid:
        return
    if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
        _ACCEPTANCE[report.nodeid] = report.outcome


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for nodeid in sorted(_ACCEPTANCE, key=lambda s: int(s.split("test_criterion_")[1].split("_")[0])):
        name = nodeid.split("::")[-1][len("test_criterion_"):]
        num, _, title = name.partition("_")
        verdict = "PASS" if _ACCEPTANCE[nodeid] == "passed" else "FAIL"
        terminalreporter.write_line(f"criterion {num:>2} {verdict}  {title.replace('_', ' ')}")
