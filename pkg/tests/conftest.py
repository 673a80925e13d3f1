import pytest

from mmsurv.curation import GeneSet, build_bipartite


@pytest.fixture
def tiny_graph():
    """Three pathways over six genes; P3 shares A with P1 and E with P2."""
    sets = [
        GeneSet("P1", "p1", "custom", frozenset({"A", "B", "C"})),
        GeneSet("P2", "p2", "custom", frozenset({"C", "D", "E"})),
        GeneSet("P3", "p3", "custom", frozenset({"E", "F", "A"})),
    ]
    return build_bipartite(sets)


def pytest_terminal_summary(terminalreporter):
    from acceptance_log import LINES

    if LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(LINES, key=lambda s: int(s.split()[2])):
            terminalreporter.write_line(line)
