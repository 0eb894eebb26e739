import numpy as np
import pytest
from hypothesis import strategies as st

from suvm.planted import detection_fixture
from suvm.srn import SpringEdge, Srn


@pytest.fixture(scope="session")
def fixture_model():
    """Planted scatter model, its dictionary and distractor patches."""
    return detection_fixture(0)


def random_srn(rng: np.random.Generator, n: int, connected: bool = True, extra: int | None = None) -> Srn:
    """Random spring network over words 0..n-1 (a random tree plus chords)."""
    pairs = set()
    if connected:
        for i in range(1, n):
            pairs.add((int(rng.integers(0, i)), i))
    extra = n // 2 if extra is None else extra
    for _ in range(extra):
        a, b = sorted(rng.choice(n, 2, replace=False).tolist())
        pairs.add((a, b))
    edges = [SpringEdge(i, j, tuple(rng.uniform(0.5, 20.0, 3)), tuple(rng.normal(0.0, 1.0, 3)))
             for i, j in sorted(pairs)]
    return Srn(tuple(range(n)), edges)


@st.composite
def srns(draw, min_nodes=2, max_nodes=6, connected=True):
    n = draw(st.integers(min_nodes, max_nodes))
    seed = draw(st.integers(0, 2**32 - 1))
    return random_srn(np.random.default_rng(seed), n, connected)


# -- acceptance report ---------------------------------------------------------------

ACCEPTANCE: dict[str, list[tuple[str, str]]] = {}


def record(criterion: str, status: str, detail: str = "") -> None:
    """Note one check of an acceptance criterion; status is PASS, FAIL or SKIP."""
    ACCEPTANCE.setdefault(criterion, []).append((status, detail))


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for name, checks in ACCEPTANCE.items():
        statuses = {s for s, _ in checks}
        status = "FAIL" if "FAIL" in statuses else "SKIP" if statuses == {"SKIP"} else "PASS"
        detail = "; ".join(d for _, d in checks if d)
        terminalreporter.write_line(f"{status}  {name}: {detail}")
