import sys

import numpy as np
import pytest
from hypothesis import settings

settings.register_profile("default", max_examples=60, deadline=None)
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def random_layout(rng, d):
    """Random contiguous split of ``d`` into 1..min(d, 8) parts."""
    m = int(rng.integers(1, min(d, 8) + 1))
    cuts = np.sort(rng.choice(np.arange(1, d), size=m - 1, replace=False)) if m > 1 else np.array([], int)
    bounds = np.concatenate([[0], cuts, [d]])
    from csattn import SubspaceLayout

    return SubspaceLayout(tuple(int(x) for x in np.diff(bounds)))


def pytest_terminal_summary(terminalreporter):
    """One line per acceptance criterion, whether it passed or failed."""
    mod = sys.modules.get("test_acceptance")
    details = getattr(mod, "RESULTS", {})
    lines = []
    for outcome in ("passed", "failed"):
        for rep in terminalreporter.stats.get(outcome, []):
            if "test_acceptance.py::test_c" in rep.nodeid and rep.when == "call":
                name = rep.nodeid.split("::test_c")[1]
                n = int(name[:2])
                verdict = "PASS" if outcome == "passed" else "FAIL"
                line = details.get(n, "")
                detail = line[line.index("(") :] if "(" in line else ""
                lines.append(f"criterion {n:02d} {name[3:].replace('_', ' ')}: {verdict} {detail}".rstrip())
    if lines:
        terminalreporter.write_sep("=", "acceptance criteria")
        for line in sorted(lines):
            terminalreporter.write_line(line)
