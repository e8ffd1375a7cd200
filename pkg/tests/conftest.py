import os

# numba sizes its thread pool at import time; ask for more workers than this
# machine may have so thread-count invariance can be exercised anywhere
os.environ.setdefault("NUMBA_NUM_THREADS", "8")

import numpy as np  # noqa: E402
import pytest  # noqa: E402

from etchsim import engine, rules  # noqa: E402
from etchsim.lattice import Face  # noqa: E402

BOTTOM_SOLID = (Face.PERIODIC,) * 4 + (Face.SOLID, Face.EXPOSED)
ALL_SOLID = (Face.SOLID,) * 6
KOH_RATES = {"100": 1.0, "110": 2.0, "111": 1.0 / 200.0}


@pytest.fixture
def koh_spec():
    probs, dt = rules.rates_to_probabilities(KOH_RATES)
    return engine.StepSpec(rules.RuleTable(probabilities=probs), dt)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# -- acceptance summary: one line per criterion ------------------------------------

_criteria = {}


def pytest_collection_modifyitems(items):
    for item in items:
        m = item.get_closest_marker("criterion")
        if m is not None:
            item.user_properties.append(("criterion", m.args))


def pytest_runtest_logreport(report):
    props = dict(report.user_properties)
    if "criterion" in props and (report.when == "call" or report.failed):
        _criteria[props["criterion"]] = (report.passed, props.get("detail", ""))


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for (num, title), (ok, detail) in sorted(_criteria.items()):
        line = f"{'✅' if ok else '❌'} {num:2d}. {title}"
        terminalreporter.write_line(line + (f" ({detail})" if detail else ""))
