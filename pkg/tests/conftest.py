import numpy as np
import pytest

from geomae.voxelizer import GridConfig

ACCEPTANCE_NAMES = {
    1: "oracle equivalence",
    2: "analytic geometry",
    3: "eigensolver",
    4: "equivariance",
    5: "mask determinism and count",
    6: "gradient check",
    7: "training sanity",
    8: "pipeline determinism",
    9: "configuration fidelity",
    10: "throughput (reported, not gated)",
}

# desk-scale grid used by the oracle and determinism scenes
DESK_GRID = GridConfig((0.0, 0.0, -1.0), (8.0, 8.0, 3.0), (0.5, 0.5, 4.0))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_configure(config):
    config._acceptance = {}
    config._acceptance_notes = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("acceptance")
    if mark is None:
        return
    n = mark.args[0]
    store = item.config._acceptance
    if rep.when == "call" or (rep.when == "setup" and rep.failed):
        prev = store.get(n, "PASS")
        store[n] = "FAIL" if rep.failed or prev == "FAIL" else "PASS"
    note = getattr(item, "acceptance_note", None)
    if note:
        item.config._acceptance_notes[n] = note


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    store = getattr(config, "_acceptance", {})
    if not store:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(store):
        line = f"criterion {n:2d} [{store[n]}] {ACCEPTANCE_NAMES.get(n, '')}"
        note = config._acceptance_notes.get(n)
        if note:
            line += f"  ({note})"
        terminalreporter.write_line(line)
