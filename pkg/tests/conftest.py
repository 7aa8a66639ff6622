import os

os.environ.setdefault("KRFLOW_THREADS", "1")

import numpy as np
import pytest

from krflow.flow import negative_patch, reference_flow_problem, run_flow
from krflow.grid import BaseGrid

# acceptance criterion number -> one-line description
CRITERIA = {
    1: "manufactured GKE solve on a 128^2 torus",
    2: "constant-density exactness",
    3: "continuity path matches direct solve",
    4: "singular exponents of the density",
    5: "L^p integrability thresholds",
    6: "Weil-Petersson density and Hodge-metric identity",
    7: "curvature identity of the limit metric",
    8: "fiber-area law at every accepted step",
    9: "fiber collapse rate and stationarity",
    10: "flow converges to the base limit",
    11: "scalar-curvature identity and lower bound",
    12: "parabolic Schwarz inequality",
    13: "degenerating Calabi-Yau family",
    14: "uniqueness probes",
    15: "deterministic CSV output",
}

_outcomes = {}


def pytest_runtest_logreport(report):
    name = report.nodeid.rsplit("::", 1)[-1]
    if "test_acceptance" not in report.nodeid or not name.startswith("test_criterion_"):
        return
    number = int(name.split("_")[2])
    failed = report.failed
    if report.when == "call" or failed:
        prev = _outcomes.get(number, True)
        _outcomes[number] = prev and not failed and not report.skipped


def pytest_terminal_summary(terminalreporter):
    if not _outcomes:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_outcomes):
        verdict = "PASS" if _outcomes[number] else "FAIL"
        terminalreporter.write_line(f"criterion {number:2d}: {verdict}  {CRITERIA[number]}")


@pytest.fixture(scope="session")
def reference_runs():
    """Reference flow from three initial seeds (32^2 base, 16^2 fiber, t_max = 12)."""
    runs = {}
    for kind in ("fiber", "zero", "random"):
        problem = reference_flow_problem(seed_kind=kind, seed=7, monitor_every=0.25)
        series, snaps = run_flow(problem, snapshot_every=12.0)
        runs[kind] = (problem, series, snaps)
    return runs


@pytest.fixture(scope="session")
def patch_run():
    """Reference flow with a negatively curved Schwarz form on a patch."""
    base = BaseGrid("torus", 32, 32)
    chi_b, mask, K = negative_patch(base, beta=0.1, level=0.5)
    problem = reference_flow_problem(chi_b=chi_b, schwarz_mask=mask, monitor_every=0.5)
    series, _ = run_flow(problem)
    return problem, series, K


@pytest.fixture
def rng():
    return np.random.default_rng(20240607)
