"""Shared fixtures.

The paper-geometry bases (2 um grid) are solved once per session through the
CLI cache; smaller fixtures use a reduced trap that solves in seconds.
"""
import time

import numpy as np
import pytest

from microtrap.cli import Run, cmd_analyze, cmd_solve, load_config
from microtrap.fields import solve_all
from microtrap.geometry import GeometryParams, paper_mask


ACCEPTANCE = pytest.StashKey[list]()


@pytest.fixture
def acceptance_log(request):
    """Criterion lines, repeated in the terminal summary."""
    return request.config.stash.setdefault(ACCEPTANCE, [])


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(ACCEPTANCE, [])
    if lines:
        terminalreporter.write_sep("=", "acceptance criteria")
        for line in sorted(lines, key=lambda x: int(x.split()[1])):
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def paper_run(tmp_path_factory):
    run = Run(load_config(), tmp_path_factory.mktemp("paper"))
    t0 = time.perf_counter()
    cmd_solve(run)
    run.results["solve_time"] = time.perf_counter() - t0
    return run


@pytest.fixture(scope="session")
def bases(paper_run):
    return cmd_solve(paper_run)


@pytest.fixture(scope="session")
def drive(paper_run, bases):
    return paper_run.drive(bases.labels)


@pytest.fixture(scope="session")
def analysis(paper_run, bases):
    """``(SecularAnalysis, DepthResult)`` at the default operating point."""
    t0 = time.perf_counter()
    out = cmd_analyze(paper_run)
    paper_run.results["analyze_time"] = time.perf_counter() - t0
    return out


SMALL = dict(s=20e-6, h=4e-6, t=2e-6, w=40e-6, g=10e-6, n_segments=3, cantilever_length=20e-6)


@pytest.fixture(scope="session")
def small_params():
    return GeometryParams(**SMALL)


@pytest.fixture(scope="session")
def small_mask(small_params):
    return paper_mask(2e-6, small_params)


@pytest.fixture(scope="session")
def small_bases(small_mask):
    return solve_all(small_mask, tol=1e-7)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
