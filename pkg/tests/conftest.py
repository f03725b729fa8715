import os

import numpy as np
import pytest

from twistwire.discretization import assemble_twistframe_hamiltonian, build_grid
from twistwire.model import WaveguideSpec


def pytest_collection_modifyitems(config, items):
    if os.environ.get("TWISTWIRE_EXTENDED"):
        return
    skip = pytest.mark.skip(reason="extended suite; set TWISTWIRE_EXTENDED=1")
    for item in items:
        if "extended" in item.keywords:
            item.add_marker(skip)


class _Problem:
    def __init__(self, spec, resolution=1.0):
        self.spec = spec
        self.grid = build_grid(spec, resolution)
        self.H = assemble_twistframe_hamiltonian(self.grid, spec)


_CACHE = {}


@pytest.fixture(scope="session")
def problem():
    """Factory for assembled 1 nm problems, cached for the session."""

    def make(**kwargs):
        key = tuple(sorted(kwargs.items()))
        if key not in _CACHE:
            _CACHE[key] = _Problem(WaveguideSpec(**kwargs))
        return _CACHE[key]

    return make


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def report():
    """Record one PASS/FAIL line for the acceptance summary, then assert."""

    def _report(number, ok, detail):
        line = f"criterion {number:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
        ACCEPTANCE_LINES.append(line)
        print(line)
        assert ok, line

    return _report


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
