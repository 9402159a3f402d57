from __future__ import annotations

import pytest

import pageleap as pl
from pageleap.workload import fill_random

MiB = 1 << 20


@pytest.fixture(scope="session", autouse=True)
def handler():
    with pl.fault_handler():
        yield


@pytest.fixture
def topo():
    return pl.current_topology()


@pytest.fixture
def make_store():
    made = []

    def make(node=0, capacity=16 * MiB, page_size=4096, **kw):
        s = pl.create_store(node, page_size, capacity, **kw)
        made.append(s)
        return s

    yield make
    for s in made:
        s.close()


@pytest.fixture
def make_region(make_store):
    """A region fully mapped on a fresh node-0 store, filled with random words."""
    made = []

    def make(length=4 * MiB, node=0, seed=0, fill=True):
        src = make_store(node, length)
        r = pl.reserve_region(length)
        made.append(r)
        if length:
            r.map_range(0, src.allocate(length, prefault=True))
            if fill:
                fill_random(r.view(), seed)
        return r

    yield make
    for r in made:
        r.close()


def pytest_configure(config):
    config._acceptance_lines = []


def pytest_terminal_summary(terminalreporter, config):
    lines = getattr(config, "_acceptance_lines", [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines):
            terminalreporter.write_line(line)


@pytest.fixture
def verdict(request):
    """Record one PASS/FAIL/SKIP line for an acceptance criterion, then enforce it."""

    def record(number: int, ok: bool | None, detail: str) -> None:
        word = "SKIP" if ok is None else ("PASS" if ok else "FAIL")
        line = f"criterion {number}: {word} | {detail}"
        request.config._acceptance_lines.append(line)
        print(line)
        if ok is None:
            pytest.skip(detail)
        assert ok, line

    return record
