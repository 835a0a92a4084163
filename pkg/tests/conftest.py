from __future__ import annotations

import numpy as np
import pytest
from hypothesis import settings

from uvtomo.model import PointSourceModel, Rng, random_model

settings.register_profile("default", max_examples=25, deadline=None)
settings.load_profile("default")


@pytest.fixture
def three_sources() -> PointSourceModel:
    # small model whose projections stay well inside an M=50, delta=0.01 field of view
    return random_model(3, 0.3, 0.05, Rng(1), max_radius=0.3)


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(12345)


ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def acceptance():
    """Record one pass/fail line per criterion and fail the test when the gate is missed."""

    def record(name: str, ok: bool, detail: str) -> None:
        line = f"[{'PASS' if ok else 'FAIL'}] {name}: {detail}"
        ACCEPTANCE_LINES.append(line)
        print(line)
        assert ok, line

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
