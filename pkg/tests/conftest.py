import os

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from tsl.corpus import PROBLEMS, load_source, shipped_classes
from tsl.minilang import parse

settings.register_profile("default", deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))


@pytest.fixture(scope="session")
def classes():
    return shipped_classes()


@pytest.fixture(scope="session")
def oracles(classes):
    return {c.label: c.oracle for c in classes}


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def program(src: str, label=None):
    return parse(src, label=label)


def problem_of(label: str) -> str:
    return label.split("/")[0]


def spec_for(label: str):
    return PROBLEMS[problem_of(label)]


def oracle_source(label: str) -> str:
    return load_source(label.replace("/", "_"))


# one line per acceptance criterion, printed after the run
ACCEPTANCE: list = []


def record(criterion: str, ok: bool, detail: str, known_gap: bool = False) -> None:
    ACCEPTANCE.append((criterion, ok, detail + (" (known gap, see notes)" if known_gap and not ok else "")))
    assert ok, f"criterion {criterion}: {detail}"


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for criterion, ok, detail in ACCEPTANCE:
        terminalreporter.write_line(f"[{'PASS' if ok else 'FAIL'}] criterion {criterion}: {detail}")
