from __future__ import annotations

import pytest

from addressloc.synthcity import CityConfig
from helpers import labeled_city

_ACCEPTANCE: dict[str, tuple[bool, str]] = {}


@pytest.fixture
def acceptance():
    """Record one acceptance outcome; the summary prints a line per criterion."""

    def record(key: str, passed: bool, detail: str = "") -> bool:
        _ACCEPTANCE[key] = (bool(passed), detail)
        return bool(passed)

    return record


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(_ACCEPTANCE, key=lambda k: int(k.split()[0])):
        passed, detail = _ACCEPTANCE[key]
        terminalreporter.write_line(f"{'PASS' if passed else 'FAIL'}  {key}  {detail}")


@pytest.fixture(scope="session")
def small_city():
    return labeled_city(CityConfig(rows=3, cols=4, locations_per_segment=6, views_per_location=3, feature_dim=8))
