"""Shared fixtures: the cached desk-scale trained model and the acceptance
report block printed at the end of the run."""

from __future__ import annotations

import pytest

from _train_cache import build_or_load

_CRITERION_LINES: list[str] = []


@pytest.fixture(scope="session")
def desk_model():
    """(trained model, per-epoch loss history, build metadata).

    Trains from scratch on the first ever run (many minutes); afterwards
    loads the artifact cached under tests/.cache.
    """
    return build_or_load()


@pytest.fixture
def criterion_report():
    """Record a one-line verdict, echoed in the terminal summary."""

    def _report(line: str) -> None:
        _CRITERION_LINES.append(line)
        print(line)

    return _report


def pytest_terminal_summary(terminalreporter):
    if _CRITERION_LINES:
        terminalreporter.section("acceptance criteria")
        for line in _CRITERION_LINES:
            terminalreporter.write_line(line)
