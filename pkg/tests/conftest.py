from __future__ import annotations

from pathlib import Path

import pytest

from astride.dfd import load_diagram

FIXTURES = Path(__file__).resolve().parents[1] / "src" / "astride" / "fixtures"

# criterion number -> (title, passed, detail); filled by test_acceptance.py
ACCEPTANCE: dict[int, tuple[str, bool, str]] = {}


@pytest.fixture
def fixture_graph():
    def load(name: str):
        return load_diagram(FIXTURES / f"{name}.mmd")
    return load


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE):
        title, ok, detail = ACCEPTANCE[number]
        terminalreporter.write_line(f"[{'PASS' if ok else 'FAIL'}] {number}. {title} ({detail})")
