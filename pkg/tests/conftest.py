import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).resolve().parent))

ACCEPTANCE: dict[int, str] = {}


class Criterion:
    def __init__(self):
        self.lines = []

    def __call__(self, number: int, name: str, ok: bool, detail: str = "") -> None:
        line = f"criterion {number:>2} {'PASS' if ok else 'FAIL'}  {name}"
        if detail:
            line += f"  [{detail}]"
        self.lines.append((number, line))
        ACCEPTANCE[number] = line
        assert ok, line


@pytest.fixture
def criterion(request):
    rec = Criterion()
    yield rec
    if not rec.lines:
        number = getattr(request.node.function, "criterion_number", 0)
        ACCEPTANCE.setdefault(number, f"criterion {number:>2} FAIL  {request.node.name}  [error]")


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        terminalreporter.write_line(ACCEPTANCE[n])
