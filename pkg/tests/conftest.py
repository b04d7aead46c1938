import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

N_CRITERIA = 12
_verdicts: dict[int, tuple[bool, str]] = {}


@pytest.fixture
def verdict():
    """Record ``(number, passed, detail)`` for the acceptance summary, then assert."""

    def record(number: int, passed: bool, detail: str):
        _verdicts[number] = (bool(passed), detail)
        line = f"criterion {number:>2}: {'PASS' if passed else 'FAIL'}  {detail}"
        print(line)
        assert passed, line

    return record


def pytest_terminal_summary(terminalreporter):
    ran = [item for item in terminalreporter.stats.get("passed", []) + terminalreporter.stats.get("failed", [])
           if item.nodeid.split("::")[0].endswith("test_acceptance.py")]
    if not ran and not _verdicts:
        return
    terminalreporter.section("acceptance criteria")
    for k in range(1, N_CRITERIA + 1):
        if k in _verdicts:
            ok, detail = _verdicts[k]
            terminalreporter.write_line(f"criterion {k:>2}: {'PASS' if ok else 'FAIL'}  {detail}")
        else:
            terminalreporter.write_line(f"criterion {k:>2}: ----  no result (deselected or errored)")
