import json
from pathlib import Path

import pytest

ACCEPTANCE_LINES: dict[int, str] = {}
ACCEPTANCE_DATA: dict[int, dict] = {}


@pytest.fixture
def record():
    """record(n, ok, message, **data): store a pass/fail line for criterion n."""

    def _record(n: int, ok: bool, message: str, **data):
        ACCEPTANCE_LINES[n] = f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {message}"
        ACCEPTANCE_DATA[n] = {"pass": bool(ok), "message": message, **data}
        print(ACCEPTANCE_LINES[n])
        return ok

    return _record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(ACCEPTANCE_LINES[n])
    out = Path(__file__).resolve().parent.parent / "acceptance_results.json"
    merged = json.loads(out.read_text()) if out.exists() else {}
    merged.update({str(k): v for k, v in ACCEPTANCE_DATA.items()})
    ordered = {k: merged[k] for k in sorted(merged, key=int)}
    out.write_text(json.dumps(ordered, indent=2, default=float) + "\n")
