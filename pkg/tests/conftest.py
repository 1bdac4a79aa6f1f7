import pytest

# criterion number -> (passed, detail); filled by tests/test_acceptance.py
ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def pytest_terminal_summary(terminalreporter):
    ran = [
        r
        for key in ("passed", "failed", "error")
        for r in terminalreporter.stats.get(key, [])
        if "test_acceptance.py" in getattr(r, "nodeid", "")
    ]
    if not ran:
        return
    terminalreporter.section("acceptance criteria")
    for n in range(1, 13):
        if n in ACCEPTANCE:
            ok, detail = ACCEPTANCE[n]
            terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
        elif any(f"test_criterion_{n:02d}" in r.nodeid for r in ran):
            terminalreporter.write_line(f"criterion {n:2d}: FAIL  did not complete")


@pytest.fixture
def record():
    def _record(n: int, ok: bool, detail: str) -> None:
        ACCEPTANCE[n] = (bool(ok), detail)
        print(f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}")
        assert ok, detail

    return _record
