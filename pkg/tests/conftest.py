import pytest

# acceptance verdicts, filled by tests/test_acceptance.py
VERDICTS: dict = {}


def pytest_terminal_summary(terminalreporter):
    if not VERDICTS:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(VERDICTS):
        ok, detail = VERDICTS[k]
        terminalreporter.write_line(f"criterion {k:2d}: {'PASS' if ok else 'FAIL'}  {detail}")


@pytest.fixture
def verdict():
    def record(k, ok, detail):
        VERDICTS[k] = (bool(ok), detail)
        print(f"criterion {k}: {'PASS' if ok else 'FAIL'}  {detail}")
        assert ok, detail
    return record
