import pytest

# criterion number -> (ok, one-line detail), filled by the acceptance suite
CRITERIA = {}
N_CRITERIA = 11


@pytest.fixture
def record():
    def _record(number, ok, detail):
        CRITERIA[number] = (bool(ok), detail)
        print(f"{'PASS' if ok else 'FAIL'} criterion {number}: {detail}")

    return _record


def pytest_terminal_summary(terminalreporter):
    if not CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in range(1, N_CRITERIA + 1):
        ok, detail = CRITERIA.get(n, (False, "did not complete"))
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'} criterion {n}: {detail}")
