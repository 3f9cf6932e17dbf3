import pytest

ACCEPTANCE: dict[str, tuple[str, str]] = {}


@pytest.fixture
def criterion():
    """Record an acceptance verdict: criterion(id, status, detail) with status PASS/FAIL/WARN."""

    def record(cid: str, status: str, detail: str) -> None:
        ACCEPTANCE[cid] = (status, detail)

    return record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for cid in sorted(ACCEPTANCE, key=lambda c: int(c.split()[0][2:])):
        status, detail = ACCEPTANCE[cid]
        terminalreporter.write_line(f"[{status}] {cid}: {detail}")
