import pytest

# criterion number -> (passed, summary); filled by test_acceptance.py
ACCEPTANCE: dict[str, tuple[bool, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE, key=lambda k: (int(k.split()[0]), k)):
        passed, summary = ACCEPTANCE[number]
        terminalreporter.write_line(f"[{'PASS' if passed else 'FAIL'}] criterion {number}: {summary}")


@pytest.fixture
def record_criterion():
    def record(number, passed: bool, summary: str):
        number = str(number)
        ACCEPTANCE[number] = (bool(passed), summary)
        print(f"[{'PASS' if passed else 'FAIL'}] criterion {number}: {summary}")
        return passed

    return record
