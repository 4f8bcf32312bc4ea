import pytest

_LINES = {}


class CriterionReport:
    def record(self, number, passed, detail):
        status = {True: "PASS", False: "FAIL", None: "SKIP"}[passed]
        _LINES[number] = f"criterion {number:>2}: {status}  {detail}"
        print(_LINES[number])


@pytest.fixture(scope="session")
def criteria():
    return CriterionReport()


def pytest_terminal_summary(terminalreporter):
    if _LINES:
        terminalreporter.section("acceptance criteria")
        for n in sorted(_LINES):
            terminalreporter.write_line(_LINES[n])
