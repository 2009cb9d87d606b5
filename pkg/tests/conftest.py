import pytest

from dkspace.codebook import load_shipped

ACCEPTANCE_LINES: list[str] = []


@pytest.fixture(scope="session")
def rcc():
    return load_shipped("rcc")


@pytest.fixture(scope="session")
def sc():
    return load_shipped("sc")


@pytest.fixture
def verdict():
    """Record and print one PASS/FAIL line, then assert on it."""

    def check(number: int, name: str, ok: bool, detail: str = "") -> None:
        line = f"{'PASS' if ok else 'FAIL'}  [{number:2d}] {name}" + (f": {detail}" if detail else "")
        ACCEPTANCE_LINES.append(line)
        print(line)
        assert ok, line

    return check


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda l: int(l.split("[")[1].split("]")[0])):
            terminalreporter.write_line(line)
