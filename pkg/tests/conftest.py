import pytest

from wickmart.envelope import calibrate_cone
from wickmart.wickpoly import monomial


@pytest.fixture(scope="session")
def P4():
    return monomial(4)


@pytest.fixture(scope="session")
def cone4(P4):
    return calibrate_cone(P4, 50.0, eps_list=(0.25, 0.5))


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)
