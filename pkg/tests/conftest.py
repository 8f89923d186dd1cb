import pytest

from airwaytopo.phantom import PhantomSpec, generate_phantom

# criterion lines collected by test_acceptance.py, echoed in the terminal summary
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def phantom4():
    return generate_phantom(PhantomSpec(generations=4, seed=7))


@pytest.fixture(scope="session")
def phantom6():
    return generate_phantom(PhantomSpec(generations=6, seed=0))


@pytest.fixture(scope="session")
def acceptance_log():
    return ACCEPTANCE_LINES
