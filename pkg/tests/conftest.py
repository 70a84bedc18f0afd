import pytest

from d2dfl import datasets

_ACCEPTANCE = []


@pytest.fixture(scope="session")
def synthetic_full():
    return datasets.gen_synthetic(per_class=150, seed=0)


@pytest.fixture(scope="session")
def features(synthetic_full):
    return datasets.preprocess(synthetic_full)


@pytest.fixture
def report():
    """Record one acceptance line: report("5a", passed, "detail")."""

    def _report(criterion, passed, detail):
        line = f"criterion {criterion}: {'PASS' if passed else 'FAIL'}  {detail}"
        _ACCEPTANCE.append(line)
        print(line)
        return passed

    return _report


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in _ACCEPTANCE:
            terminalreporter.write_line(line)
