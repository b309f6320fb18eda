import numpy as np
import pytest

from sscinv.grid import bar_sdf, box_region, build_simulation_grid, sphere_sdf


@pytest.fixture(scope="session")
def ball_grid():
    return build_simulation_grid(sphere_sdf(2.6))


@pytest.fixture(scope="session")
def bar_grid():
    # clamped at the low-x end (the bar starts at x = 3.25)
    return build_simulation_grid(bar_sdf(6.0, 2.5), box_region([-1e3, -1e3, -1e3], [4.0, 1e3, 1e3]))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


ACCEPTANCE = pytest.StashKey[list]()


@pytest.fixture
def acceptance(request):
    """Record one pass/fail line; every line is echoed again in the terminal summary."""
    lines = request.config.stash.setdefault(ACCEPTANCE, [])

    def record(criterion, ok, detail):
        line = f"{criterion} {'PASS' if ok else 'FAIL'}: {detail}"
        lines.append(line)
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(ACCEPTANCE, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines):
            terminalreporter.write_line(line)
