import numpy as np
import pytest

from noniso.skeleton import Skeleton, correlation_for_skeleton
from noniso.schedule import make_schedule


def chain(J, length=1.0):
    return Skeleton([f"j{i}" for i in range(J)], [(i, i + 1) for i in range(J - 1)], [length] * (J - 1))


def random_connected(rng, J, p_extra=0.3):
    edges = [(int(rng.integers(0, k)), k) for k in range(1, J)]
    have = {tuple(sorted(e)) for e in edges}
    for i in range(J):
        for j in range(i + 1, J):
            if (i, j) not in have and rng.random() < p_extra:
                edges.append((i, j))
    return Skeleton([f"j{i}" for i in range(J)], edges, [1.0] * len(edges))


@pytest.fixture
def chain3():
    return chain(3)


@pytest.fixture
def blend3(chain3):
    return make_schedule(correlation_for_skeleton(chain3), T=10, kind="blend")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# one line per acceptance criterion, printed after the run
def pytest_configure(config):
    config._acceptance = []


def pytest_terminal_summary(terminalreporter, config):
    if config._acceptance:
        terminalreporter.section("acceptance criteria")
        for line in sorted(config._acceptance):
            terminalreporter.write_line(line)


@pytest.fixture
def acceptance(request):
    return request.config._acceptance
