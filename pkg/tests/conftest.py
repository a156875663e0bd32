import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from rcm.env import Distribution, EnvironmentLaw, LatticeDomain, build_environment

settings.register_profile("default", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


def small_envs():
    """Fixture set shared by the structural tests: boxes, tori, dilute and degenerate cases."""
    out = []
    specs = [
        ((5,), "periodic", EnvironmentLaw.constant(1.0)),
        ((7,), "free", EnvironmentLaw.iid(Distribution("uniform", (0.5, 2.0)))),
        ((4, 4), "periodic", EnvironmentLaw.iid(Distribution("uniform", (0.5, 2.0)))),
        ((5, 4), "free", EnvironmentLaw.iid(Distribution("log_uniform", (0.1, 10.0)))),
        ((6, 6), "absorbing", EnvironmentLaw.iid(Distribution("two_point", (1.0, 0.5, 2.0)))),
        ((6, 6), "free", EnvironmentLaw.percolation(0.7)),
        ((3, 3, 3), "periodic", EnvironmentLaw.iid(Distribution("uniform", (0.2, 1.0)))),
    ]
    for i, (sides, mode, law) in enumerate(specs):
        out.append(build_environment(law, LatticeDomain(sides, mode), seed=100 + i))
    return out


@pytest.fixture(scope="session")
def fixture_envs():
    return small_envs()


def dense_laplacian(env):
    """-L as a dense matrix built edge by edge, independent of the sparse assembly."""
    n = env.domain.n_vertices
    A = np.zeros((n, n))
    u, v, _ = env.domain.edges
    for a, b, w in zip(u, v, env.values):
        A[a, b] -= w
        A[b, a] -= w
        A[a, a] += w
        A[b, b] += w
    return A


# ---------------------------------------------------------------------------
# acceptance verdicts: one PASS/FAIL line per criterion, repeated in the summary

_VERDICTS = pytest.StashKey[list]()


def pytest_configure(config):
    config.stash[_VERDICTS] = []


@pytest.fixture
def verdict(request, capsys):
    """verdict(number, ok, detail) records and prints one criterion line, then asserts ok."""

    def report(number: int, ok: bool, detail: str):
        line = f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
        request.config.stash[_VERDICTS].append(line)
        with capsys.disabled():
            print(f"\n{line}")
        assert ok, line

    return report


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(_VERDICTS, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines):
            terminalreporter.write_line(line)
