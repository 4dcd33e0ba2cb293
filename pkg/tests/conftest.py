import pytest

from ngmm.config import HyperParams
from ngmm.synth import SynthSpec, generate


@pytest.fixture(scope="session")
def ngmm1():
    return HyperParams.preset("ngmm1")


@pytest.fixture(scope="session")
def small_synth(ngmm1):
    return generate(SynthSpec(n_sites=12, n_scenarios=10, variations=(2, 4), params=ngmm1, seed=3))


def random_points(rng, n, n_scen=None, extent=40.0):
    from ngmm.kernels import PointSet

    n_scen = n_scen or max(1, n // 3)
    return PointSet(rng.uniform(0, extent, (n, 2)), rng.uniform(-10, extent + 10, (n, 2)),
                    rng.integers(0, n_scen, n))


def pytest_terminal_summary(terminalreporter):
    mod = __import__("sys").modules.get("test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if results:
        terminalreporter.section("acceptance criteria")
        for n in sorted(results):
            terminalreporter.write_line(results[n])
