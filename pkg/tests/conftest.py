import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from cglasso.trunc_moments import ConditionalGaussian

settings.register_profile("default", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

# acceptance outcomes, printed once at the end of the run
ACCEPTANCE_LINES = {}


def record(criterion: int, passed: bool, detail: str) -> None:
    line = f"criterion {criterion}: {'PASS' if passed else 'FAIL'} {detail}"
    ACCEPTANCE_LINES[criterion] = line
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for k in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[k])


def cond_from_cov(mean, cov) -> ConditionalGaussian:
    mean = np.asarray(mean, dtype=float)
    cov = np.asarray(cov, dtype=float)
    prec = np.linalg.inv(cov)
    return ConditionalGaussian(mean, 0.5 * (prec + prec.T), cov)


def random_spd(rng, p, scale=1.0):
    A = rng.standard_normal((p, p))
    return scale * (A @ A.T / p + 0.5 * np.eye(p))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
