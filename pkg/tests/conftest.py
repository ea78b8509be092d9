import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from laghawkes.core import CausalGraph, EventSequence, ModelParams

settings.register_profile("default", deadline=None, max_examples=50,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


def random_params(rng, U, radius=0.6, mask=None):
    """Random subcritical parameters; impacts rescaled to the requested radius."""
    from laghawkes.identify import spectral_radius

    m = np.ones((U, U), dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    A = np.where(m, rng.uniform(0.1, 1.0, (U, U)), 0.0)
    B = rng.uniform(0.5, 2.5, (U, U))
    rho, _ = spectral_radius(A / B)
    if rho > 0:
        A *= radius / rho
    D = np.where(m, rng.uniform(0.0, 2.0, (U, U)), 0.0)
    return ModelParams(rng.uniform(0.2, 1.0, U), A, B, D)


def random_sequence(rng, U, n, T, seq_id="r"):
    times = np.sort(rng.uniform(0, T, n))
    return EventSequence(times, rng.integers(0, U, n), T, U, seq_id)


def kl_monte_carlo(family, q, p, n, rng):
    """Mean and standard error of log q(x) - log p(x) under x ~ q, in the delay's own units."""
    from scipy import stats

    if family == "exponential":
        x = rng.standard_exponential(n) / q[0]
        lr = stats.expon.logpdf(x, scale=1 / q[0]) - stats.expon.logpdf(x, scale=1 / p[0])
    elif family == "lognormal":
        x = np.exp(q[0] + q[1] * rng.standard_normal(n))
        lr = (stats.lognorm.logpdf(x, q[1], scale=np.exp(q[0]))
              - stats.lognorm.logpdf(x, p[1], scale=np.exp(p[0])))
    else:
        x = q[0] + q[1] * rng.standard_normal(n)
        lr = stats.norm.logpdf(x, q[0], q[1]) - stats.norm.logpdf(x, p[0], p[1])
    return lr.mean(), lr.std() / np.sqrt(n)


@pytest.fixture
def u3_truth():
    m = np.array([[1, 0, 1], [1, 1, 0], [0, 1, 1]], dtype=bool)
    A = np.array([[0.4, 0, 0.3], [0.5, 0.3, 0], [0, 0.6, 0.2]])
    B = np.array([[1, 1, 1.5], [2, 1, 1], [1, 1.5, 1]], dtype=float)
    D = np.array([[1.0, 0, 0.5], [1.5, 0.8, 0], [0, 2.0, 1.2]])
    return ModelParams(np.array([0.3, 0.2, 0.25]), A, B, D), CausalGraph(m)


# ---- acceptance summary -------------------------------------------------------

ACCEPTANCE: dict[int, tuple[str, bool, str]] = {}
ACCEPTANCE_NAMES = {
    1: "gradient exactness", 2: "compensator exactness", 3: "simulator law check",
    4: "time-rescaling", 5: "identifiability oracle", 6: "MLE recovery", 7: "VI/VAE sanity",
    8: "ablation direction", 9: "prediction dominance", 10: "determinism",
}


@pytest.fixture
def criterion():
    """``criterion(n, ok, detail)`` stores the outcome shown in the terminal summary."""
    def record(n: int, ok: bool, detail: str) -> bool:
        ACCEPTANCE[n] = (ACCEPTANCE_NAMES[n], bool(ok), detail)
        print(f"criterion {n}: {'PASS' if ok else 'FAIL'} {detail}")
        return bool(ok)
    return record


def pytest_terminal_summary(terminalreporter):
    ran = [r for key in ("passed", "failed", "error") for r in terminalreporter.stats.get(key, [])
           if "test_acceptance" in getattr(r, "nodeid", "")]
    if not ran:
        return
    terminalreporter.section("acceptance criteria")
    for n, name in ACCEPTANCE_NAMES.items():
        if n in ACCEPTANCE:
            _, ok, detail = ACCEPTANCE[n]
            terminalreporter.write_line(f"criterion {n:2d} {'PASS' if ok else 'FAIL'}  {name}: {detail}")
        else:
            terminalreporter.write_line(f"criterion {n:2d} FAIL  {name}: no result recorded (not run or errored)")
