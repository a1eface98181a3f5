import sys
import time
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).resolve().parents[1]))

from algos.kernel_algo import IntegratorConfig, IntegrationMethod, convergence_ratio, integrate  # noqa: E402
from algos.scenario_algo import run_cohort  # noqa: E402
from schemas import PatientProfile, ScenarioConfig  # noqa: E402


@pytest.fixture
def healthy_profile():
    return PatientProfile(age=20.0, baseline_glucose=100.0)


@pytest.fixture
def tiny_config():
    """All five modules over one day and three beats."""
    return ScenarioConfig(label="tiny", horizon_days=1, cardiac_beats=3, transient_beats=1,
                          profile=PatientProfile(age=50.0, infected=True))


@pytest.fixture
def oracle():
    def make(step_s: float) -> IntegratorConfig:
        return IntegratorConfig(method=IntegrationMethod.FIXED_RK4_ORACLE, oracle_step=step_s)
    return make


@pytest.fixture
def self_convergence():
    """Trajectory change on halving rtol/atol, in units of the default tolerance band."""
    def measure(module, inputs=None, horizon=None) -> float:
        cfg = IntegratorConfig()
        t1 = module.horizon if horizon is None else horizon
        coarse = integrate(module, 0.0, t1, inputs, cfg)
        fine = integrate(module, 0.0, t1, inputs, cfg.tightened(0.5))
        n = len(module.state.names)
        return convergence_ratio(coarse.values[:, :n], fine.values[:, :n], cfg.rtol, cfg.atol)
    return measure


@pytest.fixture(scope="session")
def timed_cohort():
    start = time.perf_counter()
    result = run_cohort()
    return result, time.perf_counter() - start


@pytest.fixture(scope="session")
def cohort_result(timed_cohort):
    return timed_cohort[0]
