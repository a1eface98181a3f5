import logging

import numpy as np
import pytest

from algos.coupling_algo import (BASELINE_ACE2, CouplingParams, coupling_module, heparin_concentration,
                                 inflammation_rhs, inflammation_steady_state, methylation_factor,
                                 reduced_compliance, stiffness_factor, treatment_offset)
from algos.kernel_algo import Signal, integrate, relative_linf
from algos.ras_algo import RasParams


def test_methylation_factor_over_the_age_range():
    assert methylation_factor(20.0) == 1.0
    assert methylation_factor(70.0) == pytest.approx(0.75)
    assert methylation_factor(45.0) == pytest.approx(0.875)


def test_methylation_factor_outside_range_warns_and_clamps(caplog):
    with caplog.at_level(logging.WARNING):
        assert methylation_factor(80.0) == pytest.approx(0.7)
    assert "methylation range" in caplog.text
    assert methylation_factor(400.0) == CouplingParams().epsilon


def test_identity_compliance_is_exact():
    for C in (0.02, 2.5, 60.0):
        assert reduced_compliance(C, 1.0, 0.0) == C


def test_compliance_floor(caplog):
    with caplog.at_level(logging.WARNING):
        assert reduced_compliance(2.0, 1.0, 120.0) == pytest.approx(0.1)
    assert "clamped" in caplog.text
    assert stiffness_factor(0.75, 40.0) == pytest.approx(0.45)


def test_steady_state_superposition():
    p = CouplingParams()
    k0 = 50.0
    parts = (inflammation_steady_state(101.0, k0, 0.0, 0.0, p)
             + inflammation_steady_state(k0, k0, 0.2, 0.0, p)
             + inflammation_steady_state(k0, k0, 0.0, 170.0, p))
    assert inflammation_steady_state(101.0, k0, 0.2, 170.0, p) == pytest.approx(parts, rel=1e-12)
    ss = inflammation_steady_state(101.0, k0, 0.2, 170.0, p)
    assert inflammation_rhs(ss, 101.0, k0, 0.2, 170.0, p) == pytest.approx(0.0, abs=1e-12)


def test_heparin_halves_every_half_life():
    p = CouplingParams()
    assert heparin_concentration(5000.0, 0.0, p) == 5000.0
    assert heparin_concentration(5000.0, p.heparin_half_life, p) == pytest.approx(2500.0)
    assert heparin_concentration(5000.0, 3 * p.heparin_half_life, p) == pytest.approx(625.0)


def test_treatment_offset():
    assert treatment_offset(5000.0, 40.0) == pytest.approx(1.2)
    assert treatment_offset(0.0, 30.0) == 0.0
    assert treatment_offset(0.0, 20.0) == pytest.approx(-0.4)
    with pytest.raises(ValueError):
        treatment_offset(-1.0, 30.0)


def test_invalid_parameters():
    with pytest.raises(ValueError):
        CouplingParams(beta0=0.0)
    with pytest.raises(ValueError):
        CouplingParams(k_D=-1.0)


def test_module_converges_to_steady_inflammation():
    p = CouplingParams()
    module = coupling_module(p, 70.0, 5000.0, 40.0, horizon_days=5)
    inputs = {"k_ACE2": Signal.constant(90.0, "1/h"), "k_ACE2_0": Signal.constant(50.0, "1/h"),
              "G": Signal.constant(150.0, "mg/dl")}
    series = integrate(module, 0.0, module.horizon, inputs)
    expected = inflammation_steady_state(90.0, 50.0, 0.0, 150.0, p)
    assert series["IR"][-1] == pytest.approx(expected, rel=1e-4)
    assert series.scalars["ir_steady"] == pytest.approx(expected, rel=1e-3)
    assert series.scalars["alpha_met"] == pytest.approx(0.75)
    assert series.scalars["stiffness_scale"] == pytest.approx(0.75 * (1 - series.scalars["ir_steady"] / 100))
    assert series.scalars["pressure_offset"] == pytest.approx(1.2)
    days = [series.scalars[f"ir_day{k}"] for k in range(1, 6)]
    assert days == sorted(days)


def test_treatment_time_decays_heparin_effect():
    module = coupling_module(CouplingParams(), 70.0, 5000.0, 30.0, horizon_days=1, treatment_time_h=1.5)
    series = integrate(module, 0.0, module.horizon)
    assert series.scalars["pressure_offset"] == pytest.approx(0.4)


def test_no_age_means_no_methylation_penalty():
    module = coupling_module(CouplingParams(), None, 0.0, 30.0, horizon_days=1)
    series = integrate(module, 0.0, module.horizon)
    assert series.scalars["alpha_met"] == 1.0


@pytest.mark.slow
def test_adaptive_matches_rk4_oracle(oracle):
    module = coupling_module(CouplingParams(), 70.0, 0.0, 30.0, horizon_days=1)
    inputs = {"k_ACE2": Signal.constant(90.0, "1/h"), "drug": Signal.constant(0.1, "mg/L")}
    adaptive = integrate(module, 0.0, 24.0, inputs)
    reference = integrate(module, 0.0, 24.0, inputs, oracle(60.0))
    assert relative_linf(adaptive.values, reference.values) < 5e-3


def test_unwired_ace2_ports_add_no_viral_inflammation():
    p = CouplingParams()
    module = coupling_module(p, 70.0, 0.0, 30.0, horizon_days=5)
    baseline = Signal.constant(RasParams().k_ACE2_0, "1/h")
    bare = integrate(module, 0.0, module.horizon)
    wired = integrate(module, 0.0, module.horizon, {"k_ACE2": baseline, "k_ACE2_0": baseline})
    current_only = integrate(module, 0.0, module.horizon, {"k_ACE2": baseline})
    assert np.array_equal(bare.values, wired.values)
    assert np.array_equal(current_only.values, wired.values)
    assert BASELINE_ACE2 == RasParams().k_ACE2_0
    assert bare.scalars["ir_steady"] == pytest.approx(
        inflammation_steady_state(BASELINE_ACE2, BASELINE_ACE2, 0.0, 100.0, p), rel=1e-3)


def test_halving_tolerances_stays_inside_the_band(self_convergence):
    module = coupling_module(CouplingParams(), 70.0, 0.0, 30.0, horizon_days=3)
    inputs = {"k_ACE2": Signal.constant(90.0, "1/h"), "G": Signal.constant(170.0, "mg/dl")}
    assert self_convergence(module, inputs) < 1.0
