import logging

import numpy as np
import pytest

from algos.kernel_algo import Signal, integrate, relative_linf
from algos.pk_algo import PkParams, drug_signal
from algos.ras_algo import (LN2, RAS_STATE, InfectionStatus, RasParams, drug_inhibition, ras_module, ras_rhs,
                            ras_steady_state, run_ras)


def test_healthy_steady_state_levels():
    ss = dict(zip(RAS_STATE, ras_steady_state(108.0, 0.0, RasParams())))
    assert ss["ANGI"] == pytest.approx(70.0, rel=0.01)
    assert ss["ANGII"] == pytest.approx(28.0, rel=0.01)
    assert ss["ANG17"] == pytest.approx(36.0, rel=0.01)
    assert ss["AT1R"] == pytest.approx(15.0, rel=0.01)
    assert ss["AT2R"] == pytest.approx(5.0, rel=0.01)
    assert ss["k_ACE2"] == 50.0


@pytest.mark.parametrize("G,drug", [(108.0, 0.0), (170.0, 0.0), (120.0, 0.05)])
def test_steady_state_is_a_fixed_point(G, drug):
    p = RasParams()
    ss = ras_steady_state(G, drug, p)
    d = ras_rhs(0.0, ss, G, drug, InfectionStatus(), p)
    assert np.max(np.abs(d)) < 1e-9 * np.max(ss)


def test_long_integration_reaches_steady_state():
    p = RasParams()
    series = run_ras(150.0, horizon_days=2, p=p)
    final = series.values[-1]
    expected = ras_steady_state(150.0, 0.0, p)
    np.testing.assert_allclose(final, expected, rtol=1e-5)


def test_uninfected_ace2_activity_is_exactly_constant():
    series = run_ras(108.0, horizon_days=1)
    assert np.all(series["k_ACE2"] == RasParams().k_ACE2_0)


def test_infection_raises_ace2_activity_after_onset():
    series = run_ras(108.0, infection=InfectionStatus(True, 24.0), horizon_days=3)
    before = series.t <= 23.5
    assert np.all(series["k_ACE2"][before] == 50.0)
    assert series["k_ACE2"][-1] > 80.0


def test_drug_inhibits_angii_production():
    p = RasParams()
    free = ras_steady_state(108.0, 0.0, p)
    treated = ras_steady_state(108.0, 0.1, p)
    assert treated[RAS_STATE.index("ANGII")] < free[RAS_STATE.index("ANGII")]
    assert drug_inhibition(p.IC50, p) == pytest.approx(0.5)
    assert drug_inhibition(-1.0, p) == 1.0


def test_drug_trajectory_input():
    pk = drug_signal(PkParams(renal_impaired=True), 48.0)
    series = run_ras(108.0, pk, horizon_days=2)
    angii = series["ANGII"]
    assert angii.min() < 28.0
    assert series.scalars["angii_final"] == angii[-1]


def test_glucose_outside_range_warns(caplog):
    with caplog.at_level(logging.WARNING):
        run_ras(250.0, horizon_days=0.1)
    assert "outside" in caplog.text


def test_onset_requires_infection():
    with pytest.raises(ValueError):
        InfectionStatus(False, 5.0)
    assert InfectionStatus(True).onset == 0.0


@pytest.mark.slow
def test_adaptive_matches_rk4_oracle(oracle):
    module = ras_module(RasParams(), InfectionStatus(True), 1)
    adaptive = integrate(module, 0.0, 24.0)
    reference = integrate(module, 0.0, 24.0, cfg=oracle(18.0))
    assert relative_linf(adaptive.values, reference.values) < 5e-3


def test_ang17_decays_at_its_half_life_without_sources():
    p = RasParams()
    c = 36.0
    s = np.array([0.0, 0.0, 0.0, c, 15.0, 5.0, p.k_ACE2_0])
    d = ras_rhs(0.0, s, 108.0, 0.0, InfectionStatus(), p)
    assert d[RAS_STATE.index("ANG17")] == pytest.approx(-LN2 / p.h_ANG17 * c, rel=1e-12)


def test_uninfected_ace2_derivative_is_zero():
    p = RasParams()
    ss = ras_steady_state(170.0, 0.0, p)
    d = ras_rhs(5.0, 2.0 * ss, 170.0, 0.0, InfectionStatus(), p)
    assert d[RAS_STATE.index("k_ACE2")] == 0.0


def test_hyperglycaemia_raises_at1r():
    normal = run_ras(108.0, horizon_days=2)
    high = run_ras(180.0, horizon_days=2)
    at1r = RAS_STATE.index("AT1R")
    assert high["AT1R"][-1] > normal["AT1R"][-1]
    p = RasParams()
    assert ras_steady_state(180.0, 0.0, p)[at1r] > ras_steady_state(108.0, 0.0, p)[at1r]


def test_acei_run_lowers_angii_against_untreated():
    pk = drug_signal(PkParams(), 48.0)
    free = run_ras(108.0, horizon_days=2)
    treated = run_ras(108.0, pk, horizon_days=2)
    assert treated["ANGII"][-1] < free["ANGII"][-1]


def test_halving_tolerances_stays_inside_the_band(self_convergence):
    module = ras_module(RasParams(), InfectionStatus(True, 24.0), 3)
    inputs = {"G": Signal.constant(170.0, "mg/dl"),
              "drug": drug_signal(PkParams(renal_impaired=True), 72.0).signal("drug")}
    assert self_convergence(module, inputs) < 1.0
