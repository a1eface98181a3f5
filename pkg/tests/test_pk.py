from dataclasses import replace

import numpy as np
import pytest

from algos.kernel_algo import integrate, relative_linf
from algos.pk_algo import (PkParams, daily_troughs, drug_at, drug_concentration, drug_signal, pk_module,
                           single_dose_concentration)


def superposed(p, t, doses):
    return sum(single_dose_concentration(p, t - j * p.tau) for j in range(doses))


@pytest.mark.parametrize("renal", [False, True])
def test_closed_form_matches_superposition(renal):
    p = PkParams(renal_impaired=renal)
    t = np.linspace(0.0, 5 * p.tau, 2401)
    assert relative_linf(drug_at(p, t, 5), superposed(p, t, 5)) < 1e-9


def test_renal_troughs_strictly_increase():
    troughs = daily_troughs(PkParams(renal_impaired=True), 5)
    assert np.all(np.diff(troughs) > 0)


def test_renal_impairment_raises_exposure():
    normal = daily_troughs(PkParams(), 5)
    impaired = daily_troughs(PkParams(renal_impaired=True), 5)
    assert np.all(impaired > normal)
    assert PkParams(renal_impaired=True).k_elim == pytest.approx(0.15)


def test_concentration_is_linear_in_dose():
    t = np.linspace(0.0, 24.0, 97)
    half = drug_concentration(PkParams(d=2.5), 3, t)
    full = drug_concentration(PkParams(d=5.0), 3, t)
    np.testing.assert_array_equal(full, 2.0 * half)


def test_equal_rates_use_the_limit_form():
    p = PkParams(k_a=0.3, k_e=0.3)
    near = PkParams(k_a=0.3 * (1 + 1e-5), k_e=0.3)
    t = np.linspace(0.0, 24.0, 49)
    exact = drug_concentration(p, 4, t)
    assert np.all(np.isfinite(exact))
    assert relative_linf(drug_concentration(near, 4, t), exact) < 1e-4


def test_no_dosing_gives_zero():
    p = PkParams(n_d=0)
    assert not np.any(drug_at(p, np.linspace(0, 48, 10), 0))
    assert not np.any(daily_troughs(p, 5))
    assert not np.any(drug_concentration(replace(p, n_d=1, d=0.0), 2, [1.0, 2.0]))


def test_starts_at_zero_and_peaks_after_dose():
    series = drug_signal(PkParams(), 24.0)
    c = series["drug"]
    assert c[0] == 0.0
    t_peak = series.t[int(np.argmax(c))]
    assert 1.0 < t_peak < 6.0


def test_invalid_parameters():
    with pytest.raises(ValueError):
        PkParams(F=1.5)
    with pytest.raises(ValueError):
        PkParams(n_d=2)
    with pytest.raises(ValueError):
        drug_concentration(PkParams(), 0, 1.0)


def test_module_reports_troughs():
    p = PkParams(renal_impaired=True)
    module = pk_module(p, 5)
    series = integrate(module, 0.0, module.horizon)
    troughs = daily_troughs(p, 5)
    assert series.scalars["drug_trough_day1"] == troughs[0]
    assert series.scalars["drug_trough_day5"] == troughs[4]
    assert series.scalars["drug_peak"] == pytest.approx(series["drug"].max())
    assert series.time_unit == "h"


@pytest.mark.parametrize("renal", [False, True])
def test_fifth_trough_reaches_the_accumulation_limit(renal):
    p = PkParams(renal_impaired=renal)
    limit = float(drug_concentration(p, 1000, p.tau))
    assert daily_troughs(p, 5)[4] == pytest.approx(limit, rel=1e-2)
    assert np.all(daily_troughs(p, 5) <= limit)
