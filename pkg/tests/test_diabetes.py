import numpy as np
import pytest

from algos.diabetes_algo import (DiabetesParams, beta_equilibrium, beta_threshold_glucose, diabetes_module,
                                 diabetes_rhs, diabetic_params, fasting_equilibrium, meal_forcing,
                                 post_meal_peaks, quasi_steady_insulin, run_diabetes, workout_forcing)
from algos.kernel_algo import EquilibriumNotFound, Signal, integrate, relative_linf
from schemas import LifestyleSchedule, Meal, PatientProfile


@pytest.fixture(scope="module")
def healthy_run():
    return run_diabetes(PatientProfile(age=20.0, baseline_glucose=100.0))


@pytest.fixture(scope="module")
def diabetic_run():
    return run_diabetes(PatientProfile(diabetic=True, baseline_glucose=170.0))


def test_healthy_post_meal_peak_band(healthy_run):
    assert 108.0 <= healthy_run.scalars["glucose_peak"] <= 125.0


def test_diabetic_post_meal_peak_band(diabetic_run):
    assert 180.0 <= diabetic_run.scalars["glucose_peak"] <= 200.0


def test_daily_peaks_are_reported(healthy_run):
    days = [healthy_run.scalars[f"glucose_peak_day{k}"] for k in range(1, 6)]
    assert max(days) == healthy_run.scalars["glucose_peak"]
    assert healthy_run.scalars["glucose_fasting"] < healthy_run.scalars["glucose_peak"]


def test_meal_and_workout_windows():
    sched = LifestyleSchedule.standard()
    assert meal_forcing(sched, 8.1) == 4.0 * 50.0
    assert meal_forcing(sched, 12.3) == 42.0 * 100.0
    assert meal_forcing(sched, 9.0) == 0.0
    assert meal_forcing(sched, 24.0 + 20.5) == 42.0 * 100.0
    assert workout_forcing(sched, 18.5) == 200.0
    assert workout_forcing(sched, 18.95) == 0.0


def test_meal_window_wraps_midnight():
    sched = LifestyleSchedule(meals=[Meal(time_h=23.5, glycemic_load=10.0, serving_g=10.0)])
    assert meal_forcing(sched, 24.3) == 100.0
    assert meal_forcing(sched, 0.3) == 100.0
    assert meal_forcing(sched, 1.0) == 0.0


def test_beta_cell_thresholds():
    low, high = beta_threshold_glucose(DiabetesParams())
    assert low == pytest.approx(100.0, rel=1e-6)
    assert high == pytest.approx(250.0, rel=1e-6)


def test_fasting_equilibrium_is_a_fixed_point():
    p = DiabetesParams()
    G, I, IR = fasting_equilibrium(p)
    s = np.array([G, I, p.beta_0, IR])
    d = diabetes_rhs(3.0, s, p.Cyt, LifestyleSchedule(), p)
    assert abs(d[0]) < 1e-8
    assert abs(d[1]) < 1e-8
    assert abs(d[3]) < 1e-10
    assert I == pytest.approx(quasi_steady_insulin(G, p))


def test_diabetic_fasting_glucose_is_higher():
    healthy = fasting_equilibrium(DiabetesParams())[0]
    diabetic = fasting_equilibrium(diabetic_params())[0]
    assert diabetic > healthy


def test_diabetic_params_scale_sensitivity_and_secretion():
    p = diabetic_params()
    assert p.S_I == pytest.approx(0.015)
    assert p.sigma == pytest.approx(0.99)


def test_post_meal_peaks_without_meals_use_whole_day(healthy_run):
    peaks = post_meal_peaks(healthy_run, LifestyleSchedule(), 5)
    assert peaks.shape == (5,)
    for k in range(5):
        assert peaks[k] >= healthy_run.scalars[f"glucose_peak_day{k + 1}"]


def test_cytokine_input_raises_insulin_resistance():
    p = DiabetesParams()
    sched = LifestyleSchedule.standard()
    module = diabetes_module(p, sched, 1, 100.0)
    base = integrate(module, 0.0, 24.0)
    inflamed = integrate(module, 0.0, 24.0, {"Cyt": Signal.constant(20.0, "1")})
    assert inflamed["I_R"][-1] > base["I_R"][-1]


@pytest.mark.slow
def test_adaptive_matches_rk4_oracle(oracle):
    module = diabetes_module(diabetic_params(), LifestyleSchedule.standard(), 1, 170.0)
    adaptive = integrate(module, 0.0, 24.0)
    reference = integrate(module, 0.0, 24.0, cfg=oracle(36.0))
    assert relative_linf(adaptive.values, reference.values) < 5e-3


def test_workout_lowers_the_dinner_peak():
    p = DiabetesParams()
    standard = LifestyleSchedule.standard()
    idle = LifestyleSchedule(meals=standard.meals)
    active = integrate(diabetes_module(p, standard, 1, 100.0), 0.0, 24.0)
    rest = integrate(diabetes_module(p, idle, 1, 100.0), 0.0, 24.0)
    dinner = LifestyleSchedule(meals=standard.meals[2:])
    assert post_meal_peaks(active, dinner, 1)[0] < post_meal_peaks(rest, dinner, 1)[0]
    evening = (active.t >= 18.5) & (active.t <= 20.0)
    assert np.all(active["G"][evening] < rest["G"][evening])


def test_glucose_settles_monotonically_without_meals():
    p = DiabetesParams()
    G_f = fasting_equilibrium(p)[0]
    series = integrate(diabetes_module(p, LifestyleSchedule(), 2, 150.0), 0.0, 48.0)
    G = series["G"]
    assert np.all(np.diff(G) <= 1e-6)
    assert G[-1] == pytest.approx(G_f, abs=1.0)
    assert G.min() >= G_f - 1e-3


def test_beta_cells_decline_above_the_upper_threshold():
    p = DiabetesParams()
    low, high = beta_threshold_glucose(p)
    below, between, above = [
        diabetes_rhs(0.0, np.array([G, 10.0, p.beta_0, 0.3]), p.Cyt, LifestyleSchedule(), p)[2]
        for G in (0.8 * low, 0.5 * (low + high), 1.2 * high)
    ]
    assert below < 0.0 < between
    assert above < 0.0
    assert 0.0 < beta_equilibrium(1.2 * high, p) < p.beta_0


def test_fasting_equilibrium_without_insulin_action_is_reported():
    p = DiabetesParams(S_I=0.0, E_G0=1e-4)
    with pytest.raises(EquilibriumNotFound) as info:
        fasting_equilibrium(p)
    assert info.value.module == "diabetes"
    with pytest.raises(EquilibriumNotFound):
        diabetes_module(p, LifestyleSchedule.standard(), 1, 100.0)


@pytest.mark.parametrize("run", ["healthy_run", "diabetic_run"])
def test_phase_portrait_stays_bounded(run, request):
    series = request.getfixturevalue(run)
    G, I = series["G"], series["I"]
    assert np.all(np.isfinite(G)) and np.all(np.isfinite(I))
    assert G.min() > 50.0 and G.max() < 300.0
    assert I.min() > 0.0 and I.max() < 60.0
    per_day = int(round(24.0 / 0.02))
    assert relative_linf(G[3 * per_day:4 * per_day + 1], G[4 * per_day:]) < 0.05


def test_halving_tolerances_stays_inside_the_band(self_convergence):
    module = diabetes_module(diabetic_params(), LifestyleSchedule.standard(), 2, 170.0)
    assert self_convergence(module) < 1.0
