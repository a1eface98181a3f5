import logging

import numpy as np
import pytest

from algos.io_algo import ConfigError
from algos.kernel_algo import Provenance, SimulationError
from algos.scenario_algo import (AGE_INDEPENDENT, ScenarioError, build_graph, builtin_cohort, builtin_scenario,
                                 ordered_metric, run_cohort, run_scenario, sweep, sweep_configs, with_beats)
from schemas import MODULE_IDS, PatientProfile, ScenarioConfig

LABELS = ["H", "D", "R", "C+T", "V", "C+V", "C+V+T", "C+V+3T"]


def test_builtin_cohort_rows():
    cohort = builtin_cohort()
    assert [cfg.label for cfg in cohort] == LABELS
    by_label = {cfg.label: cfg for cfg in cohort}
    assert by_label["D"].enabled_modules == AGE_INDEPENDENT
    assert by_label["R"].profile.age is None
    assert by_label["C+V+3T"].profile.heparin_0 == 5000.0
    assert by_label["C+V+3T"].profile.vitamin_D == 40.0
    assert by_label["V"].profile.infection_onset_h == 0.0
    assert by_label["H"].enabled_modules == list(MODULE_IDS)


def test_builtin_cohort_is_built_quietly(caplog):
    with caplog.at_level(logging.WARNING):
        builtin_cohort()
    assert "without an age" not in caplog.text


def test_unknown_builtin():
    with pytest.raises(KeyError):
        builtin_scenario("X")


def test_pipeline_order_is_fixed():
    graph = build_graph(builtin_scenario("C+V"))
    assert graph.solve_order() == ["diabetes", "pk", "ras", "coupling", "circulation"]
    assert len(graph.wires) == 8


def test_disabled_modules_drop_their_wires():
    graph = build_graph(builtin_scenario("D"))
    assert graph.solve_order() == ["diabetes", "pk", "ras"]
    assert {(w.source, w.target) for w in graph.wires} == {("diabetes", "ras"), ("pk", "ras")}


def test_override_provenance():
    graph = build_graph(builtin_scenario("H"), {"pk": {"k_e": 0.25}})
    entries = graph.module("pk").params.entries
    assert entries["k_e"].provenance == Provenance.USER
    assert entries["k_e"].value == 0.25
    assert entries["k_a"].provenance == Provenance.DEFAULT


def test_unknown_override_is_config_error():
    with pytest.raises(ConfigError) as info:
        build_graph(builtin_scenario("H"), {"ras": {"k_foo": 1.0}})
    assert info.value.field == "ras.k_foo"


def test_bad_abp_record_is_config_error(tmp_path):
    cfg = ScenarioConfig(label="abp", profile=PatientProfile(abp_source=str(tmp_path / "missing.csv")))
    with pytest.raises(ConfigError):
        build_graph(cfg)


def test_abp_record_sets_heart_period(tmp_path):
    path = tmp_path / "abp.csv"
    t = 0.01 * np.arange(90)
    p = 100.0 + 20.0 * np.sin(2 * np.pi * t / 0.9)
    path.write_text("time_s,pressure_mmHg\n" + "".join(f"{a:.4f},{b:.4f}\n" for a, b in zip(t, p)))
    cfg = ScenarioConfig(label="abp", profile=PatientProfile(age=40.0, abp_source=str(path)))
    module = build_graph(cfg).module("circulation")
    assert module.horizon == pytest.approx(30 * 0.9)


def test_acei_disabled_means_no_drug(tiny_config):
    graph = build_graph(tiny_config)
    series = graph.module("pk").closed_form(np.linspace(0.0, 24.0, 5), {})
    assert not np.any(series)


def test_tiny_scenario_runs_every_module(tiny_config):
    result = run_scenario(tiny_config)
    assert list(result.series) == list(MODULE_IDS)
    m = result.metrics
    assert m.label == "tiny"
    assert m.glucose_peak_mgdl > 100.0
    assert m.k_ace2_final_per_h > 50.0
    assert m.ir_steady > 0.0
    assert 0.0 < m.stiffness_scale < 1.0
    assert m.mean_pcp_mmHg is not None
    assert m.drug_trough_day5_mgL is None


def test_numerical_failure_is_tagged_with_label(tiny_config):
    with pytest.raises(ScenarioError) as info:
        run_scenario(tiny_config, {"coupling": {"k_eff": float("inf")}})
    assert info.value.label == "tiny"
    assert info.value.module == "coupling"
    assert isinstance(info.value, SimulationError)


def test_missing_equilibrium_is_a_scenario_failure(tiny_config):
    overrides = {"diabetes": {"S_I": 0.0, "E_G0": 1e-4}}
    with pytest.raises(ScenarioError) as info:
        run_scenario(tiny_config, overrides)
    assert info.value.module == "diabetes"
    assert "equilibrium" in info.value.detail
    cohort = run_cohort([tiny_config], overrides)
    assert list(cohort.failures) == ["tiny"]
    assert cohort.comparison().height == 0


def test_daily_refresh_reports_each_day(tiny_config):
    cfg = tiny_config.model_copy(update={"horizon_days": 2, "refresh_daily": True})
    result = run_scenario(cfg)
    assert set(result.daily) == {f"day{k}_{key}" for k in (1, 2)
                                 for key in ("stiffness_scale", "mean_pcp_mmHg", "sd_pcp_mmHg")}
    assert result.daily["day2_stiffness_scale"] <= result.daily["day1_stiffness_scale"]


def test_cohort_parallel_matches_serial(tiny_config):
    configs = [tiny_config, tiny_config.model_copy(update={"label": "tiny-old",
                                                           "profile": tiny_config.profile.model_copy(
                                                               update={"age": 70.0})})]
    serial = run_cohort(configs)
    parallel = run_cohort(configs, jobs=2)
    assert serial.order == parallel.order == ["tiny", "tiny-old"]
    for label in serial.order:
        assert serial.results[label].metrics == parallel.results[label].metrics


def test_cohort_records_failures_and_continues(tiny_config):
    ok = tiny_config.model_copy(update={"label": "ok"})
    cohort = run_cohort([ok], {"coupling": {"k_eff": float("inf")}})
    assert cohort.failures and "ok" in cohort.failures
    assert cohort.comparison().height == 0


def test_duplicate_labels_rejected(tiny_config):
    with pytest.raises(ConfigError):
        run_cohort([tiny_config, tiny_config])


def test_sweep_configs_labels_and_validation():
    base = builtin_scenario("C+V")
    configs = sweep_configs(base, "profile.age", [20, 45.5])
    assert [c.label for c in configs] == ["C+V@age=20", "C+V@age=45.5"]
    assert configs[1].profile.age == 45.5
    with pytest.raises(ConfigError):
        sweep_configs(base, "age", [])
    with pytest.raises(ConfigError):
        sweep_configs(base, "shoe_size", [1.0])
    with pytest.raises(ConfigError):
        sweep_configs(base, "age", [-5.0])


def test_with_beats_keeps_transient_below_beats():
    cfg = with_beats(builtin_scenario("H"), 3)
    assert cfg.cardiac_beats == 3 and cfg.transient_beats == 1
    with pytest.raises(ConfigError):
        with_beats(cfg, 0)


# --- full cohort ------------------------------------------------------------------

@pytest.mark.slow
def test_cohort_runs_all_eight(cohort_result):
    assert not cohort_result.failures
    table = cohort_result.comparison()
    assert table.height == 8
    assert table["label"].to_list() == LABELS


@pytest.mark.slow
def test_cohort_finishes_within_three_minutes(timed_cohort):
    result, elapsed = timed_cohort
    assert not result.failures
    assert elapsed <= 180.0


@pytest.mark.slow
def test_inflammation_ordering(cohort_result):
    ir = dict(zip(LABELS, ordered_metric(cohort_result, LABELS, "ir_steady")))
    assert ir["C+V"] > ir["V"] > ir["H"]
    assert ir["C+V+T"] < ir["C+V"]


@pytest.mark.slow
def test_glucose_bands_in_cohort(cohort_result):
    peak = dict(zip(LABELS, ordered_metric(cohort_result, LABELS, "glucose_peak_mgdl")))
    assert 108.0 <= peak["H"] <= 125.0
    assert 180.0 <= peak["D"] <= 200.0


@pytest.mark.slow
def test_sick_patient_has_more_variable_pulmonary_pressure(cohort_result):
    h = cohort_result.results["H"].metrics
    cv = cohort_result.results["C+V"].metrics
    assert cv.stiffness_scale < h.stiffness_scale
    assert cv.sd_pap_mmHg > h.sd_pap_mmHg
    assert cv.sd_pcp_mmHg > h.sd_pcp_mmHg
    assert cv.max_pcp_mmHg > h.max_pcp_mmHg
    assert cv.mean_pap_mmHg > h.mean_pap_mmHg
    assert cv.mean_pcp_mmHg > h.mean_pcp_mmHg


@pytest.mark.slow
def test_treatments_lower_pressure_but_not_variability(cohort_result):
    t = cohort_result.results["C+V+T"].metrics
    t3 = cohort_result.results["C+V+3T"].metrics
    drop = (t.mean_pap_mmHg - t3.mean_pap_mmHg) / t.mean_pap_mmHg
    assert 0.05 <= drop <= 0.10
    assert t3.sd_pap_mmHg == pytest.approx(t.sd_pap_mmHg, rel=0.02)
    assert t3.sd_pcp_mmHg == pytest.approx(t.sd_pcp_mmHg, rel=0.02)
    assert t3.pressure_offset_mmHg == pytest.approx(1.2)
    assert t3.heparin_0_U_per_mL == 5000.0 and t3.vitamin_D_ng_per_mL == 40.0


@pytest.mark.slow
def test_age_independent_rows_skip_circulation(cohort_result):
    for label in ("D", "R"):
        m = cohort_result.results[label].metrics
        assert m.age_years is None
        assert m.mean_pap_mmHg is None and m.ir_steady is None
        assert m.k_ace2_final_per_h is not None
    assert cohort_result.results["R"].metrics.drug_trough_day5_mgL > \
        cohort_result.results["R"].metrics.drug_trough_day1_mgL


@pytest.mark.slow
def test_age_sweep_variability_is_nondecreasing():
    _, table = sweep(builtin_scenario("C+V"), "age", [20.0, 45.0, 70.0])
    sd = table["sd_pcp_mmHg"].to_numpy()
    assert table["value"].to_list() == [20.0, 45.0, 70.0]
    assert np.all(np.diff(sd) >= 0)


@pytest.mark.slow
def test_dose_sweep_inflammation_is_nonincreasing():
    _, table = sweep(builtin_scenario("C+V+T"), "acei_dose", [0.0, 2.5, 5.0])
    ir = table["ir_steady"].to_numpy()
    assert np.all(np.diff(ir) <= 0)
