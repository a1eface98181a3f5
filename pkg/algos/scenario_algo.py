from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Dict, List, Mapping, Optional, Sequence, Tuple
import logging

import numpy as np
import polars as pl
from pydantic import ValidationError

from algos.circulation_algo import AbpSignal, CirculationModel, CirculationParams, circulation_module
from algos.coupling_algo import CouplingParams, coupling_module
from algos.diabetes_algo import diabetes_module, params_for_profile
from algos.io_algo import ConfigError, metrics_row
from algos.kernel_algo import (CompositionGraph, IntegratorConfig, ModelModule, Signal,
                               SimulationError, TimeSeries, Wire, apply_overrides, compose, integrate)
from algos.pk_algo import PkParams, pk_module
from algos.ras_algo import InfectionStatus, RasParams, ras_module
from schemas import PatientProfile, ScenarioConfig, SummaryMetrics

logger = logging.getLogger(__name__)

Overrides = Mapping[str, Mapping[str, float]]

AGE_INDEPENDENT = ["diabetes", "pk", "ras"]

# (source, port, target, port); kept when both ends are enabled.
PIPELINE_WIRES = (
    ("diabetes", "glucose_peak", "ras", "G"),
    ("pk", "drug", "ras", "drug"),
    ("ras", "k_ACE2", "coupling", "k_ACE2"),
    ("ras", "k_ACE2_0", "coupling", "k_ACE2_0"),
    ("pk", "drug", "coupling", "drug"),
    ("diabetes", "glucose_peak", "coupling", "G"),
    ("coupling", "stiffness_scale", "circulation", "stiffness_scale"),
    ("coupling", "pressure_offset", "circulation", "pressure_offset"),
)


class ScenarioError(SimulationError):
    def __init__(self, label: str, module: str, detail: str):
        self.label = label
        self.module = module
        self.detail = detail
        super().__init__(f"{label}: {module}: {detail}")


def builtin_cohort() -> List[ScenarioConfig]:
    """The eight reference patients, all on three meals and one afternoon workout."""
    diabetic = dict(diabetic=True, baseline_glucose=170.0)
    rows = [
        ("H", dict(age=20.0, baseline_glucose=100.0), None),
        ("D", dict(**diabetic), AGE_INDEPENDENT),
        ("R", dict(renal_impaired=True, acei_enabled=True), AGE_INDEPENDENT),
        ("C+T", dict(age=70.0, renal_impaired=True, acei_enabled=True, **diabetic), None),
        ("V", dict(age=70.0, infected=True), None),
        ("C+V", dict(age=70.0, renal_impaired=True, infected=True, **diabetic), None),
        ("C+V+T", dict(age=70.0, renal_impaired=True, infected=True, acei_enabled=True, **diabetic), None),
        ("C+V+3T", dict(age=70.0, renal_impaired=True, infected=True, acei_enabled=True,
                        heparin_0=5000.0, vitamin_D=40.0, **diabetic), None),
    ]
    cohort = []
    for label, profile, modules in rows:
        extra = {} if modules is None else {"enabled_modules": list(modules)}
        cohort.append(ScenarioConfig(label=label, profile=PatientProfile(**profile), **extra))
    return cohort


def builtin_scenario(label: str) -> ScenarioConfig:
    for cfg in builtin_cohort():
        if cfg.label == label:
            return cfg
    raise KeyError(label)


def _override(module: str, params, overrides: Optional[Overrides]):
    try:
        return apply_overrides(params, (overrides or {}).get(module))
    except KeyError as exc:
        raise ConfigError(f"{module}.{exc.args[0]}", "unknown parameter") from None
    except ValueError as exc:
        raise ConfigError(module, str(exc)) from None


def _abp_for(profile: PatientProfile, params: CirculationParams) -> Tuple[Optional[AbpSignal], CirculationParams]:
    if profile.abp_source == "builtin":
        return None, params
    try:
        abp = AbpSignal.from_csv(profile.abp_source)
    except (OSError, ValueError, pl.exceptions.PolarsError) as exc:
        raise ConfigError("abp_source", f"cannot load ABP record: {exc}") from None
    if abs(abp.period - params.T) > 1e-9:
        logger.info("heart period set to the ABP record period %.4g s", abp.period)
        params = replace(params, T=abp.period)
    return abp, params


def build_graph(cfg: ScenarioConfig, overrides: Optional[Overrides] = None) -> CompositionGraph:
    profile = cfg.profile
    enabled = set(cfg.enabled_modules)
    days = cfg.horizon_days
    modules: List[ModelModule] = []

    if "diabetes" in enabled:
        p, names = _override("diabetes", params_for_profile(profile), overrides)
        modules.append(diabetes_module(p, profile.lifestyle, days, profile.baseline_glucose, names))
    if "pk" in enabled:
        base = PkParams(d=profile.acei_dose if profile.acei_enabled else 0.0,
                        n_d=profile.doses_per_day if profile.acei_enabled else 0,
                        renal_impaired=profile.renal_impaired)
        p, names = _override("pk", base, overrides)
        modules.append(pk_module(p, days, names))
    if "ras" in enabled:
        p, names = _override("ras", RasParams(), overrides)
        infection = InfectionStatus(profile.infected, profile.infection_onset_h)
        modules.append(ras_module(p, infection, days, G_default=profile.baseline_glucose, overridden=names))
    if "coupling" in enabled:
        p, names = _override("coupling", CouplingParams(), overrides)
        modules.append(coupling_module(p, profile.age, profile.heparin_0, profile.vitamin_D, days,
                                       cfg.treatment_time_h, profile.baseline_glucose, names))
    if "circulation" in enabled:
        p, names = _override("circulation", CirculationParams(), overrides)
        abp, p = _abp_for(profile, p)
        model = CirculationModel(p, abp, scale_coronary=cfg.scale_coronary)
        modules.append(circulation_module(model, cfg.cardiac_beats, cfg.transient_beats, names))

    wires = tuple(Wire(src, sp, dst, dp) for src, sp, dst, dp in PIPELINE_WIRES
                  if src in enabled and dst in enabled)
    return CompositionGraph(tuple(modules), wires)


@dataclass
class ScenarioResult:
    config: ScenarioConfig
    series: Dict[str, TimeSeries]
    metrics: SummaryMetrics
    daily: Dict[str, float] = field(default_factory=dict)

    @property
    def label(self) -> str:
        return self.config.label


def collect_metrics(cfg: ScenarioConfig, series: Mapping[str, TimeSeries]) -> SummaryMetrics:
    profile = cfg.profile
    values: Dict[str, object] = dict(
        label=cfg.label,
        age_years=profile.age,
        diabetic=profile.diabetic,
        infected=profile.infected,
        renal_impaired=profile.renal_impaired,
        acei_enabled=profile.acei_enabled,
        acei_dose_mg=profile.acei_dose if profile.acei_enabled else 0.0,
        heparin_0_U_per_mL=profile.heparin_0,
        vitamin_D_ng_per_mL=profile.vitamin_D,
    )
    scalar_map = {
        "diabetes": {"glucose_peak_mgdl": "glucose_peak", "glucose_fasting_mgdl": "glucose_fasting"},
        "pk": {"drug_peak_mgL": "drug_peak", "drug_trough_day1_mgL": "drug_trough_day1",
               "drug_trough_day5_mgL": "drug_trough_day5"},
        "ras": {"k_ace2_final_per_h": "k_ace2_final", "at1r_final_pmolL": "at1r_final"},
        "coupling": {"ir_steady": "ir_steady", "alpha_met": "alpha_met", "stiffness_scale": "stiffness_scale",
                     "pressure_offset_mmHg": "pressure_offset"},
        "circulation": {key: key for key in (
            "mean_pap_mmHg", "sd_pap_mmHg", "min_pap_mmHg", "max_pap_mmHg",
            "mean_pcp_mmHg", "sd_pcp_mmHg", "min_pcp_mmHg", "max_pcp_mmHg",
            "mean_aod_mmHg", "sd_aod_mmHg", "mean_baro_hz")},
    }
    for module, mapping in scalar_map.items():
        if module not in series:
            continue
        scalars = series[module].scalars
        for metric, key in mapping.items():
            if key in scalars:
                values[metric] = scalars[key]
    return SummaryMetrics(**values)


def _daily_refresh(graph: CompositionGraph, series: Mapping[str, TimeSeries], cfg: ScenarioConfig,
                   integrator: Optional[IntegratorConfig]) -> Dict[str, float]:
    """Rerun circulation once per simulated day with that day's stiffness."""
    module = graph.module("circulation")
    coupling = series["coupling"].scalars
    offset = Signal.constant(coupling["pressure_offset"], "mmHg")
    daily = {}
    for day in range(1, cfg.horizon_days + 1):
        scale = coupling[f"stiffness_scale_day{day}"]
        run = integrate(module, 0.0, module.horizon,
                        {"stiffness_scale": Signal.constant(scale, "1"), "pressure_offset": offset}, integrator)
        daily[f"day{day}_stiffness_scale"] = scale
        daily[f"day{day}_mean_pcp_mmHg"] = run.scalars["mean_pcp_mmHg"]
        daily[f"day{day}_sd_pcp_mmHg"] = run.scalars["sd_pcp_mmHg"]
    return daily


def run_scenario(cfg: ScenarioConfig, overrides: Optional[Overrides] = None,
                 integrator: Optional[IntegratorConfig] = None) -> ScenarioResult:
    """Run the enabled stages in pipeline order and gather the summary metrics.

    Raises:
        ConfigError: bad override or ABP record
        ScenarioError: any numerical failure, tagged with the scenario label
    """
    logger.info("scenario %s: modules %s", cfg.label, ", ".join(cfg.enabled_modules))
    try:
        graph = build_graph(cfg, overrides)
        series = compose(graph, cfg=integrator)
        daily = {}
        if cfg.refresh_daily and {"coupling", "circulation"} <= set(cfg.enabled_modules):
            daily = _daily_refresh(graph, series, cfg, integrator)
    except ScenarioError:
        raise
    except SimulationError as exc:
        raise ScenarioError(cfg.label, exc.module or "pipeline", str(exc)) from exc
    metrics = collect_metrics(cfg, series)
    logger.info("scenario %s: done", cfg.label)
    return ScenarioResult(cfg, series, metrics, daily)


@dataclass
class CohortResult:
    order: List[str]
    results: Dict[str, ScenarioResult]
    failures: Dict[str, str] = field(default_factory=dict)

    def comparison(self) -> pl.DataFrame:
        rows = [metrics_row(self.results[label].metrics) for label in self.order if label in self.results]
        if not rows:
            return pl.DataFrame({"label": []}, schema={"label": pl.Utf8})
        return pl.DataFrame(rows, schema_overrides={"age_years": pl.Float64})


def _run_one(args) -> Tuple[str, object]:
    cfg, overrides, integrator = args
    try:
        return "ok", run_scenario(cfg, overrides, integrator)
    except SimulationError as exc:
        logger.error("scenario %s failed: %s", cfg.label, exc)
        return "error", str(exc)


def run_cohort(configs: Optional[Sequence[ScenarioConfig]] = None, overrides: Optional[Overrides] = None,
               integrator: Optional[IntegratorConfig] = None, jobs: int = 1) -> CohortResult:
    configs = list(builtin_cohort() if configs is None else configs)
    labels = [cfg.label for cfg in configs]
    duplicates = sorted({label for label in labels if labels.count(label) > 1})
    if duplicates:
        raise ConfigError("label", f"labels must be unique in a cohort: {duplicates}")
    tasks = [(cfg, overrides, integrator) for cfg in configs]
    if jobs > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            outcomes = list(pool.map(_run_one, tasks))
    else:
        outcomes = [_run_one(task) for task in tasks]
    result = CohortResult(labels, {})
    for label, (status, payload) in zip(labels, outcomes):
        if status == "ok":
            result.results[label] = payload
        else:
            result.failures[label] = payload
    return result


def resolve_sweep_field(param: str) -> str:
    name = param[len("profile."):] if param.startswith("profile.") else param
    field_info = PatientProfile.model_fields.get(name)
    if field_info is None or name in ("lifestyle", "abp_source"):
        raise ConfigError("param", f"'{param}' is not a numeric patient profile field")
    return name


def sweep_configs(base: ScenarioConfig, param: str, values: Sequence[float]) -> List[ScenarioConfig]:
    if not values:
        raise ConfigError("values", "sweep needs at least one value")
    name = resolve_sweep_field(param)
    configs = []
    for value in values:
        data = base.profile.model_dump()
        data[name] = value
        try:
            profile = PatientProfile.model_validate(data)
        except ValidationError as exc:
            raise ConfigError(name, exc.errors()[0].get("msg", "invalid value")) from None
        label = f"{base.label}@{name}={value:g}"
        configs.append(base.model_copy(update={"label": label, "profile": profile}))
    return configs


def sweep(base: ScenarioConfig, param: str, values: Sequence[float], overrides: Optional[Overrides] = None,
          integrator: Optional[IntegratorConfig] = None, jobs: int = 1) -> Tuple[CohortResult, pl.DataFrame]:
    """One run per value of a profile field; returns the runs and a value-by-metric table."""
    configs = sweep_configs(base, param, values)
    cohort = run_cohort(configs, overrides, integrator, jobs)
    table = cohort.comparison()
    value_by_label = {cfg.label: float(v) for cfg, v in zip(configs, values)}
    if table.height:
        table = table.with_columns(
            pl.col("label").replace_strict(value_by_label, return_dtype=pl.Float64).alias("value")
        ).select(["value"] + table.columns)
    return cohort, table


def ordered_metric(cohort: CohortResult, labels: Sequence[str], metric: str) -> np.ndarray:
    return np.array([getattr(cohort.results[label].metrics, metric) for label in labels], dtype=float)


def with_beats(cfg: ScenarioConfig, beats: int) -> ScenarioConfig:
    """Shorten or lengthen the cardiac run, keeping the transient below the beat count."""
    if beats < 1:
        raise ConfigError("beats", "must be at least 1")
    update = {"cardiac_beats": beats}
    if cfg.transient_beats >= beats:
        update["transient_beats"] = beats // 3
    return cfg.model_copy(update=update)
