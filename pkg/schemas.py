from pydantic import BaseModel, Field, field_validator, model_validator
from typing import List, Optional, Dict, Literal
import logging

logger = logging.getLogger(__name__)

MODULE_IDS = ("diabetes", "pk", "ras", "coupling", "circulation")

# Customisable ranges; values outside are accepted with a warning.
PROFILE_RANGES = {
    "age": (20.0, 70.0),
    "baseline_glucose": (100.0, 200.0),
    "acei_dose": (0.0, 5.0),
    "heparin_0": (5000.0, 10000.0),
    "vitamin_D": (20.0, 40.0),
}


class Meal(BaseModel):
    time_h: float = Field(..., ge=0, lt=24, description="clock time of the meal")
    glycemic_load: float = Field(..., ge=0)
    serving_g: float = Field(..., ge=0, description="carbohydrate serving in grams")
    delta: float = Field(0.05, ge=0, description="window length as a fraction of the clock time")


class Workout(BaseModel):
    time_h: float = Field(..., ge=0, lt=24)
    kcal: float = Field(..., ge=0)
    delta: float = Field(0.05, ge=0)


class LifestyleSchedule(BaseModel):
    meals: List[Meal] = []
    workouts: List[Workout] = []

    @classmethod
    def standard(cls) -> "LifestyleSchedule":
        """Three meals and one light afternoon workout."""
        return cls(
            meals=[
                Meal(time_h=8.0, glycemic_load=4.0, serving_g=50.0),
                Meal(time_h=12.0, glycemic_load=42.0, serving_g=100.0),
                Meal(time_h=20.0, glycemic_load=42.0, serving_g=100.0),
            ],
            workouts=[Workout(time_h=18.0, kcal=200.0)],
        )


class PatientProfile(BaseModel):
    age: Optional[float] = Field(None, gt=0, description="years; None for age-independent rows")
    baseline_glucose: float = Field(100.0, gt=0, description="mg/dl")
    diabetic: bool = False
    abp_source: str = "builtin"
    vitamin_D: float = Field(30.0, ge=0, description="ng/mL")
    infected: bool = False
    infection_onset_h: Optional[float] = Field(None, ge=0)
    renal_impaired: bool = False
    acei_enabled: bool = False
    acei_dose: float = Field(5.0, ge=0, description="mg")
    doses_per_day: int = Field(1, ge=0, le=1)
    heparin_0: float = Field(0.0, ge=0, description="U/mL")
    lifestyle: LifestyleSchedule = Field(default_factory=LifestyleSchedule.standard)

    @model_validator(mode="after")
    def check_profile(self):
        if self.infected and self.infection_onset_h is None:
            self.infection_onset_h = 0.0
        if not self.infected and self.infection_onset_h is not None:
            raise ValueError("infection_onset_h is only meaningful for infected patients")
        for name, (low, high) in PROFILE_RANGES.items():
            value = getattr(self, name)
            if value is None:
                continue
            if name == "heparin_0" and value == 0:
                continue
            if not low <= value <= high:
                logger.warning("%s = %g is outside the customisable range [%g, %g]", name, value, low, high)
        return self


class OutputSpec(BaseModel):
    format: Literal["csv", "csv+svg"] = "csv+svg"


class ScenarioConfig(BaseModel):
    label: str = Field(..., min_length=1)
    profile: PatientProfile = Field(default_factory=PatientProfile)
    enabled_modules: List[str] = list(MODULE_IDS)
    horizon_days: int = Field(5, ge=1)
    cardiac_beats: int = Field(30, ge=1)
    transient_beats: int = Field(10, ge=0)
    refresh_daily: bool = False
    treatment_time_h: float = Field(0.0, ge=0)
    scale_coronary: bool = True
    output: OutputSpec = Field(default_factory=OutputSpec)

    @field_validator("label")
    @classmethod
    def label_is_filename_safe(cls, v: str) -> str:
        if any(ch in v for ch in "/\\\n\r\t") or v.strip() != v:
            raise ValueError("label must not contain path separators or surrounding whitespace")
        return v

    @field_validator("enabled_modules")
    @classmethod
    def known_modules(cls, v: List[str]) -> List[str]:
        unknown = sorted(set(v) - set(MODULE_IDS))
        if unknown:
            raise ValueError(f"unknown modules {unknown}; expected a subset of {list(MODULE_IDS)}")
        return [m for m in MODULE_IDS if m in v]

    @model_validator(mode="after")
    def check_beats(self):
        if self.transient_beats >= self.cardiac_beats:
            raise ValueError("transient_beats must be smaller than cardiac_beats")
        if "circulation" in self.enabled_modules and self.profile.age is None:
            logger.warning("%s: circulation enabled without an age; methylation factor defaults to 1", self.label)
        return self


class SummaryMetrics(BaseModel):
    """Flat per-scenario record; field order is the metrics file key order."""

    label: str
    age_years: Optional[float] = None
    diabetic: bool = False
    infected: bool = False
    renal_impaired: bool = False
    acei_enabled: bool = False
    acei_dose_mg: Optional[float] = None
    heparin_0_U_per_mL: Optional[float] = None
    vitamin_D_ng_per_mL: Optional[float] = None
    glucose_peak_mgdl: Optional[float] = None
    glucose_fasting_mgdl: Optional[float] = None
    drug_peak_mgL: Optional[float] = None
    drug_trough_day1_mgL: Optional[float] = None
    drug_trough_day5_mgL: Optional[float] = None
    k_ace2_final_per_h: Optional[float] = None
    at1r_final_pmolL: Optional[float] = None
    ir_steady: Optional[float] = None
    alpha_met: Optional[float] = None
    stiffness_scale: Optional[float] = None
    pressure_offset_mmHg: Optional[float] = None
    mean_pap_mmHg: Optional[float] = None
    sd_pap_mmHg: Optional[float] = None
    min_pap_mmHg: Optional[float] = None
    max_pap_mmHg: Optional[float] = None
    mean_pcp_mmHg: Optional[float] = None
    sd_pcp_mmHg: Optional[float] = None
    min_pcp_mmHg: Optional[float] = None
    max_pcp_mmHg: Optional[float] = None
    mean_aod_mmHg: Optional[float] = None
    sd_aod_mmHg: Optional[float] = None
    mean_baro_hz: Optional[float] = None


# API models

class SweepRequest(BaseModel):
    base: str = "C+V"
    param: str
    values: List[float]
    cardiac_beats: Optional[int] = Field(None, ge=2)


class ScenarioRunResponse(BaseModel):
    success: bool
    label: str
    metrics: SummaryMetrics
    daily: Dict[str, float] = {}


class ImportScenarioResponse(BaseModel):
    success: bool
    scenario: ScenarioConfig
