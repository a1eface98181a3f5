from dataclasses import dataclass, replace
from functools import partial
from typing import List, Optional, Set, Tuple
import logging

import numpy as np
from scipy.optimize import brentq

from algos.kernel_algo import (EquilibriumNotFound, IntegratorConfig, ModelModule, ParameterSet, Port,
                               Signal, StateVector, TimeSeries, integrate)
from schemas import LifestyleSchedule, PatientProfile

logger = logging.getLogger(__name__)

DIABETES_STATE = ("G", "I", "beta_f", "I_R")
DIABETES_UNITS = ("mg/dl", "uU/ml", "mg", "1")
MG_DL_PER_MMOL_L = 18.0

DIABETES_PARAM_UNITS = {
    "R0": "mg/dl/h", "E_G0": "1/h", "S_I": "ml/uU/h", "i": "1", "R1": "mg/dl/h",
    "R2": "mg/dl/h/kcal", "sigma": "uU/ml/mg/h", "alpha": "mg^2/dl^2", "k": "1/h",
    "r0": "1/h", "r1": "dl/mg/h", "r2": "dl^2/mg^2/mg/h", "i0": "1/h", "m": "1/h",
    "q": "ml/uU/h", "Cyt": "1", "G_half": "mg/dl", "beta_0": "mg",
}


@dataclass(frozen=True)
class DiabetesParams:
    R0: float = 36.0
    E_G0: float = 0.06
    S_I: float = 0.03
    i: float = 0.7
    R1: float = 0.0057
    R2: float = 0.04
    sigma: float = 1.8
    alpha: float = 20000.0
    k: float = 18.0
    r0: float = 2.5e-3
    r1: float = 3.5e-5
    r2: float = 1e-7 / 300.0
    i0: float = 0.05
    m: float = 0.01
    q: float = 5e-4
    Cyt: float = 1.0
    G_half: float = 10.0
    beta_0: float = 300.0

    def __post_init__(self):
        if self.alpha <= 0:
            raise ValueError("alpha must be positive")
        for name in ("R0", "E_G0", "S_I", "i", "R1", "R2", "sigma", "k", "r0", "r1", "r2",
                     "i0", "m", "q", "Cyt", "G_half", "beta_0"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be nonnegative")


def diabetic_params(p: Optional[DiabetesParams] = None) -> DiabetesParams:
    """Reduced insulin sensitivity and secretion."""
    p = p or DiabetesParams()
    return replace(p, S_I=p.S_I * 0.5, sigma=p.sigma * 0.55)


def params_for_profile(profile: PatientProfile, base: Optional[DiabetesParams] = None) -> DiabetesParams:
    base = base or DiabetesParams()
    return diabetic_params(base) if profile.diabetic else base


class _ForcingTable:
    """Indicator windows [start, end] on the 24 h clock with their amplitudes."""

    def __init__(self, starts, ends, amounts):
        self.starts = np.asarray(starts, dtype=float)
        self.ends = np.asarray(ends, dtype=float)
        self.amounts = np.asarray(amounts, dtype=float)

    @classmethod
    def meals(cls, sched: LifestyleSchedule) -> "_ForcingTable":
        return cls([m.time_h for m in sched.meals],
                   [m.time_h * (1.0 + m.delta) for m in sched.meals],
                   [m.glycemic_load * m.serving_g for m in sched.meals])

    @classmethod
    def workouts(cls, sched: LifestyleSchedule) -> "_ForcingTable":
        return cls([w.time_h for w in sched.workouts],
                   [w.time_h * (1.0 + w.delta) for w in sched.workouts],
                   [w.kcal for w in sched.workouts])

    def __call__(self, t: float) -> float:
        if self.amounts.size == 0:
            return 0.0
        clock = t % 24.0
        inside = ((self.starts <= clock) & (clock <= self.ends)) | \
                 ((self.starts <= clock + 24.0) & (clock + 24.0 <= self.ends))
        return float(self.amounts[inside].sum())


def meal_forcing(sched: LifestyleSchedule, t: float) -> float:
    return _ForcingTable.meals(sched)(t)


def workout_forcing(sched: LifestyleSchedule, t: float) -> float:
    return _ForcingTable.workouts(sched)(t)


def _rhs(t, s, Cyt, meals: _ForcingTable, workouts: _ForcingTable, p: DiabetesParams):
    G, I, beta, IR = s
    h_m = meals(t)
    h_w = workouts(t)
    dG = p.R0 - G * (p.E_G0 + p.S_I * I / (IR + p.i)) + p.R1 * h_m - p.R2 * h_w * G / (G + p.G_half)
    dI = p.sigma * beta * G * G / (p.alpha + G * G) - p.k * I
    dbeta = -p.r0 + p.r1 * G - p.r2 * G * G * beta
    dIR = -p.i0 * IR + p.m * Cyt + p.q * I
    return np.array([dG, dI, dbeta, dIR])


def diabetes_rhs(t: float, s: np.ndarray, Cyt: float, sched: LifestyleSchedule,
                 p: DiabetesParams) -> np.ndarray:
    """Glucose, insulin, beta-cell mass and insulin resistance derivatives (t in hours)."""
    return _rhs(t, s, Cyt, _ForcingTable.meals(sched), _ForcingTable.workouts(sched), p)


def quasi_steady_insulin(G: float, p: DiabetesParams, beta_f: Optional[float] = None) -> float:
    beta = p.beta_0 if beta_f is None else beta_f
    return p.sigma * beta * G * G / (p.k * (p.alpha + G * G))


def beta_equilibrium(G: float, p: DiabetesParams) -> Optional[float]:
    value = (p.r1 * G - p.r0) / (p.r2 * G * G) if G > 0 and p.r2 > 0 else None
    return value if value is not None and value > 0 else None


def beta_threshold_glucose(p: DiabetesParams, beta_f: Optional[float] = None) -> List[float]:
    """Glucose levels where beta-cell turnover balances at fixed beta_f.

    Below the first root and above the second, cell death outpaces division.
    """
    beta = p.beta_0 if beta_f is None else beta_f
    roots = np.roots([p.r2 * beta, -p.r1, p.r0])
    return sorted(float(r.real) for r in roots if abs(r.imag) < 1e-12 and r.real > 0)


def fasting_equilibrium(p: DiabetesParams, Cyt: Optional[float] = None,
                        beta_f: Optional[float] = None) -> Tuple[float, float, float]:
    """Meal-free fixed point (G, I, I_R) with beta-cell mass held fixed."""
    cyt = p.Cyt if Cyt is None else Cyt

    def residual(G):
        I = quasi_steady_insulin(G, p, beta_f)
        IR = (p.m * cyt + p.q * I) / p.i0
        return p.R0 - G * (p.E_G0 + p.S_I * I / (IR + p.i))

    try:
        G = brentq(residual, 1e-9, 5000.0, xtol=1e-12)
    except ValueError as exc:
        raise EquilibriumNotFound("diabetes", f"fasting glucose outside (0, 5000] mg/dl ({exc})") from exc
    I = quasi_steady_insulin(G, p, beta_f)
    return G, I, (p.m * cyt + p.q * I) / p.i0


def initial_state(p: DiabetesParams, G0: float, Cyt: Optional[float] = None) -> np.ndarray:
    _, I_f, IR_f = fasting_equilibrium(p, Cyt)
    return np.array([G0, quasi_steady_insulin(G0, p), p.beta_0, IR_f])


def post_meal_peaks(series: TimeSeries, sched: LifestyleSchedule, days: int,
                    window_h: float = 2.0) -> np.ndarray:
    """Daily maximum glucose over the windows that follow each meal."""
    t = series.t
    G = series["G"]
    peaks = np.full(days, np.nan)
    for day in range(days):
        mask = np.zeros_like(t, dtype=bool)
        if sched.meals:
            for meal in sched.meals:
                start = 24.0 * day + meal.time_h
                end = 24.0 * day + meal.time_h * (1.0 + meal.delta) + window_h
                mask |= (t >= start) & (t <= end)
        else:
            mask = (t >= 24.0 * day) & (t <= 24.0 * (day + 1))
        if mask.any():
            peaks[day] = float(G[mask].max())
    return peaks


def _summarize(p: DiabetesParams, sched: LifestyleSchedule, days: int, series: TimeSeries, inputs):
    peaks = post_meal_peaks(series, sched, days)
    out = {f"glucose_peak_day{k + 1}": float(v) for k, v in enumerate(peaks)}
    out["glucose_peak"] = float(np.nanmax(peaks))
    out["glucose_fasting"] = fasting_equilibrium(p, inputs["Cyt"](0.0))[0]
    return out


def _peak_output(series: TimeSeries) -> Signal:
    return Signal.constant(series.scalars["glucose_peak"], "mg/dl")


def _column(name: str, series: TimeSeries) -> Signal:
    return series.signal(name)


def _module_rhs(t, y, inputs, meals, workouts, p):
    return _rhs(t, y, inputs["Cyt"], meals, workouts, p)


def diabetes_module(p: DiabetesParams, sched: LifestyleSchedule, horizon_days: int,
                    G0: float, overridden: Optional[Set[str]] = None) -> ModelModule:
    return ModelModule(
        id="diabetes",
        state=StateVector(DIABETES_STATE, initial_state(p, G0), DIABETES_UNITS),
        params=ParameterSet.from_params(p, DIABETES_PARAM_UNITS, overridden),
        rhs=partial(_module_rhs, meals=_ForcingTable.meals(sched),
                    workouts=_ForcingTable.workouts(sched), p=p),
        input_ports=(Port("Cyt", "1"),),
        output_ports=(Port("glucose_peak", "mg/dl"), Port("G", "mg/dl"), Port("I", "uU/ml")),
        outputs={"glucose_peak": _peak_output, "G": partial(_column, "G"), "I": partial(_column, "I")},
        defaults={"Cyt": Signal.constant(p.Cyt, "1")},
        summarize=partial(_summarize, p, sched, horizon_days),
        time_unit="h",
        time_scale=3600.0,
        horizon=24.0 * horizon_days,
        output_step=0.02,
        max_step=0.05,
    )


def run_diabetes(profile: PatientProfile, horizon_days: int = 5,
                 p: Optional[DiabetesParams] = None, cfg: Optional[IntegratorConfig] = None) -> TimeSeries:
    p = p or params_for_profile(profile)
    module = diabetes_module(p, profile.lifestyle, horizon_days, profile.baseline_glucose)
    series = integrate(module, 0.0, module.horizon, None, cfg)
    logger.info("diabetes: glucose peak %.1f mg/dl", series.scalars["glucose_peak"])
    return series
