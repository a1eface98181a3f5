from dataclasses import dataclass
from functools import partial
from typing import Dict, Optional, Set
import logging

import numpy as np

from algos.kernel_algo import ModelModule, ParameterSet, Port, Signal, StateVector, TimeSeries
from algos.ras_algo import RasParams

logger = logging.getLogger(__name__)

AGE_RANGE = (20.0, 70.0)
# uninfected ACE2 activity; an unwired ACE2 port adds no viral inflammation
BASELINE_ACE2 = RasParams().k_ACE2_0

COUPLING_PARAM_UNITS = {
    "k_SARS": "h", "k_D": "L/mg/h", "k_G": "dl/mg/h", "k_eff": "1/h", "beta0": "1", "beta1": "1/year",
    "beta_h": "mmHg*mL/U", "beta_D": "mmHg*mL/ng", "D0": "ng/mL", "heparin_half_life": "h",
    "c_IR": "1", "epsilon": "1", "compliance_floor": "1",
}


@dataclass(frozen=True)
class CouplingParams:
    k_SARS: float = 0.05
    k_D: float = 5.0
    k_G: float = 0.004
    k_eff: float = 0.1
    beta0: float = 1.1
    beta1: float = 0.005
    beta_h: float = 1.6e-4
    beta_D: float = 0.04
    D0: float = 30.0
    heparin_half_life: float = 1.5
    c_IR: float = 1.0
    epsilon: float = 0.01
    compliance_floor: float = 0.05

    def __post_init__(self):
        if self.beta0 <= 0:
            raise ValueError("beta0 must be positive")
        if self.k_eff <= 0 or self.heparin_half_life <= 0:
            raise ValueError("k_eff and the heparin half-life must be positive")
        for name in ("k_SARS", "k_D", "k_G", "beta1", "beta_h", "beta_D", "D0", "c_IR"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be nonnegative")


def inflammation_rhs(IR: float, k_ACE2: float, k_ACE2_0: float, drug: float, G: float,
                     p: CouplingParams) -> float:
    return p.k_SARS * (k_ACE2 - k_ACE2_0) + p.k_D * drug + p.k_G * G - p.k_eff * IR


def inflammation_steady_state(k_ACE2: float, k_ACE2_0: float, drug: float, G: float,
                              p: CouplingParams) -> float:
    return (p.k_SARS * (k_ACE2 - k_ACE2_0) + p.k_D * drug + p.k_G * G) / p.k_eff


def methylation_factor(A: float, p: Optional[CouplingParams] = None) -> float:
    """Age-linear stiffness multiplier, clamped to (0, 1]."""
    p = p or CouplingParams()
    low, high = AGE_RANGE
    if not low <= A <= high:
        logger.warning("age %g is outside the methylation range [%g, %g]", A, low, high)
    alpha = p.beta0 - p.beta1 * A
    if alpha <= 0:
        logger.warning("methylation factor %g <= 0 at age %g; clamping to %g", alpha, A, p.epsilon)
        return p.epsilon
    return min(alpha, 1.0)


def reduced_compliance(C: float, alpha_MET: float, IR: float, p: Optional[CouplingParams] = None) -> float:
    p = p or CouplingParams()
    if C <= 0:
        raise ValueError("compliance must be positive")
    if IR >= 100:
        logger.warning("inflammation score %g >= 100 drives compliance nonpositive", IR)
    value = alpha_MET * (1.0 - IR / 100.0) * C
    floor = p.compliance_floor * C
    if value < floor:
        logger.warning("reduced compliance %g clamped to %g", value, floor)
        return floor
    return value


def stiffness_factor(alpha_MET: float, IR: float, p: Optional[CouplingParams] = None) -> float:
    return reduced_compliance(1.0, alpha_MET, IR, p)


def heparin_concentration(heparin_0: float, t_h: float, p: Optional[CouplingParams] = None) -> float:
    p = p or CouplingParams()
    return heparin_0 * float(np.exp2(-t_h / p.heparin_half_life))


def treatment_offset(heparin: float, D: float, p: Optional[CouplingParams] = None) -> float:
    """Pressure drop (mmHg) from heparin and vitamin D; negative for vitamin D deficiency."""
    p = p or CouplingParams()
    if heparin < 0:
        raise ValueError("heparin concentration must be nonnegative")
    return p.beta_h * heparin + p.beta_D * (D - p.D0)


def _module_rhs(t, y, inputs, p: CouplingParams):
    return np.array([inflammation_rhs(y[0], inputs["k_ACE2"], inputs["k_ACE2_0"],
                                      inputs["drug"], inputs["G"], p)])


def daily_means(series: TimeSeries, column: str, days: int) -> np.ndarray:
    t = series.t
    x = series[column]
    out = np.empty(days)
    for k in range(days):
        mask = (t >= 24.0 * k) & (t <= 24.0 * (k + 1))
        out[k] = float(np.mean(x[mask]))
    return out


def _summarize(p: CouplingParams, age: Optional[float], heparin_0: float, vitamin_D: float,
               days: int, treatment_time_h: float, series: TimeSeries, inputs) -> Dict[str, float]:
    if age is None:
        alpha = 1.0
    else:
        alpha = methylation_factor(age, p)
    ir_days = daily_means(series, "IR", days)
    ir_ss = float(ir_days[-1])
    heparin = heparin_concentration(heparin_0, treatment_time_h, p)
    out = {
        "ir_steady": ir_ss,
        "alpha_met": alpha,
        "stiffness_scale": stiffness_factor(alpha, ir_ss, p),
        "pressure_offset": treatment_offset(heparin, vitamin_D, p),
    }
    for k, ir in enumerate(ir_days):
        out[f"ir_day{k + 1}"] = float(ir)
        out[f"stiffness_scale_day{k + 1}"] = stiffness_factor(alpha, float(ir), p)
    return out


def _scalar_output(key: str, unit: str, series: TimeSeries) -> Signal:
    return Signal.constant(series.scalars[key], unit)


def _cytokine_output(p: CouplingParams, series: TimeSeries) -> Signal:
    return Signal.held(series.t, p.c_IR * series["IR"], "1")


def _column(name: str, series: TimeSeries) -> Signal:
    return series.signal(name)


def coupling_module(p: CouplingParams, age: Optional[float], heparin_0: float, vitamin_D: float,
                    horizon_days: int, treatment_time_h: float = 0.0, G_default: float = 100.0,
                    overridden: Optional[Set[str]] = None) -> ModelModule:
    return ModelModule(
        id="coupling",
        state=StateVector(("IR",), np.zeros(1), ("1",)),
        params=ParameterSet.from_params(p, COUPLING_PARAM_UNITS, overridden),
        rhs=partial(_module_rhs, p=p),
        input_ports=(Port("k_ACE2", "1/h"), Port("k_ACE2_0", "1/h"), Port("drug", "mg/L"), Port("G", "mg/dl")),
        output_ports=(Port("stiffness_scale", "1"), Port("pressure_offset", "mmHg"),
                      Port("IR", "1"), Port("Cyt", "1")),
        outputs={
            "stiffness_scale": partial(_scalar_output, "stiffness_scale", "1"),
            "pressure_offset": partial(_scalar_output, "pressure_offset", "mmHg"),
            "IR": partial(_column, "IR"),
            "Cyt": partial(_cytokine_output, p),
        },
        defaults={
            "k_ACE2": Signal.constant(BASELINE_ACE2, "1/h"),
            "k_ACE2_0": Signal.constant(BASELINE_ACE2, "1/h"),
            "drug": Signal.constant(0.0, "mg/L"),
            "G": Signal.constant(G_default, "mg/dl"),
        },
        summarize=partial(_summarize, p, age, heparin_0, vitamin_D, horizon_days, treatment_time_h),
        time_unit="h",
        time_scale=3600.0,
        horizon=24.0 * horizon_days,
        output_step=0.05,
        max_step=0.25,
    )
