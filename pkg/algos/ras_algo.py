from dataclasses import dataclass
from functools import partial
from typing import Optional, Set, Union
import logging
import math

import numpy as np

from algos.kernel_algo import (IntegratorConfig, ModelModule, ParameterSet, Port, Signal,
                               StateVector, TimeSeries, integrate)

logger = logging.getLogger(__name__)

LN2 = math.log(2.0)

RAS_STATE = ("Renin", "ANGI", "ANGII", "ANG17", "AT1R", "AT2R", "k_ACE2")
RAS_UNITS = ("pmol/L",) * 6 + ("1/h",)
GLUCOSE_RANGE = (100.0, 200.0)

RAS_PARAM_UNITS = {
    "beta": "pmol/L/h", "h_ren": "h", "k_ren": "1/h", "a_ACE": "dl/mg/h", "b_ACE": "1/h",
    "k_NEP": "1/h", "h_ANGI": "h", "h_ANGII": "h", "h_ANG17": "h", "a_AT1R": "dl/mg/h",
    "b_AT1R": "1/h", "h_AT1R": "h", "k_AT2R": "1/h", "h_AT2R": "h", "k_ACE2_0": "1/h",
    "s_V": "L/pmol/h^2", "e_AI": "1/h", "IC50": "mg/L",
}


@dataclass(frozen=True)
class RasParams:
    beta: float = 60.0
    h_ren: float = 0.2
    k_ren: float = 648.0
    a_ACE: float = 0.2
    b_ACE: float = 32.66
    k_NEP: float = 22.8
    h_ANGI: float = 1.0 / 120.0
    h_ANGII: float = 1.0 / 120.0
    h_ANG17: float = 1.0 / 120.0
    a_AT1R: float = 0.01
    b_AT1R: float = 0.78
    h_AT1R: float = 0.2
    k_AT2R: float = 0.62
    h_AT2R: float = 0.2
    k_ACE2_0: float = 50.0
    s_V: float = 0.5
    e_AI: float = 0.1
    IC50: float = 0.02

    def __post_init__(self):
        for name in ("h_ren", "h_ANGI", "h_ANGII", "h_ANG17", "h_AT1R", "h_AT2R", "IC50"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        for name in ("beta", "k_ren", "k_NEP", "k_AT2R", "k_ACE2_0", "s_V", "e_AI", "a_AT1R", "a_ACE"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be nonnegative")


@dataclass(frozen=True)
class InfectionStatus:
    infected: bool = False
    onset: Optional[float] = None

    def __post_init__(self):
        if self.infected and self.onset is None:
            object.__setattr__(self, "onset", 0.0)
        if not self.infected and self.onset is not None:
            raise ValueError("onset is defined only for an infected patient")

    def active(self, t: float) -> bool:
        return self.infected and t >= self.onset


def ace_activity(G: float, p: RasParams) -> float:
    return p.a_ACE * G + p.b_ACE


def at1r_binding(G: float, p: RasParams) -> float:
    return p.a_AT1R * G + p.b_AT1R


def drug_inhibition(drug: float, p: RasParams) -> float:
    return 1.0 / (1.0 + max(drug, 0.0) / p.IC50)


def ras_rhs(t: float, s: np.ndarray, G: float, drug: float,
            infection: InfectionStatus, p: RasParams) -> np.ndarray:
    renin, angi, angii, ang17, at1r, at2r, k_ace2 = s
    k_ace = ace_activity(G, p) * drug_inhibition(drug, p)
    k_at1r = at1r_binding(G, p)
    d_renin = p.beta - LN2 / p.h_ren * renin
    d_angi = p.k_ren * renin - (k_ace + p.k_NEP) * angi - LN2 / p.h_ANGI * angi
    d_angii = k_ace * angi - (k_ace2 + k_at1r + p.k_AT2R) * angii - LN2 / p.h_ANGII * angii
    d_ang17 = p.k_NEP * angi + k_ace2 * angii - LN2 / p.h_ANG17 * ang17
    d_at1r = k_at1r * angii - LN2 / p.h_AT1R * at1r
    d_at2r = p.k_AT2R * angii - LN2 / p.h_AT2R * at2r
    d_kace2 = p.s_V * angii - p.e_AI * k_ace2 if infection.active(t) else 0.0
    return np.array([d_renin, d_angi, d_angii, d_ang17, d_at1r, d_at2r, d_kace2])


def ras_steady_state(G: float, drug: float, p: RasParams,
                     k_ACE2: Optional[float] = None) -> np.ndarray:
    """Fixed point of the cascade at constant G, drug and ACE2 activity.

    The cascade is linear in the peptides once k_ACE2 is held fixed, so the
    equilibrium is solved in closed form from the head of the chain down.
    """
    k_ace2 = p.k_ACE2_0 if k_ACE2 is None else k_ACE2
    k_ace = ace_activity(G, p) * drug_inhibition(drug, p)
    k_at1r = at1r_binding(G, p)
    renin = p.beta * p.h_ren / LN2
    angi = p.k_ren * renin / (k_ace + p.k_NEP + LN2 / p.h_ANGI)
    angii = k_ace * angi / (k_ace2 + k_at1r + p.k_AT2R + LN2 / p.h_ANGII)
    ang17 = (p.k_NEP * angi + k_ace2 * angii) * p.h_ANG17 / LN2
    at1r = k_at1r * angii * p.h_AT1R / LN2
    at2r = p.k_AT2R * angii * p.h_AT2R / LN2
    return np.array([renin, angi, angii, ang17, at1r, at2r, k_ace2])


def _module_rhs(t, y, inputs, p: RasParams, infection: InfectionStatus):
    return ras_rhs(t, y, inputs["G"], inputs["drug"], infection, p)


def _column(name: str, series: TimeSeries) -> Signal:
    return series.signal(name)


def _baseline_activity(p: RasParams, series: TimeSeries) -> Signal:
    return Signal.constant(p.k_ACE2_0, "1/h")


def _summarize(series: TimeSeries, inputs):
    final = series.final()
    return {"k_ace2_final": final["k_ACE2"], "at1r_final": final["AT1R"], "angii_final": final["ANGII"]}


def ras_module(p: RasParams, infection: InfectionStatus, horizon_days: float,
               y0: Optional[np.ndarray] = None, G_default: float = 108.0,
               overridden: Optional[Set[str]] = None) -> ModelModule:
    initial = ras_steady_state(108.0, 0.0, p) if y0 is None else np.asarray(y0, dtype=float)
    return ModelModule(
        id="ras",
        state=StateVector(RAS_STATE, initial, RAS_UNITS),
        params=ParameterSet.from_params(p, RAS_PARAM_UNITS, overridden),
        rhs=partial(_module_rhs, p=p, infection=infection),
        input_ports=(Port("G", "mg/dl"), Port("drug", "mg/L")),
        output_ports=(Port("k_ACE2", "1/h"), Port("k_ACE2_0", "1/h"), Port("AT1R", "pmol/L")),
        outputs={
            "k_ACE2": partial(_column, "k_ACE2"),
            "k_ACE2_0": partial(_baseline_activity, p),
            "AT1R": partial(_column, "AT1R"),
        },
        defaults={"G": Signal.constant(G_default, "mg/dl"), "drug": Signal.constant(0.0, "mg/L")},
        summarize=_summarize,
        time_unit="h",
        time_scale=3600.0,
        horizon=24.0 * horizon_days,
        output_step=0.05,
        max_step=0.25,
    )


def run_ras(G_const: float, drug_signal: Union[TimeSeries, Signal, None] = None,
            infection: Optional[InfectionStatus] = None, horizon_days: float = 5,
            p: Optional[RasParams] = None, cfg: Optional[IntegratorConfig] = None,
            y0: Optional[np.ndarray] = None) -> TimeSeries:
    """Integrate the RAS at constant glucose from the healthy steady state."""
    p = p or RasParams()
    infection = infection or InfectionStatus()
    low, high = GLUCOSE_RANGE
    if not low <= G_const <= high:
        logger.warning("RAS glucose %g mg/dl is outside [%g, %g]", G_const, low, high)
    if isinstance(drug_signal, TimeSeries):
        drug_signal = drug_signal.signal("drug")
    inputs = {"G": Signal.constant(G_const, "mg/dl")}
    if drug_signal is not None:
        inputs["drug"] = drug_signal
    module = ras_module(p, infection, horizon_days, y0)
    return integrate(module, 0.0, module.horizon, inputs, cfg)
