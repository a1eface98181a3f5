from dataclasses import dataclass
from functools import partial
from typing import Optional, Set
import logging
import math

import numpy as np

from algos.kernel_algo import (ModelModule, ParameterSet, Port, Signal, StateVector,
                               TimeSeries)

logger = logging.getLogger(__name__)

# Relative gap below which k_a and k_e are treated as equal.
RATE_TOLERANCE = 1e-9

PK_UNITS = {
    "d": "mg", "tau": "h", "k_a": "1/h", "k_e": "1/h", "F": "1", "V": "L",
    "n_d": "1", "renal_factor": "1",
}


@dataclass(frozen=True)
class PkParams:
    """One-compartment oral dosing with first-order absorption and elimination."""

    d: float = 5.0
    tau: float = 24.0
    k_a: float = 1.0
    k_e: float = 0.3
    F: float = 0.37
    V: float = 8.0
    n_d: int = 1
    renal_impaired: bool = False
    renal_factor: float = 0.5

    def __post_init__(self):
        if self.k_a <= 0 or self.k_e <= 0 or self.V <= 0:
            raise ValueError("k_a, k_e and V must be positive")
        if not 0 <= self.F <= 1:
            raise ValueError(f"bioavailability F must be in [0, 1], got {self.F}")
        if self.d < 0 or self.tau <= 0:
            raise ValueError("dose must be nonnegative and the dosing interval positive")
        if self.n_d not in (0, 1):
            raise ValueError(f"n_d must be 0 or 1, got {self.n_d}")
        if not 0 < self.renal_factor <= 1:
            raise ValueError("renal_factor must be in (0, 1]")

    @property
    def k_elim(self) -> float:
        return self.k_e * self.renal_factor if self.renal_impaired else self.k_e


def _accumulation(k: float, n, tau: float):
    # (1 - e^{-n k tau}) / (1 - e^{-k tau})
    return np.expm1(-np.asarray(n) * k * tau) / math.expm1(-k * tau)


def _equal_rate_sum(k: float, n, tau: float, t):
    n = np.asarray(n)
    t = np.asarray(t, dtype=float)
    total = np.zeros(np.broadcast(n, t).shape)
    for j in range(int(np.max(n))):
        shifted = t + j * tau
        total = total + np.where(j < n, shifted * np.exp(-k * shifted), 0.0)
    return total


def drug_concentration(p: PkParams, n, t_prime):
    """Plasma concentration t' hours after the n-th dose (n >= 1), mg/L.

    Uses the exponential-denominator accumulation form. When k_a and the
    effective elimination rate coincide the limiting form d*F*k*sum(...)/V
    is used instead.
    """
    n = np.asarray(n)
    if np.any(n < 1):
        raise ValueError("dose index must be >= 1")
    t_prime = np.asarray(t_prime, dtype=float)
    if p.d == 0 or p.n_d == 0:
        return np.zeros(np.broadcast(n, t_prime).shape)
    ka, ke = p.k_a, p.k_elim
    if abs(ka - ke) <= RATE_TOLERANCE * max(ka, ke):
        logger.debug("k_a == k_e within tolerance; using the equal-rate limit")
        c = p.d * p.F / p.V * ke * _equal_rate_sum(ke, n, p.tau, t_prime)
    else:
        bracket = _accumulation(ke, n, p.tau) * np.exp(-ke * t_prime) \
            - _accumulation(ka, n, p.tau) * np.exp(-ka * t_prime)
        c = p.d * p.F / p.V * ka / (ka - ke) * bracket
    return np.maximum(c, 0.0)


def single_dose_concentration(p: PkParams, t):
    t = np.asarray(t, dtype=float)
    safe = np.maximum(t, 0.0)
    c = drug_concentration(p, 1, safe)
    return np.where(t < 0, 0.0, c)


def doses_in_horizon(p: PkParams, horizon_h: float) -> int:
    if p.n_d == 0 or p.d == 0:
        return 0
    return max(1, int(math.ceil(horizon_h / p.tau - 1e-12)))


def drug_at(p: PkParams, t, n_doses: int):
    """Concentration at absolute time t (hours) with doses at 0, tau, ... (n_doses of them)."""
    t = np.asarray(t, dtype=float)
    if n_doses == 0:
        return np.zeros_like(t)
    n = np.clip(np.floor(t / p.tau).astype(int) + 1, 1, n_doses)
    c = drug_concentration(p, n, t - (n - 1) * p.tau)
    return np.where(t < 0, 0.0, c)


def _drug_scalar(p: PkParams, n_doses: int, t: float) -> float:
    return float(drug_at(p, t, n_doses))


def daily_troughs(p: PkParams, days: int) -> np.ndarray:
    """Concentration just before dose k+1 for k = 1..days."""
    if p.n_d == 0 or p.d == 0:
        return np.zeros(days)
    k = np.arange(1, days + 1)
    return drug_concentration(p, k, np.full(days, p.tau))


def drug_signal(p: PkParams, horizon_h: float, step_h: float = 0.05) -> TimeSeries:
    n = max(1, int(round(horizon_h / step_h)))
    t = horizon_h * np.arange(n + 1) / n
    c = drug_at(p, t, doses_in_horizon(p, horizon_h))
    return TimeSeries("pk", t, ("drug",), ("mg/L",), c[:, None], "h", 3600.0)


def _closed_form(p: PkParams, n_doses: int, grid, inputs):
    return drug_at(p, grid, n_doses)[:, None]


def _drug_output(p: PkParams, n_doses: int, series: TimeSeries) -> Signal:
    return Signal.function(partial(_drug_scalar, p, n_doses), "mg/L", t=series.t)


def _summarize(p: PkParams, days: int, series: TimeSeries, inputs):
    troughs = daily_troughs(p, days)
    out = {"drug_peak": float(series["drug"].max()), "drug_trough_day1": float(troughs[0])}
    if days >= 5:
        out["drug_trough_day5"] = float(troughs[4])
    return out


def pk_module(p: PkParams, horizon_days: int, overridden: Optional[Set[str]] = None) -> ModelModule:
    horizon_h = 24.0 * horizon_days
    n_doses = doses_in_horizon(p, horizon_h)
    logger.info("pk: %d dose(s) of %g mg, k_elim=%g/h", n_doses, p.d, p.k_elim)
    return ModelModule(
        id="pk",
        state=StateVector(("drug",), np.zeros(1), ("mg/L",)),
        params=ParameterSet.from_params(p, PK_UNITS, overridden),
        closed_form=partial(_closed_form, p, n_doses),
        output_ports=(Port("drug", "mg/L"),),
        outputs={"drug": partial(_drug_output, p, n_doses)},
        summarize=partial(_summarize, p, horizon_days),
        time_unit="h",
        time_scale=3600.0,
        horizon=horizon_h,
        output_step=0.05,
    )
