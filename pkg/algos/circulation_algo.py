"""Open-loop lumped-parameter circulation.

Four time-varying-elastance heart chambers, systemic (7), pulmonary (5) and
coronary (4) vessel segments, and a second-order baroreceptor firing model.
The systemic inlet is driven by a prescribed periodic arterial pressure.

The stiffness scale multiplies every scalable compliance and raises the
pulmonary resistances by ``scale ** -pulmonary_resistance_exponent``.
"""
from bisect import bisect_right
from dataclasses import dataclass
from functools import cached_property, partial
from typing import Callable, Dict, Mapping, Optional, Sequence, Set, Tuple, Union
import logging
import math

import numpy as np
import polars as pl
from scipy.optimize import minimize_scalar

from algos.kernel_algo import (IntegratorConfig, ModelModule, ParameterSet, Port, Signal,
                               StateVector, TimeSeries, integrate)

logger = logging.getLogger(__name__)

ABP_SANITY_BAND = (40.0, 250.0)
SAMPLES_PER_BEAT = 160
STEPS_PER_BEAT = 200
EXPONENT_CLIP = 50.0
ABP_SECOND_HARMONIC = 0.35

Scales = Union[float, Mapping[str, float]]


@dataclass(frozen=True)
class Activation:
    """Double-Hill chamber activation over one cardiac cycle, normalised to [0, 1]."""

    alpha1: float = 0.30
    n1: float = 1.32
    alpha2: float = 0.35
    n2: float = 21.9
    delay: float = 0.0

    def raw(self, x):
        x = np.asarray(x, dtype=float)
        u1 = (x / self.alpha1) ** self.n1
        u2 = (x / self.alpha2) ** self.n2
        return u1 / (1.0 + u1) / (1.0 + u2)

    @cached_property
    def peak(self) -> Tuple[float, float]:
        """(phase, raw value) of the activation maximum."""
        grid = np.linspace(0.0, 1.0, 2001)
        values = self.raw(grid)
        i = int(np.argmax(values))
        lo, hi = grid[max(i - 1, 0)], grid[min(i + 1, grid.size - 1)]
        res = minimize_scalar(lambda x: -float(self.raw(x)), bounds=(lo, hi), method="bounded",
                              options={"xatol": 1e-10})
        if -res.fun >= values[i]:
            return float(res.x), float(-res.fun)
        return float(grid[i]), float(values[i])

    def __call__(self, t, T: float):
        phase = np.mod(np.asarray(t, dtype=float) / T - self.delay, 1.0)
        return np.clip(self.raw(phase) / self.peak[1], 0.0, 1.0)


VENTRICLE = Activation()
ATRIUM = Activation(alpha1=0.12, n1=1.32, alpha2=0.14, n2=21.9, delay=0.85)


@dataclass(frozen=True)
class Compartment:
    id: str
    group: str
    C: float
    R_out: float
    downstream: str
    V_unstressed: float
    L: Optional[float] = None
    pv_law: str = "linear"
    P0: float = 0.0
    kind: str = "vessel"

    def __post_init__(self):
        if self.C <= 0 or self.R_out <= 0:
            raise ValueError(f"{self.id}: C and R_out must be positive")
        if self.pv_law not in ("linear", "nonlinear"):
            raise ValueError(f"{self.id}: unknown pv_law {self.pv_law}")
        if self.pv_law == "nonlinear" and self.P0 <= 0:
            raise ValueError(f"{self.id}: nonlinear compartments need P0 > 0")


@dataclass(frozen=True)
class HeartChamber:
    id: str
    E_min: float
    E_max: float
    V_unstressed: float
    R_valve: float
    downstream: str
    activation: Activation
    valve_name: str
    kind: str = "chamber"

    def __post_init__(self):
        if not self.E_max >= self.E_min > 0:
            raise ValueError(f"{self.id}: need E_max >= E_min > 0")


def elastance(t, chamber: HeartChamber, T: float):
    if T <= 0:
        raise ValueError("heart period must be positive")
    return chamber.E_min + (chamber.E_max - chamber.E_min) * chamber.activation(t, T)


DEFAULT_CHAMBERS = (
    HeartChamber("ra", 0.06, 0.25, 10.0, 0.003, "rv", ATRIUM, "tricuspid"),
    HeartChamber("rv", 0.035, 0.6, 10.0, 0.003, "pap", VENTRICLE, "pulmonary"),
    HeartChamber("la", 0.09, 0.3, 10.0, 0.003, "lv", ATRIUM, "mitral"),
    HeartChamber("lv", 0.06, 2.5, 10.0, 0.003, "aop", VENTRICLE, "aortic"),
)

DEFAULT_VESSELS = (
    # systemic
    Compartment("aop", "systemic", 0.3, 0.003, "aod", 25.0, L=0.0003),
    Compartment("aod", "systemic", 0.2, 0.007, "sa", 40.0, L=0.0003),
    Compartment("sa", "systemic", 1.0, 0.1, "sar", 100.0),
    Compartment("sar", "systemic", 0.5, 0.72, "scp", 50.0, pv_law="nonlinear", P0=100.0),
    Compartment("scp", "systemic", 3.0, 0.2, "sv", 250.0),
    Compartment("sv", "systemic", 60.0, 0.08, "vc", 1500.0, pv_law="nonlinear", P0=10.0),
    Compartment("vc", "systemic", 20.0, 0.02, "ra", 150.0, pv_law="nonlinear", P0=5.0),
    # pulmonary
    Compartment("pap", "pulmonary", 0.5, 0.002, "pad", 20.0, L=0.0002),
    Compartment("pad", "pulmonary", 1.0, 0.005, "pa", 30.0, L=0.0002),
    Compartment("pa", "pulmonary", 3.0, 0.04, "pcp", 50.0),
    Compartment("pcp", "pulmonary", 2.5, 0.03, "pv", 70.0),
    Compartment("pv", "pulmonary", 15.0, 0.01, "la", 200.0),
    # coronary, fed from the proximal aorta
    Compartment("cep", "coronary", 0.02, 8.0, "cim", 5.0),
    Compartment("cim", "coronary", 0.05, 10.0, "ccp", 10.0),
    Compartment("ccp", "coronary", 0.1, 3.0, "cv", 10.0),
    Compartment("cv", "coronary", 0.5, 1.0, "ra", 15.0),
)

CIRCULATION_PARAM_UNITS = {
    "T": "s", "R_coronary_inlet": "mmHg*s/ml", "zeta": "1", "omega": "rad/s", "n_max": "Hz",
    "P_mid": "mmHg", "slope": "mmHg", "abp_low": "mmHg", "abp_high": "mmHg",
    "P_ra_init": "mmHg", "P_la_init": "mmHg", "pulmonary_resistance_exponent": "1",
}


@dataclass(frozen=True)
class CirculationParams:
    T: float = 0.8
    R_coronary_inlet: float = 5.0
    zeta: float = 0.7
    omega: float = 2.0 * math.pi
    n_max: float = 100.0
    P_mid: float = 100.0
    slope: float = 10.0
    abp_low: float = 80.0
    abp_high: float = 120.0
    P_ra_init: float = 4.0
    P_la_init: float = 6.5
    # stiffened pulmonary vessels narrow; 0 keeps resistances fixed
    pulmonary_resistance_exponent: float = 0.5
    chambers: Tuple[HeartChamber, ...] = DEFAULT_CHAMBERS
    vessels: Tuple[Compartment, ...] = DEFAULT_VESSELS

    def __post_init__(self):
        if self.T <= 0:
            raise ValueError("heart period must be positive")
        if self.pulmonary_resistance_exponent < 0:
            raise ValueError("pulmonary_resistance_exponent must be nonnegative")


@dataclass(frozen=True)
class AbpSignal:
    """One period of arterial pressure, repeated with linear interpolation.

    ``exact`` replaces the table lookup when the waveform has a closed form.
    """

    t: np.ndarray
    p: np.ndarray
    period: float
    source: str = "builtin-default"
    exact: Optional[Callable[[float], float]] = None

    def __post_init__(self):
        if self.t.ndim != 1 or self.t.shape != self.p.shape or self.t.size < 2:
            raise ValueError("ABP record needs at least two (time, pressure) samples")
        if self.period <= 0 or np.any(np.diff(self.t) <= 0):
            raise ValueError("ABP times must be strictly increasing with a positive period")
        low, high = ABP_SANITY_BAND
        if self.p.min() < low or self.p.max() > high:
            logger.warning("ABP record leaves the [%g, %g] mmHg sanity band (%.1f..%.1f)",
                           low, high, self.p.min(), self.p.max())
        # one wrapped period as plain floats for scalar lookups
        phase = np.mod(self.t, self.period)
        order = np.argsort(phase, kind="stable")
        xs, ps = phase[order].tolist(), self.p[order].tolist()
        object.__setattr__(self, "_xs", [xs[-1] - self.period] + xs + [xs[0] + self.period])
        object.__setattr__(self, "_ps", [ps[-1]] + ps + [ps[0]])

    def __call__(self, t):
        if self.exact is not None:
            return self.exact(t)
        if np.ndim(t):
            return np.interp(t, self.t, self.p, period=self.period)
        tau = float(t) % self.period
        xs, ps = self._xs, self._ps
        i = bisect_right(xs, tau) - 1
        w = (tau - xs[i]) / (xs[i + 1] - xs[i])
        return ps[i] + w * (ps[i + 1] - ps[i])

    def mean(self) -> float:
        return float(np.mean(self.p))

    @classmethod
    def from_csv(cls, path) -> "AbpSignal":
        """Load a single-cycle record with columns time_s, pressure_mmHg.

        The samples are taken as uniformly spaced and not repeating the first
        sample, so the period is the record span plus one sampling interval.
        """
        df = pl.read_csv(path)
        missing = {"time_s", "pressure_mmHg"} - set(df.columns)
        if missing:
            raise ValueError(f"ABP record {path} is missing columns {sorted(missing)}")
        t = df["time_s"].cast(pl.Float64).to_numpy()
        p = df["pressure_mmHg"].cast(pl.Float64).to_numpy()
        period = float(t[-1] - t[0] + np.median(np.diff(t)))
        return cls(t, p, period, source="user-record")


def harmonic_abp(t, T: float, low: float, high: float):
    """Two-harmonic waveform spanning exactly [low, high] mmHg."""
    a = ABP_SECOND_HARMONIC
    c = (math.sqrt(1.0 + 32.0 * a * a) - 1.0) / (8.0 * a)
    w_max = math.sqrt(1.0 - c * c) * (1.0 + 2.0 * a * c)
    if np.ndim(t) == 0:
        theta = 2.0 * math.pi * (float(t) / T - 0.05)
        w = math.sin(theta) + a * math.sin(2.0 * theta)
    else:
        theta = 2.0 * math.pi * (np.asarray(t, dtype=float) / T - 0.05)
        w = np.sin(theta) + a * np.sin(2.0 * theta)
    return low + (w + w_max) / (2.0 * w_max) * (high - low)


def builtin_abp(T: float = 0.8, low: float = 80.0, high: float = 120.0, samples: int = 800) -> AbpSignal:
    exact = partial(harmonic_abp, T=T, low=low, high=high)
    t = T * np.arange(samples) / samples
    return AbpSignal(t, exact(t), T, exact=exact)


@dataclass(frozen=True)
class _Scaled:
    c_hat: np.ndarray
    inv_c: np.ndarray
    nl_P0C: np.ndarray
    res_R: np.ndarray
    in_R: np.ndarray


class CirculationModel:
    """Vectorised network: volumes, inertial flows and baroreceptor state."""

    def __init__(self, params: Optional[CirculationParams] = None, abp: Optional[AbpSignal] = None,
                 base_scales: Optional[Mapping[str, float]] = None, closed_loop: bool = False,
                 scale_coronary: bool = True):
        p = params or CirculationParams()
        self.params = p
        self.abp = abp or builtin_abp(p.T, p.abp_low, p.abp_high)
        self.closed_loop = closed_loop
        self.chambers = p.chambers
        self.vessels = p.vessels
        self.ids = tuple(c.id for c in self.chambers) + tuple(v.id for v in self.vessels)
        index = {cid: i for i, cid in enumerate(self.ids)}
        self.index = index
        n = len(self.ids)
        self.n = n
        self.aop = index["aop"]

        self.V0 = np.array([c.V_unstressed for c in self.chambers] + [v.V_unstressed for v in self.vessels])
        self.C = np.array([np.nan] * len(self.chambers) + [v.C for v in self.vessels])
        self.scalable = np.array([False] * len(self.chambers) +
                                 [scale_coronary or v.group != "coronary" for v in self.vessels])
        base = np.ones(n)
        for cid, factor in (base_scales or {}).items():
            if cid not in index or cid in {c.id for c in self.chambers}:
                raise KeyError(f"no vessel compartment '{cid}'")
            if not 0 < factor <= 1:
                logger.warning("compliance scale %g for %s is outside (0, 1]", factor, cid)
            base[index[cid]] = factor
        self.base_scale = base

        offset = len(self.chambers)
        self.n_chambers = offset
        self.E_min = np.array([c.E_min for c in self.chambers])
        self.E_span = np.array([c.E_max - c.E_min for c in self.chambers])
        self.E_max = self.E_min + self.E_span
        acts = [c.activation for c in self.chambers]
        self.act_alpha1 = np.array([a.alpha1 for a in acts])
        self.act_n1 = np.array([a.n1 for a in acts])
        self.act_alpha2 = np.array([a.alpha2 for a in acts])
        self.act_n2 = np.array([a.n2 for a in acts])
        self.act_delay = np.array([a.delay for a in acts])
        self.act_peak = np.array([a.peak[1] for a in acts])
        self.lin_idx = np.array([offset + k for k, v in enumerate(self.vessels) if v.pv_law == "linear"], dtype=int)
        self.nl_idx = np.array([offset + k for k, v in enumerate(self.vessels) if v.pv_law == "nonlinear"],
                               dtype=int)
        self.P0_nl = np.array([v.P0 for v in self.vessels if v.pv_law == "nonlinear"])

        res_src, res_dst, res_R, res_valve, res_pulm = [], [], [], [], []
        self.valve_names = []
        for c in self.chambers:
            res_src.append(index[c.id]); res_dst.append(index[c.downstream])
            res_R.append(c.R_valve); res_valve.append(True); res_pulm.append(False)
            self.valve_names.append(c.valve_name)
        in_src, in_dst, in_R, in_L, self.inertial_names, in_group = [], [], [], [], [], []
        for v in self.vessels:
            if v.L is not None:
                in_src.append(index[v.id]); in_dst.append(index[v.downstream])
                in_R.append(v.R_out); in_L.append(v.L)
                self.inertial_names.append(f"q_{v.id}"); in_group.append(v.group)
            else:
                res_src.append(index[v.id]); res_dst.append(index[v.downstream])
                res_R.append(v.R_out); res_valve.append(False); res_pulm.append(v.group == "pulmonary")
        res_src.append(self.aop); res_dst.append(index["cep"])
        res_R.append(p.R_coronary_inlet); res_valve.append(False); res_pulm.append(False)
        self.res_src, self.res_dst = np.array(res_src), np.array(res_dst)
        self.res_R, self.res_valve = np.array(res_R), np.array(res_valve)
        self.res_pulmonary = np.array(res_pulm)
        self.valve_edges = np.flatnonzero(self.res_valve)
        self.in_src, self.in_dst = np.array(in_src, dtype=int), np.array(in_dst, dtype=int)
        self.in_R, self.in_L = np.array(in_R), np.array(in_L)
        self.in_group = tuple(in_group)
        self.in_pulmonary = np.array([g == "pulmonary" for g in in_group], dtype=bool)
        self.n_inertial = len(in_src)

        # edge x compartment incidence: +1 at the source, -1 at the destination
        self.D_res = self._incidence(self.res_src, self.res_dst)
        self.D_in = self._incidence(self.in_src, self.in_dst)
        self.B_res = np.ascontiguousarray(-self.D_res.T)
        self.B_in = np.ascontiguousarray(-self.D_in.T)
        self._scaled_cache: Dict[float, _Scaled] = {}

        self.state_names = tuple(f"V_{cid}" for cid in self.ids) + tuple(self.inertial_names) + ("n_br", "n_br_dot")
        self.state_units = ("ml",) * n + ("ml/s",) * self.n_inertial + ("Hz", "Hz/s")

    def _incidence(self, src: np.ndarray, dst: np.ndarray) -> np.ndarray:
        D = np.zeros((src.size, self.n))
        rows = np.arange(src.size)
        D[rows, src] = 1.0
        D[rows, dst] = -1.0
        return D

    # -- constitutive laws -------------------------------------------------

    def _scaled(self, scale: float) -> _Scaled:
        scale = float(scale)
        hit = self._scaled_cache.get(scale)
        if hit is not None:
            return hit
        if not scale > 0:
            raise ValueError(f"stiffness scale must be positive, got {scale}")
        c_hat = self.C * self.base_scale * np.where(self.scalable, scale, 1.0)
        inv_c = np.zeros(self.n)
        vessels = slice(self.n_chambers, self.n)
        inv_c[vessels] = 1.0 / c_hat[vessels]
        factor = self.resistance_factor(scale)
        entry = _Scaled(
            c_hat=c_hat,
            inv_c=inv_c,
            nl_P0C=self.P0_nl * c_hat[self.nl_idx],
            res_R=self.res_R * np.where(self.res_pulmonary, factor, 1.0),
            in_R=self.in_R * np.where(self.in_pulmonary, factor, 1.0),
        )
        self._scaled_cache[scale] = entry
        return entry

    def compliance(self, scale: float = 1.0) -> np.ndarray:
        return self._scaled(scale).c_hat.copy()

    def resistance_factor(self, scale: float = 1.0) -> float:
        """Multiplier applied to pulmonary resistances at a stiffness scale."""
        return float(scale) ** -self.params.pulmonary_resistance_exponent

    def resistances(self, scale: float = 1.0) -> Tuple[np.ndarray, np.ndarray]:
        s = self._scaled(scale)
        return s.res_R.copy(), s.in_R.copy()

    def activations(self, t) -> np.ndarray:
        """Chamber activations; a 1-D ``t`` gives one row per time point."""
        if np.ndim(t):
            t = np.asarray(t, dtype=float)[:, None]
        phase = np.mod(t / self.params.T - self.act_delay, 1.0)
        u1 = (phase / self.act_alpha1) ** self.act_n1
        u2 = (phase / self.act_alpha2) ** self.act_n2
        return np.clip(u1 / (1.0 + u1) / (1.0 + u2) / self.act_peak, 0.0, 1.0)

    def elastances(self, t) -> np.ndarray:
        return self.E_min + self.E_span * self.activations(t)

    def pressures(self, t, V: np.ndarray, scale: float = 1.0) -> np.ndarray:
        """Compartment pressures for one state (1-D ``V``) or a batch (rows of ``V``, 1-D ``t``)."""
        s = self._scaled(scale)
        x = V - self.V0
        P = x * s.inv_c
        nl = self.nl_idx
        P[..., nl] = self.P0_nl * np.expm1(np.minimum(x[..., nl] / s.nl_P0C, EXPONENT_CLIP))
        P[..., :self.n_chambers] = self.elastances(t) * x[..., :self.n_chambers]
        if not self.closed_loop:
            P[..., self.aop] = self.abp(t)
        return P

    def pressure_slopes(self, t: float, V: np.ndarray, scale: float = 1.0) -> np.ndarray:
        """dP/dV per compartment; zero for the pinned inlet."""
        s = self._scaled(scale)
        d = s.inv_c.copy()
        nl = self.nl_idx
        z = (V[nl] - self.V0[nl]) / s.nl_P0C
        d[nl] = np.where(z < EXPONENT_CLIP, np.exp(np.minimum(z, EXPONENT_CLIP)), 0.0) * s.inv_c[nl]
        d[:self.n_chambers] = self.elastances(t)
        if not self.closed_loop:
            d[self.aop] = 0.0
        return d

    def volume_for_pressure(self, P: np.ndarray, c_hat: np.ndarray) -> np.ndarray:
        V = self.V0 + c_hat * P
        nl = self.nl_idx
        V[nl] = self.V0[nl] + self.P0_nl * c_hat[nl] * np.log1p(P[nl] / self.P0_nl)
        return V

    def baro_setpoint(self, P_ao: float) -> float:
        p = self.params
        return p.n_max / (1.0 + math.exp(-(P_ao - p.P_mid) / p.slope))

    def baro_setpoint_slope(self, P_ao: float) -> float:
        p = self.params
        sigma = 1.0 / (1.0 + math.exp(-(P_ao - p.P_mid) / p.slope))
        return p.n_max * sigma * (1.0 - sigma) / p.slope

    # -- network -----------------------------------------------------------

    def resistive_flows(self, P: np.ndarray, scale: float = 1.0) -> np.ndarray:
        q = (P @ self.D_res.T) / self._scaled(scale).res_R
        return np.where(self.res_valve, np.maximum(q, 0.0), q)

    def volume_derivatives(self, P: np.ndarray, q_inertial: np.ndarray,
                           scale: float = 1.0) -> Tuple[np.ndarray, np.ndarray]:
        s = self._scaled(scale)
        q = self.resistive_flows(P, scale)
        dV = self.B_res @ q + self.B_in @ q_inertial
        if not self.closed_loop:
            dV[self.aop] = 0.0
        dq = (self.D_in @ P - s.in_R * q_inertial) / self.in_L
        return dV, dq

    def derivatives(self, t: float, y: np.ndarray, scale: float = 1.0) -> np.ndarray:
        n, m = self.n, self.n_inertial
        P = self.pressures(t, y[:n], scale)
        dV, dq = self.volume_derivatives(P, y[n:n + m], scale)
        n_br, n_dot = y[n + m], y[n + m + 1]
        p = self.params
        dd = -2.0 * p.zeta * p.omega * n_dot - p.omega ** 2 * (n_br - self.baro_setpoint(P[self.aop]))
        return np.concatenate([dV, dq, [n_dot, dd]])

    def jacobian(self, t: float, y: np.ndarray, scale: float = 1.0) -> np.ndarray:
        """Analytic d(derivatives)/dy; closed valves contribute nothing."""
        n, m = self.n, self.n_inertial
        s = self._scaled(scale)
        V = y[:n]
        P = self.pressures(t, V, scale)
        slopes = self.pressure_slopes(t, V, scale)
        q = (self.D_res @ P) / s.res_R
        conducting = np.where(self.res_valve, q > 0.0, True)
        dq_dV = (conducting / s.res_R)[:, None] * self.D_res * slopes

        J = np.zeros((n + m + 2, n + m + 2))
        J[:n, :n] = self.B_res @ dq_dV
        J[:n, n:n + m] = self.B_in
        if not self.closed_loop:
            J[self.aop, :] = 0.0
        J[n:n + m, :n] = self.D_in * slopes / self.in_L[:, None]
        J[n:n + m, n:n + m] = np.diag(-s.in_R / self.in_L)

        p = self.params
        b = n + m
        J[b, b + 1] = 1.0
        J[b + 1, b] = -p.omega ** 2
        J[b + 1, b + 1] = -2.0 * p.zeta * p.omega
        if self.closed_loop:
            J[b + 1, self.aop] = p.omega ** 2 * self.baro_setpoint_slope(P[self.aop]) * slopes[self.aop]
        return J

    # -- initial state -----------------------------------------------------

    def _chain(self, start: str, stop: str) -> Sequence[Compartment]:
        by_id = {v.id: v for v in self.vessels}
        out, cur = [], start
        while cur != stop:
            out.append(by_id[cur])
            cur = by_id[cur].downstream
        return out

    def initial_state(self, scale: float = 1.0) -> np.ndarray:
        """Mean-flow pressure guess converted to volumes."""
        p = self.params
        P = np.zeros(self.n)
        P_abp = self.abp.mean()
        systemic = self._chain("aop", "ra")
        coronary = self._chain("cep", "ra")
        pulmonary = self._chain("pap", "la")
        q_sys = (P_abp - p.P_ra_init) / sum(v.R_out for v in systemic)
        q_cor = (P_abp - p.P_ra_init) / (p.R_coronary_inlet + sum(v.R_out for v in coronary))
        q_pul = q_sys + q_cor
        r_pul = self.resistance_factor(scale)

        level = P_abp
        for v in systemic:
            P[self.index[v.id]] = level
            level -= q_sys * v.R_out
        level = P_abp - q_cor * p.R_coronary_inlet
        for v in coronary:
            P[self.index[v.id]] = level
            level -= q_cor * v.R_out
        level = p.P_la_init + q_pul * r_pul * sum(v.R_out for v in pulmonary)
        for v in pulmonary:
            P[self.index[v.id]] = level
            level -= q_pul * r_pul * v.R_out

        V = self.volume_for_pressure(np.maximum(P, 0.0), self.compliance(scale))
        E0 = self.elastances(0.0)
        fill = {"ra": p.P_ra_init, "rv": p.P_ra_init, "la": p.P_la_init, "lv": p.P_la_init}
        for k, c in enumerate(self.chambers):
            V[k] = c.V_unstressed + fill.get(c.id, p.P_ra_init) / E0[k]
        q = np.array([q_sys if g == "systemic" else q_pul for g in self.in_group])
        baro = [self.baro_setpoint(float(self.abp(0.0))), 0.0]
        return np.concatenate([V, q, baro])

    # -- post-processing ---------------------------------------------------

    def pressure_matrix(self, t: np.ndarray, states: np.ndarray, scale: float = 1.0) -> np.ndarray:
        t = np.asarray(t, dtype=float)
        return self.pressures(t, np.array(states[:, :self.n], dtype=float), scale)


def _module_rhs(t, y, inputs, model: CirculationModel):
    return model.derivatives(t, y, inputs["stiffness_scale"])


def _module_jac(t, y, inputs, model: CirculationModel):
    return model.jacobian(t, y, inputs["stiffness_scale"])


def _initial(model: CirculationModel, signals):
    return model.initial_state(signals["stiffness_scale"](0.0))


def _observe(model: CirculationModel, grid, states, signals):
    scale = signals["stiffness_scale"](0.0)
    offset = signals["pressure_offset"](0.0)
    raw = model.pressure_matrix(grid, states, scale)
    flows = model.resistive_flows(raw, scale)[:, model.valve_edges]
    names = tuple(f"P_{cid}" for cid in model.ids) + tuple(f"Q_{v}" for v in model.valve_names)
    units = ("mmHg",) * model.n + ("ml/s",) * len(model.valve_names)
    return names, units, np.hstack([raw - offset, flows])


def pressure_metrics(raw: np.ndarray, offset: float) -> Dict[str, float]:
    """Mean/min/max of the reported (offset) pressure; SD of the raw trace."""
    return {
        "mean": float(np.mean(raw)) - offset,
        "sd": float(np.std(raw)),
        "min": float(np.min(raw)) - offset,
        "max": float(np.max(raw)) - offset,
        "pp": float(np.max(raw) - np.min(raw)),
    }


def _summarize(model: CirculationModel, transient_beats: int, series: TimeSeries, signals):
    scale = signals["stiffness_scale"](0.0)
    offset = signals["pressure_offset"](0.0)
    keep = series.t >= transient_beats * model.params.T - 1e-12
    states = series.values[keep][:, :len(model.state_names)]
    raw = model.pressure_matrix(series.t[keep], states, scale)
    out = {"pressure_offset_mmHg": offset, "stiffness_scale": scale, "period_s": model.params.T,
           "pulmonary_resistance_factor": model.resistance_factor(scale)}
    for cid in model.ids:
        m = pressure_metrics(raw[:, model.index[cid]], offset)
        for stat, value in m.items():
            out[f"{stat}_{cid}_mmHg"] = value
    out["mean_baro_hz"] = float(np.mean(series["n_br"][keep]))
    return out


def circulation_module(model: CirculationModel, beats: int, transient_beats: int = 0,
                       overridden: Optional[Set[str]] = None) -> ModelModule:
    if beats < 1:
        raise ValueError("beats must be >= 1")
    T = model.params.T
    return ModelModule(
        id="circulation",
        state=StateVector(model.state_names, model.initial_state(), model.state_units),
        params=ParameterSet.from_params(model.params, CIRCULATION_PARAM_UNITS, overridden),
        rhs=partial(_module_rhs, model=model),
        jac=partial(_module_jac, model=model),
        input_ports=(Port("stiffness_scale", "1"), Port("pressure_offset", "mmHg")),
        defaults={"stiffness_scale": Signal.constant(1.0, "1"),
                  "pressure_offset": Signal.constant(0.0, "mmHg")},
        observe=partial(_observe, model),
        summarize=partial(_summarize, model, min(transient_beats, beats - 1)),
        initial=partial(_initial, model),
        time_unit="s",
        time_scale=1.0,
        horizon=beats * T,
        output_step=T / SAMPLES_PER_BEAT,
        max_step=T / STEPS_PER_BEAT,
    )


def run_circulation(scales: Scales = 1.0, offset: float = 0.0, beats: int = 30, transient_beats: int = 10,
                    params: Optional[CirculationParams] = None, abp: Optional[AbpSignal] = None,
                    cfg: Optional[IntegratorConfig] = None, closed_loop: bool = False,
                    scale_coronary: bool = True) -> TimeSeries:
    """Integrate the network for a number of beats; metrics land in ``series.scalars``.

    ``scales`` is either one factor for every scalable vessel or a mapping of
    compartment id to factor. Only the single factor moves the pulmonary
    resistances.
    """
    if isinstance(scales, Mapping):
        model = CirculationModel(params, abp, base_scales=scales, closed_loop=closed_loop,
                                 scale_coronary=scale_coronary)
        scalar = 1.0
    else:
        if not 0 < scales <= 1:
            logger.warning("stiffness scale %g is outside (0, 1]", scales)
        model = CirculationModel(params, abp, closed_loop=closed_loop, scale_coronary=scale_coronary)
        scalar = float(scales)
    module = circulation_module(model, beats, transient_beats)
    inputs = {"stiffness_scale": Signal.constant(scalar, "1"),
              "pressure_offset": Signal.constant(offset, "mmHg")}
    return integrate(module, 0.0, module.horizon, inputs, cfg)


def beat_periodicity(series: TimeSeries, column: str, T: float, samples_per_beat: int = SAMPLES_PER_BEAT) -> float:
    """Relative L-infinity difference between the last two complete beats."""
    x = series[column]
    if x.size < 2 * samples_per_beat + 1:
        raise ValueError("need at least two beats of samples")
    last = x[-samples_per_beat - 1:]
    prev = x[-2 * samples_per_beat - 1:-samples_per_beat]
    scale = max(float(np.max(np.abs(last))), 1e-12)
    return float(np.max(np.abs(last - prev)) / scale)
