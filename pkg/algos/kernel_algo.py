from dataclasses import dataclass, field, fields, replace
from enum import Enum
from typing import Callable, Dict, List, Mapping, Optional, Sequence, Set, Tuple
import logging
import math

import networkx as nx
import numpy as np
from pydantic import BaseModel, ConfigDict, Field
from scipy.integrate import solve_ivp

logger = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# Errors
# ---------------------------------------------------------------------------

class SimulationError(Exception):
    """Base class for numerical failures raised while running a model."""

    module: Optional[str] = None


class StepFailure(SimulationError):
    def __init__(self, module: str, message: str):
        self.module = module
        super().__init__(f"{module}: integration failed: {message}")


class NonFiniteState(SimulationError):
    def __init__(self, module: str, variable: str, time: float):
        self.module = module
        self.variable = variable
        self.time = time
        super().__init__(f"{module}: non-finite value in '{variable}' at t={time:g}")


class EquilibriumNotFound(SimulationError):
    def __init__(self, module: str, message: str):
        self.module = module
        super().__init__(f"{module}: no equilibrium: {message}")


class UnitMismatch(SimulationError):
    pass


class CycleDetected(SimulationError):
    def __init__(self, cycle: Sequence[Tuple[str, str]]):
        self.cycle = list(cycle)
        path = " -> ".join([edge[0] for edge in self.cycle] + [self.cycle[0][0]]) if self.cycle else ""
        super().__init__(f"stage graph has a cycle: {path}")


# ---------------------------------------------------------------------------
# Parameters
# ---------------------------------------------------------------------------

class Provenance(str, Enum):
    PUBLISHED = "published"
    DEFAULT = "default"
    USER = "user"


@dataclass(frozen=True)
class Parameter:
    value: float
    unit: str
    provenance: Provenance = Provenance.DEFAULT


@dataclass(frozen=True)
class ParameterSet:
    entries: Mapping[str, Parameter] = field(default_factory=dict)

    @classmethod
    def from_params(cls, params, units: Mapping[str, str],
                    overridden: Optional[Set[str]] = None) -> "ParameterSet":
        """Record a model's parameter dataclass with units and provenance.

        Args:
            params: frozen parameter dataclass consumed by the model's rhs
            units: unit string per field name ("1" when dimensionless)
            overridden: names that came from a user override file

        Returns:
            ParameterSet with one entry per numeric field
        """
        overridden = overridden or set()
        entries = {}
        for f in fields(params):
            value = getattr(params, f.name)
            if isinstance(value, bool) or not isinstance(value, (int, float)):
                continue
            provenance = Provenance.USER if f.name in overridden else Provenance.DEFAULT
            entries[f.name] = Parameter(float(value), units.get(f.name, "1"), provenance)
        return cls(entries)

    def __getitem__(self, name: str) -> float:
        return self.entries[name].value

    def __contains__(self, name: str) -> bool:
        return name in self.entries

    def names(self) -> List[str]:
        return list(self.entries)


def apply_overrides(params, overrides: Optional[Mapping[str, float]]):
    """Return (new_params, overridden_names). Unknown names raise KeyError."""
    if not overrides:
        return params, set()
    known = {f.name: f for f in fields(params)}
    updates = {}
    for name, value in overrides.items():
        if name not in known:
            raise KeyError(name)
        current = getattr(params, name)
        if isinstance(current, bool):
            updates[name] = bool(value)
        elif isinstance(current, int):
            updates[name] = int(value)
        else:
            updates[name] = float(value)
    return replace(params, **updates), set(updates)


# ---------------------------------------------------------------------------
# State, ports, signals, trajectories
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class StateVector:
    names: Tuple[str, ...]
    values: np.ndarray
    units: Tuple[str, ...]

    def __post_init__(self):
        values = np.asarray(self.values, dtype=float)
        object.__setattr__(self, "values", values)
        if len(set(self.names)) != len(self.names):
            raise ValueError(f"duplicate state names: {self.names}")
        if not (len(self.names) == len(self.units) == values.shape[0]):
            raise ValueError("names, units and values must have the same length")

    def index(self, name: str) -> int:
        return self.names.index(name)

    def entries(self) -> List[Tuple[str, float, str]]:
        return [(n, float(v), u) for n, v, u in zip(self.names, self.values, self.units)]

    def with_values(self, values) -> "StateVector":
        return StateVector(self.names, np.asarray(values, dtype=float).copy(), self.units)


@dataclass(frozen=True)
class Port:
    name: str
    unit: str


class Signal:
    """Time-indexed input: a constant, a sampled-and-held trajectory, or an exact function."""

    def __init__(self, unit: str, kind: str, t: Optional[np.ndarray] = None,
                 values: Optional[np.ndarray] = None, fn: Optional[Callable] = None):
        self.unit = unit
        self.kind = kind
        self.t = t
        self.values = values
        self.fn = fn

    @classmethod
    def constant(cls, value: float, unit: str) -> "Signal":
        return cls(unit, "constant", values=np.array([float(value)]))

    @classmethod
    def held(cls, t, values, unit: str) -> "Signal":
        t = np.asarray(t, dtype=float)
        values = np.asarray(values, dtype=float)
        if t.ndim != 1 or t.shape != values.shape or t.size == 0:
            raise ValueError("held signal needs matching 1-D time and value arrays")
        return cls(unit, "held", t=t, values=values)

    @classmethod
    def function(cls, fn: Callable[[float], float], unit: str, t=None) -> "Signal":
        grid = None if t is None else np.asarray(t, dtype=float)
        return cls(unit, "function", t=grid, fn=fn)

    def __call__(self, t: float) -> float:
        if self.kind == "constant":
            return float(self.values[0])
        if self.kind == "function":
            return float(self.fn(t))
        i = int(np.searchsorted(self.t, t, side="right")) - 1
        return float(self.values[min(max(i, 0), self.values.size - 1)])

    def covers(self, t0: float, t1: float) -> bool:
        if self.kind != "held":
            return True
        tol = 1e-9 * max(1.0, abs(t0), abs(t1))
        return self.t[0] <= t0 + tol and self.t[-1] >= t1 - tol

    def samples(self) -> np.ndarray:
        if self.kind == "constant":
            return self.values.copy()
        if self.kind == "held":
            return self.values
        if self.t is None:
            raise ValueError("function signal without a sample grid cannot be summarized")
        return np.array([self.fn(x) for x in self.t], dtype=float)

    def summarize(self, how: str) -> "Signal":
        if how == "hold":
            return self
        data = self.samples()
        reducers = {"max": np.max, "min": np.min, "mean": np.mean, "last": lambda a: a[-1]}
        if how not in reducers:
            raise ValueError(f"unknown wire summary '{how}'")
        return Signal.constant(float(reducers[how](data)), self.unit)

    def retimed(self, ratio: float) -> "Signal":
        """The same signal on a clock where one source unit lasts ``ratio`` target units."""
        if ratio == 1.0 or self.kind == "constant":
            return self
        if ratio <= 0:
            raise ValueError("time ratio must be positive")
        grid = None if self.t is None else self.t * ratio
        if self.kind == "held":
            return Signal.held(grid, self.values, self.unit)
        inner = self.fn
        return Signal.function(lambda t: inner(t / ratio), self.unit, grid)

    def affine(self, scale: float, offset: float, unit: str) -> "Signal":
        if self.kind == "constant":
            return Signal.constant(scale * self.values[0] + offset, unit)
        if self.kind == "held":
            return Signal.held(self.t, scale * self.values + offset, unit)
        inner = self.fn
        return Signal.function(lambda t: scale * inner(t) + offset, unit, self.t)


@dataclass
class TimeSeries:
    module: str
    t: np.ndarray
    names: Tuple[str, ...]
    units: Tuple[str, ...]
    values: np.ndarray
    time_unit: str = "s"
    time_scale: float = 1.0
    scalars: Dict[str, float] = field(default_factory=dict)
    # sample times in seconds as read from a file; derived from t when absent
    seconds: Optional[np.ndarray] = field(default=None, repr=False)

    def __post_init__(self):
        if self.values.shape != (self.t.shape[0], len(self.names)):
            raise ValueError(
                f"{self.module}: values shape {self.values.shape} does not match "
                f"{self.t.shape[0]} samples x {len(self.names)} columns")

    def column(self, name: str) -> np.ndarray:
        try:
            return self.values[:, self.names.index(name)]
        except ValueError:
            raise KeyError(f"{self.module} has no column '{name}'") from None

    def __getitem__(self, name: str) -> np.ndarray:
        return self.column(name)

    @property
    def time_s(self) -> np.ndarray:
        return self.t * self.time_scale if self.seconds is None else self.seconds

    def unit(self, name: str) -> str:
        return self.units[self.names.index(name)]

    def final(self) -> Dict[str, float]:
        return {n: float(v) for n, v in zip(self.names, self.values[-1])}

    def signal(self, name: str) -> Signal:
        return Signal.held(self.t, self.column(name), self.unit(name))

    def window(self, t0: float, t1: float) -> "TimeSeries":
        mask = (self.t >= t0) & (self.t <= t1)
        return TimeSeries(self.module, self.t[mask], self.names, self.units, self.values[mask],
                          self.time_unit, self.time_scale, dict(self.scalars),
                          None if self.seconds is None else self.seconds[mask])


# ---------------------------------------------------------------------------
# Modules and graphs
# ---------------------------------------------------------------------------

Rhs = Callable[[float, np.ndarray, Mapping[str, float]], np.ndarray]
Observer = Callable[[np.ndarray, np.ndarray, Mapping[str, Signal]],
                    Tuple[Tuple[str, ...], Tuple[str, ...], np.ndarray]]
Summarizer = Callable[[TimeSeries, Mapping[str, Signal]], Dict[str, float]]


@dataclass(frozen=True)
class ModelModule:
    """A black-box block: state, parameters, ports and a derivative function.

    Modules whose trajectory is known in closed form provide ``closed_form``
    instead of ``rhs``; integrate() evaluates it on the output grid.
    ``jac`` has the rhs signature and returns d(rhs)/dy; the stiff solver uses
    it instead of finite differences. ``time_scale`` is seconds per model time unit.
    """

    id: str
    state: StateVector
    params: ParameterSet
    rhs: Optional[Rhs] = None
    input_ports: Tuple[Port, ...] = ()
    output_ports: Tuple[Port, ...] = ()
    outputs: Mapping[str, Callable[[TimeSeries], Signal]] = field(default_factory=dict)
    defaults: Mapping[str, Signal] = field(default_factory=dict)
    closed_form: Optional[Callable[[np.ndarray, Mapping[str, Signal]], np.ndarray]] = None
    observe: Optional[Observer] = None
    summarize: Optional[Summarizer] = None
    initial: Optional[Callable[[Mapping[str, Signal]], np.ndarray]] = None
    jac: Optional[Callable[[float, np.ndarray, Mapping[str, float]], np.ndarray]] = None
    time_unit: str = "s"
    time_scale: float = 1.0
    horizon: Optional[float] = None
    output_step: Optional[float] = None
    max_step: Optional[float] = None

    def __post_init__(self):
        if (self.rhs is None) == (self.closed_form is None):
            raise ValueError(f"module '{self.id}' needs exactly one of rhs or closed_form")
        declared = {p.name for p in self.output_ports}
        missing = declared - set(self.outputs)
        if missing:
            raise ValueError(f"module '{self.id}' declares outputs without extractors: {sorted(missing)}")

    def input_port(self, name: str) -> Port:
        for port in self.input_ports:
            if port.name == name:
                return port
        raise KeyError(f"module '{self.id}' has no input port '{name}'")

    def output_port(self, name: str) -> Port:
        for port in self.output_ports:
            if port.name == name:
                return port
        raise KeyError(f"module '{self.id}' has no output port '{name}'")


@dataclass(frozen=True)
class Wire:
    source: str
    source_port: str
    target: str
    target_port: str
    summary: str = "hold"
    scale: float = 1.0
    offset: float = 0.0
    unit: Optional[str] = None

    def apply(self, signal: Signal) -> Signal:
        out = signal.summarize(self.summary)
        if self.scale != 1.0 or self.offset != 0.0 or self.unit is not None:
            out = out.affine(self.scale, self.offset, self.unit or out.unit)
        return out


@dataclass(frozen=True)
class CompositionGraph:
    modules: Tuple[ModelModule, ...]
    wires: Tuple[Wire, ...] = ()

    def __post_init__(self):
        ids = [m.id for m in self.modules]
        if len(set(ids)) != len(ids):
            raise ValueError(f"duplicate module ids: {ids}")
        by_id = {m.id: m for m in self.modules}
        for wire in self.wires:
            if wire.source not in by_id or wire.target not in by_id:
                raise KeyError(f"wire references unknown module: {wire}")
            src = by_id[wire.source].output_port(wire.source_port)
            dst = by_id[wire.target].input_port(wire.target_port)
            carried = wire.unit or src.unit
            if carried != dst.unit:
                raise UnitMismatch(
                    f"{wire.source}.{wire.source_port} [{carried}] -> "
                    f"{wire.target}.{wire.target_port} [{dst.unit}]")
        graph = self.stage_graph()
        if not nx.is_directed_acyclic_graph(graph):
            raise CycleDetected(nx.find_cycle(graph))

    def module(self, module_id: str) -> ModelModule:
        for m in self.modules:
            if m.id == module_id:
                return m
        raise KeyError(module_id)

    def stage_graph(self) -> nx.DiGraph:
        graph = nx.DiGraph()
        graph.add_nodes_from(m.id for m in self.modules)
        graph.add_edges_from((w.source, w.target) for w in self.wires)
        return graph

    def solve_order(self) -> List[str]:
        rank = {m.id: i for i, m in enumerate(self.modules)}
        return list(nx.lexicographical_topological_sort(self.stage_graph(), key=rank.__getitem__))

    def wires_into(self, module_id: str) -> List[Wire]:
        return [w for w in self.wires if w.target == module_id]


# ---------------------------------------------------------------------------
# Integration
# ---------------------------------------------------------------------------

class IntegrationMethod(str, Enum):
    ADAPTIVE_STIFF = "adaptive-stiff"
    ADAPTIVE_EXPLICIT = "adaptive-explicit"
    FIXED_RK4_ORACLE = "fixed-rk4-oracle"


_SCIPY_METHODS = {
    IntegrationMethod.ADAPTIVE_STIFF: "LSODA",
    IntegrationMethod.ADAPTIVE_EXPLICIT: "RK45",
}


class IntegratorConfig(BaseModel):
    """Solver settings. ``max_step`` and ``oracle_step`` are in seconds.

    ``rtol`` and ``atol`` bound the band around each sampled trajectory. The
    solver's per-step error test runs at ``local_safety`` times those values.
    """

    model_config = ConfigDict(frozen=True)

    rtol: float = Field(1e-6, gt=0)
    atol: float = Field(1e-9, gt=0)
    max_step: float = Field(3600.0, gt=0)
    method: IntegrationMethod = IntegrationMethod.ADAPTIVE_STIFF
    oracle_step: float = Field(0.1, gt=0)
    local_safety: float = Field(0.05, gt=0, le=1)

    def tightened(self, factor: float = 0.5) -> "IntegratorConfig":
        return self.model_copy(update={"rtol": self.rtol * factor, "atol": self.atol * factor})


def _bind_inputs(signals: Mapping[str, Signal]):
    items = list(signals.items())
    return lambda t: {name: sig(t) for name, sig in items}


def _bind_rhs(module: ModelModule, signals: Mapping[str, Signal]):
    names = module.state.names
    inputs_at = _bind_inputs(signals)

    def fun(t, y):
        dy = np.asarray(module.rhs(t, y, inputs_at(t)), dtype=float)
        if not np.all(np.isfinite(dy)):
            bad = int(np.flatnonzero(~np.isfinite(dy))[0])
            raise NonFiniteState(module.id, f"d({names[bad]})/dt", float(t))
        return dy

    return fun


def _bind_jac(module: ModelModule, signals: Mapping[str, Signal]):
    inputs_at = _bind_inputs(signals)
    return lambda t, y: module.jac(t, y, inputs_at(t))


def _rk4(fun, grid: np.ndarray, y0: np.ndarray, h_max: float) -> np.ndarray:
    out = np.empty((grid.size, y0.size))
    out[0] = y0
    y = y0.copy()
    for k in range(1, grid.size):
        ta, tb = grid[k - 1], grid[k]
        n = max(1, int(math.ceil((tb - ta) / h_max - 1e-9)))
        h = (tb - ta) / n
        for j in range(n):
            t = ta + j * h
            k1 = fun(t, y)
            k2 = fun(t + 0.5 * h, y + 0.5 * h * k1)
            k3 = fun(t + 0.5 * h, y + 0.5 * h * k2)
            k4 = fun(t + h, y + h * k3)
            y = y + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        out[k] = y
    return out


def output_grid(module: ModelModule, t0: float, t1: float) -> np.ndarray:
    step = module.output_step or (t1 - t0) / 100.0
    n = max(1, int(round((t1 - t0) / step)))
    return t0 + (t1 - t0) * np.arange(n + 1) / n


def _resolve_inputs(module: ModelModule, inputs: Optional[Mapping[str, Signal]],
                    t0: float, t1: float) -> Dict[str, Signal]:
    inputs = dict(inputs or {})
    resolved = {}
    for port in module.input_ports:
        signal = inputs.pop(port.name, None)
        if signal is None:
            signal = module.defaults.get(port.name)
        if signal is None:
            raise KeyError(f"module '{module.id}' input '{port.name}' is not connected")
        if signal.unit != port.unit:
            raise UnitMismatch(f"{module.id}.{port.name}: expected [{port.unit}], got [{signal.unit}]")
        if not signal.covers(t0, t1):
            raise ValueError(f"input '{port.name}' of '{module.id}' does not cover [{t0:g}, {t1:g}]")
        resolved[port.name] = signal
    if inputs:
        raise KeyError(f"module '{module.id}' has no input ports {sorted(inputs)}")
    return resolved


def integrate(module: ModelModule, t0: float, t1: float,
              inputs: Optional[Mapping[str, Signal]] = None,
              cfg: Optional[IntegratorConfig] = None,
              t_eval: Optional[np.ndarray] = None,
              y0: Optional[np.ndarray] = None) -> TimeSeries:
    """Integrate one module over [t0, t1] (module time units) and sample it.

    Raises:
        StepFailure: the solver gave up
        NonFiniteState: a derivative or sample became NaN/Inf
    """
    cfg = cfg or IntegratorConfig()
    if not t1 > t0:
        raise ValueError(f"integration interval must satisfy t1 > t0, got [{t0}, {t1}]")
    signals = _resolve_inputs(module, inputs, t0, t1)
    if y0 is None and module.initial is not None:
        y0 = module.initial(signals)
    y_start = np.asarray(module.state.values if y0 is None else y0, dtype=float).copy()
    names = module.state.names
    if y_start.shape != module.state.values.shape:
        raise ValueError(f"{module.id}: initial state has shape {y_start.shape}")
    if not np.all(np.isfinite(y_start)):
        bad = int(np.flatnonzero(~np.isfinite(y_start))[0])
        raise NonFiniteState(module.id, names[bad], t0)

    grid = output_grid(module, t0, t1) if t_eval is None else np.asarray(t_eval, dtype=float)
    if grid[0] != t0 or grid[-1] > t1 + 1e-12 * max(1.0, abs(t1)):
        raise ValueError("output grid must start at t0 and stay within [t0, t1]")

    logger.info("integrating %s over [%g, %g] %s (%s)", module.id, t0, t1, module.time_unit, cfg.method.value)
    if module.closed_form is not None:
        states = np.asarray(module.closed_form(grid, signals), dtype=float).reshape(grid.size, len(names))
    else:
        fun = _bind_rhs(module, signals)
        max_step = cfg.max_step / module.time_scale
        if module.max_step is not None:
            max_step = min(max_step, module.max_step)
        if cfg.method == IntegrationMethod.FIXED_RK4_ORACLE:
            states = _rk4(fun, grid, y_start, min(cfg.oracle_step / module.time_scale, max_step))
        else:
            method = _SCIPY_METHODS[cfg.method]
            extra = {}
            if module.jac is not None and method == "LSODA":
                extra["jac"] = _bind_jac(module, signals)
            sol = solve_ivp(fun, (t0, float(grid[-1])), y_start, method=method, t_eval=grid,
                            rtol=cfg.rtol * cfg.local_safety, atol=cfg.atol * cfg.local_safety,
                            max_step=max_step, **extra)
            if not sol.success:
                raise StepFailure(module.id, sol.message)
            logger.debug("%s: nfev=%d, %s", module.id, sol.nfev, sol.message)
            states = sol.y.T.copy()
        states[0] = y_start

    finite = np.isfinite(states)
    if not finite.all():
        row, col = np.argwhere(~finite)[0]
        raise NonFiniteState(module.id, names[col], float(grid[row]))

    col_names, col_units, values = names, module.state.units, states
    if module.observe is not None:
        extra_names, extra_units, extra = module.observe(grid, states, signals)
        col_names = names + tuple(extra_names)
        col_units = module.state.units + tuple(extra_units)
        values = np.hstack([states, extra])

    series = TimeSeries(module.id, grid, tuple(col_names), tuple(col_units), values,
                        module.time_unit, module.time_scale)
    if module.summarize is not None:
        series.scalars.update(module.summarize(series, signals))
    return series


def compose(graph: CompositionGraph, horizon: Optional[float] = None,
            cfg: Optional[IntegratorConfig] = None) -> Dict[str, TimeSeries]:
    """Run every stage in topological order, feeding outputs through the wires.

    ``horizon`` (seconds) applies to modules that do not carry their own.
    """
    results: Dict[str, TimeSeries] = {}
    for module_id in graph.solve_order():
        module = graph.module(module_id)
        inputs = {}
        for wire in graph.wires_into(module_id):
            upstream = graph.module(wire.source)
            signal = upstream.outputs[wire.source_port](results[wire.source])
            signal = signal.retimed(upstream.time_scale / module.time_scale)
            inputs[wire.target_port] = wire.apply(signal)
            logger.debug("wire %s.%s -> %s.%s (%s)", wire.source, wire.source_port,
                         wire.target, wire.target_port, wire.summary)
        if module.horizon is not None:
            t1 = module.horizon
        elif horizon is not None:
            t1 = horizon / module.time_scale
        else:
            raise ValueError(f"no horizon for module '{module_id}'")
        try:
            results[module_id] = integrate(module, 0.0, t1, inputs, cfg)
        except SimulationError as exc:
            exc.module = exc.module or module_id
            raise
    return results


def relative_linf(a: np.ndarray, b: np.ndarray) -> float:
    """max|a - b| / max|b| per column, reduced with max over columns."""
    a = np.atleast_2d(np.asarray(a, dtype=float).T).T
    b = np.atleast_2d(np.asarray(b, dtype=float).T).T
    scale = np.max(np.abs(b), axis=0)
    scale[scale == 0] = 1.0
    return float(np.max(np.max(np.abs(a - b), axis=0) / scale))


def convergence_ratio(a: np.ndarray, b: np.ndarray, rtol: float, atol: float) -> float:
    """Largest per-column max|a - b| measured in bands of atol + rtol * max|b|."""
    a = np.atleast_2d(np.asarray(a, dtype=float).T).T
    b = np.atleast_2d(np.asarray(b, dtype=float).T).T
    band = atol + rtol * np.max(np.abs(b), axis=0)
    return float(np.max(np.max(np.abs(a - b), axis=0) / band))
