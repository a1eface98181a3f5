from pathlib import Path
from typing import List, Mapping, Optional, Sequence, Union
import logging

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from algos.kernel_algo import TimeSeries  # noqa: E402

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]

plt.rcParams.update({
    "svg.hashsalt": "compatient",
    "svg.fonttype": "none",
    "figure.figsize": (8, 5),
    "axes.grid": True,
})

PRESSURE_TRACES = (("P_pap", "pulmonary arterial proximal"), ("P_pa", "pulmonary arterioles"),
                   ("P_pcp", "pulmonary capillaries"))


def _save(fig, path: PathLike) -> Path:
    path = Path(path)
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)
    logger.debug("wrote %s", path)
    return path


def plot_pressures(series: TimeSeries, path: PathLike, last_beats: int = 5, period: float = 0.8) -> Path:
    """Pulmonary pressures over the final beats of a circulation run."""
    t = series.time_s
    keep = t >= t[-1] - last_beats * period
    fig, ax = plt.subplots()
    for column, label in PRESSURE_TRACES:
        if column in series.names:
            ax.plot(t[keep], series[column][keep], label=label)
    ax.set_xlabel("time (s)")
    ax.set_ylabel("pressure (mmHg)")
    ax.set_title(f"{series.module}: lungs' pressures")
    ax.legend(loc="upper right")
    return _save(fig, path)


def plot_phase(series: TimeSeries, path: PathLike) -> Path:
    fig, ax = plt.subplots()
    ax.plot(series["G"], series["I"], lw=0.8)
    ax.plot(series["G"][0], series["I"][0], "o", label="start")
    ax.set_xlabel("glucose (mg/dl)")
    ax.set_ylabel("insulin (uU/ml)")
    ax.set_title("Glucose-insulin phase space")
    ax.legend()
    return _save(fig, path)


def plot_drug(series: TimeSeries, path: PathLike) -> Path:
    fig, ax = plt.subplots()
    ax.plot(series.t, series["drug"])
    ax.set_xlabel("time (h)")
    ax.set_ylabel("concentration (mg/L)")
    ax.set_title("Drug concentration")
    return _save(fig, path)


def plot_inflammation(series: TimeSeries, path: PathLike) -> Path:
    fig, ax = plt.subplots()
    ax.plot(series.t, series["IR"])
    ax.set_xlabel("time (h)")
    ax.set_ylabel("inflammation score")
    ax.set_title("Inflammation score")
    return _save(fig, path)


def plot_overlay(traces: Mapping[str, TimeSeries], column: str, ylabel: str, path: PathLike,
                 time_column: str = "t", last: Optional[float] = None) -> List[str]:
    """One line per scenario, in mapping order; returns the legend labels.

    ``last`` keeps only the final stretch of each trace, in the series' own time unit.
    """
    fig, ax = plt.subplots()
    labels = []
    for label, series in traces.items():
        if column not in series.names:
            continue
        t = series.time_s if time_column == "time_s" else series.t
        y = series[column]
        if last is not None:
            keep = t >= t[-1] - last
            t, y = t[keep] - t[keep][0], y[keep]
        ax.plot(t, y, label=label)
        labels.append(label)
    ax.set_xlabel("time (s)" if time_column == "time_s" else "time (h)")
    ax.set_ylabel(ylabel)
    if labels:
        ax.legend(loc="upper right", fontsize="small")
    _save(fig, path)
    return labels


def write_scenario_plots(series: Mapping[str, TimeSeries], label: str, out_dir: PathLike,
                         period: float = 0.8) -> Sequence[Path]:
    out_dir = Path(out_dir)
    written = []
    if "circulation" in series:
        written.append(plot_pressures(series["circulation"], out_dir / f"{label}_pressure.svg", period=period))
    if "diabetes" in series:
        written.append(plot_phase(series["diabetes"], out_dir / f"{label}_phase.svg"))
    if "pk" in series:
        written.append(plot_drug(series["pk"], out_dir / f"{label}_drug.svg"))
    if "coupling" in series:
        written.append(plot_inflammation(series["coupling"], out_dir / f"{label}_inflammation.svg"))
    return written

