from contextlib import contextmanager
from pathlib import Path
from typing import Dict, Iterator, List, Mapping, Optional, Tuple, Union
import logging
import os
import shutil
import tempfile

import numpy as np
import polars as pl
from pydantic import ValidationError

from algos.kernel_algo import TimeSeries
from schemas import MODULE_IDS, ScenarioConfig, SummaryMetrics

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]
VALUE_FORMAT = "%.9g"

SCENARIO_KEYS = {
    "label", "enabled_modules", "horizon_days", "cardiac_beats", "transient_beats",
    "refresh_daily", "treatment_time_h", "scale_coronary", "format",
}
PROFILE_KEYS = {
    "age", "baseline_glucose", "diabetic", "infected", "infection_onset_h", "renal_impaired",
    "acei_enabled", "acei_dose", "doses_per_day", "heparin_0", "vitamin_D", "abp_source",
    "meals", "workouts",
}


class ConfigError(ValueError):
    def __init__(self, field: str, reason: str, line: Optional[int] = None, source: Optional[str] = None):
        self.field = field
        self.reason = reason
        self.line = line
        self.source = source
        where = source or "<config>"
        if line is not None:
            where = f"{where}:{line}"
        super().__init__(f"{where}: {field}: {reason}")


def parse_key_values(text: str, source: str = "<string>") -> List[Tuple[str, str, int]]:
    """Split ``key = value`` lines; '#' starts a comment."""
    entries, seen = [], {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError("syntax", f"expected 'key = value', got {line!r}", lineno, source)
        key, value = (part.strip() for part in line.split("=", 1))
        if not key:
            raise ConfigError("syntax", "empty key", lineno, source)
        if key in seen:
            raise ConfigError(key, f"duplicate key (first set on line {seen[key]})", lineno, source)
        seen[key] = lineno
        entries.append((key, value, lineno))
    return entries


def _parse_entries(value: str, fields: Tuple[str, ...], required: int, key: str,
                   line: int, source: str) -> List[Dict[str, float]]:
    items = []
    for chunk in (c.strip() for c in value.split(",")):
        if not chunk:
            continue
        parts = chunk.split(":")
        if not required <= len(parts) <= len(fields):
            raise ConfigError(key, f"entry {chunk!r} needs {required} to {len(fields)} ':'-separated numbers",
                              line, source)
        try:
            items.append({name: float(part) for name, part in zip(fields, parts)})
        except ValueError:
            raise ConfigError(key, f"entry {chunk!r} is not numeric", line, source) from None
    return items


def _locate(loc: Tuple, lines: Mapping[str, int]) -> str:
    names = [str(part) for part in loc if isinstance(part, str)]
    for name in reversed(names):
        if name in lines:
            return name
    if "meals" in names:
        return "meals"
    if "workouts" in names:
        return "workouts"
    return names[-1] if names else "scenario"


def config_error_from_validation(exc: ValidationError, lines: Mapping[str, int], source: str) -> ConfigError:
    first = exc.errors()[0]
    field = _locate(tuple(first.get("loc", ())), lines)
    return ConfigError(field, first.get("msg", "invalid value"), lines.get(field), source)


def scenario_from_text(text: str, source: str = "<string>") -> ScenarioConfig:
    top: Dict[str, object] = {}
    profile: Dict[str, object] = {}
    lifestyle: Dict[str, object] = {}
    lines: Dict[str, int] = {}
    for key, value, line in parse_key_values(text, source):
        lines[key] = line
        if key == "meals":
            lifestyle["meals"] = _parse_entries(value, ("time_h", "glycemic_load", "serving_g", "delta"), 3,
                                                key, line, source)
        elif key == "workouts":
            lifestyle["workouts"] = _parse_entries(value, ("time_h", "kcal", "delta"), 2, key, line, source)
        elif key in PROFILE_KEYS:
            profile[key] = None if key in ("age", "infection_onset_h") and value in ("", "-") else value
        elif key == "enabled_modules":
            top[key] = [m.strip() for m in value.split(",") if m.strip()]
        elif key == "format":
            top["output"] = {"format": value}
        elif key in SCENARIO_KEYS:
            top[key] = value
        else:
            raise ConfigError(key, "unknown key", line, source)
    if "label" not in top:
        raise ConfigError("label", "missing required key", None, source)
    if lifestyle:
        profile["lifestyle"] = lifestyle
    top["profile"] = profile
    try:
        return ScenarioConfig.model_validate(top)
    except ValidationError as exc:
        raise config_error_from_validation(exc, lines, source) from None


def load_scenario(path: PathLike) -> ScenarioConfig:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError("scenario", f"cannot read file: {exc.strerror}", None, str(path)) from None
    cfg = scenario_from_text(text, str(path))
    abp = cfg.profile.abp_source
    if abp != "builtin" and not Path(abp).is_absolute():
        resolved = str((path.parent / abp).resolve())
        cfg = cfg.model_copy(update={"profile": cfg.profile.model_copy(update={"abp_source": resolved})})
    return cfg


def load_cohort_manifest(path: PathLike) -> List[ScenarioConfig]:
    """One scenario file per line, relative to the manifest's directory."""
    path = Path(path)
    configs = []
    for lineno, raw in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        entry = raw.split("#", 1)[0].strip()
        if entry:
            target = Path(entry) if Path(entry).is_absolute() else path.parent / entry
            if not target.exists():
                raise ConfigError("manifest", f"scenario file {entry} not found", lineno, str(path))
            configs.append(load_scenario(target))
    if not configs:
        raise ConfigError("manifest", "no scenario files listed", None, str(path))
    return configs


def load_overrides(path: Optional[PathLike]) -> Dict[str, Dict[str, float]]:
    """Read ``<module>.<parameter> = value`` lines into {module: {parameter: value}}."""
    if path is None:
        return {}
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError("params", f"cannot read file: {exc.strerror}", None, str(path)) from None
    out: Dict[str, Dict[str, float]] = {}
    for key, value, line in parse_key_values(text, str(path)):
        module, sep, name = key.partition(".")
        if not sep or module not in MODULE_IDS or not name:
            raise ConfigError(key, f"expected <module>.<parameter> with module in {list(MODULE_IDS)}",
                              line, str(path))
        try:
            out.setdefault(module, {})[name] = float(value)
        except ValueError:
            raise ConfigError(key, f"value {value!r} is not numeric", line, str(path)) from None
    return out


# ---------------------------------------------------------------------------
# CSV and metrics files
# ---------------------------------------------------------------------------

def _formatted(values: np.ndarray) -> List[str]:
    return list(np.char.mod(VALUE_FORMAT, np.asarray(values, dtype=float)))


def _exact(values: np.ndarray) -> List[str]:
    """Shortest text that parses back to the same float64."""
    return [repr(v) for v in np.asarray(values, dtype=float).tolist()]


def timeseries_frame(series: TimeSeries) -> pl.DataFrame:
    columns = {"time_s": _exact(series.time_s)}
    for k, name in enumerate(series.names):
        columns[name] = _exact(series.values[:, k])
    return pl.DataFrame(columns)


def write_timeseries_csv(series: TimeSeries, path: PathLike) -> None:
    timeseries_frame(series).write_csv(path, line_terminator="\n")


def read_timeseries_csv(path: PathLike, module: Optional[str] = None, time_unit: str = "s",
                        time_scale: float = 1.0, units: Optional[Mapping[str, str]] = None) -> TimeSeries:
    """Re-read a module CSV; ``time_unit``/``time_scale`` restore the module clock.

    The header carries no units, so columns missing from ``units`` get "".
    """
    df = pl.read_csv(path, infer_schema_length=0)
    if not df.columns or df.columns[0] != "time_s":
        raise ValueError(f"{path}: first column must be time_s")
    if time_scale <= 0:
        raise ValueError("time_scale must be positive")
    numeric = df.select(pl.all().cast(pl.Float64))
    names = tuple(df.columns[1:])
    seconds = numeric["time_s"].to_numpy()
    units = units or {}
    return TimeSeries(module or Path(path).stem, seconds / time_scale, names,
                      tuple(units.get(name, "") for name in names),
                      numeric.select(names).to_numpy() if names else np.empty((df.height, 0)),
                      time_unit, time_scale, seconds=seconds)


def format_value(value) -> str:
    if value is None:
        return "nan"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (int, float, np.floating)):
        return VALUE_FORMAT % float(value)
    return str(value)


def write_metrics(metrics: SummaryMetrics, path: PathLike, extra: Optional[Mapping[str, float]] = None) -> None:
    lines = [f"{key} = {format_value(value)}" for key, value in metrics.model_dump().items()]
    lines += [f"{key} = {format_value(value)}" for key, value in (extra or {}).items()]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_metrics(path: PathLike) -> Dict[str, str]:
    text = Path(path).read_text(encoding="utf-8")
    return {key: value for key, value, _ in parse_key_values(text, str(path))}


def metrics_row(metrics: SummaryMetrics) -> Dict[str, object]:
    return {key: (float("nan") if value is None else value) for key, value in metrics.model_dump().items()}


def write_table_csv(df: pl.DataFrame, path: PathLike) -> None:
    """Write a table with floats in the fixed 9-significant-digit format."""
    columns = {}
    for name in df.columns:
        col = df[name]
        if col.dtype.is_float() or col.dtype.is_integer():
            columns[name] = _formatted(col.cast(pl.Float64).fill_null(float("nan")).to_numpy())
        else:
            columns[name] = [format_value(v) for v in col.to_list()]
    pl.DataFrame(columns).write_csv(path, line_terminator="\n")


@contextmanager
def staged_output(out_dir: PathLike) -> Iterator[Path]:
    """Yield a scratch directory whose files move into ``out_dir`` only on success."""
    out_dir = Path(out_dir)
    out_dir.parent.mkdir(parents=True, exist_ok=True)
    staging = Path(tempfile.mkdtemp(prefix=".compatient-", dir=out_dir.parent))
    try:
        yield staging
    except BaseException:
        shutil.rmtree(staging, ignore_errors=True)
        raise
    out_dir.mkdir(parents=True, exist_ok=True)
    for item in sorted(staging.rglob("*")):
        if item.is_file():
            target = out_dir / item.relative_to(staging)
            target.parent.mkdir(parents=True, exist_ok=True)
            os.replace(item, target)
    shutil.rmtree(staging, ignore_errors=True)
    logger.info("wrote outputs to %s", out_dir)
