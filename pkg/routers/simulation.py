from fastapi import APIRouter, HTTPException, Query
from typing import Dict, List, Optional
import logging

from algos.io_algo import ConfigError
from algos.kernel_algo import SimulationError
from algos.scenario_algo import ScenarioResult, builtin_cohort, builtin_scenario, run_cohort, run_scenario, sweep, with_beats
from schemas import ScenarioConfig, ScenarioRunResponse, SweepRequest

logger = logging.getLogger(__name__)

router = APIRouter(
    prefix="/api/simulate",
    tags=["simulation"],
)

# Results of the runs made through the API, by scenario label
run_cache: Dict[str, ScenarioResult] = {}


def get_result(label: str) -> ScenarioResult:
    result = run_cache.get(label)
    if result is None:
        raise HTTPException(status_code=404, detail=f"No run for scenario '{label}'; run it first")
    return result


def _execute(cfg: ScenarioConfig, cardiac_beats: Optional[int]):
    try:
        if cardiac_beats is not None:
            cfg = with_beats(cfg, cardiac_beats)
        result = run_scenario(cfg)
    except ConfigError as e:
        raise HTTPException(status_code=400, detail=str(e))
    except SimulationError as e:
        logger.error("scenario %s failed: %s", cfg.label, e)
        return {"success": False, "error": str(e)}
    run_cache[cfg.label] = result
    return ScenarioRunResponse(success=True, label=cfg.label, metrics=result.metrics, daily=result.daily)


@router.get("/builtin")
async def list_builtin():
    """The eight reference patients and their profiles."""
    return {
        "success": True,
        "scenarios": [
            {"label": cfg.label, "enabled_modules": cfg.enabled_modules, "profile": cfg.profile.model_dump()}
            for cfg in builtin_cohort()
        ],
    }


# Simulating handlers are plain functions; FastAPI runs them in its threadpool.
@router.post("/builtin/{label}")
def run_builtin(label: str, cardiac_beats: Optional[int] = Query(None, ge=2)):
    try:
        cfg = builtin_scenario(label)
    except KeyError:
        raise HTTPException(status_code=404, detail=f"Unknown builtin scenario '{label}'")
    return _execute(cfg, cardiac_beats)


@router.post("/scenario")
def run_posted_scenario(cfg: ScenarioConfig, cardiac_beats: Optional[int] = Query(None, ge=2)):
    return _execute(cfg, cardiac_beats)


@router.get("/cohort")
def cohort_comparison(cardiac_beats: Optional[int] = Query(None, ge=2)):
    configs = builtin_cohort()
    if cardiac_beats is not None:
        configs = [with_beats(cfg, cardiac_beats) for cfg in configs]
    cohort = run_cohort(configs)
    rows: List[dict] = []
    for label in cohort.order:
        if label in cohort.results:
            run_cache[label] = cohort.results[label]
            rows.append(cohort.results[label].metrics.model_dump())
    return {"success": not cohort.failures, "rows": rows, "failures": cohort.failures}


@router.post("/sweep")
def run_sweep(request: SweepRequest):
    try:
        base = builtin_scenario(request.base)
    except KeyError:
        raise HTTPException(status_code=404, detail=f"Unknown builtin scenario '{request.base}'")
    try:
        if request.cardiac_beats is not None:
            base = with_beats(base, request.cardiac_beats)
        cohort, _ = sweep(base, request.param, request.values)
    except ConfigError as e:
        raise HTTPException(status_code=400, detail=str(e))

    rows = []
    for label, value in zip(cohort.order, request.values):
        if label in cohort.results:
            rows.append({"value": value, **cohort.results[label].metrics.model_dump()})
    return {"success": not cohort.failures, "param": request.param, "rows": rows, "failures": cohort.failures}
