from fastapi import APIRouter, HTTPException, UploadFile, File, Response
import logging

from algos.io_algo import ConfigError, scenario_from_text, timeseries_frame
from routers.simulation import get_result
from schemas import ImportScenarioResponse

logger = logging.getLogger(__name__)

router = APIRouter(
    prefix="/api",
    tags=["import-export"]
)


@router.post("/import/scenario", response_model=ImportScenarioResponse)
async def import_scenario(file: UploadFile = File(...)):
    """Parse and validate a key-value scenario file without running it."""
    try:
        contents = await file.read()
        decoded_contents = contents.decode("utf-8").strip()
    except Exception as e:
        raise HTTPException(status_code=400, detail=f"Error reading file: {str(e)}")

    if not decoded_contents:
        raise HTTPException(status_code=400, detail="Uploaded file is empty.")

    try:
        scenario = scenario_from_text(decoded_contents, file.filename or "<upload>")
    except ConfigError as e:
        raise HTTPException(status_code=400, detail=str(e))

    logger.info("imported scenario %s", scenario.label)
    return ImportScenarioResponse(success=True, scenario=scenario)


@router.get("/export/{label}/{module}")
async def export_timeseries(label: str, module: str):
    result = get_result(label)
    series = result.series.get(module)
    if series is None:
        raise HTTPException(status_code=404, detail=f"Scenario '{label}' has no '{module}' output")

    csv_data = timeseries_frame(series).write_csv(line_terminator="\n")
    return Response(
        content=csv_data,
        media_type="text/csv",
        headers={"Content-Disposition": f'attachment; filename="{label}_{module}.csv"'}
    )
