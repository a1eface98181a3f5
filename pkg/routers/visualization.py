from fastapi import APIRouter, HTTPException, Query
from typing import List, Optional

import numpy as np

from routers.simulation import get_result

router = APIRouter(
    prefix="/api/visualization",
    tags=["visualization"],
)


@router.get("/{label}/{module}")
async def get_trajectory(label: str, module: str,
                         columns: Optional[List[str]] = Query(None),
                         max_points: int = Query(2000, ge=2)):
    """
    Get a module trajectory of a cached run for plotting.
    Long series are thinned to at most max_points samples.
    """
    result = get_result(label)
    series = result.series.get(module)
    if series is None:
        raise HTTPException(status_code=404, detail=f"Scenario '{label}' has no '{module}' output")

    names = list(columns) if columns else list(series.names)
    unknown = [name for name in names if name not in series.names]
    if unknown:
        raise HTTPException(status_code=400, detail=f"Unknown columns: {unknown}")

    stride = max(1, int(np.ceil(series.t.size / max_points)))
    return {
        "success": True,
        "label": label,
        "module": module,
        "time_unit": series.time_unit,
        "t": series.t[::stride].tolist(),
        "series": {
            name: {"unit": series.unit(name), "values": series[name][::stride].tolist()}
            for name in names
        },
        "scalars": series.scalars,
    }
