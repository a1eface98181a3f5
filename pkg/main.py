from fastapi import FastAPI
from fastapi.middleware.cors import CORSMiddleware
from routers import (
    import_export,
    simulation,
    visualization
)

app = FastAPI(
    title="Computational Patient API",
    description="Run composed physiological models of computational patients. "
                "Not validated; not for clinical use.",
    version="1.0.0"
)

app.add_middleware(
    CORSMiddleware,
    allow_origins=["*"],  # development
    allow_credentials=True,
    allow_methods=["*"],
    allow_headers=["*"],
    expose_headers=["*"],
)

app.include_router(simulation.router)
app.include_router(import_export.router)
app.include_router(visualization.router)

# Root endpoint
@app.get("/")
async def root():
    return {"message": "Computational Patient API is running!"}

if __name__ == "__main__":
    import uvicorn
    uvicorn.run(app, host="0.0.0.0", port=8000)
