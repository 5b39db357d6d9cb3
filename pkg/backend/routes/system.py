from fastapi import APIRouter, HTTPException

from dependencies.lqr_deps import http_error
from models.lqr_models import (LinearSystem, LQRObjective, LQRProblemSpec, SchemaResponse,
                               SystemValidationReport, ValidateSystemRequest)
from solvers.errors import ReconstructionError
from solvers.system import validate_system

router = APIRouter(prefix="/system", tags=["system"])


@router.post("/validate", response_model=SystemValidationReport)
async def validate(request: ValidateSystemRequest) -> SystemValidationReport:
    """Check the structural assumptions on (A, B, C, Γ)."""
    try:
        return validate_system(request.system)
    except ReconstructionError as e:
        raise http_error(e, "validating system")


@router.get("/schema", response_model=SchemaResponse)
async def get_schema() -> SchemaResponse:
    """JSON schema of the model types accepted by the other endpoints."""
    try:
        return SchemaResponse(schemas={
            "LinearSystem": LinearSystem.model_json_schema(),
            "LQRObjective": LQRObjective.model_json_schema(),
            "LQRProblemSpec": LQRProblemSpec.model_json_schema(),
        })
    except Exception as e:
        raise HTTPException(
            status_code=500, detail=f"Error building schema: {str(e)}")
