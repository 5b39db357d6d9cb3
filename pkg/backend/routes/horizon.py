from fastapi import APIRouter

from dependencies.lqr_deps import http_error
from models.lqr_models import HorizonRequest, HorizonTraceSummary
from solvers.errors import ReconstructionError
from solvers.horizon import search_horizon

router = APIRouter(prefix="/horizon", tags=["horizon"])


@router.post("/search", response_model=HorizonTraceSummary)
async def search(request: HorizonRequest) -> HorizonTraceSummary:
    """Estimate the control horizon of one observed trajectory."""
    obj = request.objective
    try:
        _, trace = search_horizon(request.system, request.outputs, request.target,
                                  obj.H, obj.Q, obj.R, theta=request.theta)
        return trace.summary()
    except ReconstructionError as e:
        raise http_error(e, "searching horizon")
