from fastapi import APIRouter

from dependencies.lqr_deps import http_error
from models.lqr_models import GainSequence, GainsRequest, SimulateRequest, SimulateResponse
from solvers.errors import ReconstructionError
from solvers.lqr_forward import riccati_gains, simulate

router = APIRouter(prefix="/forward", tags=["forward"])


@router.post("/gains", response_model=GainSequence)
async def gains(request: GainsRequest) -> GainSequence:
    """Finite-horizon feedback gains K_0..K_{N-1}."""
    try:
        return riccati_gains(request.spec).gains
    except ReconstructionError as e:
        raise http_error(e, "computing gains")


@router.post("/simulate", response_model=SimulateResponse)
async def simulate_spec(request: SimulateRequest) -> SimulateResponse:
    """Closed-loop rollout with seeded output noise."""
    try:
        trace = riccati_gains(request.spec)
        run = simulate(request.spec, trace.gains, rng_seed=request.seed)
        return SimulateResponse(states=run.states, inputs=run.inputs, outputs=run.outputs)
    except ReconstructionError as e:
        raise http_error(e, "simulating")
