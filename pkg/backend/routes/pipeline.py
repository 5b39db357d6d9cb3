from fastapi import APIRouter, Depends, HTTPException

from dependencies.lqr_deps import get_settings, http_error, load_data_dir
from models.lqr_models import (PipelineDirRequest, PipelineOptions, PipelineRequest, ReconstructionReport,
                               ReconstructionSettings)
from solvers.errors import ReconstructionError
from solvers.pipeline import run_pipeline

router = APIRouter(prefix="/pipeline", tags=["pipeline"])


def _with_defaults(options: PipelineOptions, settings: ReconstructionSettings) -> PipelineOptions:
    # Settings fill in whatever the request left at its default
    explicit = options.model_fields_set
    update = {name: getattr(settings, name) for name in ("theta", "window", "multi_starts")
              if name not in explicit}
    return options.model_copy(update=update)


@router.post("", response_model=ReconstructionReport)
async def reconstruct(request: PipelineRequest,
                      settings: ReconstructionSettings = Depends(get_settings)) -> ReconstructionReport:
    """Run the full reconstruction on trajectories posted in the request body."""
    try:
        return run_pipeline(request.history, request.current, request.system, request.setting,
                            _with_defaults(request.options, settings), max_workers=settings.jobs)
    except ReconstructionError as e:
        raise http_error(e, "running pipeline")


@router.post("/from-dir", response_model=ReconstructionReport)
async def reconstruct_from_dir(request: PipelineDirRequest,
                               settings: ReconstructionSettings = Depends(get_settings)) -> ReconstructionReport:
    """Run the full reconstruction on a dataset directory."""
    dataset = load_data_dir(request.data_dir)
    if dataset.current is None:
        raise HTTPException(
            status_code=422, detail=f"Dataset in {request.data_dir} has no current trajectory")
    try:
        return run_pipeline(dataset.history, dataset.current, dataset.manifest.system, request.setting,
                            _with_defaults(request.options, settings), max_workers=settings.jobs)
    except ReconstructionError as e:
        raise http_error(e, "running pipeline")
