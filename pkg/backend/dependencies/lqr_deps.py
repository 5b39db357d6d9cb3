import os
from typing import Optional

from fastapi import HTTPException

from lqr_io import Dataset, load_dataset
from models.lqr_models import ReconstructionSettings
from solvers.errors import PreconditionError, ReconstructionError, StructuralError

# Global settings instance, set by the server lifespan
settings: Optional[ReconstructionSettings] = None


def get_settings() -> ReconstructionSettings:
    """Get the global ReconstructionSettings instance."""
    global settings
    if not settings:
        raise HTTPException(
            status_code=500, detail="Reconstruction settings not initialized")
    return settings


def set_settings(value: Optional[ReconstructionSettings]):
    """Set the global ReconstructionSettings instance."""
    global settings
    settings = value


def http_error(e: ReconstructionError, action: str) -> HTTPException:
    """
    Map a domain error to an HTTP error.

    Precondition and structural problems are the caller's fault (422);
    everything else is a server-side numerical failure (500).
    """
    cause = getattr(e, "cause", e)
    status = 422 if isinstance(cause, (PreconditionError, StructuralError)) else 500
    return HTTPException(status_code=status, detail=f"Error {action} (stage {e.stage}): {str(e)}")


def load_data_dir(data_dir: str) -> Dataset:
    """
    Load a dataset directory written by `lqr_cli.py simulate`.

    Raises:
        HTTPException: 404 if the directory or its manifest is missing, 422
            if a file is malformed.
    """
    path = os.path.abspath(data_dir)
    if not os.path.isdir(path):
        raise HTTPException(
            status_code=404, detail=f"Data directory not found: {data_dir}")
    try:
        return load_dataset(path)
    except FileNotFoundError as e:
        raise HTTPException(status_code=404, detail=f"Missing dataset file: {e.filename}")
    except ValueError as e:
        raise HTTPException(status_code=422, detail=f"Malformed dataset in {data_dir}: {str(e)}")
