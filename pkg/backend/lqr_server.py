#!/usr/bin/env python3
"""
FastAPI server for LQR reconstruction.
This server exposes the forward solver, horizon search and the full
reconstruction pipeline as REST endpoints.
"""

import sys
import argparse
import socket
from contextlib import asynccontextmanager

try:
    from fastapi import FastAPI
    from fastapi.middleware.cors import CORSMiddleware
    import uvicorn
except ImportError:
    print("ERROR: FastAPI dependencies not found. Install with: pip install fastapi uvicorn")
    sys.exit(1)

from loguru import logger

# Import route modules
from routes.system import router as system_router
from routes.forward import router as forward_router
from routes.horizon import router as horizon_router
from routes.pipeline import router as pipeline_router
from dependencies.lqr_deps import set_settings
from models.lqr_models import ReconstructionSettings


@asynccontextmanager
async def lifespan(app: FastAPI):
    """Lifespan event handler for FastAPI application."""
    # Startup
    settings = ReconstructionSettings()
    set_settings(settings)
    logger.info("Reconstruction settings initialized: {}", settings.model_dump())

    yield

    # Shutdown
    set_settings(None)


app = FastAPI(
    title="LQR Reconstruction API",
    version="1.0.0",
    lifespan=lifespan
)

# Add CORS middleware
app.add_middleware(
    CORSMiddleware,
    allow_origins=["*"],
    allow_credentials=True,
    allow_methods=["*"],
    allow_headers=["*"],
)

# Include routers
app.include_router(system_router)
app.include_router(forward_router)
app.include_router(horizon_router)
app.include_router(pipeline_router)


@app.get("/")
async def root():
    """Root endpoint to check if server is running."""
    return {"message": "LQR Reconstruction API Server", "status": "running"}


@app.get("/health")
async def health_check():
    """Health check endpoint."""
    return {"status": "healthy"}


def free_port(host: str) -> int:
    with socket.socket(socket.AF_INET, socket.SOCK_STREAM) as s:
        s.bind((host, 0))
        return s.getsockname()[1]


def serve(host: str = "127.0.0.1", port: int = 0) -> None:
    """Run uvicorn; port 0 picks any available port."""
    actual_port = free_port(host) if port == 0 else port

    # Output the port information for whoever launched the server
    print(f"LQR_SERVER_PORT:{actual_port}", flush=True)
    logger.info("Starting LQR reconstruction server on {}:{}", host, actual_port)

    uvicorn.run(app, host=host, port=actual_port, log_level="warning")


if __name__ == "__main__":
    parser = argparse.ArgumentParser(
        description="LQR Reconstruction API Server")
    parser.add_argument("--host", default="127.0.0.1", help="Host to bind to")
    parser.add_argument("--port", type=int, default=0,
                        help="Port to bind to (0 for any available port)")

    args = parser.parse_args()
    serve(args.host, args.port)
