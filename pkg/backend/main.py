from __future__ import annotations

import logging
from contextlib import asynccontextmanager
from typing import AsyncIterator

from fastapi import FastAPI, Request
from fastapi.encoders import jsonable_encoder
from fastapi.exceptions import RequestValidationError
from fastapi.middleware.cors import CORSMiddleware
from fastapi.responses import JSONResponse

from backend.api import routes
from riskmm import __version__
from riskmm.settings import Settings, configure_logging

logger = logging.getLogger("riskmm.api")


@asynccontextmanager
async def lifespan(app: FastAPI) -> AsyncIterator[None]:
    settings = Settings()
    configure_logging(settings.log_level)
    app.state.settings = settings
    logger.info(
        "riskmm API %s: %s solver thread(s), run log at %s",
        __version__,
        settings.threads,
        routes.run_store.db_path,
    )
    yield


def create_app() -> FastAPI:
    app = FastAPI(
        title="riskmm API",
        version=__version__,
        description="Risk-sensitive MPC for mixture-of-experts systems: open-loop solves, closed-loop runs and verification.",
        lifespan=lifespan,
    )
    app.add_middleware(
        CORSMiddleware,
        allow_origin_regex=".*",
        allow_credentials=False,
        allow_methods=["*"],
        allow_headers=["*"],
    )
    # same routes bare and under /api
    app.include_router(routes.router)
    app.include_router(routes.router, prefix="/api")

    @app.exception_handler(RequestValidationError)
    async def config_validation_handler(request: Request, exc: RequestValidationError) -> JSONResponse:
        fields = [".".join(str(part) for part in err["loc"][1:]) or "body" for err in exc.errors()]
        logger.error("Rejected %s %s: invalid %s", request.method, request.url.path, ", ".join(fields))
        return JSONResponse(status_code=422, content={"detail": jsonable_encoder(exc.errors())})

    return app


app = create_app()
