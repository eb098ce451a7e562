"""
MrMP Inference API
학습된 체크포인트로 다중 레이블 예측을 제공하는 FastAPI 앱
"""

import logging
from contextlib import asynccontextmanager

from fastapi import FastAPI, Request
from fastapi.responses import JSONResponse

from mrmp import __version__
from mrmp.config.settings import settings
from mrmp.errors import CheckpointError, MrmpError
from mrmp.routers import predict_router, stats_router
from mrmp.services.inference_service import inference_service

logger = logging.getLogger(__name__)


@asynccontextmanager
async def lifespan(app: FastAPI):
    # 서버 시작 시 체크포인트 프리로딩
    if settings.CHECKPOINT_PATH is not None and not inference_service.loaded:
        try:
            inference_service.load()
        except MrmpError as e:
            logger.error("checkpoint preload failed: %s", e)
    yield
    logger.info("server shutting down")


app = FastAPI(
    title=settings.APP_NAME,
    description="Multi-label classification with pulling / pushing label relation message passing",
    version=__version__,
    lifespan=lifespan,
)

app.include_router(predict_router.router)
app.include_router(stats_router.router)


@app.exception_handler(MrmpError)
async def mrmp_exception_handler(request: Request, exc: MrmpError):
    status = 503 if isinstance(exc, CheckpointError) and not inference_service.loaded else 400
    return JSONResponse(
        status_code=status,
        content={"detail": type(exc).__name__, "message": str(exc)},
    )


# 글로벌 예외 처리기
@app.exception_handler(Exception)
async def global_exception_handler(request: Request, exc: Exception):
    logger.exception("unhandled error on %s", request.url.path)
    return JSONResponse(
        status_code=500,
        content={"detail": "Internal Server Error", "message": str(exc)},
    )


@app.get("/")
async def root():
    return {"message": f"{settings.APP_NAME} API", "docs": "/docs"}


if __name__ == "__main__":
    import uvicorn
    uvicorn.run("mrmp.main:app", host="0.0.0.0", port=8000)
