"""
Stats Router
서빙 중인 모델과 레이블 관계 그래프 통계
"""

from fastapi import APIRouter

from mrmp.models.schemas import GraphStats
from mrmp.services.inference_service import inference_service

router = APIRouter(prefix="/api/stats", tags=["stats"])


@router.get("/graph", response_model=GraphStats)
async def get_graph_stats():
    """Pulling / pushing edge counts and degree histograms"""
    return inference_service.graph_stats()


@router.get("/model")
async def get_model_stats():
    return inference_service.model_info()
