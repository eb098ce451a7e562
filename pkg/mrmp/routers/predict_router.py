"""
Predict Router
다중 레이블 예측 API 엔드포인트
"""

from fastapi import APIRouter

from mrmp.models.schemas import PredictRequest, PredictResponse
from mrmp.services.inference_service import inference_service

router = APIRouter(prefix="/api", tags=["predict"])


@router.get("/health")
async def health_check():
    """Health check endpoint"""
    return {"status": "ok", "model_loaded": inference_service.loaded}


@router.post("/predict", response_model=PredictResponse)
def predict(request: PredictRequest):
    """Label probabilities and label ids above the threshold, per instance"""
    results = inference_service.predict(request.instances, request.threshold)
    return PredictResponse(results=results, threshold=request.threshold)
