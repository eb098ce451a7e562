"""HTTP API over a served checkpoint"""

import numpy as np
import pytest
from fastapi.testclient import TestClient

from mrmp.main import app
from mrmp.services.data_service import parse_sparse_dataset
from mrmp.services.inference_service import inference_service
from mrmp.services.training_service import predict_scores, training_service


@pytest.fixture
def client(tiny_run):
    inference_service.load(tiny_run[0].checkpoint_path)
    return TestClient(app)


def test_health(client):
    response = client.get("/api/health")
    assert response.status_code == 200
    assert response.json() == {"status": "ok", "model_loaded": True}


def test_predict(client):
    response = client.post("/api/predict", json={"instances": [{"tokens": [1, 12, 25]}, {"tokens": []}], "threshold": 0.4})
    assert response.status_code == 200
    body = response.json()
    assert body["threshold"] == 0.4
    assert len(body["results"]) == 2
    for result in body["results"]:
        assert len(result["probabilities"]) == 10
        assert all(0.0 < p < 1.0 for p in result["probabilities"])
        assert result["labels"] == [j for j, p in enumerate(result["probabilities"]) if p > 0.4]


@pytest.mark.parametrize(
    "payload",
    [
        {"instances": [{"tokens": [1], "text": "a b"}]},
        {"instances": [{}]},
        {"instances": []},
        {"instances": [{"tokens": [1]}], "threshold": 1.0},
    ],
)
def test_invalid_requests_are_422(client, payload):
    assert client.post("/api/predict", json=payload).status_code == 422


def test_token_out_of_range(client):
    response = client.post("/api/predict", json={"instances": [{"tokens": [1, 999]}]})
    assert response.status_code == 400
    assert response.json()["detail"] == "ShapeError"


def test_text_without_vocabulary(client):
    response = client.post("/api/predict", json={"instances": [{"text": "hello"}]})
    assert response.status_code == 400


def test_graph_stats(client, tiny_run):
    response = client.get("/api/stats/graph")
    assert response.status_code == 200
    body = response.json()
    assert body["labels"] == 10
    assert body["pulling_edges"] >= 0 and body["pushing_edges"] >= 0


def test_model_stats(client, tiny_run):
    body = client.get("/api/stats/model").json()
    assert body["architecture"] == "mrmp"
    assert body["labels"] == 10
    assert body["epoch"] == tiny_run[0].best_epoch
    assert set(body["thresholds"]) == {"acc", "ebf1", "mif1", "maf1"}


def test_no_model_is_503(client, monkeypatch):
    monkeypatch.setattr(inference_service, "_checkpoint", None)
    monkeypatch.setattr(inference_service, "_model", None)
    response = client.post("/api/predict", json={"instances": [{"tokens": [1]}]})
    assert response.status_code == 503
    assert client.get("/api/health").json()["model_loaded"] is False


def test_empty_instance_matches_dataset_encoding(client, tiny_run, tmp_path):
    path = tmp_path / "two.txt"
    path.write_text("2 30 10\n0 1:1 12:1\n1\n")
    data = parse_sparse_dataset(path)
    assert data.tokens[1].tolist() == [30]

    _, model = training_service.load_model(tiny_run[0].checkpoint_path)
    expected = predict_scores(model, data)
    response = client.post("/api/predict", json={"instances": [{"tokens": [1, 12]}, {"tokens": []}]})
    got = np.array([r["probabilities"] for r in response.json()["results"]])
    np.testing.assert_allclose(got, expected, atol=1e-6)
