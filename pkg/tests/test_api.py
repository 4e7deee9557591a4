import io

import numpy as np
import pytest
import requests
from fastapi.testclient import TestClient
from PIL import Image

import api
from api_client import DiffusionServiceClient, EmbeddingServiceClient
from api_models import ScaleTag, TrainConfig
from conftest import rectangle_mask
from datagen import (
    ProceduralBackend, ThumbnailEmbedder, build_jobs, decode_png, encode_png, load_mask_set, run_generation,
)
from errors import BackendError, BackendTimeout
from model import build_model


@pytest.fixture
def client(monkeypatch):
    monkeypatch.delenv("GEM_CHECKPOINT", raising=False)
    api.set_backend(ProceduralBackend())
    api.set_predictor(None, None)
    with TestClient(api.app) as test_client:
        yield test_client
    api.set_backend(ProceduralBackend())
    api.set_predictor(None, None)


def generation_payload(seed=7, size=32):
    return {
        "mask": encode_png(rectangle_mask(32, 2) * 255),
        "prompt": "a photo of a clean transparent glasses",
        "seed": seed,
        "size": size,
    }


def test_health(client):
    response = client.get("/health")
    assert response.status_code == 200
    body = response.json()
    assert body["status"] == "healthy"
    assert body["model_version"] == ProceduralBackend.model_version
    assert body["predictor_loaded"] is False


def test_generate_matches_the_local_backend(client):
    response = client.post("/generate", json=generation_payload())
    assert response.status_code == 200
    image = decode_png(response.json()["image"], mode="RGB")
    expected = ProceduralBackend().generate(rectangle_mask(32, 2), "a photo of a clean transparent glasses", 7, 32)
    assert np.array_equal(image, expected)


def test_generate_accepts_full_uint64_seeds(client):
    response = client.post("/generate", json=generation_payload(seed=2 ** 64 - 1))
    assert response.status_code == 200


def test_generate_rejects_bad_payloads(client):
    payload = generation_payload()
    payload["mask"] = "not a png"
    assert client.post("/generate", json=payload).status_code == 400
    assert client.post("/generate", json=generation_payload(seed=-1)).status_code == 422
    assert client.post("/generate", json={"prompt": "x"}).status_code == 422


def test_embed_falls_back_to_thumbnails(client):
    images = [np.full((20, 20, 3), v, dtype=np.uint8) for v in (0, 255)]
    response = client.post("/embed", json={"images": [encode_png(img) for img in images]})
    assert response.status_code == 200
    body = response.json()
    assert body["model_version"] == "ThumbnailEmbedder"
    assert np.allclose(body["embeddings"], ThumbnailEmbedder().embed(images))


def test_predict_without_a_model(client):
    buffer = io.BytesIO()
    Image.new("RGB", (40, 30)).save(buffer, format="PNG")
    response = client.post("/predict", files={"file": ("x.png", buffer.getvalue(), "image/png")})
    assert response.status_code == 503


def test_predict_returns_a_mask_at_upload_resolution(client, micro_model_config):
    cfg = TrainConfig(model=micro_model_config)
    api.set_predictor(build_model(cfg.model, seed=0).eval(), cfg)
    buffer = io.BytesIO()
    Image.new("RGB", (40, 30), color=(90, 120, 200)).save(buffer, format="PNG")
    response = client.post("/predict", files={"file": ("x.png", buffer.getvalue(), "image/png")})
    assert response.status_code == 200
    body = response.json()
    assert (body["width"], body["height"]) == (40, 30)
    mask = decode_png(body["mask"])
    assert mask.shape == (30, 40)
    assert set(np.unique(mask).tolist()) <= {0, 255}
    assert body["glass_fraction"] == pytest.approx(float((mask == 255).mean()))

    garbage = client.post("/predict", files={"file": ("x.png", b"not an image", "image/png")})
    assert garbage.status_code == 400


# ---------------------------------------------------------------------------
# clients
# ---------------------------------------------------------------------------

def test_diffusion_client_round_trip(client):
    remote = DiffusionServiceClient("http://testserver", session=client)
    mask = rectangle_mask(32, 1)
    image = remote.generate(mask, "a photo of the transparent glasses", 11, 32)
    assert np.array_equal(image, ProceduralBackend().generate(mask, "a photo of the transparent glasses", 11, 32))
    assert remote.model_version == ProceduralBackend.model_version


def test_remote_generation_run(tmp_path, client, mask_dir, prompt_bank):
    remote = DiffusionServiceClient("http://testserver", session=client)
    jobs = build_jobs(load_mask_set(mask_dir), prompt_bank, ScaleTag.X1, count=3, target_size=32)
    result = run_generation(jobs, remote, tmp_path / "remote", parallelism=1, retries=0)
    assert result.manifest.count == 3
    assert result.manifest.model_version == ProceduralBackend.model_version


def test_embedding_client_batches(client):
    remote = EmbeddingServiceClient("http://testserver", session=client, batch_size=2)
    images = [np.full((16, 16, 3), 50 * i, dtype=np.uint8) for i in range(5)]
    features = remote.embed(images)
    assert features.shape == (5, 16 * 16 * 3)
    assert np.allclose(features, ThumbnailEmbedder().embed(images))


class FailingSession:
    def __init__(self, error=None, status=200):
        self.error = error
        self.status = status

    def post(self, url, json=None, timeout=None):
        if self.error is not None:
            raise self.error
        return FakeResponse(self.status)

    get = post


class FakeResponse:
    def __init__(self, status):
        self.status_code = status
        self.text = "internal error"

    def json(self):
        return {}


def test_client_error_mapping():
    mask = rectangle_mask(8, 0)
    timing_out = DiffusionServiceClient("http://gen", session=FailingSession(requests.exceptions.Timeout()))
    with pytest.raises(BackendTimeout):
        timing_out.generate(mask, "p", 1, 8)
    refused = DiffusionServiceClient("http://gen", session=FailingSession(requests.exceptions.ConnectionError()))
    with pytest.raises(BackendError):
        refused.generate(mask, "p", 1, 8)
    failing = DiffusionServiceClient("http://gen", session=FailingSession(status=500))
    with pytest.raises(BackendError):
        failing.generate(mask, "p", 1, 8)
    assert failing.model_version == "unknown"


def test_client_needs_a_url(monkeypatch):
    monkeypatch.delenv("GEM_BACKEND_URL", raising=False)
    monkeypatch.delenv("GEM_EMBED_URL", raising=False)
    with pytest.raises(BackendError):
        DiffusionServiceClient()
    with pytest.raises(BackendError):
        EmbeddingServiceClient()
    monkeypatch.setenv("GEM_BACKEND_URL", "http://gen:9000/")
    assert DiffusionServiceClient().base_url == "http://gen:9000"
