"""
FastAPI Application for GEM Glass Segmentation
Serves the generation wire contract, image embeddings and single-image glass prediction
"""

import io
import logging
import os
import threading
from datetime import datetime
from typing import Optional

import numpy as np
import torch
from fastapi import FastAPI, File, HTTPException, Request, UploadFile
from fastapi.middleware.cors import CORSMiddleware
from PIL import Image
from slowapi import Limiter, _rate_limit_exceeded_handler
from slowapi.errors import RateLimitExceeded
from slowapi.util import get_remote_address

from api_models import (
    EmbeddingRequest, EmbeddingResponse, GenerationRequest, GenerationResponse,
    HealthResponse, PredictResponse,
)
from datagen import (
    EncoderEmbedder, GenerationBackend, ImageEmbedder, ProceduralBackend, ThumbnailEmbedder, decode_png,
    encode_png,
)
from errors import DataError, GEMError
from harness import model_from_checkpoint

logger = logging.getLogger(__name__)

VERSION = "1.0.0"
MAX_UPLOAD_BYTES = 20 * 1024 * 1024

# Initialize rate limiter
limiter = Limiter(key_func=get_remote_address)

app = FastAPI(
    title="GEM Glass Segmentation API",
    description="""
    ## Glass Surface Segmentation & Synthetic Data API

    * **/generate**: mask + prompt + seed -> synthetic RGB image (base64 PNG in, base64 PNG out)
    * **/embed**: images -> feature vectors for distribution comparison
    * **/predict**: uploaded image -> binary glass mask

    ### Rate Limits

    * Generation and embedding: 120 requests/minute
    * Prediction: 30 requests/minute
    * Health: 60 requests/minute
    """,
    version=VERSION,
    docs_url="/docs",
    redoc_url="/redoc",
    license_info={"name": "MIT"},
)

app.state.limiter = limiter
app.add_exception_handler(RateLimitExceeded, _rate_limit_exceeded_handler)

app.add_middleware(
    CORSMiddleware,
    allow_origins=[
        "http://localhost:3000",
        "http://localhost:8080",
        "http://127.0.0.1:3000",
        "http://127.0.0.1:8080",
    ],
    allow_credentials=True,
    allow_methods=["GET", "POST"],
    allow_headers=["Content-Type", "Authorization"],
)

app.state.backend = ProceduralBackend()
app.state.embedder = None
app.state.predictor = None
_predictor_lock = threading.Lock()


def get_backend() -> GenerationBackend:
    return app.state.backend


def get_embedder() -> ImageEmbedder:
    if app.state.embedder is None:
        predictor = get_predictor(required=False)
        if predictor is not None:
            model, cfg = predictor
            app.state.embedder = EncoderEmbedder(cfg.model.encoder, encoder=model.encoder)
        else:
            app.state.embedder = ThumbnailEmbedder()
    return app.state.embedder


def get_predictor(required: bool = True):
    """(model, config) from GEM_CHECKPOINT, loaded once"""
    if app.state.predictor is not None:
        return app.state.predictor
    checkpoint = os.environ.get("GEM_CHECKPOINT")
    if not checkpoint:
        if required:
            raise HTTPException(status_code=503, detail="No model loaded; set GEM_CHECKPOINT")
        return None
    with _predictor_lock:
        if app.state.predictor is None:
            model, cfg = model_from_checkpoint(checkpoint)
            model.eval()
            app.state.predictor = (model, cfg)
            logger.info("Loaded predictor from %s", checkpoint)
    return app.state.predictor


@app.get("/health", response_model=HealthResponse)
@limiter.limit("60/minute")
async def health(request: Request):
    """Health check endpoint"""
    return HealthResponse(
        status="healthy",
        timestamp=datetime.now().isoformat(),
        version=VERSION,
        model_version=get_backend().model_version,
        predictor_loaded=app.state.predictor is not None,
    )


@app.post("/generate", response_model=GenerationResponse)
@limiter.limit("120/minute")
def generate(request: Request, generation_request: GenerationRequest):
    """
    Generate one image conditioned on a glass mask.

    The mask is a single-channel PNG with values {0,255}; the image comes back as
    a size x size RGB PNG. Identical (mask, prompt, seed, size) give identical images.
    """
    try:
        mask = decode_png(generation_request.mask, mode="L")
        image = get_backend().generate((mask >= 128).astype(np.uint8), generation_request.prompt,
                                       generation_request.seed, generation_request.size)
        return GenerationResponse(image=encode_png(image), model_version=get_backend().model_version)
    except HTTPException:
        raise
    except DataError as e:
        raise HTTPException(status_code=400, detail=str(e))
    except Exception as e:
        raise HTTPException(status_code=500, detail=str(e))


@app.post("/embed", response_model=EmbeddingResponse)
@limiter.limit("120/minute")
def embed(request: Request, embedding_request: EmbeddingRequest):
    """Feature vectors for a batch of images"""
    try:
        images = [decode_png(payload, mode="RGB") for payload in embedding_request.images]
        embedder = get_embedder()
        features = embedder.embed(images)
        return EmbeddingResponse(embeddings=np.asarray(features).tolist(), model_version=type(embedder).__name__)
    except HTTPException:
        raise
    except DataError as e:
        raise HTTPException(status_code=400, detail=str(e))
    except Exception as e:
        raise HTTPException(status_code=500, detail=str(e))


@app.post("/predict", response_model=PredictResponse)
@limiter.limit("30/minute")
async def predict(request: Request, file: UploadFile = File(...)):
    """Binary glass mask for one uploaded image, at the image's resolution"""
    try:
        model, cfg = get_predictor()
        content = await file.read()
        if len(content) > MAX_UPLOAD_BYTES:
            raise HTTPException(status_code=413, detail="Upload too large")
        try:
            image = Image.open(io.BytesIO(content)).convert("RGB")
        except Exception:
            raise HTTPException(status_code=400, detail="Upload is not a readable image")
        width, height = image.size
        size = cfg.image_size
        resized = np.asarray(image.resize((size, size), Image.BILINEAR), dtype=np.float32) / 255.0
        param = next(model.parameters())
        tensor = torch.from_numpy(resized).permute(2, 0, 1).unsqueeze(0).to(device=param.device, dtype=param.dtype)
        prob = model.predict_probability(tensor)
        prob = torch.nn.functional.interpolate(prob.unsqueeze(1), size=(height, width), mode="bilinear",
                                               align_corners=False)[0, 0]
        mask = (prob >= cfg.threshold).cpu().numpy()
        return PredictResponse(
            mask=encode_png(mask.astype(np.uint8) * 255),
            glass_fraction=float(mask.mean()),
            width=width,
            height=height,
        )
    except HTTPException:
        raise
    except GEMError as e:
        raise HTTPException(status_code=400, detail=str(e))
    except Exception as e:
        raise HTTPException(status_code=500, detail=str(e))


def set_backend(backend: GenerationBackend) -> None:
    app.state.backend = backend


def set_predictor(model, cfg, embedder: Optional[ImageEmbedder] = None) -> None:
    """Install an in-memory model instead of loading GEM_CHECKPOINT"""
    app.state.predictor = (model, cfg) if model is not None else None
    app.state.embedder = embedder


if __name__ == "__main__":
    import uvicorn
    uvicorn.run(app, host="0.0.0.0", port=8000)
