#!/usr/bin/env python3
"""
HTTP clients for the generation and image-embedding services
Both speak the base64-PNG wire contract served by api.py
"""

import logging
import os
from typing import Any, Dict, Optional, Sequence

import numpy as np
import requests

from datagen import GenerationBackend, decode_png, encode_png
from errors import BackendError, BackendTimeout

logger = logging.getLogger(__name__)


class _ServiceClient:
    """Shared session handling; any requests-compatible session can be injected"""

    def __init__(self, base_url: Optional[str], timeout: float = 60.0, session: Any = None,
                 env_var: Optional[str] = None):
        base_url = base_url or (os.environ.get(env_var) if env_var else None)
        if not base_url:
            raise BackendError(f"No service URL configured{f' (set {env_var})' if env_var else ''}")
        self.base_url = base_url.rstrip("/")
        self.timeout = timeout
        self.session = session if session is not None else requests.Session()

    def _post(self, path: str, payload: Dict[str, Any]) -> Dict[str, Any]:
        try:
            response = self.session.post(f"{self.base_url}{path}", json=payload, timeout=self.timeout)
        except requests.exceptions.Timeout as e:
            raise BackendTimeout(f"{self.base_url}{path} timed out after {self.timeout}s") from e
        except requests.exceptions.RequestException as e:
            raise BackendError(f"{self.base_url}{path} unreachable: {e}") from e
        if response.status_code >= 400:
            raise BackendError(f"{self.base_url}{path} returned {response.status_code}: {response.text[:200]}")
        return response.json()

    def health_check(self) -> Dict[str, Any]:
        try:
            response = self.session.get(f"{self.base_url}/health", timeout=self.timeout)
        except requests.exceptions.RequestException as e:
            raise BackendError(f"{self.base_url}/health unreachable: {e}") from e
        if response.status_code >= 400:
            raise BackendError(f"{self.base_url}/health returned {response.status_code}")
        return response.json()


class DiffusionServiceClient(_ServiceClient, GenerationBackend):
    """Generation backend that forwards jobs to a remote mask-conditioned generator"""

    def __init__(self, base_url: Optional[str] = None, timeout: float = 60.0, session: Any = None):
        super().__init__(base_url, timeout, session, env_var="GEM_BACKEND_URL")
        self._model_version: Optional[str] = None

    @property
    def model_version(self) -> str:
        if self._model_version is None:
            try:
                self._model_version = self.health_check().get("model_version", "unknown")
            except BackendError:
                return "unknown"
        return self._model_version

    def generate(self, mask: np.ndarray, prompt: str, seed: int, size: int) -> np.ndarray:
        payload = {
            "mask": encode_png((np.asarray(mask) > 0).astype(np.uint8) * 255),
            "prompt": prompt,
            "seed": int(seed),
            "size": int(size),
        }
        body = self._post("/generate", payload)
        self._model_version = body.get("model_version", self._model_version)
        return decode_png(body["image"], mode="RGB")


class EmbeddingServiceClient(_ServiceClient):
    """Image embedder backed by a remote feature extractor"""

    def __init__(self, base_url: Optional[str] = None, timeout: float = 60.0, session: Any = None,
                 batch_size: int = 32):
        super().__init__(base_url, timeout, session, env_var="GEM_EMBED_URL")
        self.batch_size = batch_size

    def embed(self, images: Sequence[np.ndarray]) -> np.ndarray:
        features = []
        for start in range(0, len(images), self.batch_size):
            batch = images[start:start + self.batch_size]
            body = self._post("/embed", {"images": [encode_png(np.asarray(img, dtype=np.uint8)) for img in batch]})
            features.extend(body["embeddings"])
        logger.debug("Embedded %d images via %s", len(features), self.base_url)
        return np.asarray(features, dtype=np.float64)
