"""Embedding clients for the dense pruner.

``HttpEmbeddingClient`` speaks the batch ``POST /embed`` contract of the
companion embedding service; ``HashingEmbedder`` is a deterministic local
stand-in (hashed bag of words) for offline runs and tests.
"""

from __future__ import annotations

import hashlib
import threading
import time

import numpy as np
import requests

from .errors import ApiError, ContractViolation, TransportError


class HashingEmbedder:
    """Deterministic hashed bag-of-words encoder.

    Each token hashes to one signed coordinate; a text's vector is the sum of
    its token vectors, optionally L2-normalized.  Deterministic across
    processes (keyed BLAKE2 digest, no interpreter hash seed involved).
    """

    def __init__(self, dim: int = 256, seed: int = 0, normalize: bool = True):
        if dim < 2:
            raise ValueError("dim must be >= 2")
        self.dim = dim
        self.seed = seed
        self.normalize = normalize
        self._key = seed.to_bytes(8, "little", signed=True)

    def _token_coord(self, token: str) -> tuple[int, float]:
        digest = hashlib.blake2b(token.encode("utf-8"), key=self._key, digest_size=8).digest()
        value = int.from_bytes(digest, "little")
        return value % self.dim, 1.0 if (value >> 63) & 1 else -1.0

    def embed(self, texts: list[str]) -> np.ndarray:
        out = np.zeros((len(texts), self.dim), dtype=np.float64)
        for row, text in enumerate(texts):
            for token in _tokens(text):
                idx, sign = self._token_coord(token)
                out[row, idx] += sign
            if self.normalize:
                norm = np.linalg.norm(out[row])
                if norm > 0:
                    out[row] /= norm
        return out


def _tokens(text: str) -> list[str]:
    import re

    return re.findall(r"[a-z0-9]+", text.lower())


class HttpEmbeddingClient:
    """Batch embedding over HTTP: ``POST {endpoint}`` with texts/model/normalize."""

    def __init__(
        self,
        endpoint: str,
        model: str,
        normalize: bool = False,
        timeout: float = 30.0,
        retries: int = 2,
        backoff_base: float = 0.5,
        max_in_flight: int = 4,
        session: requests.Session | None = None,
    ):
        self.endpoint = endpoint
        self.model = model
        self.normalize = normalize
        self.timeout = timeout
        self.retries = retries
        self.backoff_base = backoff_base
        self._session = session or requests.Session()
        self._gate = threading.Semaphore(max_in_flight)

    def embed(self, texts: list[str]) -> np.ndarray:
        payload = {"texts": list(texts), "model": self.model, "normalize": self.normalize}
        attempts = 0
        last_exc: Exception | None = None
        while attempts <= self.retries:
            attempts += 1
            try:
                with self._gate:
                    resp = self._session.post(self.endpoint, json=payload, timeout=self.timeout)
            except requests.RequestException as exc:
                last_exc = exc
                if attempts <= self.retries:
                    time.sleep(self.backoff_base * (2 ** (attempts - 1)))
                continue
            if resp.status_code == 200:
                body = resp.json()
                vectors = body.get("vectors")
                if not isinstance(vectors, list) or len(vectors) != len(texts):
                    raise ContractViolation(
                        f"embedding service returned {len(vectors or [])} vectors for {len(texts)} texts"
                    )
                arr = np.asarray(vectors, dtype=np.float64)
                if arr.ndim != 2:
                    raise ContractViolation("embedding vectors have inconsistent dimensions")
                return arr
            if resp.status_code in (429,) or resp.status_code >= 500:
                last_exc = ApiError("retryable embedding failure", resp.status_code, resp.text)
                if attempts <= self.retries:
                    time.sleep(self.backoff_base * (2 ** (attempts - 1)))
                continue
            raise ApiError("embedding service rejected the request", resp.status_code, resp.text)
        raise TransportError(f"embedding service unreachable: {last_exc}", attempts=attempts)
