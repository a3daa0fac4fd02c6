"""Text embedding providers behind one small interface.

Providers expose `provider_id`, `dim`, and `embed(text) -> np.ndarray`.
The hash provider is fully offline and deterministic, which is what replay
runs and the test suite use; the HTTP provider is for live experiments with
a real embedding model behind a chat-completions-style service.
"""

from __future__ import annotations

import hashlib
import os
import re
import time

import numpy as np

_TOKEN_RE = re.compile(r"[A-Za-z_]+|\d+")


class EmbeddingError(RuntimeError):
    pass


class HashEmbeddingProvider:
    """Deterministic offline embeddings: seeded random projection of token hashes.

    Each token maps to a fixed pseudorandom direction derived from its hash;
    a text embeds to the sum of its token directions. Identical text always
    embeds identically, across processes and platforms.
    """

    def __init__(self, dim: int = 64, seed: int = 0):
        if dim < 1:
            raise ValueError(f"dim must be >= 1, got {dim}")
        self.dim = dim
        self.seed = seed
        self.provider_id = f"hash:{dim}:{seed}"
        self._token_cache: dict[str, np.ndarray] = {}

    def _token_vector(self, token: str) -> np.ndarray:
        vec = self._token_cache.get(token)
        if vec is None:
            digest = hashlib.sha256(f"{self.seed}\x00{token}".encode("utf-8")).digest()
            rs = np.random.RandomState(int.from_bytes(digest[:4], "little"))
            vec = rs.standard_normal(self.dim)
            self._token_cache[token] = vec
        return vec

    def embed(self, text: str) -> np.ndarray:
        if not text:
            raise ValueError("cannot embed empty text")
        tokens = _TOKEN_RE.findall(text.lower())
        if not tokens:
            # punctuation-only text still embeds somewhere stable
            tokens = [text]
        out = np.zeros(self.dim, dtype=np.float64)
        for tok in tokens:
            out += self._token_vector(tok)
        return out


class HttpEmbeddingProvider:
    """Embeddings from an HTTP endpoint shaped like the common /embeddings API."""

    def __init__(self, base_url: str, model: str, api_key: str | None = None,
                 dim: int = 0, timeout: float = 60.0, retries: int = 3,
                 backoff: float = 1.0, session=None, sleep=time.sleep):
        self.base_url = base_url.rstrip("/")
        self.model = model
        self.api_key = api_key
        self.dim = dim
        self.timeout = timeout
        self.retries = retries
        self.backoff = backoff
        self.sleep = sleep
        self.provider_id = f"http:{model}"
        if session is None:
            import requests

            session = requests.Session()
        self._session = session

    def embed(self, text: str) -> np.ndarray:
        if not text:
            raise ValueError("cannot embed empty text")
        headers = {"Content-Type": "application/json"}
        if self.api_key:
            headers["Authorization"] = f"Bearer {self.api_key}"
        payload = {"model": self.model, "input": text}
        last = None
        for attempt in range(self.retries):
            try:
                resp = self._session.post(
                    f"{self.base_url}/embeddings", json=payload,
                    headers=headers, timeout=self.timeout,
                )
            except Exception as exc:
                last = exc
                self.sleep(self.backoff * (2 ** attempt))
                continue
            if resp.status_code >= 500:
                last = EmbeddingError(f"server error {resp.status_code}")
                self.sleep(self.backoff * (2 ** attempt))
                continue
            if resp.status_code >= 400:
                raise EmbeddingError(f"embedding request rejected ({resp.status_code}): {resp.text[:200]}")
            vec = np.asarray(resp.json()["data"][0]["embedding"], dtype=np.float64)
            if self.dim and vec.shape[0] != self.dim:
                raise EmbeddingError(f"expected dim {self.dim}, got {vec.shape[0]}")
            if not self.dim:
                self.dim = int(vec.shape[0])
            return vec
        raise EmbeddingError(f"embedding failed after {self.retries} attempts: {last}")


def make_embedding_provider(kind: str, *, dim: int = 64, seed: int = 0,
                            model: str = "", base_url: str = "",
                            api_key_env: str = "ALLIANCECODER_EMBED_API_KEY",
                            base_url_env: str = "ALLIANCECODER_EMBED_BASE_URL"):
    if kind == "hash":
        return HashEmbeddingProvider(dim=dim, seed=seed)
    if kind == "http":
        url = base_url or os.environ.get(base_url_env, "")
        if not url:
            raise ValueError(f"http embedding provider needs a base url ({base_url_env})")
        return HttpEmbeddingProvider(
            base_url=url, model=model, api_key=os.environ.get(api_key_env), dim=dim
        )
    raise ValueError(f"unknown embedding provider kind: {kind}")
