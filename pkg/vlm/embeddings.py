"""Token embedding providers for BERTScore."""
import json
import logging
import re
from pathlib import Path
from typing import Optional, Protocol

import httpx
import numpy as np
from pydantic import BaseModel, ConfigDict, model_validator

from hazguard.config import EMBEDDINGS_MODEL
from hazguard.errors import EmbeddingError

logger = logging.getLogger(__name__)

_TOKEN_RE = re.compile(r"[a-z0-9_]+|[^\sa-z0-9_]")


class TokenEmbeddings(BaseModel):
    """One vector per token, all of one dimension, none of zero norm."""

    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)

    tokens: tuple[str, ...]
    vectors: np.ndarray

    @model_validator(mode="after")
    def _check_shape(self) -> "TokenEmbeddings":
        if self.vectors.ndim != 2:
            raise ValueError(f"vectors must be 2-D, got shape {self.vectors.shape}")
        if len(self.tokens) != self.vectors.shape[0]:
            raise ValueError(f"{len(self.tokens)} tokens but {self.vectors.shape[0]} vectors")
        if self.vectors.size and np.any(np.linalg.norm(self.vectors, axis=1) == 0):
            raise ValueError("zero-norm token vector")
        return self

    @classmethod
    def from_lists(cls, tokens, vectors) -> "TokenEmbeddings":
        return cls(tokens=tuple(tokens), vectors=np.asarray(vectors, dtype=np.float64).reshape(len(tokens), -1))


class EmbeddingProvider(Protocol):
    provider_id: str

    def embed(self, text: str) -> TokenEmbeddings:
        ...


def tokenize(text: str) -> list[str]:
    """Lowercased word and punctuation tokens."""
    return _TOKEN_RE.findall(text.lower())


class FileCacheProvider:
    """Token vectors read from a JSON cache file.

    Cache format: {"dimension": d, "vectors": {"token": [floats...]}}.
    Tokens missing from the cache fail with EmbeddingError.
    """

    def __init__(self, cache_path: Path):
        self.cache_path = Path(cache_path)
        self.provider_id = f"file:{self.cache_path.name}"
        try:
            with open(self.cache_path, "r", encoding="utf-8") as f:
                data = json.load(f)
        except (OSError, json.JSONDecodeError) as e:
            raise EmbeddingError(f"Cannot read embedding cache {self.cache_path}: {e}") from e
        self.vectors = {token: np.asarray(values, dtype=np.float64) for token, values in data.get("vectors", {}).items()}
        self.dimension = int(data.get("dimension") or (len(next(iter(self.vectors.values()))) if self.vectors else 0))
        logger.info(f"Loaded {len(self.vectors)} cached token vectors from {self.cache_path}")

    def embed(self, text: str) -> TokenEmbeddings:
        tokens = tokenize(text)
        rows = []
        for token in tokens:
            if token in self.vectors:
                rows.append(self.vectors[token])
            else:
                raise EmbeddingError(f"Token {token!r} not in embedding cache {self.cache_path}")
        return TokenEmbeddings.from_lists(tokens, rows)


class HttpEmbeddingProvider:
    """Contextual token embeddings from an HTTP endpoint.

    POST {endpoint}/embeddings/tokens {"model": ..., "input": text} must
    return {"tokens": [...], "vectors": [[...], ...]}.
    """

    def __init__(self, endpoint: str, model: str = EMBEDDINGS_MODEL, timeout: float = 60.0, client: Optional[httpx.Client] = None):
        self.endpoint = endpoint.rstrip("/")
        self.model = model
        self.provider_id = f"http:{model}"
        self.client = client or httpx.Client(timeout=timeout)

    def embed(self, text: str) -> TokenEmbeddings:
        try:
            response = self.client.post(f"{self.endpoint}/embeddings/tokens", json={"model": self.model, "input": text})
            response.raise_for_status()
            data = response.json()
            return TokenEmbeddings.from_lists(data["tokens"], data["vectors"])
        except (httpx.HTTPError, KeyError, ValueError) as e:
            raise EmbeddingError(f"Embedding endpoint {self.endpoint} failed: {e}") from e


def embed_tokens(text: str, provider: EmbeddingProvider) -> TokenEmbeddings:
    """Embed non-empty text with the given provider."""
    if not text or not text.strip():
        raise ValueError("Cannot embed empty text")
    try:
        embeddings = provider.embed(text.strip())
    except EmbeddingError:
        raise
    except Exception as e:
        raise EmbeddingError(f"Provider {getattr(provider, 'provider_id', provider)} failed: {e}") from e
    if not embeddings.tokens:
        raise EmbeddingError(f"Provider returned no tokens for {text[:40]!r}")
    return embeddings


def create_embedder(cache_path: Optional[Path] = None, endpoint: Optional[str] = None) -> EmbeddingProvider:
    """Pick the embedding provider named by the run configuration."""
    if cache_path:
        return FileCacheProvider(cache_path)
    if endpoint:
        return HttpEmbeddingProvider(endpoint)
    raise ValueError("Rationale scoring needs an embedding cache file or an embeddings endpoint")
