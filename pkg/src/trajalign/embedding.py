"""Text embeddings and cosine similarity.

Two providers share one interface: ``HashEmbedder`` (signed feature
hashing, fully deterministic, no model weights) and ``RemoteEmbedder``
(HTTP service). Both return L2-normalized float64 rows and sit behind an
LRU cache keyed on the exact text.
"""

from __future__ import annotations

import hashlib
import logging
import os
import re
import threading
from collections import OrderedDict
from dataclasses import dataclass
from typing import Sequence

import httpx
import numpy as np

from .errors import ConfigError, DomainError, PreconditionError, ProtocolError, ProviderError, RetryableProviderError

log = logging.getLogger(__name__)

SIMILARITY_THRESHOLD = 0.7
DEFAULT_DIM = 384

_TOKEN = re.compile(r"[0-9a-z]+|[^\W\d_a-z]", re.UNICODE)


@dataclass(frozen=True)
class EmbeddingProviderConfig:
    kind: str = "hash"
    dim: int = DEFAULT_DIM
    endpoint: str | None = None
    batch_size: int = 32
    cache_capacity: int = 4096
    seed: int = 0
    max_retries: int = 3
    timeout: float = 30.0
    max_in_flight: int = 4

    def __post_init__(self):
        if self.kind not in ("hash", "remote"):
            raise ConfigError(f"embedding kind must be 'hash' or 'remote', got {self.kind!r}")
        if self.dim < 2:
            raise ConfigError("embedding dim must be >= 2")
        if self.batch_size < 1:
            raise ConfigError("embedding batch_size must be >= 1")
        if self.cache_capacity < 0:
            raise ConfigError("embedding cache_capacity must be >= 0")


def hash_tokens(text: str) -> list[str]:
    """Lowercased ASCII alphanumeric runs; any other letter is its own token."""
    return _TOKEN.findall(text.casefold())


def hash_vector(text: str, dim: int, seed: int = 0) -> np.ndarray:
    """Signed bag-of-tokens hashed into ``dim`` buckets, then L2-normalized.

    Bucket and sign come from blake2b(f"{seed}:{token}"): the first 8 bytes
    read big-endian, bucket = value mod dim, sign = top bit. Text without any
    token hashes its stripped form as a single feature.
    """
    tokens = hash_tokens(text) or [text.strip()]
    vec = _bucket(tokens, dim, seed)
    if not vec.any():
        # every feature cancelled out; use the whole text as one feature
        vec = _bucket([text.strip()], dim, seed)
    return vec / np.linalg.norm(vec)


def _bucket(tokens, dim, seed):
    vec = np.zeros(dim, dtype=np.float64)
    for tok in tokens:
        h = int.from_bytes(hashlib.blake2b(f"{seed}:{tok}".encode("utf-8"), digest_size=8).digest(), "big")
        vec[h % dim] += -1.0 if h >> 63 else 1.0
    return vec


def l2_normalize(vec) -> np.ndarray:
    arr = np.asarray(vec, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise DomainError("embedding contains non-finite values")
    norm = np.linalg.norm(arr)
    if norm == 0.0:
        raise DomainError("cannot normalize a zero vector")
    return arr / norm


def cosine_sim(u, v) -> float:
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if u.shape != v.shape:
        raise DomainError(f"dimension mismatch: {u.shape} vs {v.shape}")
    nu, nv = float(np.linalg.norm(u)), float(np.linalg.norm(v))
    if nu == 0.0 or nv == 0.0:
        raise DomainError("cosine similarity undefined for a zero vector")
    return max(-1.0, min(1.0, float(np.dot(u, v)) / (nu * nv)))


class _LRU:
    def __init__(self, capacity: int):
        self.capacity = capacity
        self._data: OrderedDict[bytes, np.ndarray] = OrderedDict()
        self._lock = threading.Lock()

    def get(self, key):
        with self._lock:
            vec = self._data.get(key)
            if vec is not None:
                self._data.move_to_end(key)
            return vec

    def put(self, key, vec):
        if self.capacity == 0:
            return
        with self._lock:
            self._data[key] = vec
            self._data.move_to_end(key)
            while len(self._data) > self.capacity:
                self._data.popitem(last=False)

    def __len__(self):
        return len(self._data)


class Embedder:
    """Cache front for a batch ``_compute`` implemented by subclasses."""

    def __init__(self, dim: int, cache_capacity: int = 4096, batch_size: int = 32):
        self.dim = dim
        self.batch_size = batch_size
        self.cache = _LRU(cache_capacity)

    def _compute(self, texts: list[str]) -> np.ndarray:
        raise NotImplementedError

    def embed(self, texts: Sequence[str]) -> list[np.ndarray]:
        texts = list(texts)
        for t in texts:
            if not isinstance(t, str) or not t.strip():
                raise PreconditionError("embed() needs non-empty strings", stage="embed")
        out: list[np.ndarray | None] = [self.cache.get(t.encode("utf-8")) for t in texts]
        missing = list(dict.fromkeys(t for t, v in zip(texts, out) if v is None))
        fresh: dict[str, np.ndarray] = {}
        for start in range(0, len(missing), self.batch_size):
            batch = missing[start : start + self.batch_size]
            rows = self._compute(batch)
            for t, row in zip(batch, rows):
                row.setflags(write=False)
                fresh[t] = row
                self.cache.put(t.encode("utf-8"), row)
        return [v if v is not None else fresh[t] for t, v in zip(texts, out)]

    def embed_one(self, text: str) -> np.ndarray:
        return self.embed([text])[0]

    def similarity(self, a: str, b: str) -> float:
        u, v = self.embed([a, b])
        return cosine_sim(u, v)


class HashEmbedder(Embedder):
    def __init__(self, dim: int = DEFAULT_DIM, seed: int = 0, cache_capacity: int = 4096, batch_size: int = 32):
        super().__init__(dim, cache_capacity, batch_size)
        self.seed = seed

    def _compute(self, texts):
        return [hash_vector(t, self.dim, self.seed) for t in texts]


class RemoteEmbedder(Embedder):
    """Client for ``POST {endpoint}/embed``.

    Request ``{"texts": [...]}``, response ``{"vectors": [[...]], "dim": N}``.
    Transport failures and 5xx replies are retried up to ``max_retries``
    times; other non-200 replies fail at once.
    """

    def __init__(
        self,
        endpoint: str,
        dim: int = DEFAULT_DIM,
        token: str | None = None,
        cache_capacity: int = 4096,
        batch_size: int = 32,
        max_retries: int = 3,
        timeout: float = 30.0,
        max_in_flight: int = 4,
        transport: httpx.BaseTransport | None = None,
    ):
        super().__init__(dim, cache_capacity, batch_size)
        headers = {"Authorization": f"Bearer {token}"} if token else {}
        self.client = httpx.Client(base_url=endpoint.rstrip("/"), headers=headers, timeout=timeout, transport=transport)
        self.max_retries = max_retries
        self._slots = threading.BoundedSemaphore(max_in_flight)

    def _compute(self, texts):
        payload = post_json(self.client, "/embed", {"texts": texts}, self.max_retries, self._slots, stage="embed")
        vectors, dim = payload.get("vectors"), payload.get("dim")
        if not isinstance(vectors, list) or len(vectors) != len(texts):
            raise ProtocolError(f"expected {len(texts)} vectors", stage="embed")
        if dim != self.dim or any(not isinstance(v, list) or len(v) != self.dim for v in vectors):
            raise ProtocolError(f"remote dim {dim} does not match configured dim {self.dim}", stage="embed")
        try:
            return [l2_normalize(v) for v in vectors]
        except (DomainError, TypeError, ValueError) as exc:
            raise ProtocolError(f"bad vector from remote embedder: {exc}", stage="embed") from exc


def post_json(client: httpx.Client, path: str, body: dict, max_retries: int, slots=None, stage=None) -> dict:
    """POST a JSON body, retrying transport errors and 5xx responses."""
    last = None
    for attempt in range(max_retries + 1):
        try:
            if slots is not None:
                with slots:
                    resp = client.post(path, json=body)
            else:
                resp = client.post(path, json=body)
        except httpx.HTTPError as exc:
            last = RetryableProviderError(f"{path}: {exc}", stage=stage)
        else:
            if resp.status_code == 200:
                try:
                    data = resp.json()
                except ValueError as exc:
                    raise ProtocolError(f"{path}: response is not JSON", stage=stage) from exc
                if not isinstance(data, dict):
                    raise ProtocolError(f"{path}: response is not a JSON object", stage=stage)
                return data
            if resp.status_code < 500:
                raise ProviderError(f"{path}: HTTP {resp.status_code}", stage=stage)
            last = RetryableProviderError(f"{path}: HTTP {resp.status_code}", stage=stage)
        log.warning("attempt %d/%d failed: %s", attempt + 1, max_retries + 1, last)
    raise ProviderError(f"giving up after {max_retries + 1} attempts: {last}", stage=stage)


def make_embedder(cfg: EmbeddingProviderConfig, transport=None) -> Embedder:
    if cfg.kind == "hash":
        return HashEmbedder(cfg.dim, cfg.seed, cfg.cache_capacity, cfg.batch_size)
    endpoint = cfg.endpoint or os.environ.get("EMBED_ENDPOINT")
    if not endpoint:
        raise ConfigError("remote embedder needs an endpoint (config or EMBED_ENDPOINT)")
    return RemoteEmbedder(
        endpoint,
        cfg.dim,
        token=os.environ.get("EMBED_TOKEN"),
        cache_capacity=cfg.cache_capacity,
        batch_size=cfg.batch_size,
        max_retries=cfg.max_retries,
        timeout=cfg.timeout,
        max_in_flight=cfg.max_in_flight,
        transport=transport,
    )
