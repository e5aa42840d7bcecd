"""Completion and embedding providers.

Every provider call is keyed by the SHA-256 of its prompt. Callers that need
several independent samples for one prompt pass ``sample``; replay scripts can
then hold a list of responses per prompt, indexed by sample.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import re
import threading
import time
from pathlib import Path
from typing import Any, Protocol, Sequence, runtime_checkable

import httpx
import numpy as np

log = logging.getLogger(__name__)


class ProviderError(RuntimeError):
    """A provider call failed after exhausting its retries."""

    def __init__(self, message: str, attempts: int = 1, retryable: bool = True):
        super().__init__(f"{message} (after {attempts} attempt(s))")
        self.attempts = attempts
        self.retryable = retryable


class UnscriptedPromptError(LookupError):
    """Replay mode received a prompt that is not in the script."""


def prompt_key(text: str) -> str:
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


@runtime_checkable
class CompletionProvider(Protocol):
    identity: str

    def complete(self, prompt: str, *, sample: int = 0) -> str: ...


@runtime_checkable
class Embedder(Protocol):
    identity: str
    dim: int

    def embed(self, text: str) -> np.ndarray: ...


def _unit(vector: Sequence[float] | np.ndarray) -> np.ndarray:
    arr = np.asarray(vector, dtype=np.float64)
    norm = float(np.linalg.norm(arr))
    if norm == 0.0 or not np.isfinite(norm):
        raise ValueError("cannot normalize a zero or non-finite vector")
    return arr / norm


def _pick(value: str | list[str], key: str, sample: int) -> str:
    if isinstance(value, list):
        if sample >= len(value):
            raise UnscriptedPromptError(
                f"no scripted response for prompt {key} sample {sample} "
                f"(script holds {len(value)})"
            )
        return value[sample]
    return value


class ReplayProvider:
    """Deterministic completion provider backed by a prompt-hash -> response map.

    A value may be a single string (returned for every sample) or a list of
    strings indexed by ``sample``.
    """

    def __init__(self, script: dict[str, str | list[str]], name: str = "replay"):
        self._script = dict(script)
        digest = hashlib.sha256(
            json.dumps(self._script, sort_keys=True).encode("utf-8")
        ).hexdigest()
        self.identity = f"{name}:{digest[:16]}"

    @classmethod
    def from_file(cls, path: str | Path) -> ReplayProvider:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
        if "completions" in data or "embeddings" in data:
            data = data.get("completions", {})
        return cls(data, name=f"replay:{Path(path).name}")

    def complete(self, prompt: str, *, sample: int = 0) -> str:
        if not prompt:
            raise ValueError("prompt must be non-empty")
        key = prompt_key(prompt)
        if key not in self._script:
            raise UnscriptedPromptError(f"no scripted response for prompt {key}")
        return _pick(self._script[key], key, sample)


class ReplayEmbedder:
    """Embedding table keyed by the SHA-256 of the text. Vectors are normalized on load."""

    def __init__(self, table: dict[str, Sequence[float]], name: str = "replay-embed"):
        if not table:
            raise ValueError("replay embedding table is empty")
        self._table = {key: _unit(vec) for key, vec in table.items()}
        dims = {vec.shape[0] for vec in self._table.values()}
        if len(dims) != 1:
            raise ValueError(f"replay embeddings mix dimensions: {sorted(dims)}")
        self.dim = dims.pop()
        digest = hashlib.sha256(
            json.dumps({k: list(map(float, v)) for k, v in sorted(table.items())}).encode()
        ).hexdigest()
        self.identity = f"{name}:{digest[:16]}"

    @classmethod
    def from_file(cls, path: str | Path) -> ReplayEmbedder:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
        if "embeddings" not in data:
            raise ValueError(f"{path} has no 'embeddings' section")
        return cls(data["embeddings"], name=f"replay-embed:{Path(path).name}")

    def embed(self, text: str) -> np.ndarray:
        if not text:
            raise ValueError("text must be non-empty")
        key = prompt_key(text)
        try:
            return self._table[key].copy()
        except KeyError:
            raise UnscriptedPromptError(f"no scripted embedding for text {key}") from None


_TOKEN_RE = re.compile(r"[A-Za-z0-9_]+")


class HashingEmbedder:
    """Offline bag-of-words embedder using signed feature hashing.

    Useful when no pre-trained encoder is available; similarity reflects shared
    vocabulary only.
    """

    def __init__(self, dim: int = 256):
        if dim < 1:
            raise ValueError("dim must be >= 1")
        self.dim = dim
        self.identity = f"hashing-bow:{dim}"

    def embed(self, text: str) -> np.ndarray:
        if not text:
            raise ValueError("text must be non-empty")
        vec = np.zeros(self.dim, dtype=np.float64)
        tokens = [t.lower() for t in _TOKEN_RE.findall(text)] or [text]
        for token in tokens:
            h = hashlib.blake2b(token.encode("utf-8"), digest_size=8).digest()
            bucket = int.from_bytes(h[:4], "little") % self.dim
            vec[bucket] += 1.0 if h[4] & 1 else -1.0
        if not vec.any():
            vec[0] = 1.0
        return _unit(vec)


class SentenceTransformerEmbedder:
    """Pre-trained sentence encoder (defaults to all-MiniLM-L6-v2)."""

    def __init__(self, model_name: str = "sentence-transformers/all-MiniLM-L6-v2"):
        from sentence_transformers import SentenceTransformer

        self._model = SentenceTransformer(model_name)
        self._lock = threading.Lock()
        self.dim = int(self._model.get_sentence_embedding_dimension())
        self.identity = f"st:{model_name}"

    def embed(self, text: str) -> np.ndarray:
        if not text:
            raise ValueError("text must be non-empty")
        with self._lock:
            vec = self._model.encode([text], normalize_embeddings=True)[0]
        return _unit(vec)


class HttpProvider:
    """OpenAI-compatible chat-completions client with retry and idempotency keys."""

    def __init__(
        self,
        endpoint: str,
        model: str,
        api_key: str | None = None,
        temperature: float = 0.0,
        max_retries: int = 3,
        backoff: float = 1.0,
        timeout: float = 120.0,
        client: httpx.Client | None = None,
    ):
        if not endpoint:
            raise ValueError("live provider needs an endpoint URL")
        self.endpoint = endpoint
        self.model = model
        self.temperature = temperature
        self.max_retries = max_retries
        self.backoff = backoff
        self._client = client or httpx.Client(timeout=timeout)
        self._headers = {"Content-Type": "application/json"}
        if api_key:
            self._headers["Authorization"] = f"Bearer {api_key}"
        self.identity = f"http:{endpoint}#{model}"

    def payload(self, prompt: str) -> dict[str, Any]:
        return {
            "model": self.model,
            "temperature": self.temperature,
            "messages": [{"role": "user", "content": prompt}],
        }

    def complete(self, prompt: str, *, sample: int = 0) -> str:
        if not prompt:
            raise ValueError("prompt must be non-empty")
        headers = dict(self._headers)
        headers["Idempotency-Key"] = f"{prompt_key(prompt)}-{sample}"
        last = ""
        for attempt in range(1, self.max_retries + 1):
            try:
                resp = self._client.post(self.endpoint, json=self.payload(prompt), headers=headers)
                if resp.status_code == 200:
                    return resp.json()["choices"][0]["message"]["content"]
                last = f"HTTP {resp.status_code}: {resp.text[:200]}"
                if resp.status_code < 500 and resp.status_code != 429:
                    raise ProviderError(last, attempts=attempt, retryable=False)
            except httpx.HTTPError as exc:
                last = f"{type(exc).__name__}: {exc}"
            log.warning("provider call failed (attempt %d/%d): %s", attempt, self.max_retries, last)
            if attempt < self.max_retries:
                time.sleep(self.backoff * 2 ** (attempt - 1))
        raise ProviderError(last or "provider call failed", attempts=self.max_retries)


class RecordingProvider:
    """Wraps a provider and records every response, for building replay scripts."""

    def __init__(self, inner: CompletionProvider):
        self.inner = inner
        self.identity = inner.identity
        self._lock = threading.Lock()
        self.script: dict[str, list[str]] = {}

    def complete(self, prompt: str, *, sample: int = 0) -> str:
        text = self.inner.complete(prompt, sample=sample)
        with self._lock:
            slot = self.script.setdefault(prompt_key(prompt), [])
            while len(slot) <= sample:
                slot.append(text)
            slot[sample] = text
        return text

    def dump(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps({"completions": self.script}, indent=2, sort_keys=True))


def make_embedder(kind: str, dim: int = 256, replay_path: str | Path | None = None) -> Embedder:
    if replay_path is not None:
        return ReplayEmbedder.from_file(replay_path)
    if kind == "hashing":
        return HashingEmbedder(dim)
    if kind.startswith("st:") or kind == "minilm":
        name = "sentence-transformers/all-MiniLM-L6-v2" if kind == "minilm" else kind[3:]
        return SentenceTransformerEmbedder(name)
    raise ValueError(f"unknown embedder {kind!r}")


def make_provider(config: Any, replay_path: str | Path | None = None) -> CompletionProvider:
    if replay_path is not None:
        return ReplayProvider.from_file(replay_path)
    return HttpProvider(
        endpoint=config.endpoint,
        model=config.model,
        api_key=os.environ.get(config.api_key_env),
        temperature=config.temperature,
    )
