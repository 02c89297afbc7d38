"""Clients for chat-completion and embedding endpoints.

Speaks the OpenAI-compatible wire protocol (``POST {endpoint}/chat/completions``
and ``POST {endpoint}/embeddings``) with retry/backoff, an append-only
on-disk response cache, bounded parallelism, and checkpointed batch runs
that resume without re-requesting completed work. A deterministic mock
backend (substring rule table plus hashing embedder) stands in for paid
endpoints in tests and offline runs; ``mock://`` endpoints select it.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import random
import threading
import time
from concurrent.futures import FIRST_EXCEPTION, ThreadPoolExecutor, wait
from dataclasses import dataclass
from pathlib import Path
from typing import IO, Optional, Sequence, Union

import numpy as np
import requests

from .corpus import Dataset, ReviewInstance
from .prompting import (
    PromptConfig,
    PromptError,
    RenderedPrompt,
    parse_label_response,
    render_prompt,
)

log = logging.getLogger(__name__)

ERROR_LABEL = "error"

_RETRYABLE_STATUS = frozenset({429} | set(range(500, 600)))


class GatewayError(Exception):
    pass


class TransportError(GatewayError):
    pass


class DimensionMismatch(GatewayError):
    pass


class CheckpointCorrupt(GatewayError):
    def __init__(self, path, detail: str):
        super().__init__(f"checkpoint {path}: {detail}")
        self.path = path
        self.detail = detail


@dataclass(frozen=True)
class ModelConfig:
    endpoint: str
    model_id: str
    temperature: float = 0.1
    max_tokens: int = 64
    timeout: float = 60.0
    max_attempts: int = 5
    backoff_base: float = 1.0
    api_key_env: str = "LLM_API_KEY"
    trace: bool = False

    def __post_init__(self):
        if self.temperature < 0:
            raise ValueError("temperature must be nonnegative")
        if self.max_attempts < 1:
            raise ValueError("max_attempts must be at least 1")


@dataclass(frozen=True)
class Prediction:
    instance_id: str
    label: str  # valid | noisy | error
    raw_response: str
    model_id: str
    prompt_fingerprint: str
    latency: float = 0.0
    from_cache: bool = False
    error: str = ""


# ---------------------------------------------------------------------------
# Response cache

class ResponseCache:
    """Append-only key-value log keyed by stable request hashes.

    Entries are replayed at construction; writes append one JSON line per
    stored response, so a crash never loses previously written entries and
    cache files diff cleanly. Thread-safe.
    """

    def __init__(self, path: Optional[Union[str, Path]] = None):
        self._path = Path(path) if path is not None else None
        self._entries: dict = {}
        self._lock = threading.Lock()
        self._fh: Optional[IO] = None
        if self._path is not None and self._path.exists():
            with open(self._path, "r", encoding="utf-8") as fh:
                for line in fh:
                    if not line.strip():
                        continue
                    record = json.loads(line)
                    self._entries[record["key"]] = record["value"]
        if self._path is not None:
            self._path.parent.mkdir(parents=True, exist_ok=True)
            self._fh = open(self._path, "a", encoding="utf-8")

    def get(self, key: str):
        with self._lock:
            return self._entries.get(key)

    def put(self, key: str, value) -> None:
        with self._lock:
            if key in self._entries:
                return
            self._entries[key] = value
            if self._fh is not None:
                self._fh.write(json.dumps({"key": key, "value": value}, ensure_ascii=False))
                self._fh.write("\n")
                self._fh.flush()

    def __len__(self) -> int:
        with self._lock:
            return len(self._entries)

    def close(self) -> None:
        with self._lock:
            if self._fh is not None:
                self._fh.close()
                self._fh = None

    @staticmethod
    def chat_key(model_id: str, system_text: str, user_text: str, temperature: float) -> str:
        return _digest(["chat", model_id, system_text, user_text, repr(temperature)])

    @staticmethod
    def embed_key(model_id: str, text: str) -> str:
        return _digest(["embed", model_id, text])


def _digest(parts: Sequence[str]) -> str:
    h = hashlib.sha256()
    for part in parts:
        h.update(part.encode("utf-8"))
        h.update(b"\x1f")
    return h.hexdigest()


# ---------------------------------------------------------------------------
# Backends

class MockBackend:
    """Deterministic stand-in for a chat/embedding service.

    Chat responses come from an ordered substring rule table over the user
    text, falling back to a default response. Embeddings are seeded from a
    hash of the text, so equal texts always embed identically. Request
    counters make "no network call" assertions observable.
    """

    def __init__(self, rules: Sequence = (), default_response: str = "", embed_dim: int = 64):
        self.rules = [(str(sub), str(resp)) for sub, resp in rules]
        self.default_response = default_response
        self.embed_dim = embed_dim
        self.chat_calls = 0
        self.embed_calls = 0
        self._lock = threading.Lock()

    @classmethod
    def from_file(cls, path: Union[str, Path]) -> "MockBackend":
        spec = json.loads(Path(path).read_text("utf-8"))
        return cls(
            rules=[tuple(rule) for rule in spec.get("rules", [])],
            default_response=spec.get("default", ""),
            embed_dim=int(spec.get("embed_dim", 64)),
        )

    def chat(self, system_text: str, user_text: str, config: ModelConfig) -> str:
        with self._lock:
            self.chat_calls += 1
        for substring, response in self.rules:
            if substring in user_text:
                return response
        return self.default_response

    def embed(self, texts: Sequence[str], config: ModelConfig) -> list:
        with self._lock:
            self.embed_calls += 1
        out = []
        for text in texts:
            seed = int.from_bytes(
                hashlib.sha256(text.encode("utf-8")).digest()[:8], "big"
            )
            rng = np.random.default_rng(seed)
            out.append(rng.standard_normal(self.embed_dim).tolist())
        return out


class HttpBackend:
    """OpenAI-compatible HTTP client with exponential backoff and jitter.

    HTTP 429 and 5xx responses are retried up to ``max_attempts``; other
    4xx responses fail immediately. The API key is read from the
    environment variable named in the config and never logged.
    """

    def __init__(self, config: ModelConfig, session: Optional[requests.Session] = None):
        self.base_url = config.endpoint.rstrip("/")
        self._session = session or requests.Session()
        self._sleep = time.sleep

    def _headers(self, config: ModelConfig) -> dict:
        headers = {"Content-Type": "application/json"}
        api_key = os.environ.get(config.api_key_env, "")
        if api_key:
            headers["Authorization"] = f"Bearer {api_key}"
        return headers

    def _post(self, path: str, body: dict, config: ModelConfig) -> dict:
        url = f"{self.base_url}{path}"
        last_error = "no attempt made"
        for attempt in range(config.max_attempts):
            if attempt:
                delay = config.backoff_base * (2 ** (attempt - 1))
                self._sleep(delay * (1.0 + random.random() * 0.25))
            if config.trace:
                log.debug("POST %s body=%s", url, json.dumps(body, ensure_ascii=False))
            try:
                response = self._session.post(
                    url, json=body, headers=self._headers(config), timeout=config.timeout
                )
            except requests.RequestException as err:
                last_error = f"transport failure: {err}"
                continue
            if config.trace:
                log.debug("POST %s -> %s %s", url, response.status_code, response.text)
            if response.status_code == 200:
                try:
                    return response.json()
                except ValueError as err:
                    last_error = f"non-JSON response body: {err}"
                    continue
            if response.status_code in _RETRYABLE_STATUS:
                last_error = f"HTTP {response.status_code}"
                continue
            raise TransportError(f"HTTP {response.status_code}: {response.text[:500]}")
        raise TransportError(f"gave up after {config.max_attempts} attempts: {last_error}")

    def chat(self, system_text: str, user_text: str, config: ModelConfig) -> str:
        body = {
            "model": config.model_id,
            "messages": [
                {"role": "system", "content": system_text},
                {"role": "user", "content": user_text},
            ],
            "temperature": config.temperature,
            "max_tokens": config.max_tokens,
        }
        payload = self._post("/chat/completions", body, config)
        try:
            return payload["choices"][0]["message"]["content"] or ""
        except (KeyError, IndexError, TypeError) as err:
            raise TransportError(f"malformed completion payload: {err}") from err

    def embed(self, texts: Sequence[str], config: ModelConfig) -> list:
        body = {"model": config.model_id, "input": list(texts)}
        payload = self._post("/embeddings", body, config)
        try:
            rows = sorted(payload["data"], key=lambda item: item["index"])
            return [row["embedding"] for row in rows]
        except (KeyError, TypeError) as err:
            raise TransportError(f"malformed embedding payload: {err}") from err


def backend_for(config: ModelConfig):
    """Pick a backend from the endpoint scheme (``mock://`` or HTTP)."""
    if config.endpoint.startswith("mock://"):
        rules_path = config.endpoint[len("mock://"):]
        if rules_path:
            return MockBackend.from_file(rules_path)
        return MockBackend()
    return HttpBackend(config)


# ---------------------------------------------------------------------------
# Classification

def classify_one(
    instance: ReviewInstance,
    prompt_config: PromptConfig,
    model_config: ModelConfig,
    backend,
    cache: Optional[ResponseCache] = None,
) -> Prediction:
    """Classify a single instance, consulting the cache before the network.

    Responses that fail label parsing are re-requested up to
    ``max_attempts`` and then recorded as an error-marked prediction rather
    than raised; only parseable responses enter the cache.
    """
    rendered = render_prompt(instance, prompt_config)
    key = ResponseCache.chat_key(
        model_config.model_id,
        rendered.system_text,
        rendered.user_text,
        model_config.temperature,
    )
    if cache is not None:
        cached = cache.get(key)
        if cached is not None:
            return _prediction_from_response(
                instance.id, cached, model_config, rendered, latency=0.0, from_cache=True
            )

    last_raw = ""
    last_error = "empty response"
    for _ in range(model_config.max_attempts):
        started = time.perf_counter()
        raw = backend.chat(rendered.system_text, rendered.user_text, model_config)
        latency = time.perf_counter() - started
        try:
            label = parse_label_response(raw)
        except PromptError as err:
            last_raw = raw
            last_error = err.__class__.__name__
            continue
        if cache is not None:
            cache.put(key, raw)
        return Prediction(
            instance_id=instance.id,
            label=label,
            raw_response=raw,
            model_id=model_config.model_id,
            prompt_fingerprint=rendered.fingerprint,
            latency=latency,
        )
    return Prediction(
        instance_id=instance.id,
        label=ERROR_LABEL,
        raw_response=last_raw,
        model_id=model_config.model_id,
        prompt_fingerprint=rendered.fingerprint,
        error=last_error,
    )


def _prediction_from_response(
    instance_id: str,
    raw: str,
    model_config: ModelConfig,
    rendered: RenderedPrompt,
    latency: float,
    from_cache: bool,
) -> Prediction:
    try:
        label = parse_label_response(raw)
        error = ""
    except PromptError as err:
        label = ERROR_LABEL
        error = err.__class__.__name__
    return Prediction(
        instance_id=instance_id,
        label=label,
        raw_response=raw,
        model_id=model_config.model_id,
        prompt_fingerprint=rendered.fingerprint,
        latency=latency,
        from_cache=from_cache,
        error=error,
    )


class _Checkpoint:
    """Append-only JSONL progress log; one line per completed instance."""

    def __init__(self, path: Optional[Union[str, Path]]):
        self._path = Path(path) if path is not None else None
        self._lock = threading.Lock()
        self._fh: Optional[IO] = None
        self.completed: dict = {}
        if self._path is not None and self._path.exists():
            self._replay()
        if self._path is not None:
            self._path.parent.mkdir(parents=True, exist_ok=True)
            self._fh = open(self._path, "a", encoding="utf-8")

    def _replay(self) -> None:
        lines = self._path.read_text("utf-8").splitlines()
        for idx, line in enumerate(lines):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
                prediction = Prediction(
                    instance_id=record["id"],
                    label=record["label"],
                    raw_response=record["raw_response"],
                    model_id=record["model_id"],
                    prompt_fingerprint=record["prompt_fingerprint"],
                    error=record.get("error", ""),
                )
            except (json.JSONDecodeError, KeyError, TypeError) as err:
                if idx == len(lines) - 1:
                    # torn final line from a crash mid-write; redo that item
                    log.warning("checkpoint %s: dropping torn final line", self._path)
                    continue
                raise CheckpointCorrupt(self._path, f"line {idx + 1}: {err}") from err
            self.completed[prediction.instance_id] = prediction

    def record(self, prediction: Prediction) -> None:
        with self._lock:
            self.completed[prediction.instance_id] = prediction
            if self._fh is not None:
                self._fh.write(json.dumps(_stable_record(prediction), ensure_ascii=False))
                self._fh.write("\n")
                self._fh.flush()

    def close(self) -> None:
        with self._lock:
            if self._fh is not None:
                self._fh.close()
                self._fh = None


def _stable_record(prediction: Prediction) -> dict:
    # volatile fields (latency, from_cache) stay out so artifacts are
    # byte-identical across reruns and parallelism settings
    record = {
        "id": prediction.instance_id,
        "label": prediction.label,
        "raw_response": prediction.raw_response,
        "model_id": prediction.model_id,
        "prompt_fingerprint": prediction.prompt_fingerprint,
    }
    if prediction.error:
        record["error"] = prediction.error
    return record


def classify_batch(
    dataset: Dataset,
    prompt_config: PromptConfig,
    model_config: ModelConfig,
    backend,
    parallelism: int = 1,
    checkpoint_path: Optional[Union[str, Path]] = None,
    cache: Optional[ResponseCache] = None,
) -> list:
    """Classify every instance, one prediction each, in dataset order.

    Progress lands in the checkpoint after every completed instance; a
    rerun with the same checkpoint never re-requests completed ids. Output
    order is the input order regardless of completion order.
    """
    if parallelism < 1:
        raise ValueError("parallelism must be at least 1")
    checkpoint = _Checkpoint(checkpoint_path)
    try:
        pending = [inst for inst in dataset if inst.id not in checkpoint.completed]

        def work(instance: ReviewInstance) -> None:
            prediction = classify_one(instance, prompt_config, model_config, backend, cache)
            checkpoint.record(prediction)

        if pending:
            if parallelism == 1:
                for inst in pending:
                    work(inst)
            else:
                with ThreadPoolExecutor(max_workers=parallelism) as pool:
                    futures = [pool.submit(work, inst) for inst in pending]
                    done, _ = wait(futures, return_when=FIRST_EXCEPTION)
                    for future in done:
                        future.result()  # surface the first failure
        return [checkpoint.completed[inst.id] for inst in dataset]
    finally:
        checkpoint.close()


def write_predictions(predictions: Sequence[Prediction], sink: Union[str, Path, IO]) -> int:
    """Write predictions as deterministic JSON lines (stable fields only)."""
    if isinstance(sink, (str, Path)):
        with open(sink, "w", encoding="utf-8") as fh:
            return write_predictions(predictions, fh)
    for prediction in predictions:
        sink.write(json.dumps(_stable_record(prediction), ensure_ascii=False))
        sink.write("\n")
    return len(predictions)


def read_predictions(source: Union[str, Path]) -> list:
    predictions = []
    with open(source, "r", encoding="utf-8") as fh:
        for line in fh:
            if not line.strip():
                continue
            record = json.loads(line)
            predictions.append(
                Prediction(
                    instance_id=record["id"],
                    label=record["label"],
                    raw_response=record.get("raw_response", ""),
                    model_id=record.get("model_id", ""),
                    prompt_fingerprint=record.get("prompt_fingerprint", ""),
                    error=record.get("error", ""),
                )
            )
    return predictions


# ---------------------------------------------------------------------------
# Embeddings

def embed_texts(
    texts: Sequence[str],
    model_config: ModelConfig,
    backend,
    cache: Optional[ResponseCache] = None,
    batch_size: int = 128,
) -> np.ndarray:
    """Embed texts into unit-normalized vectors, one per input text.

    Responses are cached like chat calls. Ragged vector lengths raise
    :class:`DimensionMismatch`.
    """
    if len(texts) == 0:
        raise ValueError("texts must be non-empty")
    vectors: list = [None] * len(texts)
    missing: list = []
    for i, text in enumerate(texts):
        if cache is not None:
            hit = cache.get(ResponseCache.embed_key(model_config.model_id, text))
            if hit is not None:
                vectors[i] = hit
                continue
        missing.append(i)

    for start in range(0, len(missing), batch_size):
        chunk = missing[start : start + batch_size]
        fetched = backend.embed([texts[i] for i in chunk], model_config)
        if len(fetched) != len(chunk):
            raise DimensionMismatch(
                f"backend returned {len(fetched)} vectors for {len(chunk)} texts"
            )
        for i, vector in zip(chunk, fetched):
            vectors[i] = list(vector)
            if cache is not None:
                cache.put(ResponseCache.embed_key(model_config.model_id, texts[i]), vectors[i])

    dims = {len(v) for v in vectors}
    if len(dims) != 1:
        raise DimensionMismatch(f"ragged embedding dimensions: {sorted(dims)}")
    matrix = np.asarray(vectors, dtype=np.float64)
    norms = np.linalg.norm(matrix, axis=1)
    if np.any(norms < 1e-12):
        raise DimensionMismatch("zero-norm embedding cannot be normalized")
    return matrix / norms[:, None]
