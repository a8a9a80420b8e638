"""Inference backends: a chat-completions HTTP client, a digest-keyed replay
mock, a recorder that produces replay fixtures, and bounded batch execution.
"""

from __future__ import annotations

import base64
import configparser
import hashlib
import io
import json
import logging
import os
import random
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Sequence, Union

import httpx
import numpy as np
from PIL import Image

logger = logging.getLogger(__name__)

ImageInput = Union[str, Path, np.ndarray]


class BackendError(RuntimeError):
    """A failed inference call. Carries the sample id of the originating request."""

    def __init__(self, message: str, sample_id: str = "", status: int | None = None):
        super().__init__(f"[{sample_id}] {message}" if sample_id else message)
        self.sample_id = sample_id
        self.status = status


@dataclass(frozen=True)
class ChatRequest:
    system: str
    user: str
    images: tuple[ImageInput, ...] = ()
    max_output_tokens: int = 256
    temperature: float = 0.0
    # Bookkeeping only; never sent over the wire or hashed.
    sample_id: str = field(default="", compare=False)

    def __post_init__(self) -> None:
        object.__setattr__(self, "images", tuple(self.images))
        if not self.user and not self.images:
            raise ValueError("request needs user text or images")
        if self.max_output_tokens <= 0:
            raise ValueError("max_output_tokens must be positive")
        if self.temperature < 0:
            raise ValueError("temperature must be non-negative")


# -- image helpers ---------------------------------------------------------------


def load_rgb(image: ImageInput) -> np.ndarray:
    if isinstance(image, np.ndarray):
        arr = image
    else:
        with Image.open(image) as im:
            arr = np.asarray(im.convert("RGB"))
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise ValueError(f"expected an HxWx3 image, got shape {arr.shape}")
    return np.ascontiguousarray(arr, dtype=np.uint8)


def image_digest(image: ImageInput) -> str:
    """Digest of decoded pixels, so equal images hash equally whatever their encoding."""
    arr = load_rgb(image)
    h = hashlib.sha256(f"{arr.shape[0]}x{arr.shape[1]}x3:".encode())
    h.update(arr.tobytes())
    return h.hexdigest()


def request_digest(req: ChatRequest) -> str:
    payload = {
        "system": req.system,
        "user": req.user,
        "images": [image_digest(im) for im in req.images],
    }
    blob = json.dumps(payload, sort_keys=True, ensure_ascii=False, separators=(",", ":"))
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()


def _image_data_url(image: ImageInput) -> str:
    if isinstance(image, np.ndarray):
        buf = io.BytesIO()
        Image.fromarray(load_rgb(image)).save(buf, format="PNG")
        data, mime = buf.getvalue(), "image/png"
    else:
        path = Path(image)
        data = path.read_bytes()
        mime = "image/jpeg" if path.suffix.lower() in (".jpg", ".jpeg") else "image/png"
    return f"data:{mime};base64,{base64.b64encode(data).decode('ascii')}"


# -- backends --------------------------------------------------------------------


class InferenceBackend:
    """Anything with ``complete(request) -> str``."""

    def complete(self, req: ChatRequest) -> str:  # pragma: no cover - interface
        raise NotImplementedError


def complete(backend: InferenceBackend, req: ChatRequest) -> str:
    return backend.complete(req)


class EndpointBackend(InferenceBackend):
    """Vision-chat completions over the OpenAI-compatible ``/chat/completions`` shape.

    Retries transport errors, 429 and 5xx with full-jitter exponential backoff.
    """

    def __init__(
        self,
        base_url: str,
        model_name: str,
        api_key_ref: str | None = None,
        timeout_s: float = 60.0,
        max_retries: int = 3,
        backoff_base_s: float = 0.5,
        seed: int | None = None,
        sleep: Callable[[float], None] = time.sleep,
    ):
        if timeout_s <= 0:
            raise ValueError("timeout_s must be positive")
        if max_retries < 0:
            raise ValueError("max_retries must be non-negative")
        self.url = base_url.rstrip("/") + "/chat/completions"
        self.model_name = model_name
        self.api_key_ref = api_key_ref
        self.timeout_s = timeout_s
        self.max_retries = max_retries
        self.backoff_base_s = backoff_base_s
        self._sleep = sleep
        self._rng = random.Random(seed)
        self._rng_lock = threading.Lock()
        self._client = httpx.Client(timeout=timeout_s)

    def close(self) -> None:
        self._client.close()

    def _headers(self) -> dict[str, str]:
        headers = {"Content-Type": "application/json"}
        if self.api_key_ref:
            key = os.environ.get(self.api_key_ref)
            if key:
                headers["Authorization"] = f"Bearer {key}"
        return headers

    def payload(self, req: ChatRequest) -> dict[str, Any]:
        # Frames precede text, mirroring the [video, dialogue, query] input order.
        content: list[dict[str, Any]] = [
            {"type": "image_url", "image_url": {"url": _image_data_url(im)}} for im in req.images
        ]
        if req.user:
            content.append({"type": "text", "text": req.user})
        messages = []
        if req.system:
            messages.append({"role": "system", "content": req.system})
        messages.append({"role": "user", "content": content})
        return {
            "model": self.model_name,
            "messages": messages,
            "max_tokens": req.max_output_tokens,
            "temperature": req.temperature,
        }

    def _backoff(self, attempt: int) -> float:
        with self._rng_lock:
            return self._rng.uniform(0.0, self.backoff_base_s * (2**attempt))

    def complete(self, req: ChatRequest) -> str:
        body = self.payload(req)
        last: BackendError | None = None
        for attempt in range(self.max_retries + 1):
            if attempt:
                self._sleep(self._backoff(attempt - 1))
            try:
                resp = self._client.post(self.url, json=body, headers=self._headers())
            except httpx.TransportError as exc:
                last = BackendError(f"transport error: {exc!r}", req.sample_id)
                continue
            if resp.status_code == 429 or resp.status_code >= 500:
                last = BackendError(f"HTTP {resp.status_code}", req.sample_id, resp.status_code)
                continue
            if not 200 <= resp.status_code < 300:
                raise BackendError(f"HTTP {resp.status_code}: {resp.text[:200]}", req.sample_id, resp.status_code)
            try:
                message = resp.json()["choices"][0]["message"]["content"]
            except (ValueError, KeyError, IndexError, TypeError) as exc:
                raise BackendError(f"malformed response: {exc!r}", req.sample_id) from exc
            if isinstance(message, list):
                message = "".join(part.get("text", "") for part in message if isinstance(part, dict))
            return message or ""
        assert last is not None
        raise BackendError(f"gave up after {self.max_retries + 1} attempts: {last}", req.sample_id, last.status)


class ReplayBackend(InferenceBackend):
    """Answers from a ``{request digest: response}`` fixture."""

    def __init__(self, fixture: str | Path | dict[str, str]):
        if isinstance(fixture, dict):
            self.table = dict(fixture)
        else:
            self.table = json.loads(Path(fixture).read_text(encoding="utf-8"))

    def complete(self, req: ChatRequest) -> str:
        key = request_digest(req)
        try:
            return self.table[key]
        except KeyError:
            raise BackendError(f"replay miss for digest {key[:12]}", req.sample_id) from None


class RecordingBackend(InferenceBackend):
    """Wraps another backend and remembers every answer under its request digest."""

    def __init__(self, inner: InferenceBackend):
        self.inner = inner
        self.table: dict[str, str] = {}
        self._lock = threading.Lock()

    def complete(self, req: ChatRequest) -> str:
        text = self.inner.complete(req)
        key = request_digest(req)
        with self._lock:
            self.table[key] = text
        return text

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.table, sort_keys=True, indent=1, ensure_ascii=False) + "\n", encoding="utf-8")


def run_batch(
    backend: InferenceBackend,
    requests: Sequence[ChatRequest],
    max_in_flight: int = 4,
) -> list[tuple[int, str | Exception]]:
    """Run every request with at most ``max_in_flight`` outstanding.

    Failures are returned in place of text; the batch never stops early.
    Results are sorted by request index.
    """
    if max_in_flight < 1:
        raise ValueError("max_in_flight must be >= 1")

    def one(i: int) -> tuple[int, str | Exception]:
        try:
            return i, backend.complete(requests[i])
        except Exception as exc:  # noqa: BLE001 - recorded per request
            return i, exc

    if max_in_flight == 1:
        return [one(i) for i in range(len(requests))]
    with ThreadPoolExecutor(max_workers=max_in_flight) as pool:
        results = list(pool.map(one, range(len(requests))))
    return sorted(results, key=lambda r: r[0])


# -- configuration -------------------------------------------------------------

DEFAULT_CONFIG = {
    "base_url": "http://localhost:8000/v1",
    "model_name": "",
    "api_key_env": "OPENAI_API_KEY",
    "timeout_s": "60",
    "max_retries": "3",
    "max_in_flight": "4",
    "seed": "0",
    "fixture": "",
}


def read_config(path: str | Path | None) -> dict[str, str]:
    """Read the ``[backend]`` section of an INI file over the defaults.

    Example::

        [backend]
        base_url = http://localhost:8000/v1
        model_name = qwen2.5-vl-7b
        api_key_env = OPENAI_API_KEY
        timeout_s = 60
        max_retries = 3
        max_in_flight = 4
    """
    cfg = dict(DEFAULT_CONFIG)
    if path is None:
        return cfg
    parser = configparser.ConfigParser()
    with open(path, encoding="utf-8") as fh:
        parser.read_file(fh)
    if parser.has_section("backend"):
        for key, value in parser.items("backend"):
            if key not in DEFAULT_CONFIG:
                raise ValueError(f"unknown backend config key: {key}")
            cfg[key] = value
    return cfg


def make_backend(kind: str, cfg: dict[str, str]) -> InferenceBackend:
    if kind == "endpoint":
        if not cfg.get("model_name"):
            raise ValueError("endpoint backend needs model_name")
        return EndpointBackend(
            cfg["base_url"],
            cfg["model_name"],
            cfg.get("api_key_env") or None,
            timeout_s=float(cfg["timeout_s"]),
            max_retries=int(cfg["max_retries"]),
            seed=int(cfg["seed"]),
        )
    if kind == "replay":
        if not cfg.get("fixture"):
            raise ValueError("replay backend needs a fixture path")
        return ReplayBackend(cfg["fixture"])
    if kind == "baseline":
        from mmsi_harness.baseline import BaselineBackend

        return BaselineBackend(seed=int(cfg["seed"]))
    raise ValueError(f"unknown backend kind: {kind}")
