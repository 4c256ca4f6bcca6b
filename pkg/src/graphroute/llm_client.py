"""OpenAI-compatible chat-completions backend."""
from __future__ import annotations

import logging
import os
import random
import threading
import time
from dataclasses import dataclass

import httpx

from .executor import BackendError, TextBackend

log = logging.getLogger(__name__)


class RateLimitError(BackendError):
    pass


class ServerError(BackendError):
    pass


class ProtocolError(BackendError):
    pass


class BackendTimeoutError(BackendError):
    pass


class AuthError(BackendError):
    pass


class BackendConnectionError(BackendError):
    pass


@dataclass(frozen=True)
class BackendConfig:
    base_url: str
    model_name: str
    api_key_env: str = "OPENAI_API_KEY"
    temperature: float = 0.0
    max_retries: int = 3
    timeout: float = 30.0
    max_tokens: int = 256
    backoff_base: float = 1.0
    backoff_factor: float = 2.0
    jitter: float = 0.1  # fraction of the nominal delay
    max_concurrency: int = 8

    def __post_init__(self):
        if self.max_retries < 0:
            raise ValueError("max_retries must be >= 0")
        if self.timeout <= 0:
            raise ValueError("timeout must be > 0")
        if self.temperature < 0:
            raise ValueError("temperature must be >= 0")


def backoff_delay(attempt: int, cfg: BackendConfig, rng: random.Random | None = None) -> float:
    """Delay before retry number ``attempt`` (0-based): base * factor**attempt,
    plus up to ``jitter`` of that amount."""
    nominal = cfg.backoff_base * cfg.backoff_factor ** attempt
    r = (rng or random).random()
    return nominal * (1.0 + cfg.jitter * r)


class HttpBackend(TextBackend):
    """Thread-safe client; keeps running token totals in ``usage``."""

    def __init__(self, config: BackendConfig, *, transport: httpx.BaseTransport | None = None,
                 sleep=time.sleep):
        self.config = config
        self._client = httpx.Client(timeout=config.timeout, transport=transport)
        self._sleep = sleep
        self._gate = threading.BoundedSemaphore(config.max_concurrency)
        self._lock = threading.Lock()
        self.usage = {"prompt_tokens": 0, "completion_tokens": 0, "total_tokens": 0}
        self.attempts = 0

    def _headers(self) -> dict:
        key = os.environ.get(self.config.api_key_env)
        if not key:
            raise AuthError(f"environment variable {self.config.api_key_env} is not set")
        return {"Authorization": f"Bearer {key}"}

    def _url(self, path: str) -> str:
        return self.config.base_url.rstrip("/") + path

    def _send(self, method: str, path: str, body: dict | None = None) -> httpx.Response:
        cfg = self.config
        headers = self._headers()
        for attempt in range(cfg.max_retries + 1):
            with self._lock:
                self.attempts += 1
            try:
                with self._gate:
                    resp = self._client.request(method, self._url(path), json=body, headers=headers)
            except httpx.TimeoutException:
                raise BackendTimeoutError(f"{method} {path} timed out after {cfg.timeout}s") from None
            except httpx.TransportError as exc:
                raise BackendConnectionError(f"cannot reach {cfg.base_url}: {type(exc).__name__}") from None
            status = resp.status_code
            if status in (401, 403):
                raise AuthError(f"{method} {path} rejected credentials (HTTP {status})")
            if status == 429 or status >= 500:
                if attempt < cfg.max_retries:
                    delay = backoff_delay(attempt, cfg)
                    log.info("HTTP %d from %s, retry %d in %.2fs", status, path, attempt + 1, delay)
                    self._sleep(delay)
                    continue
                cls = RateLimitError if status == 429 else ServerError
                raise cls(f"{method} {path} failed with HTTP {status} after {attempt + 1} attempts")
            if status >= 400:
                raise ProtocolError(f"{method} {path} returned HTTP {status}")
            return resp
        raise AssertionError("unreachable")

    def chat(self, messages: list[dict]) -> str:
        cfg = self.config
        body = {
            "model": cfg.model_name,
            "messages": messages,
            "temperature": cfg.temperature,
            "max_tokens": cfg.max_tokens,
        }
        resp = self._send("POST", "/chat/completions", body)
        try:
            data = resp.json()
            content = data["choices"][0]["message"]["content"]
        except (ValueError, KeyError, IndexError, TypeError):
            raise ProtocolError("malformed chat-completions response body") from None
        if not isinstance(content, str):
            raise ProtocolError("message content is not text")
        usage = data.get("usage") or {}
        with self._lock:
            for k in self.usage:
                v = usage.get(k)
                if isinstance(v, int):
                    self.usage[k] += v
        return content

    def complete(self, prompt: str, *, seed: int = 0, max_tokens: int = 256) -> str:
        return self.chat([{"role": "user", "content": prompt}])

    def healthcheck(self) -> bool:
        self._send("GET", "/models")
        return True

    def close(self) -> None:
        self._client.close()


def complete(config: BackendConfig, messages: list[dict], **kwargs) -> str:
    backend = HttpBackend(config, **kwargs)
    try:
        return backend.chat(messages)
    finally:
        backend.close()


def healthcheck(config: BackendConfig, **kwargs) -> bool:
    backend = HttpBackend(config, **kwargs)
    try:
        return backend.healthcheck()
    finally:
        backend.close()
