"""Send prompt bundles to a chat-completions endpoint, with record/replay fixtures.

In ``replay`` mode no HTTP client is created at all; answers come from
``<fixture_dir>/<sha256>.json`` where the hash covers the bundle's system
text, user text and image bytes.
"""

from __future__ import annotations

import base64
import hashlib
import json
import logging
import os
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Optional

import httpx

from ctxshap.errors import (
    AuthError,
    FixtureMissError,
    InvalidValueError,
    MissingPriceError,
    RateLimitError,
    TransportError,
    UpstreamError,
)
from ctxshap.prompt import PromptBundle
from ctxshap.raster import svg_to_png

log = logging.getLogger(__name__)

MODES = ("live", "record", "replay")
DEFAULT_KEY_ENV = "CTXSHAP_API_KEY"


@dataclass(frozen=True)
class Usage:
    prompt_tokens: int
    completion_tokens: int


@dataclass(frozen=True)
class GatewayConfig:
    base_url: str = "https://api.openai.com/v1"
    model_name: str = "gpt-4o"
    api_key_env: str = DEFAULT_KEY_ENV
    timeout_s: float = 60.0
    max_retries: int = 3
    mode: str = "live"
    fixture_dir: Optional[Path] = None
    raster: bool = True
    backoff_s: float = 1.0
    price_table: Optional[Mapping[str, float]] = None

    def __post_init__(self):
        if self.timeout_s <= 0:
            raise InvalidValueError("timeout_s must be positive")
        if self.max_retries < 0:
            raise InvalidValueError("max_retries must be >= 0")
        if self.mode not in MODES:
            raise InvalidValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.fixture_dir is not None:
            object.__setattr__(self, "fixture_dir", Path(self.fixture_dir))
        if self.mode in ("record", "replay") and self.fixture_dir is None:
            raise InvalidValueError(f"{self.mode} mode needs a fixture_dir")
        if self.mode == "replay" and not self.fixture_dir.is_dir():
            raise InvalidValueError(f"fixture_dir {self.fixture_dir} does not exist")


@dataclass(frozen=True)
class LlmResult:
    raw_text: str
    latency_s: float
    usage: Optional[Usage] = None
    estimated_cost: Optional[float] = None
    attempts: int = 1
    key: str = field(default="", compare=False)

    def telemetry(self) -> dict:
        return {
            "latency_s": self.latency_s,
            "usage": None if self.usage is None else vars(self.usage).copy(),
            "estimated_cost": self.estimated_cost,
            "attempts": self.attempts,
        }


def estimate_cost(usage: Optional[Usage], price_table: Optional[Mapping[str, float]]) -> float:
    """Cost from per-1K-token prices ``{"input_per_1k": .., "output_per_1k": ..}``."""
    if usage is None:
        raise MissingPriceError("no token usage reported; cannot estimate cost")
    if not price_table or "input_per_1k" not in price_table or "output_per_1k" not in price_table:
        raise MissingPriceError("price table needs input_per_1k and output_per_1k")
    return (
        usage.prompt_tokens / 1000 * float(price_table["input_per_1k"])
        + usage.completion_tokens / 1000 * float(price_table["output_per_1k"])
    )


def bundle_key(bundle: PromptBundle) -> str:
    """SHA-256 over the length-prefixed system text, user text and images."""
    h = hashlib.sha256()

    def put(tag: bytes, data: bytes):
        h.update(tag + b":" + str(len(data)).encode("ascii") + b":")
        h.update(data)

    put(b"system", bundle.system_text.encode("utf-8"))
    put(b"user", bundle.user_text.encode("utf-8"))
    for media_type, data in bundle.images:
        put(b"image/" + media_type.encode("ascii"), data)
    return h.hexdigest()


def _image_parts(bundle: PromptBundle, raster: bool) -> list[dict]:
    parts = []
    for media_type, data in bundle.images:
        if raster and media_type == "image/svg+xml":
            media_type, data = "image/png", svg_to_png(data)
        url = f"data:{media_type};base64,{base64.b64encode(data).decode('ascii')}"
        parts.append({"type": "image_url", "image_url": {"url": url}})
    return parts


def build_request(bundle: PromptBundle, cfg: GatewayConfig) -> dict:
    return {
        "model": cfg.model_name,
        "messages": [
            {"role": "system", "content": bundle.system_text},
            {
                "role": "user",
                "content": [{"type": "text", "text": bundle.user_text}] + _image_parts(bundle, cfg.raster),
            },
        ],
    }


def _fixture_path(cfg: GatewayConfig, key: str) -> Path:
    return cfg.fixture_dir / f"{key}.json"


def _usage_from(doc) -> Optional[Usage]:
    if not isinstance(doc, dict):
        return None
    try:
        return Usage(int(doc["prompt_tokens"]), int(doc["completion_tokens"]))
    except (KeyError, TypeError, ValueError):
        return None


def _cost(usage: Optional[Usage], cfg: GatewayConfig) -> Optional[float]:
    if cfg.price_table is None or usage is None:
        return None
    return estimate_cost(usage, cfg.price_table)


def _redact(text: str, secret: str) -> str:
    return text.replace(secret, "[redacted]") if secret else text


def _replay(bundle: PromptBundle, cfg: GatewayConfig, key: str) -> LlmResult:
    path = _fixture_path(cfg, key)
    if not path.is_file():
        raise FixtureMissError(key)
    doc = json.loads(path.read_text(encoding="utf-8"))
    usage = _usage_from(doc.get("usage"))
    return LlmResult(doc["raw_text"], 0.0, usage, _cost(usage, cfg), attempts=0, key=key)


def _post(client: httpx.Client, cfg: GatewayConfig, body: dict, api_key: str) -> tuple[dict, int]:
    url = cfg.base_url.rstrip("/") + "/chat/completions"
    headers = {"Authorization": f"Bearer {api_key}", "Content-Type": "application/json"}
    attempts = 0
    while True:
        attempts += 1
        try:
            resp = client.post(url, json=body, headers=headers)
        except httpx.TimeoutException:
            raise TransportError(f"request to {url} timed out after {cfg.timeout_s}s") from None
        except httpx.TransportError as exc:
            raise TransportError(_redact(f"could not reach {url}: {type(exc).__name__}", api_key)) from None
        status = resp.status_code
        if status == 429:
            if attempts > cfg.max_retries:
                raise RateLimitError(f"rate limited; gave up after {attempts} attempts")
            delay = cfg.backoff_s * 2 ** (attempts - 1)
            log.warning("rate limited (attempt %d), retrying in %.2fs", attempts, delay)
            time.sleep(delay)
            continue
        snippet = _redact(resp.text[:200], api_key)
        if status in (401, 403):
            raise AuthError(f"endpoint rejected the API key from ${cfg.api_key_env} (HTTP {status})")
        if status >= 500:
            raise UpstreamError(f"upstream error HTTP {status}: {snippet}")
        if status >= 400:
            raise UpstreamError(f"request rejected with HTTP {status}: {snippet}")
        try:
            return resp.json(), attempts
        except ValueError:
            raise UpstreamError(f"response is not JSON: {snippet}") from None


def send(bundle: PromptBundle, cfg: GatewayConfig, client: Optional[httpx.Client] = None) -> LlmResult:
    key = bundle_key(bundle)
    if cfg.mode == "replay":
        return _replay(bundle, cfg, key)

    api_key = os.environ.get(cfg.api_key_env, "")
    if not api_key:
        raise AuthError(f"environment variable {cfg.api_key_env} is not set")
    body = build_request(bundle, cfg)

    owns_client = client is None
    if owns_client:
        client = httpx.Client(timeout=cfg.timeout_s)
    start = time.perf_counter()
    try:
        doc, attempts = _post(client, cfg, body, api_key)
    finally:
        if owns_client:
            client.close()
    latency = time.perf_counter() - start

    try:
        text = doc["choices"][0]["message"]["content"]
    except (KeyError, IndexError, TypeError):
        raise UpstreamError("response has no choices[0].message.content") from None
    if not isinstance(text, str):
        raise UpstreamError("choices[0].message.content is not text")
    usage = _usage_from(doc.get("usage"))
    log.info("completion received in %.2fs after %d attempt(s)", latency, attempts)

    if cfg.mode == "record":
        cfg.fixture_dir.mkdir(parents=True, exist_ok=True)
        fixture = {
            "key": key,
            "model": cfg.model_name,
            "raw_text": text,
            "usage": None if usage is None else vars(usage).copy(),
        }
        _fixture_path(cfg, key).write_text(json.dumps(fixture, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return LlmResult(text, latency, usage, _cost(usage, cfg), attempts, key)
