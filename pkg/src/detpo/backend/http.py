"""Chat-completions style HTTP transport with base64 image parts."""

from __future__ import annotations

import base64
import os
import time
from typing import Any, Callable

import httpx

from ..annotate import draw_boxes, scaled_size
from ..dataset import ImageRecord
from .base import (
    AuthenticationError,
    Backend,
    BackendDescriptor,
    BackendError,
    ChatRequest,
    ChatResponse,
    PayloadTooLargeError,
    TransientBackendError,
    Usage,
)


class ConfigError(ValueError):
    pass


class HTTPChatBackend(Backend):
    def __init__(
        self,
        descriptor: BackendDescriptor,
        client: httpx.Client | None = None,
        sleep: Callable[[float], None] = time.sleep,
        env: dict[str, str] | None = None,
    ):
        super().__init__(descriptor, sleep=sleep)
        if not descriptor.endpoint:
            raise ConfigError("http backend needs an endpoint")
        env = os.environ if env is None else env
        self.api_key = None
        if descriptor.api_key_env:
            self.api_key = env.get(descriptor.api_key_env)
            if not self.api_key:
                raise ConfigError(f"environment variable {descriptor.api_key_env} is not set")
        self.client = client or httpx.Client(timeout=descriptor.timeout)

    def sent_size(self, image: ImageRecord) -> tuple[int, int]:
        return scaled_size(image.width, image.height, self.descriptor.max_image_side)

    def _image_url(self, part) -> str:
        data = draw_boxes(
            part.image.read_bytes(),
            part.boxes,
            fmt="JPEG",
            quality=self.descriptor.jpeg_quality,
            max_side=self.descriptor.max_image_side,
        )
        return "data:image/jpeg;base64," + base64.b64encode(data).decode("ascii")

    def payload(self, req: ChatRequest) -> dict[str, Any]:
        content = []
        for part in req.parts:
            if isinstance(part, str):
                content.append({"type": "text", "text": part})
            else:
                content.append({"type": "image_url", "image_url": {"url": self._image_url(part)}})
        body: dict[str, Any] = {
            "model": self.descriptor.model,
            "messages": [
                {"role": "system", "content": req.system},
                {"role": "user", "content": content},
            ],
            "temperature": req.temperature,
            "max_tokens": req.max_tokens,
        }
        if req.logprobs:
            body["logprobs"] = True
            body["top_logprobs"] = req.top_logprobs
        return body

    def _send(self, req: ChatRequest) -> ChatResponse:
        headers = {"Content-Type": "application/json"}
        if self.api_key:
            headers["Authorization"] = f"Bearer {self.api_key}"
        url = self.descriptor.endpoint + "/chat/completions"
        t0 = time.monotonic()
        try:
            r = self.client.post(url, json=self.payload(req), headers=headers)
        except httpx.TransportError as exc:
            raise TransientBackendError(f"transport error: {exc}") from exc
        latency = time.monotonic() - t0
        if r.status_code in (401, 403):
            raise AuthenticationError(f"authentication failed ({r.status_code})")
        if r.status_code == 413:
            raise PayloadTooLargeError("request payload too large")
        if r.status_code == 429 or r.status_code >= 500:
            retry_after = None
            try:
                retry_after = float(r.headers.get("retry-after", ""))
            except ValueError:
                pass
            raise TransientBackendError(f"HTTP {r.status_code}", retry_after)
        if r.status_code >= 400:
            raise BackendError(f"HTTP {r.status_code}: {r.text[:200]}")
        try:
            data = r.json()
            choice = data["choices"][0]
            text = choice["message"].get("content") or ""
        except (ValueError, KeyError, IndexError, TypeError) as exc:
            raise BackendError(f"malformed completion response: {exc}") from exc
        usage = data.get("usage") or {}
        return ChatResponse(
            text,
            _first_token_logprobs(choice),
            Usage(int(usage.get("prompt_tokens", 0) or 0), int(usage.get("completion_tokens", 0) or 0)),
            latency,
        )


def _first_token_logprobs(choice: dict[str, Any]) -> dict[str, float] | None:
    lp = choice.get("logprobs")
    if not lp:
        return None
    content = lp.get("content") or []
    if not content:
        return None
    first = content[0]
    table: dict[str, float] = {}
    for entry in first.get("top_logprobs") or [{"token": first.get("token"), "logprob": first.get("logprob")}]:
        tok, value = entry.get("token"), entry.get("logprob")
        if tok is None or value is None:
            continue
        # the same surface token can appear twice with different ids
        table[tok] = max(table.get(tok, float("-inf")), float(value))
    return table or None
