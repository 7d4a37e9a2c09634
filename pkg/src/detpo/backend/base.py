"""Request/response types and the retrying, rate-limited backend base class."""

from __future__ import annotations

import hashlib
import json
import logging
import threading
import time
from dataclasses import dataclass, field
from typing import Callable, Literal, Union

from pydantic import BaseModel, Field, field_validator

from ..dataset import ImageRecord
from ..geometry import BoundingBox, CoordinateSpace

log = logging.getLogger(__name__)


class BackendError(RuntimeError):
    pass


class TransientBackendError(BackendError):
    def __init__(self, message: str, retry_after: float | None = None):
        super().__init__(message)
        self.retry_after = retry_after


class RetriesExhausted(BackendError):
    pass


class AuthenticationError(BackendError):
    pass


class PayloadTooLargeError(BackendError):
    pass


class CapabilityError(BackendError):
    pass


class LogprobsUnavailable(BackendError):
    pass


# --- configuration ---------------------------------------------------------


class RetryPolicy(BaseModel):
    max_retries: int = Field(3, ge=0)
    base_delay: float = Field(1.0, ge=0)
    max_delay: float = Field(30.0, ge=0)

    def delay(self, attempt: int, hint: float | None = None) -> float:
        d = min(self.max_delay, self.base_delay * (2**attempt))
        if hint is not None:
            d = max(d, min(hint, self.max_delay))
        return d


class CoordinateConvention(BaseModel):
    kind: Literal["pixel", "per-mille"] = "pixel"
    order: Literal["xyxy", "yxyx"] = "xyxy"

    def space(self, width: float, height: float) -> CoordinateSpace:
        if self.kind == "per-mille":
            return CoordinateSpace.per_mille(self.order)
        return CoordinateSpace.pixel(width, height, self.order)


class BackendDescriptor(BaseModel):
    type: Literal["http", "mock"] = "http"
    endpoint: str = ""
    model: str = ""
    api_key_env: str | None = None
    coordinates: CoordinateConvention = CoordinateConvention()
    supports_logprobs: bool = False
    retry: RetryPolicy = RetryPolicy()
    requests_per_second: float | None = Field(None, gt=0)
    max_in_flight: int = Field(4, ge=1)
    timeout: float = Field(120.0, gt=0)
    jpeg_quality: int = Field(90, ge=1, le=100)
    max_image_side: int | None = Field(1536, ge=16)
    detect_temperature: float = Field(0.0, ge=0)
    refine_temperature: float = Field(0.7, ge=0)
    max_tokens: int = Field(2048, ge=1)
    script: str | None = None

    @field_validator("endpoint")
    @classmethod
    def _strip(cls, v: str) -> str:
        return v.rstrip("/")


# --- requests --------------------------------------------------------------


@dataclass(frozen=True)
class ImagePart:
    """An image plus the boxes to draw on it; rendering is deferred to the transport."""

    image: ImageRecord
    boxes: tuple[tuple[BoundingBox, str], ...] = ()

    def summary(self) -> str:
        marks = ";".join(f"{c}:{b.x1:.1f},{b.y1:.1f},{b.x2:.1f},{b.y2:.1f}" for b, c in self.boxes)
        return f"image:{self.image.image_id}[{marks}]"


Part = Union[str, ImagePart]


@dataclass(frozen=True)
class ChatRequest:
    system: str
    parts: tuple[Part, ...]
    temperature: float = 0.0
    max_tokens: int = 2048
    logprobs: bool = False
    top_logprobs: int = 20
    kind: str = "chat"

    def __post_init__(self) -> None:
        if not self.parts:
            raise ValueError("a chat request needs at least one content part")
        if self.temperature < 0:
            raise ValueError("temperature must be >= 0")

    @property
    def text(self) -> str:
        return "\n".join(p for p in self.parts if isinstance(p, str))

    @property
    def images(self) -> list[ImagePart]:
        return [p for p in self.parts if isinstance(p, ImagePart)]

    def key(self) -> str:
        """Canonical content string; pixels are represented by image id and drawn boxes."""
        return json.dumps(
            {
                "system": self.system,
                "text": [p for p in self.parts if isinstance(p, str)],
                "images": [p.summary() for p in self.images],
            },
            sort_keys=True,
        )

    def content_hash(self) -> str:
        return hashlib.sha256(self.key().encode("utf-8")).hexdigest()[:16]


@dataclass(frozen=True)
class Usage:
    prompt_tokens: int = 0
    completion_tokens: int = 0

    def __post_init__(self) -> None:
        if self.prompt_tokens < 0 or self.completion_tokens < 0:
            raise ValueError("token counts must be non-negative")

    @property
    def total_tokens(self) -> int:
        return self.prompt_tokens + self.completion_tokens

    def __add__(self, other: "Usage") -> "Usage":
        return Usage(self.prompt_tokens + other.prompt_tokens, self.completion_tokens + other.completion_tokens)


@dataclass(frozen=True)
class ChatResponse:
    text: str
    logprobs: dict[str, float] | None = None
    usage: Usage = field(default_factory=Usage)
    latency: float = 0.0

    def response_hash(self) -> str:
        return hashlib.sha256(self.text.encode("utf-8")).hexdigest()[:16]


# --- rate limiting ---------------------------------------------------------


class RateLimiter:
    """Spaces request starts at least ``1 / rate`` seconds apart. Thread-safe."""

    def __init__(
        self,
        rate: float | None,
        clock: Callable[[], float] = time.monotonic,
        sleep: Callable[[float], None] = time.sleep,
    ):
        self.interval = 1.0 / rate if rate else 0.0
        self._clock = clock
        self._sleep = sleep
        self._lock = threading.Lock()
        self._next = 0.0

    def acquire(self) -> float:
        """Block until a slot is free; returns the time waited."""
        if not self.interval:
            return 0.0
        with self._lock:
            now = self._clock()
            start = max(now, self._next)
            self._next = start + self.interval
        wait = start - now
        if wait > 0:
            self._sleep(wait)
        return wait


# --- backend ---------------------------------------------------------------


class Backend:
    """Retry, rate-limit and usage bookkeeping around a transport-specific ``_send``."""

    def __init__(self, descriptor: BackendDescriptor, sleep: Callable[[float], None] = time.sleep, clock: Callable[[], float] = time.monotonic):
        self.descriptor = descriptor
        self._sleep = sleep
        self._clock = clock
        self.limiter = RateLimiter(descriptor.requests_per_second, clock, sleep)
        self._slots = threading.BoundedSemaphore(descriptor.max_in_flight)
        self._lock = threading.Lock()
        self.usage = Usage()
        self.request_count = 0

    @property
    def supports_logprobs(self) -> bool:
        return self.descriptor.supports_logprobs

    def coordinate_space(self, width: float, height: float) -> CoordinateSpace:
        return self.descriptor.coordinates.space(width, height)

    def sent_size(self, image: ImageRecord) -> tuple[int, int]:
        """Dimensions of the image as the model sees it."""
        return image.width, image.height

    def _send(self, req: ChatRequest) -> ChatResponse:
        raise NotImplementedError

    def complete(self, req: ChatRequest) -> ChatResponse:
        if req.logprobs and not self.supports_logprobs:
            raise CapabilityError(f"backend {self.descriptor.model or self.descriptor.type} does not expose logprobs")
        policy = self.descriptor.retry
        attempt = 0
        with self._slots:
            while True:
                self.limiter.acquire()
                try:
                    resp = self._send(req)
                except TransientBackendError as exc:
                    if attempt >= policy.max_retries:
                        raise RetriesExhausted(f"gave up after {attempt} retries: {exc}") from exc
                    delay = policy.delay(attempt, exc.retry_after)
                    log.warning("transient backend failure (%s); retry %d in %.1fs", exc, attempt + 1, delay)
                    self._sleep(delay)
                    attempt += 1
                    continue
                break
        with self._lock:
            self.usage = self.usage + resp.usage
            self.request_count += 1
        return resp

    def yes_no_probability(self, req: ChatRequest) -> tuple[float, float]:
        from .parsing import yes_no_from_logprobs

        if not self.supports_logprobs:
            raise CapabilityError("scoring backend must expose token log-probabilities")
        if not req.logprobs:
            req = ChatRequest(req.system, req.parts, req.temperature, 1, True, req.top_logprobs, req.kind)
        return yes_no_from_logprobs(self.complete(req))
