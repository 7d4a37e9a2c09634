from .base import (
    AuthenticationError,
    Backend,
    BackendDescriptor,
    BackendError,
    CapabilityError,
    ChatRequest,
    ChatResponse,
    CoordinateConvention,
    ImagePart,
    LogprobsUnavailable,
    PayloadTooLargeError,
    RateLimiter,
    RetriesExhausted,
    RetryPolicy,
    TransientBackendError,
    Usage,
)
from .http import ConfigError, HTTPChatBackend
from .mock import Reply, ScriptedBackend
from .parsing import ParseResult, parse_detections, serialize_detections, yes_no_from_logprobs


def create_backend(descriptor: BackendDescriptor, env=None) -> Backend:
    if descriptor.type == "mock":
        return ScriptedBackend(descriptor.script, descriptor=descriptor)
    return HTTPChatBackend(descriptor, env=env)


__all__ = [
    "AuthenticationError",
    "Backend",
    "BackendDescriptor",
    "BackendError",
    "CapabilityError",
    "ChatRequest",
    "ChatResponse",
    "ConfigError",
    "CoordinateConvention",
    "HTTPChatBackend",
    "ImagePart",
    "LogprobsUnavailable",
    "ParseResult",
    "PayloadTooLargeError",
    "RateLimiter",
    "Reply",
    "RetriesExhausted",
    "RetryPolicy",
    "ScriptedBackend",
    "TransientBackendError",
    "Usage",
    "create_backend",
    "parse_detections",
    "serialize_detections",
    "yes_no_from_logprobs",
]
