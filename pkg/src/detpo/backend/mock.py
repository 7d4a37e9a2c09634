"""Scripted backend: deterministic responses keyed by request content."""

from __future__ import annotations

import json
import math
import threading
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable, Mapping

from .base import (
    AuthenticationError,
    Backend,
    BackendDescriptor,
    BackendError,
    ChatRequest,
    ChatResponse,
    TransientBackendError,
    Usage,
)


@dataclass
class Reply:
    text: str = ""
    logprobs: dict[str, float] | None = None
    error: str | None = None  # "transient" | "auth"

    @classmethod
    def from_json(cls, entry: Mapping[str, Any] | str) -> "Reply":
        if isinstance(entry, str):
            return cls(entry)
        logprobs = entry.get("logprobs")
        if logprobs is None and "probs" in entry:
            logprobs = {k: math.log(v) if v > 0 else float("-inf") for k, v in entry["probs"].items()}
        return cls(entry.get("text", ""), logprobs, entry.get("error"))


@dataclass
class Rule:
    reply: Reply
    hash: str | None = None
    contains: tuple[str, ...] = ()
    kind: str | None = None
    times: int | None = None  # match only this many times
    used: int = 0

    def matches(self, req: ChatRequest, key: str) -> bool:
        if self.times is not None and self.used >= self.times:
            return False
        if self.hash is not None and self.hash != req.content_hash():
            return False
        if self.kind is not None and self.kind != req.kind:
            return False
        return all(s in key for s in self.contains)


@dataclass(frozen=True)
class CallRecord:
    hash: str
    kind: str
    text: str
    images: tuple[str, ...]


Responder = Callable[[ChatRequest], "Reply | str | None"]


def _estimate_tokens(text: str) -> int:
    return max(1, math.ceil(len(text) / 4))


class ScriptedBackend(Backend):
    """Responses come from, in order: ``responder``, rules, the sequence queue, ``default``.

    Script file layout::

        {"rules": [{"hash": ..., "contains": [...], "kind": ..., "text": ..., "probs": {...}}],
         "sequence": [{"text": ...}, ...],
         "default": {"text": "[]"}}

    ``contains`` substrings are searched in the request key, which holds the
    system text, the text parts and ``image:<id>[color:x1,y1,x2,y2;...]`` summaries.
    """

    IMAGE_TOKENS = 256

    def __init__(
        self,
        script: Mapping[str, Any] | str | Path | None = None,
        responder: Responder | None = None,
        descriptor: BackendDescriptor | None = None,
        sleep: Callable[[float], None] = lambda s: None,
    ):
        super().__init__(descriptor or BackendDescriptor(type="mock", model="scripted", supports_logprobs=True), sleep=sleep)
        if isinstance(script, (str, Path)):
            script = json.loads(Path(script).read_text(encoding="utf-8"))
        script = script or {}
        self.rules = [
            Rule(Reply.from_json(r), r.get("hash"), tuple(r.get("contains", ())), r.get("kind"), r.get("times"))
            for r in script.get("rules", [])
        ]
        self.sequence = [Reply.from_json(r) for r in script.get("sequence", [])]
        self.default = Reply.from_json(script["default"]) if "default" in script else None
        self.responder = responder
        self.calls: list[CallRecord] = []
        self._mock_lock = threading.Lock()

    def calls_of(self, kind: str) -> list[CallRecord]:
        return [c for c in self.calls if c.kind == kind]

    def _resolve(self, req: ChatRequest) -> Reply:
        if self.responder is not None:
            out = self.responder(req)
            if out is not None:
                return Reply(out) if isinstance(out, str) else out
        key = req.key()
        with self._mock_lock:
            for rule in self.rules:
                if rule.matches(req, key):
                    rule.used += 1
                    return rule.reply
            if self.sequence:
                return self.sequence.pop(0)
        if self.default is not None:
            return self.default
        raise BackendError(f"no scripted response for request {req.content_hash()} ({req.kind})")

    def _send(self, req: ChatRequest) -> ChatResponse:
        with self._mock_lock:
            self.calls.append(CallRecord(req.content_hash(), req.kind, req.text, tuple(p.summary() for p in req.images)))
        reply = self._resolve(req)
        if reply.error == "transient":
            raise TransientBackendError("scripted transient failure")
        if reply.error == "auth":
            raise AuthenticationError("scripted authentication failure")
        usage = Usage(
            _estimate_tokens(req.system + req.text) + self.IMAGE_TOKENS * len(req.images),
            _estimate_tokens(reply.text),
        )
        return ChatResponse(reply.text, reply.logprobs if req.logprobs else None, usage, 0.0)
