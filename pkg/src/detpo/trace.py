"""Append-only JSON-lines trace of requests, iterations and decisions."""

from __future__ import annotations

import json
import threading
import time
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Iterable, Iterator

from .backend.base import ChatRequest, ChatResponse

PHASES = ("optimization", "detection", "rerank")


class Trace:
    def __init__(self, **context: Any):
        self.context = context
        self.meta: dict[str, Any] = {}  # run provenance, written to the header line only
        self.events: list[dict[str, Any]] = []
        self._lock = threading.Lock()
        self.started = datetime.now(timezone.utc)
        self._t0 = time.monotonic()

    def event(self, type_: str, **fields: Any) -> dict[str, Any]:
        entry = {"type": type_, **self.context, **fields}
        with self._lock:
            self.events.append(entry)
        return entry

    def request(self, req: ChatRequest, resp: ChatResponse, phase: str, **fields: Any) -> dict[str, Any]:
        if phase not in PHASES:
            raise ValueError(f"unknown phase {phase!r}")
        return self.event(
            "request",
            phase=phase,
            kind=req.kind,
            request_hash=req.content_hash(),
            response_hash=resp.response_hash(),
            n_images=len(req.images),
            temperature=req.temperature,
            prompt_tokens=resp.usage.prompt_tokens,
            completion_tokens=resp.usage.completion_tokens,
            latency=round(resp.latency, 6),
            **fields,
        )

    def extend(self, other: "Trace") -> None:
        with self._lock:
            self.events.extend(other.events)

    def header(self) -> dict[str, Any]:
        return {
            "type": "header",
            "started": self.started.isoformat(),
            "elapsed_s": round(time.monotonic() - self._t0, 3),
            **self.meta,
        }

    def write(self, path: str | Path) -> None:
        """Header line first; it is the only line carrying wall-clock data."""
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", encoding="utf-8") as fh:
            fh.write(json.dumps(self.header()) + "\n")
            for e in self.events:
                fh.write(json.dumps(e, sort_keys=True) + "\n")


def read_trace(path: str | Path) -> tuple[dict[str, Any] | None, list[dict[str, Any]]]:
    header = None
    events = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            row = json.loads(line)
            if row.get("type") == "header":
                header = row
            else:
                events.append(row)
    return header, events


def iter_requests(events: Iterable[dict[str, Any]]) -> Iterator[dict[str, Any]]:
    return (e for e in events if e.get("type") == "request")
