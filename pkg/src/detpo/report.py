"""Markdown run report built from trace, evaluation and prompt files."""

from __future__ import annotations

import json
from collections import defaultdict
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Iterable, Sequence

from .trace import PHASES, iter_requests, read_trace


@dataclass
class PhaseTotals:
    requests: int = 0
    prompt_tokens: int = 0
    completion_tokens: int = 0
    latency_s: float = 0.0

    @property
    def total_tokens(self) -> int:
        return self.prompt_tokens + self.completion_tokens

    def add(self, event: dict[str, Any]) -> None:
        self.requests += 1
        self.prompt_tokens += int(event.get("prompt_tokens", 0))
        self.completion_tokens += int(event.get("completion_tokens", 0))
        self.latency_s += float(event.get("latency", 0.0))


def token_totals(events: Iterable[dict[str, Any]]) -> dict[str, PhaseTotals]:
    totals = {p: PhaseTotals() for p in PHASES}
    for e in iter_requests(events):
        totals.setdefault(e.get("phase", "detection"), PhaseTotals()).add(e)
    return totals


def iteration_series(events: Iterable[dict[str, Any]]) -> dict[str, list[dict[str, Any]]]:
    """Per class: one row per Stage-2 iteration event, in trace order."""
    series: dict[str, list[dict[str, Any]]] = defaultdict(list)
    for e in events:
        if e.get("type") == "iteration":
            series[str(e.get("class_name", e.get("class_id")))].append(
                {k: e.get(k) for k in ("iteration", "action", "map", "accepted_map", "best_map")}
            )
    return dict(series)


@dataclass
class ReportInputs:
    events: list[dict[str, Any]] = field(default_factory=list)
    headers: list[dict[str, Any]] = field(default_factory=list)
    evals: list[tuple[str, dict[str, Any]]] = field(default_factory=list)
    prompts: dict[str, Any] | None = None
    prompt_hash: str | None = None
    config_hash: str | None = None


def load_inputs(
    traces: Sequence[str | Path],
    evals: Sequence[str | Path] = (),
    prompt_file: str | Path | None = None,
    config_hash: str | None = None,
) -> ReportInputs:
    from .config import file_hash

    out = ReportInputs(config_hash=config_hash)
    for path in _expand(traces):
        header, events = read_trace(path)
        if header is not None:
            out.headers.append(header)
        out.events.extend(events)
    for path in evals:
        out.evals.append((Path(path).name, json.loads(Path(path).read_text(encoding="utf-8"))))
    if prompt_file is not None:
        out.prompts = json.loads(Path(prompt_file).read_text(encoding="utf-8"))
        out.prompt_hash = file_hash(prompt_file)
    if out.config_hash is None:
        found = sorted({h["config_hash"] for h in out.headers if h.get("config_hash")})
        out.config_hash = ", ".join(found) or None
    if out.prompt_hash is None:
        found = sorted({h["prompt_hash"] for h in out.headers if h.get("prompt_hash")})
        out.prompt_hash = ", ".join(found) or None
    return out


def _expand(paths: Sequence[str | Path]) -> list[Path]:
    out = []
    for p in map(Path, paths):
        out.extend(sorted(p.glob("*.jsonl")) if p.is_dir() else [p])
    return out


def _fmt(v: Any) -> str:
    if v is None:
        return "-"
    if isinstance(v, float):
        return f"{v:.4f}"
    return str(v)


def _table(header: Sequence[str], rows: Iterable[Sequence[Any]]) -> list[str]:
    lines = ["| " + " | ".join(header) + " |", "|" + "|".join("---" for _ in header) + "|"]
    lines += ["| " + " | ".join(_fmt(v) for v in row) + " |" for row in rows]
    return lines


def render_report(inputs: ReportInputs, now: datetime | None = None) -> str:
    """The first line carries every timing-dependent value, so the rest is reproducible."""
    now = now or datetime.now(timezone.utc)
    elapsed = sum(float(h.get("elapsed_s", 0.0)) for h in inputs.headers)
    stamp = f"_Generated {now.isoformat()}; traced run time {elapsed:.3f} s over {len(inputs.headers)} trace file(s)._"
    lines = [stamp, "", "# detpo run report", ""]
    lines.append(f"- config hash: `{inputs.config_hash or 'n/a'}`")
    lines.append(f"- prompt file hash: `{inputs.prompt_hash or 'n/a'}`")
    lines.append("")

    if inputs.prompts:
        lines += ["## Optimized prompts", ""]
        rows = [
            (name, e.get("provenance"), e.get("train_map"), e.get("val_map"), e.get("status", "ok"))
            for name, e in inputs.prompts.items()
        ]
        lines += _table(("class", "selected", "train mAP", "val mAP", "status"), rows) + [""]

    for name, ev in inputs.evals:
        lines += [f"## Evaluation: {name}", "", f"mAP@[.50:.95]: {_fmt(ev.get('map'))}", ""]
        rows = [(c["name"], c["ap"], c.get("ap50")) for c in ev.get("classes", [])]
        lines += _table(("class", "AP", "AP50"), rows) + [""]

    series = iteration_series(inputs.events)
    if series:
        lines += ["## Training mAP by iteration", ""]
        for cls in sorted(series):
            lines += [f"### {cls}", ""]
            rows = [(r["iteration"], r["action"], r["map"], r["accepted_map"], r["best_map"]) for r in series[cls]]
            lines += _table(("iteration", "action", "mAP", "accepted", "best"), rows) + [""]

    totals = token_totals(inputs.events)
    lines += ["## Tokens by phase", ""]
    rows = [
        (phase, t.requests, t.prompt_tokens, t.completion_tokens, t.total_tokens)
        for phase, t in totals.items()
    ]
    all_t = PhaseTotals()
    for t in totals.values():
        all_t.requests += t.requests
        all_t.prompt_tokens += t.prompt_tokens
        all_t.completion_tokens += t.completion_tokens
        all_t.latency_s += t.latency_s
    rows.append(("total", all_t.requests, all_t.prompt_tokens, all_t.completion_tokens, all_t.total_tokens))
    lines += _table(("phase", "requests", "prompt tokens", "completion tokens", "total tokens"), rows) + [""]

    lines += ["## Wall clock", ""]
    rows = [(phase, round(t.latency_s, 3)) for phase, t in totals.items()]
    lines += _table(("phase", "summed request latency (s)"), rows) + [""]
    return "\n".join(lines)


def report_data(inputs: ReportInputs) -> dict[str, Any]:
    """The same numbers as the markdown, for machine consumers."""
    totals = token_totals(inputs.events)
    return {
        "config_hash": inputs.config_hash,
        "prompt_hash": inputs.prompt_hash,
        "tokens": {
            phase: {
                "requests": t.requests,
                "prompt_tokens": t.prompt_tokens,
                "completion_tokens": t.completion_tokens,
                "total_tokens": t.total_tokens,
                "latency_s": t.latency_s,
            }
            for phase, t in totals.items()
        },
        "iterations": iteration_series(inputs.events),
        "evaluations": {name: {"map": ev.get("map"), "classes": ev.get("classes", [])} for name, ev in inputs.evals},
        "prompts": inputs.prompts,
    }
