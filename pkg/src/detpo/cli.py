"""Command-line entry point: detect, evaluate, optimize, rerank, report."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Sequence

from .backend import BackendDescriptor, BackendError, ConfigError, create_backend
from .calibrate import vqa_rescore, write_audit
from .config import RunConfig, file_hash, load_config, read_raw
from .dataset import DatasetError, DatasetSplit, load_coco, locate_split
from .detect import MODES, detect_split
from .evaluation import coco_map, confusion_matrix, read_detections, tide_decompose, write_detections
from .optimizer import optimize_dataset
from .report import load_inputs, render_report, report_data
from .trace import Trace

log = logging.getLogger("detpo")


def _backend_descriptor(spec: str) -> BackendDescriptor:
    """``mock:<script.json>`` or a path to a descriptor file (TOML or JSON)."""
    if spec.startswith("mock:"):
        return BackendDescriptor(type="mock", model="scripted", supports_logprobs=True, script=spec[5:])
    raw = read_raw(spec)
    raw = raw.get("backend", raw)
    if raw.get("script") and not Path(raw["script"]).is_absolute():
        raw["script"] = str(Path(spec).parent / raw["script"])
    try:
        return BackendDescriptor.model_validate(raw)
    except ValueError as exc:
        raise ConfigError(f"invalid backend descriptor {spec}: {exc}") from exc


def _config(args) -> tuple[RunConfig, str]:
    overrides: dict = {}
    opt = {}
    for flag, key in (("t_max", "t_max"), ("k_shot", "k_shot"), ("seed", "seed"), ("jobs", "jobs")):
        value = getattr(args, flag, None)
        if value is not None:
            opt[key] = value
    if getattr(args, "val_split", None):
        opt["validation"] = "split"
    if opt:
        overrides["optimizer"] = opt
    cfg, digest = load_config(args.config, overrides)
    if getattr(args, "backend", None):
        cfg.backend = _backend_descriptor(args.backend)
    if getattr(args, "scoring_backend", None):
        cfg.scoring_backend = _backend_descriptor(args.scoring_backend)
    return cfg, digest


def _split(args, split: str | None = None, role: str | None = None) -> DatasetSplit:
    split = split or args.split
    return load_coco(locate_split(args.dataset, split), metadata=args.metadata, role=role or split)


def _definitions(path: str | None, split: DatasetSplit) -> dict[int, str]:
    if not path:
        return {}
    raw = json.loads(Path(path).read_text(encoding="utf-8"))
    out = {}
    for name, entry in raw.items():
        text = entry.get("definition") if isinstance(entry, dict) else entry
        try:
            out[split.class_by_name(name).class_id] = text
        except (KeyError, DatasetError):
            log.warning("prompt file names unknown class %r; ignored", name)
    return out


def _jobs(args, cfg: RunConfig) -> int:
    return args.jobs if args.jobs is not None else cfg.optimizer.jobs


def cmd_detect(args) -> int:
    cfg, digest = _config(args)
    split = _split(args)
    backend = create_backend(cfg.backend)
    trace = Trace(command="detect")
    trace.meta["config_hash"] = digest
    defs = _definitions(args.prompts, split)
    if args.prompts:
        trace.meta["prompt_hash"] = file_hash(args.prompts)
    run = detect_split(backend, split, args.mode, defs, trace, _jobs(args, cfg))
    write_detections(args.out, run.detections, split.classes)
    if args.trace:
        trace.write(args.trace)
    u = backend.usage
    print(
        f"{run.requests} requests, {len(run.detections)} detections, {run.parse_failures} unparseable; "
        f"tokens: {u.prompt_tokens} prompt + {u.completion_tokens} completion"
    )
    return 0


def cmd_evaluate(args) -> int:
    split = _split(args)
    dets = read_detections(args.detections, split.classes)
    result = coco_map(dets, split)
    tide = tide_decompose(dets, split)
    cm = confusion_matrix(dets, split, score_threshold=args.score_threshold)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "eval.json").write_text(json.dumps(result.to_dict(), indent=2) + "\n", encoding="utf-8")
    (out / "tide.json").write_text(json.dumps(tide.to_dict(), indent=2) + "\n", encoding="utf-8")
    (out / "confusion.json").write_text(json.dumps(cm.to_dict(), indent=2) + "\n", encoding="utf-8")
    (out / "confusion.csv").write_text(cm.to_csv(), encoding="utf-8")
    print(f"mAP {result.map:.4f}  TP50 {result.to_dict()['tp50']}  FP50 {result.fp_count}  FN50 {result.fn_count}")
    return 0


def cmd_optimize(args) -> int:
    cfg, digest = _config(args)
    train = _split(args, role="train")
    val = _split(args, args.val_split, role="val") if args.val_split else None
    backend = create_backend(cfg.backend)
    result = optimize_dataset(train, backend, cfg.optimizer, val)
    for r in result.classes:
        r.trace.meta["config_hash"] = digest
    result.write(args.out, args.trace_dir)
    failed = [r for r in result.classes if r.status == "failed"]
    for r in result.classes:
        print(f"{r.spec.name}: {r.final.provenance} (train mAP {r.final.train_map}, val mAP {r.final.val_map}) [{r.status}]")
    if failed:
        for r in failed:
            print(f"error: class {r.spec.name} failed: {r.error}", file=sys.stderr)
        return 1
    return 0


def cmd_rerank(args) -> int:
    cfg, digest = _config(args)
    split = _split(args)
    dets = read_detections(args.detections, split.classes)
    backend = create_backend(cfg.scorer())
    trace = Trace(command="rerank")
    trace.meta["config_hash"] = digest
    defs = _definitions(args.prompts, split)
    rescored, audit = vqa_rescore(dets, split, backend, defs, _jobs(args, cfg), trace)
    write_detections(args.out, rescored, split.classes)
    if args.audit:
        write_audit(args.audit, audit)
    if args.trace:
        trace.write(args.trace)
    flagged = sum(1 for a in audit if a.flag)
    print(f"rescored {len(rescored) - flagged} of {len(rescored)} detections ({flagged} kept their original score)")
    return 0


def cmd_report(args) -> int:
    digest = load_config(args.config)[1] if args.config else None
    inputs = load_inputs(args.trace, args.eval or (), args.prompts, digest)
    text = render_report(inputs)
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
    else:
        print(text)
    if args.json:
        Path(args.json).write_text(json.dumps(report_data(inputs), indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="detpo", description="Class-definition prompt optimization for MLLM detectors.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def data_args(sp, split="train"):
        sp.add_argument("--dataset", required=True, help="COCO annotation file or export directory")
        sp.add_argument("--split", default=split)
        sp.add_argument("--metadata", help="JSON sidecar of class descriptions and instructions")

    def backend_args(sp):
        sp.add_argument("--config", help="TOML or JSON run config")
        sp.add_argument("--backend", help="mock:<script.json> or a backend descriptor file")
        sp.add_argument("--jobs", type=int)

    sp = sub.add_parser("detect", help="run detection prompts over a split")
    data_args(sp, "test")
    backend_args(sp)
    sp.add_argument("--mode", choices=MODES, default="single-class")
    sp.add_argument("--prompts", help="prompt file from optimize")
    sp.add_argument("--out", required=True, help="detections JSON lines")
    sp.add_argument("--trace")
    sp.set_defaults(func=cmd_detect)

    sp = sub.add_parser("evaluate", help="mAP, TIDE counts and confusion matrix")
    data_args(sp, "test")
    sp.add_argument("--detections", required=True)
    sp.add_argument("--score-threshold", type=float, default=0.3, help="confusion-matrix score cut")
    sp.add_argument("--out-dir", required=True)
    sp.set_defaults(func=cmd_evaluate)

    sp = sub.add_parser("optimize", help="optimize one definition per class")
    data_args(sp)
    backend_args(sp)
    sp.add_argument("--val-split", help="held-out split for candidate selection (default: training images)")
    sp.add_argument("--t-max", type=int)
    sp.add_argument("--k-shot", type=int)
    sp.add_argument("--seed", type=int)
    sp.add_argument("--out", required=True, help="prompt file (JSON)")
    sp.add_argument("--trace-dir")
    sp.set_defaults(func=cmd_optimize)

    sp = sub.add_parser("rerank", help="replace scores with yes/no probabilities")
    data_args(sp, "test")
    backend_args(sp)
    sp.add_argument("--scoring-backend", help="backend used for scoring (default: --backend)")
    sp.add_argument("--detections", required=True)
    sp.add_argument("--prompts")
    sp.add_argument("--out", required=True)
    sp.add_argument("--audit")
    sp.add_argument("--trace")
    sp.set_defaults(func=cmd_rerank)

    sp = sub.add_parser("report", help="markdown report from traces and evaluations")
    sp.add_argument("--trace", nargs="+", required=True, help="trace files or directories")
    sp.add_argument("--eval", nargs="*")
    sp.add_argument("--prompts")
    sp.add_argument("--config")
    sp.add_argument("--out")
    sp.add_argument("--json", help="also write the numbers as JSON")
    sp.set_defaults(func=cmd_report)
    return p


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (ConfigError, DatasetError, BackendError, OSError, ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
