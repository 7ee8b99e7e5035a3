"""``streamst`` command line: synthesize, train, translate, evaluate, validate."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .config import RunConfig, load_config
from .encoder import write_features
from .endpoint import ChatClient, mock_transport, render_translation_prompt
from .metrics import REF_SCHEMA, RefSegment, evaluate_streams
from .model import SpeechTranslator
from .streaming import EmissionLog, StreamSource, run_stream
from .tensor import ContractError
from .toy import ToyLanguage, build_segments, lexicon_align, make_toy_sources
from .trainer import load_checkpoint, save_checkpoint, train
from .trajectory import (
    ALIGNMENT_SCHEMA,
    SEGMENT_SCHEMA,
    AlignedUtterance,
    read_jsonl,
    segment_from_record,
    segment_hours,
    segment_to_record,
    write_jsonl,
)

log = logging.getLogger("streamst")

TRAIN_MANIFEST = "train.jsonl"
TRAIN_FEATURES = "train.feat"
HELDOUT_DIR = "heldout"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _emit(args, payload: dict, text: str) -> None:
    print(json.dumps(payload, sort_keys=True) if args.json else text)


def _config(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig()
    if getattr(args, "seed", None) is not None:
        cfg = replace(cfg, run=replace(cfg.run, seed=args.seed), data=replace(cfg.data, seed=args.seed))
    return cfg


# ----------------------------------------------------------------------------
# synthesize


def _retranslate(utts: list[AlignedUtterance], client: ChatClient, lang: ToyLanguage, target: str, context: int) -> int:
    """Replace target tokens with endpoint translations; returns how many changed."""
    by_rec: dict[str | None, list[AlignedUtterance]] = {}
    for u in utts:
        by_rec.setdefault(u.recording_id, []).append(u)
    prompts = []
    for group in by_rec.values():
        for i, u in enumerate(group):
            prev = [g.transcript for g in group[max(0, i - context) : i]] if u.recording_id else []
            prompts.append(render_translation_prompt(u.transcript, prev, target))
    flat = [u for g in by_rec.values() for u in g]
    changed = 0
    for u, text in zip(flat, client.translate_many(prompts)):
        tokens = text.split()
        words = [w for w, _, _ in u.source_words]
        if tokens != u.target_tokens:
            changed += 1
        u.target_tokens = tokens
        u.word_alignment = lexicon_align(words, tokens, lang.lexicon)
    return changed


def cmd_synthesize(args) -> int:
    cfg = _config(args)
    out = Path(args.output)
    (out / HELDOUT_DIR).mkdir(parents=True, exist_ok=True)
    d = cfg.data
    if d.alignments:
        raise ContractError("synthesize from external alignments is done with scripts/convert_mfa_simalign.py")
    lang = cfg.toy
    src = make_toy_sources(lang, d.seed, d.n_recordings, d.recording_ms, d.n_pool, d.n_heldout, d.heldout_ms)
    changed = 0
    if args.mock_endpoint or args.endpoint:
        if args.mock_endpoint:
            client = ChatClient("http://mock", transport=mock_transport(lang.translate))
        else:
            client = ChatClient.from_env()
        changed = _retranslate(
            src.training_utterances(), client, lang, cfg.run.target_language, cfg.synthesis.context_sentences
        )
    segs = build_segments(src, cfg.synthesis, d.seed, d.n_simulated)
    write_jsonl(out / "alignments.jsonl", [u.to_record() for u in src.training_utterances()])
    frames = np.concatenate([s.frames for s in segs])
    write_features(out / TRAIN_FEATURES, frames, cfg.synthesis.frame_ms)
    n_seg_frames = cfg.synthesis.seg_chunks * cfg.synthesis.chunk_frames
    write_jsonl(
        out / TRAIN_MANIFEST,
        [segment_to_record(s, TRAIN_FEATURES, i * n_seg_frames) for i, s in enumerate(segs)],
    )
    streams = []
    for rec in src.heldout:
        write_features(out / HELDOUT_DIR / f"{rec.recording_id}.feat", rec.frames, cfg.synthesis.frame_ms)
        refs = [RefSegment(tuple(u.target_tokens), *u.utterance_span, rec.recording_id) for u in rec.utterances]
        write_jsonl(out / HELDOUT_DIR / f"{rec.recording_id}.refs.jsonl", [r.to_record() for r in refs])
        write_jsonl(out / HELDOUT_DIR / f"{rec.recording_id}.align.jsonl", [u.to_record() for u in rec.utterances])
        streams.append(rec.recording_id)
    summary = {
        "segments": len(segs),
        "hours": round(segment_hours(len(segs), cfg.synthesis), 6),
        "target_tokens": sum(len(s.trajectory.tokens) for s in segs),
        "heldout_streams": streams,
        "endpoint_changed": changed,
        "output": str(out),
    }
    _emit(args, summary, f"wrote {len(segs)} segments ({summary['hours']:.3f} h) and {len(streams)} held-out streams to {out}")
    return 0


# ----------------------------------------------------------------------------
# train


def load_segments(data_dir) -> list:
    from .encoder import read_features

    data_dir = Path(data_dir)
    records = read_jsonl(data_dir / TRAIN_MANIFEST)
    cache: dict[str, tuple[np.ndarray, dict]] = {}
    segs = []
    for rec in records:
        frames = None
        if rec.get("features"):
            path = rec["features"]
            if path not in cache:
                cache[path] = read_features(data_dir / path)
            feats, header = cache[path]
            n = len(rec["steps"]) * rec["chunk_ms"] // header["frame_ms"]
            frames = feats[rec["start_frame"] : rec["start_frame"] + n]
        segs.append(segment_from_record(rec, frames))
    return segs


def _symbols(segs) -> list[str]:
    out = set()
    for s in segs:
        out.update(s.trajectory.tokens)
        out.update(w for w, _, _ in s.source_words)
    return sorted(out)


def cmd_train(args) -> int:
    cfg = _config(args)
    segs = load_segments(args.data)
    tcfg = cfg.stage(args.stage)
    if args.seed is not None:
        tcfg = replace(tcfg, seed=args.seed)
    if args.init:
        model = load_checkpoint(args.init)
    else:
        model = SpeechTranslator(cfg.model, _symbols(segs), seed=cfg.run.seed)
    out = Path(args.output)
    out.parent.mkdir(parents=True, exist_ok=True)
    log_path = out.with_suffix(".log.jsonl")
    result = train(segs, model, tcfg, cfg.lora, log_path=log_path)
    save_checkpoint(out, model, {"stage": args.stage})
    first = result.log[0]["loss"]
    last = float(np.mean([r["loss"] for r in result.log[-max(1, len(result.log) // 10) :]]))
    summary = {"stage": args.stage, "steps": result.total_steps, "first_loss": first, "final_loss": last,
               "checkpoint": str(out), "log": str(log_path)}
    _emit(args, summary, f"stage {args.stage}: {result.total_steps} steps, loss {first:.4f} -> {last:.4f}; saved {out}")
    return 0


# ----------------------------------------------------------------------------
# translate / evaluate


def cmd_translate(args) -> int:
    cfg = _config(args)
    model = load_checkpoint(args.checkpoint)
    k = args.latency_multiplier or cfg.run.latency_multipliers[0]
    out = Path(args.output)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for path in args.inputs:
        src = StreamSource.from_file(path)
        stem = Path(path).name.split(".")[0]
        elog = run_stream(src, model, k, cfg.cost, cfg.generation, stream_id=stem)
        target = out / f"{stem}.k{k}.emissions.jsonl"
        elog.write(target)
        written.append({"log": str(target), "tokens": len(elog.records), "forced_turns": len(elog.forced_turns)})
    _emit(args, {"multiplier": k, "logs": written}, "\n".join(f"{w['log']}: {w['tokens']} tokens" for w in written))
    return 0


def read_refs(path) -> list[RefSegment]:
    return [RefSegment.from_record(r) for r in read_jsonl(path)]


def cmd_evaluate(args) -> int:
    if len(args.logs) != len(args.refs):
        raise UsageError("evaluate: give one --refs file per --logs file")
    logs = [EmissionLog.read(p) for p in args.logs]
    refs = [read_refs(p) for p in args.refs]
    report = evaluate_streams(logs, refs)
    if args.output:
        Path(args.output).write_text(report.to_json() + "\n", encoding="utf-8")
    payload = {k: v for k, v in report.to_dict().items() if k != "segments"}
    _emit(args, payload, f"BLEU / StreamLAAL / StreamLAAL_CA: {report.headline()} (ms)")
    return 0


# ----------------------------------------------------------------------------
# validate


def _segment_problems(rec: dict, base: Path) -> list[str]:
    out = []
    chunk_ms = rec.get("chunk_ms")
    if not isinstance(chunk_ms, int) or chunk_ms <= 0:
        return ["chunk_ms must be a positive integer"]
    prev_b, prev_j = -1, 0
    for j, tokens, bounds in rec.get("steps", []):
        if j != prev_j + 1:
            out.append(f"step {j} does not follow step {prev_j}")
        if len(tokens) != len(bounds):
            out.append(f"step {j}: {len(tokens)} tokens but {len(bounds)} boundaries")
        for b in bounds:
            if b < prev_b:
                out.append(f"step {j}: boundaries decrease")
            if b > j * chunk_ms:
                out.append(f"step {j}: boundary {b} ms lies after the step ends")
            prev_b = b
        prev_j = j
    words = rec.get("source_words", [])
    for i, (_, a, b) in enumerate(words):
        if b < a or (i and a < words[i - 1][2]):
            out.append(f"source word {i} interval is not monotone")
    feat = rec.get("features")
    if feat and not (base / feat).exists():
        out.append(f"features file {feat} not found")
    return out


def _ref_problems(rec: dict) -> list[str]:
    try:
        RefSegment.from_record(rec)
    except (ValueError, KeyError, TypeError) as exc:
        return [str(exc)]
    return []


def validate_manifest(path) -> dict:
    """Per-record pass/fail with reasons; ``ok`` is False on any failure."""
    path = Path(path)
    lines = path.read_text(encoding="utf-8").splitlines()
    results = []
    for n, line in enumerate(lines, start=1):
        try:
            rec = json.loads(line)
            schema = rec.get("schema")
            if schema == ALIGNMENT_SCHEMA:
                problems = AlignedUtterance.from_record(rec).problems()
            elif schema == SEGMENT_SCHEMA:
                problems = _segment_problems(rec, path.parent)
            elif schema == REF_SCHEMA:
                problems = _ref_problems(rec)
            else:
                problems = [f"unknown schema {schema!r}"]
        except (ValueError, KeyError, TypeError, AttributeError) as exc:
            problems = [f"unparseable record: {exc}"]
        results.append({"line": n, "ok": not problems, "problems": problems})
    failed = sum(not r["ok"] for r in results)
    return {"path": str(path), "records": len(results), "passed": len(results) - failed, "failed": failed,
            "ok": failed == 0, "results": results}


def cmd_validate(args) -> int:
    status = 0
    reports = []
    for p in args.manifests:
        try:
            rep = validate_manifest(p)
        except OSError as exc:
            rep = {"path": str(p), "records": 0, "passed": 0, "failed": 0, "ok": False, "error": str(exc), "results": []}
        reports.append(rep)
        status |= 0 if rep["ok"] else 1
    if args.json:
        print(json.dumps(reports if len(reports) > 1 else reports[0], sort_keys=True))
    else:
        for rep in reports:
            if "error" in rep:
                print(f"{rep['path']}: unreadable ({rep['error']})")
                continue
            for r in rep["results"]:
                if not r["ok"]:
                    print(f"{rep['path']}:{r['line']}: FAIL {'; '.join(r['problems'])}")
            print(f"{rep['path']}: {rep['records']} records, {rep['passed']} passed, {rep['failed']} failed")
    return status


# ----------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="TOML run configuration")
    common.add_argument("--seed", type=int, help="override every seed in the configuration")
    common.add_argument("--json", action="store_true", help="machine-readable output")
    common.add_argument("-v", "--verbose", action="store_true")

    p = _Parser(prog="streamst", description="Streaming speech translation toolkit")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("synthesize", parents=[common], help="build training manifests and held-out streams")
    s.add_argument("--output", required=True, help="output directory")
    s.add_argument("--mock-endpoint", action="store_true", help="translate transcripts with the in-process mock")
    s.add_argument("--endpoint", action="store_true", help="translate transcripts with STREAMST_ENDPOINT_URL")
    s.set_defaults(func=cmd_synthesize)

    t = sub.add_parser("train", parents=[common], help="run one training stage")
    t.add_argument("--stage", type=int, required=True, choices=(0, 1, 2))
    t.add_argument("--data", required=True, help="directory written by synthesize")
    t.add_argument("--init", help="checkpoint to start from")
    t.add_argument("--output", required=True, help="checkpoint path to write")
    t.set_defaults(func=cmd_train)

    r = sub.add_parser("translate", parents=[common], help="stream feature files through a checkpoint")
    r.add_argument("--checkpoint", required=True)
    r.add_argument("--latency-multiplier", type=int, help="chunks accumulated per decoder turn")
    r.add_argument("--output", required=True, help="directory for emission logs")
    r.add_argument("inputs", nargs="+", help="feature files")
    r.set_defaults(func=cmd_translate)

    e = sub.add_parser("evaluate", parents=[common], help="BLEU and StreamLAAL from emission logs")
    e.add_argument("--logs", nargs="+", required=True)
    e.add_argument("--refs", nargs="+", required=True, help="reference JSONL, one per log, same order")
    e.add_argument("--output", help="write the JSON report here")
    e.set_defaults(func=cmd_evaluate)

    v = sub.add_parser("validate", parents=[common], help="check manifest records")
    v.add_argument("manifests", nargs="+")
    v.set_defaults(func=cmd_validate)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(str(exc), file=sys.stderr)
        parser.print_usage(sys.stderr)
        return 2
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(str(exc), file=sys.stderr)
        return 2
    except (ContractError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
