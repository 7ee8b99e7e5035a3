"""End-to-end toy experiment: decoder pretraining and the timed two-stage run."""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field
from pathlib import Path

from .cli import HELDOUT_DIR, main as cli_main
from .config import RunConfig, load_config
from .encoder import read_features
from .model import SpeechTranslator
from .toy import build_segments, make_toy_sources
from .trainer import load_checkpoint, save_checkpoint, token_accuracy, train
from .trajectory import AlignedUtterance, read_jsonl, slice_robust_segments

PRETRAIN_SEED_OFFSET = 7  # pretraining text never shares a seed with the task data


def pretrain_decoder(cfg: RunConfig, output, n_segments: int = 4000, on_step=None) -> SpeechTranslator:
    """Stage 0 on a separate synthetic corpus; stands in for a pretrained text decoder."""
    lang = cfg.toy
    seed = cfg.data.seed + PRETRAIN_SEED_OFFSET
    src = make_toy_sources(lang, seed, n_recordings=0, n_pool=cfg.data.n_pool, n_heldout=0)
    segs = build_segments(src, cfg.synthesis, seed, n_segments)
    model = SpeechTranslator(cfg.model, lang.source_symbols + lang.target_symbols, seed=cfg.run.seed)
    train(segs, model, cfg.stage(0), on_step=on_step)
    save_checkpoint(output, model, {"stage": 0, "pretrain_segments": n_segments})
    return model


def heldout_segments(data_dir, cfg: RunConfig) -> list:
    """Robust segments sliced from the held-out recordings written by ``synthesize``."""
    out = []
    for align in sorted((Path(data_dir) / HELDOUT_DIR).glob("*.align.jsonl")):
        stem = align.name.split(".")[0]
        utts = [AlignedUtterance.from_record(r) for r in read_jsonl(align)]
        frames, _ = read_features(align.with_name(f"{stem}.feat"))
        out += slice_robust_segments(utts, cfg.synthesis, frames, stem)
    return out


@dataclass
class ExperimentReport:
    multipliers: list[int]
    accuracy: dict[int, float]
    pooled_accuracy: float
    reports: dict[int, dict]
    seconds: float
    stage_seconds: dict[str, float] = field(default_factory=dict)

    @property
    def stream_laal(self) -> list[float]:
        return [self.reports[k]["stream_laal_ms"] for k in self.multipliers]

    @property
    def laal_monotone(self) -> bool:
        lags = self.stream_laal
        return all(b >= a for a, b in zip(lags, lags[1:]))

    def to_dict(self) -> dict:
        return {
            "multipliers": self.multipliers,
            "accuracy": {str(k): v for k, v in self.accuracy.items()},
            "pooled_accuracy": self.pooled_accuracy,
            "reports": {str(k): v for k, v in self.reports.items()},
            "stream_laal_monotone": self.laal_monotone,
            "seconds": self.seconds,
            "stage_seconds": self.stage_seconds,
        }


def _cli(*argv) -> None:
    code = cli_main([str(a) for a in argv])
    if code != 0:
        raise RuntimeError(f"streamst {argv[0]} exited with status {code}")


def run_toy_experiment(config_path, work_dir, stage0_checkpoint) -> ExperimentReport:
    """synthesize, stage 1, stage 2, translate and evaluate per multiplier; timed end to end."""
    cfg = load_config(config_path)
    work = Path(work_dir)
    data, ckpt, logs = work / "data", work / "ckpt", work / "logs"
    times: dict[str, float] = {}
    start = last = time.perf_counter()

    def lap(name):
        nonlocal last
        now = time.perf_counter()
        times[name] = round(now - last, 3)
        last = now

    _cli("synthesize", "--config", config_path, "--mock-endpoint", "--output", data)
    lap("synthesize")
    _cli("train", "--config", config_path, "--stage", 1, "--data", data, "--init", stage0_checkpoint,
         "--output", ckpt / "stage1.ckpt")
    lap("stage1")
    _cli("train", "--config", config_path, "--stage", 2, "--data", data, "--init", ckpt / "stage1.ckpt",
         "--output", ckpt / "stage2.ckpt")
    lap("stage2")

    feats = sorted((data / HELDOUT_DIR).glob("*.feat"))
    reports = {}
    for k in cfg.run.latency_multipliers:
        out = logs / f"k{k}"
        _cli("translate", "--config", config_path, "--checkpoint", ckpt / "stage2.ckpt", "--latency-multiplier", k,
             "--output", out, *feats)
        log_files = sorted(out.glob("*.emissions.jsonl"))
        refs = [data / HELDOUT_DIR / (f.name.split(".")[0] + ".refs.jsonl") for f in log_files]
        report_path = work / f"report.k{k}.json"
        _cli("evaluate", "--logs", *log_files, "--refs", *refs, "--output", report_path)
        rep = json.loads(report_path.read_text(encoding="utf-8"))
        reports[k] = {key: v for key, v in rep.items() if key != "segments"}
        lap(f"stream_k{k}")

    model = load_checkpoint(ckpt / "stage2.ckpt")
    held = heldout_segments(data, cfg)
    accuracy, hits, total = {}, 0, 0
    for k in cfg.run.latency_multipliers:
        c, n = token_accuracy(model, held, k)
        accuracy[k] = c / n
        hits, total = hits + c, total + n
    lap("accuracy")
    seconds = time.perf_counter() - start
    report = ExperimentReport(list(cfg.run.latency_multipliers), accuracy, hits / total, reports, seconds, times)
    (work / "experiment.json").write_text(json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n")
    return report
