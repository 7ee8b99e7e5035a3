"""Chunk-level translation trajectories and robust training segments.

Input is word-aligned (speech, transcript, translation) data. Every target
token gets the right boundary of the speech it is aligned to; a token becomes
emittable after the first 960 ms chunk whose end covers that boundary.

Word timestamps inside an :class:`AlignedUtterance` are relative to the
utterance start; ``utterance_span`` places the utterance in its recording.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from typing import Iterable, Sequence

import numpy as np

from .layers import make_rng
from .tensor import ContractError

ALIGNMENT_SCHEMA = "aligned_utterance/v1"
SEGMENT_SCHEMA = "robust_segment/v1"


@dataclass
class AlignedUtterance:
    utt_id: str
    source_words: list[tuple[str, int, int]]
    target_tokens: list[str]
    word_alignment: list[tuple[int, int]]
    utterance_span: tuple[int, int]
    recording_id: str | None = None

    @property
    def duration_ms(self) -> int:
        return self.utterance_span[1] - self.utterance_span[0]

    @property
    def transcript(self) -> str:
        return " ".join(w[0] for w in self.source_words)

    def problems(self) -> list[str]:
        """Reasons this record is invalid (empty when valid)."""
        out = []
        start, end = self.utterance_span
        if end < start:
            out.append("utterance span ends before it starts")
        prev_end = 0
        for i, (_, ws, we) in enumerate(self.source_words):
            if we < ws:
                out.append(f"source word {i} ends before it starts")
            if ws < prev_end:
                out.append(f"source word {i} overlaps or precedes word {i - 1}")
            prev_end = max(prev_end, we)
        if self.source_words and self.source_words[-1][2] > end - start:
            out.append("source words extend past the utterance span")
        ns, nt = len(self.source_words), len(self.target_tokens)
        for s, t in self.word_alignment:
            if not (0 <= s < ns and 0 <= t < nt):
                out.append(f"alignment pair ({s}, {t}) out of range")
        return out

    def to_record(self) -> dict:
        return {
            "schema": ALIGNMENT_SCHEMA,
            "utt_id": self.utt_id,
            "recording_id": self.recording_id,
            "span": list(self.utterance_span),
            "source_words": [list(w) for w in self.source_words],
            "target_tokens": list(self.target_tokens),
            "alignment": [list(p) for p in self.word_alignment],
        }

    @classmethod
    def from_record(cls, rec: dict) -> "AlignedUtterance":
        if rec.get("schema") != ALIGNMENT_SCHEMA:
            raise ValueError(f"unknown schema {rec.get('schema')!r}")
        return cls(
            utt_id=rec["utt_id"],
            source_words=[(str(w[0]), int(w[1]), int(w[2])) for w in rec["source_words"]],
            target_tokens=list(rec["target_tokens"]),
            word_alignment=[(int(s), int(t)) for s, t in rec["alignment"]],
            utterance_span=(int(rec["span"][0]), int(rec["span"][1])),
            recording_id=rec.get("recording_id"),
        )


@dataclass(frozen=True)
class SynthesisConfig:
    chunk_ms: int = 960
    frame_ms: int = 20
    seg_chunks: int = 30
    max_multiplier: int = 12
    silence_model: str = "exponential"  # or "fixed"
    silence_mean_ms: float = 1000.0
    silence_max_ms: float = 5000.0
    lead_silence_prob: float = 0.5
    context_sentences: int = 3

    def __post_init__(self):
        if min(self.chunk_ms, self.frame_ms, self.seg_chunks, self.max_multiplier) <= 0:
            raise ContractError("synthesis sizes must be positive")
        if self.chunk_ms % self.frame_ms:
            raise ContractError("chunk_ms must be a multiple of frame_ms")
        if self.silence_model not in ("exponential", "fixed"):
            raise ContractError(f"unknown silence model {self.silence_model!r}")

    @property
    def seg_ms(self) -> int:
        return self.seg_chunks * self.chunk_ms

    @property
    def chunk_frames(self) -> int:
        return self.chunk_ms // self.frame_ms


@dataclass
class Trajectory:
    """Target tokens split into consecutive per-step spans.

    ``spans[j]`` is the half-open token range emitted after step ``j`` (0-based
    here; step ``j`` covers speech up to ``step_ends_ms[j]``).
    """

    tokens: list[str]
    spans: list[tuple[int, int]]
    step_ends_ms: list[int]
    boundaries: list[int]
    chunk_ms: int = 960
    flags: list[str] = field(default_factory=list)

    @property
    def n_steps(self) -> int:
        return len(self.spans)

    def step_tokens(self, j: int) -> list[str]:
        lo, hi = self.spans[j]
        return self.tokens[lo:hi]

    def flatten(self) -> list[str]:
        return [t for j in range(self.n_steps) for t in self.step_tokens(j)]

    def is_causal(self) -> bool:
        for j, (lo, hi) in enumerate(self.spans):
            if any(self.boundaries[i] > self.step_ends_ms[j] for i in range(lo, hi)):
                return False
        return True


def word_boundaries(u: AlignedUtterance) -> list[int]:
    """Right boundary (ms) of the speech aligned to each target token; 0 if unaligned."""
    m = [0] * len(u.target_tokens)
    for s, t in u.word_alignment:
        m[t] = max(m[t], u.source_words[s][2])
    return m


def enforce_monotonic(m: Sequence[int]) -> list[int]:
    out, running = [], None
    for v in m:
        running = v if running is None else max(running, v)
        out.append(running)
    return out


def step_for_boundary(m: int, chunk_ms: int) -> int:
    """1-based index of the first chunk whose end covers ``m``."""
    return max(1, math.ceil(m / chunk_ms))


def trajectory_from_boundaries(
    tokens: Sequence[str], m: Sequence[int], total_ms: int, chunk_ms: int
) -> Trajectory:
    """Build a trajectory of ``ceil(total_ms / chunk_ms)`` steps from nondecreasing boundaries.

    Boundaries past ``total_ms`` are clamped into the final chunk and flagged.
    """
    if any(b > a for a, b in zip(m[1:], m[:-1])):
        raise ContractError("boundaries must be nondecreasing")
    n_steps = max(1, math.ceil(total_ms / chunk_ms))
    flags = []
    clamped = []
    for b in m:
        if b > total_ms:
            flags.append("boundary_past_end")
            b = total_ms
        clamped.append(b)
    flags = sorted(set(flags))
    spans, i = [], 0
    for j in range(1, n_steps + 1):
        lo = i
        while i < len(clamped) and (step_for_boundary(clamped[i], chunk_ms) <= j or j == n_steps):
            i += 1
        spans.append((lo, i))
    ends = [j * chunk_ms for j in range(1, n_steps + 1)]
    return Trajectory(list(tokens), spans, ends, clamped, chunk_ms, flags)


def build_trajectory(u: AlignedUtterance, m: Sequence[int], cfg: SynthesisConfig = SynthesisConfig()) -> Trajectory:
    return trajectory_from_boundaries(u.target_tokens, m, u.duration_ms, cfg.chunk_ms)


def utterance_trajectory(u: AlignedUtterance, cfg: SynthesisConfig = SynthesisConfig()) -> Trajectory:
    return build_trajectory(u, enforce_monotonic(word_boundaries(u)), cfg)


def merge_chunks(t: Trajectory, multiplier: int) -> Trajectory:
    """Group every ``multiplier`` consecutive steps into one (last group may be short)."""
    if multiplier < 1:
        raise ContractError("latency multiplier must be ≥ 1")
    spans, ends = [], []
    for g in range(0, t.n_steps, multiplier):
        last = min(g + multiplier, t.n_steps) - 1
        spans.append((t.spans[g][0], t.spans[last][1]))
        ends.append(t.step_ends_ms[last])
    return replace(t, spans=spans, step_ends_ms=ends, flags=list(t.flags))


# ----------------------------------------------------------------------------
# robust segments


@dataclass
class RobustSegment:
    segment_id: str
    trajectory: Trajectory
    provenance: list[dict]
    frames: np.ndarray | None = None
    recording_id: str | None = None
    start_ms: int = 0
    flags: list[str] = field(default_factory=list)
    # (text, start_ms, end_ms) relative to the segment start
    source_words: list[tuple[str, int, int]] = field(default_factory=list)

    @property
    def n_chunks(self) -> int:
        return self.trajectory.n_steps


def _place(members: list[tuple[AlignedUtterance, int]], seg_ms: int, chunk_ms: int):
    """Concatenate utterance tokens with segment-relative boundaries (``offset`` = utterance start)."""
    tokens, bounds, prov, words, truncated = [], [], [], [], False
    for u, offset in members:
        words.extend((w, offset + a, offset + b) for w, a, b in u.source_words if offset + b <= seg_ms)
        m = enforce_monotonic(word_boundaries(u))
        kept = 0
        for tok, b in zip(u.target_tokens, m):
            rel = offset + min(b, u.duration_ms)
            if rel > seg_ms:
                break
            tokens.append(tok)
            bounds.append(rel)
            kept += 1
        cut = kept < len(u.target_tokens) or offset + u.duration_ms > seg_ms
        truncated |= cut
        prov.append(
            {"utt_id": u.utt_id, "offset_ms": int(offset), "n_tokens": kept, "truncated": bool(cut)}
        )
    bounds = enforce_monotonic(bounds)
    return trajectory_from_boundaries(tokens, bounds, seg_ms, chunk_ms), prov, words, truncated


def _frames_slice(frames: np.ndarray, start: int, n: int) -> tuple[np.ndarray, bool]:
    part = frames[start : start + n]
    if len(part) == n:
        return part.copy(), False
    out = np.zeros((n, frames.shape[1]))
    out[: len(part)] = part
    return out, True


def slice_robust_segments(
    recording: Sequence[AlignedUtterance],
    cfg: SynthesisConfig = SynthesisConfig(),
    frames: np.ndarray | None = None,
    recording_id: str | None = None,
) -> list[RobustSegment]:
    """Cut an unsegmented recording into ``seg_chunks``-chunk segments.

    A window that would begin inside an utterance is moved back to that
    utterance's start. Utterances cut by a segment's end keep only the tokens
    whose boundary still falls inside; they reappear in full in the next window.
    """
    utts = sorted(recording, key=lambda u: u.utterance_span[0])
    if not utts:
        return []
    rec_id = recording_id or utts[0].recording_id
    rec_end = max(u.utterance_span[1] for u in utts)
    if frames is not None:
        rec_end = max(rec_end, len(frames) * cfg.frame_ms)
    seg_ms, seg_frames = cfg.seg_ms, cfg.seg_chunks * cfg.chunk_frames
    segments, cursor, prev = [], 0, None
    while cursor < rec_end:
        flags = []
        inside = [u for u in utts if u.utterance_span[0] < cursor < u.utterance_span[1]]
        if inside:
            start = inside[0].utterance_span[0]
            if prev is None or start > prev:
                cursor = start
            else:
                flags.append("unshiftable_start")
        cursor -= cursor % cfg.frame_ms
        members = [(u, u.utterance_span[0] - cursor) for u in utts if cursor <= u.utterance_span[0] < cursor + seg_ms]
        if members:
            traj, prov, words, truncated = _place(members, seg_ms, cfg.chunk_ms)
            if truncated:
                flags.append("truncated_utterance")
            seg_frames_arr = None
            if frames is not None:
                seg_frames_arr, padded = _frames_slice(frames, cursor // cfg.frame_ms, seg_frames)
                if padded:
                    flags.append("padded")
            elif cursor + seg_ms > rec_end:
                flags.append("padded")
            segments.append(
                RobustSegment(
                    segment_id=f"{rec_id}:{cursor}",
                    trajectory=traj,
                    provenance=prov,
                    frames=seg_frames_arr,
                    recording_id=rec_id,
                    start_ms=cursor,
                    flags=flags + traj.flags,
                    source_words=words,
                )
            )
        prev = cursor
        cursor += seg_ms
    return segments


def _silence_ms(rng: np.random.Generator, cfg: SynthesisConfig) -> int:
    if cfg.silence_model == "fixed":
        ms = cfg.silence_mean_ms
    else:
        ms = min(rng.exponential(cfg.silence_mean_ms), cfg.silence_max_ms) if cfg.silence_mean_ms > 0 else 0.0
    return int(round(ms / cfg.frame_ms)) * cfg.frame_ms


def simulate_robust_segment(
    pool: Sequence[AlignedUtterance],
    cfg: SynthesisConfig = SynthesisConfig(),
    seed: int = 0,
    frames_by_utt: dict[str, np.ndarray] | None = None,
    segment_id: str | None = None,
) -> RobustSegment:
    """Concatenate randomly drawn utterances with silences until the segment is full."""
    if not pool:
        raise ContractError("utterance pool is empty")
    rng = make_rng(seed)
    seg_ms = cfg.seg_ms
    t = _silence_ms(rng, cfg) if rng.random() < cfg.lead_silence_prob else 0
    members, flags = [], []
    for idx in rng.permutation(len(pool)):
        u = pool[int(idx)]
        dur = math.ceil(u.duration_ms / cfg.frame_ms) * cfg.frame_ms
        if t + dur > seg_ms:
            if members:
                break
            t = max(0, seg_ms - dur)
            if dur > seg_ms:
                flags.append("truncated_utterance")
        members.append((u, t))
        t += dur + _silence_ms(rng, cfg)
        if t >= seg_ms:
            break
    traj, prov, words, _ = _place(members, seg_ms, cfg.chunk_ms)
    seg_frames = None
    if frames_by_utt is not None:
        d_in = next(iter(frames_by_utt.values())).shape[1]
        n = cfg.seg_chunks * cfg.chunk_frames
        seg_frames = np.zeros((n, d_in))
        for u, offset in members:
            f = frames_by_utt[u.utt_id]
            a = offset // cfg.frame_ms
            take = min(len(f), n - a)
            seg_frames[a : a + take] = f[:take]
    return RobustSegment(
        segment_id=segment_id or f"sim:{seed}",
        trajectory=traj,
        provenance=prov,
        frames=seg_frames,
        flags=flags + traj.flags,
        source_words=words,
    )


def sample_multiplier(rng: np.random.Generator, cfg: SynthesisConfig = SynthesisConfig()) -> int:
    return int(rng.integers(1, cfg.max_multiplier + 1))


def segment_hours(n_segments: int, cfg: SynthesisConfig = SynthesisConfig()) -> float:
    return n_segments * cfg.seg_ms / 3_600_000


# ----------------------------------------------------------------------------
# manifests


def segment_to_record(seg: RobustSegment, features: str | None = None, start_frame: int | None = None) -> dict:
    t = seg.trajectory
    return {
        "schema": SEGMENT_SCHEMA,
        "segment_id": seg.segment_id,
        "recording_id": seg.recording_id,
        "start_ms": seg.start_ms,
        "features": features,
        "start_frame": start_frame,
        "chunk_ms": t.chunk_ms,
        "steps": [[j + 1, t.step_tokens(j), t.boundaries[lo:hi]] for j, (lo, hi) in enumerate(t.spans)],
        "provenance": seg.provenance,
        "flags": seg.flags,
        "source_words": [list(w) for w in seg.source_words],
    }


def segment_from_record(rec: dict, frames: np.ndarray | None = None) -> RobustSegment:
    if rec.get("schema") != SEGMENT_SCHEMA:
        raise ValueError(f"unknown schema {rec.get('schema')!r}")
    chunk_ms = int(rec["chunk_ms"])
    tokens, bounds, spans, ends = [], [], [], []
    for j, step_tokens, step_bounds in rec["steps"]:
        spans.append((len(tokens), len(tokens) + len(step_tokens)))
        tokens.extend(step_tokens)
        bounds.extend(int(b) for b in step_bounds)
        ends.append(int(j) * chunk_ms)
    traj = Trajectory(tokens, spans, ends, bounds, chunk_ms, [f for f in rec.get("flags", []) if f == "boundary_past_end"])
    return RobustSegment(
        segment_id=rec["segment_id"],
        trajectory=traj,
        provenance=rec.get("provenance", []),
        frames=frames,
        recording_id=rec.get("recording_id"),
        start_ms=int(rec.get("start_ms", 0)),
        flags=list(rec.get("flags", [])),
        source_words=[(str(w), int(a), int(b)) for w, a, b in rec.get("source_words", [])],
    )


def write_jsonl(path, records: Iterable[dict]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True, ensure_ascii=False) + "\n")


def read_jsonl(path) -> list[dict]:
    with open(path, encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]


def read_alignments(path) -> list[AlignedUtterance]:
    return [AlignedUtterance.from_record(r) for r in read_jsonl(path)]
