"""Translation quality and streaming latency metrics.

All functions work on pre-tokenised symbol sequences. Stream-level latency
first splits the continuous hypothesis into one block per reference segment
(minimum total edit distance), then averages a per-segment
length-adaptive lag uniformly over segments.
"""

from __future__ import annotations

import json
import math
from collections import Counter
from dataclasses import asdict, dataclass, field
from typing import Hashable, Sequence

import numpy as np

from .tensor import ContractError

REF_SCHEMA = "ref_segment/v1"


@dataclass(frozen=True)
class RefSegment:
    tokens: tuple[str, ...]
    t0_ms: float
    t1_ms: float
    stream: str = ""

    def __post_init__(self):
        if self.t1_ms <= self.t0_ms:
            raise ContractError(f"reference span ({self.t0_ms}, {self.t1_ms}) is empty")

    @property
    def duration_ms(self) -> float:
        return self.t1_ms - self.t0_ms

    def to_record(self) -> dict:
        return {
            "schema": REF_SCHEMA,
            "stream": self.stream,
            "tokens": list(self.tokens),
            "t0_ms": self.t0_ms,
            "t1_ms": self.t1_ms,
        }

    @classmethod
    def from_record(cls, rec: dict) -> "RefSegment":
        if rec.get("schema") != REF_SCHEMA:
            raise ValueError(f"unknown schema {rec.get('schema')!r}")
        return cls(tuple(rec["tokens"]), rec["t0_ms"], rec["t1_ms"], rec.get("stream", ""))


def check_refs(refs: Sequence[RefSegment]) -> None:
    for a, b in zip(refs, refs[1:]):
        if b.t0_ms < a.t1_ms:
            raise ContractError("reference spans must be ordered and non-overlapping")


# ----------------------------------------------------------------------------
# BLEU


def _ngrams(tokens: Sequence[Hashable], n: int) -> Counter:
    return Counter(tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1))


def bleu_stats(hypotheses, references, max_n: int = 4) -> tuple[list[int], list[int], int, int]:
    """Clipped matches and totals per order, hypothesis length, reference length."""
    if len(hypotheses) != len(references):
        raise ContractError("hypothesis and reference counts differ")
    if not hypotheses:
        raise ContractError("empty corpus")
    matches, totals, hyp_len, ref_len = [0] * max_n, [0] * max_n, 0, 0
    for hyp, ref in zip(hypotheses, references):
        hyp_len += len(hyp)
        ref_len += len(ref)
        for n in range(1, max_n + 1):
            h, r = _ngrams(hyp, n), _ngrams(ref, n)
            matches[n - 1] += sum(min(c, r[g]) for g, c in h.items())
            totals[n - 1] += max(len(hyp) - n + 1, 0)
    return matches, totals, hyp_len, ref_len


def corpus_bleu(hypotheses, references, max_n: int = 4) -> float:
    """Corpus BLEU in [0, 100], no smoothing."""
    matches, totals, c, r = bleu_stats(hypotheses, references, max_n)
    if c == 0 or any(m == 0 for m in matches):
        return 0.0
    log_prec = sum(math.log(m / t) for m, t in zip(matches, totals)) / max_n
    bp = 1.0 if c > r else math.exp(1.0 - r / c)
    return 100.0 * bp * math.exp(log_prec)


# ----------------------------------------------------------------------------
# resegmentation


def _prefix_distances(block: Sequence, ref: Sequence) -> np.ndarray:
    """``out[b] = edit_distance(block[:b], ref)`` for every ``b``."""
    L = len(ref)
    col = np.arange(L + 1)  # distances of block[:0] to ref[:j]
    out = [col[L]]
    for tok in block:
        new = np.empty_like(col)
        new[0] = col[0] + 1
        for j in range(1, L + 1):
            new[j] = min(col[j] + 1, new[j - 1] + 1, col[j - 1] + (tok != ref[j - 1]))
        col = new
        out.append(col[L])
    return np.asarray(out)


def _suffix_distances(hyp: Sequence, ref: Sequence) -> np.ndarray:
    """``D[i, j] = edit_distance(hyp[i:], ref[j:])``."""
    N, M = len(hyp), len(ref)
    D = np.zeros((N + 1, M + 1), dtype=np.int64)
    D[N, :] = M - np.arange(M + 1)
    D[:, M] = N - np.arange(N + 1)
    for i in range(N - 1, -1, -1):
        for j in range(M - 1, -1, -1):
            D[i, j] = min(D[i + 1, j] + 1, D[i, j + 1] + 1, D[i + 1, j + 1] + (hyp[i] != ref[j]))
    return D


def resegment_spans(hyp: Sequence, refs: Sequence[Sequence]) -> list[tuple[int, int]]:
    """Split ``hyp`` into ``len(refs)`` contiguous blocks minimising the summed
    edit distance to the references; among optimal splits the earliest wins.

    The optimum over splits equals the edit distance between ``hyp`` and the
    concatenated references, so suffix distances against that concatenation
    give the exact cost-to-go used to pick each split greedily.
    """
    K = len(refs)
    if K == 0:
        raise ContractError("no reference segments")
    concat = [t for r in refs for t in r]
    starts = np.cumsum([0] + [len(r) for r in refs])
    D = _suffix_distances(hyp, concat)
    spans, a = [], 0
    for k in range(K - 1):
        target = D[a, starts[k]]
        head = _prefix_distances(hyp[a:], refs[k])
        b = next(b for b in range(len(hyp) - a + 1) if head[b] + D[a + b, starts[k + 1]] == target)
        spans.append((a, a + b))
        a += b
    spans.append((a, len(hyp)))
    return spans


def resegment(hyp: Sequence, refs: Sequence[Sequence]) -> list[list]:
    return [list(hyp[lo:hi]) for lo, hi in resegment_spans(hyp, refs)]


# ----------------------------------------------------------------------------
# latency


def lag_cutoff(delays: Sequence[float], duration_ms: float) -> int:
    """Number of tokens counted: up to and including the first one at or after the source end."""
    reached = np.nonzero(np.asarray(delays, dtype=np.float64) >= duration_ms)[0]
    return int(reached[0]) + 1 if len(reached) else len(delays)


def laal_segment(delays: Sequence[float], duration_ms: float, ref_len: int, cutoff: int | None = None) -> float:
    """Length-adaptive average lagging of one segment.

    ``delays`` are emission times relative to the segment start. Lag is
    averaged over the first ``cutoff`` tokens (by default :func:`lag_cutoff`);
    the ideal pace uses the longer of reference and hypothesis. An empty
    hypothesis lags by the full duration.
    """
    if duration_ms <= 0:
        raise ContractError("segment duration must be positive")
    d = np.asarray(delays, dtype=np.float64)
    if len(d) == 0:
        return float(duration_ms)
    if np.any(np.diff(d) < 0):
        raise ContractError("delays must be nondecreasing")
    tau = lag_cutoff(d, duration_ms) if cutoff is None else cutoff
    if not 1 <= tau <= len(d):
        raise ContractError(f"cutoff {tau} outside [1, {len(d)}]")
    rate = duration_ms / max(ref_len, len(d))
    return float(np.mean(d[:tau] - np.arange(tau) * rate))


@dataclass
class SegmentLatency:
    ref_len: int
    hyp_len: int
    laal_ms: float
    laal_ca_ms: float
    hypothesis: list[str] = field(default_factory=list)


def _segment_latencies(tokens, ideal, ca, refs: Sequence[RefSegment]) -> list[SegmentLatency]:
    check_refs(refs)
    out = []
    for (lo, hi), ref in zip(resegment_spans(tokens, [r.tokens for r in refs]), refs):
        di = [t - ref.t0_ms for t in ideal[lo:hi]]
        dc = [t - ref.t0_ms for t in ca[lo:hi]]
        # the computation-aware lag counts the same tokens as the ideal one, so
        # it differs only by processing delay (a cutoff of its own could drop a
        # late token and come out lower)
        cut = lag_cutoff(di, ref.duration_ms) if di else None
        out.append(
            SegmentLatency(
                len(ref.tokens),
                hi - lo,
                laal_segment(di, ref.duration_ms, len(ref.tokens)),
                laal_segment(dc, ref.duration_ms, len(ref.tokens), cut),
                list(tokens[lo:hi]),
            )
        )
    return out


def stream_laal(log, refs: Sequence[RefSegment], mode: str = "ideal") -> float:
    """Uniform average of per-segment lag after resegmenting the stream output."""
    if mode not in ("ideal", "ca"):
        raise ContractError(f"unknown latency mode {mode!r}")
    segs = _segment_latencies(log.tokens, log.ideal_times, log.ca_times, refs)
    return float(np.mean([s.laal_ms if mode == "ideal" else s.laal_ca_ms for s in segs]))


@dataclass
class LatencyReport:
    bleu: float
    stream_laal_ms: float
    stream_laal_ca_ms: float
    segments: list[SegmentLatency] = field(default_factory=list)

    def headline(self) -> str:
        return f"{self.bleu:.2f} / {self.stream_laal_ms:.0f} / {self.stream_laal_ca_ms:.0f}"

    def to_dict(self) -> dict:
        return {
            "bleu": round(self.bleu, 6),
            "stream_laal_ms": round(self.stream_laal_ms, 6),
            "stream_laal_ca_ms": round(self.stream_laal_ca_ms, 6),
            "segments": [
                {k: (round(v, 6) if isinstance(v, float) else v) for k, v in asdict(s).items()} for s in self.segments
            ],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, ensure_ascii=False)


def evaluate_streams(logs: Sequence, refs_per_stream: Sequence[Sequence[RefSegment]]) -> LatencyReport:
    """BLEU over all resegmented blocks; lags averaged uniformly over all segments."""
    if len(logs) != len(refs_per_stream) or not logs:
        raise ContractError("need one reference list per emission log")
    segs, hyps, refs = [], [], []
    for log, stream_refs in zip(logs, refs_per_stream):
        cur = _segment_latencies(log.tokens, log.ideal_times, log.ca_times, stream_refs)
        segs += cur
        hyps += [s.hypothesis for s in cur]
        refs += [list(r.tokens) for r in stream_refs]
    return LatencyReport(
        corpus_bleu(hyps, refs),
        float(np.mean([s.laal_ms for s in segs])),
        float(np.mean([s.laal_ca_ms for s in segs])),
        segs,
    )
