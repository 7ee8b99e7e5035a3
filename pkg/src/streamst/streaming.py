"""Streaming inference over unbounded feature streams.

Every ``k`` chunks the engine encodes the new speech incrementally, adapts it,
opens a decoder turn and decodes until ``<read>``. Each emitted token gets two
timestamps: the ideal time (source time of the speech it was conditioned on)
and a computation-aware time that also accounts for processing, simulated by a
:class:`CostModel` so results do not depend on the machine.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field
from typing import Iterator

import numpy as np

from .decoder import DialogueState, GenConfig, append_speech_turn, evict_cache, generate_turn, init_dialogue
from .encoder import EncoderState, read_features
from .model import SpeechTranslator
from .tensor import ContractError

LOG_SCHEMA = "emission_log/v1"


class StreamError(RuntimeError):
    """The input stream is malformed (gap, overlap or wrong frame width)."""


class StreamSource:
    """Pull-based frame source; ``pull(n)`` returns up to ``n`` frames and their start times."""

    def __init__(self, frames: np.ndarray, frame_ms: int = 20, start_ms: float = 0, timestamps=None):
        self._frames = np.asarray(frames, dtype=np.float64)
        if self._frames.ndim != 2:
            raise StreamError("frames must be a [T, d] array")
        n = len(self._frames)
        if timestamps is None:
            timestamps = start_ms + frame_ms * np.arange(n)
        timestamps = np.asarray(timestamps, dtype=np.float64)
        if len(timestamps) != n:
            raise StreamError("one timestamp per frame required")
        steps = np.diff(timestamps)
        if len(steps) and not np.allclose(steps, frame_ms, rtol=0, atol=1e-9):
            bad = int(np.nonzero(~np.isclose(steps, frame_ms, rtol=0, atol=1e-9))[0][0])
            raise StreamError(f"timestamp discontinuity after frame {bad}: {timestamps[bad]} -> {timestamps[bad + 1]}")
        self._times = timestamps
        self.frame_ms = frame_ms
        self._cursor = 0

    @classmethod
    def from_file(cls, path) -> "StreamSource":
        frames, header = read_features(path)
        return cls(frames, header["frame_ms"], header.get("start_ms", 0))

    @property
    def d_in(self) -> int:
        return self._frames.shape[1]

    @property
    def start_ms(self) -> float:
        return float(self._times[0]) if len(self._times) else 0.0

    @property
    def duration_ms(self) -> float:
        return len(self._frames) * self.frame_ms

    @property
    def exhausted(self) -> bool:
        return self._cursor >= len(self._frames)

    def pull(self, n: int) -> tuple[np.ndarray, np.ndarray]:
        lo, hi = self._cursor, min(self._cursor + n, len(self._frames))
        self._cursor = hi
        return self._frames[lo:hi], self._times[lo:hi]

    def groups(self, n: int) -> Iterator[tuple[np.ndarray, np.ndarray]]:
        while not self.exhausted:
            yield self.pull(n)


@dataclass(frozen=True)
class CostModel:
    """Simulated processing time: ``per_embedding_ms`` per new speech embedding
    (encoder, adapter and prefill) plus ``per_token_ms`` per decoding step.

    ``mode="measured"`` uses real elapsed time instead and is not reproducible.
    """

    per_embedding_ms: float = 0.0
    per_token_ms: float = 0.0
    mode: str = "simulated"

    def __post_init__(self):
        if self.per_embedding_ms < 0 or self.per_token_ms < 0:
            raise ContractError("cost model must be nonnegative")
        if self.mode not in ("simulated", "measured"):
            raise ContractError(f"unknown cost mode {self.mode!r}")

    def cost(self, n_new_embeddings: int, n_generated_tokens: int) -> float:
        return self.per_embedding_ms * n_new_embeddings + self.per_token_ms * n_generated_tokens


@dataclass(frozen=True)
class Emission:
    token: str
    ideal_ms: float
    ca_ms: float
    turn: int


@dataclass
class EmissionLog:
    records: list[Emission] = field(default_factory=list)
    source_ms: float = 0.0
    multiplier: int = 1
    forced_turns: list[int] = field(default_factory=list)
    stream: str = ""

    @property
    def tokens(self) -> list[str]:
        return [r.token for r in self.records]

    @property
    def ideal_times(self) -> list[float]:
        return [r.ideal_ms for r in self.records]

    @property
    def ca_times(self) -> list[float]:
        return [r.ca_ms for r in self.records]

    def to_jsonl(self) -> str:
        header = {
            "schema": LOG_SCHEMA,
            "source_ms": self.source_ms,
            "multiplier": self.multiplier,
            "forced_turns": self.forced_turns,
            "stream": self.stream,
        }
        lines = [json.dumps(header, sort_keys=True)]
        for r in self.records:
            rec = {"token": r.token, "ideal_ms": r.ideal_ms, "ca_ms": round(r.ca_ms, 6), "turn": r.turn}
            lines.append(json.dumps(rec, sort_keys=True, ensure_ascii=False))
        return "\n".join(lines) + "\n"

    def write(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(self.to_jsonl())

    @classmethod
    def read(cls, path) -> "EmissionLog":
        with open(path, encoding="utf-8") as fh:
            lines = [json.loads(line) for line in fh if line.strip()]
        if not lines or lines[0].get("schema") != LOG_SCHEMA:
            raise ValueError(f"{path}: not an emission log")
        h = lines[0]
        recs = [Emission(r["token"], r["ideal_ms"], r["ca_ms"], r["turn"]) for r in lines[1:]]
        return cls(recs, h["source_ms"], h.get("multiplier", 1), list(h.get("forced_turns", [])), h.get("stream", ""))


@dataclass(frozen=True)
class EngineState:
    encoder: EncoderState
    dialogue: DialogueState
    turn: int = 0
    source_end_ms: float = 0.0
    # end of the simulated processing backlog
    busy_until_ms: float = 0.0


@dataclass
class StreamingEngine:
    model: SpeechTranslator
    gen: GenConfig = field(default_factory=GenConfig)
    cost: CostModel = field(default_factory=CostModel)

    def init_state(self, start_ms: float = 0.0) -> EngineState:
        dlg = init_dialogue(self.model.decoder, self.model.instruction_ids, self.model.cfg.recent_window)
        return EngineState(self.model.encoder.init_state(), dlg, 0, start_ms, start_ms)

    def step(
        self, state: EngineState, frames: np.ndarray, final: bool = False, source_end_ms: float | None = None
    ) -> tuple[list[Emission], EngineState, bool]:
        """One encoder/adapter/decoder cycle over a chunk group.

        Mid-stream the group must hold whole chunks; with ``final=True`` a
        trailing partial chunk is zero-padded. Returns the emissions, the new
        state and whether the turn was force-closed.
        """
        cf = self.model.cfg.encoder.chunk_frames
        frames = np.asarray(frames, dtype=np.float64)
        n = len(frames)
        if n == 0:
            raise ContractError("empty chunk group")
        if n % cf:
            if not final:
                raise ContractError(f"mid-stream group of {n} frames is not a multiple of {cf}")
            frames = np.concatenate([frames, np.zeros((cf - n % cf, frames.shape[1]))])
        if source_end_ms is None:
            source_end_ms = state.source_end_ms + n * self.model.cfg.encoder.frame_ms
        t0 = time.perf_counter()
        enc, feats = state.encoder, []
        for c in range(len(frames) // cf):
            out, enc = self.model.encoder.encode_chunk(enc, frames[c * cf : (c + 1) * cf])
            feats.append(out)
        emb = self.model.adapter(np.concatenate(feats)).data
        dlg = append_speech_turn(self.model.decoder, state.dialogue, emb)
        result, dlg = generate_turn(self.model.decoder, dlg, self.gen)
        dlg = evict_cache(dlg, decoder=self.model.decoder)
        elapsed_ms = (time.perf_counter() - t0) * 1000.0

        ideal = float(source_end_ms)
        start = max(state.busy_until_ms, ideal)
        symbols = self.model.vocab.decode(result.tokens)
        emissions = []
        if self.cost.mode == "measured":
            for tok in symbols:
                emissions.append(Emission(tok, ideal, start + elapsed_ms, state.turn))
            busy = start + elapsed_ms
        else:
            clock = start + self.cost.cost(len(emb), 0)
            for tok in symbols:
                clock += self.cost.cost(0, 1)
                emissions.append(Emission(tok, ideal, clock, state.turn))
            busy = clock + self.cost.cost(0, 1)  # the closing <read> step
        new = EngineState(enc, dlg, state.turn + 1, ideal, busy)
        return emissions, new, result.forced


def run_stream(
    src: StreamSource,
    model: SpeechTranslator,
    k: int,
    cost: CostModel = CostModel(),
    gen: GenConfig = GenConfig(),
    stream_id: str = "",
) -> EmissionLog:
    """Translate a whole stream, opening a decoder turn every ``k`` chunks."""
    if k < 1:
        raise ContractError("latency multiplier must be ≥ 1")
    if src.d_in != model.cfg.encoder.d_in:
        raise StreamError(f"stream frames have width {src.d_in}, model expects {model.cfg.encoder.d_in}")
    engine = StreamingEngine(model, gen, cost)
    state = engine.init_state(src.start_ms)
    log = EmissionLog(source_ms=src.duration_ms, multiplier=k, stream=stream_id)
    group = k * model.cfg.encoder.chunk_frames
    for frames, times in src.groups(group):
        final = src.exhausted
        end = float(times[-1]) + src.frame_ms
        emissions, state, forced = engine.step(state, frames, final=final, source_end_ms=end)
        log.records += emissions
        if forced:
            log.forced_turns.append(state.turn - 1)
    return log
