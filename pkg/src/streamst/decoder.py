"""Multi-turn decoder with an instruction cache plus a bounded rolling cache.

A dialogue is laid out as::

    <instruction tokens>
    <user> e_1 ... e_n <assistant> y_1 ... y_k <read>
    <user> e_1 ... e_n <assistant> ... <read>
    ...

where ``e_i`` are speech embeddings from the adapter and ``<read>`` is the
action token meaning "need more speech". Each ``<user> ... <read>`` group is
one *turn unit*; eviction drops whole units, oldest first.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .attention import CAUSAL, RopeConfig, attention, build_chunkwise_mask, chunk_visibility, rope_apply
from .layers import Block, LayerNorm, Linear, Module
from .tensor import ContractError, ShapeError, Tensor


@dataclass(frozen=True)
class SpecialTokens:
    pad: int = 0
    read: int = 1
    user: int = 2
    assistant: int = 3

    @property
    def ids(self) -> tuple[int, ...]:
        return (self.pad, self.read, self.user, self.assistant)


SPECIAL_NAMES = ("<pad>", "<read>", "<user>", "<assistant>")


@dataclass
class Vocabulary:
    """Symbol table; the four special tokens always occupy ids 0..3."""

    symbols: list[str]

    @classmethod
    def build(cls, symbols: Sequence[str]) -> "Vocabulary":
        extra = [s for s in symbols if s not in SPECIAL_NAMES]
        return cls(list(SPECIAL_NAMES) + extra)

    def __post_init__(self):
        self._index = {s: i for i, s in enumerate(self.symbols)}

    def __len__(self) -> int:
        return len(self.symbols)

    @property
    def special(self) -> SpecialTokens:
        return SpecialTokens()

    def id(self, symbol: str) -> int:
        return self._index[symbol]

    def encode(self, symbols: Sequence[str]) -> list[int]:
        return [self._index[s] for s in symbols]

    def decode(self, ids: Sequence[int]) -> list[str]:
        return [self.symbols[i] for i in ids]


@dataclass(frozen=True)
class DecoderConfig:
    vocab_size: int
    d_model: int = 64
    n_layers: int = 2
    n_heads: int = 4
    recent_window: int = 1024
    rope_base: float = 10000.0

    @property
    def rope(self) -> RopeConfig:
        return RopeConfig(self.d_model // self.n_heads, self.rope_base)


@dataclass(frozen=True)
class GenConfig:
    beam_size: int = 4
    repetition_penalty: float = 1.2
    no_repeat_ngram: int = 5
    max_new_tokens: int = 16
    length_normalize: bool = True

    def __post_init__(self):
        if self.beam_size < 1:
            raise ContractError("beam_size must be ≥ 1")
        if self.repetition_penalty <= 0:
            raise ContractError("repetition_penalty must be positive")
        if self.no_repeat_ngram < 0:
            raise ContractError("no_repeat_ngram must be ≥ 0")
        if self.max_new_tokens < 1:
            raise ContractError("max_new_tokens must be ≥ 1")


KV = list[tuple[np.ndarray, np.ndarray]]  # per layer, [heads, n, head_dim] each


@dataclass(frozen=True)
class Unit:
    size: int
    text: tuple[int, ...] = ()


@dataclass(frozen=True)
class DialogueState:
    instruction: KV
    rolling: KV
    units: tuple[Unit, ...] = ()
    next_logits: np.ndarray | None = None
    recent_window: int = 1024
    # (kind, payload) per rolling entry: ("tok", id) or ("emb", vector); used by oracles
    items: tuple = ()
    flags: tuple[str, ...] = ()

    @property
    def instruction_len(self) -> int:
        return self.instruction[0][0].shape[1]

    @property
    def rolling_len(self) -> int:
        return self.rolling[0][0].shape[1]

    @property
    def logical_position(self) -> int:
        return self.instruction_len + self.rolling_len

    @property
    def token_history(self) -> tuple[int, ...]:
        return tuple(t for u in self.units for t in u.text)


@dataclass
class TurnResult:
    tokens: list[int]
    forced: bool = False


class Decoder(Module):
    def __init__(self, cfg: DecoderConfig, rng: np.random.Generator, special: SpecialTokens = SpecialTokens()):
        self._cfg = cfg
        self._special = special
        self.embed = Tensor(rng.normal(0.0, 1.0, size=(cfg.vocab_size, cfg.d_model)), requires_grad=True)
        self.blocks = [Block(cfg.d_model, cfg.n_heads, rng) for _ in range(cfg.n_layers)]
        self.ln_f = LayerNorm(cfg.d_model)
        self.head = Linear(cfg.d_model, cfg.vocab_size, rng, bias=False)

    @property
    def cfg(self) -> DecoderConfig:
        return self._cfg

    @property
    def special(self) -> SpecialTokens:
        return self._special

    def linears(self) -> list[Linear]:
        return [lin for b in self.blocks for lin in b.linears()]

    # -- full-sequence path (training and no-cache oracle) -------------------

    def embed_sequence(self, ids, speech: Tensor | None = None) -> Tensor:
        """Token embeddings, with speech rows placed where ``ids == -1``."""
        ids = np.asarray(ids, dtype=np.int64)
        slots = np.nonzero(ids < 0)[0]
        x = T.take_rows(self.embed, np.where(ids < 0, self._special.pad, ids))
        if len(slots) == 0:
            return x
        if speech is None or speech.shape[0] != len(slots):
            raise ShapeError(f"{len(slots)} speech slots but {0 if speech is None else speech.shape[0]} rows")
        if speech.shape[1] != self._cfg.d_model:
            raise ShapeError(f"speech width {speech.shape[1]} != decoder width {self._cfg.d_model}")
        keep = np.ones((len(ids), 1))
        keep[slots] = 0.0
        return x * keep + T.scatter_rows(speech, slots, len(ids))

    def forward_full(self, x: Tensor, positions=None) -> Tensor:
        n = x.shape[0]
        positions = np.arange(n) if positions is None else np.asarray(positions)
        mask = build_chunkwise_mask(n, CAUSAL)
        for block in self.blocks:
            x = block.full(x, positions, mask, self._cfg.rope)
        return self.head(self.ln_f(x))

    def logits_for_items(self, items) -> np.ndarray:
        """Recompute logits for an explicit item list from scratch (no cache)."""
        return self.forward_full(Tensor(self.item_rows(items))).data

    def item_rows(self, items) -> np.ndarray:
        rows = []
        for kind, payload in items:
            rows.append(self.embed.data[payload] if kind == "tok" else np.asarray(payload))
        return np.stack(rows)

    # -- incremental path ----------------------------------------------------

    def forward_step(self, past: KV, x_new: np.ndarray) -> tuple[np.ndarray, KV]:
        """Run new rows after ``past`` (positions continue contiguously from 0)."""
        n = x_new.shape[0]
        p0 = past[0][0].shape[1]
        q_pos = p0 + np.arange(n)
        k_pos = np.arange(p0 + n)
        mask = chunk_visibility(q_pos, k_pos, CAUSAL)
        rope = self._cfg.rope
        x = Tensor(x_new)
        new_kv: KV = []
        for block, (pk, pv) in zip(self.blocks, past):
            q, k, v = block.project(x)
            keys = np.concatenate([pk, k.data], axis=1)
            values = np.concatenate([pv, v.data], axis=1)
            out = attention(rope_apply(q.data, q_pos, rope), rope_apply(keys, k_pos, rope), values, mask)
            x = block.finish(x, out)
            new_kv.append((k.data, v.data))
        return self.head(self.ln_f(x)).data, new_kv

    def empty_kv(self) -> KV:
        h = self._cfg.n_heads
        hd = self._cfg.d_model // h
        return [(np.zeros((h, 0, hd)), np.zeros((h, 0, hd))) for _ in self.blocks]


def _cat(*kvs: KV) -> KV:
    return [
        (np.concatenate([kv[i][0] for kv in kvs], axis=1), np.concatenate([kv[i][1] for kv in kvs], axis=1))
        for i in range(len(kvs[0]))
    ]


def _past(state: DialogueState, extra: KV | None = None) -> KV:
    parts = [state.instruction, state.rolling] + ([extra] if extra is not None else [])
    return _cat(*parts)


def init_dialogue(decoder: Decoder, instruction_tokens: Sequence[int], recent_window: int | None = None) -> DialogueState:
    if len(instruction_tokens) == 0:
        raise ContractError("instruction must be non-empty")
    x = decoder.embed.data[np.asarray(instruction_tokens, dtype=np.int64)]
    logits, kv = decoder.forward_step(decoder.empty_kv(), x)
    window = decoder.cfg.recent_window if recent_window is None else recent_window
    return DialogueState(
        instruction=kv, rolling=decoder.empty_kv(), next_logits=logits[-1], recent_window=window
    )


def _append(decoder: Decoder, state: DialogueState, items: list, new_unit: bool, text: Sequence[int] = ()) -> DialogueState:
    rows = decoder.item_rows(items)
    logits, kv = decoder.forward_step(_past(state), rows)
    units = list(state.units)
    if new_unit or not units:
        units.append(Unit(len(items), tuple(text)))
    else:
        last = units[-1]
        units[-1] = Unit(last.size + len(items), last.text + tuple(text))
    return replace(
        state,
        rolling=_cat(state.rolling, kv),
        units=tuple(units),
        next_logits=logits[-1],
        items=state.items + tuple(items),
    )


def append_speech_turn(decoder: Decoder, state: DialogueState, embeddings) -> DialogueState:
    """Open a new turn unit: ``<user>`` + speech embeddings + ``<assistant>``."""
    emb = np.asarray(embeddings.data if isinstance(embeddings, Tensor) else embeddings, dtype=np.float64)
    if emb.ndim != 2 or emb.shape[0] < 1:
        raise ShapeError("speech turn needs at least one embedding row")
    if emb.shape[1] != decoder.cfg.d_model:
        raise ShapeError(f"embedding width {emb.shape[1]} != decoder width {decoder.cfg.d_model}")
    sp = decoder.special
    items = [("tok", sp.user)] + [("emb", row) for row in emb] + [("tok", sp.assistant)]
    return _append(decoder, state, items, new_unit=True)


SPEECH_TURN_DELIMITERS = 2


# -- logits processors -------------------------------------------------------


def apply_repetition_penalty(logits: np.ndarray, history: Sequence[int], penalty: float) -> np.ndarray:
    """Divide positive / multiply negative logits of every token seen in ``history``."""
    if penalty <= 0:
        raise ContractError("repetition penalty must be positive")
    out = np.array(logits, dtype=np.float64)
    if penalty == 1.0 or len(history) == 0:
        return out
    seen = np.unique(np.asarray(history, dtype=np.int64))
    vals = out[seen]
    out[seen] = np.where(vals > 0, vals / penalty, vals * penalty)
    return out


def banned_ngram_tokens(history: Sequence[int], n: int) -> set[int]:
    if n <= 0 or len(history) < n:
        return set()
    history = tuple(history)
    prefix = history[len(history) - n + 1 :] if n > 1 else ()
    banned = set()
    for i in range(len(history) - n + 1):
        if history[i : i + n - 1] == prefix:
            banned.add(history[i + n - 1])
    return banned


def block_repeat_ngrams(logits: np.ndarray, history: Sequence[int], n: int, exempt: Sequence[int] = ()) -> np.ndarray:
    """Set to -inf every token that would complete an n-gram already in ``history``."""
    if n < 0:
        raise ContractError("n must be ≥ 0")
    out = np.array(logits, dtype=np.float64)
    for tok in banned_ngram_tokens(history, n) - set(exempt):
        out[tok] = -np.inf
    return out


def log_softmax_np(x: np.ndarray) -> np.ndarray:
    finite = np.isfinite(x)
    m = x[finite].max()
    z = np.where(finite, x - m, -np.inf)
    return z - np.log(np.exp(z).sum())


def step_log_probs(logits: np.ndarray, context: Sequence[int], cfg: GenConfig, read_token: int) -> np.ndarray:
    """Penalised, n-gram-blocked next-token log-probabilities."""
    z = apply_repetition_penalty(logits, context, cfg.repetition_penalty)
    z = block_repeat_ngrams(z, context, cfg.no_repeat_ngram, exempt=(read_token,))
    return log_softmax_np(z)


def sequence_score(total: float, length: int, cfg: GenConfig) -> float:
    return total / length if cfg.length_normalize else total


@dataclass
class _Hyp:
    score: float
    tokens: tuple[int, ...]


def beam_search(
    score_fn: Callable[[tuple[int, ...]], np.ndarray],
    cfg: GenConfig,
    read_token: int,
    history: Sequence[int] = (),
) -> TurnResult:
    """Beam search over one turn.

    ``score_fn(prefix)`` returns raw next-token logits after ``prefix``. A
    hypothesis completes when it emits ``read_token`` or reaches
    ``max_new_tokens``. The winner maximises the (optionally length-normalised)
    summed log-probability; ties go to the lexicographically smallest token
    sequence. Returned tokens exclude the read token.
    """
    history = tuple(history)
    live = [_Hyp(0.0, ())]
    finished: list[tuple[float, tuple[int, ...]]] = []
    for step in range(1, cfg.max_new_tokens + 1):
        cands: list[_Hyp] = []
        for hyp in live:
            lp = step_log_probs(score_fn(hyp.tokens), history + hyp.tokens, cfg, read_token)
            for tok in np.nonzero(np.isfinite(lp))[0]:
                cands.append(_Hyp(hyp.score + float(lp[tok]), hyp.tokens + (int(tok),)))
        cands.sort(key=lambda h: (-h.score, h.tokens))
        live = []
        for rank, hyp in enumerate(cands):
            if len(live) >= cfg.beam_size and rank >= cfg.beam_size:
                break
            if hyp.tokens[-1] == read_token:
                if rank < cfg.beam_size:
                    finished.append((sequence_score(hyp.score, step, cfg), hyp.tokens))
            elif len(live) < cfg.beam_size:
                live.append(hyp)
        if step == cfg.max_new_tokens:
            finished.extend((sequence_score(h.score, step, cfg), h.tokens) for h in live)
            break
        if not live:
            break
    if not finished:
        return TurnResult([], forced=True)
    best = min(finished, key=lambda f: (-f[0], f[1]))[1]
    if best[-1] == read_token:
        return TurnResult(list(best[:-1]), forced=False)
    return TurnResult(list(best), forced=True)


def generate_turn(decoder: Decoder, state: DialogueState, cfg: GenConfig) -> tuple[TurnResult, DialogueState]:
    """Decode one assistant reply after a speech turn and commit it to the cache.

    The committed reply always ends with ``<read>``; if the beam hit
    ``max_new_tokens`` first the turn is force-closed and flagged.
    """
    if not state.units or state.items[-1] != ("tok", decoder.special.assistant):
        raise ContractError("generate_turn must follow append_speech_turn")
    read = decoder.special.read
    memo: dict[tuple[int, ...], tuple[np.ndarray, KV | None]] = {(): (state.next_logits, None)}
    base = _past(state)

    def score_fn(prefix: tuple[int, ...]) -> np.ndarray:
        if prefix not in memo:
            score_fn(prefix[:-1])
            parent_kv = memo[prefix[:-1]][1]
            past = base if parent_kv is None else _cat(base, parent_kv)
            logits, kv = decoder.forward_step(past, decoder.embed.data[[prefix[-1]]])
            memo[prefix] = (logits[-1], kv if parent_kv is None else _cat(parent_kv, kv))
        return memo[prefix][0]

    result = beam_search(score_fn, cfg, read, state.token_history)
    committed = [("tok", t) for t in result.tokens] + [("tok", read)]
    new_state = _append(decoder, state, committed, new_unit=False, text=result.tokens)
    if result.forced:
        new_state = replace(new_state, flags=new_state.flags + ("forced_close",))
    return result, new_state


def evict_cache(state: DialogueState, recent_window: int | None = None, decoder: Decoder | None = None) -> DialogueState:
    """Keep at most ``recent_window`` rolling entries, dropping whole turn units first.

    If a single remaining unit is still larger than the window, its oldest
    entries are cut and the state is flagged ``split_unit``.

    Retained keys are unrotated, so positions are simply renumbered after the
    instruction. In layers above the first, though, a retained key still
    reflects the evicted context it once attended to. Passing ``decoder``
    re-runs the retained items over the truncated context so the cache equals
    a fresh computation; without it the stored entries are reused as they are.
    """
    window = state.recent_window if recent_window is None else recent_window
    total = state.rolling_len
    if total <= window:
        return state
    units = list(state.units)
    drop = 0
    while total - drop > window and len(units) > 1:
        drop += units.pop(0).size
    flags = state.flags
    if total - drop > window:
        cut = total - drop - window
        units[0] = Unit(units[0].size - cut, units[0].text)
        drop += cut
        flags = flags + ("split_unit",)
    items = state.items[drop:]
    if decoder is None:
        rolling = [(k[:, drop:], v[:, drop:]) for k, v in state.rolling]
        return replace(state, rolling=rolling, units=tuple(units), items=items, flags=flags)
    logits, rolling = decoder.forward_step(state.instruction, decoder.item_rows(items))
    return replace(state, rolling=rolling, units=tuple(units), items=items, flags=flags, next_logits=logits[-1])
