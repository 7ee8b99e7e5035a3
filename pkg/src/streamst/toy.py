"""A synthetic speech translation task small enough to train on a CPU in minutes.

Source "speech" is a sequence of symbol words. Each word is a run of 20 ms
frames carrying the symbol's prototype vector plus a ramp feature falling
from 1 to 0 across the word; silence is zero. The translation maps every
symbol through a fixed permutation, except that a modifier directly
followed by a noun is emitted after that noun, which forces target tokens to
wait for later speech.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .layers import make_rng
from .trajectory import AlignedUtterance, RobustSegment, SynthesisConfig, simulate_robust_segment, slice_robust_segments


@dataclass(frozen=True)
class ToyLanguage:
    n_symbols: int = 8
    n_modifiers: int = 2
    d_in: int = 8
    frame_ms: int = 20
    word_frames: tuple[int, int] = (8, 20)
    words_per_utt: tuple[int, int] = (2, 6)
    max_gap_frames: int = 3
    noise: float = 0.1
    seed: int = 1234

    @property
    def source_symbols(self) -> list[str]:
        return [f"s{i}" for i in range(self.n_symbols)]

    @property
    def target_symbols(self) -> list[str]:
        return [f"t{i}" for i in range(self.n_symbols)]

    @property
    def lexicon(self) -> dict[str, str]:
        perm = make_rng(self.seed).permutation(self.n_symbols)
        return {f"s{i}": f"t{int(perm[i])}" for i in range(self.n_symbols)}

    @property
    def prototypes(self) -> np.ndarray:
        return make_rng(self.seed + 1).normal(0.0, 1.0, size=(self.n_symbols, self.d_in - 1))

    def is_modifier(self, word: str) -> bool:
        return int(word[1:]) < self.n_modifiers

    def translate_words(self, words) -> tuple[list[str], list[tuple[int, int]]]:
        """Target tokens and (source, target) alignment pairs."""
        lex = self.lexicon
        tokens, pairs, i = [], [], 0
        while i < len(words):
            if self.is_modifier(words[i]) and i + 1 < len(words) and not self.is_modifier(words[i + 1]):
                pairs += [(i + 1, len(tokens)), (i, len(tokens) + 1)]
                tokens += [lex[words[i + 1]], lex[words[i]]]
                i += 2
            else:
                pairs.append((i, len(tokens)))
                tokens.append(lex[words[i]])
                i += 1
        return tokens, pairs

    def translate(self, sentence: str) -> str:
        return " ".join(self.translate_words(sentence.split())[0])


def lexicon_align(words, tokens, lexicon: dict[str, str]) -> list[tuple[int, int]]:
    """Pair each target token with the first unused source word that the lexicon maps to it."""
    used, pairs = set(), []
    for t, tok in enumerate(tokens):
        for s, w in enumerate(words):
            if s not in used and lexicon.get(w) == tok:
                used.add(s)
                pairs.append((s, t))
                break
    return pairs


def _utterance(lang: ToyLanguage, rng: np.random.Generator, utt_id: str):
    n_words = int(rng.integers(lang.words_per_utt[0], lang.words_per_utt[1] + 1))
    # grammar: a modifier is always followed by a noun, so whether a modifier's
    # translation must wait is known from the word itself
    picks = []
    for k in range(n_words):
        i = int(rng.integers(0, lang.n_symbols))
        if i < lang.n_modifiers and (k == n_words - 1 or (picks and picks[-1] < lang.n_modifiers)):
            i = int(rng.integers(lang.n_modifiers, lang.n_symbols))
        picks.append(i)
    words = [lang.source_symbols[i] for i in picks]
    protos = lang.prototypes
    rows, timed, t = [], [], 0
    for k, w in enumerate(words):
        if k:
            gap = int(rng.integers(0, lang.max_gap_frames + 1))
            rows.append(np.zeros((gap, lang.d_in)))
            t += gap
        n = int(rng.integers(lang.word_frames[0], lang.word_frames[1] + 1))
        block = np.empty((n, lang.d_in))
        block[:, :-1] = protos[int(w[1:])]
        block[:, -1] = np.linspace(1.0, 0.0, n)
        rows.append(block)
        timed.append((w, t * lang.frame_ms, (t + n) * lang.frame_ms))
        t += n
    frames = np.concatenate(rows)
    frames += rng.normal(0.0, lang.noise, size=frames.shape)
    tokens, pairs = lang.translate_words(words)
    utt = AlignedUtterance(utt_id, timed, tokens, pairs, (0, t * lang.frame_ms))
    return utt, frames


def _silence(rng, lang: ToyLanguage, lo_ms: int, hi_ms: int) -> np.ndarray:
    n = int(rng.integers(lo_ms, hi_ms + 1)) // lang.frame_ms
    return np.zeros((n, lang.d_in))


@dataclass
class Recording:
    recording_id: str
    frames: np.ndarray
    utterances: list[AlignedUtterance]


def make_recording(lang: ToyLanguage, seed: int, duration_ms: int, recording_id: str) -> Recording:
    """Utterances separated by 0.3 to 2 s pauses, with recording-level spans."""
    rng = make_rng(seed)
    parts = [_silence(rng, lang, 0, 1000)]
    t = len(parts[0])
    utts = []
    while True:
        utt, frames = _utterance(lang, rng, f"{recording_id}-u{len(utts)}")
        if (t + len(frames)) * lang.frame_ms > duration_ms:
            break
        start = t * lang.frame_ms
        utt.utterance_span = (start, start + len(frames) * lang.frame_ms)
        utt.recording_id = recording_id
        utts.append(utt)
        parts.append(frames)
        t += len(frames)
        pause = _silence(rng, lang, 300, 2000)
        parts.append(pause)
        t += len(pause)
    total = duration_ms // lang.frame_ms
    frames = np.concatenate(parts)[:total]
    if len(frames) < total:
        frames = np.concatenate([frames, np.zeros((total - len(frames), lang.d_in))])
    return Recording(recording_id, frames, utts)


def make_pool(lang: ToyLanguage, seed: int, n: int) -> tuple[list[AlignedUtterance], dict[str, np.ndarray]]:
    rng = make_rng(seed)
    utts, frames = [], {}
    for i in range(n):
        utt, f = _utterance(lang, rng, f"pool-u{i}")
        utts.append(utt)
        frames[utt.utt_id] = f
    return utts, frames


@dataclass
class ToyCorpus:
    lang: ToyLanguage
    segments: list[RobustSegment]
    heldout: list[Recording] = field(default_factory=list)


@dataclass
class ToySources:
    recordings: list[Recording]
    pool: list[AlignedUtterance]
    pool_frames: dict[str, np.ndarray]
    heldout: list[Recording]

    def training_utterances(self) -> list[AlignedUtterance]:
        return [u for r in self.recordings for u in r.utterances] + self.pool


def make_toy_sources(
    lang: ToyLanguage = ToyLanguage(),
    seed: int = 0,
    n_recordings: int = 8,
    recording_ms: int = 288_000,
    n_pool: int = 400,
    n_heldout: int = 3,
    heldout_ms: int = 57_600,
) -> ToySources:
    recs = [make_recording(lang, seed * 1000 + r, recording_ms, f"rec{r}") for r in range(n_recordings)]
    pool, pool_frames = make_pool(lang, seed * 1000 + 500, n_pool)
    heldout = [make_recording(lang, seed * 1000 + 900 + h, heldout_ms, f"heldout{h}") for h in range(n_heldout)]
    return ToySources(recs, pool, pool_frames, heldout)


def build_segments(src: ToySources, synth: SynthesisConfig, seed: int = 0, n_simulated: int = 120) -> list[RobustSegment]:
    """Sliced long recordings followed by segments simulated from the utterance pool."""
    segments = []
    for rec in src.recordings:
        segments += slice_robust_segments(rec.utterances, synth, rec.frames, rec.recording_id)
    for i in range(n_simulated):
        segments.append(simulate_robust_segment(src.pool, synth, seed * 1000 + 600 + i, src.pool_frames, f"sim{i}"))
    return segments


def make_toy_corpus(
    lang: ToyLanguage = ToyLanguage(),
    synth: SynthesisConfig = SynthesisConfig(),
    seed: int = 0,
    n_recordings: int = 8,
    recording_ms: int = 288_000,
    n_pool: int = 400,
    n_simulated: int = 120,
    n_heldout: int = 3,
    heldout_ms: int = 57_600,
) -> ToyCorpus:
    src = make_toy_sources(lang, seed, n_recordings, recording_ms, n_pool, n_heldout, heldout_ms)
    return ToyCorpus(lang, build_segments(src, synth, seed, n_simulated), src.heldout)
