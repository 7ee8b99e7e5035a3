"""Streaming speech encoder and the speech-to-embedding adapter.

The encoder consumes precomputed acoustic feature frames (one vector per
``frame_ms``). Attention is chunkwise causal with a sliding window of
``window_chunks`` chunks; frames inside a chunk see each other freely.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import tensor as T
from .attention import ChunkMaskSpec, LayerKVCache, RopeConfig, build_chunkwise_mask, incremental_attend
from .layers import Block, LayerNorm, Linear, Module
from .tensor import ContractError, ShapeError, Tensor


@dataclass(frozen=True)
class EncoderConfig:
    d_in: int = 8
    d_model: int = 64
    n_layers: int = 2
    n_heads: int = 4
    chunk_frames: int = 48
    frame_ms: int = 20
    window_chunks: int | None = 10
    rope_base: float = 10000.0

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise ContractError("d_model must be divisible by n_heads")
        if self.chunk_frames % 4:
            raise ContractError("chunk_frames must be divisible by the adapter factor 4")

    @property
    def chunk_ms(self) -> int:
        return self.chunk_frames * self.frame_ms

    @property
    def rope(self) -> RopeConfig:
        return RopeConfig(self.d_model // self.n_heads, self.rope_base)

    @property
    def mask_spec(self) -> ChunkMaskSpec:
        return ChunkMaskSpec(self.chunk_frames, self.window_chunks)


@dataclass(frozen=True)
class AdapterConfig:
    d_model: int = 64
    d_llm: int = 64
    kernel: int = 2
    stride: int = 2
    n_stages: int = 2

    @property
    def factor(self) -> int:
        return self.stride**self.n_stages


@dataclass
class EncoderState:
    caches: list[LayerKVCache]
    chunks_seen: int = 0

    def retained_entries(self) -> list[int]:
        return [len(c) for c in self.caches]


class SpeechEncoder(Module):
    def __init__(self, cfg: EncoderConfig, rng: np.random.Generator):
        self._cfg = cfg
        self.inp = Linear(cfg.d_in, cfg.d_model, rng)
        self.blocks = [Block(cfg.d_model, cfg.n_heads, rng) for _ in range(cfg.n_layers)]
        self.ln_f = LayerNorm(cfg.d_model)

    @property
    def cfg(self) -> EncoderConfig:
        return self._cfg

    def init_state(self) -> EncoderState:
        cfg = self._cfg
        cap = None if cfg.window_chunks is None else cfg.window_chunks * cfg.chunk_frames
        head_dim = cfg.d_model // cfg.n_heads
        return EncoderState([LayerKVCache.empty(cfg.n_heads, head_dim, cap) for _ in self.blocks])

    def encode_full(self, frames, dense: bool = False) -> Tensor:
        """Whole-sequence encoding under the chunkwise mask.

        By default only each chunk's window is materialised; ``dense=True``
        builds the full ``[T, T]`` mask instead (reference path).
        """
        frames = frames if isinstance(frames, Tensor) else Tensor(frames)
        n = frames.shape[0]
        if frames.ndim != 2 or frames.shape[1] != self._cfg.d_in:
            raise ShapeError(f"expected [T, {self._cfg.d_in}] frames, got {frames.shape}")
        if n == 0 or n % self._cfg.chunk_frames:
            raise ShapeError(f"frame count {n} is not a positive multiple of {self._cfg.chunk_frames}")
        spec = self._cfg.mask_spec
        mask = build_chunkwise_mask(n, spec) if dense or spec.window_chunks is None else spec
        positions = np.arange(n)
        x = self.inp(frames)
        for block in self.blocks:
            x = block.full(x, positions, mask, self._cfg.rope)
        return self.ln_f(x)

    def encode_chunk(self, state: EncoderState, frames) -> tuple[np.ndarray, EncoderState]:
        cfg = self._cfg
        frames = np.asarray(frames, dtype=np.float64)
        if frames.shape != (cfg.chunk_frames, cfg.d_in):
            raise ShapeError(f"expected a [{cfg.chunk_frames}, {cfg.d_in}] chunk, got {frames.shape}")
        positions = state.chunks_seen * cfg.chunk_frames + np.arange(cfg.chunk_frames)
        x = self.inp(Tensor(frames))
        caches = []
        for block, cache in zip(self.blocks, state.caches):
            q, k, v = block.project(x)
            out, cache = incremental_attend(cache, q.data, k.data, v.data, positions, cfg.mask_spec, cfg.rope)
            caches.append(cache)
            x = block.finish(x, Tensor(out))
        return self.ln_f(x).data, EncoderState(caches, state.chunks_seen + 1)


class Adapter(Module):
    """Two unpadded stride-2 convolutions (4x shorter) and a projection to the decoder width."""

    def __init__(self, cfg: AdapterConfig, rng: np.random.Generator):
        self._cfg = cfg
        d = cfg.d_model
        scale = 1.0 / np.sqrt(cfg.kernel * d)
        self.kernels = [
            Tensor(rng.normal(0.0, scale, size=(cfg.kernel, d, d)), requires_grad=True) for _ in range(cfg.n_stages)
        ]
        self.biases = [Tensor(np.zeros(d), requires_grad=True) for _ in range(cfg.n_stages)]
        self.proj = Linear(d, cfg.d_llm, rng)

    def named_parameters(self, prefix: str = ""):
        for i, (k, b) in enumerate(zip(self.kernels, self.biases)):
            yield f"{prefix}conv{i}.kernel", k
            yield f"{prefix}conv{i}.bias", b
        yield from self.proj.named_parameters(prefix + "proj.")

    def __call__(self, features) -> Tensor:
        features = features if isinstance(features, Tensor) else Tensor(features)
        n = features.shape[0]
        if n == 0 or n % self._cfg.factor:
            raise ShapeError(f"adapter input length {n} is not a positive multiple of {self._cfg.factor}")
        x = features
        for i, (k, b) in enumerate(zip(self.kernels, self.biases)):
            x = T.conv1d(x, k, self._cfg.stride) + b
            if i + 1 < len(self.kernels):
                x = T.gelu(x)
        return self.proj(x)


def adapt(adapter: Adapter, features) -> Tensor:
    return adapter(features)


# ----------------------------------------------------------------------------
# feature-frame files
#
# Layout: one UTF-8 JSON header line terminated by "\n", followed by the
# row-major little-endian float64 payload of shape [n_frames, d_in].
# Header keys: format ("streamst-features"), version (1), d_in, frame_ms,
# n_frames, and optionally start_ms (timestamp of the first frame).

FEATURE_FORMAT = "streamst-features"
FEATURE_VERSION = 1


def write_features(path, frames: np.ndarray, frame_ms: int = 20, start_ms: int = 0) -> None:
    frames = np.asarray(frames, dtype="<f8")
    header = {
        "format": FEATURE_FORMAT,
        "version": FEATURE_VERSION,
        "d_in": int(frames.shape[1]),
        "frame_ms": int(frame_ms),
        "n_frames": int(frames.shape[0]),
        "start_ms": int(start_ms),
    }
    with open(path, "wb") as fh:
        fh.write((json.dumps(header, sort_keys=True) + "\n").encode())
        fh.write(np.ascontiguousarray(frames).tobytes())


def read_features(path) -> tuple[np.ndarray, dict]:
    raw = Path(path).read_bytes()
    cut = raw.index(b"\n")
    header = json.loads(raw[:cut])
    if header.get("format") != FEATURE_FORMAT:
        raise ValueError(f"{path}: not a feature file")
    if header.get("version") != FEATURE_VERSION:
        raise ValueError(f"{path}: unsupported feature file version {header.get('version')}")
    frames = np.frombuffer(raw[cut + 1 :], dtype="<f8")
    expected = header["n_frames"] * header["d_in"]
    if frames.size != expected:
        raise ValueError(f"{path}: payload has {frames.size} values, header promises {expected}")
    return frames.reshape(header["n_frames"], header["d_in"]).astype(np.float64), header
