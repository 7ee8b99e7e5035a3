"""Rotary embeddings, chunkwise-causal masks and cached incremental attention.

Keys are always stored unrotated together with their logical positions; the
rotation is applied when attention is computed. Re-indexing positions (as the
decoder does after evicting old turns) therefore only requires new position
numbers, never touching stored vectors.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .tensor import ContractError, ShapeError, Tensor, custom_op


@dataclass(frozen=True)
class RopeConfig:
    head_dim: int
    base: float = 10000.0

    def __post_init__(self):
        if self.head_dim <= 0 or self.head_dim % 2:
            raise ContractError(f"rotary head_dim must be a positive even number, got {self.head_dim}")
        if self.base <= 0:
            raise ContractError("rotary base must be positive")


def rope_angles(positions, cfg: RopeConfig) -> tuple[np.ndarray, np.ndarray]:
    positions = np.asarray(positions, dtype=np.float64)
    freqs = cfg.base ** (-2.0 * np.arange(cfg.head_dim // 2) / cfg.head_dim)
    theta = positions[:, None] * freqs[None, :]
    return np.cos(theta), np.sin(theta)


def _rotate(x: np.ndarray, cos: np.ndarray, sin: np.ndarray) -> np.ndarray:
    even, odd = x[..., 0::2], x[..., 1::2]
    out = np.empty_like(x)
    out[..., 0::2] = even * cos - odd * sin
    out[..., 1::2] = even * sin + odd * cos
    return out


def rope_apply(x, positions, cfg: RopeConfig):
    """Rotate consecutive feature pairs of ``x[..., T, head_dim]`` by position.

    Accepts a Tensor (differentiable) or a plain array (returned as array).
    """
    positions = np.asarray(positions)
    if np.any(positions < 0):
        raise ContractError("rotary positions must be non-negative")
    data = x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)
    if data.shape[-1] != cfg.head_dim:
        raise ShapeError(f"last axis {data.shape[-1]} != head_dim {cfg.head_dim}")
    if data.shape[-2] != len(positions):
        raise ShapeError("one position per row required")
    cos, sin = rope_angles(positions, cfg)
    out = _rotate(data, cos, sin)
    if not isinstance(x, Tensor):
        return out
    return custom_op(out, (x,), lambda g: (_rotate(g, cos, -sin),))


@dataclass(frozen=True)
class ChunkMaskSpec:
    """Chunk granularity and sliding window (in chunks; None = unbounded).

    ``chunk_frames=1, window_chunks=None`` is ordinary token-level causality.
    """

    chunk_frames: int = 48
    window_chunks: int | None = 10

    def __post_init__(self):
        if self.chunk_frames < 1:
            raise ContractError("chunk_frames must be ≥ 1")
        if self.window_chunks is not None and self.window_chunks < 1:
            raise ContractError("window_chunks must be ≥ 1")


CAUSAL = ChunkMaskSpec(chunk_frames=1, window_chunks=None)


def chunk_visibility(q_positions, k_positions, spec: ChunkMaskSpec) -> np.ndarray:
    """``mask[q, k]`` is True iff chunk(k) lies in [chunk(q) - w + 1, chunk(q)]."""
    qc = np.asarray(q_positions)[:, None] // spec.chunk_frames
    kc = np.asarray(k_positions)[None, :] // spec.chunk_frames
    visible = kc <= qc
    if spec.window_chunks is not None:
        visible &= kc >= qc - spec.window_chunks + 1
    return visible


def build_chunkwise_mask(n_frames: int, spec: ChunkMaskSpec) -> np.ndarray:
    pos = np.arange(n_frames)
    return chunk_visibility(pos, pos, spec)


def _softmax_rows(scores: np.ndarray) -> np.ndarray:
    scores = scores - scores.max(axis=-1, keepdims=True)
    np.exp(scores, out=scores)
    scores /= scores.sum(axis=-1, keepdims=True)
    return scores


def attention(q, k, v, mask) -> Tensor:
    """Scaled dot-product attention on ``[heads, T, head_dim]`` operands.

    Fused into a single tape node; ``mask[q, k]`` True means visible.
    """
    q, k, v = (t if isinstance(t, Tensor) else Tensor(t) for t in (q, k, v))
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != (q.shape[-2], k.shape[-2]):
        raise ShapeError(f"mask {mask.shape} does not match queries {q.shape[-2]} x keys {k.shape[-2]}")
    if not mask.any(axis=1).all():
        raise ContractError("a query row has no visible key")
    scale = 1.0 / np.sqrt(q.shape[-1])
    scores = (q.data @ np.swapaxes(k.data, -1, -2)) * scale
    scores[:, ~mask] = -np.inf
    probs = _softmax_rows(scores)
    out = probs @ v.data

    def back(g):
        dp = g @ np.swapaxes(v.data, -1, -2)
        ds = probs * (dp - (dp * probs).sum(axis=-1, keepdims=True)) * scale
        return ds @ k.data, np.swapaxes(ds, -1, -2) @ q.data, np.swapaxes(probs, -1, -2) @ g

    return custom_op(out, (q, k, v), back)


def banded_chunk_attention(q, k, v, spec: ChunkMaskSpec) -> Tensor:
    """Same result as ``attention`` under ``build_chunkwise_mask`` for a
    sequence starting at position 0, but only materialises each chunk's window.

    Requires a bounded window and a length that is a multiple of ``chunk_frames``.
    """
    q, k, v = (t if isinstance(t, Tensor) else Tensor(t) for t in (q, k, v))
    cf, w = spec.chunk_frames, spec.window_chunks
    H, n, hd = q.shape
    if w is None or n % cf:
        raise ContractError("banded attention needs a bounded window and whole chunks")
    C = n // cf
    pad = (w - 1) * cf
    scale = 1.0 / np.sqrt(hd)

    def windows(x):  # [H, n, hd] -> [H, C, w*cf, hd]
        xp = np.concatenate([np.zeros((H, pad, hd)), x], axis=1)
        view = np.lib.stride_tricks.sliding_window_view(xp, w * cf, axis=1)[:, ::cf]
        return np.swapaxes(view, -1, -2)

    kw, vw = np.ascontiguousarray(windows(k.data)), np.ascontiguousarray(windows(v.data))
    qc = q.data.reshape(H, C, cf, hd)
    visible = (np.arange(C)[:, None] - w + 1 + np.arange(w * cf)[None, :] // cf) >= 0  # [C, w*cf]
    scores = (qc @ np.swapaxes(kw, -1, -2)) * scale
    scores = np.where(visible[None, :, None, :], scores, -np.inf)
    probs = _softmax_rows(scores)
    out = (probs @ vw).reshape(H, n, hd)

    def fold(gw):  # [H, C, w*cf, hd] -> [H, n, hd], overlap-add of windows
        acc = np.zeros((H, pad + n, hd))
        gw = gw.reshape(H, C, w, cf, hd)
        for j in range(w):
            acc[:, j * cf : j * cf + n] += gw[:, :, j].reshape(H, n, hd)
        return acc[:, pad:]

    def back(g):
        gc = g.reshape(H, C, cf, hd)
        dp = gc @ np.swapaxes(vw, -1, -2)
        ds = probs * (dp - (dp * probs).sum(axis=-1, keepdims=True)) * scale
        dq = (ds @ kw).reshape(H, n, hd)
        dk = fold(np.swapaxes(ds, -1, -2) @ qc)
        dv = fold(np.swapaxes(probs, -1, -2) @ gc)
        return dq, dk, dv

    return custom_op(out, (q, k, v), back)


@dataclass(frozen=True)
class LayerKVCache:
    """Unrotated keys/values for one layer, ``[heads, n, head_dim]``."""

    keys: np.ndarray
    values: np.ndarray
    positions: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    capacity: int | None = None
    next_position: int = 0

    @classmethod
    def empty(cls, n_heads: int, head_dim: int, capacity: int | None = None, start: int = 0) -> "LayerKVCache":
        z = np.zeros((n_heads, 0, head_dim))
        return cls(z, z.copy(), np.zeros(0, dtype=np.int64), capacity, start)

    def __len__(self) -> int:
        return int(self.positions.shape[0])

    @property
    def first_logical_position(self) -> int | None:
        return int(self.positions[0]) if len(self) else None

    def append(self, keys: np.ndarray, values: np.ndarray, positions) -> "LayerKVCache":
        positions = np.asarray(positions, dtype=np.int64)
        if len(positions) and (positions[0] != self.next_position or np.any(np.diff(positions) != 1)):
            raise ContractError(
                f"new positions must continue the cache at {self.next_position}, got {positions[:3]}..."
            )
        return replace(
            self,
            keys=np.concatenate([self.keys, keys], axis=1),
            values=np.concatenate([self.values, values], axis=1),
            positions=np.concatenate([self.positions, positions]),
            next_position=self.next_position + len(positions),
        )

    def keep_from(self, min_position: int) -> "LayerKVCache":
        keep = self.positions >= min_position
        if keep.all():
            return self
        return replace(self, keys=self.keys[:, keep], values=self.values[:, keep], positions=self.positions[keep])


def incremental_attend(
    cache: LayerKVCache,
    q_new: np.ndarray,
    k_new: np.ndarray,
    v_new: np.ndarray,
    positions,
    spec: ChunkMaskSpec,
    rope: RopeConfig,
) -> tuple[np.ndarray, LayerKVCache]:
    """Attend new queries over cached plus new keys, then evict out-of-window entries.

    Returns the outputs ``[heads, n_new, head_dim]`` and the updated cache.
    """
    positions = np.asarray(positions, dtype=np.int64)
    cache = cache.append(k_new, v_new, positions)
    mask = chunk_visibility(positions, cache.positions, spec)
    q_rot = rope_apply(q_new, positions, rope)
    k_rot = rope_apply(cache.keys, cache.positions, rope)
    out = attention(q_rot, k_rot, cache.values, mask).data
    if spec.window_chunks is not None:
        last_chunk = positions[-1] // spec.chunk_frames
        cache = cache.keep_from((last_chunk - spec.window_chunks + 1) * spec.chunk_frames)
    return out, cache
