"""Parameter containers and transformer building blocks on top of ``tensor``."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator

import numpy as np

from . import tensor as T
from .attention import ChunkMaskSpec, RopeConfig, attention, banded_chunk_attention, rope_apply
from .tensor import ContractError, Tensor


def make_rng(seed: int) -> np.random.Generator:
    """The one generator type used for every seeded draw in the package."""
    return np.random.Generator(np.random.PCG64(np.uint64(seed)))


class Module:
    """Walks attributes to find parameters; names are dotted attribute paths."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, value in vars(self).items():
            if name.startswith("_"):
                continue
            full = f"{prefix}{name}"
            if isinstance(value, Tensor):
                yield full, value
            elif isinstance(value, Module):
                yield from value.named_parameters(full + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{full}.{i}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray], strict: bool = True) -> None:
        params = dict(self.named_parameters())
        missing = set(params) - set(state)
        if strict and missing:
            raise KeyError(f"missing parameters: {sorted(missing)[:5]}")
        for name, value in state.items():
            if name not in params:
                if strict:
                    raise KeyError(f"unexpected parameter {name}")
                continue
            if params[name].shape != value.shape:
                raise T.ShapeError(f"{name}: expected {params[name].shape}, got {value.shape}")
            params[name].data = np.array(value, dtype=np.float64)

    def set_trainable(self, flag: bool) -> None:
        for p in self.parameters():
            p.requires_grad = flag


def _param(data: np.ndarray) -> Tensor:
    return Tensor(data, requires_grad=True)


@dataclass(frozen=True)
class LoraConfig:
    rank: int = 4
    alpha: float = 8.0
    dropout: float = 0.1

    def __post_init__(self):
        if self.rank < 1:
            raise ContractError("LoRA rank must be ≥ 1")
        if not 0.0 <= self.dropout < 1.0:
            raise ContractError("LoRA dropout must lie in [0, 1)")

    @property
    def scale(self) -> float:
        return self.alpha / self.rank


class Linear(Module):
    """``y = x W + b`` with an optional low-rank residual ``s * (x A) B``."""

    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, bias: bool = True):
        self.weight = _param(rng.normal(0.0, 1.0 / np.sqrt(d_in), size=(d_in, d_out)))
        self.bias = _param(np.zeros(d_out)) if bias else None
        self.lora_a: Tensor | None = None
        self.lora_b: Tensor | None = None
        self._lora: LoraConfig | None = None
        self._dropout_rng: np.random.Generator | None = None

    @property
    def d_in(self) -> int:
        return self.weight.shape[0]

    @property
    def d_out(self) -> int:
        return self.weight.shape[1]

    def __call__(self, x: Tensor) -> Tensor:
        y = T.matmul(x, self.weight)
        if self.bias is not None:
            y = y + self.bias
        if self._lora is not None:
            h = T.dropout(x, self._lora.dropout, self._dropout_rng)
            y = y + T.matmul(T.matmul(h, self.lora_a), self.lora_b) * self._lora.scale
        return y

    def attach_lora(self, cfg: LoraConfig, rng: np.random.Generator) -> None:
        if cfg.rank > min(self.d_in, self.d_out):
            raise ContractError(f"LoRA rank {cfg.rank} exceeds min({self.d_in}, {self.d_out})")
        self._lora = cfg
        self.lora_a = _param(rng.normal(0.0, 1.0 / np.sqrt(self.d_in), size=(self.d_in, cfg.rank)))
        self.lora_b = _param(np.zeros((cfg.rank, self.d_out)))

    def merged_weight(self) -> np.ndarray:
        if self._lora is None:
            return self.weight.data.copy()
        return self.weight.data + self._lora.scale * (self.lora_a.data @ self.lora_b.data)

    def set_dropout_rng(self, rng: np.random.Generator | None) -> None:
        self._dropout_rng = rng


class LayerNorm(Module):
    def __init__(self, d: int, eps: float = 1e-5):
        self.gain = _param(np.ones(d))
        self.bias = _param(np.zeros(d))
        self._eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return T.layer_norm(x, self.gain, self.bias, self._eps)


class FeedForward(Module):
    def __init__(self, d: int, hidden: int, rng: np.random.Generator):
        self.up = Linear(d, hidden, rng)
        self.down = Linear(hidden, d, rng)

    def __call__(self, x: Tensor) -> Tensor:
        return self.down(T.gelu(self.up(x)))


def split_heads(x: Tensor, n_heads: int) -> Tensor:
    n, d = x.shape
    return T.transpose(T.reshape(x, (n, n_heads, d // n_heads)), (1, 0, 2))


def merge_heads(x: Tensor) -> Tensor:
    h, n, hd = x.shape
    return T.reshape(T.transpose(x, (1, 0, 2)), (n, h * hd))


class Block(Module):
    """Pre-norm transformer block; attention is delegated so callers choose masking/caching."""

    def __init__(self, d_model: int, n_heads: int, rng: np.random.Generator):
        if d_model % n_heads:
            raise ContractError("d_model must be divisible by n_heads")
        self.ln1 = LayerNorm(d_model)
        self.q = Linear(d_model, d_model, rng)
        self.k = Linear(d_model, d_model, rng)
        self.v = Linear(d_model, d_model, rng)
        self.o = Linear(d_model, d_model, rng)
        self.ln2 = LayerNorm(d_model)
        self.ffn = FeedForward(d_model, 4 * d_model, rng)
        self._n_heads = n_heads

    @property
    def n_heads(self) -> int:
        return self._n_heads

    def linears(self) -> list[Linear]:
        return [self.q, self.k, self.v, self.o, self.ffn.up, self.ffn.down]

    def project(self, x: Tensor) -> tuple[Tensor, Tensor, Tensor]:
        """Head-split (q, k, v), each ``[heads, n, head_dim]``; keys unrotated."""
        h = self.ln1(x)
        return tuple(split_heads(lin(h), self._n_heads) for lin in (self.q, self.k, self.v))

    def finish(self, x: Tensor, attended: Tensor) -> Tensor:
        x = x + self.o(merge_heads(attended))
        return x + self.ffn(self.ln2(x))

    def full(self, x: Tensor, positions, mask, rope: RopeConfig) -> Tensor:
        """``mask`` is a boolean matrix, or a ChunkMaskSpec for the banded fast path."""
        q, k, v = self.project(x)
        q, k = rope_apply(q, positions, rope), rope_apply(k, positions, rope)
        if isinstance(mask, ChunkMaskSpec):
            out = banded_chunk_attention(q, k, v, mask)
        else:
            out = attention(q, k, v, mask)
        return self.finish(x, out)
