"""The assembled translator: speech encoder, adapter and decoder with one vocabulary."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from .decoder import Decoder, DecoderConfig, Vocabulary
from .encoder import Adapter, AdapterConfig, EncoderConfig, SpeechEncoder
from .layers import Linear, LoraConfig, Module, make_rng
from .tensor import ContractError, Tensor

BLANK = "<blank>"


@dataclass(frozen=True)
class ModelConfig:
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    d_llm: int = 64
    dec_layers: int = 2
    dec_heads: int = 4
    recent_window: int = 1024
    instruction: tuple[str, ...] = ("<sys>", "<translate>")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["instruction"] = list(self.instruction)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        d["encoder"] = EncoderConfig(**d["encoder"])
        d["instruction"] = tuple(d["instruction"])
        return cls(**d)


class SpeechTranslator(Module):
    """Feature frames in, next-token logits out.

    ``symbols`` are the non-special vocabulary entries; the instruction tokens
    and ``<blank>`` are added automatically.
    """

    def __init__(self, cfg: ModelConfig, symbols, seed: int = 0):
        rng = make_rng(seed)
        self._cfg = cfg
        extra = list(cfg.instruction) + [BLANK] + [s for s in symbols if s not in cfg.instruction and s != BLANK]
        self._vocab = Vocabulary.build(extra)
        self.encoder = SpeechEncoder(cfg.encoder, rng)
        self.adapter = Adapter(AdapterConfig(cfg.encoder.d_model, cfg.d_llm), rng)
        dec_cfg = DecoderConfig(len(self._vocab), cfg.d_llm, cfg.dec_layers, cfg.dec_heads, cfg.recent_window)
        self.decoder = Decoder(dec_cfg, rng)
        self._lora: LoraConfig | None = None
        self._seed = seed

    @property
    def cfg(self) -> ModelConfig:
        return self._cfg

    @property
    def vocab(self) -> Vocabulary:
        return self._vocab

    @property
    def lora(self) -> LoraConfig | None:
        return self._lora

    @property
    def instruction_ids(self) -> list[int]:
        return self._vocab.encode(self._cfg.instruction)

    @property
    def embeddings_per_chunk(self) -> int:
        return self._cfg.encoder.chunk_frames // 4

    def speech_embeddings(self, frames) -> Tensor:
        """Whole-segment encoder and adapter pass (training path)."""
        return self.adapter(self.encoder.encode_full(frames))

    def logits(self, ids, speech: Tensor | None) -> Tensor:
        return self.decoder.forward_full(self.decoder.embed_sequence(ids, speech))

    def attach_lora(self, cfg: LoraConfig, seed: int) -> list[Linear]:
        """Wrap every decoder block linear map; returns the wrapped maps."""
        if self._lora is not None:
            raise ContractError("LoRA is already attached")
        rng = make_rng(seed)
        linears = self.decoder.linears()
        for lin in linears:
            lin.attach_lora(cfg, rng)
        self._lora = cfg
        return linears

    def set_dropout(self, seed: int | None) -> None:
        """Enable LoRA dropout with a seeded stream, or disable it with None."""
        rng = None if seed is None else make_rng(seed)
        for lin in self.decoder.linears():
            lin.set_dropout_rng(rng)

    def lora_parameters(self) -> list[Tensor]:
        return [t for lin in self.decoder.linears() for t in (lin.lora_a, lin.lora_b) if t is not None]
