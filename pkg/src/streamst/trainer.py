"""Staged supervised training on robust segments.

Stages:

* 0: plain decoder training on transcript slots (see :func:`transcript_slots`).
  This stands in for starting from a pretrained language model.
* 1: encoder and adapter are trained, the decoder is frozen.
* 2: low-rank adapters on every decoder block linear map are trained,
  everything else is frozen.

Each step's loss is the mean cross-entropy over supervised positions (target
tokens and their closing ``<read>``) of all sequences packed into the step.
"""

from __future__ import annotations

import io
import json
import logging
import math
import zipfile
from dataclasses import asdict, dataclass, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .layers import Linear, LoraConfig, make_rng
from .model import BLANK, ModelConfig, SpeechTranslator
from .tensor import ContractError, Tape, Tensor
from .trajectory import RobustSegment, merge_chunks

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "streamst-checkpoint"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class TrainConfig:
    stage: int = 1
    max_lr: float = 2e-4
    warmup_steps: int = 50
    epochs: int = 1
    batch_token_budget: int = 4096
    max_multiplier: int = 12
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    clip_norm: float | None = 1.0

    def __post_init__(self):
        if self.stage not in (0, 1, 2):
            raise ContractError(f"unknown stage {self.stage}")
        if self.max_lr <= 0:
            raise ContractError("max_lr must be positive")
        if self.warmup_steps < 0:
            raise ContractError("warmup_steps must be ≥ 0")
        if self.epochs < 1 or self.batch_token_budget < 1 or self.max_multiplier < 1:
            raise ContractError("epochs, batch_token_budget and max_multiplier must be ≥ 1")


def lr_at(step: int, cfg: TrainConfig, total_steps: int) -> float:
    """Linear warmup to ``max_lr`` over ``warmup_steps``, then cosine decay to 0 at ``total_steps``."""
    if total_steps < 1:
        raise ContractError("the schedule needs at least one step")
    if not 0 <= step <= total_steps:
        raise ContractError(f"step {step} outside [0, {total_steps}]")
    w = cfg.warmup_steps
    if w >= total_steps:
        raise ContractError(f"warmup_steps {w} must be shorter than the schedule ({total_steps} steps)")
    if step < w:
        return cfg.max_lr * step / w
    progress = (step - w) / (total_steps - w)
    return cfg.max_lr * 0.5 * (1.0 + math.cos(math.pi * progress))


# ----------------------------------------------------------------------------
# sequences


@dataclass
class TrainingSequence:
    """Decoder input ids (``-1`` marks a speech-embedding slot) and the loss mask.

    ``loss_mask[p]`` is True when ``ids[p]`` is a supervised label, i.e. a
    target token or the ``<read>`` closing its turn.
    """

    ids: np.ndarray
    loss_mask: np.ndarray
    n_speech: int
    n_turns: int
    multiplier: int
    segment_id: str = ""

    def __len__(self) -> int:
        return len(self.ids)

    @property
    def n_supervised(self) -> int:
        return int(self.loss_mask.sum())


def build_training_sequence(seg: RobustSegment, m: int, model: SpeechTranslator) -> TrainingSequence:
    """Lay out a segment as one dialogue with every ``m`` chunks merged into a turn."""
    if not 1 <= m:
        raise ContractError("latency multiplier must be ≥ 1")
    vocab, sp = model.vocab, model.vocab.special
    per_chunk = model.embeddings_per_chunk
    traj = merge_chunks(seg.trajectory, m)
    ids = list(model.instruction_ids)
    mask = [False] * len(ids)
    n_speech = 0
    for j in range(traj.n_steps):
        chunks = min(m, seg.n_chunks - j * m)
        width = chunks * per_chunk
        ids += [sp.user] + [-1] * width + [sp.assistant]
        mask += [False] * (width + 2)
        n_speech += width
        target = vocab.encode(traj.step_tokens(j)) + [sp.read]
        ids += target
        mask += [True] * len(target)
    return TrainingSequence(
        np.asarray(ids, dtype=np.int64), np.asarray(mask, dtype=bool), n_speech, traj.n_steps, m, seg.segment_id
    )


def transcript_slots(seg: RobustSegment, model: SpeechTranslator, span: bool = False) -> np.ndarray:
    """Token id per speech-embedding slot.

    With ``span`` every slot overlapping a source word carries that word;
    otherwise only the slot holding the word's last frame does. All other
    slots are ``<blank>``.
    """
    slot_ms = model.cfg.encoder.frame_ms * 4
    n = seg.n_chunks * model.embeddings_per_chunk
    out = np.full(n, model.vocab.id(BLANK), dtype=np.int64)
    for word, start, end in seg.source_words:
        last = min(max(end - 1, 0) // slot_ms, n - 1)
        first = min(start // slot_ms, last) if span else last
        out[first : last + 1] = model.vocab.id(word)
    return out


def sequence_loss(model: SpeechTranslator, seq: TrainingSequence, speech: Tensor) -> Tensor:
    """Mean cross-entropy of next-token predictions at supervised positions."""
    logits = model.logits(seq.ids, speech)
    targets = np.concatenate([seq.ids[1:], [0]])
    mask = np.concatenate([seq.loss_mask[1:], [False]])
    return T.cross_entropy(logits, np.maximum(targets, 0), mask)


def lora_wrap(linear: Linear, cfg: LoraConfig, seed: int) -> Linear:
    """Attach a zero-initialised low-rank residual to ``linear`` (in place)."""
    linear.attach_lora(cfg, make_rng(seed))
    return linear


# ----------------------------------------------------------------------------
# optimisation


class Adam:
    def __init__(self, params: Sequence[Tensor], beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = list(params)
        self.b1, self.b2, self.eps = beta1, beta2, eps
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.t = 0

    def step(self, lr: float) -> None:
        self.t += 1
        c1 = 1.0 - self.b1**self.t
        c2 = 1.0 - self.b2**self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            m *= self.b1
            m += (1.0 - self.b1) * p.grad
            v *= self.b2
            v += (1.0 - self.b2) * p.grad**2
            p.data -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def clip_grad_norm(params: Sequence[Tensor], max_norm: float) -> float:
    """Rescale gradients in place so their global L2 norm is at most ``max_norm``; returns the norm before."""
    norm = math.sqrt(sum(float((p.grad**2).sum()) for p in params if p.grad is not None))
    if norm > max_norm:
        for p in params:
            if p.grad is not None:
                p.grad *= max_norm / norm
    return norm


def pack_batches(seqs: Sequence[TrainingSequence], budget: int) -> list[list[int]]:
    """Greedy in-order packing of sequence indices; a batch never exceeds ``budget`` positions."""
    batches, cur, used = [], [], 0
    for i, s in enumerate(seqs):
        if len(s) > budget:
            raise ContractError(f"sequence {s.segment_id!r} has {len(s)} positions, over the budget {budget}")
        if cur and used + len(s) > budget:
            batches.append(cur)
            cur, used = [], 0
        cur.append(i)
        used += len(s)
    if cur:
        batches.append(cur)
    return batches


def trainable_parameters(model: SpeechTranslator, stage: int) -> list[tuple[str, Tensor]]:
    named = list(model.named_parameters())
    if stage == 0:
        return [(n, p) for n, p in named if n.startswith("decoder.")]
    if stage == 1:
        return [(n, p) for n, p in named if n.startswith(("encoder.", "adapter."))]
    return [(n, p) for n, p in named if n.endswith((".lora_a", ".lora_b"))]


@dataclass
class TrainResult:
    model: SpeechTranslator
    log: list[dict]
    total_steps: int


def _plan(dataset, model, cfg: TrainConfig) -> list[tuple[list[TrainingSequence], list[int]]]:
    """Per epoch: shuffled sequences with sampled multipliers, and their packed batches."""
    rng = make_rng(cfg.seed)
    plan = []
    for _ in range(cfg.epochs):
        order = rng.permutation(len(dataset))
        seqs = []
        for i in order:
            m = int(rng.integers(1, cfg.max_multiplier + 1))
            seqs.append(build_training_sequence(dataset[int(i)], m, model))
        for batch in pack_batches(seqs, cfg.batch_token_budget):
            plan.append(([seqs[i] for i in batch], [int(order[i]) for i in batch]))
    return plan


def train(
    dataset: Sequence[RobustSegment],
    model: SpeechTranslator,
    cfg: TrainConfig,
    lora: LoraConfig | None = None,
    log_path=None,
    on_step: Callable[[dict], None] | None = None,
) -> TrainResult:
    """Run one training stage in place on ``model``."""
    if not dataset:
        raise ContractError("training dataset is empty")
    if cfg.stage == 2:
        if lora is None and model.lora is None:
            raise ContractError("stage 2 needs a LoRA config")
        if model.lora is None:
            model.attach_lora(lora, cfg.seed)
    if cfg.stage in (1, 2) and any(seg.frames is None for seg in dataset):
        raise ContractError(f"stage {cfg.stage} needs segment frames")
    trainable = trainable_parameters(model, cfg.stage)
    for p in model.parameters():
        p.requires_grad = False
    for _, p in trainable:
        p.requires_grad = True
    params = [p for _, p in trainable]
    opt = Adam(params, cfg.beta1, cfg.beta2, cfg.eps)

    plan = _plan(dataset, model, cfg)
    total = len(plan)
    # update k uses lr_at(k) on a horizon of total + 1, so neither the first
    # nor the last update runs at a zero rate
    horizon = total + 1
    sched = cfg if cfg.warmup_steps < horizon else replace(cfg, warmup_steps=total // 10)
    if sched is not cfg:
        log.warning("warmup %d ≥ %d steps; using %d", cfg.warmup_steps, total, sched.warmup_steps)

    frozen_speech: dict[int, np.ndarray] = {}
    if cfg.stage == 2:
        for i, seg in enumerate(dataset):
            frozen_speech[i] = model.speech_embeddings(seg.frames).data
    model.set_dropout(cfg.seed + 1 if cfg.stage == 2 else None)

    records = []
    fh = open(log_path, "w", encoding="utf-8") if log_path else None
    try:
        for step, (seqs, seg_idx) in enumerate(plan, start=1):
            T.zero_grads(params)
            n_sup = sum(s.n_supervised for s in seqs)
            total_loss = 0.0
            for seq, i in zip(seqs, seg_idx):
                seg = dataset[i]
                with Tape() as tape:
                    if cfg.stage == 0:
                        speech = T.take_rows(model.decoder.embed, transcript_slots(seg, model))
                    elif cfg.stage == 1:
                        speech = model.speech_embeddings(seg.frames)
                    else:
                        speech = Tensor(frozen_speech[i])
                    loss = sequence_loss(model, seq, speech) * (seq.n_supervised / n_sup)
                    T.backward(loss, tape)
                total_loss += float(loss.data)
            if cfg.clip_norm is not None:
                clip_grad_norm(params, cfg.clip_norm)
            lr = lr_at(step, sched, horizon)
            opt.step(lr)
            rec = {"step": step, "lr": lr, "loss": total_loss, "tokens": n_sup}
            records.append(rec)
            if fh:
                fh.write(json.dumps(rec, sort_keys=True) + "\n")
            if on_step:
                on_step(rec)
    finally:
        if fh:
            fh.close()
        model.set_dropout(None)
        for p in model.parameters():
            p.requires_grad = False
    return TrainResult(model, records, total)


def token_accuracy(model: SpeechTranslator, segments: Sequence[RobustSegment], m: int) -> tuple[int, int]:
    """Teacher-forced argmax accuracy on supervised positions: (correct, total)."""
    correct = total = 0
    for seg in segments:
        seq = build_training_sequence(seg, m, model)
        logits = model.logits(seq.ids, model.speech_embeddings(seg.frames)).data
        rows = np.nonzero(seq.loss_mask)[0]
        pred = logits[rows - 1].argmax(axis=1)
        correct += int((pred == seq.ids[rows]).sum())
        total += len(rows)
    return correct, total


# ----------------------------------------------------------------------------
# checkpoints
#
# A checkpoint is a zip archive (fixed timestamps, so identical weights give
# identical bytes) holding ``meta.json`` and one ``.npy`` member per named
# parameter, stored as little-endian float64. ``meta.json`` keys: format,
# version, model (ModelConfig fields), symbols (non-special vocabulary in id
# order), seed, lora (null or {rank, alpha, dropout}) and any caller extras.


def _zip_write(zf: zipfile.ZipFile, name: str, data: bytes) -> None:
    info = zipfile.ZipInfo(name, date_time=(1980, 1, 1, 0, 0, 0))
    info.compress_type = zipfile.ZIP_DEFLATED
    zf.writestr(info, data)


def save_checkpoint(path, model: SpeechTranslator, extra: dict | None = None) -> None:
    meta = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "model": model.cfg.to_dict(),
        "symbols": model.vocab.symbols[4:],
        "seed": model._seed,
        "lora": None if model.lora is None else asdict(model.lora),
        "extra": extra or {},
    }
    with zipfile.ZipFile(path, "w") as zf:
        _zip_write(zf, "meta.json", json.dumps(meta, sort_keys=True).encode())
        for name, p in model.named_parameters():
            buf = io.BytesIO()
            np.lib.format.write_array(buf, np.ascontiguousarray(p.data, dtype="<f8"), allow_pickle=False)
            _zip_write(zf, name + ".npy", buf.getvalue())


def load_checkpoint(path) -> SpeechTranslator:
    with zipfile.ZipFile(path) as zf:
        meta = json.loads(zf.read("meta.json"))
        if meta.get("format") != CHECKPOINT_FORMAT:
            raise ValueError(f"{path}: not a checkpoint")
        if meta.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {meta.get('version')}")
        model = SpeechTranslator(ModelConfig.from_dict(meta["model"]), meta["symbols"], seed=meta["seed"])
        if meta["lora"] is not None:
            model.attach_lora(LoraConfig(**meta["lora"]), 0)
        state = {}
        for name in zf.namelist():
            if name.endswith(".npy"):
                state[name[:-4]] = np.lib.format.read_array(io.BytesIO(zf.read(name)), allow_pickle=False)
    model.load_state_dict(state)
    return model


def checkpoint_meta(path) -> dict:
    with zipfile.ZipFile(path) as zf:
        return json.loads(zf.read("meta.json"))


def write_log(path, records: Sequence[dict]) -> None:
    Path(path).write_text("".join(json.dumps(r, sort_keys=True) + "\n" for r in records), encoding="utf-8")
