import math
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from streamst import tensor as T
from streamst.layers import Linear, LoraConfig, make_rng
from streamst.tensor import ContractError, Tensor
from streamst.trainer import (
    TrainConfig,
    TrainingSequence,
    build_training_sequence,
    checkpoint_meta,
    clip_grad_norm,
    load_checkpoint,
    lr_at,
    pack_batches,
    save_checkpoint,
    sequence_loss,
    token_accuracy,
    train,
    trainable_parameters,
    transcript_slots,
)
from streamst.trajectory import AlignedUtterance, SynthesisConfig, simulate_robust_segment

from conftest import analytic_grads, numeric_grad, rel_error

TINY_SYNTH = SynthesisConfig(chunk_ms=160, seg_chunks=4, silence_mean_ms=100, silence_max_ms=300)


def tiny_segments(n, seed=0, d_in=4):
    """Segments of 4 chunks × 8 frames whose source words a/b/c translate to x/y/x."""
    rng = np.random.default_rng(seed)
    lex = {"a": "x", "b": "y", "c": "x"}
    protos = {w: rng.normal(size=d_in) for w in lex}
    pool, frames = [], {}
    for i in range(12):
        words, rows, t = [], [], 0
        for _ in range(int(rng.integers(1, 4))):
            w = "abc"[int(rng.integers(0, 3))]
            n_frames = int(rng.integers(3, 7))
            rows.append(np.tile(protos[w], (n_frames, 1)))
            words.append((w, t * 20, (t + n_frames) * 20))
            t += n_frames
        uid = f"t{i}"
        tokens = [lex[w] for w, _, _ in words]
        pool.append(AlignedUtterance(uid, words, tokens, [(k, k) for k in range(len(words))], (0, t * 20)))
        frames[uid] = np.concatenate(rows) + rng.normal(0, 0.05, size=(t, d_in))
    return [simulate_robust_segment(pool, TINY_SYNTH, seed * 100 + i, frames, f"s{i}") for i in range(n)]


# -- schedule --------------------------------------------------------------------


def test_lr_schedule_landmarks():
    cfg = TrainConfig(max_lr=2e-4, warmup_steps=10)
    assert lr_at(0, cfg, 110) == 0.0
    assert lr_at(5, cfg, 110) == pytest.approx(1e-4)
    assert lr_at(10, cfg, 110) == pytest.approx(2e-4)
    assert lr_at(60, cfg, 110) == pytest.approx(1e-4)
    assert lr_at(110, cfg, 110) == pytest.approx(0.0, abs=1e-20)


def test_lr_schedule_without_warmup_starts_at_peak():
    assert lr_at(0, TrainConfig(max_lr=1e-3, warmup_steps=0), 5) == 1e-3


def test_lr_schedule_contract_errors():
    cfg = TrainConfig(warmup_steps=10)
    with pytest.raises(ContractError):
        lr_at(0, cfg, 10)
    with pytest.raises(ContractError):
        lr_at(11, TrainConfig(warmup_steps=2), 10)
    with pytest.raises(ContractError):
        TrainConfig(max_lr=0)


@given(st.integers(0, 50), st.integers(1, 400))
def test_lr_never_exceeds_peak(w, extra):
    cfg = TrainConfig(max_lr=1.0, warmup_steps=w)
    total = w + extra
    rates = [lr_at(s, cfg, total) for s in range(total + 1)]
    assert max(rates) <= 1.0 + 1e-12 and min(rates) >= 0.0
    assert all(a >= b - 1e-12 for a, b in zip(rates[w:], rates[w + 1 :]))


# -- sequences -------------------------------------------------------------------


@pytest.mark.parametrize("m", [1, 2, 3, 4, 7])
def test_sequence_layout_counts(tiny_model, m):
    seg = tiny_segments(1)[0]
    seq = build_training_sequence(seg, m, tiny_model)
    sp = tiny_model.vocab.special
    turns = math.ceil(4 / m)
    assert seq.n_turns == turns
    assert seq.n_speech == 4 * tiny_model.embeddings_per_chunk
    assert int((seq.ids == -1).sum()) == seq.n_speech
    assert seq.n_supervised == len(seg.trajectory.tokens) + turns
    assert int((seq.ids == sp.read).sum()) == turns == int((seq.ids == sp.user).sum())
    n_instr = len(tiny_model.instruction_ids)
    assert list(seq.ids[:n_instr]) == tiny_model.instruction_ids
    assert not seq.loss_mask[seq.ids == -1].any()
    assert not seq.loss_mask[seq.ids == sp.user].any()
    # supervised labels are exactly the targets and reads, in trajectory order
    labels = tiny_model.vocab.decode([int(i) for i in seq.ids[seq.loss_mask] if i != sp.read])
    assert labels == seg.trajectory.flatten()


def test_sequence_rejects_bad_multiplier(tiny_model):
    with pytest.raises(ContractError):
        build_training_sequence(tiny_segments(1)[0], 0, tiny_model)


def test_transcript_slots_mark_word_ends(tiny_model):
    # slots are 80 ms wide (4 frames of 20 ms); a segment has 8 of them
    seg = replace(tiny_segments(1)[0], source_words=[("a", 0, 200), ("b", 200, 300), ("c", 500, 640)])
    v = tiny_model.vocab
    blank, a, b, c = v.id("<blank>"), v.id("a"), v.id("b"), v.id("c")
    assert transcript_slots(seg, tiny_model).tolist() == [blank, blank, a, b, blank, blank, blank, c]
    assert transcript_slots(seg, tiny_model, span=True).tolist() == [a, a, b, b, blank, blank, c, c]


def _seq(n, sup):
    mask = np.zeros(n, bool)
    mask[:sup] = True
    return TrainingSequence(np.zeros(n, np.int64), mask, 0, 1, 1)


def test_packing_respects_budget_and_order():
    seqs = [_seq(n, 1) for n in (5, 4, 3, 6, 1, 2)]
    batches = pack_batches(seqs, 9)
    assert batches == [[0, 1], [2, 3], [4, 5]]
    assert [i for b in batches for i in b] == list(range(6))


@given(st.lists(st.integers(1, 20), min_size=1, max_size=30), st.integers(20, 60))
def test_packing_property(lengths, budget):
    batches = pack_batches([_seq(n, 1) for n in lengths], budget)
    assert [i for b in batches for i in b] == list(range(len(lengths)))
    assert all(sum(lengths[i] for i in b) <= budget for b in batches)


def test_packing_rejects_oversized_sequence():
    with pytest.raises(ContractError):
        pack_batches([_seq(10, 1)], 9)


def test_weighted_loss_equals_pooled_mean(tiny_model):
    """Accumulating n_i/N-weighted means gives the mean over all pooled tokens."""
    segs = tiny_segments(2)
    seqs = [build_training_sequence(s, m, tiny_model) for s, m in zip(segs, (1, 3))]
    speech = [tiny_model.speech_embeddings(s.frames) for s in segs]
    n_sup = sum(s.n_supervised for s in seqs)
    weighted = sum(float(sequence_loss(tiny_model, q, e).data) * q.n_supervised / n_sup for q, e in zip(seqs, speech))
    nll = []
    for q, e in zip(seqs, speech):
        lp = T.log_softmax(tiny_model.logits(q.ids, e), axis=-1).data
        rows = np.nonzero(q.loss_mask)[0]
        nll += list(-lp[rows - 1, q.ids[rows]])
    assert weighted == pytest.approx(np.mean(nll), rel=1e-12)


# -- gradients -------------------------------------------------------------------


def test_end_to_end_gradients_match_finite_differences(tiny_model):
    seg = tiny_segments(1, seed=4)[0]
    tiny_model.attach_lora(LoraConfig(rank=2, alpha=4.0, dropout=0.0), seed=1)
    for lin in tiny_model.decoder.linears():
        lin.lora_b.data[:] = np.random.default_rng(9).normal(0, 0.1, size=lin.lora_b.shape)
    seq = build_training_sequence(seg, 2, tiny_model)
    named = dict(tiny_model.named_parameters())
    picks = [n for n in named if n.startswith(("encoder.", "adapter.", "decoder."))]
    chosen = [picks[0], next(n for n in picks if n.startswith("adapter.")), "decoder.embed"]
    chosen += [next(n for n in picks if n.endswith("lora_a")), next(n for n in picks if n.endswith("lora_b"))]
    params = [named[n] for n in chosen]

    def loss():
        return sequence_loss(tiny_model, seq, tiny_model.speech_embeddings(seg.frames))

    grads = analytic_grads(loss, params)
    for name, p, g in zip(chosen, params, grads):
        num = numeric_grad(lambda: float(loss().data), p.data)
        assert rel_error(g, num) < 1e-4, name


def test_clip_grad_norm():
    a, b = Tensor(np.zeros(2), True), Tensor(np.zeros(1), True)
    a.grad, b.grad = np.array([3.0, 0.0]), np.array([4.0])
    assert clip_grad_norm([a, b], 1.0) == pytest.approx(5.0)
    assert np.allclose(np.concatenate([a.grad, b.grad]), [0.6, 0.0, 0.8])
    assert clip_grad_norm([a, b], 10.0) == pytest.approx(1.0)


# -- LoRA ------------------------------------------------------------------------


def test_lora_starts_as_identity_and_merges(rng):
    lin = Linear(6, 5, make_rng(0))
    x = Tensor(rng.normal(size=(3, 6)))
    before = lin(x).data
    lin.attach_lora(LoraConfig(rank=2, alpha=6.0, dropout=0.0), make_rng(1))
    assert np.array_equal(lin(x).data, before)
    lin.lora_b.data[:] = rng.normal(size=(2, 5))
    assert np.allclose(lin(x).data, x.data @ lin.merged_weight() + lin.bias.data, atol=1e-12)


def test_lora_rank_must_fit():
    with pytest.raises(ContractError):
        Linear(3, 8, make_rng(0)).attach_lora(LoraConfig(rank=4), make_rng(0))


# -- training stages -------------------------------------------------------------


def _snapshot(model):
    return {n: p.data.copy() for n, p in model.named_parameters()}


def _changed(before, model):
    return {n for n, p in model.named_parameters() if n not in before or not np.array_equal(before[n], p.data)}


def test_stage_one_touches_only_encoder_and_adapter(tiny_model):
    before = _snapshot(tiny_model)
    train(tiny_segments(3), tiny_model, TrainConfig(stage=1, max_lr=1e-2, warmup_steps=0, batch_token_budget=400))
    changed = _changed(before, tiny_model)
    assert changed and all(n.startswith(("encoder.", "adapter.")) for n in changed)


def test_stage_two_touches_only_lora(tiny_model):
    before = _snapshot(tiny_model)
    train(tiny_segments(3), tiny_model, TrainConfig(stage=2, max_lr=1e-2, warmup_steps=0), LoraConfig(rank=2))
    changed = _changed(before, tiny_model)
    assert changed and all(n.endswith((".lora_a", ".lora_b")) for n in changed)
    names = {n for n, _ in trainable_parameters(tiny_model, 2)}
    assert len(names) == 2 * len(tiny_model.decoder.linears())


def test_stage_zero_touches_only_decoder(tiny_model):
    before = _snapshot(tiny_model)
    train(tiny_segments(3), tiny_model, TrainConfig(stage=0, max_lr=1e-2, warmup_steps=0))
    changed = _changed(before, tiny_model)
    assert changed and all(n.startswith("decoder.") for n in changed)


def test_stage_two_requires_lora_config(tiny_model):
    with pytest.raises(ContractError):
        train(tiny_segments(1), tiny_model, TrainConfig(stage=2))


def _mean_loss(model, segs, stage):
    out = []
    for s in segs:
        speech = T.take_rows(model.decoder.embed, transcript_slots(s, model)) if stage == 0 else model.speech_embeddings(s.frames)
        out.append(float(sequence_loss(model, build_training_sequence(s, 1, model), speech).data))
    return np.mean(out)


@pytest.mark.parametrize("stage, factor", [(0, 0.7), (1, 0.9)])
def test_training_reduces_loss_and_is_deterministic(stage, factor):
    from conftest import tiny_config
    from streamst.model import SpeechTranslator

    def fresh():
        return SpeechTranslator(tiny_config(), ["a", "b", "c", "x", "y"], seed=3)

    segs = tiny_segments(8)
    cfg = TrainConfig(stage=stage, max_lr=2e-2, warmup_steps=2, epochs=6, batch_token_budget=200, max_multiplier=2)
    model = fresh()
    before = _mean_loss(model, segs, stage)
    res = train(segs, model, cfg)
    assert _mean_loss(model, segs, stage) < factor * before
    assert res.total_steps == len(res.log)
    assert [r["loss"] for r in train(segs, fresh(), cfg).log] == [r["loss"] for r in res.log]


def test_token_accuracy_counts_supervised_positions(tiny_model):
    segs = tiny_segments(2)
    correct, total = token_accuracy(tiny_model, segs, 2)
    assert total == sum(build_training_sequence(s, 2, tiny_model).n_supervised for s in segs)
    assert 0 <= correct <= total


# -- checkpoints -----------------------------------------------------------------


def test_checkpoint_roundtrip(tmp_path, tiny_model):
    tiny_model.attach_lora(LoraConfig(rank=2), seed=0)
    for lin in tiny_model.decoder.linears():
        lin.lora_b.data += 0.01
    save_checkpoint(tmp_path / "a.ckpt", tiny_model, extra={"stage": 2})
    save_checkpoint(tmp_path / "b.ckpt", tiny_model, extra={"stage": 2})
    assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()
    back = load_checkpoint(tmp_path / "a.ckpt")
    assert checkpoint_meta(tmp_path / "a.ckpt")["extra"] == {"stage": 2}
    for (n1, p1), (n2, p2) in zip(tiny_model.named_parameters(), back.named_parameters()):
        assert n1 == n2 and np.array_equal(p1.data, p2.data)
    seg = tiny_segments(1)[0]
    seq = build_training_sequence(seg, 1, tiny_model)
    a = tiny_model.logits(seq.ids, tiny_model.speech_embeddings(seg.frames)).data
    b = back.logits(seq.ids, back.speech_embeddings(seg.frames)).data
    assert np.array_equal(a, b)


def test_checkpoint_rejects_foreign_zip(tmp_path):
    import zipfile

    with zipfile.ZipFile(tmp_path / "x.zip", "w") as zf:
        zf.writestr("meta.json", '{"format": "other"}')
    with pytest.raises(ValueError):
        load_checkpoint(tmp_path / "x.zip")
