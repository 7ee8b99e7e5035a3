"""Acceptance checks; each prints one PASS/FAIL line."""

import time
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings

from conftest import analytic_grads, numeric_grad, rel_error, tiny_config
from test_attention import _full, _stream
from test_cli import SMALL, pipeline
from test_decoder import exhaustive, explicit_logits, make_decoder, run_turns, table_score_fn
from test_encoder import small_encoder, stream_chunks
from test_metrics import brute_force_spans, make_log, stream_case
from test_trainer import tiny_segments
from test_trajectory import (
    brute_force_steps,
    global_steps,
    random_utterance,
    recording,
    step_of_each_token,
)

from streamst.attention import ChunkMaskSpec, LayerKVCache, RopeConfig, incremental_attend
from streamst.decoder import GenConfig, append_speech_turn, beam_search
from streamst.encoder import Adapter, AdapterConfig, adapt
from streamst.config import load_config
from streamst.experiment import pretrain_decoder, run_toy_experiment
from streamst.layers import LoraConfig, make_rng
from streamst.metrics import corpus_bleu, laal_segment, resegment_spans, stream_laal
from streamst.model import SpeechTranslator
from streamst.trainer import build_training_sequence, sequence_loss
from streamst.trajectory import (
    build_trajectory,
    enforce_monotonic,
    merge_chunks,
    simulate_robust_segment,
    slice_robust_segments,
    word_boundaries,
)

ROOT = Path(__file__).resolve().parent.parent
TOY_CONFIG = ROOT / "configs" / "toy.toml"
STAGE0 = ROOT / "assets" / "toy_stage0.ckpt"


@pytest.fixture
def report(capsys):
    def emit(n, ok, detail):
        with capsys.disabled():
            print(f"\n{'PASS' if ok else 'FAIL'} criterion {n}: {detail}")
        assert ok, detail

    return emit


def test_criterion_1_incremental_encoding_matches_full(report):
    start = time.perf_counter()
    worst = 0.0
    for seed in range(100):
        rng = np.random.default_rng(seed)
        n_chunks, cf = int(rng.integers(1, 21)), 4 * int(rng.integers(1, 4))
        enc = small_encoder(window=int(rng.integers(1, 5)), cf=cf, seed=seed, d_in=int(rng.integers(2, 9)))
        frames = rng.normal(size=(n_chunks * cf, enc.cfg.d_in))
        inc, _ = stream_chunks(enc, frames)
        worst = max(worst, float(np.max(np.abs(inc - enc.encode_full(frames).data))))
        # the attention kernel alone, at widths up to 64
        spec, rope = ChunkMaskSpec(cf, int(rng.integers(1, 5))), RopeConfig(32)
        q, k, v = _stream(rng, n_chunks, cf, heads=2, hd=32)
        ref = _full(q, k, v, spec, rope)
        cache = LayerKVCache.empty(2, 32, spec.window_chunks * cf)
        for c in range(n_chunks):
            sl = slice(c * cf, (c + 1) * cf)
            out, cache = incremental_attend(cache, q[:, sl], k[:, sl], v[:, sl], np.arange(sl.start, sl.stop), spec, rope)
            worst = max(worst, float(np.max(np.abs(out - ref[:, sl]))))
    elapsed = time.perf_counter() - start
    report(1, worst <= 1e-10 and elapsed < 60, f"100 streams, max abs diff {worst:.2e}, {elapsed:.1f} s")


def test_criterion_2_eviction_matches_truncated_recomputation(report):
    worst = 0.0
    for seed in range(50):
        rng = np.random.default_rng(seed)
        dec = make_decoder(window=int(rng.integers(12, 40)), layers=int(rng.integers(1, 4)), seed=seed)
        s = run_turns(dec, int(rng.integers(3, 8)), rng)
        s = append_speech_turn(dec, s, rng.normal(size=(5, 8)))
        worst = max(worst, float(np.max(np.abs(s.next_logits - explicit_logits(dec, [4, 5], s)))))
    report(2, worst <= 1e-10, f"50 cases, max abs diff {worst:.2e}")


def test_criterion_3_pipeline_gradients_match_finite_differences(report):
    model = SpeechTranslator(tiny_config(), ["a", "b", "c", "x", "y"], seed=3)
    model.attach_lora(LoraConfig(rank=2, alpha=4.0, dropout=0.0), seed=1)
    for lin in model.decoder.linears():
        lin.lora_b.data[:] = np.random.default_rng(9).normal(0, 0.1, size=lin.lora_b.shape)
    seg = tiny_segments(1, seed=4)[0]
    seq = build_training_sequence(seg, 2, model)
    named = dict(model.named_parameters())
    groups = ("encoder.", "adapter.", "decoder.embed", "lora_a", "lora_b")
    chosen = [next(n for n in named if g in n) for g in groups]
    params = [named[n] for n in chosen]

    def loss():
        return sequence_loss(model, seq, model.speech_embeddings(seg.frames))

    grads = analytic_grads(loss, params)
    worst = max(rel_error(g, numeric_grad(lambda: float(loss().data), p.data)) for p, g in zip(params, grads))
    report(3, worst < 1e-4, f"{len(chosen)} parameter groups, worst relative error {worst:.2e}")


def test_criterion_4_adapter_reduces_by_four(report):
    a = Adapter(AdapterConfig(6, 5), make_rng(0))
    rng = np.random.default_rng(0)
    ok = adapt(a, rng.normal(size=(48, 6))).shape == (12, 5)
    ok &= all(adapt(a, rng.normal(size=(4 * n, 6))).shape == (n, 5) for n in range(1, 61))
    report(4, ok, "48 frames give 12 embeddings; 4n frames give n for n in 1..60")


def test_criterion_5_trajectory_oracle(report):
    rng = np.random.default_rng(5)
    bad = []
    for i in range(1000):
        u = random_utterance(rng, f"u{i}")
        m = enforce_monotonic(word_boundaries(u))
        t = build_trajectory(u, m)
        if step_of_each_token(t) != brute_force_steps(m, 960) or enforce_monotonic(m) != m:
            bad.append(u.utt_id)
        merged = merge_chunks(t, int(rng.integers(1, 13)))
        if merged.flatten() != u.target_tokens:
            bad.append(u.utt_id + ":merge")
    for seed in range(20):
        r = np.random.default_rng(seed)
        utts = recording(r)
        for seg in slice_robust_segments(utts):
            tokens, steps = global_steps(utts, seg)
            if seg.trajectory.flatten() != tokens or step_of_each_token(seg.trajectory) != steps:
                bad.append(f"slice{seed}")
        pool = [random_utterance(r, f"p{i}") for i in range(15)]
        sim = simulate_robust_segment(pool, seed=seed)
        n_tokens = sum(p["n_tokens"] for p in sim.provenance)
        if len(sim.trajectory.flatten()) != n_tokens:
            bad.append(f"sim{seed}")
    report(5, not bad, f"1000 utterances plus slicing and simulation checks, {len(bad)} mismatches")


def test_criterion_6_beam_search_oracle(report):
    mismatches = 0
    rng = np.random.default_rng(6)
    for case in range(200):
        vocab, length = int(rng.integers(2, 5)), int(rng.integers(1, 5))
        cfg = GenConfig(beam_size=vocab**length, repetition_penalty=float(rng.choice([1.0, 1.3, 2.0])),
                        no_repeat_ngram=int(rng.integers(0, 3)), max_new_tokens=length)
        fn = table_score_fn(case, vocab)
        read = 1 % vocab
        history = tuple(int(x) for x in rng.integers(0, vocab, int(rng.integers(0, 3))))
        got = beam_search(fn, cfg, read, history=history)
        best = exhaustive(fn, cfg, read, history=history)
        expect = best[:-1] if best[-1] == read else best
        mismatches += got.tokens != expect or got.forced != (best[-1] != read)
    report(6, mismatches == 0, f"200 logit tables, {mismatches} mismatches")


def test_criterion_7_metric_oracles(report):
    checks = {
        "bleu hand case": abs(corpus_bleu([list("abcd")], [list("abcde")]) - 77.88) < 0.01,
        "laal perfect pace": laal_segment([0, 250, 500, 750], 1000, 4) == 0.0,
        "laal all at end": laal_segment([1000, 1000, 1000], 1000, 3) == 1000.0,
        "laal empty": laal_segment([], 1234, 5) == 1234.0,
    }
    rng = np.random.default_rng(7)
    seg_ok = True
    for _ in range(300):
        hyp = list(rng.choice(list("abc"), int(rng.integers(0, 8))))
        refs = [list(rng.choice(list("abc"), int(rng.integers(0, 4)))) for _ in range(int(rng.integers(1, 4)))]
        seg_ok &= resegment_spans(hyp, refs) == brute_force_spans(hyp, refs)
    checks["resegmentation"] = seg_ok
    ca_ok = []

    @settings(max_examples=300, derandomize=True)
    @given(stream_case())
    def ca_never_below(case):
        refs, tokens, ideal, ca = case
        log = make_log(tokens, ideal, ca)
        ca_ok.append(stream_laal(log, refs, "ca") >= stream_laal(log, refs, "ideal") - 1e-9)

    ca_never_below()
    checks["ca >= ideal"] = all(ca_ok)
    failed = [k for k, v in checks.items() if not v]
    report(7, not failed, f"{len(checks)} checks, failed: {failed or 'none'}")


@pytest.fixture(scope="module")
def stage0_checkpoint(tmp_path_factory):
    if STAGE0.exists():
        return STAGE0
    path = tmp_path_factory.mktemp("stage0") / "toy_stage0.ckpt"
    pretrain_decoder(load_config(TOY_CONFIG), path)
    return path


def test_criterion_8_toy_experiment(tmp_path, stage0_checkpoint, report):
    rep = run_toy_experiment(TOY_CONFIG, tmp_path, stage0_checkpoint)
    lags = rep.stream_laal
    acc = {k: round(100 * v, 2) for k, v in rep.accuracy.items()}
    ok = min(rep.accuracy.values()) >= 0.95 and rep.laal_monotone and rep.seconds < 15 * 60
    detail = (f"held-out token accuracy {acc} %, StreamLAAL {[round(x) for x in lags]} ms "
              f"for k={rep.multipliers}, {rep.seconds:.0f} s")
    report(8, ok, detail)


def test_criterion_9_byte_identical_reruns(tmp_path, capsys, report):
    cfg = tmp_path / "small.toml"
    cfg.write_text(SMALL)
    pipeline(capsys, cfg, tmp_path / "a")
    pipeline(capsys, cfg, tmp_path / "b")
    files = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*") if p.is_file())
    differ = [str(f) for f in files if (tmp_path / "a" / f).read_bytes() != (tmp_path / "b" / f).read_bytes()]
    kinds = {"manifest": any(f.suffix == ".jsonl" and f.parts[0] == "data" for f in files),
             "log": any(f.name.endswith(".emissions.jsonl") for f in files),
             "report": any(f.name == "report.json" for f in files)}
    report(9, not differ and all(kinds.values()), f"{len(files)} files compared, differing: {differ or 'none'}")
