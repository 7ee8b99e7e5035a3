import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from streamst.decoder import GenConfig
from streamst.encoder import EncoderConfig
from streamst.model import ModelConfig, SpeechTranslator
from streamst.streaming import CostModel, EmissionLog, StreamError, StreamSource, StreamingEngine, run_stream
from streamst.tensor import ContractError

from conftest import tiny_config

SYMBOLS = ["a", "b", "c", "x", "y"]
FAST = GenConfig(beam_size=2, max_new_tokens=3)


def full_size_chunk_model(seed=0):
    """Tiny widths but the real 48-frame / 960 ms chunking."""
    enc = EncoderConfig(d_in=4, d_model=8, n_layers=1, n_heads=2, chunk_frames=48, window_chunks=10)
    return SpeechTranslator(ModelConfig(enc, d_llm=8, dec_layers=1, dec_heads=2), SYMBOLS, seed=seed)


def always_read(model):
    """Force every turn to close immediately: the final norm emits a constant row that favours ``<read>``."""
    read = model.vocab.special.read
    model.decoder.ln_f.gain.data[:] = 0.0
    model.decoder.ln_f.bias.data[:] = 1.0
    model.decoder.head.weight.data[:] = 0.0
    model.decoder.head.weight.data[:, read] = 1.0
    return model


def noise(n, d=4, seed=0):
    return np.random.default_rng(seed).normal(size=(n, d))


# -- stream source -----------------------------------------------------------------


def test_source_rejects_timestamp_gap():
    with pytest.raises(StreamError):
        StreamSource(noise(4), timestamps=[0, 20, 60, 80])


def test_source_rejects_overlap():
    with pytest.raises(StreamError):
        StreamSource(noise(3), timestamps=[0, 20, 20])


def test_source_pulls_in_order():
    src = StreamSource(noise(10), start_ms=100)
    groups = list(src.groups(4))
    assert [len(f) for f, _ in groups] == [4, 4, 2]
    assert groups[1][1].tolist() == [180, 200, 220, 240]


def test_run_stream_rejects_wrong_width(tiny_model):
    with pytest.raises(StreamError):
        run_stream(StreamSource(noise(16, d=5)), tiny_model, 1)


def test_run_stream_rejects_bad_multiplier(tiny_model):
    with pytest.raises(ContractError):
        run_stream(StreamSource(noise(16)), tiny_model, 0)


# -- timing ------------------------------------------------------------------------


def test_zero_cost_gives_equal_clocks(tiny_model):
    log = run_stream(StreamSource(noise(8 * 7)), tiny_model, 2, CostModel(), FAST)
    assert log.records
    assert all(r.ca_ms == r.ideal_ms for r in log.records)


def test_first_tokens_wait_for_three_chunks():
    model = full_size_chunk_model()
    log = run_stream(StreamSource(noise(48 * 7)), model, 3, CostModel(), FAST)
    assert log.records
    assert min(log.ideal_times) >= 2880
    assert set(log.ideal_times) <= {2880.0, 5760.0, 6720.0}


@settings(max_examples=15)
@given(st.integers(1, 4), st.integers(1, 30), st.floats(0, 50), st.floats(0, 50))
def test_emission_clocks_are_ordered(k, n_frames, per_emb, per_tok):
    model = SpeechTranslator(tiny_config(), SYMBOLS, seed=3)
    log = run_stream(StreamSource(noise(n_frames)), model, k, CostModel(per_emb, per_tok), FAST)
    ideal, ca = log.ideal_times, log.ca_times
    assert all(a <= b for a, b in zip(ideal, ideal[1:]))
    assert all(a <= b for a, b in zip(ca, ca[1:]))
    assert all(c >= i for c, i in zip(ca, ideal))
    # a token never precedes the end of the speech its turn was conditioned on
    group_ms = k * 160
    for r in log.records:
        assert r.ideal_ms == min((r.turn + 1) * group_ms, n_frames * 20)


def test_simulated_cost_accumulates(tiny_model):
    cost = CostModel(per_embedding_ms=10.0, per_token_ms=3.0)
    log = run_stream(StreamSource(noise(8)), tiny_model, 1, cost, FAST)
    n = len(log.records)
    assert n >= 1
    # one chunk gives 2 embeddings; token i finishes after 20 + 3·(i+1) ms of work
    assert log.ca_times == [160 + 20 + 3.0 * (i + 1) for i in range(n)]


def test_backlog_delays_later_turns(tiny_model):
    slow = CostModel(per_embedding_ms=500.0)
    log = run_stream(StreamSource(noise(8 * 3)), tiny_model, 1, slow, FAST)
    by_turn = {}
    for r in log.records:
        by_turn.setdefault(r.turn, r.ca_ms)
    turns = sorted(by_turn)
    assert all(by_turn[b] - by_turn[a] >= 1000.0 for a, b in zip(turns, turns[1:]))


# -- engine state -------------------------------------------------------------------


def test_engine_state_matches_uncached_replay(tiny_model, rng):
    engine = StreamingEngine(tiny_model, FAST)
    state = engine.init_state()
    frames = rng.normal(size=(8 * 5, 4))
    for c in range(5):
        _, state, _ = engine.step(state, frames[8 * c : 8 * (c + 1)])
        seen = frames[: 8 * (c + 1)]
        # encoder window is 2 chunks, so the incremental encoder matches the masked full pass
        full_emb = tiny_model.speech_embeddings(seen).data
        got_emb = np.stack([p for kind, p in state.dialogue.items if kind == "emb"])
        assert np.allclose(got_emb, full_emb, atol=1e-10)
        items = [("tok", t) for t in tiny_model.instruction_ids] + list(state.dialogue.items)
        expect = tiny_model.decoder.logits_for_items(items)[-1]
        assert np.allclose(state.dialogue.next_logits, expect, atol=1e-10)


def test_empty_turn_advances_state_without_output(tiny_model):
    model = always_read(tiny_model)
    engine = StreamingEngine(model, FAST)
    state = engine.init_state()
    emitted, state, forced = engine.step(state, noise(8))
    assert emitted == [] and not forced
    assert state.turn == 1 and state.encoder.chunks_seen == 1
    assert state.dialogue.items[-1] == ("tok", model.vocab.special.read)


def test_mid_stream_partial_group_is_rejected(tiny_model):
    engine = StreamingEngine(tiny_model, FAST)
    with pytest.raises(ContractError):
        engine.step(engine.init_state(), noise(5))
    emitted, state, _ = engine.step(engine.init_state(), noise(5), final=True)
    assert state.encoder.chunks_seen == 1


def test_final_partial_group_still_translates(tiny_model):
    log = run_stream(StreamSource(noise(8 * 2 + 3)), tiny_model, 2, gen=FAST)
    assert max(r.turn for r in log.records) == 1
    assert log.records[-1].ideal_ms == 19 * 20


def test_memory_is_bounded_on_long_streams():
    model = always_read(SpeechTranslator(tiny_config(recent_window=40), SYMBOLS, seed=3))
    engine = StreamingEngine(model, GenConfig(beam_size=1, max_new_tokens=1))

    def run(n_chunks):
        state = engine.init_state()
        frames = noise(8 * n_chunks, seed=n_chunks)
        for c in range(n_chunks):
            _, state, _ = engine.step(state, frames[8 * c : 8 * (c + 1)])
        return state

    short, long = run(50), run(1000)
    assert long.encoder.retained_entries() == short.encoder.retained_entries() == [2 * 8]
    assert long.dialogue.rolling_len == short.dialogue.rolling_len <= 40
    assert long.dialogue.instruction_len == short.dialogue.instruction_len
    assert len(long.dialogue.items) == long.dialogue.rolling_len


def test_forced_turns_are_flagged(tiny_model):
    d = tiny_model.decoder
    read = tiny_model.vocab.special.read
    d.ln_f.gain.data[:] = 0.0
    d.ln_f.bias.data[:] = 1.0
    d.head.weight.data[:] = 0.0
    d.head.weight.data[:, tiny_model.vocab.id("x")] = 1.0
    d.head.weight.data[:, read] = -1.0
    log = run_stream(StreamSource(noise(16)), tiny_model, 1, gen=GenConfig(max_new_tokens=2, no_repeat_ngram=0))
    assert log.forced_turns == [0, 1]
    assert log.tokens == ["x"] * 4


# -- logs ---------------------------------------------------------------------------


def test_emission_log_roundtrip(tmp_path, tiny_model):
    log = run_stream(StreamSource(noise(24)), tiny_model, 1, CostModel(1.5, 0.25), FAST, stream_id="s0")
    log.write(tmp_path / "log.jsonl")
    back = EmissionLog.read(tmp_path / "log.jsonl")
    assert back == log
    assert back.to_jsonl() == (tmp_path / "log.jsonl").read_text()


def test_emission_log_rejects_other_files(tmp_path):
    (tmp_path / "x.jsonl").write_text('{"schema": "other"}\n')
    with pytest.raises(ValueError):
        EmissionLog.read(tmp_path / "x.jsonl")


def test_repeated_runs_are_identical(tiny_model):
    a = run_stream(StreamSource(noise(40)), tiny_model, 2, CostModel(2.0, 1.0), FAST).to_jsonl()
    b = run_stream(StreamSource(noise(40)), tiny_model, 2, CostModel(2.0, 1.0), FAST).to_jsonl()
    assert a == b
