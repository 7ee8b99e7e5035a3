from pathlib import Path

import pytest

from streamst.config import RunConfig, load_config, parse_config
from streamst.tensor import ContractError

CONFIGS = Path(__file__).resolve().parent.parent / "configs"


def test_shipped_defaults_load():
    cfg = load_config(CONFIGS / "defaults.toml")
    enc = cfg.model.encoder
    assert (enc.chunk_frames, enc.chunk_ms, enc.window_chunks) == (48, 960, 10)
    assert (cfg.synthesis.seg_chunks, cfg.synthesis.max_multiplier) == (30, 12)
    assert cfg.model.recent_window == 1024
    assert cfg.lora.rank == 4
    g = cfg.generation
    assert (g.beam_size, g.repetition_penalty, g.no_repeat_ngram) == (4, 1.2, 5)
    assert (cfg.stage(1).max_lr, cfg.stage(2).max_lr) == (2e-4, 1e-4)
    assert cfg.stage(1).warmup_steps == 1000
    assert cfg.run.latency_multipliers == (3,)


def test_shipped_toy_config_loads():
    cfg = load_config(CONFIGS / "toy.toml")
    assert cfg.model.encoder.chunk_ms == cfg.synthesis.chunk_ms
    assert {s.stage for s in cfg.stages} >= {1, 2}
    assert cfg.run.latency_multipliers == (1, 2, 3)


def test_empty_document_gives_defaults():
    assert parse_config({}) == RunConfig()


def test_unknown_keys_are_rejected():
    with pytest.raises(ContractError):
        parse_config({"model": {"d_lm": 3}})
    with pytest.raises(ContractError):
        parse_config({"modle": {}})
    with pytest.raises(ContractError):
        parse_config({"train": {"warmup": {}}})


def test_stage_table_must_agree_with_its_name():
    with pytest.raises(ContractError):
        parse_config({"train": {"stage1": {"stage": 2}}})


def test_chunk_settings_must_agree():
    with pytest.raises(ContractError):
        parse_config({"synthesis": {"chunk_ms": 480}})


def test_missing_paths_are_reported(tmp_path):
    p = tmp_path / "c.toml"
    p.write_text('[data]\nalignments = "nope.jsonl"\n')
    assert load_config(p).missing_paths() == ["data.alignments=nope.jsonl"]
    (tmp_path / "nope.jsonl").write_text("")
    assert load_config(p).missing_paths() == []


def test_value_checks_run_on_load():
    with pytest.raises(ContractError):
        parse_config({"generation": {"beam_size": 0}})
    with pytest.raises(ContractError):
        parse_config({"lora": {"rank": 0}})
