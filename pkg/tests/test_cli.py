import json
import math
from pathlib import Path

import pytest

from streamst.cli import main, validate_manifest
from streamst.trajectory import read_jsonl, write_jsonl

SMALL = """
[model]
d_llm = 8
dec_layers = 1
dec_heads = 2
recent_window = 64

[model.encoder]
d_in = 4
d_model = 8
n_layers = 1
n_heads = 2
chunk_frames = 8
window_chunks = 2

[synthesis]
chunk_ms = 160
seg_chunks = 6
max_multiplier = 3
silence_mean_ms = 200
silence_max_ms = 400

[data]
n_recordings = 1
recording_ms = 4800
n_pool = 12
n_simulated = 4
n_heldout = 1
heldout_ms = 1920

[toy]
n_symbols = 4
n_modifiers = 1
d_in = 4
word_frames = [3, 6]
words_per_utt = [1, 3]
max_gap_frames = 1

[train.stage1]
max_lr = 1e-2
warmup_steps = 0
batch_token_budget = 256
max_multiplier = 3

[train.stage2]
max_lr = 1e-2
warmup_steps = 0
batch_token_budget = 256
max_multiplier = 3

[lora]
rank = 2
alpha = 4.0

[generation]
beam_size = 2
max_new_tokens = 4

[cost]
per_embedding_ms = 1.0
per_token_ms = 5.0

[run]
latency_multipliers = [2]
"""


@pytest.fixture
def small_config(tmp_path):
    p = tmp_path / "small.toml"
    p.write_text(SMALL)
    return p


def run_cli(capsys, *argv):
    code = main([str(a) for a in argv])
    out = capsys.readouterr()
    return code, out.out, out.err


def pipeline(capsys, cfg, work: Path, seed=0):
    data, ckpt, logs = work / "data", work / "ckpt", work / "logs"
    assert run_cli(capsys, "synthesize", "--config", cfg, "--seed", seed, "--mock-endpoint", "--output", data)[0] == 0
    assert run_cli(capsys, "train", "--config", cfg, "--stage", 1, "--data", data, "--output", ckpt / "s1.ckpt")[0] == 0
    code, _, _ = run_cli(
        capsys, "train", "--config", cfg, "--stage", 2, "--data", data, "--init", ckpt / "s1.ckpt", "--output", ckpt / "s2.ckpt"
    )
    assert code == 0
    feats = sorted((data / "heldout").glob("*.feat"))
    code, out, _ = run_cli(
        capsys, "translate", "--config", cfg, "--json", "--checkpoint", ckpt / "s2.ckpt",
        "--latency-multiplier", 3, "--output", logs, *feats,
    )
    assert code == 0 and json.loads(out)["multiplier"] == 3
    log_files = sorted(logs.glob("*.emissions.jsonl"))
    refs = [data / "heldout" / (f.name.split(".")[0] + ".refs.jsonl") for f in log_files]
    code, out, _ = run_cli(
        capsys, "evaluate", "--json", "--logs", *log_files, "--refs", *refs, "--output", work / "report.json"
    )
    assert code == 0
    return data, log_files, json.loads(out)


def test_full_pipeline_smoke(tmp_path, capsys, small_config):
    data, logs, report = pipeline(capsys, small_config, tmp_path)
    assert set(report) == {"bleu", "stream_laal_ms", "stream_laal_ca_ms"}
    # lag may be negative: resegmentation can move an early token into a later reference
    assert math.isfinite(report["stream_laal_ms"])
    assert report["stream_laal_ca_ms"] >= report["stream_laal_ms"]
    assert validate_manifest(data / "train.jsonl")["ok"]
    assert validate_manifest(data / "alignments.jsonl")["ok"]


def test_pipeline_is_byte_reproducible(tmp_path, capsys, small_config):
    pipeline(capsys, small_config, tmp_path / "a")
    pipeline(capsys, small_config, tmp_path / "b")
    for rel in ["data/train.jsonl", "data/train.feat", "data/alignments.jsonl", "ckpt/s2.ckpt", "report.json"]:
        assert (tmp_path / "a" / rel).read_bytes() == (tmp_path / "b" / rel).read_bytes(), rel
    for f in (tmp_path / "a" / "logs").iterdir():
        assert f.read_bytes() == (tmp_path / "b" / "logs" / f.name).read_bytes()


def test_evaluate_identical_streams_reports_full_bleu(tmp_path, capsys):
    refs = [{"schema": "ref_segment/v1", "stream": "s", "tokens": ["a", "b", "c", "d"], "t0_ms": 0, "t1_ms": 960}]
    write_jsonl(tmp_path / "r.jsonl", refs)
    lines = [{"schema": "emission_log/v1", "source_ms": 960, "multiplier": 1, "forced_turns": [], "stream": "s"}]
    lines += [{"token": t, "ideal_ms": 960, "ca_ms": 980, "turn": 0} for t in "abcd"]
    write_jsonl(tmp_path / "l.jsonl", lines)
    code, out, _ = run_cli(capsys, "evaluate", "--logs", tmp_path / "l.jsonl", "--refs", tmp_path / "r.jsonl")
    assert code == 0
    assert out.startswith("BLEU / StreamLAAL / StreamLAAL_CA: 100.00 / 960 / 980")


def test_translate_reports_latency_in_ms(tmp_path, capsys, small_config):
    data, logs, report = pipeline(capsys, small_config, tmp_path)
    assert isinstance(report["stream_laal_ms"], float)
    first = read_jsonl(logs[0])
    assert first[0]["multiplier"] == 3
    assert all(r["ideal_ms"] >= 3 * 160 or r["ideal_ms"] == first[0]["source_ms"] for r in first[1:])


@pytest.mark.parametrize(
    "argv",
    [["frobnicate"], ["train", "--stage", "1"], ["translate", "--bogus"], ["evaluate", "--logs", "a", "--refs", "b", "c"], []],
)
def test_usage_errors_exit_2(capsys, argv):
    code, _, err = run_cli(capsys, *argv)
    assert code == 2 and err


@pytest.mark.parametrize("cmd", ["synthesize", "train", "translate", "evaluate", "validate"])
def test_every_command_has_help_and_json(capsys, cmd):
    code, out, _ = run_cli(capsys, cmd, "--help")
    assert code == 0 and "--json" in out


def test_validate_flags_bad_record(tmp_path, capsys):
    good = {"schema": "aligned_utterance/v1", "utt_id": "u1", "recording_id": None, "span": [0, 1000],
            "source_words": [["a", 0, 300], ["b", 300, 600]], "target_tokens": ["x"], "alignment": [[0, 0]]}
    bad = dict(good, utt_id="u2", source_words=[["a", 0, 300], ["b", 200, 100]])
    write_jsonl(tmp_path / "m.jsonl", [good, bad, good])
    code, out, _ = run_cli(capsys, "validate", "--json", tmp_path / "m.jsonl")
    rep = json.loads(out)
    assert code == 1
    assert rep["records"] == 3 == len((tmp_path / "m.jsonl").read_text().splitlines())
    assert [r["ok"] for r in rep["results"]] == [True, False, True]
    assert (rep["passed"], rep["failed"]) == (2, 1)


def test_validate_unknown_schema_and_missing_file(tmp_path, capsys):
    write_jsonl(tmp_path / "m.jsonl", [{"schema": "v0"}])
    assert run_cli(capsys, "validate", tmp_path / "m.jsonl")[0] == 1
    code, out, _ = run_cli(capsys, "validate", tmp_path / "absent.jsonl")
    assert code == 1 and "unreadable" in out


def test_validate_well_formed_manifest_passes(tmp_path, capsys, small_config):
    data = tmp_path / "d"
    assert run_cli(capsys, "synthesize", "--config", small_config, "--output", data)[0] == 0
    code, out, _ = run_cli(capsys, "validate", data / "train.jsonl", data / "heldout" / "heldout0.refs.jsonl")
    assert code == 0 and " 0 failed" in out
