import json
import math
import os

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from iada import numeric as nm
from iada.backbone import Backbone, BackboneConfig
from iada.cli import EXIT_CONFIG, EXIT_NUMERIC, EXIT_OK, EXIT_USAGE, _seeds, main
from iada.config import (
    ConfigError,
    build_experiment,
    load_config,
    named_configs,
    parse_config,
    resolve_experiment,
    serialize_config,
)
from iada.depth_agg import AggregatorConfig, DepthAggregator
from iada.harness import Experiment, Metrics, SweepCell, tax_report
from iada.io import (
    MAGIC,
    CheckpointError,
    atomic_write,
    condition_table,
    decode_checkpoint,
    dumps_records,
    emit_report,
    encode_checkpoint,
    load_checkpoint,
    load_into,
    metrics_records,
    parse_metrics,
    read_records,
    save_checkpoint,
    sweep_table,
)

TINY = """\
# small enough for the CLI tests to train in seconds
[backbone]
n_layers = 4
n_blocks = 2
d_model = 16
n_heads = 2
max_len = 20

[aggregator]
rank = 4

[adapter]
rank = 2
alpha = 4.0

[train]
steps = 3
batch_size = 8
pretrain_steps = 4
precision = 64
log_every = 1

[tasks]
eval_size = 20
"""


@pytest.fixture
def tiny_cfg(tmp_path):
    p = tmp_path / "tiny.cfg"
    p.write_text(TINY)
    return str(p)


# -- config -------------------------------------------------------------------------------------

def test_defaults_round_trip():
    resolved = resolve_experiment(Experiment())
    assert parse_config(serialize_config(resolved)) == resolved
    assert build_experiment(resolved) == Experiment()


def test_bundled_configs_round_trip():
    assert {"toy", "iada_r16"} <= set(named_configs())
    for name in named_configs():
        resolved = load_config(name)
        assert parse_config(serialize_config(resolved)) == resolved


@settings(max_examples=40, deadline=None)
@given(rank=st.sampled_from([1, 2, 4, 16, "full_rank"]), gate=st.floats(-20, 5),
       cond=st.sampled_from(["self_modal", "cross_modal", "shared_no_split", "text_only", "vision_only"]),
       lr=st.floats(1e-6, 1.0), steps=st.integers(0, 5000), ctx=st.booleans())
def test_config_round_trip_property(rank, gate, cond, lr, steps, ctx):
    text = (f"[aggregator]\nrank = {rank}\ngate_init = {gate!r}\nconditioning = {cond}\n"
            f"context_norm = {str(ctx).lower()}\n[train]\nadapter_lr = {lr!r}\nsteps = {steps}\n")
    resolved = parse_config(text)
    assert resolved["aggregator"]["rank"] == rank
    assert resolved["aggregator"]["gate_init"] == gate
    assert parse_config(serialize_config(resolved)) == resolved


def test_missing_keys_take_defaults():
    resolved = parse_config("[aggregator]\nrank = 4\n")
    base = resolve_experiment(Experiment())
    assert resolved["aggregator"]["rank"] == 4
    assert resolved["backbone"] == base["backbone"]
    assert resolved["train"] == base["train"]


@pytest.mark.parametrize("text, line, what", [
    ("[backbone]\nd_model = 64\nwidth = 3\n", 3, "unknown key"),
    ("[backbone]\n\n[optimizer]\n", 3, "unknown section"),
    ("[train]\nsteps = ten\n", 2, "bad value"),
    ("d_model = 64\n", 1, "outside any section"),
    ("[train]\n# comment\nsteps\n", 3, "expected 'key = value'"),
    ("[train]\nsteps = 1\nsteps = 2\n", 3, "duplicate"),
    ("[aggregator]\ncontext_norm = maybe\n", 2, "boolean"),
    ("[backbone\n", 1, "malformed"),
])
def test_parse_errors_name_the_line(text, line, what):
    with pytest.raises(ConfigError, match=f"<config>:{line}: .*{what}"):
        parse_config(text)


def test_semantic_errors_are_config_errors():
    with pytest.raises(ConfigError, match="query_mode"):
        parse_config("[aggregator]\nquery_mode = learned\n")
    with pytest.raises(ConfigError, match="max_len"):
        parse_config("[backbone]\nmax_len = 16\n")
    with pytest.raises(ConfigError, match="no config"):
        load_config("does-not-exist")


def test_load_config_from_path(tiny_cfg):
    exp = build_experiment(load_config(tiny_cfg))
    assert exp.backbone.d_model == 16 and exp.pretrain.steps == 4 and exp.finetune.steps == 3
    assert exp.aggregator.rank == 4 and exp.adapter.rank == 2


# -- checkpoints -----------------------------------------------------------------------------------

def small_pair():
    cfg = BackboneConfig(n_layers=4, n_blocks=2, d_model=16, n_heads=2, max_len=20)
    with nm.precision(32):
        m = Backbone(cfg, seed=0)
        m.add_adapters(2, 4.0, seed=1)
        for p in m.adapter_params().values():
            p.data = np.random.default_rng(2).normal(size=p.shape).astype(np.float32)
        a = DepthAggregator(AggregatorConfig(rank=4), 16, 2, 2, seed=3)
        a.astype(32)
    return cfg, m, a


def test_checkpoint_round_trip_bit_exact(tmp_path):
    cfg, m, a = small_pair()
    path = tmp_path / "m.ckpt"
    save_checkpoint(path, m, a, config_text="[backbone]\n")
    assert (tmp_path / "m.ckpt.cfg").read_text() == "[backbone]\n"
    arrays = load_checkpoint(path)
    with nm.precision(32):
        m2 = Backbone(cfg, seed=9)
        m2.add_adapters(2, 4.0, seed=9)
        a2 = DepthAggregator(AggregatorConfig(rank=4), 16, 2, 2, seed=9)
        a2.astype(32)
    load_into(arrays, m2, a2)
    for k, v in m.all_params().items():
        assert m2.all_params()[k].data.tobytes() == v.data.tobytes()
    for k, v in a.params.items():
        assert a2.params[k].data.tobytes() == v.data.tobytes()


def test_checkpoint_layout():
    blob = encode_checkpoint({"w": np.arange(6, dtype=np.float32).reshape(2, 3)})
    assert blob[:5] == MAGIC
    assert int.from_bytes(blob[5:9], "little") == 1
    assert int.from_bytes(blob[9:13], "little") == 1 and blob[13:14] == b"w"
    assert int.from_bytes(blob[14:18], "little") == 2
    assert [int.from_bytes(blob[i:i + 4], "little") for i in (18, 22)] == [2, 3]
    np.testing.assert_array_equal(np.frombuffer(blob[26:], "<f4"), np.arange(6))


@settings(max_examples=50, deadline=None)
@given(shapes=st.lists(st.lists(st.integers(0, 4), max_size=3), max_size=4), seed=st.integers(0, 100))
def test_encode_decode_property(shapes, seed):
    r = np.random.default_rng(seed)
    arrays = {f"p{i}.x": r.normal(size=s).astype(np.float32) for i, s in enumerate(shapes)}
    back = decode_checkpoint(encode_checkpoint(arrays))
    assert list(back) == list(arrays)
    for k in arrays:
        assert back[k].shape == arrays[k].shape
        assert back[k].tobytes() == arrays[k].tobytes()


def test_checkpoint_mismatch_names_the_entry(tmp_path):
    cfg, m, a = small_pair()
    arrays = decode_checkpoint(encode_checkpoint({k: v.data for k, v in m.all_params().items()}))
    with nm.precision(32):
        wide = Backbone(BackboneConfig(n_layers=4, n_blocks=2, d_model=24, n_heads=2, max_len=20))
        wide.add_adapters(2, 4.0)
    with pytest.raises(CheckpointError, match="shape mismatch for 'tok_emb'"):
        load_into(arrays, wide)
    bare = Backbone(cfg)
    with pytest.raises(CheckpointError, match="unexpected entry 'layers.0.attn"):
        load_into(arrays, bare)
    with pytest.raises(CheckpointError, match="lacks entry 'aggregator"):
        load_into(arrays, m, a)


def test_corrupt_checkpoints():
    with pytest.raises(CheckpointError, match="magic"):
        decode_checkpoint(b"NOPE1" + b"\0" * 4)
    blob = encode_checkpoint({"w": np.ones(4, np.float32)})
    with pytest.raises(CheckpointError, match="truncated"):
        decode_checkpoint(blob[:-1])
    with pytest.raises(CheckpointError, match="trailing"):
        decode_checkpoint(blob + b"\0")


def test_atomic_write_leaves_no_temporaries(tmp_path):
    atomic_write(tmp_path / "sub" / "a.txt", "one")
    atomic_write(tmp_path / "sub" / "a.txt", b"two")
    assert os.listdir(tmp_path / "sub") == ["a.txt"]
    assert (tmp_path / "sub" / "a.txt").read_text() == "two"


# -- metrics -----------------------------------------------------------------------------------------

def sample_metrics(shift=0.0):
    return Metrics(accuracy={"surface": 0.875 + shift, "composition": 1 / 3 - shift},
                   task_kind={"surface": "surface", "composition": "composition"},
                   loss_curve=[(0, 2.3025850929940455), (10, 0.1 + shift)],
                   params={"adapter": 1024, "aggregator": 4352, "trainable": 5376},
                   eval_digest="abc123")


def test_metrics_round_trip_exact(tmp_path):
    m = sample_metrics()
    recs = metrics_records(m, "run", "D_iada_lora", 7, 600, config_text="[train]\nsteps = 600\n")
    path = tmp_path / "m.jsonl"
    atomic_write(path, dumps_records(recs))
    back = parse_metrics(read_records(path))
    assert back == {("run", "D_iada_lora", 7): m}
    for r in read_records(path):
        assert set(r) == {"run_id", "condition", "seed", "step", "task", "metric", "value"}


def test_resolved_config_is_echoed(tmp_path):
    recs = metrics_records(sample_metrics(), "r", "B_lora_only", 1, 5, config_text="[x]\n")
    assert recs[0]["metric"] == "resolved_config" and recs[0]["value"] == "[x]\n"


def test_nan_averages_written_as_null():
    m = Metrics(accuracy={"surface": 0.5}, task_kind={"surface": "surface"})
    lines = dumps_records(metrics_records(m, "r", "A_pretrained", 1, 0)).splitlines()
    comp = [json.loads(x) for x in lines if '"composition_avg"' in x][0]
    assert comp["value"] is None


# -- reports -------------------------------------------------------------------------------------------

def four_conditions():
    return {"A_pretrained": sample_metrics(0.0), "B_lora_only": sample_metrics(0.1),
            "C_fixed_attnres_lora": sample_metrics(0.05), "D_iada_lora": sample_metrics(-0.05)}


def _rows(text):
    return {line.split()[0]: line.split()[1:] for line in text.splitlines()[2:]}


def test_delta_rows_equal_column_subtraction():
    ms = four_conditions()
    text = condition_table(ms, tax_report(ms))
    header = text.splitlines()[0].split()
    rows = _rows(text)
    for col in header[1:]:
        i = header.index(col) - 1
        d, a, b = (float(rows[c][i]) for c in ("D_iada_lora", "A_pretrained", "B_lora_only"))
        assert float(rows["delta(D-A)"][i]) == pytest.approx(d - a, abs=0.051)
        assert float(rows["delta(D-B)"][i]) == pytest.approx(d - b, abs=0.051)
    assert header == ["condition", "composition", "surface", "composition_avg", "surface_avg", "overall_avg"]


def test_empty_sweep_is_header_only():
    text = sweep_table("rank", [])
    lines = text.splitlines()
    assert len(lines) == 2 and lines[0].split() == ["rank", "aggregator_params", "adapter_params"]


def test_sweep_table_rows():
    cells = [SweepCell(4, 34816, 0), SweepCell(16, 139264, 0)]
    rows = sweep_table("rank", cells).splitlines()[2:]
    assert [r.split()[:2] for r in rows] == [["4", "34816"], ["16", "139264"]]


def test_emit_report_writes_table_and_curves(tmp_path):
    ms = four_conditions()
    text = emit_report(tmp_path, "tax", ms, tax_report(ms), config_text="[train]\nsteps = 1")
    body = (tmp_path / "tax.txt").read_text()
    assert body.startswith("# [train]\n# steps = 1\n") and body.endswith(text)
    curve = (tmp_path / "tax.D_iada_lora.loss.dat").read_text().splitlines()
    pts = [tuple(float(x) for x in line.split()) for line in curve]
    assert pts == [(0.0, 2.3025850929940455), (10.0, 0.05)]


# -- command line -----------------------------------------------------------------------------------

def test_seed_forms():
    assert _seeds(["{1,2,3}"]) == [1, 2, 3]
    assert _seeds(["1,2", "3"]) == [1, 2, 3]
    assert _seeds(["4"]) == [4]


def test_params_paper_scale(capsys):
    assert main(["params", "--config", "iada_r16", "--d", "2048"]) == EXIT_OK
    out = capsys.readouterr().out
    assert "139264" in out and "≈0.14M" in out
    assert "inventory   139264" in out


def test_usage_errors(capsys):
    assert main(["frobnicate"]) == EXIT_USAGE
    assert "usage:" in capsys.readouterr().err
    assert main(["params", "--bogus"]) == EXIT_USAGE
    assert "usage:" in capsys.readouterr().err
    assert main([]) == EXIT_USAGE
    assert main(["gradcheck", "--precision", "32"]) == EXIT_USAGE
    assert main(["params", "--seed", "1", "2"]) == EXIT_OK   # params ignores seeds


def test_config_error_exit_code(tmp_path, capsys):
    bad = tmp_path / "bad.cfg"
    bad.write_text("[train]\nsteps = 3\nlearning_rate = 1\n")
    assert main(["params", "--config", str(bad)]) == EXIT_CONFIG
    assert f"{bad}:3:" in capsys.readouterr().err


def test_sweep_count_only_paper_scale(tmp_path, capsys):
    rc = main(["sweep", "--axis", "rank", "--values", "4,8,16,64,256,full_rank", "--count-only",
               "--d", "2048", "--out", str(tmp_path)])
    assert rc == EXIT_OK
    out = capsys.readouterr().out
    for s in ("4: 0.04M", "8: 0.07M", "16: 0.14M", "64: 0.53M", "256: 2.1M", "full_rank: 8.4M"):
        assert s in out
    assert (tmp_path / "sweep_rank_s1.txt").is_file()


def test_sweep_bad_value_is_config_error(tmp_path):
    assert main(["sweep", "--axis", "pooling", "--values", "median", "--count-only",
                 "--out", str(tmp_path)]) == EXIT_CONFIG


def test_gen_data(tmp_path, tiny_cfg):
    assert main(["gen-data", "--config", tiny_cfg, "--seed", "2", "--n", "7", "--out", str(tmp_path)]) == 0
    from iada.tasks import load_dataset
    for name in ("surface", "composition"):
        exs = load_dataset(tmp_path / f"{name}_s2.tsv")
        assert len(exs) == 7 and {e.kind for e in exs} == {name}


def test_pretrain_finetune_eval_pipeline(tmp_path, tiny_cfg, capsys):
    out = str(tmp_path)
    assert main(["pretrain", "--config", tiny_cfg, "--seed", "3", "--out", out]) == EXIT_OK
    assert (tmp_path / "pretrained_s3.ckpt").is_file()
    assert main(["finetune", "--config", tiny_cfg, "--seed", "3", "--out", out, "--condition", "D"]) == 0
    ck = tmp_path / "finetuned_D_iada_lora_s3.ckpt"
    assert any(k.startswith("aggregator.") for k in load_checkpoint(ck))
    capsys.readouterr()
    assert main(["eval", "--config", tiny_cfg, "--seed", "3", "--out", out, "--checkpoint", str(ck)]) == 0
    table = capsys.readouterr().out
    assert table.splitlines()[2].startswith("D_iada_lora")
    recs = read_records(tmp_path / "eval_s3.jsonl")
    assert recs[0]["metric"] == "resolved_config"
    assert main(["finetune", "--config", tiny_cfg, "--condition", "A", "--out", out]) == EXIT_USAGE
    assert main(["eval", "--config", tiny_cfg, "--out", out]) == EXIT_USAGE


def test_eval_rejects_checkpoint_of_other_shape(tmp_path, tiny_cfg):
    out = str(tmp_path)
    assert main(["pretrain", "--config", tiny_cfg, "--out", out]) == 0
    wide = tmp_path / "wide.cfg"
    wide.write_text(TINY.replace("d_model = 16", "d_model = 24"))
    rc = main(["eval", "--config", str(wide), "--out", out, "--checkpoint", str(tmp_path / "pretrained_s1.ckpt")])
    assert rc == EXIT_CONFIG


def test_tax_two_seeds(tmp_path, tiny_cfg, capsys):
    assert main(["tax", "--config", tiny_cfg, "--seed", "{1,2}", "--out", str(tmp_path)]) == EXIT_OK
    out = capsys.readouterr().out
    lines = out.splitlines()
    assert sum(x.startswith("delta(D-A)") for x in lines) == 2
    assert sum(x.startswith("delta(D-B)") for x in lines) == 2
    assert lines[-1].startswith("mean")
    assert (tmp_path / "tax_summary.txt").is_file()
    for seed in (1, 2):
        recs = read_records(tmp_path / f"tax_s{seed}.jsonl")
        assert {r["condition"] for r in recs} == {"A_pretrained", "B_lora_only",
                                                  "C_fixed_attnres_lora", "D_iada_lora"}
        assert (tmp_path / f"tax_s{seed}.txt").is_file()


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_exit_code(tmp_path, tiny_cfg):
    cfg = tmp_path / "hot.cfg"
    cfg.write_text(TINY.replace("[train]\n", "[train]\npretrain_lr = 1e300\n"))
    assert main(["pretrain", "--config", str(cfg), "--out", str(tmp_path)]) == EXIT_NUMERIC


def test_gradcheck_verb(capsys):
    assert main(["gradcheck", "--seed", "1", "--precision", "64"]) == EXIT_OK
    last = capsys.readouterr().out.strip().splitlines()[-1]
    worst = float(last.split()[3])
    assert worst < 1e-5 and math.isfinite(worst)
