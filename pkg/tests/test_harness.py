import csv
import shutil

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from vaderlab.diffusion import DenoiserModel, lora_attach
from vaderlab.errors import (CheckpointError, ChecksumError, ConfigError, CSVFormatError,
                             TruncatedError, VersionError)
from vaderlab.harness import experiments as ex
from vaderlab.harness.checkpoint import VERSION, decode, encode, load_checkpoint, save_checkpoint
from vaderlab.harness.cli import main
from vaderlab.harness.config import ExperimentConfig, parse_config, replace, serialize
from vaderlab.harness.plot import emit_plot, parse_csv, render_text, series_of
from vaderlab.harness.sink import COLUMNS, MetricsSink, merge_shards, read_rows
from vaderlab.rewards import PromptSet, prompt_split

# ---------------------------------------------------------------------------
# config


def test_experiment_alone_gets_defaults():
    cfg = parse_config("experiment = pretrain\n")
    assert cfg == replace(ExperimentConfig(experiment="pretrain"))


def test_comments_and_overrides():
    cfg = parse_config("# header\nexperiment = align  # trailing\nK = 3\n", ["K=5", "seeds=4, 5"])
    assert cfg.K == 5 and cfg.seeds == (4, 5)


@pytest.mark.parametrize("text, needle", [
    ("experiment = align\nK = -1\n", "line 2: K = -1 violates: K >= 0"),
    ("experiment = align\n\nwidth_of_world = 3\n", "line 3: unknown key 'width_of_world'"),
    ("K = 2\n", "missing required key 'experiment'"),
    ("experiment = align\nlr = fast\n", "line 2: lr: cannot read 'fast' as float"),
    ("experiment = align\nalgo\n", "line 2: expected 'key = value'"),
])
def test_config_errors_name_line_and_key(text, needle):
    with pytest.raises(ConfigError) as e:
        parse_config(text)
    assert needle in str(e.value)


@settings(max_examples=40, deadline=None)
@given(st.sampled_from(["align", "sweep-efficiency", "extend"]), st.integers(0, 20),
       st.floats(1e-6, 1.0, allow_nan=False), st.lists(st.integers(0, 99), min_size=1, max_size=4),
       st.booleans())
def test_config_round_trip(exp, K, lr, seeds, ckpt):
    cfg = replace(ExperimentConfig(experiment=exp), K=K, lr=lr, seeds=tuple(seeds),
                  checkpointing=ckpt, sampler_steps=max(20, K))
    assert parse_config(serialize(cfg)) == cfg


# ---------------------------------------------------------------------------
# checkpoints


def _random_model(seed=0):
    m = lora_attach(DenoiserModel(4, 1, 8, 8, hidden=16, vocab=12, seed=seed), 2)
    for p in m.parameters():
        p.data = np.random.default_rng(seed).standard_normal(p.shape).astype(np.float32)
    return m


def test_checkpoint_round_trip_is_bitwise(tmp_path):
    m = _random_model()
    path = save_checkpoint(m, tmp_path / "m.vdrl")
    twin = load_checkpoint(path, _random_model(seed=1))
    a, b = m.state_dict(), twin.state_dict()
    assert a.keys() == b.keys()
    assert all(a[k].tobytes() == b[k].tobytes() for k in a)


def test_checkpoint_flipped_byte_is_checksum_error():
    buf = bytearray(encode({"w": np.arange(6, dtype=np.float32).reshape(2, 3)}))
    buf[-12] ^= 0x01
    with pytest.raises(ChecksumError):
        decode(bytes(buf))


def test_checkpoint_future_version_is_version_error():
    buf = encode({"w": np.ones(3, dtype=np.float32)}, version=VERSION + 1)
    with pytest.raises(VersionError):
        decode(buf)


@pytest.mark.parametrize("cut", [3, 7, 12, 20, -9, -1])
def test_checkpoint_truncation_is_detected(cut):
    buf = encode({"layer.w": np.ones((2, 2), dtype=np.float32)})
    with pytest.raises(TruncatedError):
        decode(buf[:cut])


def test_checkpoint_missing_and_bad_magic(tmp_path):
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "absent.vdrl")
    with pytest.raises(CheckpointError):
        decode(b"NOPE" + encode({"w": np.ones(1, dtype=np.float32)})[4:])


# ---------------------------------------------------------------------------
# metrics sink and plots


ROW = dict(step=0, reward_queries=0, wallclock_s=0.0, mean_reward=0.5, std_reward=0.1)


def test_sink_writes_header_once(tmp_path):
    path = tmp_path / "m.csv"
    with MetricsSink(path, "align", "vader", 0, 8) as sink:
        sink.write(ROW)
    with MetricsSink(path, "align", "vader", 1, 8) as sink:
        sink.write(dict(ROW, step=1))
    lines = path.read_text().splitlines()
    assert lines[0] == ",".join(COLUMNS)
    assert len(lines) == 3 and sum(ln.startswith("experiment") for ln in lines) == 1
    with pytest.raises(KeyError):
        MetricsSink(tmp_path / "x.csv").write({"step": 1})


def test_sink_rejects_foreign_header(tmp_path):
    path = tmp_path / "m.csv"
    path.write_text("a,b\n1,2\n")
    with pytest.raises(ValueError):
        MetricsSink(path)


def test_sink_is_parseable_after_any_row(tmp_path):
    path = tmp_path / "m.csv"
    sink = MetricsSink(path, "align", "vader", 0, 8)
    for i in range(5):
        sink.write(dict(ROW, step=i, reward_queries=8 * i))
        # a crash here leaves exactly the flushed rows
        copy = tmp_path / f"crash{i}.csv"
        shutil.copy(path, copy)
        rows = parse_csv(copy)
        assert [r["step"] for r in rows] == list(range(i + 1))
    sink.close()


def test_merge_shards(tmp_path):
    shards = []
    for seed in range(3):
        p = tmp_path / f"s{seed}.csv"
        with MetricsSink(p, "align", "vader", seed, 8) as sink:
            sink.write(ROW)
            sink.write(dict(ROW, step=1))
        shards.append(p)
    merged = merge_shards(shards, tmp_path / "all.csv")
    rows = read_rows(merged)
    assert [r["seed"] for r in rows] == ["0", "0", "1", "1", "2", "2"]


def test_plot_of_empty_csv(tmp_path):
    path = tmp_path / "m.csv"
    MetricsSink(path).close()
    out = emit_plot(path)
    assert "(no data)" in out.read_text()
    assert main(["plot", str(path)]) == 0


def test_two_point_segment_is_monotone():
    text = render_text({"vader/s0": [(0.0, 0.0), (10.0, 1.0)]}, "x", "y", width=20, height=10)
    grid = [ln.split("|", 1)[1] for ln in text.splitlines() if "|" in ln]
    cols = [max(r.rfind(c) for c in "*.") for r in grid]
    marked = [c for c in cols if c >= 0]
    assert len(marked) == 10
    assert marked == sorted(marked, reverse=True)  # rows run top to bottom


def test_plot_is_byte_identical(tmp_path):
    path = tmp_path / "m.csv"
    with MetricsSink(path, "sweep", "vader", 0, 8) as sink:
        for i in range(6):
            sink.write(dict(ROW, step=i, reward_queries=8 * i, mean_reward=0.1 * i ** 0.5))
    a = emit_plot(path, tmp_path / "a.txt").read_bytes()
    b = emit_plot(path, tmp_path / "b.txt").read_bytes()
    assert a == b
    emit_plot(path, tmp_path / "c.txt", png=True)
    assert (tmp_path / "c.png").stat().st_size > 0


@pytest.mark.parametrize("body, line", [
    ("align,vader,0,8,0,0,0.0,0.5,0.1\nalign,vader,0,8,1,8,0.1\n", 3),
    ("align,vader,0,8,0,zero,0.0,0.5,0.1\n", 2),
])
def test_malformed_csv_reports_line(tmp_path, body, line):
    path = tmp_path / "bad.csv"
    path.write_text(",".join(COLUMNS) + "\n" + body)
    with pytest.raises(CSVFormatError) as e:
        parse_csv(path)
    assert e.value.line == line
    assert main(["plot", str(path)]) == 2


def test_series_grouping():
    rows = [dict(algo="vader", resolution=8, seed=0, step=0, reward_queries=0, mean_reward=1.0),
            dict(algo="ddpo", resolution=0, seed=1, step=0, reward_queries=0, mean_reward=2.0)]
    assert list(series_of(rows, "reward_queries", "mean_reward")) == ["ddpo/s1", "vader@8/s0"]


# ---------------------------------------------------------------------------
# experiments and CLI


def test_cli_exit_codes(lab_cfg, tmp_path, capsys):
    out = lab_cfg.out
    assert main(["eval", "--set", f"out={out}", "--set", "eval_samples=1"]) == 0
    assert "train:" in capsys.readouterr().out
    assert main(["align", "--set", "K=-1"]) == 1
    assert main(["sweep", "--set", "experiment=align"]) == 1
    assert main(["align", "--set", f"out={tmp_path / 'empty'}"]) == 2
    cfg_file = tmp_path / "g.cfg"
    cfg_file.write_text("experiment = generalize\nlr = 0\nseeds = 0\nquery_budget = 8\n"
                        "eval_samples = 1\ngeneralize_kinds = brightness\n")
    args = ["sweep", "--config", str(cfg_file), "--set", f"out={out}"]
    assert main(args) == 0
    assert main(args + ["--assert"]) == 3


def test_generalization_base_row_matches_evaluate(lab_cfg, lab):
    cfg = replace(lab_cfg, experiment="generalize", seeds=(0,), query_budget=16,
                  eval_samples=2, generalize_kinds=("brightness",))
    report = ex.run_generalization(cfg)
    ps = prompt_split(lab.spec)
    reward = ex.make_reward(cfg, lab.discs, ("brightness",))
    for split, prompts in (("train", ps.train), ("test", ps.test)):
        direct = ex.eval_model(cfg, lab, lab.base, prompts, reward)[0]
        assert report.data["table"]["base"][f"brightness:{split}"] == direct
    rows = read_rows(cfg.out_dir / "generalize" / "metrics.csv")
    assert {r["algo"] for r in rows} == {"vader", "ddpo", "dpo"}
    assert {r["experiment"] for r in rows} == {"generalize/brightness/train",
                                               "generalize/brightness/test"}


def test_generalization_aborts_on_overlap(lab_cfg, lab):
    ps = prompt_split(lab.spec)
    overlapping = PromptSet(ps.train, ps.train[:2], disjoint=False)
    cfg = replace(lab_cfg, experiment="generalize", seeds=(0,), query_budget=8)
    with pytest.raises(ValueError, match="overlap"):
        ex.run_generalization(cfg, overlapping)


def _strip_wallclock(path):
    with open(path, newline="") as fh:
        return [[c for k, c in zip(COLUMNS, row) if k != "wallclock_s"]
                for row in csv.reader(fh)]


def test_csvs_are_seed_deterministic(lab_cfg):
    results = []
    for _ in range(2):
        for algo in ("vader", "ddpo", "dpo"):
            cfg = replace(lab_cfg, algo=algo, seeds=(0, 1), query_budget=32, eval_every=16,
                          eval_samples=1)
            ex.run_align(cfg)
            results.append(_strip_wallclock(cfg.out_dir / "align" / "metrics.csv"))
    assert results[:3] == results[3:]
    assert all(len(r) > 2 for r in results)


def test_budget_parity_and_common_start(lab_cfg, lab):
    sink_rows = {}
    prompts = prompt_split(lab.spec).train
    for algo in ("vader", "ddpo", "dpo"):
        cfg = replace(lab_cfg, eval_samples=1, eval_every=1000)
        with MetricsSink(lab_cfg.out_dir / f"parity_{algo}.csv") as sink:
            tr, rows = ex.run_alignment(cfg, lab, algo, 0, sink, prompts, prompts,
                                        query_budget=40)
        sink_rows[algo] = rows
        assert tr.queries <= 40
    starts = {a: r[0]["mean_reward"] for a, r in sink_rows.items()}
    assert len(set(starts.values())) == 1
    assert {a: r[-1]["reward_queries"] for a, r in sink_rows.items()} == \
        {"vader": 40, "ddpo": 40, "dpo": 40}


def test_gap_slope():
    assert ex.gap_slope([8, 16, 32], [0.0, 1.0, 2.0]) == pytest.approx(1.0)
    assert ex.gap_slope([8, 16, 32], [2.0, 1.0, 0.0]) < 0
