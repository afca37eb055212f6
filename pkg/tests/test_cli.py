import filecmp
import os
from pathlib import Path

import pytest

from otpel import cli
from otpel import config as config_mod
from otpel.errors import ConfigError
from otpel.evaluate import read_results_csv
from otpel.experiment import GRID, Cell

SMALL_INI = """
[run]
out_dir = out
seed = 5

[backbone]
latent_dim = 12
ffn_dim = 24
n_encoder_blocks = 1
n_decoder_blocks = 3

[source]
n_utterances = 40

[target]
n_utterances = 12

[pretrain]
steps = 30
warmup_steps = 10

[bank]
max_frames = 64

[pel]
hidden = 4
bottleneck = 4

[metric]
n_projections = 10

[train]
total_steps = 16
ot_start_step = 4
warm_ramp_steps = 4
batch_size = 3
warmup_steps = 4
ot_frames = 24
eval_frames = 48
"""


@pytest.fixture
def small_config(tmp_path):
    path = tmp_path / "cfg.ini"
    path.write_text(SMALL_INI)
    return path


def run(*argv):
    return cli.main([str(a) for a in argv])


def test_default_config_round_trips():
    rc = config_mod.RunConfig().seeded()
    again = config_mod.parse(rc.to_ini())
    assert again.to_dict() == rc.to_dict()


def test_parse_reads_sections(small_config):
    rc = config_mod.load(small_config)
    assert rc.backbone.latent_dim == 12 and rc.train.total_steps == 16
    assert rc.out_dir == small_config.parent / "out"
    assert rc.train.seed == 5 and rc.backbone.init_seed == 5


def test_unknown_key_and_section(tmp_path):
    with pytest.raises(ConfigError):
        config_mod.parse("[train]\nlearning_rate = 1\n")
    with pytest.raises(ConfigError):
        config_mod.parse("[optimizer]\nlr = 1\n")
    with pytest.raises(ConfigError):
        config_mod.parse("[train]\ntotal_steps = many\n")


def test_optional_fields(tmp_path):
    rc = config_mod.parse("[metric]\nkind = MMD\nbandwidth = 2.5\n[train]\not_taps = 1,2\nuse_ot = no\n")
    assert rc.metric.bandwidth == 2.5 and rc.train.ot_taps == (1, 2) and rc.train.use_ot is False


def test_seed_environment_override(small_config, monkeypatch):
    monkeypatch.setenv(config_mod.SEED_ENV, "17")
    rc = config_mod.load(small_config)
    assert rc.seed == 17 and rc.pel.init_seed == 17


def test_grid_has_eleven_cells():
    assert len(GRID) == 11
    assert {c.label for c in GRID} >= {"FT", "Decoder FT", "IR", "IR w/ SWD", "LA w/ MMD", "IR+LR w/ MMD"}
    with pytest.raises(ConfigError):
        Cell("full-FT", "SWD")


def test_unknown_method_is_usage_error(small_config, capsys):
    with pytest.raises(SystemExit) as err:
        run("adapt", small_config, "--method", "prompt")
    assert err.value.code == 2
    assert "IR+LR" in capsys.readouterr().err


def test_missing_artifact_names_producer(small_config, capsys):
    assert run("bank", small_config) == 15
    assert "otpel pretrain" in capsys.readouterr().err


def test_missing_config_file(tmp_path):
    assert run("pretrain", tmp_path / "nope.ini") == ConfigError.exit_code


def test_init_writes_parsable_config(tmp_path):
    path = tmp_path / "c.ini"
    assert run("init", path) == 0
    assert config_mod.load(path).train.total_steps == 2000
    assert run("init", path) == 1


def _pipeline(cfg, plot):
    extra = [] if plot else ["--no-plot"]
    assert run("pretrain", cfg) == 0
    assert run("bank", cfg) == 0
    assert run("adapt", cfg, "--method", "IR", "--metric", "SWD", *extra) == 0
    assert run("adapt", cfg, "--method", "IR", "--no-ot", *extra) == 0
    runs = cfg.parent / "out" / "runs"
    assert run("eval", cfg, runs / "IR_SWD", runs / "IR") == 0
    assert run("distances", runs / "IR_SWD", *extra) == 0
    assert run("report", runs / "IR_SWD", runs / "IR", runs / "LA", "--out", cfg.parent / "out", *extra) == 0
    return cfg.parent / "out"


def _files(root: Path):
    return sorted(p.relative_to(root) for p in root.rglob("*") if p.is_file())


def test_pipeline_outputs_and_bitwise_rerun(small_config, tmp_path, capsys):
    out = _pipeline(small_config, plot=True)
    first = tmp_path / "first"
    os.rename(out, first)
    _pipeline(small_config, plot=True)
    assert _files(first) == _files(out)
    for rel in _files(out):
        assert filecmp.cmp(first / rel, out / rel, shallow=False), rel

    row = read_results_csv(out / "runs" / "IR_SWD" / "results.csv")[0]
    assert row["method"] == "IR w/ SWD" and row["metric"] == "SWD"
    assert read_results_csv(out / "runs" / "IR" / "results.csv")[0]["method"] == "IR"
    for name in ("pel.bin", "metrics.csv", "run.json", "distances.csv", "distances.png", "losses.png"):
        assert (out / "runs" / "IR_SWD" / name).is_file()
    for name in ("backbone.bin", "bank.bin", "source.bin", "target.bin", "report.csv", "report.txt", "mcd.png"):
        assert (out / name).is_file()
    report = (out / "report.txt").read_text()
    assert "absent" in report and "IR w/ SWD" in report


def test_report_ratio_matches_parameter_count(small_config):
    import json

    out = _pipeline(small_config, plot=False)
    summary = json.loads((out / "runs" / "IR" / "run.json").read_text())
    row = read_results_csv(out / "runs" / "IR" / "results.csv")[0]
    assert row["ratio"] == summary["params_trainable"] / summary["params_total"]


def test_report_with_nothing_fails(tmp_path, capsys):
    assert run("report", tmp_path / "none") == 1


def test_grid_jobs_do_not_change_outputs(small_config, tmp_path, capsys):
    assert run("pretrain", small_config) == 0
    assert run("bank", small_config) == 0
    runs = small_config.parent / "out" / "runs"
    assert run("adapt", small_config, "--grid", "--no-plot") == 0
    serial = tmp_path / "serial"
    os.rename(runs, serial)
    assert run("adapt", small_config, "--grid", "--no-plot", "--jobs", "2") == 0
    assert _files(serial) == _files(runs) and len(_files(runs)) == 11 * 6
    for rel in _files(runs):
        assert filecmp.cmp(serial / rel, runs / rel, shallow=False), rel
