import csv
import filecmp
import subprocess
import sys

import numpy as np
import pytest

from awmf.cli import main
from awmf.config import SCHEMA, RunConfig, parse_lines
from awmf.exceptions import ConfigError
from awmf.pnm import load_image
from awmf.trainer import LOG_COLUMNS, TrainLog

TINY_CFG = """\
# tiny run
synth.n_train = 2
synth.n_test = 1
synth.height = 64
synth.width = 64
train.window = 16
train.expert_widths = 4,8
train.weighting_widths = 4,8
train.aggregator_width = 4
train.batch_size = 4
train.lr = 2e-3       # desk-scale rate
train.pretrain_epochs = 1
train.max_epochs = 2
"""


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    (root / "c.cfg").write_text(TINY_CFG + f"data.manifest = {root / 'data' / 'manifest.txt'}\n")
    assert main(["gen-data", "--config", str(root / "c.cfg"), "--out", str(root / "data"), "--seed", "7"]) == 0
    assert main(["train", "--config", str(root / "c.cfg"), "--out", str(root / "run"), "--max-epochs", "1"]) == 0
    return root


def test_gen_data_deterministic_and_manifest(workspace, tmp_path, capsys):
    cfg = str(workspace / "c.cfg")
    assert main(["gen-data", "--config", cfg, "--out", str(tmp_path / "again"), "--seed", "7"]) == 0
    out = capsys.readouterr().out
    cmp = filecmp.dircmp(workspace / "data", tmp_path / "again")
    assert not cmp.diff_files and not cmp.left_only and not cmp.right_only
    for name in cmp.common_files:
        assert (workspace / "data" / name).read_bytes() == (tmp_path / "again" / name).read_bytes()
    assert len((workspace / "data" / "manifest.txt").read_text().splitlines()) == 3
    rows = [line.split() for line in out.splitlines() if line.strip()[:1].isdigit()]
    for _, target, measured in rows:
        assert abs(float(target) - float(measured)) <= 0.05


def test_train_outputs(workspace):
    run = workspace / "run"
    assert sorted(p.name for p in run.iterdir()) == ["best.awmf", "epoch_1.awmf", "train_log.csv"]
    header = (run / "train_log.csv").read_text().splitlines()[0]
    assert tuple(header.split(",")) == LOG_COLUMNS


def test_eval_on_validation_split_matches_log(workspace):
    cfg = str(workspace / "c.cfg")
    assert main(["eval", "--config", cfg, "--checkpoint", str(workspace / "run" / "epoch_1.awmf"),
                 "--split", "val", "--out", str(workspace / "ev")]) == 0
    logged = TrainLog.read_csv(workspace / "run" / "train_log.csv")[0]["val_miou"]
    with open(workspace / "ev" / "metrics_val.csv") as fh:
        rows = list(csv.DictReader(fh))
    got = float(next(r["value"] for r in rows if r["model"] == "adaptive" and r["row"] == "mIoU"))
    assert abs(got - float(logged)) <= 1e-9
    assert {r["model"] for r in rows} == {"expert1", "expert2", "expert3", "fixed", "adaptive"}


def test_agreement_partition(workspace):
    cfg = str(workspace / "c.cfg")
    assert main(["agreement", "--config", cfg, "--checkpoint", str(workspace / "run" / "epoch_1.awmf"),
                 "--before", str(workspace / "run" / "epoch_1.awmf"), "--out", str(workspace / "ag")]) == 0
    with open(workspace / "ag" / "agreement_test.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert {r["stage"] for r in rows} == {"before", "after"}
    subsets = ("none", "E1", "E2", "E1E2", "E3", "E1E3", "E2E3", "E1E2E3")
    for r in rows:
        if r["scope"] == "overall":
            assert abs(sum(float(r[k]) for k in subsets) - 1.0) <= 1e-12


def test_segment_writes_masks(workspace):
    cfg = str(workspace / "c.cfg")
    slide = workspace / "data" / "slides" / "slide_000.pgm"
    assert main(["segment", "--config", cfg, "--checkpoint", str(workspace / "run" / "best.awmf"),
                 "--slide", str(slide), "--out", str(workspace / "seg")]) == 0
    mask = load_image(workspace / "seg" / "slide_000_mask.pgm")
    rgb = load_image(workspace / "seg" / "slide_000_mask.ppm")
    assert mask.shape == (64, 64) and rgb.shape == (64, 64, 3)
    assert mask.max() < 4


def test_cascade_needs_two_class_model(workspace):
    cfg = str(workspace / "c.cfg")
    slide = workspace / "data" / "slides" / "slide_000.pgm"
    ckpt = str(workspace / "run" / "best.awmf")
    args = ["segment", "--config", cfg, "--checkpoint", ckpt, "--slide", str(slide), "--set", "run.mode=cascade"]
    assert main(args) == 2
    assert main(args + ["--two-class-checkpoint", ckpt]) == 2


def test_exit_codes(workspace, tmp_path, capsys):
    cfg = str(workspace / "c.cfg")
    assert main(["train", "--config", cfg, "--manifest", str(tmp_path / "nope.txt")]) == 3
    assert "nope.txt" in capsys.readouterr().err
    (tmp_path / "bad.cfg").write_text("train.colour = 3\n")
    assert main(["train", "--config", str(tmp_path / "bad.cfg")]) == 2
    bad = tmp_path / "bad.awmf"
    bad.write_bytes(b"junk")
    assert main(["eval", "--config", cfg, "--checkpoint", str(bad)]) == 2
    assert main(["eval", "--config", cfg, "--checkpoint", str(workspace / "run" / "best.awmf"),
                 "--set", "train.window=32"]) == 2
    diverge = ["train", "--config", cfg, "--out", str(tmp_path / "d"), "--set", "train.lr=1e300"]
    with np.errstate(all="ignore"):
        assert main(diverge) == 4


def test_config_parsing(tmp_path):
    raw = parse_lines("a_comment = 1 # no\n".replace("a_comment", "train.lr"))
    assert raw == {"train.lr": "1"}
    with pytest.raises(ConfigError, match="unknown key"):
        parse_lines("train.nope = 1")
    with pytest.raises(ConfigError):
        parse_lines("just text")
    (tmp_path / "c.cfg").write_text("train.lr = 0.5\nrun.seed = 3\n")
    cfg = RunConfig.from_sources(tmp_path / "c.cfg", {"run.seed": 9})
    assert cfg["train.lr"] == 0.5 and cfg["run.seed"] == 9
    assert cfg.train_config().seed == 9
    with pytest.raises(ConfigError):
        RunConfig.from_sources(None, {"train.batch_size": "many"})
    with pytest.raises(ConfigError):
        RunConfig.from_sources(None, {"run.palette": "0:1,2"})


def test_help_lists_every_key_with_default():
    out = subprocess.run([sys.executable, "-m", "awmf.cli", "train", "--help"], capture_output=True, text=True,
                         check=True).stdout
    for key in SCHEMA.values():
        line = next(line for line in out.splitlines() if line.strip().startswith(key.name + " "))
        assert key.default in line
