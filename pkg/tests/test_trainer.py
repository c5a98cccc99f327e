import hashlib

import numpy as np
import pytest

from awmf.checkpoint import dumps, load_bundle, loads
from awmf.exceptions import ConfigError, DataError, DivergenceError
from awmf.pyramid import DatasetSplit
from awmf.trainer import (
    LOG_COLUMNS,
    TrainLog,
    build_bundle,
    end_to_end_epoch,
    expert_alphas,
    generate_weight_targets,
    pretrain_experts,
    run_training,
    train_weighting_epoch,
)

from conftest import tiny_config


def digest(params) -> str:
    h = hashlib.sha256()
    for p in params:
        h.update(p.data.tobytes())
    return h.hexdigest()


def groups(bundle):
    return {
        "experts": digest(bundle.expert_parameters()),
        "weighting": digest(bundle.weighting.parameters()),
        "aggregator": digest(bundle.aggregator.parameters()),
    }


def test_stage_isolation(tiny_dataset):
    cfg = tiny_config()
    b = pretrain_experts(build_bundle(cfg), tiny_dataset, cfg)
    alphas = expert_alphas(tiny_dataset.train, cfg.n_classes)
    for epoch in range(1, 4):
        before = groups(b)
        targets = generate_weight_targets(b, tiny_dataset.weighting)
        train_weighting_epoch(b, targets, tiny_dataset.weighting, cfg, epoch)
        mid = groups(b)
        assert mid["weighting"] != before["weighting"]
        assert mid["experts"] == before["experts"] and mid["aggregator"] == before["aggregator"]
        end_to_end_epoch(b, tiny_dataset, cfg, epoch, alphas)
        after = groups(b)
        assert after["weighting"] == mid["weighting"]
        assert after["experts"] != mid["experts"] and after["aggregator"] != mid["aggregator"]


def test_weight_targets_in_unit_interval(tiny_dataset):
    cfg = tiny_config()
    b = build_bundle(cfg)
    pretrain_experts(b, tiny_dataset, cfg)
    t = generate_weight_targets(b, tiny_dataset.weighting).targets
    assert t.shape == (len(tiny_dataset.weighting), 3)
    assert np.all((t >= 0) & (t <= 1))


def test_training_reduces_loss_on_a_small_set(tiny_dataset):
    cfg = tiny_config(lr=5e-3, augment=False, weighting="fixed")
    small = DatasetSplit(tiny_dataset.train[:4], tiny_dataset.weighting[:4])
    b = pretrain_experts(build_bundle(cfg), small, cfg, epochs=0)
    alphas = expert_alphas(small.train, cfg.n_classes)
    first = end_to_end_epoch(b, small, cfg, 1, alphas)["loss_total"]
    for epoch in range(2, 40):
        last = end_to_end_epoch(b, small, cfg, epoch, alphas)["loss_total"]
    assert last < 0.6 * first


def test_run_training_outputs(tiny_dataset, tmp_path):
    cfg = tiny_config(max_epochs=1)
    b, log = run_training(cfg, tiny_dataset, tmp_path)
    assert sorted(p.name for p in tmp_path.iterdir()) == ["best.awmf", "epoch_1.awmf", "train_log.csv"]
    header = (tmp_path / "train_log.csv").read_text().splitlines()[0]
    assert tuple(header.split(",")) == LOG_COLUMNS
    assert len(TrainLog.read_csv(tmp_path / "train_log.csv")) == 1
    assert 0.0 <= log[0]["val_miou"] <= 1.0


def test_deterministic_checkpoints(tiny_dataset, tmp_path):
    cfg = tiny_config(max_epochs=1)
    run_training(cfg, tiny_dataset, tmp_path / "a")
    run_training(cfg, tiny_dataset, tmp_path / "b")
    assert (tmp_path / "a" / "epoch_1.awmf").read_bytes() == (tmp_path / "b" / "epoch_1.awmf").read_bytes()


def test_resume_matches_uninterrupted(tiny_dataset, tmp_path):
    cfg = tiny_config(max_epochs=2, patience=10)
    _, full = run_training(cfg, tiny_dataset, tmp_path / "full")
    resumed_bundle = load_bundle(tmp_path / "full" / "epoch_1.awmf")
    _, resumed = run_training(cfg, tiny_dataset, tmp_path / "resumed", resumed_bundle)
    assert len(resumed) == 1 and resumed[0]["epoch"] == 2
    for key in ("loss_e1", "loss_e2", "loss_e3", "loss_w", "loss_a", "loss_total", "val_loss"):
        assert abs(resumed[0][key] - full[1][key]) <= 1e-9
    assert (tmp_path / "full" / "epoch_2.awmf").read_bytes() == (tmp_path / "resumed" / "epoch_2.awmf").read_bytes()


def test_fixed_weighting_leaves_weighting_net_alone(tiny_dataset):
    cfg = tiny_config(max_epochs=1, weighting="fixed")
    b = build_bundle(cfg)
    before = digest(b.weighting.parameters())
    b, log = run_training(cfg, tiny_dataset, bundle=b)
    assert digest(b.weighting.parameters()) == before
    assert log[0]["w1_mean"] == 1.0 and np.isnan(log[0]["loss_w"])


def test_divergence_reported(tiny_dataset):
    cfg = tiny_config(lr=1e300, max_epochs=1)
    with np.errstate(all="ignore"), pytest.raises(DivergenceError):
        run_training(cfg, tiny_dataset)


def test_config_and_data_validation(tiny_dataset):
    with pytest.raises(ConfigError):
        tiny_config(weighting="learned")
    with pytest.raises(ConfigError):
        tiny_config(lr=0)
    with pytest.raises(DataError):
        run_training(tiny_config(), DatasetSplit([], []))
    b = build_bundle(tiny_config())
    with pytest.raises(ConfigError):
        run_training(tiny_config(n_classes=2), tiny_dataset, bundle=b)


def test_checkpoint_bytes_stable_after_training(tiny_dataset):
    cfg = tiny_config(max_epochs=1)
    b, _ = run_training(cfg, tiny_dataset)
    assert dumps(loads(dumps(b))) == dumps(b)
