import logging

import numpy as np
import pandas as pd
import pytest

from cxrkit.dataset import LabelScheme, Split, class_rng
from cxrkit.errors import EmptyManifestError
from cxrkit.imbalance import class_weights
from cxrkit.layers import Tensor
from cxrkit.network import build_baseline
from cxrkit.synthetic import make_disc_dataset
from cxrkit.training import (AdamState, EarlyStopping, LabeledImages, TrainConfig, adam_step, kfold_train,
                             train)


def _net(seed=0, size=8):
    return build_baseline(2, input_dims=(3, size, size), seed=seed, widths=(2, 3), head_units=4)


def _toy_data(n=12, size=8, seed=0):
    rng = class_rng(seed)
    labels = np.arange(n) % 2
    images = np.where(labels[:, None, None] == 1, 200.0, 50.0) + rng.normal(0, 10, size=(n, size, size))
    return LabeledImages(np.clip(images, 0, 255), labels)


def test_train_config_defaults():
    config = TrainConfig()
    assert config.batch_size == 10
    assert config.learning_rate == 1e-3
    assert config.patience == 5
    assert config.folds == 4
    with pytest.raises(ValueError):
        TrainConfig(batch_size=0)
    with pytest.raises(ValueError):
        TrainConfig(unknown=1)


def test_adam_first_step_moves_by_learning_rate():
    params = {"a": Tensor(np.array([1.0, -2.0]), grad=np.array([0.3, -4.0])),
              "frozen": Tensor(np.array([5.0]))}
    state = adam_step(params, AdamState(), TrainConfig(learning_rate=0.01))
    np.testing.assert_allclose(params["a"].data, [1.0 - 0.01, -2.0 + 0.01], rtol=1e-6)
    assert params["frozen"].data.tolist() == [5.0]
    assert state.t == 1
    assert "frozen" not in state.m


def test_adam_skips_when_nothing_is_trainable():
    params = {"frozen": Tensor(np.array([5.0]))}
    state = adam_step(params, AdamState(), TrainConfig())
    assert state.t == 0


def test_early_stopping_patience_and_restore():
    net = _net()
    stopper = EarlyStopping(patience=5)
    losses = [1.0, 0.9, 0.95, 0.91, 0.92, 0.93, 0.94]
    stops = []
    for epoch, loss in enumerate(losses, start=1):
        if epoch == 2:
            best_state = net.state_dict()
        stops.append(stopper(epoch, loss, net))
        net.parameters()["head.dense2.bias"].data = net.parameters()["head.dense2.bias"].data + 1.0
    assert stops == [False] * 6 + [True]
    assert stopper.best_epoch == 2
    stopper.restore(net)
    np.testing.assert_array_equal(net.state_dict()["head.dense2.bias"], best_state["head.dense2.bias"])


def test_early_stopping_min_delta():
    stopper = EarlyStopping(patience=2, min_delta=0.1)
    net = _net()
    assert stopper(1, 1.0, net) is False
    assert stopper(2, 0.95, net) is False
    assert stopper(3, 0.93, net) is True
    assert stopper.best_epoch == 1


def test_early_stopping_patience_one_stops_after_first_regression():
    stopper = EarlyStopping(patience=1)
    net = _net()
    assert stopper(1, 0.5, net) is False
    assert stopper(2, 0.6, net) is True
    assert stopper.stopped_epoch == 2
    assert stopper.best_epoch == 1


def test_train_is_deterministic_and_traces_every_epoch():
    data = _toy_data()
    config = TrainConfig(batch_size=4, max_epochs=3, seed=5, learning_rate=1e-2)
    weights = class_weights([6, 6])
    first = train(_net(), data, data, weights, config)
    second = train(_net(), data, data, weights, config)

    for name, value in first.network.state_dict().items():
        np.testing.assert_array_equal(value, second.network.state_dict()[name])
    frame = first.trace.to_frame()
    assert len(frame) == 2 * first.epochs_run
    assert set(frame["split"]) == {"train", "val"}
    assert 1 <= first.best_epoch <= first.epochs_run
    assert first.best_val_loss == pytest.approx(min(first.trace.losses("val")))
    assert first.resources["samples"] == first.epochs_run


def test_train_logs_resources_every_epoch(caplog):
    data = _toy_data()
    config = TrainConfig(batch_size=6, max_epochs=2, patience=5)
    with caplog.at_level(logging.DEBUG, logger="cxrkit.resources"):
        trained = train(_net(), data, data, None, config)
    lines = [r.getMessage() for r in caplog.records if r.name == "cxrkit.resources"]
    assert len(lines) == trained.epochs_run == 2
    assert lines[0].startswith("Resources [epoch 1]: rss=")


def test_train_freezes_configured_layers():
    net = _net()
    before = net.state_dict()
    config = TrainConfig(batch_size=6, max_epochs=1, frozen_layers=("block*",))
    trained = train(net, _toy_data(), _toy_data(seed=1), None, config)
    after = trained.network.state_dict()
    np.testing.assert_array_equal(before["block1.conv1.weight"], after["block1.conv1.weight"])
    assert not np.array_equal(before["head.dense2.weight"], after["head.dense2.weight"])


def test_train_rejects_empty_data():
    empty = LabeledImages(np.zeros((0, 8, 8)), np.zeros(0))
    with pytest.raises(EmptyManifestError):
        train(_net(), empty, _toy_data(), None, TrainConfig())


def test_kfold_train_table():
    data = _toy_data(n=8)
    result = kfold_train(_net().spec, data, TrainConfig(folds=2, max_epochs=1, batch_size=4))
    assert list(result.table["fold"]) == ["1", "2", "mean"]
    assert len(result.models) == 2
    assert result.table["accuracy"].iloc[-1] == pytest.approx(result.table["accuracy"].iloc[:2].mean())


def test_labeled_images_from_manifest_resizes(tmp_path):
    counts = {Split.Train: (3, 2), Split.Val: (1, 1)}
    dataset = make_disc_dataset(tmp_path, size=16, seed=0, counts=counts)
    data = LabeledImages.from_manifest(dataset.manifest, Split.Train, LabelScheme.Binary, tmp_path, (8, 8),
                                       workers=2)
    assert data.images.shape == (5, 8, 8)
    assert sorted(data.labels.tolist()) == [0, 0, 0, 1, 1]
    assert data.paths[0].startswith("train/")
    with pytest.raises(EmptyManifestError):
        LabeledImages.from_manifest(dataset.manifest, Split.Test, LabelScheme.Binary, tmp_path, (8, 8))


def test_metric_trace_csv(tmp_path):
    data = _toy_data()
    trained = train(_net(), data, data, None, TrainConfig(max_epochs=1))
    path = trained.trace.to_csv(tmp_path / "trace.csv")
    frame = pd.read_csv(path)
    assert list(frame.columns) == ["epoch", "split", "loss", "accuracy", "precision", "recall",
                                   "specificity", "f1", "auc"]
