"""Shared fixtures. The expensive one trains the full-scale network three
times and is session-scoped so the training and robustness tests share it."""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import pytest

from dropsort import cnn, data, scenarios, synth


def tiny_gradcheck_net() -> cnn.NetworkConfig:
    """The smallest useful network: identity pooling keeps 8 px viable."""
    return cnn.NetworkConfig(
        input_px=8,
        conv_layers=(cnn.ConvSpec(3, 2), cnn.ConvSpec(3, 2), cnn.ConvSpec(3, 2)),
        pool_window=1, pool_stride=1, dense_units=8, dropout_rate=0.0,
        n_classes=3)


@dataclass
class TrainedRuns:
    net: cnn.NetworkConfig
    accuracies: list[float]  # returned-checkpoint val accuracy per seed
    best_params: cnn.Params
    train_seconds: float
    histories: list[list[dict]] = field(default_factory=list)


@pytest.fixture(scope="session")
def small_budget_runs(tmp_path_factory) -> TrainedRuns:
    """125 images/class at 128 px, 10 epochs, lr 1e-3, three fixed seeds."""
    spec = scenarios.scenario("pa_single")
    rcfg = synth.scaled_config(128)
    root = tmp_path_factory.mktemp("small_budget")
    t0 = time.perf_counter()
    train_manifest = synth.generate_dataset(
        spec.classes, spec.n_train, rcfg, root / "train", seed=0,
        template=spec.template, focus_jitter_um=spec.focus_jitter_um)
    val_manifest = synth.generate_dataset(
        spec.classes, spec.n_val, rcfg, root / "val", seed=1,
        template=spec.template, focus_jitter_um=spec.focus_jitter_um)
    train_set = data.load_dataset(train_manifest, plan=spec.plan)
    val_set = data.load_dataset(val_manifest)

    net = cnn.NetworkConfig(input_px=128)
    accs, histories = [], []
    best_params, best_acc = None, -1.0
    for seed in (0, 1, 2):
        tcfg = cnn.TrainConfig(epochs=10, learning_rate=1e-3,
                               batch_size=spec.batch_size, seed=seed)
        params, history = cnn.train(net, tcfg, train_set, val_set)
        acc = cnn.evaluate(params, net, val_set)["accuracy"]
        accs.append(acc)
        histories.append(history)
        if acc > best_acc:
            best_params, best_acc = params, acc
    return TrainedRuns(net=net, accuracies=accs, best_params=best_params,
                       train_seconds=time.perf_counter() - t0,
                       histories=histories)
