"""
test_federation_model.py
"""

import sys
import math
import random

import numpy as np
import pytest

sys.path.insert(0, "../..")
from fediot.models import federation_model, nn_model, wire_model
from fediot.models.anomaly_model import compute_threshold
from fediot.models.data_model import DeviceDataset, build_global_testset
from fediot.models.federation_model import (
    FederationConfig, RoundUpdate, ServerManager, ClientManager, aggregate, local_train,
    run_feddetect
)
from fediot.models.nn_model import LrSchedule, ModelParams
from fediot.models.transport_model import LoopbackTransport
from fediot.models.wire_model import MsgType
from fediot.models.exception import ConfigError, DataError, DivergenceError, TransportError
from tests.conftest import federation_config

def scalar_update(client_id, value, round_t=0):
    params = ModelParams(layers=[(np.array([[value]]), np.array([value]))],
                         config_fingerprint=b"\x00" * 8)
    return RoundUpdate(client_id=client_id, round=round_t, params=params, local_loss=0.0,
                       train_seconds=0.0, bytes_uploaded=0)

def model_update(client_id, params, round_t=0):
    return RoundUpdate(client_id=client_id, round=round_t, params=params, local_loss=0.0,
                       train_seconds=0.0, bytes_uploaded=0)

class QuittingClient(ClientManager):
    """Trains in round 0, then never answers again"""

    def _on_model(self, envelope):
        if envelope.round >= 1:
            return
        ClientManager._on_model(self, envelope)

def test_federation_config_validation():
    assert federation_config(3).schedule.total_rounds == 2
    assert FederationConfig(total_rounds=4).schedule.total_rounds == 4
    for kwargs in ({"n_clients": 0}, {"local_epochs": -1}, {"batch_size": 0},
                   {"local_optimizer": "rmsprop"}):
        with pytest.raises(ConfigError):
            FederationConfig(total_rounds=2, **kwargs)
    with pytest.raises(ConfigError, match="schedule"):
        FederationConfig(total_rounds=3, schedule=LrSchedule(total_rounds=5))

def test_client_seed():
    assert federation_model.client_seed(0, 1, 2) == federation_model.client_seed(0, 1, 2)
    seeds = {federation_model.client_seed(0, t, i) for t in range(5) for i in range(9)}
    assert len(seeds) == 45

def test_local_train_without_epochs(three_devices, small_config):
    model = nn_model.init_autoencoder(small_config)
    device = three_devices[0]
    update = local_train(model, device, 1e-3, 0, 64, seed=1)
    assert update.params.bit_equal(model)
    assert update.local_loss == pytest.approx(
        np.mean(nn_model.reconstruction_errors(model, device.train))
    )
    assert update.bytes_uploaded == wire_model.encoded_model_size(small_config.layer_dims)

def test_local_train_with_zero_lr(three_devices, small_config):
    model = nn_model.init_autoencoder(small_config)
    update = local_train(model, three_devices[0], 0.0, 2, 64, seed=1)
    assert update.params.bit_equal(model)

def test_local_train_full_batch_replay(three_devices, small_config):
    model = nn_model.init_autoencoder(small_config)
    device = three_devices[1]
    n_rows = device.train.shape[0]
    update = local_train(model, device, 0.05, 3, n_rows + 10, seed=42, local_optimizer="sgd")

    expected = model.copy()
    rng = np.random.default_rng(42)
    for _ in range(3):
        batch = device.train[rng.permutation(n_rows)]
        loss, grads = nn_model.loss_and_gradients(expected, batch)
        expected = nn_model.sgd_step(expected, grads, 0.05)
    assert update.params.bit_equal(expected)
    assert update.local_loss == loss

def test_local_train_keeps_the_short_batch(three_devices, small_config):
    model = nn_model.init_autoencoder(small_config)
    device = three_devices[0]
    # 300 rows in batches of 128: 128, 128, 44
    trained = local_train(model, device, 1e-2, 1, 128, seed=3, local_optimizer="sgd")

    expected = model.copy()
    order = np.random.default_rng(3).permutation(device.train.shape[0])
    for start in (0, 128, 256):
        grads = nn_model.backward(expected, device.train[order[start:start + 128]])
        expected = nn_model.sgd_step(expected, grads, 1e-2)
    assert trained.params.bit_equal(expected)

@pytest.mark.parametrize("optimizer", federation_model.LOCAL_OPTIMIZERS)
def test_local_optimizers_reduce_loss(three_devices, small_config, optimizer):
    model = nn_model.init_autoencoder(small_config)
    device = three_devices[2]
    before = np.mean(nn_model.reconstruction_errors(model, device.train))
    lr = {"adam": 1e-2, "sgd": 0.1, "momentum": 0.05}[optimizer]
    update = local_train(model, device, lr, 5, 32, seed=0, local_optimizer=optimizer)
    assert np.mean(nn_model.reconstruction_errors(update.params, device.train)) < before

def test_local_train_rejects_bad_input(three_devices, small_config):
    model = nn_model.init_autoencoder(small_config)
    device = three_devices[0]
    empty = DeviceDataset(
        device_id="empty", train=np.zeros((0, 12)), eval=device.eval,
        test_features=device.test_features, test_labels=device.test_labels
    )
    with pytest.raises(DataError, match="empty"):
        local_train(model, empty, 1e-3, 1, 64, seed=0)
    with pytest.raises(ValueError):
        local_train(model, device, 1e-3, 1, 0, seed=0)
    with pytest.raises(ConfigError):
        local_train(model, device, 1e-3, 1, 64, seed=0, local_optimizer="lbfgs")

def test_local_train_divergence_names_client(three_devices, small_config):
    model = nn_model.init_autoencoder(small_config)
    device = three_devices[0]
    broken = DeviceDataset(
        device_id="broken", train=np.full((10, 12), np.inf), eval=device.eval,
        test_features=device.test_features, test_labels=device.test_labels
    )
    with pytest.raises(DivergenceError) as excinfo:
        local_train(model, broken, 1e-3, 1, 4, seed=0, client_id="client-4", round_t=3)
    assert "client-4" in excinfo.value.message
    assert "round 3" in excinfo.value.message
    assert excinfo.value.exit_code == 5

def test_aggregate_scalars():
    assert aggregate([scalar_update("client-0", 2.0), scalar_update("client-1", 4.0)]) \
        .layers[0][0][0, 0] == 3.0
    four = aggregate([scalar_update("client-{}".format(i), v) for i, v in enumerate([1.0, 2.0, 4.0, 5.0])])
    assert four.layers[0][0][0, 0] == 3.0
    assert four.layers[0][1][0] == 3.0

def test_aggregate_matches_mean_for_nine_clients(small_config):
    rng = np.random.default_rng(9)
    updates = []
    for i in range(9):
        params = nn_model.init_autoencoder(small_config).copy()
        for w, b in params.layers:
            w += rng.normal(0, 0.1, size=w.shape)
            b += rng.normal(0, 0.1, size=b.shape)
        updates.append(model_update("client-{}".format(i), params))

    averaged = aggregate(updates).flatten()
    stacked = np.stack([u.params.flatten() for u in updates])
    exact = np.array([math.fsum(column) for column in stacked.T]) / 9
    assert np.allclose(averaged, stacked.mean(axis=0), rtol=1e-13, atol=1e-15)
    assert np.allclose(averaged, exact, rtol=1e-13, atol=1e-15)

@pytest.mark.parametrize("k", [1, 2, 4, 8])
def test_aggregate_of_copies_is_exact(small_config, k):
    model = nn_model.init_autoencoder(small_config)
    updates = [model_update("client-{}".format(i), model.copy()) for i in range(k)]
    assert aggregate(updates).bit_equal(model)

def test_aggregate_ignores_arrival_order(small_config):
    rng = np.random.default_rng(2)
    updates = []
    for i in range(12):
        params = nn_model.init_autoencoder(small_config).copy()
        params.layers[0][0][...] = rng.standard_normal(params.layers[0][0].shape)
        updates.append(model_update("client-{}".format(i), params))
    reference = aggregate(updates)
    shuffled = list(updates)
    for seed in range(5):
        random.Random(seed).shuffle(shuffled)
        assert aggregate(shuffled).bit_equal(reference)

def test_aggregate_errors(small_config, toy_config):
    with pytest.raises(ValueError):
        aggregate([])
    with pytest.raises(ValueError, match="different rounds"):
        aggregate([scalar_update("client-0", 1.0, 0), scalar_update("client-1", 1.0, 1)])
    with pytest.raises(ValueError):
        aggregate([
            model_update("client-0", nn_model.init_autoencoder(small_config)),
            model_update("client-1", nn_model.init_autoencoder(toy_config)),
        ])
    sigmoid = nn_model.AutoencoderConfig(input_dim=2, encoder_rates=(0.5,), activation="sigmoid")
    with pytest.raises(ValueError, match="architecture"):
        aggregate([
            model_update("client-0", nn_model.init_autoencoder(toy_config)),
            model_update("client-1", nn_model.init_autoencoder(sigmoid)),
        ])

def test_global_threshold_uses_every_score():
    per_client = {
        "client-10": np.array([0.3, 0.1]), "client-2": np.array([0.2]),
        "client-1": np.array([0.05, 0.4, 0.25]),
    }
    report = federation_model.global_threshold(per_client, 2.0)
    expected = compute_threshold([0.05, 0.4, 0.25, 0.2, 0.3, 0.1], 2.0)
    assert report.tr_global.tr == pytest.approx(expected.tr, rel=1e-15)
    assert report.tr_global.n_samples == 6

    reordered = dict(reversed(list(per_client.items())))
    assert federation_model.global_threshold(reordered, 2.0).tr_global == report.tr_global

def test_global_threshold_errors():
    with pytest.raises(DataError, match="client-1"):
        federation_model.global_threshold(
            {"client-0": [0.1, 0.2]}, 3.0, expected_clients=["client-0", "client-1"]
        )
    with pytest.raises(DataError, match="empty"):
        federation_model.global_threshold({"client-0": [0.1, 0.2], "client-1": []}, 3.0)
    with pytest.raises(DataError):
        federation_model.global_threshold({}, 3.0)

def test_single_round_without_training(three_devices, small_config):
    devices = three_devices[:2]
    config = federation_config(2, total_rounds=1, local_epochs=0)
    result = run_feddetect(config, devices, LoopbackTransport(), 0, model_config=small_config)
    assert result.model.bit_equal(nn_model.init_autoencoder(small_config))
    assert len(result.stats.rounds) == 1
    assert sorted(result.threshold.per_client_mse) == ["client-0", "client-1"]
    assert result.metrics is not None
    assert result.stats.confusion.total == build_global_testset(devices)[1].size

def test_one_client_matches_centralized_training(three_devices, small_config):
    device = three_devices[0]
    config = federation_config(1, total_rounds=3, local_epochs=2)
    result = run_feddetect(config, [device], LoopbackTransport(), 5, model_config=small_config)
    model, losses, _ = federation_model.train_centralized(device, config, small_config, 5)
    assert result.model.bit_equal(model)
    assert result.stats.loss_curve() == losses

    threshold = compute_threshold(nn_model.reconstruction_errors(model, device.eval), config.alpha)
    assert result.threshold.tr_global.tr == threshold.tr

def test_federated_runs_are_deterministic(three_devices, small_config):
    config = federation_config(3, total_rounds=2, local_epochs=1)
    first = run_feddetect(config, three_devices, LoopbackTransport(), 1, model_config=small_config)
    second = run_feddetect(config, three_devices, LoopbackTransport(), 1, model_config=small_config)
    assert first.model.bit_equal(second.model)
    assert first.threshold.tr_global == second.threshold.tr_global
    assert first.metrics == second.metrics
    assert [r.lr for r in first.stats.rounds] == [1e-3, 0.0]
    assert all(r.eval_mse is not None for r in first.stats.rounds)

def test_byte_accounting(three_devices, small_config):
    config = federation_config(3, total_rounds=2, local_epochs=1)
    bus = LoopbackTransport()
    result = run_feddetect(config, three_devices, bus, 0, model_config=small_config)
    comm = result.stats.comm

    assert bus.delivered_counts[MsgType.MODEL_UPDATE] == 3 * 2
    assert bus.delivered_counts[MsgType.GLOBAL_MODEL] == 3 * (2 + 1)
    assert comm.bytes_up == bus.delivered_bytes[MsgType.MODEL_UPDATE]
    assert comm.bytes_down == bus.delivered_bytes[MsgType.GLOBAL_MODEL]
    model_bytes = wire_model.encoded_model_size(small_config.layer_dims)
    assert comm.bytes_up > 3 * 2 * model_bytes
    for client_id, stats in result.stats.client_stats.items():
        assert len(stats.per_round) == 2
        assert stats.compute_seconds > 0

def test_missing_client_stalls_registration(three_devices, small_config):
    bus = LoopbackTransport()
    devices = three_devices[:2]
    server = ServerManager(
        bus.endpoint("server", priority=0), federation_config(2), small_config,
        device_ids=[d.device_id for d in devices], expected_clients=["client-0", "client-1"],
    )
    client = ClientManager(bus.endpoint("client-0"), "client-0", {d.device_id: d for d in devices}.get)
    with pytest.raises(TransportError) as excinfo:
        bus.run([server, client])
    assert "registering" in excinfo.value.message
    assert "client-1" in excinfo.value.message

def test_client_dropping_out_mid_run(three_devices, small_config):
    bus = LoopbackTransport()
    devices = three_devices[:2]
    by_id = {d.device_id: d for d in devices}
    server = ServerManager(
        bus.endpoint("server", priority=0), federation_config(2, total_rounds=3), small_config,
        device_ids=[d.device_id for d in devices], expected_clients=["client-0", "client-1"],
    )
    clients = [
        ClientManager(bus.endpoint("client-0"), "client-0", by_id.get),
        QuittingClient(bus.endpoint("client-1"), "client-1", by_id.get),
    ]
    with pytest.raises(TransportError) as excinfo:
        bus.run([server] + clients)
    assert "round 1" in excinfo.value.message
    assert "waiting on: client-1" in excinfo.value.message

def test_unexpected_client_is_ignored(three_devices, small_config):
    bus = LoopbackTransport()
    device = three_devices[0]
    server = ServerManager(
        bus.endpoint("server", priority=0), federation_config(1), small_config,
        device_ids=[device.device_id], expected_clients=["client-0"],
    )
    intruder = ClientManager(bus.endpoint("client-7"), "client-7", {device.device_id: device}.get)
    with pytest.raises(TransportError):
        bus.run([server, intruder])
    assert server.registered == []

def test_run_feddetect_checks_device_count(three_devices, small_config):
    with pytest.raises(ConfigError):
        run_feddetect(federation_config(2), three_devices, LoopbackTransport(), 0)

def test_cl_single_is_deterministic(three_devices, small_config):
    config = federation_config(1, total_rounds=2, local_epochs=2)
    first = federation_model.run_cl_single(three_devices[0], config, small_config, 3)
    second = federation_model.run_cl_single(three_devices[0], config, small_config, 3)
    assert first.model.bit_equal(second.model)
    assert first.threshold == second.threshold
    assert len(first.loss_curve) == 2
    assert first.confusion.total == three_devices[0].test_labels.size

def test_cl_combined_with_one_device_is_cl_single(three_devices, small_config):
    config = federation_config(1, total_rounds=2, local_epochs=1)
    single = federation_model.run_cl_single(three_devices[1], config, small_config, 3)
    combined = federation_model.run_cl_combined([three_devices[1]], config, small_config, 3)
    assert combined.device_id == "combined"
    assert combined.model.bit_equal(single.model)
    assert combined.metrics == single.metrics

def test_cl_single_all_averages(three_devices, small_config):
    config = federation_config(3, total_rounds=1, local_epochs=1)
    results, averaged = federation_model.run_cl_single_all(three_devices, config, small_config, 0)
    assert [r.device_id for r in results] == [d.device_id for d in three_devices]
    assert averaged.acc == pytest.approx(np.mean([r.metrics.acc for r in results]))
    total = build_global_testset(three_devices)[1].size
    assert all(r.confusion.total == total for r in results)
