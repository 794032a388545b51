"""
federation_model.py

Federated training of the anomaly detector, and the centralized baselines it
is compared against.

A federated run is a conversation between one :py:class:`ServerManager` and
``K`` :py:class:`ClientManager` objects over a transport:

1. Clients send ``REGISTER``. Once all ``K`` have registered, the server
   answers each with ``REGISTER_ACK`` and a ``DATASET_ASSIGN`` naming the
   device whose data the client trains on.
2. Each round ``t`` the server sends ``GLOBAL_MODEL`` (model plus the round's
   learning rate). Every client trains locally from a fresh optimizer state
   and answers with ``MODEL_UPDATE``. When all ``K`` updates are in, the
   server averages them uniformly and starts the next round.
3. After the last round the server sends the final model. Each client scores
   its benign eval split and answers with ``MSE_SEQUENCE``. The server turns
   the concatenated scores into one global threshold, evaluates the global
   test set, and sends ``GLOBAL_THRESHOLD`` followed by ``DONE``.

"""

import logging
import math
import re
import threading
import time
from dataclasses import dataclass, field

import numpy as np

from .anomaly_model import compute_threshold, evaluate_scores, average_metrics
from .data_model import DeviceDataset, build_global_testset
from .exception import ConfigError, DataError, DivergenceError, TransportError
from .nn_model import (
    AutoencoderConfig, AdamState, LrSchedule, init_autoencoder, loss_and_gradients,
    reconstruction_errors, adam_step, sgd_step, momentum_step, cosine_lr
)
from .transport_model import (
    CommStats, RoundMarks, measure_round, server_topic, client_topic, server_filter,
    client_filter
)
from .wire_model import (
    Envelope, MsgType, encode_model, encode_global_model, decode_global_model,
    encode_model_update, decode_model_update, encode_json, decode_json,
    encode_mse_sequence, decode_mse_sequence, encode_threshold, decode_threshold, frame_size
)

logger = logging.getLogger(__name__)

LOCAL_OPTIMIZERS = ("adam", "sgd", "momentum")
REGISTER_RETRY_SECONDS = 1.0

@dataclass(frozen=True)
class FederationConfig:
    n_clients: int = 9
    total_rounds: int = 30
    local_epochs: int = 120
    batch_size: int = 64
    schedule: LrSchedule = None
    alpha: float = 3.0
    local_optimizer: str = "adam"

    def __post_init__(self):
        if self.schedule is None:
            object.__setattr__(self, "schedule", LrSchedule(total_rounds=self.total_rounds))
        if self.n_clients < 1:
            raise ConfigError("n_clients must be at least 1")
        if self.total_rounds < 1:
            raise ConfigError("total_rounds must be at least 1")
        if self.local_epochs < 0:
            raise ConfigError("local_epochs cannot be negative")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be at least 1")
        if self.schedule.total_rounds != self.total_rounds:
            raise ConfigError("The learning rate schedule spans {} rounds, expected {}".format(
                self.schedule.total_rounds, self.total_rounds
            ))
        if self.local_optimizer not in LOCAL_OPTIMIZERS:
            raise ConfigError("local_optimizer must be one of {} (got {!r})".format(
                ", ".join(LOCAL_OPTIMIZERS), self.local_optimizer
            ))

@dataclass
class RoundUpdate:
    client_id: str
    round: int
    params: object
    local_loss: float
    train_seconds: float
    bytes_uploaded: int

@dataclass
class GlobalThresholdReport:
    per_client_mse: dict
    tr_global: object

@dataclass
class RoundRecord:
    """What the server saw in one round"""
    round: int
    lr: float
    wall_seconds: float
    aggregation_seconds: float
    mean_local_loss: float
    eval_mse: float = None

@dataclass
class RunStats:
    rounds: list = field(default_factory=list)
    client_stats: dict = field(default_factory=dict)
    comm: CommStats = field(default_factory=CommStats)
    wall_seconds: float = 0.0
    confusion: object = None

    def loss_curve(self):
        return [r.mean_local_loss for r in self.rounds]

@dataclass
class FedDetectResult:
    model: object
    threshold: GlobalThresholdReport
    metrics: object
    stats: RunStats

@dataclass
class CentralizedResult:
    device_id: str
    model: object
    threshold: object
    metrics: object
    confusion: object
    loss_curve: list
    train_seconds: float

def client_seed(seed, round_t, client_index):
    """
    :return: ``int``

    The shuffling seed for one client in one round, independent of the
    order in which clients happen to run.
    """
    state = np.random.SeedSequence([int(seed), int(round_t), int(client_index)])
    return int(state.generate_state(1, dtype=np.uint64)[0])

def _natural_key(client_id):
    return [int(part) if part.isdigit() else part for part in re.split(r"(\d+)", client_id)]

def local_train(global_params, data, lr, epochs, batch_size, seed, local_optimizer="adam",
                client_id="local", round_t=0):
    """
    Train a copy of ``global_params`` on ``data.train`` for ``epochs`` passes
    at a fixed learning rate.

    The optimizer state starts fresh. Every epoch visits the rows in a new
    order drawn from one generator seeded with ``seed``; the last batch of an
    epoch may be short.

    :param global_params: ModelParams

    :param data: DeviceDataset

    :param lr: float

    :param epochs: int

    :param batch_size: int

    :param seed: int

    :kwarg local_optimizer: str

    ``adam``, ``sgd`` or ``momentum``

    :return: ``RoundUpdate``

    :raises: ``DivergenceError``

    If the loss or any parameter stops being finite.
    """
    train = data.train
    n_rows = train.shape[0]
    if n_rows == 0:
        raise DataError("{} has an empty training split".format(data.device_id))
    if epochs < 0 or batch_size < 1:
        raise ValueError("Expected epochs >= 0 and batch_size >= 1 (got {}, {})".format(
            epochs, batch_size
        ))
    if local_optimizer not in LOCAL_OPTIMIZERS:
        raise ConfigError("Unknown local optimizer {!r}".format(local_optimizer))

    started = time.monotonic()
    model = global_params.copy()
    rng = np.random.default_rng(seed)
    adam_state = AdamState.fresh(model) if local_optimizer == "adam" else None
    velocity = model.zeros_like() if local_optimizer == "momentum" else None

    epoch_loss = None
    for epoch in range(epochs):
        order = rng.permutation(n_rows)
        batch_losses = []
        for start in range(0, n_rows, batch_size):
            batch = train[order[start:start + batch_size]]
            try:
                loss, grads = loss_and_gradients(model, batch)
                if local_optimizer == "adam":
                    model, adam_state = adam_step(model, grads, adam_state, lr)
                elif local_optimizer == "momentum":
                    model, velocity = momentum_step(model, grads, velocity, lr)
                else:
                    model = sgd_step(model, grads, lr)
            except DivergenceError as e:
                raise DivergenceError("{}: round {}, epoch {}: {}".format(
                    client_id, round_t, epoch, e.message
                ))
            batch_losses.append(loss)
        epoch_loss = math.fsum(batch_losses) / len(batch_losses)
        logger.debug("%s: round %d epoch %d loss %.6g", client_id, round_t, epoch, epoch_loss)

    if epoch_loss is None:
        epoch_loss = float(np.mean(reconstruction_errors(model, train)))
    return RoundUpdate(
        client_id=client_id, round=round_t, params=model, local_loss=epoch_loss,
        train_seconds=time.monotonic() - started, bytes_uploaded=len(encode_model(model)),
    )

def _pairwise_sum(arrays):
    while len(arrays) > 1:
        paired = [a + b for a, b in zip(arrays[0::2], arrays[1::2])]
        if len(arrays) % 2:
            paired.append(arrays[-1])
        arrays = paired
    return arrays[0]

def aggregate(updates):
    """
    :param updates: list[RoundUpdate]

    :return: ``ModelParams``

    The element-wise mean with weight exactly ``1/K``. Updates are summed in
    ``client_id`` order, pairwise, so the result does not depend on arrival
    order and averaging ``K`` copies of one model gives it back exactly when
    ``K`` is a power of two.

    :raises: ``ValueError``

    If there are no updates, or they disagree on round or shapes.
    """
    if not updates:
        raise ValueError("Cannot aggregate zero updates")
    rounds = {u.round for u in updates}
    if len(rounds) > 1:
        raise ValueError("Updates come from different rounds: {}".format(sorted(rounds)))
    ordered = sorted(updates, key=lambda u: _natural_key(u.client_id))
    reference = ordered[0].params
    for update in ordered[1:]:
        reference.check_compatible(update.params)
        if update.params.config_fingerprint != reference.config_fingerprint:
            raise ValueError("{} sent a model for a different architecture".format(
                update.client_id
            ))

    k = float(len(ordered))
    layers = []
    for i in range(len(reference.layers)):
        w = _pairwise_sum([u.params.layers[i][0] for u in ordered]) / k
        b = _pairwise_sum([u.params.layers[i][1] for u in ordered]) / k
        layers.append((w, b))
    return reference._with_layers(layers)

def global_threshold(per_client_mse, alpha, expected_clients=None):
    """
    :param per_client_mse: dict

    client_id -> reconstruction errors of the final global model on that
    client's benign eval split

    :param alpha: float

    :kwarg expected_clients: list[str]

    If given, every one of these must have reported.

    :return: ``GlobalThresholdReport``

    :raises: ``DataError``

    If a client is missing or sent an empty vector.
    """
    if expected_clients is not None:
        missing = sorted(set(expected_clients) - set(per_client_mse), key=_natural_key)
        if missing:
            raise DataError("No MSE sequence from {}".format(", ".join(missing)))
    if not per_client_mse:
        raise DataError("A global threshold needs at least one client")
    for client_id, scores in per_client_mse.items():
        if len(scores) == 0:
            raise DataError("{} sent an empty MSE sequence".format(client_id))
    ordered = sorted(per_client_mse, key=_natural_key)
    combined = np.concatenate([np.asarray(per_client_mse[c], dtype=np.float64) for c in ordered])
    return GlobalThresholdReport(
        per_client_mse=dict(per_client_mse), tr_global=compute_threshold(combined, alpha)
    )

def evaluate_model(model, features, labels, threshold):
    """
    :return: ``tuple(ConfusionMatrix, Metrics)``
    """
    return evaluate_scores(reconstruction_errors(model, features), labels, threshold)

class ServerManager:
    """
    The FL server. Handlers run on the thread that polls ``backend``.

    :param backend: Backend

    :param config: FederationConfig

    :param model_config: AutoencoderConfig

    :param device_ids: list[str]

    One device per client, assigned to clients in natural id order.

    :kwarg eval_sets: list[np.ndarray]

    Benign eval splits used for the per-round diagnostic MSE.

    :kwarg test_set: tuple(np.ndarray, np.ndarray)

    Global test features and labels for the final evaluation.

    :kwarg expected_clients: list[str]

    Only these client ids may register. Otherwise any ``K`` ids are accepted.

    """

    REGISTERING, TRAINING, THRESHOLD, DONE = "registering", "training", "threshold", "done"

    def __init__(self, backend, config, model_config, device_ids, run_id="local", seed=0,
                 eval_sets=None, test_set=None, expected_clients=None,
                 registration_timeout=60.0, round_timeout=3600.0):
        if len(device_ids) != config.n_clients:
            raise ConfigError("{} devices for {} clients".format(len(device_ids), config.n_clients))
        self.backend = backend
        self.config = config
        self.model_config = model_config
        self.device_ids = list(device_ids)
        self.run_id = run_id
        self.seed = seed
        self.eval_rows = np.concatenate(eval_sets, axis=0) if eval_sets else None
        self.test_set = test_set
        self.expected_clients = list(expected_clients) if expected_clients else None
        self.registration_timeout = registration_timeout
        self.round_timeout = round_timeout

        self.state = None
        self.round = 0
        self.global_model = init_autoencoder(model_config)
        self.registered = []
        self.assignment = {}
        self.updates = {}
        self.update_received = {}
        self.per_client_mse = {}
        self.stats = RunStats()
        self.threshold_report = None
        self.metrics = None
        self._seen = set()
        self._lock = threading.Lock()
        self._state_since = None
        self._round_started = None
        self._started_at = None

    @property
    def finished(self):
        return self.state == self.DONE

    def start(self):
        self._started_at = time.monotonic()
        self._enter(self.REGISTERING)
        self.backend.subscribe(server_filter(self.run_id), self._on_message)
        logger.info("Server waiting for %d clients on run %s", self.config.n_clients, self.run_id)

    def _enter(self, state):
        self.state = state
        self._state_since = time.monotonic()

    def _send(self, client_id, msg_type, round_t, payload=b""):
        envelope = Envelope(
            topic=client_topic(self.run_id, client_id, msg_type), msg_type=msg_type,
            round=round_t, sender_id="server", payload=payload, sent_at=time.monotonic()
        )
        self.backend.publish(envelope)
        return envelope

    def _on_message(self, envelope):
        if envelope.msg_type != MsgType.REGISTER:
            if envelope.key in self._seen:
                logger.debug("Server: dropping duplicate %s", envelope.key)
                return
            self._seen.add(envelope.key)
        handler = {
            MsgType.REGISTER: self._on_register,
            MsgType.MODEL_UPDATE: self._on_update,
            MsgType.MSE_SEQUENCE: self._on_mse_sequence,
        }.get(envelope.msg_type)
        if handler is None:
            logger.debug("Server: ignoring %s from %s", envelope.msg_type.name, envelope.sender_id)
            return
        with self._lock:
            handler(envelope)

    def _on_register(self, envelope):
        client_id = envelope.sender_id
        if client_id in self.assignment:
            self._send_assignment(client_id)
            return
        if self.state != self.REGISTERING or client_id in self.registered:
            return
        if self.expected_clients is not None and client_id not in self.expected_clients:
            logger.warning("Server: rejecting unexpected client %s", client_id)
            return
        self.registered.append(client_id)
        logger.info("Server: %s registered (%d/%d)", client_id, len(self.registered),
                    self.config.n_clients)
        if len(self.registered) == self.config.n_clients:
            for index, cid in enumerate(sorted(self.registered, key=_natural_key)):
                self.assignment[cid] = index
                self._send_assignment(cid)
            self._broadcast_model(hold_from=None, aggregation_seconds=0.0)
            self._enter(self.TRAINING)

    def _send_assignment(self, client_id):
        index = self.assignment[client_id]
        self._send(client_id, MsgType.REGISTER_ACK, 0)
        self._send(client_id, MsgType.DATASET_ASSIGN, 0, encode_json({
            "device_id": self.device_ids[index], "device_index": index,
            "total_rounds": self.config.total_rounds, "local_epochs": self.config.local_epochs,
            "batch_size": self.config.batch_size, "seed": self.seed,
            "local_optimizer": self.config.local_optimizer,
            "model": {
                "input_dim": self.model_config.input_dim,
                "encoder_rates": list(self.model_config.encoder_rates),
                "activation": self.model_config.activation,
                "output_activation": self.model_config.output_activation,
            },
        }))

    def _broadcast_model(self, hold_from, aggregation_seconds):
        final = self.round >= self.config.total_rounds
        lr = 0.0 if final else cosine_lr(self.config.schedule, self.round)
        now = time.monotonic()
        for client_id in sorted(self.assignment, key=_natural_key):
            hold = 0.0
            if hold_from is not None:
                hold = max(0.0, now - hold_from[client_id])
            self._send(client_id, MsgType.GLOBAL_MODEL, self.round, encode_global_model(
                self.global_model, lr, hold_seconds=hold, aggregation_seconds=aggregation_seconds
            ))
        self._round_started = now
        if not final:
            logger.info("Server: round %d/%d started, lr=%.6g", self.round + 1,
                        self.config.total_rounds, lr)
        return lr

    def _on_update(self, envelope):
        if self.state != self.TRAINING or envelope.round != self.round:
            logger.debug("Server: stale update from %s for round %d", envelope.sender_id,
                         envelope.round)
            return
        client_id = envelope.sender_id
        if client_id not in self.assignment:
            logger.warning("Server: update from unknown client %s", client_id)
            return
        params, loss, train_seconds = decode_model_update(envelope.payload, self.model_config)
        self.updates[client_id] = RoundUpdate(
            client_id=client_id, round=envelope.round, params=params, local_loss=loss,
            train_seconds=train_seconds, bytes_uploaded=len(envelope.payload)
        )
        self.update_received[client_id] = envelope.received_at or time.monotonic()
        if len(self.updates) < self.config.n_clients:
            return

        aggregation_started = time.monotonic()
        self.global_model = aggregate(list(self.updates.values()))
        aggregation_seconds = time.monotonic() - aggregation_started
        if not self.global_model.is_finite():
            raise DivergenceError("Round {}: the averaged model is not finite".format(self.round))
        losses = [u.local_loss for u in self.updates.values()]
        record = RoundRecord(
            round=self.round, lr=cosine_lr(self.config.schedule, self.round),
            wall_seconds=time.monotonic() - self._round_started,
            aggregation_seconds=aggregation_seconds,
            mean_local_loss=math.fsum(losses) / len(losses),
        )
        received = dict(self.update_received)
        self.updates, self.update_received = {}, {}
        self.round += 1
        self._broadcast_model(hold_from=received, aggregation_seconds=aggregation_seconds)

        if self.eval_rows is not None:
            record.eval_mse = float(np.mean(reconstruction_errors(self.global_model, self.eval_rows)))
        self.stats.rounds.append(record)
        logger.info(
            "Server: round %d/%d done in %.3fs, mean local loss %.6g, eval MSE %s",
            record.round + 1, self.config.total_rounds, record.wall_seconds,
            record.mean_local_loss, "n/a" if record.eval_mse is None else "%.6g" % record.eval_mse
        )
        if self.round >= self.config.total_rounds:
            self._enter(self.THRESHOLD)

    def _on_mse_sequence(self, envelope):
        if self.state != self.THRESHOLD:
            return
        scores, client_stats = decode_mse_sequence(envelope.payload)
        self.per_client_mse[envelope.sender_id] = scores
        self.stats.client_stats[envelope.sender_id] = CommStats.from_dict(client_stats)
        if len(self.per_client_mse) < self.config.n_clients:
            return

        self.threshold_report = global_threshold(
            self.per_client_mse, self.config.alpha, expected_clients=list(self.assignment)
        )
        threshold = self.threshold_report.tr_global
        logger.info("Server: global threshold %.6g (mean %.6g, std %.6g over %d scores)",
                    threshold.tr, threshold.mean_mse, threshold.std_mse, threshold.n_samples)
        if self.test_set is not None:
            self.stats.confusion, self.metrics = evaluate_model(
                self.global_model, self.test_set[0], self.test_set[1], threshold
            )
            logger.info("Server: test metrics %s", self.metrics.as_dict())
        for client_id in sorted(self.assignment, key=_natural_key):
            self._send(client_id, MsgType.GLOBAL_THRESHOLD, self.round, encode_threshold(threshold))
        for client_id in sorted(self.assignment, key=_natural_key):
            self._send(client_id, MsgType.DONE, self.round)
        self.stats.comm = CommStats.combine(
            self.stats.client_stats[c] for c in sorted(self.stats.client_stats, key=_natural_key)
        )
        self.stats.wall_seconds = time.monotonic() - self._started_at
        self._enter(self.DONE)

    def _waiting_on(self):
        if self.state == self.REGISTERING:
            expected = self.expected_clients
            if expected is None:
                return ["{} more client(s)".format(self.config.n_clients - len(self.registered))]
            return [c for c in expected if c not in self.registered]
        pending = self.updates if self.state == self.TRAINING else self.per_client_mse
        return sorted((c for c in self.assignment if c not in pending), key=_natural_key)

    def diagnose(self):
        return "server in state {} (round {}), waiting on: {}".format(
            self.state, self.round, ", ".join(self._waiting_on()) or "nothing"
        )

    def tick(self, now):
        """
        :raises: ``TransportError``

        If registration or a round has taken longer than allowed.
        """
        if self.state == self.REGISTERING:
            if now - self._state_since > self.registration_timeout:
                raise TransportError(
                    "Registration timed out after {}s; registered: {}; missing: {}".format(
                        self.registration_timeout, ", ".join(self.registered) or "none",
                        ", ".join(self._waiting_on())
                    )
                )
        elif self.state in (self.TRAINING, self.THRESHOLD):
            if now - self._round_started > self.round_timeout:
                raise TransportError("Round {} timed out after {}s; missing: {}".format(
                    self.round, self.round_timeout, ", ".join(self._waiting_on())
                ))

    def result(self):
        return FedDetectResult(
            model=self.global_model, threshold=self.threshold_report, metrics=self.metrics,
            stats=self.stats
        )

class ClientManager:
    """
    One FL client: register, wait for a model, train, upload, repeat.

    :param backend: Backend

    :param client_id: str

    :param dataset_loader: callable

    device_id -> DeviceDataset

    """

    def __init__(self, backend, client_id, dataset_loader, run_id="local", round_timeout=3600.0):
        self.backend = backend
        self.client_id = client_id
        self.dataset_loader = dataset_loader
        self.run_id = run_id
        self.round_timeout = round_timeout

        self.assignment = None
        self.dataset = None
        self.model_config = None
        self.stats = CommStats()
        self.threshold = None
        self.finished = False
        self._marks = None
        self._seen = set()
        self._last_register = None
        self._last_message = None
        self._waiting_for = "REGISTER_ACK"

    def start(self):
        self.backend.subscribe(client_filter(self.run_id, self.client_id), self._on_message)
        self._register()

    def _register(self):
        self._last_register = self._last_message = time.monotonic()
        self._publish(MsgType.REGISTER, 0)

    def _publish(self, msg_type, round_t, payload=b""):
        envelope = Envelope(
            topic=server_topic(self.run_id, msg_type), msg_type=msg_type, round=round_t,
            sender_id=self.client_id, payload=payload, sent_at=time.monotonic()
        )
        self.backend.publish(envelope)
        return envelope

    def _on_message(self, envelope):
        if envelope.key in self._seen:
            logger.debug("%s: dropping duplicate %s", self.client_id, envelope.key)
            return
        self._seen.add(envelope.key)
        self._last_message = time.monotonic()
        handler = {
            MsgType.REGISTER_ACK: self._on_ack,
            MsgType.DATASET_ASSIGN: self._on_assign,
            MsgType.GLOBAL_MODEL: self._on_model,
            MsgType.GLOBAL_THRESHOLD: self._on_threshold,
            MsgType.DONE: self._on_done,
        }.get(envelope.msg_type)
        if handler is not None:
            handler(envelope)

    def _on_ack(self, envelope):
        logger.debug("%s: registration acknowledged", self.client_id)
        self._waiting_for = "DATASET_ASSIGN"

    def _on_assign(self, envelope):
        self.assignment = decode_json(envelope.payload)
        model = self.assignment["model"]
        self.model_config = AutoencoderConfig(
            input_dim=model["input_dim"], encoder_rates=tuple(model["encoder_rates"]),
            activation=model["activation"], output_activation=model["output_activation"]
        )
        self.dataset = self.dataset_loader(self.assignment["device_id"])
        logger.info("%s: assigned device %s (%d training rows)", self.client_id,
                    self.dataset.device_id, self.dataset.train.shape[0])
        self._waiting_for = "GLOBAL_MODEL round 0"

    def _on_model(self, envelope):
        if self.assignment is None:
            raise TransportError("{}: got a model before a dataset assignment".format(
                self.client_id
            ))
        model, lr, hold, aggregation = decode_global_model(envelope.payload, self.model_config)
        received_at = envelope.received_at or time.monotonic()
        downloaded = frame_size(envelope)
        if self._marks is not None:
            self._marks.receipt = received_at
            self._marks.server_seconds = hold
            self._marks.aggregation_seconds = aggregation
            measure_round(self.stats, self._marks)
            self._marks = None

        if envelope.round >= self.assignment["total_rounds"]:
            self.stats.bytes_down += downloaded
            scores = reconstruction_errors(model, self.dataset.eval)
            self._publish(MsgType.MSE_SEQUENCE, envelope.round,
                          encode_mse_sequence(scores, self.stats.to_dict()))
            self._waiting_for = "GLOBAL_THRESHOLD"
            return

        train_start = time.monotonic()
        update = local_train(
            model, self.dataset, lr, self.assignment["local_epochs"],
            self.assignment["batch_size"],
            client_seed(self.assignment["seed"], envelope.round, self.assignment["device_index"]),
            local_optimizer=self.assignment["local_optimizer"], client_id=self.client_id,
            round_t=envelope.round,
        )
        train_end = upload_start = time.monotonic()
        sent = self._publish(MsgType.MODEL_UPDATE, envelope.round, encode_model_update(
            update.params, update.local_loss, update.train_seconds
        ))
        self._marks = RoundMarks(
            round=envelope.round, train_start=train_start, train_end=train_end,
            upload_start=upload_start, bytes_up=frame_size(sent), bytes_down=downloaded
        )
        self._waiting_for = "GLOBAL_MODEL round {}".format(envelope.round + 1)
        logger.debug("%s: round %d uploaded, local loss %.6g", self.client_id, envelope.round,
                     update.local_loss)

    def _on_threshold(self, envelope):
        self.threshold = decode_threshold(envelope.payload)
        self._waiting_for = "DONE"

    def _on_done(self, envelope):
        logger.info("%s: done", self.client_id)
        self.finished = True

    def diagnose(self):
        return "{} waiting for {}".format(self.client_id, self._waiting_for)

    def tick(self, now):
        """
        Re-send ``REGISTER`` until the server answers.

        :raises: ``TransportError``

        If the server has been silent for longer than ``round_timeout``.
        """
        if self.assignment is None and now - self._last_register >= REGISTER_RETRY_SECONDS:
            logger.debug("%s: re-sending REGISTER", self.client_id)
            self._last_register = now
            self._publish(MsgType.REGISTER, 0)
        if now - self._last_message > self.round_timeout:
            raise TransportError("{}: nothing from the server for {}s while waiting for {}".format(
                self.client_id, self.round_timeout, self._waiting_for
            ))

def run_feddetect(config, devices, transport, seed, model_config=None, run_id="local",
                  registration_timeout=60.0, round_timeout=3600.0):
    """
    Run a complete federated experiment in this process: one server and one
    client per device, all on ``transport``.

    :param config: FederationConfig

    :param devices: list[DeviceDataset]

    Exactly ``config.n_clients`` of them. Client ``client-i`` trains on
    ``devices[i]``.

    :param transport: Transport

    :param seed: int

    :kwarg model_config: AutoencoderConfig

    Defaults to the standard architecture for the devices' feature count,
    initialized from ``seed``.

    :return: ``FedDetectResult``
    """
    if len(devices) != config.n_clients:
        raise ConfigError("run_feddetect got {} devices for {} clients".format(
            len(devices), config.n_clients
        ))
    if model_config is None:
        model_config = AutoencoderConfig(input_dim=devices[0].train.shape[1], seed=seed)
    by_id = {d.device_id: d for d in devices}
    client_ids = ["client-{}".format(i) for i in range(len(devices))]

    server = ServerManager(
        transport.endpoint("server", priority=0), config, model_config,
        device_ids=[d.device_id for d in devices], run_id=run_id, seed=seed,
        eval_sets=[d.eval for d in devices], test_set=build_global_testset(devices),
        expected_clients=client_ids, registration_timeout=registration_timeout,
        round_timeout=round_timeout,
    )
    clients = [
        ClientManager(transport.endpoint(cid), cid, by_id.__getitem__, run_id=run_id,
                      round_timeout=round_timeout)
        for cid in client_ids
    ]
    transport.run([server] + clients)
    return server.result()

def train_centralized(dataset, config, model_config, seed, device_index=0):
    """
    Train one model on ``dataset.train`` with the same step budget as a
    federated run: ``total_rounds`` segments of ``local_epochs`` epochs, a
    fresh optimizer and the cosine learning rate of that round in each.

    :return: ``tuple(ModelParams, list[float], float)``

    Model, per-segment loss, training seconds.
    """
    model = init_autoencoder(model_config)
    losses, seconds = [], 0.0
    for round_t in range(config.total_rounds):
        update = local_train(
            model, dataset, cosine_lr(config.schedule, round_t), config.local_epochs,
            config.batch_size, client_seed(seed, round_t, device_index),
            local_optimizer=config.local_optimizer, client_id=dataset.device_id, round_t=round_t,
        )
        model = update.params
        losses.append(update.local_loss)
        seconds += update.train_seconds
    return model, losses, seconds

def run_cl_single(device, config, model_config, seed, test_set=None, device_index=0):
    """
    Centralized training on one device, thresholded on its own eval split.

    :kwarg test_set: tuple(np.ndarray, np.ndarray)

    Defaults to the device's own test split.

    :return: ``CentralizedResult``
    """
    model, losses, seconds = train_centralized(device, config, model_config, seed, device_index)
    threshold = compute_threshold(reconstruction_errors(model, device.eval), config.alpha)
    features, labels = test_set if test_set is not None else (
        device.test_features, device.test_labels
    )
    cm, metrics = evaluate_model(model, features, labels, threshold)
    logger.info("CL-Single %s: acc %.4f", device.device_id, metrics.acc)
    return CentralizedResult(
        device_id=device.device_id, model=model, threshold=threshold, metrics=metrics,
        confusion=cm, loss_curve=losses, train_seconds=seconds
    )

def run_cl_single_all(devices, config, model_config, seed):
    """
    :return: ``tuple(list[CentralizedResult], Metrics)``

    One result per device, each evaluated on the global test set, and their
    average.
    """
    test_set = build_global_testset(devices)
    results = [
        run_cl_single(device, config, model_config, seed, test_set=test_set, device_index=i)
        for i, device in enumerate(devices)
    ]
    return results, average_metrics([r.metrics for r in results])

def run_cl_combined(devices, config, model_config, seed):
    """
    One model on the merged training rows of every device.

    :return: ``CentralizedResult``
    """
    features, labels = build_global_testset(devices)
    merged = DeviceDataset(
        device_id="combined",
        train=np.concatenate([d.train for d in devices], axis=0),
        eval=np.concatenate([d.eval for d in devices], axis=0),
        test_features=features, test_labels=labels,
    )
    result = run_cl_single(merged, config, model_config, seed, device_index=0)
    logger.info("CL-Combined: acc %.4f", result.metrics.acc)
    return result
