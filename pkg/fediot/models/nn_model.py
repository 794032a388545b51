"""
nn_model.py

The deep autoencoder used for anomaly detection: layer layout, forward and
backward passes, per-sample reconstruction error, the local optimizers and the
cross-round cosine learning rate schedule.

Everything runs on float64 ``numpy`` arrays. The model is small (tens of
thousands of parameters), so exact gradients and bit-for-bit reproducibility
matter more than speed.

"""

import hashlib
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .exception import ConfigError, DivergenceError

logger = logging.getLogger(__name__)

ACTIVATIONS = ("tanh", "sigmoid")
DEFAULT_ENCODER_RATES = (0.75, 0.50, 0.33, 0.25)

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPSILON = 1e-8
MOMENTUM_BETA = 0.9

@dataclass(frozen=True)
class AutoencoderConfig:
    """
    Describes the autoencoder architecture. The encoder shrinks ``input_dim``
    by each of ``encoder_rates`` in turn; the decoder mirrors the encoder back
    to ``input_dim``.

    ``output_activation`` controls whether the last layer also applies the
    activation. With inputs min-max scaled into [0, 1] the default (``True``)
    keeps the reconstruction inside the activation's range.
    """
    input_dim: int = 115
    encoder_rates: tuple = DEFAULT_ENCODER_RATES
    activation: str = "tanh"
    output_activation: bool = True
    seed: int = 0

    def __post_init__(self):
        if int(self.input_dim) < 1:
            raise ConfigError("input_dim must be positive (got {})".format(self.input_dim))
        rates = tuple(float(r) for r in self.encoder_rates)
        if not rates:
            raise ConfigError("encoder_rates cannot be empty")
        for rate in rates:
            if not 0.0 < rate < 1.0:
                raise ConfigError("encoder rate {} is outside (0, 1)".format(rate))
        for prev, nxt in zip(rates, rates[1:]):
            if nxt >= prev:
                raise ConfigError(
                    "encoder_rates must be strictly decreasing (got {})".format(list(rates))
                )
        if self.activation not in ACTIVATIONS:
            raise ConfigError("activation must be one of {} (got {!r})".format(
                ", ".join(ACTIVATIONS), self.activation
            ))
        object.__setattr__(self, "encoder_rates", rates)
        for dim in self.encoder_dims:
            if dim < 1:
                raise ConfigError(
                    "encoder rates {} give a zero-width layer for input_dim={}".format(
                        list(rates), self.input_dim
                    )
                )

    @property
    def encoder_dims(self):
        return [int(round(rate * self.input_dim)) for rate in self.encoder_rates]

    @property
    def layer_dims(self):
        """
        :return: ``list[int]``

        The full chain of widths, e.g. ``[115, 86, 58, 38, 29, 38, 58, 86, 115]``
        """
        encoder = self.encoder_dims
        return [self.input_dim] + encoder + encoder[-2::-1] + [self.input_dim]

    @property
    def fingerprint(self):
        """
        :return: ``bytes``

        8 bytes identifying the architecture. The seed is left out so that
        models initialized differently remain exchangeable.
        """
        description = repr((
            self.input_dim, tuple(self.layer_dims), self.activation,
            bool(self.output_activation)
        ))
        return hashlib.blake2b(description.encode("utf-8"), digest_size=8).digest()

@dataclass(eq=False)
class ModelParams:
    """
    The weights and biases of the autoencoder, in layer order. Weight matrices
    are shaped ``[out_dim, in_dim]``. This is also the type used for gradients
    and optimizer moments.
    """
    layers: list
    config_fingerprint: bytes
    activation: str = "tanh"
    output_activation: bool = True

    @property
    def input_dim(self):
        return self.layers[0][0].shape[1]

    def shapes(self):
        return [(w.shape, b.shape) for w, b in self.layers]

    def param_count(self):
        return sum(w.size + b.size for w, b in self.layers)

    def copy(self):
        return self._with_layers([(w.copy(), b.copy()) for w, b in self.layers])

    def zeros_like(self):
        return self._with_layers([(np.zeros_like(w), np.zeros_like(b)) for w, b in self.layers])

    def flatten(self):
        """
        :return: ``np.ndarray``

        Every weight (row-major) then bias, layer by layer.
        """
        parts = []
        for w, b in self.layers:
            parts.append(w.ravel())
            parts.append(b.ravel())
        return np.concatenate(parts)

    def is_finite(self):
        return all(np.isfinite(w).all() and np.isfinite(b).all() for w, b in self.layers)

    def bit_equal(self, other):
        """
        :return: ``bool``

        ``True`` if both models have the same fingerprint and byte-identical
        arrays.
        """
        if self.config_fingerprint != other.config_fingerprint:
            return False
        if self.shapes() != other.shapes():
            return False
        return all(
            w1.tobytes() == w2.tobytes() and b1.tobytes() == b2.tobytes()
            for (w1, b1), (w2, b2) in zip(self.layers, other.layers)
        )

    def check_compatible(self, other):
        if self.shapes() != other.shapes():
            raise ValueError("Shape mismatch: {} vs {}".format(self.shapes(), other.shapes()))

    def _with_layers(self, layers):
        return ModelParams(
            layers=layers, config_fingerprint=self.config_fingerprint,
            activation=self.activation, output_activation=self.output_activation
        )

Gradients = ModelParams

@dataclass
class AdamState:
    m: ModelParams
    v: ModelParams
    step_count: int = 0
    beta1: float = ADAM_BETA1
    beta2: float = ADAM_BETA2
    epsilon: float = ADAM_EPSILON

    @classmethod
    def fresh(cls, model, **hyper_params):
        return cls(m=model.zeros_like(), v=model.zeros_like(), **hyper_params)

@dataclass(frozen=True)
class LrSchedule:
    """
    Cross-round cosine schedule from ``eta_max`` at the first round down to
    ``eta_min`` at the last one.
    """
    eta_max: float = 1e-3
    eta_min: float = 0.0
    total_rounds: int = 30

    def __post_init__(self):
        if self.total_rounds < 1:
            raise ConfigError("total_rounds must be at least 1")
        if not 0.0 <= self.eta_min <= self.eta_max:
            raise ConfigError("Expected 0 <= eta_min <= eta_max (got {}, {})".format(
                self.eta_min, self.eta_max
            ))

def init_autoencoder(config):
    """
    :param config: AutoencoderConfig

    :return: ``ModelParams``

    Weights drawn from ``U(-1/sqrt(in_dim), 1/sqrt(in_dim))``, biases zero.
    The result depends only on ``config``.
    """
    rng = np.random.default_rng(config.seed)
    dims = config.layer_dims
    layers = []
    for in_dim, out_dim in zip(dims[:-1], dims[1:]):
        scale = 1.0 / math.sqrt(in_dim)
        w = rng.uniform(-scale, scale, size=(out_dim, in_dim))
        layers.append((w, np.zeros(out_dim)))
    return ModelParams(
        layers=layers, config_fingerprint=config.fingerprint,
        activation=config.activation, output_activation=config.output_activation
    )

def param_count(config):
    """
    :return: ``int``

    Sum over layers of ``out * in + out``
    """
    dims = config.layer_dims
    return sum(out_dim * in_dim + out_dim for in_dim, out_dim in zip(dims[:-1], dims[1:]))

def _activate(z, activation):
    if activation == "tanh":
        return np.tanh(z)
    # exp(-log(1 + exp(-z))) does not overflow for large |z|
    return np.exp(-np.logaddexp(0.0, -z))

def _activation_slope(a, activation):
    """Derivative of the activation, expressed through its output ``a``"""
    if activation == "tanh":
        return 1.0 - a * a
    return a * (1.0 - a)

def _check_batch(model, batch):
    batch = np.asarray(batch, dtype=np.float64)
    if batch.ndim != 2 or batch.shape[1] != model.input_dim:
        raise ValueError("Expected a batch of shape [B, {}], got {}".format(
            model.input_dim, batch.shape
        ))
    return batch

def _forward_trace(model, batch):
    outputs = [batch]
    last = len(model.layers) - 1
    a = batch
    for k, (w, b) in enumerate(model.layers):
        z = a @ w.T + b
        a = _activate(z, model.activation) if (k < last or model.output_activation) else z
        outputs.append(a)
    return outputs

def forward(model, batch):
    """
    :param model: ModelParams

    :param batch: np.ndarray

    Shaped ``[B, input_dim]``

    :return: ``np.ndarray``

    The reconstruction, same shape as ``batch``.
    """
    batch = _check_batch(model, batch)
    return _forward_trace(model, batch)[-1]

def mse_per_sample(x, x_hat):
    """
    :return: ``np.ndarray``

    ``(1/d) * sum_i (x[b, i] - x_hat[b, i])**2`` for each row ``b``
    """
    x = np.asarray(x, dtype=np.float64)
    x_hat = np.asarray(x_hat, dtype=np.float64)
    if x.shape != x_hat.shape or x.ndim != 2:
        raise ValueError("Shape mismatch: {} vs {}".format(x.shape, x_hat.shape))
    diff = x - x_hat
    return np.mean(diff * diff, axis=1)

def reconstruction_errors(model, batch):
    """Per-sample MSE of ``model`` on ``batch``"""
    return mse_per_sample(batch, forward(model, batch))

def loss_and_gradients(model, batch):
    """
    :return: ``tuple(float, Gradients)``

    The batch-mean reconstruction MSE and its exact gradient with respect to
    every weight and bias.

    :raises: ``DivergenceError``

    If the loss or any gradient is not finite.
    """
    batch = _check_batch(model, batch)
    if batch.shape[0] == 0:
        raise ValueError("Cannot compute gradients on an empty batch")
    outputs = _forward_trace(model, batch)
    x_hat = outputs[-1]
    n_rows, width = batch.shape
    diff = x_hat - batch
    loss = float(np.mean(diff * diff))
    if not math.isfinite(loss):
        raise DivergenceError("Training diverged: reconstruction loss is {}".format(loss))

    last = len(model.layers) - 1
    grad_a = 2.0 * diff / (n_rows * width)
    grads = [None] * len(model.layers)
    for k in range(last, -1, -1):
        w, _ = model.layers[k]
        a = outputs[k + 1]
        if k < last or model.output_activation:
            grad_z = grad_a * _activation_slope(a, model.activation)
        else:
            grad_z = grad_a
        grads[k] = (grad_z.T @ outputs[k], grad_z.sum(axis=0))
        grad_a = grad_z @ w

    gradients = model._with_layers(grads)
    if not gradients.is_finite():
        raise DivergenceError("Training diverged: non-finite gradient")
    return loss, gradients

def backward(model, batch):
    """
    :return: ``Gradients``

    Exact gradient of the batch-mean reconstruction MSE.
    """
    return loss_and_gradients(model, batch)[1]

def _assert_finite_step(model):
    if not model.is_finite():
        raise DivergenceError("Training diverged: non-finite parameter after update")
    return model

def adam_step(model, grads, state, lr):
    """
    One Adam update with bias correction.

    :return: ``tuple(ModelParams, AdamState)``

    New parameters and optimizer state. The inputs are left untouched.
    """
    model.check_compatible(grads)
    model.check_compatible(state.m)
    if lr < 0:
        raise ValueError("Learning rate must not be negative (got {})".format(lr))
    t = state.step_count + 1
    b1, b2, eps = state.beta1, state.beta2, state.epsilon
    correction1 = 1.0 - b1 ** t
    correction2 = 1.0 - b2 ** t

    layers, m_layers, v_layers = [], [], []
    for (w, b), (gw, gb), (mw, mb), (vw, vb) in zip(
            model.layers, grads.layers, state.m.layers, state.v.layers):
        updated = []
        for p, g, m, v in ((w, gw, mw, vw), (b, gb, mb, vb)):
            m = b1 * m + (1.0 - b1) * g
            v = b2 * v + (1.0 - b2) * (g * g)
            m_hat = m / correction1
            v_hat = v / correction2
            updated.append((p - lr * m_hat / (np.sqrt(v_hat) + eps), m, v))
        (nw, nmw, nvw), (nb, nmb, nvb) = updated
        layers.append((nw, nb))
        m_layers.append((nmw, nmb))
        v_layers.append((nvw, nvb))

    new_state = AdamState(
        m=model._with_layers(m_layers), v=model._with_layers(v_layers),
        step_count=t, beta1=b1, beta2=b2, epsilon=eps
    )
    return _assert_finite_step(model._with_layers(layers)), new_state

def sgd_step(model, grads, lr):
    """Plain gradient descent: ``w <- w - lr * g``"""
    model.check_compatible(grads)
    layers = [
        (w - lr * gw, b - lr * gb)
        for (w, b), (gw, gb) in zip(model.layers, grads.layers)
    ]
    return _assert_finite_step(model._with_layers(layers))

def momentum_step(model, grads, velocity, lr, beta=MOMENTUM_BETA):
    """
    Heavy-ball momentum: ``u <- beta * u + g; w <- w - lr * u``

    :return: ``tuple(ModelParams, ModelParams)``

    New parameters and velocity.
    """
    model.check_compatible(grads)
    layers, velocities = [], []
    for (w, b), (gw, gb), (uw, ub) in zip(model.layers, grads.layers, velocity.layers):
        uw = beta * uw + gw
        ub = beta * ub + gb
        velocities.append((uw, ub))
        layers.append((w - lr * uw, b - lr * ub))
    return _assert_finite_step(model._with_layers(layers)), model._with_layers(velocities)

def cosine_lr(schedule, round_t):
    """
    :param schedule: LrSchedule

    :param round_t: int

    Zero-based round index, ``0 <= round_t < total_rounds``

    :return: ``float``

    ``eta_min + (eta_max - eta_min) * (1 + cos(pi * t / (T - 1))) / 2``. The
    first round gets ``eta_max`` and the last round gets ``eta_min``, exactly.
    """
    total = schedule.total_rounds
    if not 0 <= round_t < total:
        raise ValueError("Round {} is outside [0, {})".format(round_t, total))
    if round_t == 0:
        return schedule.eta_max
    if round_t == total - 1:
        return schedule.eta_min
    cos_factor = 0.5 * (1.0 + math.cos(math.pi * round_t / (total - 1)))
    return schedule.eta_min + (schedule.eta_max - schedule.eta_min) * cos_factor
