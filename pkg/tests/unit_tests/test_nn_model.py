"""
test_nn_model.py
"""

import sys
import math

import numpy as np
import pytest

sys.path.insert(0, "../..")
from fediot.models import nn_model
from fediot.models.nn_model import AutoencoderConfig, LrSchedule, ModelParams
from fediot.models.exception import ConfigError, DivergenceError

def numerical_gradient(model, batch, eps=1e-6):
    flat = []
    for k, (w, b) in enumerate(model.layers):
        for array in (w, b):
            grad = np.zeros_like(array)
            for index in np.ndindex(array.shape):
                original = array[index]
                array[index] = original + eps
                plus, _ = nn_model.loss_and_gradients(model, batch)
                array[index] = original - eps
                minus, _ = nn_model.loss_and_gradients(model, batch)
                array[index] = original
                grad[index] = (plus - minus) / (2 * eps)
            flat.append(grad.ravel())
    return np.concatenate(flat)

def scalar_model(value):
    return ModelParams(
        layers=[(np.array([[value]]), np.array([0.0]))], config_fingerprint=b"\x00" * 8
    )

def test_default_layer_dims():
    config = AutoencoderConfig()
    assert config.layer_dims == [115, 86, 58, 38, 29, 38, 58, 86, 115]

def test_param_count_matches_layer_arithmetic():
    dims = [115, 86, 58, 38, 29, 38, 58, 86, 115]
    expected = sum(o * i + o for i, o in zip(dims[:-1], dims[1:]))
    assert expected == 36876
    assert nn_model.param_count(AutoencoderConfig()) == expected
    assert nn_model.init_autoencoder(AutoencoderConfig()).param_count() == expected

def test_toy_model(toy_config):
    model = nn_model.init_autoencoder(toy_config)
    assert toy_config.layer_dims == [2, 1, 2]
    assert model.param_count() == 7
    assert model.shapes() == [((1, 2), (1,)), ((2, 1), (2,))]

def test_init_is_deterministic_and_bounded():
    config = AutoencoderConfig(input_dim=20, seed=5)
    first, second = nn_model.init_autoencoder(config), nn_model.init_autoencoder(config)
    assert first.bit_equal(second)
    for w, b in first.layers:
        assert np.all(np.abs(w) <= 1.0 / math.sqrt(w.shape[1]))
        assert np.all(b == 0)

    other = nn_model.init_autoencoder(AutoencoderConfig(input_dim=20, seed=6))
    assert not first.bit_equal(other)
    assert first.config_fingerprint == other.config_fingerprint

@pytest.mark.parametrize("kwargs", [
    {"input_dim": 0},
    {"encoder_rates": ()},
    {"encoder_rates": (0.5, 0.75)},
    {"encoder_rates": (0.5, 0.5)},
    {"encoder_rates": (1.2,)},
    {"input_dim": 2, "encoder_rates": (0.2,)},
    {"activation": "relu"},
])
def test_invalid_configs(kwargs):
    with pytest.raises(ConfigError):
        AutoencoderConfig(**kwargs)

def test_forward_rejects_wrong_width(toy_config):
    model = nn_model.init_autoencoder(toy_config)
    with pytest.raises(ValueError):
        nn_model.forward(model, np.zeros((4, 3)))
    assert nn_model.forward(model, np.zeros((4, 2))).shape == (4, 2)

def test_mse_per_sample():
    x = np.array([[0.0, 0.0], [1.0, 1.0]])
    x_hat = np.array([[1.0, 1.0], [1.0, 0.0]])
    assert list(nn_model.mse_per_sample(x, x_hat)) == [1.0, 0.5]
    with pytest.raises(ValueError):
        nn_model.mse_per_sample(x, x_hat[:1])

def test_gradients_match_finite_differences():
    rng = np.random.default_rng(2024)
    for trial in range(20):
        input_dim = int(rng.integers(3, 9))
        rates = tuple(sorted(rng.uniform(0.4, 0.95, size=int(rng.integers(1, 3))), reverse=True))
        config = AutoencoderConfig(
            input_dim=input_dim, encoder_rates=rates,
            activation=str(rng.choice(nn_model.ACTIVATIONS)),
            output_activation=bool(rng.integers(0, 2)), seed=trial
        )
        model = nn_model.init_autoencoder(config)
        batch = rng.uniform(0.0, 1.0, size=(int(rng.integers(1, 6)), input_dim))

        analytic = nn_model.backward(model, batch).flatten()
        numeric = numerical_gradient(model, batch)
        error = np.linalg.norm(analytic - numeric) / max(
            np.linalg.norm(analytic) + np.linalg.norm(numeric), 1e-12
        )
        assert error < 1e-4, "config {} relative error {}".format(config, error)

def test_adam_first_step_moves_by_lr_against_the_gradient(small_config):
    model = nn_model.init_autoencoder(small_config)
    batch = np.random.default_rng(0).uniform(size=(16, small_config.input_dim))
    grads = nn_model.backward(model, batch)
    lr = 1e-3
    updated, state = nn_model.adam_step(model, grads, nn_model.AdamState.fresh(model), lr)

    assert state.step_count == 1
    delta = updated.flatten() - model.flatten()
    g = grads.flatten()
    assert np.allclose(delta, -lr * g / (np.abs(g) + nn_model.ADAM_EPSILON), rtol=1e-9, atol=1e-15)
    significant = np.abs(g) > 1e-5
    assert np.allclose(delta[significant], -lr * np.sign(g[significant]), rtol=1e-2)

def test_adam_matches_scalar_reference():
    lr, target = 0.05, 3.0
    b1, b2, eps = nn_model.ADAM_BETA1, nn_model.ADAM_BETA2, nn_model.ADAM_EPSILON

    x, m, v = 0.0, 0.0, 0.0
    expected = []
    for t in range(1, 101):
        g = 2.0 * (x - target)
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * (g * g)
        m_hat = m / (1.0 - b1 ** t)
        v_hat = v / (1.0 - b2 ** t)
        x = x - lr * m_hat / (math.sqrt(v_hat) + eps)
        expected.append(x)

    model = scalar_model(0.0)
    state = nn_model.AdamState.fresh(model)
    for t in range(100):
        w = model.layers[0][0][0, 0]
        grads = ModelParams(
            layers=[(np.array([[2.0 * (w - target)]]), np.array([0.0]))],
            config_fingerprint=model.config_fingerprint
        )
        model, state = nn_model.adam_step(model, grads, state, lr)
        assert abs(model.layers[0][0][0, 0] - expected[t]) < 1e-10

def test_adam_does_not_mutate_inputs(toy_config):
    model = nn_model.init_autoencoder(toy_config)
    snapshot = model.copy()
    grads = nn_model.backward(model, np.array([[0.2, 0.9]]))
    state = nn_model.AdamState.fresh(model)
    nn_model.adam_step(model, grads, state, 0.1)
    assert model.bit_equal(snapshot)
    assert state.step_count == 0
    assert not state.m.flatten().any()

def test_adam_halves_the_loss_of_the_default_architecture():
    model = nn_model.init_autoencoder(AutoencoderConfig(input_dim=115))
    batch = np.random.default_rng(5).uniform(size=(64, 115))
    state = nn_model.AdamState.fresh(model)
    initial, _ = nn_model.loss_and_gradients(model, batch)
    for _ in range(200):
        _, grads = nn_model.loss_and_gradients(model, batch)
        model, state = nn_model.adam_step(model, grads, state, 1e-3)
    final, _ = nn_model.loss_and_gradients(model, batch)
    assert final <= 0.5 * initial

def test_sgd_and_momentum_steps():
    model = scalar_model(1.0)
    grads = ModelParams(layers=[(np.array([[0.5]]), np.array([1.0]))], config_fingerprint=b"\x00" * 8)

    stepped = nn_model.sgd_step(model, grads, 0.1)
    assert stepped.layers[0][0][0, 0] == pytest.approx(0.95)
    assert stepped.layers[0][1][0] == pytest.approx(-0.1)

    velocity = model.zeros_like()
    first, velocity = nn_model.momentum_step(model, grads, velocity, 0.1)
    second, velocity = nn_model.momentum_step(first, grads, velocity, 0.1)
    # u1 = g, u2 = 0.9 g + g
    assert velocity.layers[0][0][0, 0] == pytest.approx(0.95)
    assert second.layers[0][0][0, 0] == pytest.approx(1.0 - 0.1 * 0.5 - 0.1 * 0.95)

def test_zero_lr_keeps_parameters(toy_config):
    model = nn_model.init_autoencoder(toy_config)
    grads = nn_model.backward(model, np.array([[0.1, 0.7], [0.4, 0.3]]))
    updated, _ = nn_model.adam_step(model, grads, nn_model.AdamState.fresh(model), 0.0)
    assert updated.bit_equal(model)
    assert nn_model.sgd_step(model, grads, 0.0).bit_equal(model)
    with pytest.raises(ValueError):
        nn_model.adam_step(model, grads, nn_model.AdamState.fresh(model), -1.0)

def test_non_finite_input_diverges(toy_config):
    model = nn_model.init_autoencoder(toy_config)
    with pytest.raises(DivergenceError):
        nn_model.loss_and_gradients(model, np.array([[np.inf, 0.0]]))

    grads = model.zeros_like()
    grads.layers[0][0][0, 0] = np.inf
    with pytest.raises(DivergenceError):
        nn_model.sgd_step(model, grads, 1.0)

def test_cosine_lr_endpoints():
    schedule = LrSchedule(eta_max=1e-2, eta_min=1e-4, total_rounds=10)
    assert nn_model.cosine_lr(schedule, 0) == 1e-2
    assert nn_model.cosine_lr(schedule, 9) == 1e-4
    rates = [nn_model.cosine_lr(schedule, t) for t in range(10)]
    assert all(a >= b for a, b in zip(rates, rates[1:]))

    midpoint = LrSchedule(eta_max=1.0, eta_min=0.0, total_rounds=3)
    assert nn_model.cosine_lr(midpoint, 1) == pytest.approx(0.5)

def test_cosine_lr_single_round():
    schedule = LrSchedule(eta_max=3e-3, eta_min=1e-5, total_rounds=1)
    assert nn_model.cosine_lr(schedule, 0) == 3e-3

def test_cosine_lr_bounds():
    schedule = LrSchedule(total_rounds=4)
    with pytest.raises(ValueError):
        nn_model.cosine_lr(schedule, 4)
    with pytest.raises(ValueError):
        nn_model.cosine_lr(schedule, -1)
    with pytest.raises(ConfigError):
        LrSchedule(total_rounds=0)
    with pytest.raises(ConfigError):
        LrSchedule(eta_max=1e-4, eta_min=1e-3)
