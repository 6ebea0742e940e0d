"""Network stack: shape contracts, training steps, serialization, grad checks."""

import numpy as np
import pytest

from repadvise.nn import (
    Activation,
    Adam,
    Conv2d,
    Dense,
    LayerError,
    MaxPool2d,
    Network,
    SGD,
    TrainingError,
    grad_check,
    train_step,
)


def test_zero_weight_dense_maps_to_zero():
    layer = Dense(3, 2, bias=False, rng=np.random.default_rng(0))
    layer.weight.data[:] = 0.0
    net = Network([layer])
    out = net.forward(np.array([[1.0, 1.0, 1.0]]))
    np.testing.assert_allclose(out.data, [[0.0, 0.0]])


def test_dense_sigmoid_closed_form():
    layer = Dense(1, 1, bias=True, rng=np.random.default_rng(0))
    layer.weight.data[:] = 2.0
    layer.bias.data[:] = 1.0
    net = Network([layer, Activation("sigmoid")])
    out = net.forward(np.array([[0.0]]))
    assert out.data[0, 0] == pytest.approx(1.0 / (1.0 + np.exp(-1.0)), abs=1e-4)


def test_conv_pool_output_shape():
    # 6x6 input, valid 3x3 conv -> 4x4, then 2x2 pool -> 2x2 over 3 channels
    rng = np.random.default_rng(1)
    net = Network([Conv2d(1, 3, rng=rng), MaxPool2d(2)])
    out = net.forward(rng.normal(size=(5, 1, 6, 6)))
    assert out.shape == (5, 3, 2, 2)


def test_shape_mismatch_names_layer():
    net = Network([Dense(3, 2, rng=np.random.default_rng(0)), Activation("relu")])
    with pytest.raises(LayerError, match=r"layer 0 \(dense\)"):
        net.forward(np.ones((1, 4)))


def test_backward_before_forward_raises():
    net = Network([Dense(2, 1, rng=np.random.default_rng(0))])
    with pytest.raises(RuntimeError, match="before forward"):
        net.backward(np.ones((1, 1)))


def test_parameter_count_matches_declared():
    net = Network(
        [
            Conv2d(1, 3, rng=np.random.default_rng(0)),
            MaxPool2d(2),
            Dense(12, 1, rng=np.random.default_rng(0)),
            Activation("sigmoid"),
        ]
    )
    # conv: 3*1*3*3 weights + 3 biases; dense: 12 weights + 1 bias
    assert net.parameter_count() == 27 + 3 + 12 + 1


def test_sgd_step_on_quadratic():
    # mse of (w*1 - 0)^2 from w=1, lr=0.1: grad 2w -> w = 0.8
    layer = Dense(1, 1, bias=False, rng=np.random.default_rng(0))
    layer.weight.data[:] = 1.0
    net = Network([layer])
    opt = SGD(net.parameters(), lr=0.1)
    loss = train_step(net, opt, (np.array([[1.0]]), np.array([[0.0]])), loss="mse")
    assert loss == pytest.approx(1.0)
    assert layer.weight.data[0, 0] == pytest.approx(0.8)


def test_perfect_predictor_keeps_parameters():
    layer = Dense(1, 1, bias=False, rng=np.random.default_rng(0))
    layer.weight.data[:] = 2.0
    net = Network([layer])
    opt = SGD(net.parameters(), lr=0.5)
    x = np.array([[1.0], [2.0]])
    loss = train_step(net, opt, (x, 2.0 * x), loss="mse")
    assert loss == 0.0
    assert layer.weight.data[0, 0] == pytest.approx(2.0)


def test_adam_recovers_linear_regression():
    # oracle: exact least squares on y = 3x + 1 gives (3, 1)
    rng = np.random.default_rng(7)
    x = rng.uniform(-1, 1, size=(64, 1))
    y = 3.0 * x + 1.0
    design = np.hstack([x, np.ones_like(x)])
    coef, *_ = np.linalg.lstsq(design, y, rcond=None)
    np.testing.assert_allclose(coef.ravel(), [3.0, 1.0], atol=1e-12)

    net = Network([Dense(1, 1, bias=True, rng=rng)])
    opt = Adam(net.parameters(), lr=0.1)
    for _ in range(200):
        train_step(net, opt, (x, y), loss="mse")
    w = net.layers[0].weight.data[0, 0]
    b = net.layers[0].bias.data[0]
    assert w == pytest.approx(3.0, abs=1e-2)
    assert b == pytest.approx(1.0, abs=1e-2)


def test_non_finite_loss_carries_step_index():
    layer = Dense(1, 1, bias=False, rng=np.random.default_rng(0))
    layer.weight.data[:] = 1e200
    net = Network([layer])
    opt = SGD(net.parameters(), lr=0.1)
    with pytest.raises(TrainingError) as exc:
        train_step(net, opt, (np.array([[1e200]]), np.array([[0.0]])), loss="mse")
    assert exc.value.step == 0


def test_adam_moment_buffers_shape_match():
    net = Network([Dense(3, 2, rng=np.random.default_rng(0))])
    opt = Adam(net.parameters(), lr=0.01)
    for buf, p in zip(opt.m, net.parameters()):
        assert buf.shape == p.data.shape


@pytest.mark.parametrize("seed", range(20))
def test_grad_check_dense_sigmoid(seed):
    rng = np.random.default_rng(seed)
    net = Network([Dense(4, 3, rng=rng), Activation("sigmoid"), Dense(3, 1, rng=rng)])
    assert grad_check(net, rng.normal(size=(2, 4))) <= 1e-4


@pytest.mark.parametrize("seed", range(20))
def test_grad_check_conv_pool_dense(seed):
    rng = np.random.default_rng(seed)
    net = Network(
        [
            Conv2d(1, 3, rng=rng),
            MaxPool2d(2),
            Dense(12, 1, rng=rng),
            Activation("sigmoid"),
        ]
    )
    assert grad_check(net, rng.normal(size=(2, 1, 6, 6))) <= 1e-4


def test_grad_check_zero_parameter_net():
    net = Network([Activation("relu"), MaxPool2d(2)])
    assert grad_check(net, np.random.default_rng(0).normal(size=(1, 1, 4, 4))) == 0.0


def test_json_round_trip_bit_exact():
    rng = np.random.default_rng(3)
    net = Network(
        [
            Conv2d(1, 3, rng=rng),
            MaxPool2d(2),
            Dense(12, 4, rng=rng),
            Activation("tanh"),
            Dense(4, 1, rng=rng),
            Activation("sigmoid"),
        ]
    )
    restored = Network.from_json(net.to_json())
    np.testing.assert_array_equal(net.state_vector(), restored.state_vector())
    x = rng.normal(size=(3, 1, 6, 6))
    np.testing.assert_array_equal(net.forward(x).data, restored.forward(x).data)


def test_json_version_guard():
    net = Network([Dense(1, 1, rng=np.random.default_rng(0))])
    doc = net.to_json().replace('"version": 1', '"version": 99')
    with pytest.raises(ValueError, match="version"):
        Network.from_json(doc)


def test_copy_is_deep():
    net = Network([Dense(2, 2, rng=np.random.default_rng(0))])
    clone = net.copy()
    clone.layers[0].weight.data[:] = 0.0
    assert not np.allclose(net.layers[0].weight.data, 0.0)
