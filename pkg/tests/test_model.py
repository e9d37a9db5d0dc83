from concurrent.futures import ThreadPoolExecutor

import numpy as np
import pytest

from cxrkit.dataset import class_rng
from cxrkit.errors import ShapeMismatchError, UnknownLayerError
from cxrkit.layers import Conv2D, Dense, InstanceNorm, MaxPool2D, ReLU, ResidualBlock
from cxrkit.metrics import one_hot
from cxrkit.network import NetworkSpec, ResidualCNN, build_baseline, to_network_input


def _small_net(num_classes=3, size=8, seed=0):
    return build_baseline(num_classes, input_dims=(3, size, size), seed=seed, widths=(2, 3), head_units=5)


def _batch(n=8, size=8, seed=1):
    return class_rng(seed).uniform(0.0, 1.0, size=(n, 3, size, size))


def test_baseline_network_shapes():
    spec = NetworkSpec(num_classes=4)
    assert spec.input_dims == (3, 331, 331)
    assert [b.out_channels for b in spec.blocks] == [19, 51, 115, 243, 499]
    assert spec.feature_channels == 499
    assert spec.feature_hw == (10, 10)
    assert NetworkSpec.from_dict(spec.to_dict()) == spec


def test_network_spec_validation():
    with pytest.raises(ValueError):
        NetworkSpec(num_classes=5)
    with pytest.raises(ValueError):
        NetworkSpec(num_classes=2, input_dims=(3, 8, 8), widths=(2, 2, 2, 2))
    with pytest.raises(ValueError):
        NetworkSpec(num_classes=2, class_names=("only one",))


@pytest.mark.parametrize("num_classes", [2, 3, 4])
def test_forward_gives_probability_rows(num_classes):
    net = _small_net(num_classes)
    probs = net.forward(_batch())
    assert probs.shape == (8, num_classes)
    np.testing.assert_allclose(probs.sum(axis=1), 1.0)
    assert np.all(probs >= 0)


def test_zero_weight_head_gives_uniform_probabilities():
    net = _small_net(num_classes=4)
    for name in ("head.dense2.weight", "head.dense2.bias"):
        tensor = net.parameters()[name]
        tensor.data = np.zeros_like(tensor.data)
    np.testing.assert_allclose(net.forward(_batch()), 0.25)


def test_features_shape_and_concat_channels():
    net = _small_net()
    activations, _ = net.features(_batch(n=2))
    assert activations.shape == (2, 8, 2, 2)
    with pytest.raises(ShapeMismatchError):
        net.forward(np.zeros((2, 1, 8, 8)))


def test_residual_block_keeps_input_channels():
    block = ResidualBlock("block1", 3, 4, class_rng(0))
    x = _batch(n=2)
    out, _ = block.forward(x)
    assert out.shape == (2, 7, 4, 4)
    assert block.out_channels == 7


def test_instance_norm_statistics():
    x = class_rng(2).normal(5.0, 3.0, size=(2, 3, 6, 6))
    out, _ = InstanceNorm("norm").forward(x)
    np.testing.assert_allclose(out.mean(axis=(2, 3)), 0.0, atol=1e-12)
    np.testing.assert_allclose(out.var(axis=(2, 3)), 1.0, atol=1e-4)


def test_max_pool_floors_odd_sizes():
    x = np.arange(25, dtype=float).reshape(1, 1, 5, 5)
    out, cache = MaxPool2D("pool").forward(x)
    assert out[0, 0].tolist() == [[6.0, 8.0], [16.0, 18.0]]
    dx = MaxPool2D("pool").backward(np.ones((1, 1, 2, 2)), cache)
    assert dx.sum() == 4.0 and dx[0, 0, 4].sum() == 0.0
    with pytest.raises(ShapeMismatchError):
        MaxPool2D("pool").forward(np.zeros((1, 1, 1, 4)))


def test_conv_matches_direct_correlation():
    conv = Conv2D("c", 2, 3, class_rng(4))
    x = class_rng(5).normal(size=(1, 2, 4, 4))
    out, _ = conv.forward(x)
    padded = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    expected = np.zeros((3, 4, 4))
    for o in range(3):
        for i in range(4):
            for j in range(4):
                expected[o, i, j] = np.sum(padded[0, :, i:i + 3, j:j + 3] * conv.weight.data[o]) + conv.bias.data[o]
    np.testing.assert_allclose(out[0], expected)


def test_dense_rejects_wrong_width():
    with pytest.raises(ShapeMismatchError):
        Dense("d", 4, 2, class_rng(0)).forward(np.zeros((1, 3)))


def _numeric_grad(net, batch, targets, weights, name, index, h=1e-5):
    tensor = net.parameters()[name]
    original = tensor.data[index]
    tensor.data[index] = original + h
    plus = net.loss(batch, targets, weights)
    tensor.data[index] = original - h
    minus = net.loss(batch, targets, weights)
    tensor.data[index] = original
    return (plus - minus) / (2 * h)


def _with_random_biases(net, seed):
    # zero biases put dead-ReLU outputs and all-zero pool tiles exactly on a kink
    rng = class_rng(seed, 7)
    for name, tensor in net.parameters().items():
        if name.endswith(".bias"):
            tensor.data = rng.normal(0.0, 0.1, size=tensor.shape)
    return net


@pytest.mark.parametrize("num_classes", [2, 3, 4])
def test_backward_matches_finite_differences(num_classes):
    net = _with_random_biases(_small_net(num_classes, seed=num_classes), num_classes)
    batch = _batch(seed=10 + num_classes)
    labels = np.arange(8) % num_classes
    targets = one_hot(labels, num_classes)
    weights = np.linspace(0.5, 2.0, num_classes)
    _, grads = net.backward(batch, targets, weights)
    assert set(grads) == set(net.parameters())

    rng = class_rng(99, num_classes)
    for name, tensor in net.parameters().items():
        for _ in range(3):
            index = tuple(int(rng.integers(0, dim)) for dim in tensor.shape)
            numeric = _numeric_grad(net, batch, targets, weights, name, index)
            np.testing.assert_allclose(grads[name][index], numeric, rtol=1e-4, atol=1e-7)


def test_relu_and_pool_route_ties_like_forward():
    relu = ReLU("r")
    out, cache = relu.forward(np.array([[-1.0, 0.0, 2.0]]))
    np.testing.assert_array_equal(out, [[0.0, 0.0, 2.0]])
    np.testing.assert_array_equal(relu.backward(np.ones((1, 3)), cache), [[0.0, 0.0, 1.0]])

    pool = MaxPool2D("p")
    out, cache = pool.forward(np.zeros((1, 1, 2, 2)))
    assert out[0, 0, 0, 0] == 0.0
    dx = pool.backward(np.ones((1, 1, 1, 1)), cache)
    np.testing.assert_array_equal(dx[0, 0], [[1.0, 0.0], [0.0, 0.0]])


def test_freeze_blocks_leaves_only_head_gradients():
    net = _small_net()
    net.freeze("block*")
    assert net.frozen_layers == ["block1.conv1", "block1.conv2", "block2.conv1", "block2.conv2"]
    _, grads = net.backward(_batch(), np.arange(8) % 3)
    assert set(grads) == {"head.dense1.weight", "head.dense1.bias", "head.dense2.weight", "head.dense2.bias"}
    assert net.parameters()["block1.conv1.weight"].grad is None
    net.unfreeze("block1.*")
    assert net.frozen_layers == ["block2.conv1", "block2.conv2"]
    with pytest.raises(UnknownLayerError):
        net.freeze("block9.conv1")


def test_layer_ids():
    assert _small_net().layer_ids() == ["block1.conv1", "block1.conv2", "block2.conv1", "block2.conv2",
                                        "head.dense1", "head.dense2"]


def test_same_seed_same_initialization():
    a, b, c = _small_net(seed=1), _small_net(seed=1), _small_net(seed=2)
    for name, value in a.state_dict().items():
        assert np.array_equal(value, b.state_dict()[name])
    assert not np.array_equal(a.state_dict()["head.dense2.weight"], c.state_dict()["head.dense2.weight"])


def test_state_dict_round_trip():
    a, b = _small_net(seed=1), _small_net(seed=2)
    b.load_state_dict(a.state_dict())
    batch = _batch()
    np.testing.assert_array_equal(a.forward(batch), b.forward(batch))
    state = a.state_dict()
    state["head.dense1.bias"] = np.zeros(7)
    with pytest.raises(ShapeMismatchError):
        b.load_state_dict(state)


def test_to_network_input_scales_and_replicates():
    x = to_network_input(np.full((2, 4, 4), 255.0))
    assert x.shape == (2, 3, 4, 4)
    np.testing.assert_allclose(x, 1.0)


def test_predict_proba_is_thread_safe():
    net = _small_net()
    images = class_rng(3).uniform(0, 255, size=(6, 8, 8))
    expected = net.predict_proba(images, batch_size=4)
    with ThreadPoolExecutor(max_workers=4) as executor:
        results = list(executor.map(lambda _: net.predict_proba(images, batch_size=4), range(8)))
    for result in results:
        np.testing.assert_array_equal(result, expected)


def test_network_built_directly_from_network_spec():
    spec = NetworkSpec(num_classes=2, input_dims=(3, 8, 8), widths=(2,), head_units=3, class_names=("a", "b"))
    net = ResidualCNN(spec)
    assert net.predict_proba(np.zeros((0, 8, 8))).shape == (0, 2)
