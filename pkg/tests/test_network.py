import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from efficientgrad.network import (
    BuildError,
    CheckpointError,
    LayerSpec,
    NetworkConfig,
    NumericError,
    StateError,
    backward_error,
    backward_pass,
    build_network,
    forward,
    load_checkpoint,
    save_checkpoint,
    sgd_step,
    state_checksum,
    weight_grad,
)
from efficientgrad.tensor import DimensionError
from helpers import analytic_grads, max_rel_err, numeric_grads


def linear_net(sizes, loss="SoftmaxCrossEntropy", dtype="float64", **loss_kw):
    layers = []
    for h in sizes[1:-1]:
        layers += [{"kind": "Linear", "out_features": h}, {"kind": "ReLU"}]
    layers += [{"kind": "Linear", "out_features": sizes[-1]}, {"kind": loss, **loss_kw}]
    return {"input_shape": [sizes[0]], "layers": layers, "dtype": dtype}


def test_linear_param_shapes():
    net = build_network(linear_net([4, 4]), 0)
    assert net.params[0]["weight"].shape == (4, 4)
    assert net.params[0]["bias"].shape == (4,)


def test_same_seed_same_params_different_seed_differs():
    a = build_network(linear_net([5, 3, 2]), 11)
    b = build_network(linear_net([5, 3, 2]), 11)
    c = build_network(linear_net([5, 3, 2]), 12)
    assert state_checksum(a) == state_checksum(b)
    assert any(not np.array_equal(pa["weight"], pc["weight"]) for pa, pc in zip(a.params, c.params) if pa)


def test_build_error_names_layer():
    cfg = {"input_shape": [1, 4, 4], "layers": [
        {"kind": "Conv2d", "out_channels": 2, "kernel_size": 3, "in_channels": 3},
        {"kind": "Linear", "out_features": 2}, {"kind": "SoftmaxCrossEntropy"}]}
    with pytest.raises(BuildError, match="layer 0"):
        build_network(cfg)


def test_loss_layer_must_be_last():
    with pytest.raises(BuildError):
        build_network({"input_shape": [3], "layers": [{"kind": "SoftmaxCrossEntropy"}, {"kind": "Linear", "out_features": 2}]})


def test_unknown_layer_key_rejected():
    with pytest.raises(BuildError, match="unknown layer keys"):
        LayerSpec.from_dict({"kind": "Linear", "out_features": 2, "widht": 3})


def test_config_round_trip():
    cfg = NetworkConfig.from_dict(linear_net([3, 4, 2]))
    assert NetworkConfig.from_dict(cfg.to_dict()).to_dict() == cfg.to_dict()


def test_uniform_softmax_loss_is_ln2():
    net = build_network(linear_net([2, 2]), 0)
    for p in net.params[0].values():
        p[...] = 0
    loss, _, prob = forward(net, np.zeros((1, 2)), [0])
    assert loss == pytest.approx(math.log(2))
    np.testing.assert_allclose(prob, [[0.5, 0.5]])


def test_mse_loss_zero_when_output_matches():
    net = build_network(linear_net([2, 2], loss="MSEOutput"), 0)
    net.params[0]["weight"][...] = np.eye(2)
    net.params[0]["bias"][...] = 0
    x = np.array([[0.25, -1.0]])
    loss, _, _ = forward(net, x, x.copy())
    assert loss == 0.0


def test_non_finite_loss_names_layer():
    net = build_network(linear_net([2, 3, 2]), 0)
    net.params[2]["weight"][0, 0] = np.inf
    with pytest.raises(NumericError) as info:
        forward(net, np.ones((1, 2)), [0])
    assert info.value.layer_index is not None


def test_relu_backward_masks_dead_units():
    net = build_network({"input_shape": [2], "layers": [{"kind": "ReLU"}, {"kind": "MSEOutput"}], "dtype": "float64"}, 0)
    _, trace, _ = forward(net, np.array([[-1.0, 2.0]]), np.zeros((1, 2)))
    np.testing.assert_array_equal(backward_error(net, 0, np.array([[5.0, 5.0]]), trace), [[0.0, 5.0]])


def test_backward_without_trace_is_state_error():
    net = build_network(linear_net([2, 2]), 0)
    with pytest.raises(StateError):
        backward_error(net, 0, np.ones((1, 2)), None)


def test_linear_weight_grad_outer_product():
    net = build_network(linear_net([2, 1], loss="MSEOutput"), 0)
    _, trace, _ = forward(net, np.array([[1.0, 0.0]]), np.zeros((1, 1)))
    g = weight_grad(net, 0, np.array([[2.0]]), trace)
    np.testing.assert_array_equal(g["weight"], [[2.0, 0.0]])
    np.testing.assert_array_equal(g["bias"], [2.0])


@pytest.mark.parametrize("kind", ["conv", "mlp"])
def test_zero_delta_gives_zero_everywhere(kind):
    cfg = conv_cfg(2, 6, [("conv", 3), ("bn",), ("relu",), ("pool",)], 3) if kind == "conv" else linear_net([4, 5, 3])
    net = build_network(cfg, 0)
    x = np.random.default_rng(0).standard_normal((3, *net.input_shape))
    _, trace, _ = forward(net, x, [0, 1, 2])
    for i in range(len(net.layers) - 1):
        d = np.zeros((3, *net.shapes[i]))
        assert not backward_error(net, i, d, trace).any()
        for g in weight_grad(net, i, d, trace).values():
            assert not g.any()


def _one_param_net(w0):
    net = build_network(linear_net([1, 1], loss="MSEOutput"), 0)
    net.params[0]["weight"][...] = w0
    return net


def _step(net, g, lr, mu):
    sgd_step(net, [{"weight": np.array([[g]]), "bias": np.zeros(1)}, {}], lr, mu)


def test_plain_sgd_step():
    net = _one_param_net(1.0)
    _step(net, 1.0, 0.1, 0.0)
    assert net.params[0]["weight"][0, 0] == pytest.approx(0.9)


def test_momentum_two_steps():
    net = _one_param_net(0.0)
    _step(net, 1.0, 1.0, 0.9)
    _step(net, 1.0, 1.0, 0.9)
    assert net.params[0]["weight"][0, 0] == pytest.approx(-2.9)


def test_momentum_three_steps_against_recurrence():
    net = _one_param_net(0.5)
    w, v = 0.5, 0.0
    for g in (0.3, -1.2, 0.7):
        _step(net, g, 0.05, 0.8)
        v = 0.8 * v + g
        w = w - 0.05 * v
        assert net.velocity[0]["weight"][0, 0] == pytest.approx(v)
        assert net.params[0]["weight"][0, 0] == pytest.approx(w)


def test_zero_lr_leaves_weights():
    net = _one_param_net(1.25)
    _step(net, 3.0, 0.0, 0.9)
    assert net.params[0]["weight"][0, 0] == 1.25


def test_sgd_shape_mismatch():
    net = _one_param_net(0.0)
    with pytest.raises(DimensionError):
        sgd_step(net, [{"weight": np.zeros((2, 1)), "bias": np.zeros(1)}, {}], 0.1, 0.0)


def conv_cfg(cin, size, blocks, classes, dtype="float64", head_bn=False):
    layers = []
    for b in blocks:
        if b[0] == "conv":
            layers.append({"kind": "Conv2d", "out_channels": b[1], "kernel_size": b[2] if len(b) > 2 else 3,
                           "pad": b[3] if len(b) > 3 else 1, "stride": b[4] if len(b) > 4 else 1})
        elif b[0] == "bn":
            layers.append({"kind": "BatchNorm"})
        elif b[0] == "relu":
            layers.append({"kind": "ReLU"})
        elif b[0] == "pool":
            layers.append({"kind": "MaxPool2d", "kernel_size": 2})
        elif b[0] == "fc":
            layers.append({"kind": "Linear", "out_features": b[1]})
    layers.append({"kind": "Linear", "out_features": classes})
    if head_bn:
        layers.append({"kind": "BatchNorm"})
    layers.append({"kind": "SoftmaxCrossEntropy"})
    return {"input_shape": [cin, size, size], "layers": layers, "dtype": dtype}


GRADCHECK_CASES = [
    linear_net([3, 2]),
    linear_net([4, 5, 3]),
    linear_net([6, 4, 4, 2]),
    linear_net([3, 4, 2], loss="MSEOutput"),
    linear_net([3, 4, 2], loss="MSEOutput", activation="sigmoid"),
    {"input_shape": [5], "layers": [{"kind": "Linear", "out_features": 4}, {"kind": "BatchNorm"}, {"kind": "ReLU"},
                                     {"kind": "Linear", "out_features": 3}, {"kind": "SoftmaxCrossEntropy"}], "dtype": "float64"},
    {"input_shape": [4], "layers": [{"kind": "Linear", "out_features": 3, "bias": False}, {"kind": "BatchNorm"},
                                     {"kind": "Linear", "out_features": 2}, {"kind": "SoftmaxCrossEntropy"}], "dtype": "float64"},
    conv_cfg(1, 4, [("conv", 2)], 2),
    conv_cfg(1, 5, [("conv", 2, 3, 0)], 3),
    conv_cfg(2, 4, [("conv", 3, 1, 0)], 2),
    conv_cfg(1, 6, [("conv", 2, 2, 0, 2)], 2),
    conv_cfg(2, 5, [("conv", 2, 3, 1, 2)], 2),
    conv_cfg(1, 6, [("conv", 2), ("bn",), ("relu",)], 2),
    conv_cfg(1, 6, [("conv", 2), ("bn",), ("relu",), ("pool",)], 3),
    conv_cfg(2, 6, [("conv", 3), ("relu",), ("pool",)], 2),
    conv_cfg(1, 8, [("conv", 2), ("bn",), ("relu",), ("pool",), ("conv", 3), ("bn",), ("relu",), ("pool",)], 2),
    conv_cfg(1, 4, [("conv", 2), ("conv", 2)], 2),
    conv_cfg(3, 4, [("conv", 2, 2, 0)], 2),
    conv_cfg(1, 6, [("conv", 2), ("bn",), ("relu",), ("fc", 4), ("relu",)], 2),
    conv_cfg(1, 5, [("conv", 1, 5, 2)], 2),
    conv_cfg(2, 6, [("conv", 2, 3, 0), ("bn",), ("conv", 2, 3, 0)], 3),
    conv_cfg(1, 4, [("conv", 2)], 2, head_bn=True),
    conv_cfg(1, 7, [("conv", 2, 3, 1, 2), ("relu",)], 2),
    conv_cfg(2, 4, [("pool",), ("conv", 2)], 2),
]


@pytest.mark.parametrize("cfg", GRADCHECK_CASES, ids=[f"net{i}" for i in range(len(GRADCHECK_CASES))])
def test_exact_gradients_match_finite_differences(cfg):
    assert len(GRADCHECK_CASES) >= 20
    net = build_network(cfg, 3)
    rng = np.random.default_rng(4)
    x = rng.standard_normal((4, *net.input_shape))
    n_out = net.shapes[-1][0]
    y = rng.random((4, n_out)) if net.layers[-1].kind == "MSEOutput" else np.arange(4) % n_out
    assert max_rel_err(analytic_grads(net, x, y), numeric_grads(net, x, y)) <= 1e-5


def test_batchnorm_eval_uses_running_stats():
    cfg = {"input_shape": [3], "layers": [{"kind": "BatchNorm", "momentum": 1.0}, {"kind": "MSEOutput"}], "dtype": "float64"}
    net = build_network(cfg, 0)
    x = np.random.default_rng(0).standard_normal((8, 3)) * 3 + 1
    forward(net, x, training=True)
    np.testing.assert_allclose(net.buffers[0]["running_mean"], x.mean(0))
    np.testing.assert_allclose(net.buffers[0]["running_var"], x.var(0, ddof=1))
    _, _, out = forward(net, x, training=False)
    np.testing.assert_allclose(out, (x - x.mean(0)) / np.sqrt(x.var(0, ddof=1) + 1e-5))


def test_backward_pass_prunes_all_but_top_weighted_layer():
    net = build_network(linear_net([3, 4, 4, 2]), 0)
    _, trace, _ = forward(net, np.ones((2, 3)), [0, 1])
    seen = []

    def prune(i, d):
        seen.append(i)
        return d, None

    backward_pass(net, trace, prune=prune)
    assert sorted(seen) == [0, 2]


def _ckpt_net():
    return build_network(conv_cfg(1, 6, [("conv", 2), ("bn",), ("relu",), ("pool",)], 3, dtype="float32"), 9)


def test_checkpoint_round_trip(tmp_path):
    net = _ckpt_net()
    forward(net, np.random.default_rng(0).standard_normal((4, 1, 6, 6)), training=True)
    save_checkpoint(net, tmp_path / "a.efgd")
    back = load_checkpoint(tmp_path / "a.efgd")
    assert state_checksum(back, include_velocity=False) == state_checksum(net, include_velocity=False)
    save_checkpoint(back, tmp_path / "b.efgd")
    assert (tmp_path / "a.efgd").read_bytes() == (tmp_path / "b.efgd").read_bytes()


@pytest.mark.parametrize("corrupt,match", [
    (lambda b: b"XXXX" + b[4:], "magic"),
    (lambda b: b[:4] + (9).to_bytes(4, "little") + b[8:], "version"),
    (lambda b: b[:-3], "truncated"),
    (lambda b: b + b"\0", "trailing"),
])
def test_corrupt_checkpoints_rejected(tmp_path, corrupt, match):
    save_checkpoint(_ckpt_net(), tmp_path / "a.efgd")
    p = tmp_path / "bad.efgd"
    p.write_bytes(corrupt((tmp_path / "a.efgd").read_bytes()))
    with pytest.raises(CheckpointError, match=match):
        load_checkpoint(p)


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 6), st.integers(1, 6), st.integers(1, 5), st.integers(0, 2**31 - 1))
def test_softmax_error_rows_sum_to_zero(n_in, n_out, batch, seed):
    net = build_network(linear_net([n_in, max(n_out, 2)]), seed)
    rng = np.random.default_rng(seed)
    _, trace, prob = forward(net, rng.standard_normal((batch, n_in)), rng.integers(0, max(n_out, 2), batch))
    np.testing.assert_allclose(prob.sum(1), 1.0)
    deltas, _ = backward_pass(net, trace)
    np.testing.assert_allclose(deltas[0].sum(1), 0.0, atol=1e-12)
