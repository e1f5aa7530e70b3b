from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rtn.nn.functional import (
    col2im,
    conv_output_size,
    cross_entropy_loss,
    im2col,
    mse_loss,
    reparam_backward,
    ste_backward,
)
from rtn.nn.gradcheck import check_network, check_random_networks, random_small_network
from rtn.nn.layers import ActivationQuant, BatchNorm, Conv2D, Dense, ReLU
from rtn.nn.network import (
    GradRecord,
    LayerKind,
    LayerSpec,
    Network,
    NetworkSpec,
    TrainConfig,
    calibrate,
    forward_backward,
    sgd_step,
)
from rtn.nn.toy import build_toy_network, make_xor_xnor, run_toy_experiment, write_curve_csv
from rtn.quantize import GAMMA_FLOOR


# straight-through and reparameterization backward

def test_ste_examples():
    assert ste_backward(np.array([0.3]), np.array([2.0])).tolist() == [2.0]
    assert ste_backward(np.array([1.5]), np.array([2.0])).tolist() == [0.0]
    assert ste_backward(np.array([-1.0]), np.array([5.0])).tolist() == [5.0]


def test_ste_shape_mismatch():
    with pytest.raises(ValueError):
        ste_backward(np.zeros(2), np.zeros(3))


def test_reparam_backward_examples():
    dg, db, _ = reparam_backward(np.array([1.0, -1.0]), np.array([0.5, 0.5]))
    assert (dg, db) == (0.0, 1.0)
    dg, _, _ = reparam_backward(np.zeros(3), np.array([1.0, -2.0, 3.0]))
    assert dg == 0.0
    _, _, da = reparam_backward(np.array([1.0, 0.0]), np.array([1.0, 1.0]), gamma=2.0)
    assert da.tolist() == [2.0, 2.0]
    with pytest.raises(ValueError):
        reparam_backward(np.zeros(2), np.zeros(1))


@given(st.lists(st.sampled_from([-1.0, 0.0, 1.0]), min_size=1, max_size=20), st.integers(0, 1000))
def test_reparam_backward_matches_finite_differences(t, seed):
    t = np.array(t)
    g = np.random.default_rng(seed).normal(size=t.shape)
    gamma, beta, h = 0.8, 0.3, 1e-6

    def loss(gm, bt):
        return float(np.sum((gm * t + bt) * g))

    dg, db, _ = reparam_backward(t, g, gamma)
    assert dg == pytest.approx((loss(gamma + h, beta) - loss(gamma - h, beta)) / (2 * h), abs=1e-6)
    assert db == pytest.approx((loss(gamma, beta + h) - loss(gamma, beta - h)) / (2 * h), abs=1e-6)


# im2col and losses

def test_conv_output_size():
    assert conv_output_size(8, 3, 1, 1) == 8
    assert conv_output_size(8, 3, 2, 1) == 4
    with pytest.raises(ValueError):
        conv_output_size(2, 5, 1, 0)


def test_col2im_is_adjoint_of_im2col():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(2, 3, 6, 5))
    for stride, pad in [(1, 0), (1, 1), (2, 1)]:
        cols = im2col(x, 3, 3, stride, pad)
        y = rng.normal(size=cols.shape)
        lhs = np.sum(cols * y)
        rhs = np.sum(x * col2im(y, x.shape, 3, 3, stride, pad))
        assert lhs == pytest.approx(rhs)


def test_mse_and_cross_entropy_gradients():
    rng = np.random.default_rng(1)
    pred = rng.normal(size=(4, 3))
    target = rng.normal(size=(4, 3))
    loss, g = mse_loss(pred, target)
    assert loss == pytest.approx(np.mean((pred - target) ** 2))
    assert np.allclose(g, 2 * (pred - target) / pred.size)
    labels = np.array([0, 2, 1, 1])
    loss, g = cross_entropy_loss(pred, labels)
    p = np.exp(pred - pred.max(1, keepdims=True))
    p /= p.sum(1, keepdims=True)
    assert loss == pytest.approx(-np.mean(np.log(p[np.arange(4), labels])))
    onehot = np.eye(3)[labels]
    assert np.allclose(g, (p - onehot) / 4)


# finite-difference checks

@pytest.mark.parametrize("conv", [False, True])
def test_gradcheck_random_networks(conv):
    rng = np.random.default_rng(11 if conv else 12)
    checked = 0
    while checked < 8:
        net, x, y, cfg = random_small_network(rng, conv=conv)
        r = check_network(net, x, y, cfg)
        if not r.usable:
            continue
        checked += 1
        assert r.passed, r.errors


def test_gradcheck_covers_all_smooth_parameter_kinds():
    names = set()
    for r in check_random_networks(15, seed=3):
        assert r.passed
        names |= {name for _, name in r.errors}
    assert {"gamma", "beta", "k", "b", "weight", "bias", "k_w", "b_w", "alpha"} <= names


def _act_layer(kind="rta", gamma=1.3, beta=0.2):
    return ActivationQuant(kind, k=1.1, b=-0.1, gamma=gamma, beta=beta)


def test_gamma_linearity_is_exact():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(6, 5))
    g = rng.normal(size=(6, 5))
    base = _act_layer(gamma=0.7)
    base.forward(x, training=True)
    dx = base.backward(g)
    for factor in (2.0, 4.0, 0.5):
        layer = _act_layer(gamma=0.7 * factor)
        layer.forward(x, training=True)
        assert np.array_equal(layer.backward(g), factor * dx)
        assert layer.grads["k"] == factor * base.grads["k"]
    layer = _act_layer(gamma=0.7 * 3.3)
    layer.forward(x, training=True)
    assert np.allclose(layer.backward(g), 3.3 * dx, rtol=1e-15, atol=0)


@settings(max_examples=50)
@given(st.integers(0, 10**6))
def test_saturation_escape(seed):
    rng = np.random.default_rng(seed)
    x = rng.uniform(1.2, 3.0, size=(4, 6)) * rng.choice([-1, 1], size=(4, 6))
    layer = ActivationQuant("rta", k=1.0, b=0.0, gamma=0.9, beta=0.1)
    layer.forward(x, training=True)
    g = rng.normal(size=x.shape)
    dx = layer.backward(g)
    assert np.all(dx == 0.0)
    assert layer.grads["k"] == 0.0 and layer.grads["b"] == 0.0
    assert layer.grads["gamma"] != 0.0 or layer.grads["beta"] != 0.0


def test_saturation_escape_fta_has_no_escape():
    x = np.full((2, 3), 2.0)
    layer = ActivationQuant("fta")
    layer.forward(x, training=True)
    assert np.all(layer.backward(np.ones_like(x)) == 0.0)
    assert "gamma" not in layer.grads


# forward_backward and sgd_step

def test_zero_network_loss_is_target_variance():
    rng = np.random.default_rng(0)
    layer = Dense(3, 3)
    layer.params["weight"][...] = 0.0
    net = Network([layer], input_shape=(3,))
    y = rng.normal(size=(50, 3))
    y -= y.mean()
    loss, grads = forward_backward(net, (np.eye(3)[np.arange(50) % 3], y), TrainConfig())
    assert loss == pytest.approx(np.var(y))
    assert isinstance(grads, GradRecord)


def test_forward_backward_shape_errors():
    net = Network([Dense(2, 2)], input_shape=(2,))
    with pytest.raises(ValueError):
        forward_backward(net, (np.zeros((4, 3)), np.zeros((4, 2))), TrainConfig())
    with pytest.raises(ValueError):
        forward_backward(net, (np.zeros((4, 2)), np.zeros((4, 3))), TrainConfig())


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_non_finite_loss_aborts():
    net = Network([Dense(2, 2)], input_shape=(2,))
    with pytest.raises(FloatingPointError):
        forward_backward(net, (np.full((1, 2), np.inf), np.zeros((1, 2))), TrainConfig())


def test_grad_record_reset_between_steps():
    net = Network([Dense(2, 2), _act_layer(), Dense(2, 1)], input_shape=(2,))
    cfg = TrainConfig()
    batch = (np.ones((3, 2)), np.zeros((3, 1)))
    _, g1 = forward_backward(net, batch, cfg)
    _, g2 = forward_backward(net, batch, cfg)
    for a, b in zip(g1.per_layer, g2.per_layer):
        for k in a:
            assert np.array_equal(a[k], b[k])
    g1.zero()
    assert all(np.all(v == 0) for grads in g1.per_layer for v in grads.values())
    assert len(g2.d_gamma) == 1 and len(g2.d_beta) == 1


def _one_step(layer, grads, **cfg):
    net = Network([layer])
    record = GradRecord([grads])
    sgd_step(net, record, TrainConfig(**cfg))
    return layer


def test_sgd_examples():
    act = _act_layer(gamma=1.0)
    _one_step(act, {"gamma": np.array(0.5)}, quant_param_lr=0.1)
    assert float(act.params["gamma"]) == pytest.approx(0.95)
    act = _act_layer(gamma=1.0)
    _one_step(act, {"gamma": np.array(100.0)}, quant_param_lr=0.1)
    assert float(act.params["gamma"]) == GAMMA_FLOOR
    dense = Dense(1, 1)
    dense.params["weight"][...] = 0.2
    _one_step(dense, {"weight": np.array([[1.0]])}, learning_rate=0.03)
    assert dense.params["weight"][0, 0] == pytest.approx(0.17)


def test_sgd_uses_quant_lr_for_quant_params_and_skips_frozen():
    act = ActivationQuant("rta", k=1.0, b=0.0, frozen={"k"})
    grads = {"k": np.array(1.0), "b": np.array(1.0), "gamma": np.array(0.0), "beta": np.array(1.0)}
    _one_step(act, grads, learning_rate=0.5, quant_param_lr=0.1)
    assert float(act.params["k"]) == 1.0
    assert float(act.params["b"]) == pytest.approx(-0.1)
    assert float(act.params["beta"]) == pytest.approx(-0.1)


def test_train_config_validation_and_decay():
    with pytest.raises(ValueError):
        TrainConfig(learning_rate=0.0)
    with pytest.raises(ValueError):
        TrainConfig(epochs=0)
    with pytest.raises(ValueError):
        TrainConfig(loss="hinge")
    cfg = TrainConfig(learning_rate=1.0, quant_param_lr=0.5, lr_milestones=(2, 4))
    assert cfg.at_epoch(1) is cfg
    assert cfg.at_epoch(2).learning_rate == pytest.approx(0.1)
    assert cfg.at_epoch(5).quant_param_lr == pytest.approx(0.005)


def test_batchnorm_running_stats_and_fold():
    rng = np.random.default_rng(0)
    bn = BatchNorm(3)
    x = rng.normal(2.0, 3.0, size=(200, 3))
    for _ in range(100):
        bn.forward(x, training=True)
    assert np.allclose(bn.running_mean, x.mean(0), atol=1e-3)
    scale, shift = bn.fold()
    assert np.allclose(bn.forward(x, training=False), scale * x + shift)


def test_calibrate_sets_gamma_from_selection_mean():
    net = Network([Dense(2, 4, rng=np.random.default_rng(0)), _act_layer()], input_shape=(2,))
    x = np.random.default_rng(1).normal(size=(64, 2))
    calibrate(net, x)
    a = net.layers[1].pre_activation(net.layers[0].forward(x))
    sel = np.abs(a)[np.abs(a) > 0.5]
    assert net.layers[1].gamma == pytest.approx(sel.mean())


def test_layer_spec_builds_network():
    spec = NetworkSpec((2,), (
        LayerSpec(LayerKind.DENSE, {"in_features": 2, "out_features": 3}),
        LayerSpec(LayerKind.ACTIVATION_QUANT, activation_kind="rta"),
        LayerSpec(LayerKind.WEIGHT_QUANT_DENSE, {"in_features": 3, "out_features": 2}),
    ))
    assert spec.layers[1].quantized and spec.layers[2].quantized and not spec.layers[0].quantized
    net = spec.build(seed=1)
    assert net.forward(np.ones((5, 2))).shape == (5, 2)
    assert net == spec.build(seed=1)


def test_conv_layer_dense_equivalence_for_1x1():
    rng = np.random.default_rng(0)
    conv = Conv2D(3, 4, kernel=1, rng=rng)
    dense = Dense(3, 4)
    dense.params["weight"] = conv.params["weight"].reshape(4, 3).copy()
    x = rng.normal(size=(2, 3, 5, 5))
    out = conv.forward(x)
    ref = dense.forward(x.transpose(0, 2, 3, 1).reshape(-1, 3)).reshape(2, 5, 5, 4).transpose(0, 3, 1, 2)
    assert np.allclose(out, ref)


# toy harness

def test_toy_data():
    x, y = make_xor_xnor(np.random.default_rng(0), 1000)
    assert x.shape == (1000, 2) and y.shape == (1000, 2)
    assert np.all(y.sum(1) == 1)
    z = np.round(x)
    assert np.all(np.abs(x - z) <= 0.3)
    assert np.array_equal(y[:, 0], np.logical_xor(z[:, 0], z[:, 1]).astype(float))


def test_toy_zero_init_starts_at_half():
    cfg = TrainConfig(epochs=3, batch_size=256)
    curve = run_toy_experiment("rta", cfg, init="zeros")
    assert curve[0] == 0.5


def test_toy_rejects_unknown_activation():
    with pytest.raises(ValueError):
        run_toy_experiment("relu6")
    with pytest.raises(ValueError):
        build_toy_network("sigmoid", np.random.default_rng(0))


def test_toy_is_deterministic_and_writes_csv(tmp_path):
    cfg = TrainConfig(epochs=50, seed=3)
    a = run_toy_experiment("rtanh", cfg)
    b = run_toy_experiment("rtanh", cfg)
    assert a.tobytes() == b.tobytes()
    assert not np.array_equal(a, run_toy_experiment("rtanh", replace(cfg, seed=4)))
    write_curve_csv(a, tmp_path / "c.csv")
    lines = (tmp_path / "c.csv").read_text().splitlines()
    assert lines[0] == "epoch,mse" and len(lines) == 51
    assert float(lines[-1].split(",")[1]) == a[-1]


def test_toy_network_layout():
    net = build_toy_network("rta", np.random.default_rng(0))
    dense = [l for l in net.layers if isinstance(l, Dense)]
    assert [(d.in_features, d.out_features, d.bias) for d in dense] == [(2, 3, False), (3, 2, False)]
    assert np.all(np.abs(dense[0].params["weight"]) <= 1.0)
    assert not any(isinstance(l, ReLU) for l in net.layers)
