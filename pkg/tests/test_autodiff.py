import json

import numpy as np
import pytest

from flowact.autodiff import (
    AdamState,
    DivergenceError,
    Mlp,
    Tensor,
    concat,
    load_arrays,
    save_arrays,
    zero_grads,
)


def finite_difference(f, x, h=1e-5):
    """Central finite differences of a scalar function of a flat array."""
    x = np.asarray(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat = x.ravel()
    gflat = g.ravel()
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f(x)
        flat[i] = orig - h
        fm = f(x)
        flat[i] = orig
        gflat[i] = (fp - fm) / (2 * h)
    return g


def test_forward_identity_layer():
    net = Mlp([2, 2], rng=np.random.default_rng(0))
    net.weights[0].data = np.eye(2)
    net.biases[0].data = np.zeros(2)
    out = net(Tensor([[1.0, 2.0]]))
    assert np.allclose(out.data, [[1.0, 2.0]])


def test_forward_hand_arithmetic():
    net = Mlp([1, 1], rng=np.random.default_rng(0))
    net.weights[0].data = np.array([[2.0]])
    net.biases[0].data = np.array([1.0])
    out = net(Tensor([[3.0]]))
    assert np.allclose(out.data, [[7.0]])


def test_tanh_output_range():
    # Large positive preactivation, but below the point where float64 rounds
    # tanh to exactly 1.
    net = Mlp([1, 1], output_activation="tanh", rng=np.random.default_rng(0))
    net.weights[0].data = np.array([[1.0]])
    net.biases[0].data = np.array([5.0])
    out = net(Tensor([[10.0]]))
    assert np.all(out.data > -1.0) and np.all(out.data < 1.0)


def test_forward_shape_mismatch_rejected():
    net = Mlp([3, 2], rng=np.random.default_rng(0))
    with pytest.raises(ValueError):
        net(Tensor([[1.0, 2.0]]))


def test_backward_linear():
    w = Tensor(np.array([[2.0]]), requires_grad=True)
    x = Tensor(np.array([[3.0]]))
    loss = (x @ w).sum()
    loss.backward()
    assert np.allclose(w.grad, [[3.0]])


def test_backward_tanh_at_zero():
    w = Tensor(np.array([[0.0]]), requires_grad=True)
    loss = w.tanh().sum()
    loss.backward()
    assert np.allclose(w.grad, [[1.0]])


def test_backward_requires_scalar():
    w = Tensor(np.array([[1.0, 2.0]]), requires_grad=True)
    with pytest.raises(ValueError):
        (w * 2.0).backward()


def test_mlp_grads_match_finite_differences():
    rng = np.random.default_rng(7)
    net = Mlp([3, 8, 2], hidden_activation="tanh", rng=rng)
    x = rng.normal(size=(4, 3))
    target = rng.normal(size=(4, 2))

    def loss_at(params_flat):
        offset = 0
        saved = []
        for p in net.parameters():
            saved.append(p.data.copy())
            n = p.data.size
            p.data = params_flat[offset:offset + n].reshape(p.data.shape)
            offset += n
        out = net.forward_np(x)
        val = float(np.sum((out - target) ** 2))
        for p, s in zip(net.parameters(), saved):
            p.data = s
        return val

    diff = net(Tensor(x)) - Tensor(target)
    loss = (diff * diff).sum()
    loss.backward()
    analytic = np.concatenate([p.grad.ravel() for p in net.parameters()])

    flat = np.concatenate([p.data.ravel() for p in net.parameters()])
    numeric = finite_difference(lambda v: loss_at(v), flat)
    denom = np.maximum(np.abs(numeric), 1e-8)
    assert np.max(np.abs(analytic - numeric) / denom) < 1e-4


def test_forward_deterministic():
    net = Mlp([3, 16, 2], rng=np.random.default_rng(11))
    x = np.random.default_rng(3).normal(size=(5, 3))
    a = net.forward_np(x)
    b = net.forward_np(x)
    assert np.array_equal(a, b)


def test_chain_rule_jacobians():
    # J(f o g) = J(f) . J(g) on random 3-dim maps, checked numerically.
    rng = np.random.default_rng(5)
    f = Mlp([3, 6, 3], hidden_activation="tanh", rng=rng)
    g = Mlp([3, 6, 3], hidden_activation="tanh", rng=rng)
    x = rng.normal(size=3)
    jg = g.input_jacobian_np(x)
    jf = f.input_jacobian_np(g.forward_np(x))
    composed = jf @ jg

    h = 1e-6
    numeric = np.zeros((3, 3))
    for j in range(3):
        e = np.zeros(3)
        e[j] = h
        numeric[:, j] = (f.forward_np(g.forward_np(x + e)) - f.forward_np(g.forward_np(x - e))) / (2 * h)
    assert np.max(np.abs(composed - numeric)) < 1e-6


def test_input_jacobian_matches_tape():
    rng = np.random.default_rng(9)
    net = Mlp([4, 10, 3], hidden_activation="relu", rng=rng)
    x = rng.normal(size=(2, 4))
    analytic = net.input_jacobian_np(x)
    for row in range(2):
        for out_dim in range(3):
            xi = Tensor(x[row:row + 1], requires_grad=True)
            y = net(xi)
            y.take_cols([out_dim]).sum().backward()
            assert np.allclose(xi.grad[0], analytic[row, out_dim], atol=1e-12)


def test_concat_and_take_cols_grads():
    a = Tensor(np.ones((2, 2)), requires_grad=True)
    b = Tensor(np.ones((2, 1)), requires_grad=True)
    out = concat([a, b], axis=1).take_cols([2, 0])
    (out * np.array([[1.0, 2.0], [3.0, 4.0]])).sum().backward()
    assert np.allclose(a.grad, [[2.0, 0.0], [4.0, 0.0]])
    assert np.allclose(b.grad, [[1.0], [3.0]])


def test_clip_gradient_mask():
    x = Tensor(np.array([-2.0, 0.5, 2.0]), requires_grad=True)
    x.clip(-1.0, 1.0).sum().backward()
    assert np.allclose(x.grad, [0.0, 1.0, 0.0])


def test_log_ndtr_gradient():
    x = Tensor(np.array([-3.0, 0.0, 2.0]), requires_grad=True)
    x.log_ndtr().sum().backward()
    numeric = finite_difference(
        lambda v: float(np.sum(__import__("scipy.special", fromlist=["log_ndtr"]).log_ndtr(v))),
        np.array([-3.0, 0.0, 2.0]),
        h=1e-6,
    )
    assert np.allclose(x.grad, numeric, rtol=1e-6)


def test_adam_zero_gradient_no_move():
    p = Tensor(np.array([1.0, -2.0]), requires_grad=True)
    p.grad = np.zeros(2)
    opt = AdamState([p], lr=0.1)
    before = p.data.copy()
    opt.step([p])
    assert np.array_equal(p.data, before)
    assert opt.step_count == 1


def test_adam_descends_against_constant_gradient():
    p = Tensor(np.array([0.0]), requires_grad=True)
    opt = AdamState([p], lr=0.01)
    for _ in range(50):
        p.grad = np.array([1.0])
        opt.step([p])
    assert p.data[0] < 0.0


def test_adam_first_step_magnitude():
    # With g=1 at t=1, m_hat = 1 and v_hat = 1, so the step is -lr/(1+eps).
    p = Tensor(np.array([0.0]), requires_grad=True)
    p.grad = np.array([1.0])
    lr = 0.003
    opt = AdamState([p], lr=lr)
    opt.step([p])
    assert abs(p.data[0] + lr) < 1e-10


def test_adam_nan_gradient_raises():
    p = Tensor(np.array([0.0]), requires_grad=True)
    p.grad = np.array([np.nan])
    opt = AdamState([p], lr=0.01)
    with pytest.raises(DivergenceError):
        opt.step([p])


def test_serialization_round_trip_bit_exact(tmp_path):
    rng = np.random.default_rng(21)
    net = Mlp([5, 7, 3], rng=rng)
    arrays = net.state_arrays()
    path = tmp_path / "params.json"
    save_arrays(path, {"kind": "mlp", "layer_dims": net.layer_dims}, arrays)
    manifest, loaded = load_arrays(path)
    assert manifest["layer_dims"] == net.layer_dims
    for name, a in arrays.items():
        assert np.array_equal(loaded[name], a)
        assert loaded[name].dtype == np.float64


def test_serialization_rejects_bad_length(tmp_path):
    path = tmp_path / "bad.json"
    with open(path, "w") as fh:
        json.dump({"manifest": {}, "arrays": {"w": {"shape": [2, 2], "data": [1.0, 2.0]}}}, fh)
    with pytest.raises(ValueError):
        load_arrays(path)


def test_zero_grads():
    p = Tensor(np.array([1.0]), requires_grad=True)
    p.grad = np.array([5.0])
    zero_grads([p])
    assert p.grad is None
