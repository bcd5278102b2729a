"""
Unit tests for nn_engine.py

Tests:
- conv2d_forward / conv2d_backward: naive loop oracle, finite-difference gradients
- relu and l1_residual_loss: elementwise oracles
- ConvNet: architecture, residual output, clone independence
- adam_step / train: first-step update, skipped non-finite steps, loss decrease, determinism
- gradcheck: linear and ReLU nets pass, corrupted gradients fail
- save_net / load_net: round trip, metadata sidecar, malformed files
"""
import numpy as np
import pytest

import nn_engine as nn


def _naive_conv(x, w, b):
    """Six nested loops over the symmetric-padded input."""
    n, cin, h, wd = x.shape
    cout, _, kh, kw = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (kh // 2, kh // 2), (kw // 2, kw // 2)), mode="symmetric")
    out = np.zeros((n, cout, h, wd))
    for bi in range(n):
        for o in range(cout):
            for r in range(h):
                for c in range(wd):
                    acc = b[o]
                    for i in range(cin):
                        for u in range(kh):
                            for v in range(kw):
                                acc += w[o, i, u, v] * xp[bi, i, r + u, c + v]
                    out[bi, o, r, c] = acc
    return out


def _tiny_net(depth=3, width=4, seed=0):
    net = nn.build_denoiser_net(width, depth, np.float64, np.random.default_rng(seed))
    for conv in net.convs:
        conv.bias[:] = np.random.default_rng(seed + 1).normal(0.0, 0.1, conv.bias.shape)
    return net


def test_conv_forward_matches_naive_loops():
    """3x3 conv on a 5x5 input equals the nested-loop oracle"""
    rng = np.random.default_rng(0)
    x = rng.standard_normal((2, 3, 5, 5))
    layer = nn.Conv2d(rng.standard_normal((4, 3, 3, 3)), rng.standard_normal(4))
    assert np.allclose(nn.conv2d_forward(layer, x), _naive_conv(x, layer.weight, layer.bias), atol=1e-12)


def test_conv_backward_input_gradient_is_adjoint():
    """<conv(x) - bias, g> equals <x, grad_x> for the linear part of the layer"""
    rng = np.random.default_rng(1)
    x = rng.standard_normal((1, 2, 6, 7))
    layer = nn.Conv2d(rng.standard_normal((3, 2, 3, 3)), np.zeros(3))
    g = rng.standard_normal((1, 3, 6, 7))
    grad_x, grad_w, grad_b = nn.conv2d_backward(layer, x, g)
    assert np.vdot(nn.conv2d_forward(layer, x), g) == pytest.approx(np.vdot(x, grad_x), rel=1e-10)
    assert grad_w.shape == layer.weight.shape
    assert np.allclose(grad_b, g.sum(axis=(0, 2, 3)))


def test_conv_rejects_channel_mismatch():
    """Input channels must match the layer"""
    layer = nn.Conv2d(np.zeros((2, 3, 3, 3)), np.zeros(2))
    with pytest.raises(ValueError):
        nn.conv2d_forward(layer, np.zeros((1, 2, 4, 4)))
    with pytest.raises(ValueError):
        nn.Conv2d(np.zeros((2, 3, 2, 2)), np.zeros(2))


def test_relu_forward_and_backward():
    """ReLU keeps positives and passes gradient only where the input was positive"""
    x = np.array([-1.0, 0.0, 2.0])
    assert nn.relu_forward(x).tolist() == [0.0, 0.0, 2.0]
    assert nn.relu_backward(x, np.ones(3)).tolist() == [0.0, 0.0, 1.0]


def test_l1_loss_matches_scalar_loop():
    """Mean absolute error and sign(pred - true) / N"""
    rng = np.random.default_rng(2)
    pred = rng.standard_normal((2, 1, 3, 3))
    true = rng.standard_normal((2, 1, 3, 3))
    loss, grad = nn.l1_residual_loss(pred, true)
    flat_p, flat_t = pred.ravel(), true.ravel()
    expected = sum(abs(p - t) for p, t in zip(flat_p, flat_t)) / flat_p.size
    assert loss == pytest.approx(expected)
    assert np.allclose(grad.ravel(), [np.sign(p - t) / flat_p.size for p, t in zip(flat_p, flat_t)])


def test_build_denoiser_net_architecture():
    """depth convs 1 -> width -> ... -> 1 with a ReLU between consecutive convs"""
    net = nn.build_denoiser_net(width=8, depth=6, rng=0)
    convs = net.convs
    assert len(convs) == 6
    assert convs[0].weight.shape == (8, 1, 3, 3)
    assert convs[-1].weight.shape == (1, 8, 3, 3)
    assert sum(isinstance(layer, nn.ReLU) for layer in net.layers) == 5
    assert net.dtype == np.float32


def test_residual_net_returns_input_minus_prediction():
    """__call__ of a residual net subtracts the predicted noise"""
    net = _tiny_net()
    x = np.random.default_rng(3).random((1, 1, 6, 6))
    assert np.allclose(net(x), x - net.predict(x))


def test_clone_is_independent():
    """Training a clone leaves the original parameters untouched"""
    net = _tiny_net()
    clone = net.clone()
    clone.convs[0].weight += 1.0
    assert not np.allclose(clone.convs[0].weight, net.convs[0].weight)


def test_adam_first_step():
    """With bias correction the first step moves each parameter by about lr * sign(g)"""
    p = np.array([1.0, -1.0, 0.5])
    g = np.array([0.2, -0.4, 0.0])
    state = nn.AdamState.for_params([p], lr=0.01)
    assert nn.adam_step(state, [p], [g])
    assert state.t == 1
    assert p == pytest.approx([0.99, -0.99, 0.5], abs=1e-6)


def test_adam_skips_non_finite_gradients():
    """A NaN gradient leaves the parameters and the step counter unchanged"""
    p = np.ones(2)
    state = nn.AdamState.for_params([p])
    assert not nn.adam_step(state, [p], [np.array([np.nan, 1.0])])
    assert state.t == 0
    assert p.tolist() == [1.0, 1.0]


def _scaled_noise_batch(rng):
    x = rng.random((8, 1, 6, 6))
    return nn.TrainBatch(x, 0.5 * x)


def test_train_reduces_loss_and_is_deterministic():
    """A linear net learns target = 0.5 * input; the same seed gives the same weights"""
    results = []
    for _ in range(2):
        net = nn.build_denoiser_net(width=1, depth=1, dtype=np.float64, rng=0)
        adam = nn.AdamState.for_params(net.parameters(), lr=1e-2)
        results.append(nn.train(net, _scaled_noise_batch, 300, adam, seed=5))
    first = results[0]
    assert np.mean(first.losses[-10:]) < 0.5 * first.losses[0]
    assert first.skipped_steps == 0
    for a, b in zip(first.net.parameters(), results[1].net.parameters()):
        assert np.array_equal(a, b)


def test_train_rejects_short_batch_stream():
    """An iterable that runs out before the step budget is an error"""
    net = nn.build_denoiser_net(width=1, depth=1, rng=0)
    batch = _scaled_noise_batch(np.random.default_rng(0))
    with pytest.raises(ValueError):
        nn.train(net, [batch], steps=2)


def test_gradcheck_linear_net():
    """A single linear conv is checked to 1e-7"""
    net = nn.build_denoiser_net(width=1, depth=1, dtype=np.float64, rng=1)
    rng = np.random.default_rng(6)
    x = rng.random((2, 1, 5, 5))
    # targets far above the prediction keep every residual on one side of the L1 kink
    assert nn.gradcheck(net, x, 10.0 + rng.normal(0, 0.1, x.shape)) <= 1e-7


def test_gradcheck_relu_nets():
    """2- and 3-layer ReLU nets pass the finite-difference check at 1e-4"""
    rng = np.random.default_rng(7)
    for depth in (2, 3):
        net = _tiny_net(depth=depth, seed=depth)
        x = rng.random((2, 1, 6, 6))
        assert nn.gradcheck(net, x, rng.normal(0, 0.1, x.shape)) <= 1e-4


def test_gradcheck_detects_corrupted_gradient():
    """Scaling the analytic gradients by 1.5 is caught"""
    net = _tiny_net(depth=3, seed=3)
    rng = np.random.default_rng(8)
    x = rng.random((2, 1, 6, 6))
    t = rng.normal(0, 0.1, x.shape)
    _, grads = net.loss_and_grads(nn.TrainBatch(x, t))
    assert nn.gradcheck(net, x, t, grads=[1.5 * g for g in grads]) >= 1e-2


def test_gradcheck_needs_double_precision():
    """Single-precision nets are refused"""
    net = nn.build_denoiser_net(width=2, depth=2, rng=0)
    with pytest.raises(ValueError):
        nn.gradcheck(net, np.zeros((1, 1, 4, 4)), np.zeros((1, 1, 4, 4)))


def test_save_load_round_trip(tmp_path):
    """float32 weights, architecture and metadata survive the file format"""
    net = nn.build_denoiser_net(width=4, depth=3, rng=2)
    path = nn.save_net(net, tmp_path / "net.idbpnn", {"sigma255": 15.0, "provenance": "offline"})
    loaded = nn.load_net(path)
    assert loaded.residual
    assert [type(layer) for layer in loaded.layers] == [type(layer) for layer in net.layers]
    for a, b in zip(net.parameters(), loaded.parameters()):
        assert np.array_equal(a, b)
    meta = nn.load_metadata(path)
    assert meta["sigma255"] == "15.0"
    assert meta["provenance"] == "offline"


def test_load_rejects_malformed_files(tmp_path):
    """Wrong magic, trailing bytes and missing files are reported"""
    bad = tmp_path / "bad.idbpnn"
    bad.write_bytes(b"NOTANET")
    with pytest.raises(ValueError):
        nn.load_net(bad)
    net = nn.build_denoiser_net(width=2, depth=2, rng=0)
    path = nn.save_net(net, tmp_path / "ok.idbpnn")
    path.write_bytes(path.read_bytes() + b"\x00\x00\x00\x00")
    with pytest.raises(ValueError):
        nn.load_net(path)
    with pytest.raises(FileNotFoundError):
        nn.load_net(tmp_path / "missing.idbpnn")
