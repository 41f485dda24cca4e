import math

import numpy as np
import pytest

from qbestd import autodiff as ad
from qbestd import nn
from qbestd.autodiff import Tensor
from qbestd.errors import ValidationError


def sigmoid(x):
    return 1.0 / (1.0 + math.exp(-x))


def make_layer(rng, d_in, h):
    return nn.init_lstm_layer(rng, d_in, h)


# ---------------------------------------------------------------------------
# lstm_step
# ---------------------------------------------------------------------------

def test_lstm_step_all_zero_params():
    layer = nn.LstmLayerParams(
        wx=Tensor(np.zeros((2, 8)), requires_grad=True),
        wh=Tensor(np.zeros((2, 8)), requires_grad=True),
        bias=Tensor(np.zeros(8), requires_grad=True),
    )
    h, c = nn.lstm_step(layer, np.array([[3.0, -1.0]]), np.zeros((1, 2)), np.zeros((1, 2)))
    # zero candidate forces c = 0.5 * c_prev = 0, h = 0
    assert np.allclose(h.data, 0.0)
    assert np.allclose(c.data, 0.0)


def test_lstm_step_scalar_hand_evaluation():
    # h = 1, d_in = 1, hand-set weights; gate order [input, forget, output, cand]
    wx = np.array([[0.5, -0.3, 0.8, 1.1]])
    wh = np.array([[0.2, 0.4, -0.6, 0.9]])
    bias = np.array([0.1, -0.2, 0.3, 0.05])
    layer = nn.LstmLayerParams(wx=Tensor(wx, requires_grad=True),
                               wh=Tensor(wh, requires_grad=True),
                               bias=Tensor(bias, requires_grad=True))
    x, h_prev, c_prev = 0.7, -0.4, 0.25
    # hand evaluation of the four gate equations
    i = sigmoid(0.5 * x + 0.2 * h_prev + 0.1)
    f = sigmoid(-0.3 * x + 0.4 * h_prev - 0.2)
    o = sigmoid(0.8 * x - 0.6 * h_prev + 0.3)
    g = math.tanh(1.1 * x + 0.9 * h_prev + 0.05)
    c_expect = f * c_prev + i * g
    h_expect = o * math.tanh(c_expect)
    h_t, c_t = nn.lstm_step(layer, np.array([[x]]), np.array([[h_prev]]),
                            np.array([[c_prev]]))
    assert h_t.data[0, 0] == pytest.approx(h_expect, abs=1e-12)
    assert c_t.data[0, 0] == pytest.approx(c_expect, abs=1e-12)
    # per-gate views expose the same numbers
    assert layer.gate("forget")["bias"][0] == -0.2


def test_lstm_step_output_bound(rng):
    layer = make_layer(rng, 3, 5)
    for _ in range(20):
        h, _ = nn.lstm_step(layer, rng.normal(size=(4, 3), scale=5),
                            rng.uniform(-1, 1, (4, 5)), rng.normal(size=(4, 5)))
        assert np.all(np.abs(h.data) <= 1.0)


def test_lstm_step_dim_mismatch(rng):
    layer = make_layer(rng, 3, 5)
    with pytest.raises(ValidationError):
        nn.lstm_step(layer, np.zeros((1, 4)), np.zeros((1, 5)), np.zeros((1, 5)))


# ---------------------------------------------------------------------------
# lstm_encode
# ---------------------------------------------------------------------------

def test_encode_length_one(rng):
    layers = [make_layer(rng, 3, 4), make_layer(rng, 4, 4)]
    seq = rng.normal(size=(1, 3))
    last, full = nn.lstm_encode(layers, seq)
    assert full.data.shape == (1, 4)
    assert np.allclose(last.data, full.data[0])


def test_encode_prefix_property(rng):
    layers = [make_layer(rng, 3, 5), make_layer(rng, 5, 5)]
    seq = rng.normal(size=(9, 3))
    _, full = nn.lstm_encode(layers, seq)
    for t in (1, 4, 8):
        _, prefix = nn.lstm_encode(layers, seq[:t])
        assert np.allclose(prefix.data, full.data[:t], atol=1e-12)


def test_encode_causality(rng):
    layers = [make_layer(rng, 3, 5), make_layer(rng, 5, 5)]
    seq = rng.normal(size=(8, 3))
    _, base = nn.lstm_encode(layers, seq)
    changed = seq.copy()
    changed[5] += 10.0
    _, out = nn.lstm_encode(layers, changed)
    assert np.allclose(out.data[:5], base.data[:5], atol=1e-12)
    assert not np.allclose(out.data[5:], base.data[5:])


def test_encode_rejects_empty(rng):
    layers = [make_layer(rng, 3, 5)]
    with pytest.raises(ValidationError):
        nn.lstm_encode(layers, np.zeros((0, 3)))


def test_encode_gradcheck(rng):
    layers = [make_layer(rng, 3, 4), make_layer(rng, 4, 4)]
    seq = rng.normal(size=(6, 3))
    probe = rng.normal(size=4)

    def loss_fn():
        last, _ = nn.lstm_encode(layers, seq)
        return ad.tsum(ad.mul(last, probe))

    params = layers[0].tensors() + layers[1].tensors()
    report = ad.gradient_check(loss_fn, params, rng=np.random.default_rng(2),
                               probes_per_tensor=6)
    assert report["max_rel_err"] < 1e-4


def test_masked_batch_equals_per_sequence(rng):
    layers = [make_layer(rng, 3, 5), make_layer(rng, 5, 5)]
    seqs = [rng.normal(size=(t, 3)) for t in (3, 7, 5)]
    from qbestd.model import make_batch
    batch = make_batch(seqs, seqs)
    last, states = nn.lstm_encode_batch(layers, batch.queries, batch.query_mask)
    for k, seq in enumerate(seqs):
        solo_last, solo_all = nn.lstm_encode(layers, seq)
        assert np.allclose(last.data[k], solo_last.data, atol=1e-12)
        assert np.allclose(states.data[k, : len(seq)], solo_all.data, atol=1e-12)


# ---------------------------------------------------------------------------
# feed-forward
# ---------------------------------------------------------------------------

def test_feed_forward_identity():
    params = nn.FeedForwardParams(
        weights=[Tensor(np.eye(3), requires_grad=True)],
        biases=[Tensor(np.zeros(3), requires_grad=True)],
        activations=["identity"],
    )
    x = np.array([1.0, -2.0, 3.0])
    assert np.allclose(nn.feed_forward(params, x).data, x)


def test_feed_forward_zero_weights_returns_bias(rng):
    params = nn.init_feed_forward(rng, [4, 3, 2])
    for w in params.weights:
        w.data[:] = 0.0
    params.biases[0].data[:] = 1.0
    params.biases[1].data[:] = np.array([0.5, -0.5])
    out = nn.feed_forward(params, rng.normal(size=4))
    assert np.allclose(out.data, [0.5, -0.5])


def test_feed_forward_gradcheck(rng):
    params = nn.init_feed_forward(rng, [4, 6, 3, 2])
    x = rng.normal(size=(3, 4))
    probe = rng.normal(size=(3, 2))

    def loss_fn():
        return ad.tsum(ad.mul(nn.feed_forward(params, Tensor(x)), probe))

    report = ad.gradient_check(loss_fn, params.tensors(),
                               rng=np.random.default_rng(0), probes_per_tensor=6)
    assert report["max_rel_err"] < 1e-4


def test_feed_forward_dim_mismatch(rng):
    params = nn.init_feed_forward(rng, [4, 2])
    with pytest.raises(ValidationError):
        nn.feed_forward(params, np.zeros(3))


# ---------------------------------------------------------------------------
# similarities and losses
# ---------------------------------------------------------------------------

def test_softmax_examples():
    assert np.allclose(nn.softmax([3.0, 3.0, 3.0]), [1 / 3] * 3)
    out = nn.softmax(np.log([1.0, 2.0, 3.0]))
    assert np.allclose(out, [1 / 6, 1 / 3, 1 / 2], atol=1e-12)
    extreme = nn.softmax([1000.0, 0.0])
    assert extreme[0] == pytest.approx(1.0) and np.isfinite(extreme).all()


def test_cosine_similarity_examples(rng):
    v = rng.normal(size=7)
    assert nn.cosine_similarity(v, v) == pytest.approx(1.0)
    assert nn.cosine_similarity([1.0, 0.0], [0.0, 1.0]) == 0.0
    assert nn.cosine_similarity([1.0, 1.0], [1.0, 0.0]) == pytest.approx(0.70710678, abs=1e-8)
    assert nn.cosine_similarity(np.zeros(4), v[:4]) == 0.0
    for _ in range(10):
        a, b = rng.normal(size=5), rng.normal(size=5)
        assert -1.0 <= nn.cosine_similarity(a, b) <= 1.0


def test_cross_entropy_examples():
    assert nn.cross_entropy_loss([0.0, 0.0], False) == pytest.approx(math.log(2))
    assert nn.cross_entropy_loss([0.0, 0.0], True) == pytest.approx(math.log(2))
    assert nn.cross_entropy_loss([20.0, -20.0], False) == pytest.approx(0.0, abs=1e-8)
    assert nn.cross_entropy_loss([-20.0, 20.0], True) == pytest.approx(0.0, abs=1e-8)


def test_cross_entropy_batch_gradcheck(rng):
    logits = Tensor(rng.normal(size=(4, 2)), requires_grad=True)
    labels = np.array([True, False, True, True])

    def loss_fn():
        return nn.cross_entropy_batch(logits, labels)

    report = ad.gradient_check(loss_fn, [logits], rng=np.random.default_rng(1),
                               probes_per_tensor=8)
    assert report["max_rel_err"] < 1e-6


def test_mse_examples(rng):
    assert nn.mse_loss(0.3, 0.3) == 0.0
    assert nn.mse_loss(0.2, 0.7) == pytest.approx(0.25)
    pred = Tensor(rng.uniform(size=5), requires_grad=True)
    target = rng.uniform(size=5)

    def loss_fn():
        return nn.mse_batch(pred, target)

    report = ad.gradient_check(loss_fn, [pred], rng=np.random.default_rng(2),
                               probes_per_tensor=5)
    assert report["max_rel_err"] < 1e-6
    ad.zero_grads([pred])
    ad.backward(nn.mse_batch(pred, target))
    assert np.allclose(pred.grad, 2 * (pred.data - target) / 5)


# ---------------------------------------------------------------------------
# ADAM
# ---------------------------------------------------------------------------

def test_adam_zero_gradient_fixed_point(rng):
    p = Tensor(rng.normal(size=(3,)), requires_grad=True)
    opt = nn.Adam([p])
    before = p.data.copy()
    p.grad = np.zeros(3)
    for _ in range(5):
        opt.step()
    assert np.array_equal(p.data, before)


def test_adam_first_step_closed_form(rng):
    p = Tensor(np.array([1.0, -2.0, 3.0]), requires_grad=True)
    g = np.array([0.5, -0.1, 2.0])
    opt = nn.Adam([p], lr=1e-3)
    before = p.data.copy()
    p.grad = g.copy()
    opt.step()
    # bias correction collapses: m_hat = g, v_hat = g^2
    expected = before - 1e-3 * g / (np.abs(g) + 1e-8)
    assert np.allclose(p.data, expected, atol=1e-12)


def test_adam_determinism(rng):
    def run():
        r = np.random.default_rng(9)
        p = Tensor(np.ones(4), requires_grad=True)
        opt = nn.Adam([p], lr=1e-2)
        for _ in range(50):
            p.grad = r.normal(size=4)
            opt.step()
        return p.data.copy()

    a, b = run(), run()
    assert np.array_equal(a, b)


def test_adam_shape_check():
    p = Tensor(np.ones((2, 2)), requires_grad=True)
    opt = nn.Adam([p])
    p.grad = np.ones(3)
    with pytest.raises(ValidationError):
        opt.step()


def test_clip_gradients(rng):
    ps = [Tensor(np.zeros(4), requires_grad=True) for _ in range(3)]
    for p in ps:
        p.grad = rng.normal(size=4) * 10
    norm_before = np.sqrt(sum((p.grad ** 2).sum() for p in ps))
    nn.clip_gradients(ps, 5.0)
    norm_after = np.sqrt(sum((p.grad ** 2).sum() for p in ps))
    assert norm_after == pytest.approx(min(norm_before, 5.0), rel=1e-9)


def test_lstm_init_conventions(rng):
    layer = nn.init_lstm_layer(rng, 7, 32)
    scale = 1 / np.sqrt(32)
    assert np.abs(layer.wx.data).max() <= scale
    assert np.abs(layer.wh.data).max() <= scale
    assert np.all(layer.gate("forget")["bias"] == 1.0)
    assert np.all(layer.gate("input")["bias"] == 0.0)
