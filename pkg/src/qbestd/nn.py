"""LSTM stack, feed-forward detector, losses and the ADAM optimizer.

All trainable state lives in float64 Tensors (gradient-check fidelity);
inference uses the float32 engine in ``inference``. LSTM gates are stored
fused as (d_in, 4h) / (h, 4h) matrices with column blocks ordered
[input, forget, output, candidate]; the forget block of the bias is
initialized to 1.0, every weight is uniform in [-1/sqrt(h), 1/sqrt(h)].
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ValidationError

GATE_ORDER = ("input", "forget", "output", "candidate")


@dataclass
class LstmLayerParams:
    wx: Tensor     # (d_in, 4h) input weights, gate blocks in GATE_ORDER
    wh: Tensor     # (h, 4h) recurrent weights
    bias: Tensor   # (4h,)

    @property
    def hidden_dim(self) -> int:
        return self.wh.data.shape[0]

    @property
    def input_dim(self) -> int:
        return self.wx.data.shape[0]

    def gate(self, name: str) -> dict[str, np.ndarray]:
        """Per-gate views (input weights, recurrent weights, bias)."""
        h = self.hidden_dim
        k = GATE_ORDER.index(name)
        block = slice(k * h, (k + 1) * h)
        return {"wx": self.wx.data[:, block], "wh": self.wh.data[:, block],
                "bias": self.bias.data[block]}

    def tensors(self) -> list[Tensor]:
        return [self.wx, self.wh, self.bias]


def init_lstm_layer(rng: np.random.Generator, d_in: int, hidden: int) -> LstmLayerParams:
    scale = 1.0 / np.sqrt(hidden)
    wx = rng.uniform(-scale, scale, size=(d_in, 4 * hidden))
    wh = rng.uniform(-scale, scale, size=(hidden, 4 * hidden))
    bias = np.zeros(4 * hidden)
    bias[hidden : 2 * hidden] = 1.0  # forget-gate bias
    return LstmLayerParams(
        wx=Tensor(wx, requires_grad=True),
        wh=Tensor(wh, requires_grad=True),
        bias=Tensor(bias, requires_grad=True),
    )


def lstm_step(layer: LstmLayerParams, x_t, h_prev, c_prev):
    """One LSTM cell update for a (B, d_in) input. Returns (h_t, c_t)."""
    h = layer.hidden_dim
    x_t = x_t if isinstance(x_t, Tensor) else Tensor(np.atleast_2d(x_t))
    h_prev = h_prev if isinstance(h_prev, Tensor) else Tensor(np.atleast_2d(h_prev))
    c_prev = c_prev if isinstance(c_prev, Tensor) else Tensor(np.atleast_2d(c_prev))
    if x_t.data.shape[1] != layer.input_dim:
        raise ValidationError(
            f"input dim {x_t.data.shape[1]} != layer input dim {layer.input_dim}"
        )
    gates = ad.add(ad.add(ad.matmul(x_t, layer.wx), ad.matmul(h_prev, layer.wh)), layer.bias)
    i = ad.sigmoid(gates[:, 0:h])
    f = ad.sigmoid(gates[:, h : 2 * h])
    o = ad.sigmoid(gates[:, 2 * h : 3 * h])
    g = ad.tanh(gates[:, 3 * h : 4 * h])
    c_t = ad.add(ad.mul(f, c_prev), ad.mul(i, g))
    h_t = ad.mul(o, ad.tanh(c_t))
    return h_t, c_t


def lstm_layer_seq(x, layer: LstmLayerParams, mask: np.ndarray | None = None) -> Tensor:
    """Run one LSTM layer over a padded (B, T, d_in) batch as a single tape node.

    Backpropagation through time is hand-written (and checked against finite
    differences); per-frame gate activations and cell states are kept from the
    forward pass. Padded steps (mask False) carry the previous state through
    unchanged, so gradients skip them symmetrically. Internals are time-major
    so the per-frame slices stay contiguous.
    """
    xt = x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))
    xd = xt.data
    if xd.ndim != 3:
        raise ValidationError(f"expected (B, T, d) input, got shape {xd.shape}")
    B, T, d_in = xd.shape
    if d_in != layer.input_dim:
        raise ValidationError(f"input dim {d_in} != layer input dim {layer.input_dim}")
    h = layer.hidden_dim
    wx, wh, bias = layer.wx, layer.wh, layer.bias
    whd = wh.data
    masked = mask is not None and not bool(mask.all())
    if masked:
        pad_tm = ~mask.T[:, :, None]                  # (T, B, 1), True on padding
        first_padded = int(mask.sum(axis=1).min())    # frames before this need no masking
    x_tm = np.ascontiguousarray(xd.transpose(1, 0, 2))

    acts = (x_tm.reshape(T * B, d_in) @ wx.data + bias.data).reshape(T, B, 4 * h)
    cells = np.empty((T, B, h))
    tanh_c = np.empty((T, B, h))
    states = np.empty((T, B, h))
    h_t = np.zeros((B, h))
    c_t = np.zeros((B, h))
    rec = np.empty((B, 4 * h))
    for t in range(T):
        g = acts[t]
        np.matmul(h_t, whd, out=rec)
        g += rec
        gs = g[:, : 3 * h]                            # sigmoid gates [i, f, o] in place
        np.negative(gs, out=gs)
        np.exp(gs, out=gs)
        gs += 1.0
        np.reciprocal(gs, out=gs)
        np.tanh(g[:, 3 * h :], out=g[:, 3 * h :])     # candidate
        c_new = cells[t]
        np.multiply(g[:, h : 2 * h], c_t, out=c_new)
        c_new += g[:, :h] * g[:, 3 * h :]
        tc = tanh_c[t]
        np.tanh(c_new, out=tc)
        h_new = states[t]
        np.multiply(g[:, 2 * h : 3 * h], tc, out=h_new)
        if masked and t >= first_padded:
            pad = pad_tm[t]
            np.copyto(h_new, h_t, where=pad)
            np.copyto(c_new, c_t, where=pad)
        h_t = h_new
        c_t = c_new

    def bw(gout):
        gout_tm = gout.transpose(1, 0, 2)
        dgates = np.empty((T, B, 4 * h))
        dh_carry = np.zeros((B, h))
        dc_carry = np.zeros((B, h))
        for t in range(T - 1, -1, -1):
            a = acts[t]
            i, f, o = a[:, :h], a[:, h : 2 * h], a[:, 2 * h : 3 * h]
            g_cand = a[:, 3 * h :]
            tc = tanh_c[t]
            dh = gout_tm[t] + dh_carry
            dc = dc_carry
            if masked and t >= first_padded:
                pad = pad_tm[t]
                dh_pass = dh * pad
                dc_pass = dc * pad
                dh = dh * ~pad
                dc = dc * ~pad
            dg = dgates[t]
            do = dg[:, 2 * h : 3 * h]
            np.multiply(dh, tc, out=do)
            dc = dc + dh * (o * (1.0 - tc * tc))
            np.multiply(dc, g_cand, out=dg[:, :h])                    # d input gate
            if t > 0:
                np.multiply(dc, cells[t - 1], out=dg[:, h : 2 * h])   # d forget gate
            else:
                dg[:, h : 2 * h] = 0.0
            np.multiply(dc, i, out=dg[:, 3 * h :])                    # d candidate
            dg[:, : 3 * h] *= a[:, : 3 * h] * (1.0 - a[:, : 3 * h])   # sigmoid'
            dg[:, 3 * h :] *= 1.0 - g_cand * g_cand                   # tanh'
            dh_carry = dg @ whd.T
            dc_carry = dc * f
            if masked and t >= first_padded:
                dh_carry += dh_pass
                dc_carry += dc_pass
        flat = dgates.reshape(T * B, 4 * h)
        ad._acc(wx, x_tm.reshape(T * B, d_in).T @ flat)
        h_prev_all = np.concatenate([np.zeros((1, B, h)), states[:-1]], axis=0)
        ad._acc(wh, h_prev_all.reshape(T * B, h).T @ flat)
        ad._acc(bias, flat.sum(axis=0))
        if xt.requires_grad:
            ad._acc(xt, (flat @ wx.data.T).reshape(T, B, d_in).transpose(1, 0, 2))

    out = np.ascontiguousarray(states.transpose(1, 0, 2))
    return ad._make(out, (xt, wx, wh, bias), bw)


def lstm_encode_batch(layers, x: np.ndarray, mask: np.ndarray | None = None
                      ) -> tuple[Tensor, Tensor]:
    """Run a padded batch (B, T, d) through the stack.

    ``mask`` is (B, T) with True on real frames; padded steps keep the
    previous state so the final hidden state is each sequence's own last
    frame. Returns (last_hidden (B, h), top-layer states (B, T, h)).
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 3:
        raise ValidationError(f"expected (B, T, d) input, got shape {x.shape}")
    B, T, _ = x.shape
    if T < 1:
        raise ValidationError("cannot encode an empty sequence")
    out = x
    for layer in layers:
        out = lstm_layer_seq(out, layer, mask)
    if mask is None or bool(mask.all()):
        last = out[:, T - 1, :]
    else:
        last = ad.gather_frames(out, mask.sum(axis=1) - 1)
    return last, out


def lstm_encode(layers, seq: np.ndarray) -> tuple[Tensor, Tensor]:
    """Encode one (T, d) sequence; returns (last_hidden (h,), all_hidden (T, h))."""
    seq = np.asarray(seq, dtype=np.float64)
    if seq.ndim != 2 or seq.shape[0] < 1:
        raise ValidationError(f"expected a nonempty (T, d) sequence, got {seq.shape}")
    last, frames = lstm_encode_batch(layers, seq[None, :, :])
    all_hidden = ad.reshape(frames, (seq.shape[0], layers[-1].hidden_dim))
    return ad.reshape(last, (layers[-1].hidden_dim,)), all_hidden


@dataclass
class FeedForwardParams:
    weights: list[Tensor]
    biases: list[Tensor]
    activations: list[str]   # "relu" or "identity" per layer

    def tensors(self) -> list[Tensor]:
        return [*self.weights, *self.biases]

    @property
    def dims(self) -> list[int]:
        return [self.weights[0].data.shape[0]] + [w.data.shape[1] for w in self.weights]


def init_feed_forward(rng: np.random.Generator, dims) -> FeedForwardParams:
    """Affine stack with ReLU on hidden layers and a linear final layer."""
    weights, biases, acts = [], [], []
    for k in range(len(dims) - 1):
        scale = 1.0 / np.sqrt(dims[k])
        weights.append(Tensor(rng.uniform(-scale, scale, size=(dims[k], dims[k + 1])),
                              requires_grad=True))
        biases.append(Tensor(np.zeros(dims[k + 1]), requires_grad=True))
        acts.append("identity" if k == len(dims) - 2 else "relu")
    return FeedForwardParams(weights=weights, biases=biases, activations=acts)


def feed_forward(params: FeedForwardParams, x) -> Tensor:
    """Apply the affine stack to (B, d_in) or a single (d_in,) vector."""
    single = not isinstance(x, Tensor) and np.asarray(x).ndim == 1
    t = x if isinstance(x, Tensor) else Tensor(np.atleast_2d(np.asarray(x, dtype=np.float64)))
    if t.data.ndim == 1:
        t = ad.reshape(t, (1, -1))
        single = True
    if t.data.shape[1] != params.weights[0].data.shape[0]:
        raise ValidationError(
            f"input dim {t.data.shape[1]} != network input {params.weights[0].data.shape[0]}"
        )
    for w, b, act in zip(params.weights, params.biases, params.activations):
        t = ad.add(ad.matmul(t, w), b)
        if act == "relu":
            t = ad.relu(t)
    if single:
        t = ad.reshape(t, (t.data.shape[1],))
    return t


# ---------------------------------------------------------------------------
# similarities and losses
# ---------------------------------------------------------------------------

def cosine_similarity(a, b) -> float:
    """Plain-number cosine with a zero-norm guard (returns 0)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    na = float(np.sqrt(a @ a))
    nb = float(np.sqrt(b @ b))
    if na < 1e-12 or nb < 1e-12:
        return 0.0
    return float(a @ b) / (na * nb)


def cosine_rows(a: Tensor, b: Tensor) -> Tensor:
    """Row-wise cosine between (B, h) tensors, differentiable, zero-guarded."""
    num = ad.tsum(ad.mul(a, b), axis=1)
    na = ad.tsqrt(ad.clip_min(ad.tsum(ad.mul(a, a), axis=1), 1e-24))
    nb = ad.tsqrt(ad.clip_min(ad.tsum(ad.mul(b, b), axis=1), 1e-24))
    return ad.div(num, ad.mul(na, nb))


def softmax(scores) -> np.ndarray:
    """Numerically stable softmax of a plain vector."""
    scores = np.asarray(scores, dtype=np.float64)
    e = np.exp(scores - scores.max())
    return e / e.sum()


def cross_entropy_batch(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean -log softmax(logits)[label] over a (B, 2) batch."""
    idx = np.asarray(labels).astype(np.intp)
    picked = ad.select_columns(ad.log_softmax(logits, axis=1), idx)
    return ad.neg(ad.tmean(picked))


def cross_entropy_loss(logits, label: bool) -> float:
    """-log softmax(logits)[label] for one 2-logit prediction, in log space."""
    logits = np.asarray(logits, dtype=np.float64)
    shifted = logits - logits.max()
    log_probs = shifted - np.log(np.exp(shifted).sum())
    return float(-log_probs[int(label)])


def mse_batch(pred: Tensor, targets: np.ndarray) -> Tensor:
    diff = ad.sub(pred, np.asarray(targets, dtype=np.float64))
    return ad.tmean(ad.mul(diff, diff))


def mse_loss(pred: float, target: float) -> float:
    return (float(pred) - float(target)) ** 2


class Adam:
    """Bias-corrected ADAM over a list of parameter tensors."""

    def __init__(self, params, lr: float = 1e-3, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        for k, p in enumerate(self.params):
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            if g.shape != p.data.shape:
                raise ValidationError(
                    f"gradient shape {g.shape} != parameter shape {p.data.shape}"
                )
            self.m[k] = b1 * self.m[k] + (1 - b1) * g
            self.v[k] = b2 * self.v[k] + (1 - b2) * g * g
            m_hat = self.m[k] / (1 - b1 ** self.t)
            v_hat = self.v[k] / (1 - b2 ** self.t)
            p.data -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)

    def zero_grad(self):
        for p in self.params:
            p.grad = None


def clip_gradients(params, max_norm: float) -> float:
    """Scale gradients in place so their global L2 norm is at most max_norm."""
    total = 0.0
    for p in params:
        if p.grad is not None:
            total += float((p.grad * p.grad).sum())
    norm = float(np.sqrt(total))
    if norm > max_norm and norm > 0:
        scale = max_norm / norm
        for p in params:
            if p.grad is not None:
                p.grad *= scale
    return norm
