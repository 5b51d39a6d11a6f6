"""Deterministic training of the two benchmark fixtures.

The repository bundles a small 8x8 grayscale digit classification set
(1797 samples, 10 classes, pixel values 0..16).  Both fixture models are
trained with plain minibatch SGD from a fixed seed, so repeated runs
produce byte-identical weights:

* mlp: dense 64-32, dense 32-16, dense 16-10 (ReLU between)
* cnn: a 2x2/stride-2 patch stem (1-8 channels), conv 8-32 3x3 same,
  maxpool, dense 128-10

Images are scaled to [0, 1] before entering either model.
"""

from __future__ import annotations

import importlib.resources
import struct

import numpy as np

from .errors import IoError
from .kernels import LayerSpec
from .quantize import FloatLayer, FloatNetwork, float_accuracy

PIXEL_MAX = 16.0


def load_bundled_digits():
    """(images [n, 8, 8] uint8, labels [n] uint8) from the packaged data."""
    blob = importlib.resources.files("mprv").joinpath("data/digits8x8.bin").read_bytes()
    return parse_dataset(blob)


def parse_dataset(blob: bytes):
    if len(blob) < 16:
        raise IoError("dataset blob too short for its header")
    n, h, w, classes = struct.unpack_from("<IIII", blob, 0)
    need = 16 + n * h * w + n
    if len(blob) != need:
        raise IoError(f"dataset length {len(blob)} != header implies {need}")
    pixels = np.frombuffer(blob, dtype=np.uint8, count=n * h * w, offset=16)
    labels = np.frombuffer(blob, dtype=np.uint8, count=n, offset=16 + n * h * w)
    if labels.max(initial=0) >= classes:
        raise IoError("label out of range")
    return pixels.reshape(n, h, w).copy(), labels.copy()


def serialize_dataset(images: np.ndarray, labels: np.ndarray, classes: int = 10) -> bytes:
    n, h, w = images.shape
    return (
        struct.pack("<IIII", n, h, w, classes)
        + images.astype(np.uint8).tobytes()
        + labels.astype(np.uint8).tobytes()
    )


def split_dataset(images, labels, seed: int, test_fraction: float = 0.2):
    """Deterministic shuffle/split -> (train_x, train_y, test_x, test_y)."""
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(images))
    n_test = int(len(images) * test_fraction)
    test, train = order[:n_test], order[n_test:]
    return images[train], labels[train], images[test], labels[test]


def to_network_input(images: np.ndarray, shape) -> np.ndarray:
    """uint8 digit images -> float batch [n, h, w, c] in [0, 1]."""
    x = images.astype(np.float64) / PIXEL_MAX
    n = x.shape[0]
    return x.reshape((n,) + tuple(shape))


def _softmax_grad(logits, labels):
    z = logits - logits.max(axis=1, keepdims=True)
    p = np.exp(z)
    p /= p.sum(axis=1, keepdims=True)
    g = p.copy()
    g[np.arange(len(labels)), labels] -= 1.0
    return g / len(labels)


def _im2col(x, kh, kw, stride, pad):
    n, h, w, c = x.shape
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (w + 2 * pad - kw) // stride + 1
    xp = np.pad(x, ((0, 0), (pad, pad), (pad, pad), (0, 0)))
    cols = np.empty((n, ho, wo, kh * kw * c))
    k = 0
    for hk in range(kh):
        for wk in range(kw):
            cols[..., k * c : (k + 1) * c] = xp[
                :, hk : hk + ho * stride : stride, wk : wk + wo * stride : stride, :
            ]
            k += 1
    return cols.reshape(n, ho * wo, kh * kw * c), ho, wo


def _col2im(gcols, xshape, kh, kw, stride, pad):
    n, h, w, c = xshape
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (w + 2 * pad - kw) // stride + 1
    gx = np.zeros((n, h + 2 * pad, w + 2 * pad, c))
    g = gcols.reshape(n, ho, wo, kh * kw, c)
    k = 0
    for hk in range(kh):
        for wk in range(kw):
            gx[:, hk : hk + ho * stride : stride, wk : wk + wo * stride : stride, :] += g[
                :, :, :, k, :
            ]
            k += 1
    return gx[:, pad : pad + h, pad : pad + w, :] if pad else gx


def train_mlp(train_x, train_y, seed: int, epochs: int = 60, batch: int = 64, lr: float = 0.1):
    """3-layer dense fixture; input shape (1, 1, 64)."""
    rng = np.random.default_rng(seed)
    dims = [64, 32, 16, 10]
    ws = [rng.normal(0, np.sqrt(2.0 / dims[i]), (dims[i], dims[i + 1])) for i in range(3)]
    bs = [np.zeros(dims[i + 1]) for i in range(3)]
    vs_w = [np.zeros_like(w) for w in ws]
    vs_b = [np.zeros_like(b) for b in bs]
    x_all = train_x.reshape(len(train_x), -1).astype(np.float64) / PIXEL_MAX

    for epoch in range(epochs):
        order = rng.permutation(len(x_all))
        for i in range(0, len(order), batch):
            idx = order[i : i + batch]
            x = x_all[idx]
            acts = [x]
            for li in range(3):
                z = acts[-1] @ ws[li] + bs[li]
                acts.append(np.maximum(z, 0) if li < 2 else z)
            g = _softmax_grad(acts[-1], train_y[idx])
            for li in (2, 1, 0):
                gw = acts[li].T @ g
                gb = g.sum(axis=0)
                if li:
                    g = (g @ ws[li].T) * (acts[li] > 0)
                vs_w[li] = 0.9 * vs_w[li] - lr * gw
                vs_b[li] = 0.9 * vs_b[li] - lr * gb
                ws[li] += vs_w[li]
                bs[li] += vs_b[li]

    layers = []
    specs = [
        LayerSpec("dense", 64, 32, 1, 1, relu=True),
        LayerSpec("dense", 32, 16, 1, 1, relu=True),
        LayerSpec("dense", 16, 10, 1, 1),
    ]
    for spec, w, b in zip(specs, ws, bs):
        layers.append(
            FloatLayer(
                spec=spec,
                weights=w.T.reshape(spec.c_out, 1, 1, spec.c_in).astype(np.float32),
                bias=b.astype(np.float32),
            )
        )
    return FloatNetwork("mlp", tuple(layers))


def train_cnn(train_x, train_y, seed: int, epochs: int = 40, batch: int = 64, lr: float = 0.1):
    """Patch-stem conv fixture on 8x8 inputs; input shape (8, 8, 1)."""
    rng = np.random.default_rng(seed)
    c1, c2 = 8, 32
    w1 = rng.normal(0, np.sqrt(2.0 / 4), (2 * 2 * 1, c1))
    b1 = np.zeros(c1)
    w2 = rng.normal(0, np.sqrt(2.0 / (9 * c1)), (3 * 3 * c1, c2))
    b2 = np.zeros(c2)
    w3 = rng.normal(0, np.sqrt(2.0 / (4 * c2)), (2 * 2 * c2, 10))
    b3 = np.zeros(10)
    params = [w1, b1, w2, b2, w3, b3]
    vel = [np.zeros_like(p) for p in params]
    x_all = train_x.astype(np.float64).reshape(-1, 8, 8, 1) / PIXEL_MAX

    def maxpool(x):
        n, h, w, c = x.shape
        win = x.reshape(n, h // 2, 2, w // 2, 2, c)
        out = win.max(axis=(2, 4))
        mask = win == out[:, :, None, :, None, :]
        return out, mask

    for epoch in range(epochs):
        order = rng.permutation(len(x_all))
        for i in range(0, len(order), batch):
            idx = order[i : i + batch]
            x = x_all[idx]
            n = len(idx)
            # forward
            col1, ho1, wo1 = _im2col(x, 2, 2, 2, 0)
            z1 = col1 @ w1 + b1
            a1 = np.maximum(z1, 0).reshape(n, ho1, wo1, c1)
            col2, ho2, wo2 = _im2col(a1, 3, 3, 1, 1)
            z2 = col2 @ w2 + b2
            a2 = np.maximum(z2, 0).reshape(n, ho2, wo2, c2)
            p2, m2 = maxpool(a2)
            flat = p2.reshape(n, -1)
            logits = flat @ w3 + b3
            # backward
            g = _softmax_grad(logits, train_y[idx])
            gw3 = flat.T @ g
            gb3 = g.sum(axis=0)
            gp2 = (g @ w3.T).reshape(p2.shape)
            ga2 = (m2 * gp2[:, :, None, :, None, :]).reshape(a2.shape) * (a2 > 0)
            gz2 = ga2.reshape(n, ho2 * wo2, c2)
            gw2 = col2.reshape(-1, col2.shape[-1]).T @ gz2.reshape(-1, c2)
            gb2 = gz2.sum(axis=(0, 1))
            gp1 = _col2im(gz2 @ w2.T, a1.shape, 3, 3, 1, 1)
            ga1 = gp1 * (a1 > 0)
            gz1 = ga1.reshape(n, ho1 * wo1, c1)
            gw1 = col1.reshape(-1, col1.shape[-1]).T @ gz1.reshape(-1, c1)
            gb1 = gz1.sum(axis=(0, 1))
            grads = [gw1, gb1, gw2, gb2, gw3, gb3]
            for p, v, gr in zip(params, vel, grads):
                v *= 0.9
                v -= lr * gr
                p += v

    layers = (
        FloatLayer(LayerSpec("conv2d", 1, c1, 8, 8, 2, 2, 2, 0, relu=True),
                   w1.T.reshape(c1, 2, 2, 1).astype(np.float32), b1.astype(np.float32)),
        FloatLayer(LayerSpec("conv2d", c1, c2, 4, 4, 3, 3, 1, 1, relu=True),
                   w2.T.reshape(c2, 3, 3, c1).astype(np.float32), b2.astype(np.float32)),
        FloatLayer(LayerSpec("maxpool", c2, c2, 4, 4, 2, 2, 2, 0)),
        FloatLayer(LayerSpec("dense", 2 * 2 * c2, 10, 1, 1),
                   w3.T.reshape(10, 1, 1, 2 * 2 * c2).astype(np.float32),
                   b3.astype(np.float32)),
    )
    return FloatNetwork("cnn", layers)


def train_fixture(name: str, seed: int):
    """Train one fixture end to end; returns (net, test accuracy, splits)."""
    images, labels = load_bundled_digits()
    tr_x, tr_y, te_x, te_y = split_dataset(images, labels, seed)
    if name == "mlp":
        net = train_mlp(tr_x, tr_y, seed)
    elif name == "cnn":
        net = train_cnn(tr_x, tr_y, seed)
    else:
        raise ValueError(f"unknown fixture {name!r}")
    test_images = to_network_input(te_x, net.input_shape)
    acc = float_accuracy(net, test_images, te_y)
    return net, acc, (tr_x, tr_y, te_x, te_y)
