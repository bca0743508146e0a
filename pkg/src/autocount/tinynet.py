"""Just enough of a neural-network library to train a small fully convolutional net.

Tensors are numpy arrays shaped (batch, channels, height, width).  Parameters
are stored as float32; the forward/backward passes run in the dtype of the
input (float64 for gradient checks, float32 for training) and all
reductions over pixels accumulate in float64.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

WEIGHTS_MAGIC = b"ACNT"
WEIGHTS_VERSION = 1
_KIND_CONV, _KIND_BN, _KIND_RELU = 0, 1, 2


def _check4(x, name="x"):
    if x.ndim != 4:
        raise ValueError(f"{name} must be 4-D (N, C, H, W), got shape {x.shape}")


@dataclass
class ConvLayer:
    """Stride-1, same-padding 2-D convolution (cross-correlation)."""

    weight: np.ndarray  # (out_ch, in_ch, k, k)
    bias: np.ndarray  # (out_ch,)

    def __post_init__(self):
        self.weight = np.asarray(self.weight, dtype=np.float32)
        self.bias = np.asarray(self.bias, dtype=np.float32)
        o, _, kh, kw = self.weight.shape
        if kh != kw or kh % 2 == 0:
            raise ValueError(f"kernel must be square with odd size, got {kh}x{kw}")
        if self.bias.shape != (o,):
            raise ValueError(f"bias shape {self.bias.shape} does not match {o} output channels")

    @classmethod
    def init(cls, in_ch: int, out_ch: int, k: int, rng: np.random.Generator) -> "ConvLayer":
        bound = 1.0 / np.sqrt(in_ch * k * k)
        w = rng.uniform(-bound, bound, size=(out_ch, in_ch, k, k))
        b = rng.uniform(-bound, bound, size=out_ch)
        return cls(w, b)

    @property
    def in_ch(self) -> int:
        return self.weight.shape[1]

    @property
    def out_ch(self) -> int:
        return self.weight.shape[0]

    @property
    def k(self) -> int:
        return self.weight.shape[2]

    def params(self):
        return [self.weight, self.bias]


def _im2col(x: np.ndarray, k: int) -> np.ndarray:
    n, c, h, w = x.shape
    p = k // 2
    xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))
    win = sliding_window_view(xp, (k, k), axis=(2, 3))  # (n, c, h, w, k, k)
    return win.transpose(0, 2, 3, 1, 4, 5).reshape(n * h * w, c * k * k)


def conv2d_forward(x: np.ndarray, layer: ConvLayer) -> np.ndarray:
    _check4(x)
    if x.shape[1] != layer.in_ch:
        raise ValueError(f"input has {x.shape[1]} channels, layer expects {layer.in_ch}")
    n, _, h, w = x.shape
    dt = np.result_type(x.dtype, np.float32)
    cols = _im2col(x.astype(dt, copy=False), layer.k)
    y = cols @ layer.weight.reshape(layer.out_ch, -1).T.astype(dt) + layer.bias.astype(dt)
    return np.ascontiguousarray(y.reshape(n, h, w, layer.out_ch).transpose(0, 3, 1, 2))


def conv2d_backward(x: np.ndarray, layer: ConvLayer, grad_out: np.ndarray):
    """Return ``(grad_x, grad_weight, grad_bias)``."""
    _check4(x)
    _check4(grad_out, "grad_out")
    n, c, h, w = x.shape
    if c != layer.in_ch or grad_out.shape != (n, layer.out_ch, h, w):
        raise ValueError(
            f"shape mismatch: x {x.shape}, grad_out {grad_out.shape}, layer {layer.weight.shape}"
        )
    k = layer.k
    p = k // 2
    dt = np.result_type(x.dtype, grad_out.dtype, np.float32)
    cols = _im2col(x.astype(dt, copy=False), k)
    g = grad_out.astype(dt, copy=False).transpose(0, 2, 3, 1).reshape(-1, layer.out_ch)
    grad_w = (g.T @ cols).reshape(layer.weight.shape)
    grad_b = g.sum(axis=0, dtype=np.float64).astype(dt)
    gcols = (g @ layer.weight.reshape(layer.out_ch, -1).astype(dt)).reshape(n, h, w, c, k, k)
    gxp = np.zeros((n, c, h + 2 * p, w + 2 * p), dtype=dt)
    for i in range(k):
        for j in range(k):
            gxp[:, :, i : i + h, j : j + w] += gcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
    return gxp[:, :, p : p + h, p : p + w], grad_w, grad_b


@dataclass
class BatchNormLayer:
    gamma: np.ndarray
    beta: np.ndarray
    running_mean: np.ndarray
    running_var: np.ndarray
    eps: float = 1e-5
    momentum: float = 0.1

    def __post_init__(self):
        if self.eps <= 0:
            raise ValueError("batchnorm epsilon must be > 0")
        for name in ("gamma", "beta", "running_mean", "running_var"):
            setattr(self, name, np.asarray(getattr(self, name), dtype=np.float32))

    @classmethod
    def init(cls, channels: int, eps: float = 1e-5, momentum: float = 0.1) -> "BatchNormLayer":
        return cls(np.ones(channels), np.zeros(channels), np.zeros(channels), np.ones(channels),
                   eps, momentum)

    @property
    def channels(self) -> int:
        return self.gamma.shape[0]

    def params(self):
        return [self.gamma, self.beta]


def _batch_stats(x):
    mean = x.mean(axis=(0, 2, 3), dtype=np.float64)
    var = ((x - mean[None, :, None, None].astype(x.dtype)) ** 2).mean(axis=(0, 2, 3), dtype=np.float64)
    return mean, var


def batchnorm_forward(x: np.ndarray, layer: BatchNormLayer, training: bool,
                      update_stats: bool = True) -> np.ndarray:
    """Normalise each channel over (batch, H, W).

    In training mode the batch statistics are used (and folded into the
    running estimates unless ``update_stats`` is False); in eval mode the
    running estimates are used.
    """
    _check4(x)
    if x.shape[1] != layer.channels:
        raise ValueError(f"input has {x.shape[1]} channels, layer expects {layer.channels}")
    dt = np.result_type(x.dtype, np.float32)
    if training:
        mean, var = _batch_stats(x.astype(dt, copy=False))
        if update_stats:
            m = x.shape[0] * x.shape[2] * x.shape[3]
            unbiased = var * m / max(m - 1, 1)
            layer.running_mean = ((1 - layer.momentum) * layer.running_mean + layer.momentum * mean).astype(np.float32)
            layer.running_var = ((1 - layer.momentum) * layer.running_var + layer.momentum * unbiased).astype(np.float32)
    else:
        mean = layer.running_mean.astype(np.float64)
        var = layer.running_var.astype(np.float64)
    inv = 1.0 / np.sqrt(var + layer.eps)
    scale = (layer.gamma * inv).astype(dt)
    shift = (layer.beta - mean * layer.gamma * inv).astype(dt)
    return x.astype(dt, copy=False) * scale[None, :, None, None] + shift[None, :, None, None]


def batchnorm_backward(x: np.ndarray, layer: BatchNormLayer, grad_out: np.ndarray):
    """Gradients of the training-mode forward pass: ``(grad_x, grad_gamma, grad_beta)``."""
    _check4(x)
    if grad_out.shape != x.shape or x.shape[1] != layer.channels:
        raise ValueError(f"shape mismatch: x {x.shape}, grad_out {grad_out.shape}")
    dt = np.result_type(x.dtype, grad_out.dtype, np.float32)
    x = x.astype(dt, copy=False)
    g = grad_out.astype(dt, copy=False)
    mean, var = _batch_stats(x)
    inv = 1.0 / np.sqrt(var + layer.eps)
    xhat = (x - mean[None, :, None, None].astype(dt)) * inv[None, :, None, None].astype(dt)
    m = x.shape[0] * x.shape[2] * x.shape[3]
    grad_beta = g.sum(axis=(0, 2, 3), dtype=np.float64)
    grad_gamma = (g * xhat).sum(axis=(0, 2, 3), dtype=np.float64)
    coef = (layer.gamma.astype(np.float64) * inv / m)
    grad_x = coef[None, :, None, None].astype(dt) * (
        m * g - grad_beta[None, :, None, None].astype(dt) - xhat * grad_gamma[None, :, None, None].astype(dt)
    )
    return grad_x, grad_gamma.astype(dt), grad_beta.astype(dt)


class ReLU:
    def params(self):
        return []


def relu_forward(x):
    return np.maximum(x, 0)


def relu_backward(x, grad_out):
    return grad_out * (x > 0)


def softmax_channels(x: np.ndarray) -> np.ndarray:
    _check4(x)
    z = x - x.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def cross_entropy_loss(logits: np.ndarray, target) -> tuple[float, np.ndarray]:
    """Mean per-pixel cross-entropy against integer targets.

    ``target`` is (H, W) for batch size 1 or (N, H, W).  Returns the loss and
    its gradient with respect to ``logits``.
    """
    _check4(logits, "logits")
    n, c, h, w = logits.shape
    t = np.asarray(target)
    if t.shape == (h, w):
        t = t[None]
    if t.shape != (n, h, w):
        raise ValueError(f"target shape {t.shape} does not match logits {logits.shape}")
    if t.min() < 0 or t.max() >= c:
        raise ValueError(f"target labels must lie in [0, {c}), got range [{t.min()}, {t.max()}]")
    z = logits - logits.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - logsum
    onehot = np.zeros_like(logits, dtype=bool)
    np.put_along_axis(onehot, t[:, None].astype(np.int64), True, axis=1)
    count = n * h * w
    loss = -float(logp[onehot].sum(dtype=np.float64)) / count
    grad = (np.exp(logp) - onehot) / count
    return loss, grad.astype(logits.dtype, copy=False)


@dataclass
class SGD:
    """SGD with heavy-ball momentum: v <- momentum * v + g; p <- p - lr * v."""

    lr: float = 0.1
    momentum: float = 0.9
    velocity: list = field(default_factory=list)

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError("learning rate must be > 0")

    def step(self, params, grads):
        if not self.velocity:
            self.velocity = [np.zeros_like(p, dtype=np.float32) for p in params]
        for p, g, v in zip(params, grads, self.velocity):
            v *= self.momentum
            v += g
            p -= (self.lr * v).astype(p.dtype)


def sgd_step(params, grads, lr: float, momentum: float, velocity=None):
    """Functional form of :class:`SGD`; returns ``(new_params, new_velocity)``."""
    if lr <= 0:
        raise ValueError("learning rate must be > 0")
    if velocity is None:
        velocity = [np.zeros_like(np.asarray(p, dtype=np.float64)) for p in params]
    new_v = [momentum * np.asarray(v) + np.asarray(g) for v, g in zip(velocity, grads)]
    new_p = [np.asarray(p) - lr * v for p, v in zip(params, new_v)]
    return new_p, new_v


class Sequential:
    """Conv / batchnorm / ReLU stack with a manual backward pass."""

    def __init__(self, layers):
        self.layers = list(layers)
        self._inputs = []

    def params(self):
        return [p for layer in self.layers for p in layer.params()]

    def forward(self, x: np.ndarray, training: bool = True, update_stats: bool = True) -> np.ndarray:
        self._inputs = []
        for layer in self.layers:
            self._inputs.append(x)
            if isinstance(layer, ConvLayer):
                x = conv2d_forward(x, layer)
            elif isinstance(layer, BatchNormLayer):
                x = batchnorm_forward(x, layer, training, update_stats)
            else:
                x = relu_forward(x)
        return x

    def backward(self, grad: np.ndarray) -> list:
        """Backpropagate through the last training-mode forward; return parameter grads."""
        grads = []
        for layer, x in zip(reversed(self.layers), reversed(self._inputs)):
            if isinstance(layer, ConvLayer):
                grad, gw, gb = conv2d_backward(x, layer, grad)
                grads[:0] = [gw, gb]
            elif isinstance(layer, BatchNormLayer):
                grad, gg, gb = batchnorm_backward(x, layer, grad)
                grads[:0] = [gg, gb]
            else:
                grad = relu_backward(x, grad)
        return grads


def save_weights(net: Sequential, path) -> None:
    """Little-endian binary: 16-byte header (magic, version, layer count, reserved) then layers.

    Each layer starts with a uint32 kind.  Conv: kind, out, in, k (uint32),
    then weight and bias as float32.  Batchnorm: kind, channels (uint32),
    eps, momentum (float64), then gamma, beta, running mean and running
    variance as float32.  ReLU: kind and three zero uint32 words.
    """
    out = bytearray(struct.pack("<4sIII", WEIGHTS_MAGIC, WEIGHTS_VERSION, len(net.layers), 0))
    for layer in net.layers:
        if isinstance(layer, ConvLayer):
            out += struct.pack("<IIII", _KIND_CONV, layer.out_ch, layer.in_ch, layer.k)
            out += layer.weight.astype("<f4").tobytes() + layer.bias.astype("<f4").tobytes()
        elif isinstance(layer, BatchNormLayer):
            out += struct.pack("<IIdd", _KIND_BN, layer.channels, layer.eps, layer.momentum)
            for a in (layer.gamma, layer.beta, layer.running_mean, layer.running_var):
                out += a.astype("<f4").tobytes()
        else:
            out += struct.pack("<IIII", _KIND_RELU, 0, 0, 0)
    Path(path).write_bytes(bytes(out))


def load_weights(path) -> Sequential:
    buf = Path(path).read_bytes()
    magic, version, count, _ = struct.unpack_from("<4sIII", buf, 0)
    if magic != WEIGHTS_MAGIC or version != WEIGHTS_VERSION:
        raise ValueError(f"{path}: not a weights file (magic={magic!r}, version={version})")
    off = 16
    layers = []

    def take(n):
        nonlocal off
        a = np.frombuffer(buf, dtype="<f4", count=n, offset=off).astype(np.float32)
        off += 4 * n
        return a

    for _ in range(count):
        kind = struct.unpack_from("<I", buf, off)[0]
        if kind == _KIND_CONV:
            _, o, i, k = struct.unpack_from("<IIII", buf, off)
            off += 16
            w = take(o * i * k * k).reshape(o, i, k, k)
            layers.append(ConvLayer(w, take(o)))
        elif kind == _KIND_BN:
            _, c, eps, mom = struct.unpack_from("<IIdd", buf, off)
            off += 24
            g, b, rm, rv = (take(c) for _ in range(4))
            layers.append(BatchNormLayer(g, b, rm, rv, float(eps), float(mom)))
        elif kind == _KIND_RELU:
            off += 16
            layers.append(ReLU())
        else:
            raise ValueError(f"{path}: unknown layer kind {kind}")
    return Sequential(layers)
