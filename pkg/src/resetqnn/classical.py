"""Classical network blocks with explicit forward/backward passes.

Images are (B, C, H, W) float64. Each component keeps its parameters in a
flat dict so a single optimizer state can cover the whole model; backward
passes return gradient dicts with matching keys. Convolutions are 3x3,
stride 1, pad 1; pooling is 2x2 max.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import SizeError

_POOL_OFFSETS = [(i, j) for i in range(3) for j in range(3)]


def _uniform_init(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    lim = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-lim, lim, shape)


# -- primitive layers ----------------------------------------------------------


def _im2col3(x: np.ndarray) -> np.ndarray:
    b, c, h, w = x.shape
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    cols = np.empty((b, c, 9, h, w))
    for k, (di, dj) in enumerate(_POOL_OFFSETS):
        cols[:, :, k] = xp[:, :, di : di + h, dj : dj + w]
    return cols


def conv2d_forward(x: np.ndarray, weight: np.ndarray, bias: np.ndarray):
    cols = _im2col3(x)
    out = np.einsum("fck,bckhw->bfhw", weight.reshape(weight.shape[0], -1, 9), cols)
    out += bias[None, :, None, None]
    return out, (cols, weight, x.shape)


def conv2d_backward(dout: np.ndarray, cache):
    cols, weight, x_shape = cache
    f = weight.shape[0]
    dw = np.einsum("bfhw,bckhw->fck", dout, cols).reshape(weight.shape)
    db = dout.sum(axis=(0, 2, 3))
    dcols = np.einsum("fck,bfhw->bckhw", weight.reshape(f, -1, 9), dout)
    b, c, h, w = x_shape
    dxp = np.zeros((b, c, h + 2, w + 2))
    for k, (di, dj) in enumerate(_POOL_OFFSETS):
        dxp[:, :, di : di + h, dj : dj + w] += dcols[:, :, k]
    return dxp[:, :, 1:-1, 1:-1], dw, db


def maxpool2_forward(x: np.ndarray):
    b, c, h, w = x.shape
    if h % 2 or w % 2:
        raise SizeError(f"pooling needs even dims, got {h}x{w}")
    tiles = (
        x.reshape(b, c, h // 2, 2, w // 2, 2)
        .transpose(0, 1, 2, 4, 3, 5)
        .reshape(b, c, h // 2, w // 2, 4)
    )
    idx = np.argmax(tiles, axis=-1)
    out = np.take_along_axis(tiles, idx[..., None], axis=-1)[..., 0]
    return out, (idx, x.shape)


def maxpool2_backward(dout: np.ndarray, cache):
    idx, x_shape = cache
    b, c, h, w = x_shape
    dtiles = np.zeros((b, c, h // 2, w // 2, 4))
    np.put_along_axis(dtiles, idx[..., None], dout[..., None], axis=-1)
    return (
        dtiles.reshape(b, c, h // 2, w // 2, 2, 2)
        .transpose(0, 1, 2, 4, 3, 5)
        .reshape(b, c, h, w)
    )


def relu_forward(x: np.ndarray):
    out = np.maximum(x, 0.0)
    return out, x > 0


def relu_backward(dout: np.ndarray, mask: np.ndarray) -> np.ndarray:
    return dout * mask


def dense_forward(x: np.ndarray, weight: np.ndarray, bias: np.ndarray):
    return x @ weight + bias, x


def dense_backward(dout: np.ndarray, x: np.ndarray, weight: np.ndarray):
    return dout @ weight.T, x.T @ dout, dout.sum(axis=0)


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


# -- model components ----------------------------------------------------------


class Compressor:
    """Two conv+relu+pool blocks flattened to a feature vector.

    For H x W inputs the output length is channels[1] * H * W / 16.
    """

    def __init__(self, in_channels: int = 1, channels=(8, 16), seed: int = 0):
        rng = np.random.default_rng(seed)
        c1, c2 = channels
        self.params = {
            "conv1_w": _uniform_init(rng, (c1, in_channels, 3, 3), in_channels * 9),
            "conv1_b": np.zeros(c1),
            "conv2_w": _uniform_init(rng, (c2, c1, 3, 3), c1 * 9),
            "conv2_b": np.zeros(c2),
        }

    def feature_dim(self, h: int, w: int) -> int:
        return self.params["conv2_w"].shape[0] * (h // 4) * (w // 4)

    def forward(self, x: np.ndarray):
        a, c1 = conv2d_forward(x, self.params["conv1_w"], self.params["conv1_b"])
        a, r1 = relu_forward(a)
        a, p1 = maxpool2_forward(a)
        a, c2 = conv2d_forward(a, self.params["conv2_w"], self.params["conv2_b"])
        a, r2 = relu_forward(a)
        a, p2 = maxpool2_forward(a)
        shape = a.shape
        return a.reshape(a.shape[0], -1), (c1, r1, p1, c2, r2, p2, shape)

    def backward(self, dfeat: np.ndarray, cache):
        c1, r1, p1, c2, r2, p2, shape = cache
        d = dfeat.reshape(shape)
        d = maxpool2_backward(d, p2)
        d = relu_backward(d, r2)
        d, dw2, db2 = conv2d_backward(d, c2)
        d = maxpool2_backward(d, p1)
        d = relu_backward(d, r1)
        d, dw1, db1 = conv2d_backward(d, c1)
        return {"conv1_w": dw1, "conv1_b": db1, "conv2_w": dw2, "conv2_b": db2}


class ParamProjector:
    """Two dense layers mapping features to circuit angles in (-pi, pi]."""

    def __init__(self, in_dim: int, hidden: int, out_dim: int, seed: int = 0):
        rng = np.random.default_rng(seed)
        self.params = {
            "dense1_w": _uniform_init(rng, (in_dim, hidden), in_dim),
            "dense1_b": np.zeros(hidden),
            "dense2_w": _uniform_init(rng, (hidden, out_dim), hidden),
            "dense2_b": np.zeros(out_dim),
        }

    def forward(self, z: np.ndarray):
        h_lin, x1 = dense_forward(z, self.params["dense1_w"], self.params["dense1_b"])
        h = np.tanh(h_lin)
        t_lin, x2 = dense_forward(h, self.params["dense2_w"], self.params["dense2_b"])
        t = np.tanh(t_lin)
        theta = np.pi * t
        return theta, (x1, h, x2, t)

    def backward(self, dtheta: np.ndarray, cache):
        x1, h, x2, t = cache
        d = dtheta * np.pi * (1.0 - t**2)
        d, dw2, db2 = dense_backward(d, x2, self.params["dense2_w"])
        d = d * (1.0 - h**2)
        d, dw1, db1 = dense_backward(d, x1, self.params["dense1_w"])
        grads = {"dense1_w": dw1, "dense1_b": db1, "dense2_w": dw2, "dense2_b": db2}
        return d, grads


class OutputHead:
    """Dense layer onto class logits plus softmax."""

    def __init__(self, in_dim: int, classes: int, seed: int = 0):
        rng = np.random.default_rng(seed)
        self.params = {
            "w": _uniform_init(rng, (in_dim, classes), in_dim),
            "b": np.zeros(classes),
        }

    def forward(self, m: np.ndarray):
        logits, x = dense_forward(m, self.params["w"], self.params["b"])
        return softmax(logits), x

    def backward_ce(self, probs: np.ndarray, labels: np.ndarray, cache):
        """Fused softmax + cross-entropy gradient, averaged over the batch."""
        b = probs.shape[0]
        dlogits = probs.copy()
        dlogits[np.arange(b), labels] -= 1.0
        dlogits /= b
        dm, dw, db = dense_backward(dlogits, cache, self.params["w"])
        return dm, {"w": dw, "b": db}


# -- optimizer and schedule ------------------------------------------------------


@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adamw_update(
    params: dict,
    grads: dict,
    state: AdamState,
    step: int,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
    weight_decay: float = 0.0,
) -> None:
    """In-place moment update with bias correction, then decoupled decay.

    step is 1-based; weight decay multiplies parameters by (1 - lr * decay)
    after the gradient step rather than entering the moments.
    """
    if step < 1:
        raise SizeError(f"step must be >= 1, got {step}")
    for key, g in grads.items():
        if key not in state.m:
            state.m[key] = np.zeros_like(params[key])
            state.v[key] = np.zeros_like(params[key])
        state.m[key] = beta1 * state.m[key] + (1 - beta1) * g
        state.v[key] = beta2 * state.v[key] + (1 - beta2) * g**2
        m_hat = state.m[key] / (1 - beta1**step)
        v_hat = state.v[key] / (1 - beta2**step)
        params[key] -= lr * m_hat / (np.sqrt(v_hat) + eps)
        if weight_decay:
            params[key] *= 1.0 - lr * weight_decay


def cosine_lr(step: int, total_steps: int, eta0: float) -> float:
    """eta0 * (1 + cos(pi * step / total)) / 2, from eta0 down to 0."""
    if not 0 <= step <= total_steps:
        raise SizeError(f"step {step} outside [0, {total_steps}]")
    return float(eta0 * (1.0 + np.cos(np.pi * step / total_steps)) / 2.0)
