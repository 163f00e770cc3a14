"""Layer kernels with hand-written backward passes.

Every ``*_forward`` returns ``(output, cache)`` and the matching
``*_backward`` consumes the upstream gradient and that cache. Feature maps
are laid out as (batch, channels, height, width).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

KERNEL = 3


@dataclass
class ConvLayerParams:
    kernels: np.ndarray  # (out, in, 3, 3)
    bias: np.ndarray  # (out,)

    def __post_init__(self):
        if self.kernels.ndim != 4 or self.kernels.shape[2:] != (KERNEL, KERNEL):
            raise ValueError(f"conv kernels must be (out, in, 3, 3), got {self.kernels.shape}")
        if self.bias.shape != (self.kernels.shape[0],):
            raise ValueError("conv bias length must equal the output channel count")


@dataclass
class BatchNormParams:
    gamma: np.ndarray
    beta: np.ndarray
    running_mean: np.ndarray
    running_var: np.ndarray
    epsilon: float = 1e-5
    momentum: float = 0.1

    def __post_init__(self):
        if not self.epsilon > 0:
            raise ValueError("epsilon must be positive")
        if not 0 < self.momentum < 1:
            raise ValueError("momentum must lie in (0, 1)")

    @classmethod
    def identity(cls, channels: int, dtype=np.float64) -> "BatchNormParams":
        return cls(np.ones(channels, dtype), np.zeros(channels, dtype),
                   np.zeros(channels, dtype), np.ones(channels, dtype))


@dataclass
class FcLayerParams:
    weight: np.ndarray  # (out, in)
    bias: np.ndarray  # (out,)

    def __post_init__(self):
        if self.weight.ndim != 2 or self.bias.shape != (self.weight.shape[0],):
            raise ValueError("fully connected weight must be (out, in) with a matching bias")


def _batched(x: np.ndarray) -> tuple[np.ndarray, bool]:
    return (x[None], True) if x.ndim == 3 else (x, False)


def conv2d_forward(x: np.ndarray, p: ConvLayerParams):
    """3x3 convolution, stride 1, zero padding 1; accepts (C,H,W) or (B,C,H,W)."""
    x, squeeze = _batched(x)
    b, c, h, w = x.shape
    out_ch, in_ch = p.kernels.shape[:2]
    if c != in_ch:
        raise ValueError(f"input has {c} channels, layer expects {in_ch}")
    xp = np.zeros((b, c, h + 2, w + 2), dtype=x.dtype)
    xp[:, :, 1:-1, 1:-1] = x
    # im2col by shifted slices: cheaper than pad + sliding windows for small maps
    cols = np.empty((b, h, w, c, KERNEL, KERNEL), dtype=x.dtype)
    for i in range(KERNEL):
        for j in range(KERNEL):
            cols[..., i, j] = xp[:, :, i:i + h, j:j + w].transpose(0, 2, 3, 1)
    cols = cols.reshape(b * h * w, c * KERNEL * KERNEL)
    wmat = p.kernels.reshape(out_ch, -1)
    out = (cols @ wmat.T + p.bias).reshape(b, h, w, out_ch).transpose(0, 3, 1, 2)
    out = np.ascontiguousarray(out)
    return (out[0] if squeeze else out), (cols, x.shape, p, squeeze)


def conv2d_backward(dout: np.ndarray, cache):
    cols, shape, p, squeeze = cache
    if squeeze:
        dout = dout[None]
    b, c, h, w = shape
    out_ch = p.kernels.shape[0]
    d2 = dout.transpose(0, 2, 3, 1).reshape(-1, out_ch)
    wmat = p.kernels.reshape(out_ch, -1)
    dk = (d2.T @ cols).reshape(p.kernels.shape)
    db = d2.sum(axis=0)
    dcols = (d2 @ wmat).reshape(b, h, w, c, KERNEL, KERNEL)
    dxp = np.zeros((b, c, h + 2, w + 2), dtype=dout.dtype)
    for i in range(KERNEL):
        for j in range(KERNEL):
            dxp[:, :, i:i + h, j:j + w] += dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
    dx = dxp[:, :, 1:-1, 1:-1]
    return (dx[0] if squeeze else dx), {"kernels": dk, "bias": db}


def batchnorm_forward(x: np.ndarray, p: BatchNormParams, mode: str = "train"):
    """Per-channel normalization; channels on axis 1, statistics over all other axes.

    Train mode uses batch statistics and updates the running averages in place.
    """
    axes = (0,) + tuple(range(2, x.ndim))
    bshape = (1, -1) + (1,) * (x.ndim - 2)
    if mode == "train":
        if x.shape[0] < 2:
            raise ValueError("batch normalization in train mode needs a batch of at least 2")
        mu = x.mean(axis=axes)
        var = x.var(axis=axes)
        m = p.momentum
        p.running_mean[...] = (1 - m) * p.running_mean + m * mu
        p.running_var[...] = (1 - m) * p.running_var + m * var
    elif mode == "infer":
        mu, var = p.running_mean, p.running_var
    else:
        raise ValueError(f"unknown mode {mode!r}")
    inv_std = 1.0 / np.sqrt(var + p.epsilon)
    xhat = (x - mu.reshape(bshape)) * inv_std.reshape(bshape)
    out = p.gamma.reshape(bshape) * xhat + p.beta.reshape(bshape)
    return out, (xhat, inv_std, p, axes, bshape, mode)


def batchnorm_backward(dout: np.ndarray, cache):
    xhat, inv_std, p, axes, bshape, mode = cache
    dgamma = (dout * xhat).sum(axis=axes)
    dbeta = dout.sum(axis=axes)
    dxhat = dout * p.gamma.reshape(bshape)
    if mode == "infer":
        dx = dxhat * inv_std.reshape(bshape)
    else:
        m = dout.size // dout.shape[1]
        dx = (inv_std.reshape(bshape) / m) * (
            m * dxhat
            - dxhat.sum(axis=axes).reshape(bshape)
            - xhat * (dxhat * xhat).sum(axis=axes).reshape(bshape)
        )
    return dx, {"gamma": dgamma, "beta": dbeta}


def relu_forward(x: np.ndarray):
    mask = x > 0
    return x * mask, mask


def relu_backward(dout: np.ndarray, mask):
    return dout * mask


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0)


def maxpool_forward(x: np.ndarray):
    """Non-overlapping 2x2 max, stride 2; odd trailing rows/columns are dropped."""
    b, c, h, w = x.shape
    h2, w2 = h // 2, w // 2
    if h2 == 0 or w2 == 0:
        raise ValueError(f"cannot 2x2-pool a {h}x{w} map")
    blocks = x[:, :, :2 * h2, :2 * w2].reshape(b, c, h2, 2, w2, 2).transpose(0, 1, 2, 4, 3, 5)
    blocks = blocks.reshape(b, c, h2, w2, 4)
    arg = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, arg[..., None], axis=-1)[..., 0]
    return out, (arg, x.shape)


def maxpool_backward(dout: np.ndarray, cache):
    arg, shape = cache
    b, c, h, w = shape
    h2, w2 = dout.shape[2:]
    onehot = np.zeros((b, c, h2, w2, 4), dtype=dout.dtype)
    np.put_along_axis(onehot, arg[..., None], dout[..., None], axis=-1)
    blocks = onehot.reshape(b, c, h2, w2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(b, c, 2 * h2, 2 * w2)
    dx = np.zeros(shape, dtype=dout.dtype)
    dx[:, :, :2 * h2, :2 * w2] = blocks
    return dx


def maxpool_2x2(x: np.ndarray) -> np.ndarray:
    lead = x.shape[:-2]
    out = maxpool_forward(x.reshape((-1, 1) + x.shape[-2:]))[0]
    return out.reshape(lead + out.shape[-2:])


def _pool_matrix(n_in: int, n_out: int, dtype) -> np.ndarray:
    # bin i covers [floor(i n_in / n_out), ceil((i + 1) n_in / n_out))
    m = np.zeros((n_out, n_in), dtype=dtype)
    for i in range(n_out):
        lo = (i * n_in) // n_out
        hi = -((-(i + 1) * n_in) // n_out)
        m[i, lo:hi] = 1.0 / (hi - lo)
    return m


def adaptive_avg_pool_forward(x: np.ndarray, out_h: int, out_w: int):
    ph = _pool_matrix(x.shape[-2], out_h, x.dtype)
    pw = _pool_matrix(x.shape[-1], out_w, x.dtype)
    out = ph @ x @ pw.T
    return out, (ph, pw)


def adaptive_avg_pool_backward(dout: np.ndarray, cache):
    ph, pw = cache
    return ph.T @ dout @ pw


def adaptive_avg_pool(x: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    return adaptive_avg_pool_forward(x, out_h, out_w)[0]


def linear_forward(x: np.ndarray, p: FcLayerParams):
    if x.shape[-1] != p.weight.shape[1]:
        raise ValueError(f"input width {x.shape[-1]} does not match layer input {p.weight.shape[1]}")
    return x @ p.weight.T + p.bias, (x, p)


def linear_backward(dout: np.ndarray, cache):
    x, p = cache
    return dout @ p.weight, {"weight": dout.T @ x, "bias": dout.sum(axis=0)}


def dropout_forward(x: np.ndarray, rate: float, rng: np.random.Generator | None):
    """Inverted dropout; identity when ``rng`` is None or the rate is zero."""
    if rng is None or rate == 0.0:
        return x, None
    mask = (rng.random(x.shape) >= rate).astype(x.dtype) / (1.0 - rate)
    return x * mask, mask


def dropout_backward(dout: np.ndarray, mask):
    return dout if mask is None else dout * mask


def softmax_forward(z: np.ndarray):
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    s = e / e.sum(axis=-1, keepdims=True)
    return s, s


def softmax_backward(dout: np.ndarray, s):
    return s * (dout - (dout * s).sum(axis=-1, keepdims=True))


def conv_bn_relu_forward(x, conv: ConvLayerParams, bn: BatchNormParams, mode: str):
    y, c1 = conv2d_forward(x, conv)
    y, c2 = batchnorm_forward(y, bn, mode)
    y, c3 = relu_forward(y)
    return y, (c1, c2, c3)


def conv_bn_relu_backward(dout, cache):
    c1, c2, c3 = cache
    d = relu_backward(dout, c3)
    d, g_bn = batchnorm_backward(d, c2)
    d, g_conv = conv2d_backward(d, c1)
    return d, g_conv, g_bn


def residual_block_forward(x: np.ndarray, layers, mode: str = "train"):
    """``x + F(x)`` where F is a stack of (conv, batchnorm) Conv-BN-ReLU units."""
    y, caches = x, []
    for conv, bn in layers:
        y, c = conv_bn_relu_forward(y, conv, bn, mode)
        caches.append(c)
    if y.shape != x.shape:
        raise ValueError(f"residual branch changes shape {x.shape} -> {y.shape}")
    return x + y, caches


def residual_block_backward(dout: np.ndarray, caches):
    d, grads = dout, []
    for c in reversed(caches):
        d, g_conv, g_bn = conv_bn_relu_backward(d, c)
        grads.append((g_conv, g_bn))
    return dout + d, grads[::-1]


def mse_loss(pred: np.ndarray, target: np.ndarray) -> float:
    if pred.shape != target.shape:
        raise ValueError(f"prediction shape {pred.shape} differs from target shape {target.shape}")
    return float(np.mean((pred - target) ** 2))


def mse_loss_grad(pred: np.ndarray, target: np.ndarray) -> np.ndarray:
    if pred.shape != target.shape:
        raise ValueError(f"prediction shape {pred.shape} differs from target shape {target.shape}")
    return 2.0 * (pred - target) / pred.size
