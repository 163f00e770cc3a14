"""CNN mapping a (2, N, N) eigenvector tensor to 3K source coordinates."""

from __future__ import annotations

import copy
from dataclasses import asdict, dataclass, field

import numpy as np

from ..subspace import INPUT_MODES
from . import layers as L
from .layers import BatchNormParams, ConvLayerParams, FcLayerParams


@dataclass(frozen=True)
class Architecture:
    """Layer layout. Blocks 1-2 end in 2x2 max pooling, the last block in
    adaptive average pooling to ``pooled_size``; blocks flagged in
    ``residual_blocks`` wrap every unit after the first in an identity shortcut."""

    input_size: int
    num_outputs: int
    block_filters: tuple[int, ...] = (32, 64, 128, 256)
    convs_per_block: tuple[int, ...] = (2, 2, 3, 3)
    pools: tuple[str, ...] = ("max", "max", "none", "adaptive")
    residual_blocks: tuple[bool, ...] = (False, False, True, True)
    pooled_size: int = 4
    fc_widths: tuple[int, ...] = (1024, 512, 256)
    dropout_rate: float = 0.3
    output_activation: str = "linear"
    in_channels: int = 2
    # "signal": the K leading eigenvectors with the other columns zeroed; "full": every eigenvector
    input_mode: str = "signal"

    def __post_init__(self):
        if self.input_size < 4:
            raise ValueError(f"input size must be >= 4, got {self.input_size}")
        if not 0 <= self.dropout_rate < 1:
            raise ValueError("dropout rate must lie in [0, 1)")
        if self.input_mode not in INPUT_MODES:
            raise ValueError(f"unknown input mode {self.input_mode!r} (expected one of {INPUT_MODES})")
        if self.output_activation not in ("linear", "softmax"):
            raise ValueError(f"unknown output activation {self.output_activation!r}")
        n = len(self.block_filters)
        if not (len(self.convs_per_block) == len(self.pools) == len(self.residual_blocks) == n):
            raise ValueError("per-block settings must all have one entry per block")
        for conv_count, residual in zip(self.convs_per_block, self.residual_blocks):
            if residual and conv_count < 2:
                raise ValueError("a residual block needs at least two conv units")

    @classmethod
    def preset(cls, name: str, input_size: int, num_outputs: int, **overrides) -> "Architecture":
        if name == "paper":
            base = {}
        elif name == "desk":
            base = dict(block_filters=(8, 16, 32, 64), fc_widths=(128, 64, 32))
        else:
            raise ValueError(f"unknown preset {name!r} (expected 'paper' or 'desk')")
        base.update(overrides)
        return cls(input_size, num_outputs, **base)

    @property
    def input_columns(self) -> int | None:
        """Eigenvector columns fed to the network, or None for all of them."""
        return self.num_outputs // 3 if self.input_mode == "signal" else None

    @property
    def flat_features(self) -> int:
        return self.block_filters[-1] * self.pooled_size**2

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "Architecture":
        return cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in d.items()})


@dataclass
class ModelParams:
    arch: Architecture
    blocks: list[list[tuple[ConvLayerParams, BatchNormParams]]]
    fcs: list[tuple[FcLayerParams, BatchNormParams]]
    output: FcLayerParams
    label_low: np.ndarray | None = None
    label_high: np.ndarray | None = None
    meta: dict = field(default_factory=dict)

    def named_parameters(self) -> dict[str, np.ndarray]:
        """Trainable arrays in declaration order (live references)."""
        return {k: v for k, v, trainable in self._walk() if trainable}

    def named_arrays(self) -> dict[str, np.ndarray]:
        """Trainable arrays and batch-norm running statistics in declaration order."""
        return {k: v for k, v, _ in self._walk()}

    def _walk(self):
        def bn_items(prefix, bn):
            yield f"{prefix}.gamma", bn.gamma, True
            yield f"{prefix}.beta", bn.beta, True
            yield f"{prefix}.running_mean", bn.running_mean, False
            yield f"{prefix}.running_var", bn.running_var, False

        for b, units in enumerate(self.blocks, 1):
            for u, (conv, bn) in enumerate(units, 1):
                yield f"block{b}.conv{u}.kernels", conv.kernels, True
                yield f"block{b}.conv{u}.bias", conv.bias, True
                yield from bn_items(f"block{b}.bn{u}", bn)
        for i, (fc, bn) in enumerate(self.fcs, 1):
            yield f"fc{i}.weight", fc.weight, True
            yield f"fc{i}.bias", fc.bias, True
            yield from bn_items(f"fc{i}.bn", bn)
        yield "out.weight", self.output.weight, True
        yield "out.bias", self.output.bias, True

    def num_parameters(self) -> int:
        return sum(v.size for v in self.named_parameters().values())

    def astype(self, dtype) -> "ModelParams":
        clone = copy.deepcopy(self)
        for bn in clone._batchnorms():
            bn.gamma, bn.beta = bn.gamma.astype(dtype), bn.beta.astype(dtype)
            bn.running_mean, bn.running_var = bn.running_mean.astype(dtype), bn.running_var.astype(dtype)
        for conv in (c for units in clone.blocks for c, _ in units):
            conv.kernels, conv.bias = conv.kernels.astype(dtype), conv.bias.astype(dtype)
        for fc in [fc for fc, _ in clone.fcs] + [clone.output]:
            fc.weight, fc.bias = fc.weight.astype(dtype), fc.bias.astype(dtype)
        return clone

    def _batchnorms(self):
        return [bn for units in self.blocks for _, bn in units] + [bn for _, bn in self.fcs]


def init_model(arch: Architecture, rng: np.random.Generator, dtype=np.float64) -> ModelParams:
    """He-uniform weights (bound sqrt(6 / fan_in)), biases uniform in +/- 1/sqrt(fan_in),
    batch-norm gamma=1, beta=0."""

    def uniform(shape, fan_in, gain):
        bound = gain / np.sqrt(fan_in)
        return rng.uniform(-bound, bound, size=shape).astype(dtype)

    blocks = []
    c_in = arch.in_channels
    for filters, count in zip(arch.block_filters, arch.convs_per_block):
        units = []
        for _ in range(count):
            fan_in = c_in * L.KERNEL * L.KERNEL
            conv = ConvLayerParams(uniform((filters, c_in, L.KERNEL, L.KERNEL), fan_in, np.sqrt(6.0)),
                                   uniform((filters,), fan_in, 1.0))
            units.append((conv, BatchNormParams.identity(filters, dtype)))
            c_in = filters
        blocks.append(units)
    fcs = []
    width = arch.flat_features
    for out in arch.fc_widths:
        fc = FcLayerParams(uniform((out, width), width, np.sqrt(6.0)), uniform((out,), width, 1.0))
        fcs.append((fc, BatchNormParams.identity(out, dtype)))
        width = out
    output = FcLayerParams(uniform((arch.num_outputs, width), width, 1.0), uniform((arch.num_outputs,), width, 1.0))
    return ModelParams(arch, blocks, fcs, output)


def _block_forward(x, units, pool, residual, mode, pooled_size):
    caches = []
    if residual:
        y, c = L.conv_bn_relu_forward(x, *units[0], mode)
        caches.append(("unit", c))
        y, c = L.residual_block_forward(y, units[1:], mode)
        caches.append(("residual", c))
    else:
        y = x
        for conv, bn in units:
            y, c = L.conv_bn_relu_forward(y, conv, bn, mode)
            caches.append(("unit", c))
    if pool == "max":
        y, c = L.maxpool_forward(y)
        caches.append(("max", c))
    elif pool == "adaptive":
        y, c = L.adaptive_avg_pool_forward(y, pooled_size, pooled_size)
        caches.append(("adaptive", c))
    return y, caches


def model_forward(model: ModelParams, x: np.ndarray, mode: str = "infer",
                  rng: np.random.Generator | None = None):
    """Run the network on a (batch, 2, N, N) input.

    Dropout is applied only when ``mode == "train"`` and an ``rng`` is given.

    Returns:
        (outputs of shape (batch, 3K), tape for :func:`model_backward`).
    """
    arch = model.arch
    expected = (arch.in_channels, arch.input_size, arch.input_size)
    if x.ndim != 4 or x.shape[1:] != expected:
        raise ValueError(f"expected input of shape (batch, {expected[0]}, {expected[1]}, {expected[2]}), got {x.shape}")
    if mode not in ("train", "infer"):
        raise ValueError(f"unknown mode {mode!r}")
    tape = {"blocks": [], "fcs": []}
    y = x
    for units, pool, residual in zip(model.blocks, arch.pools, arch.residual_blocks):
        y, c = _block_forward(y, units, pool, residual, mode, arch.pooled_size)
        tape["blocks"].append(c)
    tape["flat_shape"] = y.shape
    y = y.reshape(y.shape[0], -1)
    drop_rng = rng if mode == "train" else None
    for fc, bn in model.fcs:
        y, c1 = L.linear_forward(y, fc)
        y, c2 = L.batchnorm_forward(y, bn, mode)
        y, c3 = L.relu_forward(y)
        y, c4 = L.dropout_forward(y, arch.dropout_rate, drop_rng)
        tape["fcs"].append((c1, c2, c3, c4))
    y, tape["out"] = L.linear_forward(y, model.output)
    if arch.output_activation == "softmax":
        y, tape["softmax"] = L.softmax_forward(y)
    return y, tape


def model_backward(model: ModelParams, tape, dout: np.ndarray, want_input_grad: bool = False):
    """Gradients of a scalar loss for every trainable array, keyed like ``named_parameters``."""
    grads: dict[str, np.ndarray] = {}
    d = dout
    if "softmax" in tape:
        d = L.softmax_backward(d, tape["softmax"])
    d, g = L.linear_backward(d, tape["out"])
    grads["out.weight"], grads["out.bias"] = g["weight"], g["bias"]
    for i in range(len(model.fcs), 0, -1):
        c1, c2, c3, c4 = tape["fcs"][i - 1]
        d = L.dropout_backward(d, c4)
        d = L.relu_backward(d, c3)
        d, g_bn = L.batchnorm_backward(d, c2)
        d, g_fc = L.linear_backward(d, c1)
        grads[f"fc{i}.weight"], grads[f"fc{i}.bias"] = g_fc["weight"], g_fc["bias"]
        grads[f"fc{i}.bn.gamma"], grads[f"fc{i}.bn.beta"] = g_bn["gamma"], g_bn["beta"]
    d = d.reshape(tape["flat_shape"])

    def put(b, u, g_conv, g_bn):
        grads[f"block{b}.conv{u}.kernels"] = g_conv["kernels"]
        grads[f"block{b}.conv{u}.bias"] = g_conv["bias"]
        grads[f"block{b}.bn{u}.gamma"] = g_bn["gamma"]
        grads[f"block{b}.bn{u}.beta"] = g_bn["beta"]

    for b in range(len(model.blocks), 0, -1):
        caches = tape["blocks"][b - 1]
        unit_no = model.arch.convs_per_block[b - 1]
        for kind, c in reversed(caches):
            if kind == "max":
                d = L.maxpool_backward(d, c)
            elif kind == "adaptive":
                d = L.adaptive_avg_pool_backward(d, c)
            elif kind == "residual":
                d, inner = L.residual_block_backward(d, c)
                for offset, (g_conv, g_bn) in enumerate(inner):
                    put(b, unit_no - len(inner) + 1 + offset, g_conv, g_bn)
                unit_no -= len(inner)
            else:
                d, g_conv, g_bn = L.conv_bn_relu_backward(d, c)
                put(b, unit_no, g_conv, g_bn)
                unit_no -= 1
    names = model.named_parameters()
    ordered = {k: grads[k] for k in names}
    if want_input_grad:
        return ordered, d
    return ordered


def parameter_count(arch: Architecture) -> int:
    """Closed-form trainable parameter count of an architecture."""
    total, c_in = 0, arch.in_channels
    for filters, count in zip(arch.block_filters, arch.convs_per_block):
        for _ in range(count):
            total += filters * c_in * 9 + filters + 2 * filters
            c_in = filters
    width = arch.flat_features
    for out in arch.fc_widths:
        total += out * width + out + 2 * out
        width = out
    return total + arch.num_outputs * width + arch.num_outputs
