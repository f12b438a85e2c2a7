"""
Layers Module
Parameter containers and the small set of learned layers the codec is built from.
"""
import math

import numpy as np

import tensor as T
from tensor import Tensor


# =============================================================================
# PARAMETERS AND MODULES
# =============================================================================

class Parameter(Tensor):
    """A leaf tensor that the optimizer updates.

    init_std is the standard deviation the values were drawn with (truncated normal),
    or None for constant-initialized parameters such as norm gains.
    """

    def __init__(self, data, init_std: float = None):
        super().__init__(data, requires_grad=True)
        self.init_std = init_std

    def __repr__(self):
        return f"Parameter(shape={self.shape})"


class Module:
    """Base class: parameters are discovered from attributes in insertion order."""

    training = True

    def forward(self, *args, **kwargs):
        raise NotImplementedError

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def children(self):
        for value in vars(self).values():
            if isinstance(value, Module):
                yield value
            elif isinstance(value, (list, tuple)):
                for item in value:
                    if isinstance(item, Module):
                        yield item

    def named_parameters(self, prefix: str = ""):
        for name, value in vars(self).items():
            if isinstance(value, Parameter):
                yield prefix + name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(f"{prefix}{name}.")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Parameter):
                        yield f"{prefix}{name}.{i}", item
                    elif isinstance(item, Module):
                        yield from item.named_parameters(f"{prefix}{name}.{i}.")

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def parameter_count(self) -> int:
        return int(sum(p.size for p in self.parameters()))

    def train(self, mode: bool = True):
        self.training = mode
        for child in self.children():
            child.train(mode)
        return self

    def eval(self):
        return self.train(False)

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None


def truncated_normal(rng: np.random.Generator, shape, std: float) -> np.ndarray:
    """Normal(0, std) samples with every value outside +-2 std redrawn."""
    values = rng.normal(0.0, std, size=shape)
    outside = np.abs(values) > 2.0 * std
    while outside.any():
        values[outside] = rng.normal(0.0, std, size=int(outside.sum()))
        outside = np.abs(values) > 2.0 * std
    return values


# =============================================================================
# LAYERS
# =============================================================================

class Linear(Module):
    """y = x @ W + b on the last axis; W is (in, out)."""

    def __init__(self, in_features: int, out_features: int, rng: np.random.Generator,
                 std: float = 0.02, bias: bool = True):
        self.weight = Parameter(truncated_normal(rng, (in_features, out_features), std), init_std=std)
        self.bias = Parameter(np.zeros(out_features)) if bias else None

    def forward(self, x):
        out = T.matmul(x, self.weight)
        return out + self.bias if self.bias is not None else out


class LayerNorm(Module):
    def __init__(self, dim: int, eps: float = 1e-5):
        self.gain = Parameter(np.ones(dim))
        self.bias = Parameter(np.zeros(dim))
        self.eps = eps

    def forward(self, x):
        mu = x.mean(axis=-1, keepdims=True)
        centered = x - mu
        var = (centered * centered).mean(axis=-1, keepdims=True)
        return centered / T.sqrt(var + self.eps) * self.gain + self.bias


class Conv2d(Module):
    """Square-kernel convolution; weights are truncated normal scaled by fan-in."""

    def __init__(self, in_channels: int, out_channels: int, kernel: int, rng: np.random.Generator,
                 stride: int = 1, padding: int = 0, groups: int = 1, std: float = None):
        fan_in = in_channels // groups * kernel * kernel
        std = std if std is not None else 1.0 / math.sqrt(fan_in)
        shape = (out_channels, in_channels // groups, kernel, kernel)
        self.weight = Parameter(truncated_normal(rng, shape, std), init_std=std)
        self.bias = Parameter(np.zeros(out_channels))
        self.stride = stride
        self.padding = padding
        self.groups = groups

    def forward(self, x):
        return T.conv2d(x, self.weight, self.bias, self.stride, self.padding, self.groups)


class ConvTranspose2d(Module):
    def __init__(self, in_channels: int, out_channels: int, kernel: int, rng: np.random.Generator,
                 stride: int = 1, padding: int = 0, output_padding: int = 0, std: float = None):
        fan_in = max(1, in_channels * kernel * kernel // (stride * stride))
        std = std if std is not None else 1.0 / math.sqrt(fan_in)
        shape = (in_channels, out_channels, kernel, kernel)
        self.weight = Parameter(truncated_normal(rng, shape, std), init_std=std)
        self.bias = Parameter(np.zeros(out_channels))
        self.stride = stride
        self.padding = padding
        self.output_padding = output_padding

    def forward(self, x):
        return T.conv_transpose2d(x, self.weight, self.bias, self.stride, self.padding,
                                  self.output_padding)


# =============================================================================
# FUNCTIONAL HELPERS
# =============================================================================

def gelu(x):
    """Tanh approximation of GELU."""
    inner = (x + 0.044715 * x * x * x) * math.sqrt(2.0 / math.pi)
    return 0.5 * x * (1.0 + T.tanh(inner))


def pixel_shuffle(x, factor: int):
    """(B, C*r*r, H, W) -> (B, C, H*r, W*r)."""
    batch, channels, height, width = x.shape
    if channels % (factor * factor):
        raise T.ShapeError("pixel_shuffle", x.shape, (factor, factor))
    out_channels = channels // (factor * factor)
    x = x.reshape(batch, out_channels, factor, factor, height, width)
    x = x.transpose(0, 1, 4, 2, 5, 3)
    return x.reshape(batch, out_channels, height * factor, width * factor)


def map_to_tokens(x):
    """(B, C, H, W) feature map -> (B, H*W, C) raster-order token sequence."""
    batch, channels, height, width = x.shape
    return x.reshape(batch, channels, height * width).transpose(0, 2, 1)


def tokens_to_map(x, height: int, width: int):
    """(B, H*W, C) token sequence -> (B, C, H, W) feature map."""
    batch, tokens, channels = x.shape
    if tokens != height * width:
        raise T.ShapeError("tokens_to_map", x.shape, (height, width))
    return x.transpose(0, 2, 1).reshape(batch, channels, height, width)
