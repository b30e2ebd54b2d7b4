"""Parameter-owning layers and a minimal module container."""

from __future__ import annotations

import math

import numpy as np

from . import ops
from .tensor import Parameter, Tensor


def he_uniform(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    bound = math.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


class Module:
    """Base class: children and parameters are discovered in attribute order."""

    training = True

    def children(self):
        for v in vars(self).values():
            if isinstance(v, Module):
                yield v
            elif isinstance(v, (list, tuple)):
                yield from (m for m in v if isinstance(m, Module))

    def parameters(self) -> list:
        out = [v for v in vars(self).values() if isinstance(v, Parameter)]
        for child in self.children():
            out.extend(child.parameters())
        return out

    def named_parameters(self) -> dict:
        return {p.name: p for p in self.parameters()}

    def buffers(self) -> dict:
        """Non-trainable named state (batch-norm running statistics)."""
        out = {}
        for child in self.children():
            out.update(child.buffers())
        return out

    def train(self, mode=True):
        self.training = mode
        for child in self.children():
            child.train(mode)
        return self

    def eval(self):
        return self.train(False)

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def state_arrays(self) -> dict:
        """Every parameter and buffer keyed by its unique name."""
        out = {p.name: p.data for p in self.parameters()}
        for name, buf in self.buffers().items():
            out[name] = buf
        return out

    def load_state_arrays(self, arrays: dict, strict=True):
        params = self.named_parameters()
        bufs = self.buffers()
        missing = [k for k in list(params) + list(bufs) if k not in arrays]
        if strict and missing:
            raise KeyError(f"missing state entries: {missing[:5]}")
        for name, p in params.items():
            if name in arrays:
                if arrays[name].shape != p.data.shape:
                    raise ValueError(f"{name}: shape {arrays[name].shape} vs {p.data.shape}")
                p.data = np.array(arrays[name], dtype=np.float64)
        for name, b in bufs.items():
            if name in arrays:
                b[...] = arrays[name]


class Conv2d(Module):
    def __init__(self, rng, in_ch, out_ch, kernel, stride=1, padding=0, name="conv", channels_last=False):
        self.channels_last = channels_last
        self.stride = stride
        self.padding = padding
        self.weight = Parameter(he_uniform(rng, (out_ch, in_ch, kernel, kernel), in_ch * kernel * kernel),
                                f"{name}.weight")
        self.bias = Parameter(np.zeros(out_ch), f"{name}.bias")

    def __call__(self, x: Tensor) -> Tensor:
        return ops.conv2d(x, self.weight, self.bias, self.stride, self.padding, self.channels_last)


class Linear(Module):
    def __init__(self, rng, in_features, out_features, name="linear"):
        self.weight = Parameter(he_uniform(rng, (out_features, in_features), in_features), f"{name}.weight")
        self.bias = Parameter(np.zeros(out_features), f"{name}.bias")

    def __call__(self, x: Tensor) -> Tensor:
        return ops.linear(x, self.weight, self.bias)


class BatchNorm(Module):
    def __init__(self, channels, name="bn", channels_last=False):
        self.channels_last = channels_last
        self.name = name
        self.gamma = Parameter(np.ones(channels), f"{name}.gamma")
        self.beta = Parameter(np.zeros(channels), f"{name}.beta")
        self.running_mean = np.zeros(channels)
        self.running_var = np.ones(channels)

    def buffers(self):
        return {f"{self.name}.running_mean": self.running_mean,
                f"{self.name}.running_var": self.running_var}

    def __call__(self, x: Tensor) -> Tensor:
        return ops.batch_norm(x, self.gamma, self.beta, self.running_mean, self.running_var, self.training,
                              channels_last=self.channels_last)


class ConvBnRelu(Module):
    """Same-size convolution, batch-norm, ReLU; operates on NHWC maps."""

    def __init__(self, rng, in_ch, out_ch, kernel, name):
        self.conv = Conv2d(rng, in_ch, out_ch, kernel, padding=kernel // 2, name=f"{name}.conv",
                           channels_last=True)
        self.bn = BatchNorm(out_ch, name=f"{name}.bn", channels_last=True)

    def __call__(self, x):
        return ops.relu(self.bn(self.conv(x)))
