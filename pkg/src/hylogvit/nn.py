"""Parameter containers and the plain layers used by the networks."""

from __future__ import annotations

from typing import Dict, Iterator, List, Tuple

import numpy as np

from . import ops
from .tensor import ShapeError, Tensor


def uniform_init(rng: np.random.Generator, shape, fan_in: int, dtype) -> Tensor:
    bound = 1.0 / np.sqrt(fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape).astype(dtype), requires_grad=True)


def zeros_param(shape, dtype) -> Tensor:
    return Tensor(np.zeros(shape, dtype=dtype), requires_grad=True)


def ones_param(shape, dtype) -> Tensor:
    return Tensor(np.ones(shape, dtype=dtype), requires_grad=True)


class Module:
    """Attribute-walking parameter container.

    Parameters are ``Tensor`` attributes with ``requires_grad``; submodules may
    be attributes, lists of modules, or dicts of modules. Names follow
    attribute order, e.g. ``encoder.stages.0.down.weight``.
    """

    training: bool = True

    def named_children(self) -> Iterator[Tuple[str, "Module"]]:
        for key, val in vars(self).items():
            if isinstance(val, Module):
                yield key, val
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        yield f"{key}.{i}", item
            elif isinstance(val, dict):
                for k, item in val.items():
                    if isinstance(item, Module):
                        yield f"{key}.{k}", item

    def named_parameters(self, prefix: str = "") -> Iterator[Tuple[str, Tensor]]:
        for key, val in vars(self).items():
            if isinstance(val, Tensor) and val.requires_grad:
                yield prefix + key, val
        for name, child in self.named_children():
            yield from child.named_parameters(f"{prefix}{name}.")

    def named_modules(self, prefix: str = "") -> Iterator[Tuple[str, "Module"]]:
        yield prefix.rstrip("."), self
        for name, child in self.named_children():
            yield from child.named_modules(f"{prefix}{name}.")

    def parameters(self) -> List[Tensor]:
        return [p for _, p in self.named_parameters()]

    def state_dict(self) -> Dict[str, np.ndarray]:
        return {k: p.data for k, p in self.named_parameters()}

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def train(self, mode: bool = True) -> "Module":
        for _, m in self.named_modules():
            m.training = mode
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def forward(self, *args, **kwargs):
        raise NotImplementedError


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, dtype=np.float32):
        self.weight = uniform_init(rng, (d_in, d_out), d_in, dtype)
        self.bias = zeros_param((d_out,), dtype)

    def forward(self, x: Tensor) -> Tensor:
        return x @ self.weight + self.bias


class LayerNorm(Module):
    def __init__(self, dim: int, dtype=np.float32):
        self.gamma = ones_param((dim,), dtype)
        self.beta = zeros_param((dim,), dtype)

    def forward(self, x: Tensor) -> Tensor:
        return ops.layernorm(x, self.gamma, self.beta, axis=-1)


class Conv2d(Module):
    def __init__(self, c_in: int, c_out: int, k: int, rng: np.random.Generator,
                 stride: int = 1, pad: int = 0, dtype=np.float32):
        self.weight = uniform_init(rng, (k, k, c_in, c_out), k * k * c_in, dtype)
        self.bias = zeros_param((c_out,), dtype)
        self.stride = stride
        self.pad = pad

    def forward(self, x: Tensor) -> Tensor:
        return ops.conv2d(x, self.weight, self.bias, self.stride, self.pad)


class ConvTranspose2d(Module):
    """Maps ``c_in`` to ``c_out`` channels; kernel stored as ``k x k x c_out x c_in``."""

    def __init__(self, c_in: int, c_out: int, k: int, rng: np.random.Generator,
                 stride: int = 1, pad: int = 0, dtype=np.float32):
        self.weight = uniform_init(rng, (k, k, c_out, c_in), k * k * c_in, dtype)
        self.bias = zeros_param((c_out,), dtype)
        self.stride = stride
        self.pad = pad

    def forward(self, x: Tensor) -> Tensor:
        return ops.conv_transpose2d(x, self.weight, self.bias, self.stride, self.pad)


class ActNorm(Module):
    """Per-channel affine ``scale * (x + bias)`` with data-dependent initialisation.

    The first forward in training mode sets ``bias = -mean`` and
    ``scale = 1/std`` from the incoming batch so that batch leaves with zero
    mean and unit variance per channel. After that both are plain parameters.
    """

    def __init__(self, channels: int, dtype=np.float32):
        self.scale = ones_param((channels,), dtype)
        self.bias = zeros_param((channels,), dtype)
        self.initialized = False

    def initialize(self, x: Tensor) -> None:
        axes = tuple(range(x.ndim - 1))
        xd = x.data.astype(np.float64)
        mu = xd.mean(axis=axes)
        std = xd.std(axis=axes)
        dtype = self.scale.dtype
        self.bias.data = (-mu).astype(dtype)
        self.scale.data = (1.0 / np.maximum(std, 1e-6)).astype(dtype)
        self.initialized = True

    def forward(self, x: Tensor) -> Tensor:
        if not self.initialized:
            if not self.training:
                raise RuntimeError("ActNorm used in inference mode before data-dependent initialisation")
            self.initialize(x)
        if x.shape[-1] != self.scale.shape[0]:
            raise ShapeError(f"ActNorm over {self.scale.shape[0]} channels got input {x.shape}")
        return self.scale * (x + self.bias)


def actnorm(x: Tensor, params: ActNorm) -> Tensor:
    return params(x)


class ConvNormReLU(Module):
    """Plain conv -> ActNorm -> relu, the unit used throughout the stage machinery."""

    def __init__(self, conv: Module, channels: int, dtype=np.float32):
        self.conv = conv
        self.norm = ActNorm(channels, dtype)

    def forward(self, x: Tensor) -> Tensor:
        return ops.relu(self.norm(self.conv(x)))


class ResBlock(Module):
    """Basic residual block: 3x3 conv, ActNorm, relu, 3x3 conv, identity skip."""

    def __init__(self, channels: int, rng: np.random.Generator, dtype=np.float32):
        self.conv1 = Conv2d(channels, channels, 3, rng, pad=1, dtype=dtype)
        self.norm = ActNorm(channels, dtype)
        self.conv2 = Conv2d(channels, channels, 3, rng, pad=1, dtype=dtype)

    def forward(self, x: Tensor) -> Tensor:
        return x + self.conv2(ops.relu(self.norm(self.conv1(x))))
