"""Parameter containers on top of :mod:`rfbnet.tensor`."""
from __future__ import annotations

from typing import Iterator

import numpy as np

from . import tensor as T
from .tensor import Tensor


class Module:
    """Base class: parameters are discovered by walking attributes in
    definition order, so paths are stable across runs."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for key, value in vars(self).items():
            path = f"{prefix}{key}"
            if isinstance(value, Tensor) and value.requires_grad:
                yield path, value
            elif isinstance(value, Module):
                yield from value.named_parameters(path + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{path}.{i}.")

    def parameters(self) -> dict[str, Tensor]:
        return dict(self.named_parameters())

    def zero_grad(self) -> None:
        for p in self.parameters().values():
            p.grad = None

    def num_parameters(self) -> int:
        return sum(p.data.size for p in self.parameters().values())

    def astype(self, dtype) -> "Module":
        for p in self.parameters().values():
            p.data = p.data.astype(dtype)
        return self

    def __call__(self, x: Tensor) -> Tensor:
        return self.forward(x)

    def forward(self, x: Tensor) -> Tensor:
        raise NotImplementedError


class Conv2d(Module):
    """Convolution with optional trailing relu.

    ``padding=None`` picks the padding that preserves spatial size at
    stride 1 (odd kernels).
    """

    def __init__(self, in_channels, out_channels, kernel=(3, 3), stride=1, padding=None, dilation=1,
                 relu=True, bias=True, dtype=np.float32):
        kh, kw = T._pair(kernel)
        dh, dw = T._pair(dilation)
        if padding is None:
            padding = ((kh - 1) * dh // 2, (kw - 1) * dw // 2)
        self.stride = T._pair(stride)
        self.padding = T._pair(padding)
        self.dilation = (dh, dw)
        self.relu = relu
        self.weight = Tensor(np.zeros((out_channels, in_channels, kh, kw), dtype=dtype), requires_grad=True)
        self.bias = Tensor(np.zeros(out_channels, dtype=dtype), requires_grad=True) if bias else None

    @property
    def fan_in(self) -> int:
        _, cin, kh, kw = self.weight.shape
        return cin * kh * kw

    def forward(self, x: Tensor) -> Tensor:
        y = T.conv2d(x, self.weight, self.bias, self.stride, self.padding, self.dilation)
        return T.relu(y) if self.relu else y


class Pool2d(Module):
    def __init__(self, kind: str, kernel=3, stride=1, padding=None, dilation=1):
        kh, kw = T._pair(kernel)
        dh, dw = T._pair(dilation)
        if padding is None:
            padding = ((kh - 1) * dh // 2, (kw - 1) * dw // 2)
        self.kind = kind
        self.kernel = (kh, kw)
        self.stride = T._pair(stride)
        self.padding = T._pair(padding)
        self.dilation = (dh, dw)

    def forward(self, x: Tensor) -> Tensor:
        return T.pool2d(x, self.kind, self.kernel, self.stride, self.padding, self.dilation)


class Sequential(Module):
    def __init__(self, *layers: Module):
        self.layers = list(layers)

    def forward(self, x: Tensor) -> Tensor:
        for layer in self.layers:
            x = layer(x)
        return x


class Identity(Module):
    def forward(self, x: Tensor) -> Tensor:
        return x


def conv_layers(module: Module) -> Iterator[Conv2d]:
    """All :class:`Conv2d` layers reachable from ``module`` (itself included)."""
    if isinstance(module, Conv2d):
        yield module
        return
    for value in vars(module).values():
        items = value if isinstance(value, (list, tuple)) else [value]
        for item in items:
            if isinstance(item, Module):
                yield from conv_layers(item)
