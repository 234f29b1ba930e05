"""Network building blocks with explicit forward/backward passes.

Every layer caches what its backward pass needs during forward and exposes
params()/grads() dictionaries keyed by dotted names. No autograd, no batch
axis: activations are (C, D, H, W) arrays for a single patch.
"""

from __future__ import annotations

import numpy as np

from . import kernels


class Conv3d:
    """3D convolution with bias; 'same' padding for k=3, none for k=1."""

    def __init__(self, name, cin, cout, k=3, stride=1, dtype=np.float32):
        self.name = name
        self.cin = cin
        self.cout = cout
        self.k = k
        self.stride = stride
        self.pad = (k - 1) // 2
        self.dtype = np.dtype(dtype)
        self.w = np.zeros((cout, cin, k, k, k), dtype=self.dtype)
        self.b = np.zeros(cout, dtype=self.dtype)
        self.dw = None
        self.db = None
        self._x = None

    def spec(self):
        return (self.name, "conv", self.cin, self.cout, self.k, self.stride)

    def init_params(self, rng):
        fan_in = self.cin * self.k ** 3
        self.w = rng.normal(0.0, np.sqrt(2.0 / fan_in), self.w.shape).astype(self.dtype)
        self.b = np.zeros(self.cout, dtype=self.dtype)

    def forward(self, x):
        self._x = x
        return kernels.conv3d_forward(x, self.w, self.b, self.stride, self.pad)

    def backward(self, dy):
        if self._x is None:
            raise RuntimeError(f"{self.name}: backward called before forward")
        dy = np.ascontiguousarray(dy, dtype=self.dtype)
        self.dw, self.db = kernels.conv3d_param_grad(dy, self._x, self.w.shape,
                                                     self.stride, self.pad)
        return kernels.conv3d_input_grad(dy, self.w, self._x.shape,
                                         self.stride, self.pad)

    def params(self):
        return {f"{self.name}.w": self.w, f"{self.name}.b": self.b}

    def grads(self):
        return {f"{self.name}.w": self.dw, f"{self.name}.b": self.db}


class ReLU:
    def __init__(self):
        self._mask = None

    def forward(self, x):
        self._mask = x > 0
        return np.where(self._mask, x, 0)

    def backward(self, dy):
        if self._mask is None:
            raise RuntimeError("ReLU backward called before forward")
        return np.where(self._mask, dy, 0)


class Upsample2x:
    """Nearest-neighbor doubling of all three spatial axes."""

    def forward(self, x):
        return x.repeat(2, axis=1).repeat(2, axis=2).repeat(2, axis=3)

    def backward(self, dy):
        c, d, h, w = dy.shape
        return dy.reshape(c, d // 2, 2, h // 2, 2, w // 2, 2).sum(axis=(2, 4, 6))


class ConvBlock:
    """conv -> relu, the basic unit everywhere."""

    def __init__(self, name, cin, cout, k=3, stride=1, dtype=np.float32):
        self.conv = Conv3d(name, cin, cout, k=k, stride=stride, dtype=dtype)
        self.relu = ReLU()

    def layers(self):
        return [self.conv]

    def forward(self, x):
        return self.relu.forward(self.conv.forward(x))

    def backward(self, dy):
        return self.conv.backward(self.relu.backward(dy))


class PlainBlock:
    """Channel-preserving conv -> relu stage."""

    kind = "plain"

    def __init__(self, name, c, dtype=np.float32):
        self.body = ConvBlock(name, c, c, dtype=dtype)

    def layers(self):
        return self.body.layers()

    def forward(self, x):
        return self.body.forward(x)

    def backward(self, dy):
        return self.body.backward(dy)


class ResBlock:
    """relu(conv(x) + x): the intra-level residual add."""

    kind = "res"

    def __init__(self, name, c, dtype=np.float32):
        self.conv = Conv3d(name, c, c, dtype=dtype)
        self.relu = ReLU()

    def layers(self):
        return [self.conv]

    def forward(self, x):
        return self.relu.forward(self.conv.forward(x) + x)

    def backward(self, dy):
        dz = self.relu.backward(dy)
        return self.conv.backward(dz) + dz


class IRBlock:
    """Inception-resnet stage: parallel 1x1x1 and 3x3x3 branches, concat,
    1x1x1 projection, residual add, relu."""

    kind = "ir"

    def __init__(self, name, c, dtype=np.float32):
        half = c // 2
        self.branch1 = ConvBlock(f"{name}.b1", c, half, k=1, dtype=dtype)
        self.branch3 = ConvBlock(f"{name}.b3", c, half, dtype=dtype)
        self.proj = Conv3d(f"{name}.proj", 2 * half, c, k=1, dtype=dtype)
        self.relu = ReLU()
        self._half = half

    def layers(self):
        return self.branch1.layers() + self.branch3.layers() + [self.proj]

    def forward(self, x):
        cat = np.concatenate([self.branch1.forward(x), self.branch3.forward(x)], axis=0)
        return self.relu.forward(self.proj.forward(cat) + x)

    def backward(self, dy):
        dz = self.relu.backward(dy)
        dcat = self.proj.backward(dz)
        d1 = self.branch1.backward(dcat[: self._half])
        d3 = self.branch3.backward(dcat[self._half:])
        return d1 + d3 + dz
