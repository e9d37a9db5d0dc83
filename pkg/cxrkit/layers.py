"""
NumPy layers with hand-written reverse-mode gradients.

Every layer's ``forward`` returns ``(output, cache)`` and its ``backward`` takes the
upstream gradient plus that cache, so a layer holds no per-call state and a trained
network can serve several threads at once. Parameter gradients are written to
``Tensor.grad`` unless the layer is frozen, in which case they stay ``None``.
Arrays are (batch, channels, height, width), float64.
"""

from dataclasses import dataclass
from typing import Any, Dict, Optional, Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ShapeMismatchError

IN_EPS = 1e-5


@dataclass
class Tensor:
    """A named parameter array and its gradient (None when frozen or not yet computed)"""
    data: np.ndarray
    grad: Optional[np.ndarray] = None

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size


class Layer:
    """Base class: parameter-free layers only override forward/backward"""

    def __init__(self, name: str):
        self.name = name
        self.trainable = True

    def params(self) -> Dict[str, Tensor]:
        return {}

    def forward(self, x: np.ndarray) -> Tuple[np.ndarray, Any]:
        raise NotImplementedError

    def backward(self, dout: np.ndarray, cache: Any) -> np.ndarray:
        raise NotImplementedError

    def _set_grads(self, **grads: np.ndarray) -> None:
        params = self.params()
        for key, grad in grads.items():
            params[key].grad = grad if self.trainable else None

    def __repr__(self) -> str:
        return f"{type(self).__name__}({self.name!r})"


class Conv2D(Layer):
    """3x3 convolution, stride 1, zero padding 1, He-initialized"""

    def __init__(self, name: str, in_channels: int, out_channels: int, rng: np.random.Generator):
        super().__init__(name)
        self.in_channels = in_channels
        self.out_channels = out_channels
        scale = np.sqrt(2.0 / (in_channels * 9))
        self.weight = Tensor(rng.standard_normal((out_channels, in_channels, 3, 3)) * scale)
        self.bias = Tensor(np.zeros(out_channels))

    def params(self) -> Dict[str, Tensor]:
        return {"weight": self.weight, "bias": self.bias}

    @staticmethod
    def _windows(x: np.ndarray) -> np.ndarray:
        padded = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
        # (N, C, H, W, 3, 3)
        return sliding_window_view(padded, (3, 3), axis=(2, 3))

    def forward(self, x: np.ndarray) -> Tuple[np.ndarray, Any]:
        if x.shape[1] != self.in_channels:
            raise ShapeMismatchError(f"{self.name}: expected {self.in_channels} channels, got {x.shape[1]}")
        out = np.tensordot(self._windows(x), self.weight.data, axes=([1, 4, 5], [1, 2, 3]))
        out = out.transpose(0, 3, 1, 2) + self.bias.data[None, :, None, None]
        return np.ascontiguousarray(out), x

    def backward(self, dout: np.ndarray, cache: Any) -> np.ndarray:
        x = cache
        if self.trainable:
            self._set_grads(
                weight=np.tensordot(dout, self._windows(x), axes=([0, 2, 3], [0, 2, 3])),
                bias=dout.sum(axis=(0, 2, 3)),
            )
        else:
            self._set_grads(weight=None, bias=None)
        # full correlation with the flipped kernel
        flipped = self.weight.data[:, :, ::-1, ::-1]
        dx = np.tensordot(self._windows(dout), flipped, axes=([1, 4, 5], [0, 2, 3]))
        return np.ascontiguousarray(dx.transpose(0, 3, 1, 2))


class ReLU(Layer):
    def forward(self, x: np.ndarray) -> Tuple[np.ndarray, Any]:
        active = x > 0
        return np.where(active, x, 0.0), active

    def backward(self, dout: np.ndarray, cache: Any) -> np.ndarray:
        return np.where(cache, dout, 0.0)


class MaxPool2D(Layer):
    """2x2 max pooling with stride 2; odd trailing rows/columns are dropped"""

    def forward(self, x: np.ndarray) -> Tuple[np.ndarray, Any]:
        n, c, h, w = x.shape
        h2, w2 = h // 2, w // 2
        if h2 == 0 or w2 == 0:
            raise ShapeMismatchError(f"{self.name}: {h}x{w} input is too small to pool")
        tiles = (x[:, :, :2 * h2, :2 * w2]
                 .reshape(n, c, h2, 2, w2, 2)
                 .transpose(0, 1, 2, 4, 3, 5)
                 .reshape(n, c, h2, w2, 4))
        index = np.argmax(tiles, axis=-1)
        out = np.take_along_axis(tiles, index[..., None], axis=-1)[..., 0]
        return out, (x.shape, index)

    def backward(self, dout: np.ndarray, cache: Any) -> np.ndarray:
        shape, index = cache
        n, c, h2, w2 = dout.shape
        tiles = np.zeros((n, c, h2, w2, 4))
        np.put_along_axis(tiles, index[..., None], dout[..., None], axis=-1)
        dx = np.zeros(shape)
        dx[:, :, :2 * h2, :2 * w2] = (tiles.reshape(n, c, h2, w2, 2, 2)
                                      .transpose(0, 1, 2, 4, 3, 5)
                                      .reshape(n, c, 2 * h2, 2 * w2))
        return dx


class InstanceNorm(Layer):
    """Per-(sample, channel) standardization over the spatial axes, no affine parameters"""

    def __init__(self, name: str, eps: float = IN_EPS):
        super().__init__(name)
        self.eps = eps

    def forward(self, x: np.ndarray) -> Tuple[np.ndarray, Any]:
        mean = x.mean(axis=(2, 3), keepdims=True)
        inv_std = 1.0 / np.sqrt(x.var(axis=(2, 3), keepdims=True) + self.eps)
        normalized = (x - mean) * inv_std
        return normalized, (normalized, inv_std)

    def backward(self, dout: np.ndarray, cache: Any) -> np.ndarray:
        normalized, inv_std = cache
        mean_dout = dout.mean(axis=(2, 3), keepdims=True)
        mean_dout_x = (dout * normalized).mean(axis=(2, 3), keepdims=True)
        return inv_std * (dout - mean_dout - normalized * mean_dout_x)


class GlobalMaxPool(Layer):
    """(N, C, H, W) -> (N, C) spatial maximum per channel"""

    def forward(self, x: np.ndarray) -> Tuple[np.ndarray, Any]:
        n, c = x.shape[:2]
        flat = x.reshape(n, c, -1)
        index = np.argmax(flat, axis=-1)
        out = np.take_along_axis(flat, index[..., None], axis=-1)[..., 0]
        return out, (x.shape, index)

    def backward(self, dout: np.ndarray, cache: Any) -> np.ndarray:
        shape, index = cache
        n, c = shape[:2]
        dflat = np.zeros((n, c, shape[2] * shape[3]))
        np.put_along_axis(dflat, index[..., None], dout[..., None], axis=-1)
        return dflat.reshape(shape)


class Dense(Layer):
    """Fully connected layer, He-initialized weights (in, out) and zero bias"""

    def __init__(self, name: str, in_features: int, out_features: int, rng: np.random.Generator):
        super().__init__(name)
        self.in_features = in_features
        self.out_features = out_features
        self.weight = Tensor(rng.standard_normal((in_features, out_features)) * np.sqrt(2.0 / in_features))
        self.bias = Tensor(np.zeros(out_features))

    def params(self) -> Dict[str, Tensor]:
        return {"weight": self.weight, "bias": self.bias}

    def forward(self, x: np.ndarray) -> Tuple[np.ndarray, Any]:
        if x.shape[1] != self.in_features:
            raise ShapeMismatchError(f"{self.name}: expected {self.in_features} features, got {x.shape[1]}")
        return x @ self.weight.data + self.bias.data, x

    def backward(self, dout: np.ndarray, cache: Any, param_grads: bool = True) -> np.ndarray:
        x = cache
        if param_grads:
            if self.trainable:
                self._set_grads(weight=x.T @ dout, bias=dout.sum(axis=0))
            else:
                self._set_grads(weight=None, bias=None)
        return dout @ self.weight.data.T


class ResidualBlock(Layer):
    """
    conv -> ReLU -> conv -> ReLU, concatenated with the block input along channels,
    then 2x2 max pooling and instance normalization.
    """

    def __init__(self, name: str, in_channels: int, width: int, rng: np.random.Generator):
        super().__init__(name)
        self.in_channels = in_channels
        self.width = width
        self.conv1 = Conv2D(f"{name}.conv1", in_channels, width, rng)
        self.conv2 = Conv2D(f"{name}.conv2", width, width, rng)
        self.relu1 = ReLU(f"{name}.relu1")
        self.relu2 = ReLU(f"{name}.relu2")
        self.pool = MaxPool2D(f"{name}.pool")
        self.norm = InstanceNorm(f"{name}.norm")

    @property
    def out_channels(self) -> int:
        return self.width + self.in_channels

    def convs(self) -> Tuple[Conv2D, Conv2D]:
        return self.conv1, self.conv2

    def forward(self, x: np.ndarray) -> Tuple[np.ndarray, Any]:
        h, c_conv1 = self.conv1.forward(x)
        h, c_relu1 = self.relu1.forward(h)
        h, c_conv2 = self.conv2.forward(h)
        h, c_relu2 = self.relu2.forward(h)
        merged = np.concatenate([h, x], axis=1)
        if merged.shape[1] != self.out_channels:
            raise ShapeMismatchError(f"{self.name}: concatenation gave {merged.shape[1]} channels, "
                                     f"expected {self.out_channels}")
        h, c_pool = self.pool.forward(merged)
        out, c_norm = self.norm.forward(h)
        return out, (c_conv1, c_relu1, c_conv2, c_relu2, c_pool, c_norm)

    def backward(self, dout: np.ndarray, cache: Any) -> np.ndarray:
        c_conv1, c_relu1, c_conv2, c_relu2, c_pool, c_norm = cache
        d = self.norm.backward(dout, c_norm)
        d = self.pool.backward(d, c_pool)
        d_branch, d_skip = d[:, :self.width], d[:, self.width:]
        d = self.relu2.backward(d_branch, c_relu2)
        d = self.conv2.backward(d, c_conv2)
        d = self.relu1.backward(d, c_relu1)
        d = self.conv1.backward(d, c_conv1)
        return d + d_skip
