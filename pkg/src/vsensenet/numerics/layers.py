"""Stateful layer objects wrapping the functional kernels.

A layer caches what its backward pass needs during ``forward`` and accumulates
parameter gradients into ``Param.grad`` during ``backward``. Layers are not
re-entrant: one forward, then at most one backward.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from ..errors import DimensionError
from . import functional as F


@dataclass(eq=False)
class Param:
    """A trainable tensor and its gradient buffer (same shape)."""

    data: np.ndarray
    grad: np.ndarray = field(init=False)

    def __post_init__(self):
        self.grad = np.zeros_like(self.data)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def zero_grad(self) -> None:
        self.grad.fill(0)


def uniform_init(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int,
                 dtype=np.float32) -> np.ndarray:
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


class Layer:
    """Base class. Subclasses fill ``self.params`` in declaration order."""

    check_inputs = True
    # First layer of a network fed by data: its input gradient is never used.
    skip_input_grad = False

    def __init__(self):
        self.params: dict[str, Param] = {}

    def __call__(self, x, training: bool = False, rng=None):
        return self.forward(x, training=training, rng=rng)

    def forward(self, x, training: bool = False, rng=None):
        raise NotImplementedError

    def backward(self, grad):
        raise NotImplementedError

    def config(self) -> dict:
        """Hyperparameters that identify the layer (used for fingerprints)."""
        return {"type": type(self).__name__}

    def parameters(self) -> list[Param]:
        return list(self.params.values())

    def astype(self, dtype) -> "Layer":
        for p in self.params.values():
            p.data = p.data.astype(dtype)
            p.grad = np.zeros_like(p.data)
        return self


class Conv2d(Layer):
    def __init__(self, c_in: int, c_out: int, k: int = 3, stride: int = 1, padding: int | None = None,
                 rng: np.random.Generator | None = None):
        super().__init__()
        self.c_in, self.c_out, self.k, self.stride = c_in, c_out, k, stride
        self.padding = k // 2 if padding is None else padding
        rng = rng or np.random.default_rng(0)
        fan_in = c_in * k * k
        self.params["kernels"] = Param(uniform_init(rng, (c_out, c_in, k, k), fan_in))
        self.params["bias"] = Param(uniform_init(rng, (c_out,), fan_in))

    def config(self):
        return {"type": "Conv2d", "c_in": self.c_in, "c_out": self.c_out, "k": self.k,
                "stride": self.stride, "padding": self.padding}

    def forward(self, x, training=False, rng=None):
        if self.check_inputs:
            F.check_finite(x, "Conv2d")
        self._x = x
        return F.conv2d(x, self.params["kernels"].data, self.params["bias"].data, self.stride, self.padding)

    def backward(self, grad):
        if self.skip_input_grad:
            g = grad.reshape(grad.shape[0], self.c_out, -1)
            cols = F.im2col(self._x, self.k, self.stride, self.padding, grad.shape[2:])
            self.params["kernels"].grad += np.matmul(g, cols.transpose(0, 2, 1)).sum(axis=0).reshape(
                self.params["kernels"].shape)
            self.params["bias"].grad += g.sum(axis=(0, 2))
            return None
        dx, dk, db = F.conv2d_backward(grad, self._x, self.params["kernels"].data, self.stride, self.padding)
        self.params["kernels"].grad += dk
        self.params["bias"].grad += db
        return dx


class ConvTranspose2d(Layer):
    def __init__(self, c_in: int, c_out: int, k: int = 3, stride: int = 1, padding: int | None = None,
                 rng: np.random.Generator | None = None):
        super().__init__()
        self.c_in, self.c_out, self.k, self.stride = c_in, c_out, k, stride
        self.padding = k // 2 if padding is None else padding
        rng = rng or np.random.default_rng(0)
        fan_in = c_in * k * k
        self.params["kernels"] = Param(uniform_init(rng, (c_in, c_out, k, k), fan_in))
        self.params["bias"] = Param(uniform_init(rng, (c_out,), fan_in))

    def config(self):
        return {"type": "ConvTranspose2d", "c_in": self.c_in, "c_out": self.c_out, "k": self.k,
                "stride": self.stride, "padding": self.padding}

    def forward(self, x, training=False, rng=None):
        if self.check_inputs:
            F.check_finite(x, "ConvTranspose2d")
        self._x = x
        return F.conv_transpose2d(x, self.params["kernels"].data, self.params["bias"].data,
                                  self.stride, self.padding)

    def backward(self, grad):
        dx, dk, db = F.conv_transpose2d_backward(grad, self._x, self.params["kernels"].data,
                                                 self.stride, self.padding)
        self.params["kernels"].grad += dk
        self.params["bias"].grad += db
        return dx


class MaxPool2d(Layer):
    def __init__(self, window: int = 2):
        super().__init__()
        self.window = window

    def config(self):
        return {"type": "MaxPool2d", "window": self.window}

    def forward(self, x, training=False, rng=None):
        out, self._idx = F.maxpool2d(x, self.window)
        return out

    def backward(self, grad):
        return F.maxpool2d_backward(grad, self._idx, self.window)


class Upsample2d(Layer):
    def __init__(self, factor: int = 2):
        super().__init__()
        self.factor = factor

    def config(self):
        return {"type": "Upsample2d", "factor": self.factor}

    def forward(self, x, training=False, rng=None):
        return F.upsample2d_nearest(x, self.factor)

    def backward(self, grad):
        return F.upsample2d_nearest_backward(grad, self.factor)


class Dense(Layer):
    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator | None = None):
        super().__init__()
        self.n_in, self.n_out = n_in, n_out
        rng = rng or np.random.default_rng(0)
        self.params["weights"] = Param(uniform_init(rng, (n_out, n_in), n_in))
        self.params["bias"] = Param(uniform_init(rng, (n_out,), n_in))

    def config(self):
        return {"type": "Dense", "n_in": self.n_in, "n_out": self.n_out}

    def forward(self, x, training=False, rng=None):
        if self.check_inputs:
            F.check_finite(x, "Dense")
        self._x = x
        return F.dense(x, self.params["weights"].data, self.params["bias"].data)

    def backward(self, grad):
        dx, dw, db = F.dense_backward(grad, self._x, self.params["weights"].data)
        self.params["weights"].grad += dw
        self.params["bias"].grad += db
        return dx


class Flatten(Layer):
    def config(self):
        return {"type": "Flatten"}

    def forward(self, x, training=False, rng=None):
        self._shape = x.shape
        return x.reshape(x.shape[0], -1)

    def backward(self, grad):
        return grad.reshape(self._shape)


class Reshape(Layer):
    def __init__(self, shape: tuple[int, ...]):
        super().__init__()
        self.shape = tuple(shape)

    def config(self):
        return {"type": "Reshape", "shape": list(self.shape)}

    def forward(self, x, training=False, rng=None):
        self._shape = x.shape
        return x.reshape(x.shape[0], *self.shape)

    def backward(self, grad):
        return grad.reshape(self._shape)


class ReLU(Layer):
    def config(self):
        return {"type": "ReLU"}

    def forward(self, x, training=False, rng=None):
        self._x = x
        return F.relu(x)

    def backward(self, grad):
        return F.relu_backward(grad, self._x)


class Sigmoid(Layer):
    def config(self):
        return {"type": "Sigmoid"}

    def forward(self, x, training=False, rng=None):
        self._y = F.sigmoid(x)
        return self._y

    def backward(self, grad):
        return F.sigmoid_backward(grad, self._y)


class Tanh(Layer):
    def config(self):
        return {"type": "Tanh"}

    def forward(self, x, training=False, rng=None):
        self._y = F.tanh(x)
        return self._y

    def backward(self, grad):
        return F.tanh_backward(grad, self._y)


class Dropout(Layer):
    def __init__(self, rate: float = 0.2):
        super().__init__()
        self.rate = rate

    def config(self):
        return {"type": "Dropout", "rate": self.rate}

    def forward(self, x, training=False, rng=None):
        out, self._mask = F.dropout(x, self.rate, training, rng)
        return out

    def backward(self, grad):
        return grad if self._mask is None else grad * self._mask


class LSTM(Layer):
    """Single LSTM layer over (N, T, D) input.

    With ``return_sequence`` the output is the (N, T, H) hidden sequence,
    otherwise the (N, H) final hidden state.
    """

    def __init__(self, n_in: int, hidden: int, return_sequence: bool = True,
                 rng: np.random.Generator | None = None):
        super().__init__()
        self.n_in, self.hidden, self.return_sequence = n_in, hidden, return_sequence
        rng = rng or np.random.default_rng(0)
        self.params["w_x"] = Param(uniform_init(rng, (4 * hidden, n_in), hidden))
        self.params["w_h"] = Param(uniform_init(rng, (4 * hidden, hidden), hidden))
        self.params["b"] = Param(uniform_init(rng, (4 * hidden,), hidden))

    def config(self):
        return {"type": "LSTM", "n_in": self.n_in, "hidden": self.hidden,
                "return_sequence": self.return_sequence}

    def forward(self, x, training=False, rng=None):
        if self.check_inputs:
            F.check_finite(x, "LSTM")
        p = self.params
        hs, h, _, self._cache = F.lstm_forward(x, p["w_x"].data, p["w_h"].data, p["b"].data)
        return hs if self.return_sequence else h

    def backward(self, grad):
        if self.return_sequence:
            out = F.lstm_backward(grad, self._cache)
        else:
            out = F.lstm_backward(None, self._cache, d_h_last=grad)
        dx, dwx, dwh, db = out[:4]
        self.params["w_x"].grad += dwx
        self.params["w_h"].grad += dwh
        self.params["b"].grad += db
        return dx


class Sequential(Layer):
    """Ordered container; optionally exposes the activation after layer ``tap``."""

    def __init__(self, layers: list[Layer]):
        super().__init__()
        self.layers = list(layers)
        for i, layer in enumerate(self.layers):
            for name, p in layer.params.items():
                self.params[f"{i}.{name}"] = p
        self.tapped: np.ndarray | None = None
        self.tap_index: int | None = None

    def config(self):
        return {"type": "Sequential", "layers": [layer.config() for layer in self.layers]}

    def forward(self, x, training=False, rng=None, stop: int | None = None):
        """Run the layers in order; with ``stop`` the output of layer ``stop`` is returned."""
        for i, layer in enumerate(self.layers):
            x = layer.forward(x, training=training, rng=rng)
            if i == self.tap_index:
                self.tapped = x
            if i == stop:
                break
        return x

    def backward(self, grad, tap_grad: np.ndarray | None = None):
        """Backpropagate; ``tap_grad`` is added to the gradient at the tap point."""
        for i in range(len(self.layers) - 1, -1, -1):
            if tap_grad is not None and i == self.tap_index:
                grad = grad + tap_grad if grad is not None else tap_grad
            grad = self.layers[i].backward(grad)
        return grad

    def backward_from_tap(self, tap_grad: np.ndarray):
        """Backpropagate a gradient that enters only at the tap point."""
        if self.tap_index is None:
            raise DimensionError("this Sequential has no tap")
        grad = tap_grad
        for i in range(self.tap_index, -1, -1):
            grad = self.layers[i].backward(grad)
        return grad
