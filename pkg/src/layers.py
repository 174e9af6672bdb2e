"""
Layer Kernels
=============

Forward and backward kernels for every layer kind the laboratory networks use:
dense, conv2d, maxpool, flatten, dropout, batchnorm and activation.

Conventions:
- Batches are numpy arrays with the batch dimension first; images are NHWC.
- Per-sample shapes (without the batch dimension) are what build() receives
  and returns, so a Network can check compatibility before any data flows.
- forward(x, train, record) caches what backward() needs only when record is
  true. Infer-mode forwards without record leave the layer untouched, which is
  what makes a trained network safe to share between threads.
- Parameter arrays are float32 unless the owning Network was cast (grad_check
  runs on a float64 copy).
"""

import logging
from dataclasses import asdict, dataclass
from typing import Dict, Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from errors import BackwardError, ShapeError

logger = logging.getLogger(__name__)

Shape = Tuple[int, ...]

LAYER_KINDS = ('dense', 'conv2d', 'maxpool', 'flatten', 'dropout', 'batchnorm', 'activation')
ACTIVATIONS = ('relu', 'leakyrelu', 'tanh', 'sigmoid', 'softmax', 'linear')


@dataclass(frozen=True)
class LayerSpec:
    """
    Declarative description of one layer.

    Only the fields relevant to `kind` are read:
    - dense: units
    - conv2d: filters, kernel, stride
    - maxpool: pool
    - dropout: rate
    - batchnorm: momentum, eps
    - activation: activation, alpha (leakyrelu only)
    """
    kind: str
    units: int = 0
    filters: int = 0
    kernel: int = 3
    stride: int = 1
    pool: int = 2
    rate: float = 0.0
    momentum: float = 0.99
    eps: float = 1e-3
    activation: str = 'linear'
    alpha: float = 0.2

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise ValueError(f"Unknown layer kind '{self.kind}' (expected one of {LAYER_KINDS})")
        if self.kind == 'dropout' and not 0.0 <= self.rate < 1.0:
            raise ValueError(f"Dropout rate must be in [0, 1), got {self.rate}")
        if self.kind == 'batchnorm' and not 0.0 < self.momentum < 1.0:
            raise ValueError(f"BatchNorm momentum must be in (0, 1), got {self.momentum}")
        if self.kind == 'activation':
            if self.activation not in ACTIVATIONS:
                raise ValueError(f"Unknown activation '{self.activation}'")
            if self.activation == 'leakyrelu' and self.alpha <= 0:
                raise ValueError(f"LeakyReLU alpha must be > 0, got {self.alpha}")
        if self.kind == 'dense' and self.units < 1:
            raise ValueError("Dense layer needs units >= 1")
        if self.kind == 'conv2d' and (self.filters < 1 or self.kernel < 1 or self.stride < 1):
            raise ValueError("Conv2D layer needs filters, kernel and stride >= 1")
        if self.kind == 'maxpool' and self.pool < 1:
            raise ValueError("MaxPool layer needs pool >= 1")

    # Shorthand constructors used by the model builders
    @classmethod
    def dense(cls, units: int) -> 'LayerSpec':
        return cls('dense', units=units)

    @classmethod
    def conv2d(cls, filters: int, kernel: int, stride: int = 1) -> 'LayerSpec':
        return cls('conv2d', filters=filters, kernel=kernel, stride=stride)

    @classmethod
    def maxpool(cls, pool: int = 2) -> 'LayerSpec':
        return cls('maxpool', pool=pool)

    @classmethod
    def flatten(cls) -> 'LayerSpec':
        return cls('flatten')

    @classmethod
    def dropout(cls, rate: float) -> 'LayerSpec':
        return cls('dropout', rate=rate)

    @classmethod
    def batchnorm(cls, momentum: float = 0.99) -> 'LayerSpec':
        return cls('batchnorm', momentum=momentum)

    @classmethod
    def act(cls, name: str, alpha: float = 0.2) -> 'LayerSpec':
        return cls('activation', activation=name, alpha=alpha)


def glorot_uniform(rng: np.random.Generator, shape: Shape, fan_in: int, fan_out: int) -> np.ndarray:
    """Fan-scaled uniform init, bound = sqrt(6 / (fan_in + fan_out))."""
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape).astype(np.float32)


class Layer:
    """Base class: parameters, non-trainable buffers and a backward cache."""

    def __init__(self, spec: LayerSpec):
        self.spec = spec
        self.name = spec.kind
        self.params: Dict[str, np.ndarray] = {}
        self.buffers: Dict[str, np.ndarray] = {}
        self.grads: Dict[str, np.ndarray] = {}
        self.input_shape: Shape = ()
        self.output_shape: Shape = ()
        self._cache = None

    def build(self, input_shape: Shape, rng: np.random.Generator) -> Shape:
        self.input_shape = tuple(input_shape)
        self.output_shape = self._output_shape(self.input_shape)
        self._init_params(rng)
        return self.output_shape

    def _output_shape(self, input_shape: Shape) -> Shape:
        return input_shape

    def _init_params(self, rng: np.random.Generator):
        pass

    def forward(self, x: np.ndarray, train: bool, record: bool) -> np.ndarray:
        raise NotImplementedError

    def backward(self, grad: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def _require_cache(self):
        if self._cache is None:
            raise BackwardError(f"[{self.name}] backward() called without a recorded forward pass")
        return self._cache

    def clear_cache(self):
        self._cache = None


class Dense(Layer):

    def _output_shape(self, input_shape: Shape) -> Shape:
        if len(input_shape) != 1:
            raise ShapeError(f"dense expects flat input, got per-sample shape {input_shape}",
                             layer=self.name, actual=input_shape)
        return (self.spec.units,)

    def _init_params(self, rng):
        fan_in, fan_out = self.input_shape[0], self.spec.units
        self.params['weight'] = glorot_uniform(rng, (fan_in, fan_out), fan_in, fan_out)
        self.params['bias'] = np.zeros(fan_out, dtype=np.float32)

    def forward(self, x, train, record):
        if record:
            self._cache = x
        return x @ self.params['weight'] + self.params['bias']

    def backward(self, grad):
        x = self._require_cache()
        self.grads['weight'] = x.T @ grad
        self.grads['bias'] = grad.sum(axis=0)
        return grad @ self.params['weight'].T


class Conv2D(Layer):
    """Valid-padding 2-D convolution on NHWC input, kernel stored as (k, k, C, F)."""

    def _output_shape(self, input_shape):
        if len(input_shape) != 3:
            raise ShapeError(f"conv2d expects (H, W, C) input, got {input_shape}",
                             layer=self.name, actual=input_shape)
        h, w, _ = input_shape
        k, s = self.spec.kernel, self.spec.stride
        if h < k or w < k:
            raise ShapeError(f"kernel {k}x{k} larger than input {h}x{w}", layer=self.name, actual=input_shape)
        return ((h - k) // s + 1, (w - k) // s + 1, self.spec.filters)

    def _init_params(self, rng):
        k, c, f = self.spec.kernel, self.input_shape[2], self.spec.filters
        self.params['kernel'] = glorot_uniform(rng, (k, k, c, f), k * k * c, k * k * f)
        self.params['bias'] = np.zeros(f, dtype=np.float32)

    def _columns(self, x: np.ndarray) -> np.ndarray:
        k, s = self.spec.kernel, self.spec.stride
        ho, wo, _ = self.output_shape
        # (N, H-k+1, W-k+1, C, k, k) view, strided, then laid out as rows of C*k*k
        windows = sliding_window_view(x, (k, k), axis=(1, 2))[:, ::s, ::s][:, :ho, :wo]
        return np.ascontiguousarray(windows).reshape(x.shape[0] * ho * wo, -1)

    def _flat_kernel(self) -> np.ndarray:
        k, c, f = self.spec.kernel, self.input_shape[2], self.spec.filters
        return self.params['kernel'].transpose(2, 0, 1, 3).reshape(c * k * k, f)

    def forward(self, x, train, record):
        cols = self._columns(x)
        out = cols @ self._flat_kernel() + self.params['bias']
        if record:
            self._cache = (x.shape, cols)
        return out.reshape((x.shape[0],) + self.output_shape)

    def backward(self, grad):
        x_shape, cols = self._require_cache()
        k, s = self.spec.kernel, self.spec.stride
        c, f = self.input_shape[2], self.spec.filters
        ho, wo, _ = self.output_shape
        g2 = grad.reshape(-1, f)
        self.grads['kernel'] = (cols.T @ g2).reshape(c, k, k, f).transpose(1, 2, 0, 3)
        self.grads['bias'] = g2.sum(axis=0)
        dcols = (g2 @ self._flat_kernel().T).reshape(x_shape[0], ho, wo, c, k, k)
        dx = np.zeros(x_shape, dtype=grad.dtype)
        for i in range(k):
            for j in range(k):
                dx[:, i:i + s * ho:s, j:j + s * wo:s, :] += dcols[..., i, j]
        return dx


class MaxPool(Layer):
    """Non-overlapping p x p max pooling; trailing rows/cols that do not fill a window are dropped."""

    def _output_shape(self, input_shape):
        if len(input_shape) != 3:
            raise ShapeError(f"maxpool expects (H, W, C) input, got {input_shape}",
                             layer=self.name, actual=input_shape)
        h, w, c = input_shape
        p = self.spec.pool
        if h < p or w < p:
            raise ShapeError(f"pool {p}x{p} larger than input {h}x{w}", layer=self.name, actual=input_shape)
        return (h // p, w // p, c)

    def _windows(self, x):
        p = self.spec.pool
        ho, wo, c = self.output_shape
        xr = x[:, :ho * p, :wo * p, :].reshape(x.shape[0], ho, p, wo, p, c)
        return xr.transpose(0, 1, 3, 5, 2, 4).reshape(x.shape[0], ho, wo, c, p * p)

    def forward(self, x, train, record):
        windows = self._windows(x)
        idx = windows.argmax(axis=-1)
        if record:
            self._cache = (x.shape, idx)
        return np.take_along_axis(windows, idx[..., None], axis=-1)[..., 0]

    def backward(self, grad):
        x_shape, idx = self._require_cache()
        p = self.spec.pool
        ho, wo, c = self.output_shape
        n = x_shape[0]
        dwin = np.zeros((n, ho, wo, c, p * p), dtype=grad.dtype)
        # ties route to the first maximum only
        np.put_along_axis(dwin, idx[..., None], grad[..., None], axis=-1)
        dwin = dwin.reshape(n, ho, wo, c, p, p).transpose(0, 1, 4, 2, 5, 3).reshape(n, ho * p, wo * p, c)
        dx = np.zeros(x_shape, dtype=grad.dtype)
        dx[:, :ho * p, :wo * p, :] = dwin
        return dx


class Flatten(Layer):

    def _output_shape(self, input_shape):
        return (int(np.prod(input_shape)),)

    def forward(self, x, train, record):
        if record:
            self._cache = x.shape
        return x.reshape(x.shape[0], -1)

    def backward(self, grad):
        return grad.reshape(self._require_cache())


class Dropout(Layer):
    """Inverted dropout: train mode scales kept units by 1/(1-rate); infer mode is the identity."""

    def __init__(self, spec):
        super().__init__(spec)
        self.rng = np.random.default_rng(0)
        self._identity = False

    def reseed(self, seed: int):
        self.rng = np.random.default_rng(seed)

    def forward(self, x, train, record):
        if not train or self.spec.rate == 0.0:
            if record:
                self._cache = None
                self._identity = True
            return x
        keep = 1.0 - self.spec.rate
        mask = (self.rng.random(x.shape) < keep).astype(x.dtype) / keep
        if record:
            self._cache = mask
            self._identity = False
        return x * mask

    def backward(self, grad):
        if self._identity:
            return grad
        return grad * self._require_cache()


class BatchNorm(Layer):
    """
    Batch normalisation over every axis but the last.

    Running statistics follow running = momentum * running + (1 - momentum) * batch
    and are touched only by train-mode forwards.
    """

    def _init_params(self, rng):
        f = self.input_shape[-1]
        self.params['gamma'] = np.ones(f, dtype=np.float32)
        self.params['beta'] = np.zeros(f, dtype=np.float32)
        self.buffers['running_mean'] = np.zeros(f, dtype=np.float32)
        self.buffers['running_var'] = np.ones(f, dtype=np.float32)

    def forward(self, x, train, record):
        axes = tuple(range(x.ndim - 1))
        gamma, beta = self.params['gamma'], self.params['beta']
        if train:
            mean = x.mean(axis=axes)
            var = x.var(axis=axes)
            m = self.spec.momentum
            rm, rv = self.buffers['running_mean'], self.buffers['running_var']
            rm[...] = m * rm + (1.0 - m) * mean
            rv[...] = m * rv + (1.0 - m) * var
        else:
            mean = self.buffers['running_mean']
            var = self.buffers['running_var']
        inv_std = 1.0 / np.sqrt(var + self.spec.eps)
        xhat = (x - mean) * inv_std
        if record:
            self._cache = (xhat, inv_std, train)
        return xhat * gamma + beta

    def backward(self, grad):
        xhat, inv_std, train = self._require_cache()
        axes = tuple(range(grad.ndim - 1))
        gamma = self.params['gamma']
        self.grads['gamma'] = (grad * xhat).sum(axis=axes)
        self.grads['beta'] = grad.sum(axis=axes)
        dxhat = grad * gamma
        if not train:
            return dxhat * inv_std
        n = grad.size // grad.shape[-1]
        return (inv_std / n) * (n * dxhat - dxhat.sum(axis=axes) - xhat * (dxhat * xhat).sum(axis=axes))


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def softmax(x: np.ndarray) -> np.ndarray:
    """Row-wise softmax over the last axis."""
    z = x - x.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


class Activation(Layer):

    def __init__(self, spec):
        super().__init__(spec)
        self.name = spec.activation

    def forward(self, x, train, record):
        kind = self.spec.activation
        if kind == 'relu':
            out = np.maximum(x, 0)
        elif kind == 'leakyrelu':
            out = np.where(x > 0, x, self.spec.alpha * x)
        elif kind == 'tanh':
            out = np.tanh(x)
        elif kind == 'sigmoid':
            out = _sigmoid(x)
        elif kind == 'softmax':
            out = softmax(x)
        else:
            out = x
        out = out.astype(x.dtype, copy=False)
        if record:
            self._cache = (x, out)
        return out

    def backward(self, grad):
        x, out = self._require_cache()
        kind = self.spec.activation
        if kind == 'relu':
            return grad * (x > 0)
        if kind == 'leakyrelu':
            return grad * np.where(x > 0, 1.0, self.spec.alpha).astype(grad.dtype)
        if kind == 'tanh':
            return grad * (1.0 - out * out)
        if kind == 'sigmoid':
            return grad * out * (1.0 - out)
        if kind == 'softmax':
            return out * (grad - (grad * out).sum(axis=-1, keepdims=True))
        return grad


_LAYER_CLASSES = {
    'dense': Dense,
    'conv2d': Conv2D,
    'maxpool': MaxPool,
    'flatten': Flatten,
    'dropout': Dropout,
    'batchnorm': BatchNorm,
    'activation': Activation,
}


def make_layer(spec: LayerSpec) -> Layer:
    return _LAYER_CLASSES[spec.kind](spec)


def spec_to_dict(spec: LayerSpec) -> dict:
    return asdict(spec)


def spec_from_dict(data: dict) -> LayerSpec:
    return LayerSpec(**data)
