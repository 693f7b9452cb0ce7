"""Stateful layer objects and the sequential :class:`Network` container.

Each layer wraps the pure functions of :mod:`cicnet.layers`, caches what its
backward pass needs, and exposes its trainable tensors as :class:`Param`
objects so the optimizer and the gradient checker can treat them uniformly.
"""
from dataclasses import dataclass
from typing import Dict, List

import numpy as np

from . import layers as L
from .errors import ShapeError


@dataclass
class Param:
    name: str
    value: np.ndarray
    grad: np.ndarray
    decay: bool = True


class Layer:
    kind = "layer"

    def forward(self, x: np.ndarray, training: bool) -> np.ndarray:
        raise NotImplementedError

    def backward(self, dy: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def params(self) -> List[Param]:
        return []

    def buffers(self) -> Dict[str, np.ndarray]:
        """Non-trainable state that a checkpoint must carry."""
        return {}


class Clc(Layer):
    kind = "clc"

    def __init__(self, spec: L.ClcSpec, c_in: int, rng: np.random.Generator,
                 bias: bool = True):
        self.spec = spec
        self.c_in = c_in
        kh, kw = spec.kernel
        fan_in = kh * kw * spec.window_len
        w = rng.standard_normal(spec.weight_shape(c_in)) * np.sqrt(2.0 / fan_in)
        self.w = L.ClcWeights(w, np.zeros(spec.out_channels(c_in)))
        self.has_bias = bias
        self._weights = Param("weights", self.w.weights, np.zeros_like(w))
        self._bias = Param("bias", self.w.bias, np.zeros_like(self.w.bias), decay=False)
        self._x = None

    def forward(self, x, training):
        self._x = x
        return L.clc_forward(x, self.spec, self.w)

    def backward(self, dy):
        dx, g = L.clc_backward(self._x, self.spec, self.w, dy)
        self._weights.grad[...] = g.weights
        self._bias.grad[...] = g.bias
        return dx

    def params(self):
        return [self._weights, self._bias] if self.has_bias else [self._weights]


class BatchNorm(Layer):
    kind = "bn"

    def __init__(self, channels: int, momentum: float = 0.1, eps: float = 1e-5):
        self.state = L.BnState.create(channels, momentum, eps)
        self._gamma = Param("gamma", self.state.gamma, np.zeros(channels), decay=False)
        self._beta = Param("beta", self.state.beta, np.zeros(channels), decay=False)
        self._x = None
        self._training = True

    def forward(self, x, training):
        self._x, self._training = x, training
        return L.bn_forward(x, self.state, training)

    def backward(self, dy):
        dx, dgamma, dbeta = L.bn_backward(self._x, self.state, dy, self._training)
        self._gamma.grad[...] = dgamma
        self._beta.grad[...] = dbeta
        return dx

    def params(self):
        return [self._gamma, self._beta]

    def buffers(self):
        return {"running_mean": self.state.running_mean, "running_var": self.state.running_var}


class ReLU(Layer):
    kind = "relu"

    def forward(self, x, training):
        self._x = x
        return L.relu_forward(x)

    def backward(self, dy):
        return L.relu_backward(self._x, dy)


class MaxPool(Layer):
    kind = "maxpool"

    def __init__(self, window, stride, pad=(0, 0, 0, 0), global_pool: bool = False):
        self.window, self.stride, self.pad = window, stride, pad
        self.global_pool = global_pool
        self._rec = None

    def geometry(self, h: int, w: int):
        if self.global_pool:
            return (h, w), (1, 1), (0, 0, 0, 0)
        return self.window, self.stride, self.pad

    def forward(self, x, training):
        window, stride, pad = self.geometry(*x.shape[2:])
        y, self._rec = L.maxpool_forward(x, window, stride, pad)
        return y

    def backward(self, dy):
        return L.maxpool_backward(self._rec, dy)


class Dropout(Layer):
    kind = "dropout"

    def __init__(self, rate: float, rng: np.random.Generator):
        if not 0 <= rate < 1:
            raise L.ParameterError(f"dropout rate must lie in [0, 1), got {rate}")
        self.rate = rate
        self.rng = rng
        self._mask = None

    def forward(self, x, training):
        y, self._mask = L.dropout_forward(x, self.rate, training, self.rng)
        return y

    def backward(self, dy):
        return L.dropout_backward(self._mask, dy)


class Network:
    """Ordered layers ending in class logits of shape ``(B, classes, 1, 1)``."""

    def __init__(self, layers: List[Layer], class_count: int, config=None):
        self.layers = layers
        self.class_count = class_count
        self.config = config

    def forward(self, x: np.ndarray, training: bool = False) -> np.ndarray:
        for layer in self.layers:
            x = layer.forward(x, training)
        if x.shape[1:] != (self.class_count, 1, 1):
            raise ShapeError(f"network output {x.shape} is not (B, {self.class_count}, 1, 1)")
        return x

    def backward(self, dlogits: np.ndarray) -> np.ndarray:
        d = dlogits
        for layer in reversed(self.layers):
            d = layer.backward(d)
        return d

    def loss_and_grad(self, x: np.ndarray, labels, training: bool = True):
        """Forward, softmax cross-entropy and backward.  Returns
        ``(loss, logits, dx)``; parameter gradients land in ``Param.grad``."""
        logits = self.forward(x, training)
        loss, dlogits = L.softmax_xent(logits, labels)
        dx = self.backward(dlogits)
        return loss, logits, dx

    def predict(self, x: np.ndarray) -> np.ndarray:
        return self.forward(x, training=False).reshape(x.shape[0], -1).argmax(axis=1)

    def named_params(self) -> List[Param]:
        out = []
        for i, layer in enumerate(self.layers):
            for p in layer.params():
                out.append(Param(f"{i}.{layer.kind}.{p.name}", p.value, p.grad, p.decay))
        return out

    def params(self) -> List[Param]:
        return [p for layer in self.layers for p in layer.params()]

    def state_tensors(self) -> Dict[str, np.ndarray]:
        """Every parameter and buffer keyed by a stable name."""
        out = {}
        for i, layer in enumerate(self.layers):
            for p in layer.params():
                out[f"{i}.{layer.kind}.{p.name}"] = p.value
            for name, buf in layer.buffers().items():
                out[f"{i}.{layer.kind}.{name}"] = buf
        return out

    def load_state_tensors(self, tensors: Dict[str, np.ndarray]) -> None:
        current = self.state_tensors()
        missing = set(current) - set(tensors)
        if missing:
            raise ShapeError(f"missing tensors: {sorted(missing)}")
        for name, arr in current.items():
            src = tensors[name]
            if src.shape != arr.shape:
                raise ShapeError(f"{name}: shape {src.shape} != {arr.shape}")
            arr[...] = src

    def rng_states(self) -> List[dict]:
        return [layer.rng.bit_generator.state for layer in self.layers if isinstance(layer, Dropout)]

    def set_rng_states(self, states: List[dict]) -> None:
        drops = [layer for layer in self.layers if isinstance(layer, Dropout)]
        if len(drops) != len(states):
            raise ShapeError("dropout RNG state count mismatch")
        for layer, st in zip(drops, states):
            layer.rng.bit_generator.state = st

    def param_count(self) -> int:
        return sum(p.value.size for p in self.params())
