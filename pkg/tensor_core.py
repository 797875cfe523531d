#!/usr/bin/env python3
"""
Tensor Core
Dense NHWC tensor numerics with reverse-mode differentiation: the layer kinds,
the NetworkGraph that chains them, plain SGD and a deterministic training loop
"""

import copy
import logging
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from tqdm import tqdm

from bottlenet_errors import (
    BackwardError, DatasetError, NonFiniteGradientError, ShapeError,
)
from config.constants import (
    BATCHNORM_EPS, BATCHNORM_MOMENTUM, DEFAULT_BATCH_SIZE, HOLDOUT_FRACTION,
)
from synthetic_datasets import Dataset, center_crop, random_crop

logger = logging.getLogger(__name__)

Shape = Tuple[int, int, int]


class LayerKind(str, Enum):
    """Available layer kinds"""
    CONV2D = "conv2d"
    CONV2D_TRANSPOSE = "conv2d_transpose"
    RELU = "relu"
    BATCHNORM = "batchnorm"
    AVGPOOL_GLOBAL = "avgpool-global"
    DENSE = "dense"
    SOFTMAX_XENT_HEAD = "softmax-xent-head"
    CODEC = "codec"


@dataclass
class LayerSpec:
    """Layer kind plus its kind-specific hyperparameters"""
    kind: str
    params: Dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        self.kind = LayerKind(self.kind).value

    def to_dict(self) -> Dict[str, Any]:
        return {'kind': self.kind, **self.params}

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> 'LayerSpec':
        data = dict(data)
        kind = data.pop('kind')
        return cls(kind, data)


LAYER_REGISTRY: Dict[str, Callable] = {}


def register_layer(kind: LayerKind):
    def decorator(cls):
        LAYER_REGISTRY[kind.value] = cls
        return cls
    return decorator


def he_uniform(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    limit = np.sqrt(6.0 / max(fan_in, 1))
    return rng.uniform(-limit, limit, size=shape)


def same_padding(size: int, kernel: int, stride: int) -> Tuple[int, int, int]:
    """(output size, pad before, pad after) for 'same' padding: output = ceil(size / stride)"""
    out = -(-size // stride)
    total = max((out - 1) * stride + kernel - size, 0)
    return out, total // 2, total - total // 2


def _positive_int(params: Dict[str, Any], key: str, default=None) -> int:
    value = params.get(key, default)
    if value is None or int(value) != value or int(value) < 1:
        raise ShapeError(f"{key} must be an integer >= 1, got {value!r}")
    return int(value)


class Layer:
    """Base layer: forward caches what backward needs"""

    def __init__(self, spec: LayerSpec, in_shape: Shape, rng: np.random.Generator):
        self.spec = spec
        self.in_shape = tuple(in_shape)
        self.out_shape = self.output_shape(spec.params, self.in_shape)
        self.params: Dict[str, np.ndarray] = {}
        self.buffers: Dict[str, np.ndarray] = {}
        self._cache = None

    @staticmethod
    def output_shape(params: Dict[str, Any], in_shape: Shape) -> Shape:
        return tuple(in_shape)

    @property
    def kind(self) -> str:
        return self.spec.kind

    def forward(self, x: np.ndarray, training: bool) -> np.ndarray:
        raise NotImplementedError

    def backward(self, dy: np.ndarray) -> Tuple[np.ndarray, Dict[str, np.ndarray]]:
        raise NotImplementedError

    def _cached(self):
        if self._cache is None:
            raise BackwardError(f"{self.kind}: backward called without a recorded forward pass")
        return self._cache


@register_layer(LayerKind.CONV2D)
class Conv2D(Layer):
    """2-D convolution, weights (kh, kw, c_in, filters)"""

    def __init__(self, spec, in_shape, rng):
        super().__init__(spec, in_shape, rng)
        p = spec.params
        self.kh, self.kw = p['kernel_h'], p['kernel_w']
        self.stride = p.get('stride', 1)
        self.padding = p.get('padding', 'same')
        c_in, filters = self.in_shape[2], p['filters']
        self.params['weight'] = he_uniform(rng, (self.kh, self.kw, c_in, filters), self.kh * self.kw * c_in)
        self.params['bias'] = np.zeros(filters)

    @staticmethod
    def output_shape(params, in_shape):
        kh, kw = _positive_int(params, 'kernel_h'), _positive_int(params, 'kernel_w')
        stride = _positive_int(params, 'stride', 1)
        filters = _positive_int(params, 'filters')
        padding = params.get('padding', 'same')
        h, w, _ = in_shape
        if padding == 'same':
            return same_padding(h, kh, stride)[0], same_padding(w, kw, stride)[0], filters
        if padding == 'valid':
            if kh > h or kw > w:
                raise ShapeError(f"valid {kh}x{kw} filter does not fit {h}x{w} input")
            return (h - kh) // stride + 1, (w - kw) // stride + 1, filters
        raise ShapeError(f"padding must be 'same' or 'valid', got {padding!r}")

    def _pads(self):
        h, w, _ = self.in_shape
        if self.padding == 'valid':
            return 0, 0, 0, 0
        _, top, bottom = same_padding(h, self.kh, self.stride)
        _, left, right = same_padding(w, self.kw, self.stride)
        return top, bottom, left, right

    def forward(self, x, training):
        top, bottom, left, right = self._pads()
        xp = np.pad(x, ((0, 0), (top, bottom), (left, right), (0, 0)))
        ho, wo, filters = self.out_shape
        s = self.stride
        windows = sliding_window_view(xp, (self.kh, self.kw), axis=(1, 2))[:, ::s, ::s][:, :ho, :wo]
        # (B, ho, wo, c, kh, kw) -> rows ordered (kh, kw, c) like the weight
        cols = windows.transpose(0, 1, 2, 4, 5, 3).reshape(x.shape[0] * ho * wo, -1)
        w2 = self.params['weight'].reshape(-1, filters)
        out = cols @ w2 + self.params['bias']
        self._cache = (cols, xp.shape, x.shape[0])
        return out.reshape(x.shape[0], ho, wo, filters)

    def backward(self, dy):
        cols, padded_shape, batch = self._cached()
        ho, wo, filters = self.out_shape
        dy2 = dy.reshape(-1, filters)
        w2 = self.params['weight'].reshape(-1, filters)
        grads = {
            'weight': (cols.T @ dy2).reshape(self.params['weight'].shape),
            'bias': dy2.sum(axis=0),
        }
        dcols = (dy2 @ w2.T).reshape(batch, ho, wo, self.kh, self.kw, self.in_shape[2])
        dxp = np.zeros(padded_shape)
        s = self.stride
        for i in range(self.kh):
            for j in range(self.kw):
                dxp[:, i:i + s * ho:s, j:j + s * wo:s, :] += dcols[:, :, :, i, j, :]
        top, _, left, _ = self._pads()
        h, w, _ = self.in_shape
        return dxp[:, top:top + h, left:left + w, :], grads


@register_layer(LayerKind.CONV2D_TRANSPOSE)
class Conv2DTranspose(Layer):
    """
    Transposed convolution, weights (c_in, kh, kw, filters).

    Output is cropped to (out_h, out_w) with the same offsets a 'same' strided
    convolution from (out_h, out_w) would pad, so it exactly inverts that shape.
    """

    def __init__(self, spec, in_shape, rng):
        super().__init__(spec, in_shape, rng)
        p = spec.params
        self.kh, self.kw = p['kernel_h'], p['kernel_w']
        self.stride = p.get('stride', 1)
        c_in, filters = self.in_shape[2], p['filters']
        self.params['weight'] = he_uniform(rng, (c_in, self.kh, self.kw, filters), self.kh * self.kw * c_in)
        self.params['bias'] = np.zeros(filters)

    @staticmethod
    def output_shape(params, in_shape):
        kh, kw = _positive_int(params, 'kernel_h'), _positive_int(params, 'kernel_w')
        stride = _positive_int(params, 'stride', 1)
        filters = _positive_int(params, 'filters')
        out_h, out_w = _positive_int(params, 'out_h'), _positive_int(params, 'out_w')
        if kh < stride or kw < stride:
            raise ShapeError(f"transposed filter {kh}x{kw} smaller than stride {stride}")
        h, w, _ = in_shape
        if (h, w) != (same_padding(out_h, kh, stride)[0], same_padding(out_w, kw, stride)[0]):
            raise ShapeError(f"input {h}x{w} cannot be restored to {out_h}x{out_w} at stride {stride}")
        return out_h, out_w, filters

    def _full_and_offsets(self, batch):
        h, w, _ = self.in_shape
        out_h, out_w, filters = self.out_shape
        s = self.stride
        full = (batch, (h - 1) * s + self.kh, (w - 1) * s + self.kw, filters)
        _, top, _ = same_padding(out_h, self.kh, s)
        _, left, _ = same_padding(out_w, self.kw, s)
        return full, top, left

    def forward(self, x, training):
        batch = x.shape[0]
        h, w, c_in = self.in_shape
        out_h, out_w, filters = self.out_shape
        s = self.stride
        x2 = x.reshape(-1, c_in)
        cols = (x2 @ self.params['weight'].reshape(c_in, -1)).reshape(batch, h, w, self.kh, self.kw, filters)
        full_shape, top, left = self._full_and_offsets(batch)
        full = np.zeros(full_shape)
        for i in range(self.kh):
            for j in range(self.kw):
                full[:, i:i + s * h:s, j:j + s * w:s, :] += cols[:, :, :, i, j, :]
        self._cache = (x2, batch)
        return full[:, top:top + out_h, left:left + out_w, :] + self.params['bias']

    def backward(self, dy):
        x2, batch = self._cached()
        h, w, c_in = self.in_shape
        out_h, out_w, filters = self.out_shape
        s = self.stride
        full_shape, top, left = self._full_and_offsets(batch)
        dfull = np.zeros(full_shape)
        dfull[:, top:top + out_h, left:left + out_w, :] = dy
        dcols = np.empty((batch, h, w, self.kh, self.kw, filters))
        for i in range(self.kh):
            for j in range(self.kw):
                dcols[:, :, :, i, j, :] = dfull[:, i:i + s * h:s, j:j + s * w:s, :]
        dcols2 = dcols.reshape(batch * h * w, -1)
        w2 = self.params['weight'].reshape(c_in, -1)
        grads = {
            'weight': (x2.T @ dcols2).reshape(self.params['weight'].shape),
            'bias': dy.sum(axis=(0, 1, 2)),
        }
        return (dcols2 @ w2.T).reshape(batch, h, w, c_in), grads


@register_layer(LayerKind.RELU)
class ReLU(Layer):

    def forward(self, x, training):
        mask = x > 0
        self._cache = mask
        return np.where(mask, x, 0.0)

    def backward(self, dy):
        return np.where(self._cached(), dy, 0.0), {}


@register_layer(LayerKind.BATCHNORM)
class BatchNorm(Layer):
    """Per-channel batch normalization; eval mode uses frozen running statistics"""

    def __init__(self, spec, in_shape, rng):
        super().__init__(spec, in_shape, rng)
        c = self.in_shape[2]
        self.momentum = spec.params.get('momentum', BATCHNORM_MOMENTUM)
        self.eps = spec.params.get('eps', BATCHNORM_EPS)
        self.params['gamma'] = np.ones(c)
        self.params['beta'] = np.zeros(c)
        self.buffers['running_mean'] = np.zeros(c)
        self.buffers['running_var'] = np.ones(c)

    def forward(self, x, training):
        if training:
            mean = x.mean(axis=(0, 1, 2))
            var = x.var(axis=(0, 1, 2))
            m = self.momentum
            self.buffers['running_mean'] = m * self.buffers['running_mean'] + (1 - m) * mean
            self.buffers['running_var'] = m * self.buffers['running_var'] + (1 - m) * var
        else:
            mean, var = self.buffers['running_mean'], self.buffers['running_var']
        inv_std = 1.0 / np.sqrt(var + self.eps)
        xhat = (x - mean) * inv_std
        self._cache = (xhat, inv_std, training)
        return self.params['gamma'] * xhat + self.params['beta']

    def backward(self, dy):
        xhat, inv_std, training = self._cached()
        grads = {
            'gamma': (dy * xhat).sum(axis=(0, 1, 2)),
            'beta': dy.sum(axis=(0, 1, 2)),
        }
        dxhat = dy * self.params['gamma']
        if not training:
            return dxhat * inv_std, grads
        n = dy.shape[0] * dy.shape[1] * dy.shape[2]
        dx = inv_std / n * (
            n * dxhat - dxhat.sum(axis=(0, 1, 2)) - xhat * (dxhat * xhat).sum(axis=(0, 1, 2))
        )
        return dx, grads


@register_layer(LayerKind.AVGPOOL_GLOBAL)
class GlobalAvgPool(Layer):

    @staticmethod
    def output_shape(params, in_shape):
        return 1, 1, in_shape[2]

    def forward(self, x, training):
        self._cache = x.shape
        return x.mean(axis=(1, 2), keepdims=True)

    def backward(self, dy):
        shape = self._cached()
        return np.broadcast_to(dy / (shape[1] * shape[2]), shape).copy(), {}


@register_layer(LayerKind.DENSE)
class Dense(Layer):
    """Fully connected on the flattened (h, w, c) input, output (1, 1, units)"""

    def __init__(self, spec, in_shape, rng):
        super().__init__(spec, in_shape, rng)
        fan_in = int(np.prod(self.in_shape))
        units = spec.params['units']
        self.params['weight'] = he_uniform(rng, (fan_in, units), fan_in)
        self.params['bias'] = np.zeros(units)

    @staticmethod
    def output_shape(params, in_shape):
        return 1, 1, _positive_int(params, 'units')

    def forward(self, x, training):
        x2 = x.reshape(x.shape[0], -1)
        self._cache = x2
        return (x2 @ self.params['weight'] + self.params['bias']).reshape(x.shape[0], *self.out_shape)

    def backward(self, dy):
        x2 = self._cached()
        dy2 = dy.reshape(dy.shape[0], -1)
        grads = {'weight': x2.T @ dy2, 'bias': dy2.sum(axis=0)}
        return (dy2 @ self.params['weight'].T).reshape(dy.shape[0], *self.in_shape), grads


@register_layer(LayerKind.SOFTMAX_XENT_HEAD)
class SoftmaxCrossEntropyHead(Layer):
    """Passes logits through; the loss is computed by softmax_cross_entropy"""

    def forward(self, x, training):
        self._cache = True
        return x

    def backward(self, dy):
        self._cached()
        return dy, {}


def softmax_cross_entropy(logits: np.ndarray, labels: np.ndarray) -> Tuple[float, np.ndarray]:
    """Mean softmax cross-entropy and its gradient w.r.t. logits"""
    batch = logits.shape[0]
    z = logits.reshape(batch, -1)
    z = z - z.max(axis=1, keepdims=True)
    log_probs = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    rows = np.arange(batch)
    labels = np.asarray(labels, dtype=np.int64)
    loss = -log_probs[rows, labels].mean()
    grad = np.exp(log_probs)
    grad[rows, labels] -= 1.0
    return float(loss), (grad / batch).reshape(logits.shape)


# ============================================================================
# NETWORK GRAPH
# ============================================================================

class NetworkGraph:
    """Ordered layers with a designated set of candidate partition points"""

    def __init__(self, specs: Sequence[LayerSpec], input_shape: Sequence[int],
                 partition_points: Sequence[int], seed: int = 0):
        self.specs = [s if isinstance(s, LayerSpec) else LayerSpec.from_dict(s) for s in specs]
        self.input_shape: Shape = tuple(int(d) for d in input_shape)
        self.partition_points = [int(p) for p in partition_points]
        self.seed = seed
        self.training = False
        self.bottleneck = None
        self._recorded: Optional[Tuple[int, int]] = None
        self.input_grad: Optional[np.ndarray] = None

        n = len(self.specs)
        if len(self.partition_points) > n:
            raise ShapeError(f"{len(self.partition_points)} partition points for {n} layers")
        for a, b in zip(self.partition_points, self.partition_points[1:]):
            if b <= a:
                raise ShapeError(f"partition points must be strictly increasing: {self.partition_points}")
        if self.partition_points and not (0 <= self.partition_points[0] and self.partition_points[-1] < n):
            raise ShapeError(f"partition points {self.partition_points} out of range for {n} layers")

        rng = np.random.default_rng(seed)
        self.layers: List[Layer] = []
        shape = self.input_shape
        for index, spec in enumerate(self.specs):
            try:
                layer = LAYER_REGISTRY[spec.kind](spec, shape, rng)
            except ShapeError as e:
                raise ShapeError(str(e), layer_index=index) from e
            except KeyError as e:
                raise ShapeError(f"missing hyperparameter {e} for {spec.kind}", layer_index=index) from e
            self.layers.append(layer)
            shape = layer.out_shape

    def __len__(self) -> int:
        return len(self.layers)

    @property
    def output_shape(self) -> Shape:
        return self.layers[-1].out_shape if self.layers else self.input_shape

    @property
    def num_classes(self) -> int:
        return self.output_shape[-1]

    def shape_at(self, index: int) -> Shape:
        """Output shape of layer `index` (pure function of the specs)"""
        return self.layers[index].out_shape

    @property
    def codec_index(self) -> Optional[int]:
        """Index of the codec layer, None for a graph without a bottleneck"""
        for index, layer in enumerate(self.layers):
            if layer.kind == LayerKind.CODEC.value:
                return index
        return None

    def layer_for_partition(self, j: int) -> int:
        """Layer index of 1-based partition j"""
        if not 1 <= j <= len(self.partition_points):
            raise ShapeError(f"partition {j} not in 1..{len(self.partition_points)}")
        return self.partition_points[j - 1]

    def set_training(self, training: bool):
        self.training = bool(training)

    def forward(self, x: np.ndarray, upto: Optional[int] = None, start: int = 0,
                training: Optional[bool] = None) -> np.ndarray:
        """Run layers start..upto (inclusive) and record intermediates for backward"""
        training = self.training if training is None else training
        end = len(self.layers) - 1 if upto is None else upto
        if not 0 <= start <= end < len(self.layers):
            raise ShapeError(f"invalid layer range {start}..{end} for {len(self.layers)} layers")
        x = np.asarray(x, dtype=np.float64)
        for index in range(start, end + 1):
            layer = self.layers[index]
            if x.ndim != 4 or x.shape[1:] != layer.in_shape:
                raise ShapeError(f"expected (batch, {layer.in_shape}), got {x.shape}", layer_index=index)
            x = layer.forward(x, training)
        self._recorded = (start, end)
        return x

    def backward(self, loss_grad: np.ndarray) -> Dict[str, np.ndarray]:
        """Gradients for every parameter in the recorded range, keyed '<layer>.<name>'"""
        if self._recorded is None:
            raise BackwardError("backward called before any forward pass")
        start, end = self._recorded
        expected = self.layers[end].out_shape
        if loss_grad.shape[1:] != expected:
            raise ShapeError(f"loss gradient {loss_grad.shape} does not match output {expected}",
                             layer_index=end)
        collected = []
        g = np.asarray(loss_grad, dtype=np.float64)
        for index in range(end, start - 1, -1):
            g, layer_grads = self.layers[index].backward(g)
            collected.append((index, layer_grads))
        self.input_grad = g
        grads = {}
        for index, layer_grads in reversed(collected):
            for name, value in layer_grads.items():
                grads[f"{index}.{name}"] = value
        return grads

    def parameters(self) -> Dict[str, np.ndarray]:
        return {f"{i}.{name}": value for i, layer in enumerate(self.layers)
                for name, value in layer.params.items()}

    def buffers(self) -> Dict[str, np.ndarray]:
        return {f"{i}.{name}": value for i, layer in enumerate(self.layers)
                for name, value in layer.buffers.items()}

    def _assign(self, values: Dict[str, np.ndarray], attribute: str):
        for key, value in values.items():
            index, name = key.split('.', 1)
            target = getattr(self.layers[int(index)], attribute)
            if name not in target:
                raise ShapeError(f"unknown {attribute[:-1]} {key}")
            if target[name].shape != np.shape(value):
                raise ShapeError(f"{key}: expected {target[name].shape}, got {np.shape(value)}",
                                 layer_index=int(index))
            target[name] = np.array(value, dtype=np.float64)

    def set_parameters(self, params: Dict[str, np.ndarray]):
        self._assign(params, 'params')

    def set_buffers(self, buffers: Dict[str, np.ndarray]):
        self._assign(buffers, 'buffers')

    def apply_sgd(self, grads: Dict[str, np.ndarray], lr: float):
        params = self.parameters()
        self.set_parameters(sgd_step({k: params[k] for k in grads}, grads, lr))

    def copy(self) -> 'NetworkGraph':
        return copy.deepcopy(self)

    def to_spec(self) -> Dict[str, Any]:
        return {
            'input_shape': list(self.input_shape),
            'partition_points': list(self.partition_points),
            'layers': [spec.to_dict() for spec in self.specs],
        }

    @classmethod
    def from_spec(cls, spec: Dict[str, Any], seed: int = 0) -> 'NetworkGraph':
        return cls([LayerSpec.from_dict(layer) for layer in spec['layers']],
                   spec['input_shape'], spec.get('partition_points', []), seed=seed)


def forward(graph: NetworkGraph, x: np.ndarray, upto: Optional[int] = None) -> np.ndarray:
    return graph.forward(x, upto=upto)


def backward(graph: NetworkGraph, loss_grad: np.ndarray) -> Dict[str, np.ndarray]:
    return graph.backward(loss_grad)


def sgd_step(params: Dict[str, np.ndarray], grads: Dict[str, np.ndarray], lr: float) -> Dict[str, np.ndarray]:
    """p <- p - lr * g elementwise; aborts on any non-finite gradient"""
    if not lr > 0:
        raise ValueError(f"learning rate must be positive, got {lr}")
    bad = [key for key, g in grads.items() if not np.all(np.isfinite(g))]
    if bad:
        logger.error(f"[TRAIN] Non-finite gradient in {bad}; SGD step aborted")
        raise NonFiniteGradientError(bad)
    updated = {}
    for key, p in params.items():
        if key not in grads:
            updated[key] = p
            continue
        if np.shape(p) != np.shape(grads[key]):
            raise ShapeError(f"{key}: parameter {np.shape(p)} vs gradient {np.shape(grads[key])}")
        updated[key] = p - lr * grads[key]
    return updated


# ============================================================================
# TRAINING
# ============================================================================

@dataclass
class TrainResult:
    graph: NetworkGraph
    accuracy: float
    losses: List[float] = field(default_factory=list)


def _prepare(graph: NetworkGraph, batch: np.ndarray, crop: bool, rng=None) -> np.ndarray:
    if not crop:
        return batch
    size = graph.input_shape[:2]
    return random_crop(batch, size, rng) if rng is not None else center_crop(batch, size)


def evaluate(graph: NetworkGraph, dataset: Dataset, crop: bool = False, batch_size: int = 256) -> float:
    """Held-out accuracy in eval mode"""
    dataset.validate()
    was_training = graph.training
    graph.set_training(False)
    correct = 0
    for begin in range(0, len(dataset), batch_size):
        indices = np.arange(begin, min(begin + batch_size, len(dataset)))
        logits = graph.forward(_prepare(graph, dataset.tensor(indices), crop))
        correct += int((logits.reshape(len(indices), -1).argmax(axis=1) == dataset.labels[indices]).sum())
    graph.set_training(was_training)
    return correct / len(dataset)


def predict(graph: NetworkGraph, x: np.ndarray) -> np.ndarray:
    """Logits in eval mode"""
    was_training = graph.training
    graph.set_training(False)
    try:
        return graph.forward(x)
    finally:
        graph.set_training(was_training)


def train(graph: NetworkGraph, dataset: Dataset, epochs: int, lr: float, seed: int,
          batch_size: int = DEFAULT_BATCH_SIZE, holdout: float = HOLDOUT_FRACTION,
          crop: bool = False, progress: bool = False) -> TrainResult:
    """
    Train in place with minibatch SGD on softmax cross-entropy.

    Args:
        graph: graph to train (mutated and returned)
        dataset: labelled dataset; a seeded held-out split is kept for accuracy
        epochs: passes over the training split; 0 leaves the graph unchanged
        lr: learning rate
        seed: seeds the split and shuffle streams
        crop: random-crop training inputs to the graph input size (center crop at eval)

    Returns:
        TrainResult with the held-out accuracy
    """
    dataset.validate()
    if len(dataset) == 0:
        raise DatasetError("cannot train on an empty dataset")
    if dataset.num_classes > graph.num_classes:
        raise DatasetError(f"dataset has {dataset.num_classes} classes, graph outputs {graph.num_classes}")
    train_set, test_set = dataset.split(holdout, seed)
    rng = np.random.default_rng([seed, 1])
    losses = []

    graph.set_training(True)
    epoch_iter = tqdm(range(epochs), desc="Training", disable=not progress)
    for epoch in epoch_iter:
        order = rng.permutation(len(train_set))
        total = 0.0
        for begin in range(0, len(order), batch_size):
            indices = order[begin:begin + batch_size]
            x = _prepare(graph, train_set.tensor(indices), crop, rng)
            logits = graph.forward(x)
            loss, grad = softmax_cross_entropy(logits, train_set.labels[indices])
            graph.apply_sgd(graph.backward(grad), lr)
            total += loss * len(indices)
        losses.append(total / len(order))
        logger.debug(f"[TRAIN] epoch {epoch + 1}/{epochs} loss={losses[-1]:.4f}")
    graph.set_training(False)

    accuracy = evaluate(graph, test_set, crop)
    logger.info(f"[TRAIN] {epochs} epochs, lr={lr}, seed={seed}: held-out accuracy {accuracy:.3f}")
    return TrainResult(graph, accuracy, losses)
