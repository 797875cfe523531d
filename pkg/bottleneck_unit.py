#!/usr/bin/env python3
"""
Bottleneck Unit
Learnable reduction (1x1 channel conv, strided spatial conv), the
straight-through codec node and the mirrored restoration, inserted after a
partition point so the whole graph stays trainable end to end.
"""

import logging
import threading
from dataclasses import asdict, dataclass
from enum import Enum
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np

from bottlenet_errors import BottleneckConfigError, ShapeError
from config.constants import (
    CALIBRATION_SAMPLES, DEFAULT_BATCH_SIZE, DEFAULT_BITS, DEFAULT_QUALITY, HOLDOUT_FRACTION,
)
from lossy_codec import EncodedFeature, decode_feature, encode_feature, reconstruct_feature
from synthetic_datasets import Dataset
from tensor_core import (
    Layer, LayerKind, LayerSpec, NetworkGraph, TrainResult, evaluate, register_layer,
    same_padding, train,
)

logger = logging.getLogger(__name__)

# conv, norm, relu x2 | codec | conv_transpose, norm, relu | conv, norm, relu
UNIT_LENGTH = 13
CODEC_OFFSET = 6


class TrainingMode(str, Enum):
    AWARE = "aware"
    NAIVE = "naive"


@dataclass
class BottleneckConfig:
    """Where the bottleneck goes and how hard it squeezes"""
    location: int
    spatial: int = 1
    channels: int = 1
    quality: int = DEFAULT_QUALITY
    bits: int = DEFAULT_BITS
    filter_w: Optional[int] = None
    filter_h: Optional[int] = None

    def __post_init__(self):
        if self.filter_w is None:
            self.filter_w = self.spatial + 1
        if self.filter_h is None:
            self.filter_h = self.spatial + 1

    def validate(self, feature_shape: Sequence[int]):
        """Check the configuration against the (h, w, c) feature at the insertion point"""
        _, _, c = feature_shape
        if self.spatial < 1:
            raise BottleneckConfigError('s >= 1', f"s={self.spatial}")
        if not 1 <= self.channels <= c:
            raise BottleneckConfigError("1 <= c' <= c", f"c'={self.channels}, c={c}")
        if self.spatial > 1 and (self.filter_w <= self.spatial or self.filter_h <= self.spatial):
            raise BottleneckConfigError(
                'w_f > s and h_f > s', f"filter {self.filter_w}x{self.filter_h}, s={self.spatial}"
            )
        if min(self.filter_w, self.filter_h) < 1:
            raise BottleneckConfigError('filter dims >= 1', f"{self.filter_w}x{self.filter_h}")
        if not 1 <= self.quality <= 100:
            raise BottleneckConfigError('1 <= q <= 100', f"q={self.quality}")
        if not 1 <= self.bits <= 16:
            raise BottleneckConfigError('1 <= n <= 16', f"n={self.bits}")

    def transmitted_shape(self, feature_shape: Sequence[int]) -> Tuple[int, int, int]:
        h, w, _ = feature_shape
        return (same_padding(h, self.filter_h, self.spatial)[0],
                same_padding(w, self.filter_w, self.spatial)[0],
                self.channels)

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> 'BottleneckConfig':
        return cls(**data)


# ============================================================================
# STRAIGHT-THROUGH CODEC NODE
# ============================================================================

@register_layer(LayerKind.CODEC)
class CodecNode(Layer):
    """
    Forward runs the lossy codec on every sample exactly as it is transmitted;
    backward hands the incoming gradient through untouched.
    """

    def __init__(self, spec, in_shape, rng):
        super().__init__(spec, in_shape, rng)
        self.quality = spec.params.get('quality', DEFAULT_QUALITY)
        self.bits = spec.params.get('bits', DEFAULT_BITS)
        self.identity = bool(spec.params.get('identity', False))

    def forward(self, x, training):
        self._cache = True
        if self.identity:
            return x
        return np.stack([reconstruct_feature(sample, self.quality, self.bits) for sample in x])

    def backward(self, dy):
        self._cached()
        return dy, {}


def straight_through_codec(x: np.ndarray, quality: int = DEFAULT_QUALITY,
                           bits: int = DEFAULT_BITS) -> np.ndarray:
    """Codec node forward on a (batch, h', w', c') tensor"""
    return np.stack([reconstruct_feature(sample, quality, bits) for sample in np.asarray(x)])


def _unit_specs(cfg: BottleneckConfig, feature_shape: Sequence[int]) -> List[LayerSpec]:
    h, w, c = feature_shape
    marker = {'bottleneck': True}

    def block(kind, **params):
        return [LayerSpec(kind, {**params, **marker}),
                LayerSpec(LayerKind.BATCHNORM, dict(marker)),
                LayerSpec(LayerKind.RELU, dict(marker))]

    return (
        block(LayerKind.CONV2D, kernel_h=1, kernel_w=1, stride=1, filters=cfg.channels, padding='same')
        + block(LayerKind.CONV2D, kernel_h=cfg.filter_h, kernel_w=cfg.filter_w, stride=cfg.spatial,
                filters=cfg.channels, padding='same')
        + [LayerSpec(LayerKind.CODEC, {'quality': cfg.quality, 'bits': cfg.bits, **marker})]
        + block(LayerKind.CONV2D_TRANSPOSE, kernel_h=cfg.filter_h, kernel_w=cfg.filter_w,
                stride=cfg.spatial, filters=cfg.channels, out_h=h, out_w=w)
        + block(LayerKind.CONV2D, kernel_h=1, kernel_w=1, stride=1, filters=c, padding='same')
    )


def insert_bottleneck(graph: NetworkGraph, cfg: BottleneckConfig, seed: Optional[int] = None) -> NetworkGraph:
    """
    New graph with the bottleneck unit after partition point cfg.location.

    Existing layers keep their parameters and running statistics; the unit's
    layers get fresh He-uniform weights from `seed`.
    """
    if graph.codec_index is not None:
        raise BottleneckConfigError('one bottleneck per graph', 'graph already has a codec node')
    try:
        cut = graph.layer_for_partition(cfg.location)
    except ShapeError as e:
        raise BottleneckConfigError('valid partition point', str(e)) from e
    feature_shape = graph.shape_at(cut)
    cfg.validate(feature_shape)

    specs = graph.specs[:cut + 1] + _unit_specs(cfg, feature_shape) + graph.specs[cut + 1:]
    points = [p if p <= cut else p + UNIT_LENGTH for p in graph.partition_points]
    new = NetworkGraph(specs, graph.input_shape, points, seed=graph.seed if seed is None else seed)

    def moved(values):
        out = {}
        for key, value in values.items():
            index, name = key.split('.', 1)
            index = int(index)
            out[f"{index if index <= cut else index + UNIT_LENGTH}.{name}"] = value
        return out

    new.set_parameters(moved(graph.parameters()))
    new.set_buffers(moved(graph.buffers()))
    new.bottleneck = cfg
    if new.output_shape != graph.output_shape:
        raise ShapeError(f"bottleneck changed output shape {graph.output_shape} -> {new.output_shape}")
    logger.debug(f"[BOTTLENECK] j={cfg.location} s={cfg.spatial} c'={cfg.channels} q={cfg.quality}: "
                 f"{feature_shape} -> {cfg.transmitted_shape(feature_shape)}")
    return new


def codec_node(graph: NetworkGraph) -> CodecNode:
    index = graph.codec_index
    if index is None:
        raise BottleneckConfigError('bottleneck present', 'graph has no codec node')
    return graph.layers[index]


def set_codec_identity(graph: NetworkGraph, identity: bool):
    """Replace the codec by a true identity (or restore it)"""
    node = codec_node(graph)
    node.identity = bool(identity)
    node.spec.params['identity'] = bool(identity)


def identity_initialize(graph: NetworkGraph):
    """Make every bottleneck convolution an identity map (requires s = 1 and c' = c)"""
    cfg = graph.bottleneck
    codec_node(graph)
    index = graph.codec_index
    start = index - CODEC_OFFSET
    c = graph.layers[start].in_shape[2]
    if cfg is None or cfg.spatial != 1 or cfg.channels != c:
        raise BottleneckConfigError("s = 1 and c' = c", 'identity initialization needs a shape-preserving unit')

    eye = np.eye(c)
    for layer in graph.layers[start:index + CODEC_OFFSET + 1]:
        if layer.kind == LayerKind.CONV2D.value:
            weight = np.zeros_like(layer.params['weight'])
            top = same_padding(layer.in_shape[0], layer.kh, 1)[1]
            left = same_padding(layer.in_shape[1], layer.kw, 1)[1]
            weight[top, left] = eye
            layer.params['weight'] = weight
            layer.params['bias'] = np.zeros_like(layer.params['bias'])
        elif layer.kind == LayerKind.CONV2D_TRANSPOSE.value:
            weight = np.zeros_like(layer.params['weight'])
            top = same_padding(layer.out_shape[0], layer.kh, 1)[1]
            left = same_padding(layer.out_shape[1], layer.kw, 1)[1]
            weight[:, top, left, :] = eye
            layer.params['weight'] = weight
            layer.params['bias'] = np.zeros_like(layer.params['bias'])
        elif layer.kind == LayerKind.BATCHNORM.value:
            layer.params['gamma'] = np.ones(c)
            layer.params['beta'] = np.zeros(c)
            layer.buffers['running_mean'] = np.zeros(c)
            layer.buffers['running_var'] = np.ones(c)


# ============================================================================
# TRAINING MODES
# ============================================================================

def train_bottleneck_model(graph: NetworkGraph, cfg: BottleneckConfig, dataset: Dataset,
                           mode: str, seed: int, epochs: int, lr: float,
                           batch_size: int = DEFAULT_BATCH_SIZE, holdout: float = HOLDOUT_FRACTION,
                           crop: bool = False, progress: bool = False) -> TrainResult:
    """
    Insert the bottleneck into (a copy of) graph and train it.

    aware: the codec is in the graph during training (straight-through).
    naive: trained with the codec replaced by identity, which is switched on
    for evaluation only; batch-norm statistics stay as trained.
    """
    mode = TrainingMode(mode)
    model = insert_bottleneck(graph, cfg, seed=seed)
    if mode is TrainingMode.NAIVE:
        set_codec_identity(model, True)
    result = train(model, dataset, epochs, lr, seed, batch_size=batch_size, holdout=holdout,
                   crop=crop, progress=progress)
    if mode is TrainingMode.NAIVE:
        set_codec_identity(model, False)
        _, test_set = dataset.split(holdout, seed)
        result = TrainResult(model, evaluate(model, test_set, crop), result.losses)
    logger.info(f"[TRAIN] {mode.value} j={cfg.location} s={cfg.spatial} c'={cfg.channels} "
                f"q={cfg.quality}: accuracy {result.accuracy:.3f}")
    return result


@dataclass
class ModeComparison:
    quality: int
    aware: float
    naive: float
    baseline: float

    @property
    def gain(self) -> float:
        return self.aware - self.naive

    @property
    def aware_loss(self) -> float:
        return self.baseline - self.aware


def compare_training_modes(graph: NetworkGraph, dataset: Dataset, location: int,
                           qualities: Sequence[int], seed: int, epochs: int, lr: float,
                           spatial: int = 1, channels: Optional[int] = None,
                           batch_size: int = DEFAULT_BATCH_SIZE, crop: bool = False,
                           progress: bool = False) -> List[ModeComparison]:
    """
    Held-out accuracy of aware and naive training at each quality, next to
    the codec-free baseline trained with the same seed.

    channels defaults to the full channel count at the location, so the
    only lossy step is the codec.
    """
    if channels is None:
        channels = graph.shape_at(graph.layer_for_partition(location))[2]
    baseline = train(graph.copy(), dataset, epochs, lr, seed, batch_size=batch_size,
                     crop=crop, progress=progress).accuracy
    rows = []
    for quality in qualities:
        cfg = BottleneckConfig(location, spatial, channels, quality)
        aware, naive = (
            train_bottleneck_model(graph, cfg, dataset, mode, seed, epochs, lr, batch_size=batch_size,
                                   crop=crop, progress=progress).accuracy
            for mode in (TrainingMode.AWARE, TrainingMode.NAIVE)
        )
        rows.append(ModeComparison(quality, aware, naive, baseline))
        logger.info(f"[TRAIN] q={quality}: aware {aware:.3f} naive {naive:.3f} baseline {baseline:.3f}")
    return rows


# ============================================================================
# MOBILE / CLOUD HALVES
# ============================================================================

class MobileHalf:
    """Layers up to and including spatial reduction, then the codec encoder"""

    def __init__(self, graph: NetworkGraph, partition_id: int):
        self.graph = graph
        self.partition_id = partition_id
        self.cut = graph.codec_index - 1
        node = graph.layers[graph.codec_index]
        self.quality, self.bits = node.quality, node.bits
        self._lock = threading.Lock()

    @property
    def input_shape(self):
        return self.graph.input_shape

    def features(self, x: np.ndarray) -> np.ndarray:
        with self._lock:
            self.graph.set_training(False)
            return self.graph.forward(x, upto=self.cut)

    def encode(self, x: np.ndarray) -> List[EncodedFeature]:
        """One EncodedFeature per sample of a (batch, h, w, c) input"""
        return [encode_feature(f, self.quality, self.bits) for f in self.features(x)]


class CloudHalf:
    """Codec decoder, restoration and the remaining layers"""

    def __init__(self, graph: NetworkGraph, partition_id: int):
        self.graph = graph
        self.partition_id = partition_id
        self.start = graph.codec_index + 1
        self.feature_shape = graph.layers[graph.codec_index].in_shape
        self._lock = threading.Lock()

    def infer(self, encoded: Sequence[bytes]) -> np.ndarray:
        """Logits (batch, classes) for a batch of EncodedFeature byte strings"""
        features = []
        for data in encoded:
            feature = data if isinstance(data, EncodedFeature) else EncodedFeature.from_bytes(data)
            if feature.shape != tuple(self.feature_shape):
                raise ShapeError(f"feature {feature.shape} does not match partition {self.partition_id} "
                                 f"expecting {tuple(self.feature_shape)}")
            features.append(decode_feature(feature))
        with self._lock:
            self.graph.set_training(False)
            logits = self.graph.forward(np.stack(features), start=self.start)
        return logits.reshape(len(features), -1)


def split_graph(graph: NetworkGraph, partition_id: Optional[int] = None) -> Tuple[MobileHalf, CloudHalf]:
    """Mobile and cloud halves of a bottlenecked graph; each gets its own copy"""
    if graph.codec_index is None:
        raise BottleneckConfigError('bottleneck present', 'only bottlenecked graphs can be split')
    if partition_id is None:
        partition_id = graph.bottleneck.location if graph.bottleneck else 1
    return MobileHalf(graph.copy(), partition_id), CloudHalf(graph.copy(), partition_id)


def calibrate_feature_size(graph: NetworkGraph, images: np.ndarray,
                           samples: int = CALIBRATION_SAMPLES) -> int:
    """Median wire size in bytes of the transmitted feature over a calibration batch (D_j), halves rounded up"""
    mobile, _ = split_graph(graph)
    batch = np.asarray(images)[:samples]
    if len(batch) == 0:
        raise ShapeError("calibration batch is empty")
    sizes = [len(feature) for feature in mobile.encode(batch)]
    return int(np.floor(np.median(sizes) + 0.5))
