"""
Baseline residual CNN: a stack of concatenation residual blocks, global max pooling,
a ReLU dense layer and a softmax output.

Layer ids used for freezing: ``block<i>.conv1``, ``block<i>.conv2`` (i from 1) and
``head.dense1``, ``head.dense2``. Parameter names append ``.weight`` / ``.bias``.
"""

import fnmatch
import logging
from dataclasses import asdict, dataclass, field
from typing import Any, Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np

from .dataset import class_rng
from .errors import ShapeMismatchError, UnknownLayerError
from .layers import Dense, GlobalMaxPool, Layer, ReLU, ResidualBlock, Tensor
from .metrics import LossInputs, one_hot, softmax, wce_loss

logger = logging.getLogger(__name__)

BASELINE_WIDTHS = (16, 32, 64, 128, 256)
HEAD_UNITS = 128
INPUT_DIMS = (3, 331, 331)


@dataclass(frozen=True)
class ResidualBlockSpec:
    in_channels: int
    width: int

    @property
    def out_channels(self) -> int:
        """Concatenation keeps the block input: conv2 channels + input channels"""
        return self.width + self.in_channels


@dataclass(frozen=True)
class NetworkSpec:
    """Architecture descriptor; enough to rebuild the network from a checkpoint"""
    num_classes: int
    input_dims: Tuple[int, int, int] = INPUT_DIMS
    widths: Tuple[int, ...] = BASELINE_WIDTHS
    head_units: int = HEAD_UNITS
    seed: int = 0
    class_names: Tuple[str, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "input_dims", tuple(int(d) for d in self.input_dims))
        object.__setattr__(self, "widths", tuple(int(w) for w in self.widths))
        object.__setattr__(self, "class_names", tuple(self.class_names))
        if self.num_classes not in (2, 3, 4):
            raise ValueError(f"num_classes must be 2, 3 or 4, got {self.num_classes}")
        if len(self.input_dims) != 3 or min(self.input_dims) < 1:
            raise ValueError(f"input_dims must be (channels, height, width), got {self.input_dims}")
        if not self.widths or min(self.widths) < 1:
            raise ValueError(f"widths must be positive, got {self.widths}")
        if self.head_units < 1:
            raise ValueError(f"head_units must be >= 1, got {self.head_units}")
        h, w = self.input_dims[1:]
        if min(h, w) < 2 ** len(self.widths):
            raise ValueError(f"{h}x{w} input is too small for {len(self.widths)} pooling stages")
        if self.class_names and len(self.class_names) != self.num_classes:
            raise ValueError(f"{len(self.class_names)} class names for {self.num_classes} classes")

    @property
    def blocks(self) -> Tuple[ResidualBlockSpec, ...]:
        blocks = []
        channels = self.input_dims[0]
        for width in self.widths:
            block = ResidualBlockSpec(in_channels=channels, width=width)
            blocks.append(block)
            channels = block.out_channels
        return tuple(blocks)

    @property
    def feature_channels(self) -> int:
        return self.blocks[-1].out_channels

    @property
    def feature_hw(self) -> Tuple[int, int]:
        h, w = self.input_dims[1:]
        for _ in self.widths:
            h, w = h // 2, w // 2
        return h, w

    def to_dict(self) -> Dict[str, Any]:
        out = asdict(self)
        for key in ("input_dims", "widths", "class_names"):
            out[key] = list(out[key])
        return out

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "NetworkSpec":
        return cls(num_classes=int(data["num_classes"]), input_dims=tuple(data["input_dims"]),
                   widths=tuple(data["widths"]), head_units=int(data["head_units"]),
                   seed=int(data.get("seed", 0)), class_names=tuple(data.get("class_names", ())))


def to_network_input(images: np.ndarray, channels: int = 3) -> np.ndarray:
    """Grayscale (N, H, W) in [0, 255] -> (N, channels, H, W) in [0, 1]"""
    images = np.asarray(images, dtype=np.float64)
    if images.ndim == 2:
        images = images[None]
    if images.ndim != 3:
        raise ShapeMismatchError(f"expected (N, H, W) grayscale images, got shape {images.shape}")
    return np.repeat((images / 255.0)[:, None], channels, axis=1)


class ResidualCNN:
    """
    The baseline classifier. ``forward`` returns softmax probabilities; ``backward``
    computes exact gradients of the weighted cross-entropy for every unfrozen parameter.
    """

    def __init__(self, spec: NetworkSpec):
        self.spec = spec
        rng = class_rng(spec.seed)
        self.blocks: List[ResidualBlock] = [
            ResidualBlock(f"block{i}", b.in_channels, b.width, rng)
            for i, b in enumerate(spec.blocks, start=1)
        ]
        self.pool = GlobalMaxPool("head.pool")
        self.dense1 = Dense("head.dense1", spec.feature_channels, spec.head_units, rng)
        self.relu = ReLU("head.relu")
        self.dense2 = Dense("head.dense2", spec.head_units, spec.num_classes, rng)
        self._cache: Optional[Tuple[np.ndarray, np.ndarray, Any]] = None

    # ---- parameters and layers ----

    def trainable_layers(self) -> Dict[str, Layer]:
        layers: Dict[str, Layer] = {}
        for block in self.blocks:
            for conv in block.convs():
                layers[conv.name] = conv
        layers[self.dense1.name] = self.dense1
        layers[self.dense2.name] = self.dense2
        return layers

    def layer_ids(self) -> List[str]:
        return list(self.trainable_layers())

    def parameters(self) -> Dict[str, Tensor]:
        """All parameters in declaration order"""
        return {f"{layer_id}.{key}": tensor
                for layer_id, layer in self.trainable_layers().items()
                for key, tensor in layer.params().items()}

    def trainable_parameters(self) -> Dict[str, Tensor]:
        return {f"{layer_id}.{key}": tensor
                for layer_id, layer in self.trainable_layers().items() if layer.trainable
                for key, tensor in layer.params().items()}

    @property
    def frozen_layers(self) -> List[str]:
        return [layer_id for layer_id, layer in self.trainable_layers().items() if not layer.trainable]

    def freeze(self, selectors: Union[str, Iterable[str]]) -> "ResidualCNN":
        """
        Exclude layers from gradient computation and optimizer updates.

        Selectors are layer ids or fnmatch patterns (``block*``, ``head.*``); each must match
        at least one layer.
        """
        return self._set_trainable(selectors, False)

    def unfreeze(self, selectors: Union[str, Iterable[str]]) -> "ResidualCNN":
        return self._set_trainable(selectors, True)

    def _set_trainable(self, selectors: Union[str, Iterable[str]], trainable: bool) -> "ResidualCNN":
        if isinstance(selectors, str):
            selectors = [selectors]
        layers = self.trainable_layers()
        for selector in selectors:
            matched = fnmatch.filter(layers, selector)
            if not matched:
                raise UnknownLayerError(f"no layer matches {selector!r}; known layers: {', '.join(layers)}")
            for layer_id in matched:
                layers[layer_id].trainable = trainable
                if not trainable:
                    for tensor in layers[layer_id].params().values():
                        tensor.grad = None
        return self

    def state_dict(self) -> Dict[str, np.ndarray]:
        return {name: tensor.data.copy() for name, tensor in self.parameters().items()}

    def load_state_dict(self, state: Dict[str, np.ndarray]) -> None:
        params = self.parameters()
        missing = set(params) - set(state)
        if missing:
            raise KeyError(f"state is missing parameters: {sorted(missing)}")
        for name, tensor in params.items():
            value = np.asarray(state[name], dtype=np.float64)
            if value.shape != tensor.shape:
                raise ShapeMismatchError(f"{name}: expected shape {tensor.shape}, got {value.shape}")
            tensor.data = value.copy()

    # ---- forward ----

    def _check_batch(self, batch: np.ndarray) -> np.ndarray:
        batch = np.asarray(batch, dtype=np.float64)
        if batch.ndim != 4 or batch.shape[1:] != self.spec.input_dims:
            raise ShapeMismatchError(f"expected batch of shape (N, {', '.join(map(str, self.spec.input_dims))}), "
                                     f"got {batch.shape}")
        return batch

    def features(self, batch: np.ndarray) -> Tuple[np.ndarray, List[Any]]:
        """Activations of the last residual block, plus the per-block caches"""
        h = self._check_batch(batch)
        caches = []
        for block in self.blocks:
            h, cache = block.forward(h)
            caches.append(cache)
        return h, caches

    def head_forward(self, activations: np.ndarray) -> Tuple[np.ndarray, Any]:
        """Last-block activations -> logits"""
        pooled, c_pool = self.pool.forward(activations)
        h, c_dense1 = self.dense1.forward(pooled)
        h, c_relu = self.relu.forward(h)
        logits, c_dense2 = self.dense2.forward(h)
        return logits, (c_pool, c_dense1, c_relu, c_dense2)

    def head_backward(self, dlogits: np.ndarray, cache: Any, param_grads: bool = True) -> np.ndarray:
        """
        dL/dlogits -> dL/d(last-block activations). With param_grads the head's
        parameter grads are filled in as well; without, the network is left untouched.
        """
        c_pool, c_dense1, c_relu, c_dense2 = cache
        d = self.dense2.backward(dlogits, c_dense2, param_grads)
        d = self.relu.backward(d, c_relu)
        d = self.dense1.backward(d, c_dense1, param_grads)
        return self.pool.backward(d, c_pool)

    def logits(self, batch: np.ndarray) -> np.ndarray:
        activations, _ = self.features(batch)
        logits, _ = self.head_forward(activations)
        return logits

    def forward(self, batch: np.ndarray) -> np.ndarray:
        """Softmax probabilities (N, num_classes); the pass is cached for backward"""
        batch = self._check_batch(batch)
        activations, block_caches = self.features(batch)
        logits, head_cache = self.head_forward(activations)
        self._cache = (batch, logits, (block_caches, head_cache))
        return softmax(logits)

    # ---- backward ----

    def loss(self, batch: np.ndarray, targets: np.ndarray, weights=None) -> float:
        """Weighted cross-entropy without touching gradients or the forward cache"""
        loss, _ = wce_loss(LossInputs(self.logits(batch), targets, weights))
        return loss

    def backward(self, batch: np.ndarray, targets: np.ndarray, weights=None) -> Tuple[float, Dict[str, np.ndarray]]:
        """
        Gradients of the weighted cross-entropy for every unfrozen parameter.

        Reuses the cached forward pass when ``batch`` is the array last passed to
        ``forward``; otherwise runs the forward pass first.

        Returns:
            (loss, {parameter name: gradient}); frozen parameters are absent
        """
        if self._cache is None or self._cache[0] is not batch:
            self.forward(batch)
        _, logits, (block_caches, head_cache) = self._cache
        targets = np.asarray(targets)
        if targets.ndim == 1:
            targets = one_hot(targets, self.spec.num_classes)
        if targets.shape != logits.shape:
            raise ShapeMismatchError(f"targets shape {targets.shape} does not match output {logits.shape}")

        loss, dlogits = wce_loss(LossInputs(logits, targets, weights))
        d = self.head_backward(dlogits, head_cache)
        for block, cache in zip(reversed(self.blocks), reversed(block_caches)):
            d = block.backward(d, cache)
        self._cache = None

        grads = {name: tensor.grad for name, tensor in self.trainable_parameters().items()}
        return loss, grads

    # ---- inference ----

    def predict_proba(self, images: np.ndarray, batch_size: int = 32) -> np.ndarray:
        """Probabilities for grayscale images (N, H, W) in [0, 255]; thread-safe"""
        x = to_network_input(images, self.spec.input_dims[0])
        chunks = []
        for start in range(0, len(x), batch_size):
            chunks.append(softmax(self.logits(x[start:start + batch_size])))
        if not chunks:
            return np.zeros((0, self.spec.num_classes))
        return np.concatenate(chunks, axis=0)


def build_baseline(num_classes: int, input_dims: Sequence[int] = INPUT_DIMS, seed: int = 0,
                   widths: Sequence[int] = BASELINE_WIDTHS, head_units: int = HEAD_UNITS,
                   class_names: Sequence[str] = ()) -> ResidualCNN:
    """Five residual blocks (16..256 channels), dense-128 ReLU, dense-num_classes softmax"""
    spec = NetworkSpec(num_classes=num_classes, input_dims=tuple(input_dims), widths=tuple(widths),
                       head_units=head_units, seed=seed, class_names=tuple(class_names))
    net = ResidualCNN(spec)
    logger.debug(f"built network: {len(spec.widths)} blocks, {spec.feature_channels} feature channels, "
                 f"{sum(t.size for t in net.parameters().values())} parameters")
    return net
