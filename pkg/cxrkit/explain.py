"""
Post-hoc explanations for a trained classifier.

- ``grad_cam``: gradient-weighted class activation map over the last residual block.
- ``lime_explain``: perturb-and-fit surrogate over a fixed grid of rectangular segments.
- ``render_overlay``: color PNG of either explanation on top of the input image.
"""

import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, Optional, Protocol, Tuple, Union

import matplotlib
import numpy as np
from PIL import Image
from sklearn.linear_model import LinearRegression

from .dataset import class_rng
from .errors import ImageWriteError, LabelOutOfRangeError, ShapeMismatchError, TooFewPerturbationsError
from .imaging import GrayImage, bilinear_resize_array
from .network import ResidualCNN, to_network_input

logger = logging.getLogger(__name__)

OVERLAY_ALPHA = 0.5
HEATMAP_CMAP = "viridis"
POSITIVE_RGB = np.array([0.0, 1.0, 0.0])
NEGATIVE_RGB = np.array([1.0, 0.0, 0.0])


class ImageClassifier(Protocol):
    """Anything that maps grayscale images (N, H, W) in [0, 255] to probabilities (N, C)"""

    def predict_proba(self, images: np.ndarray) -> np.ndarray:
        ...


def _pixels(img: Union[GrayImage, np.ndarray]) -> np.ndarray:
    if isinstance(img, GrayImage):
        return img.pixels
    return GrayImage(img).pixels


# ============ Grad-CAM ============

@dataclass(frozen=True)
class Heatmap:
    """Values in [0, 1] at input resolution; all zero when the raw map was constant"""
    values: np.ndarray
    target_class: int

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]

    def mass_fraction(self, region: np.ndarray) -> float:
        """Share of the total heatmap mass that falls inside a boolean region"""
        total = float(self.values.sum())
        if total == 0.0:
            return 0.0
        return float(self.values[np.asarray(region, dtype=bool)].sum()) / total

    def to_dict(self) -> Dict[str, Any]:
        return {"method": "gradcam", "target_class": self.target_class,
                "height": self.height, "width": self.width, "values": self.values.tolist()}


def _normalize(values: np.ndarray) -> np.ndarray:
    lo, hi = float(values.min()), float(values.max())
    if hi - lo <= 0.0:
        return np.zeros_like(values)
    return (values - lo) / (hi - lo)


def grad_cam(net: ResidualCNN, img: Union[GrayImage, np.ndarray], target_class: int) -> Heatmap:
    """
    Gradient-weighted class activation map over the last residual block.

    The explained score is the target logit minus the mean of the other logits, so only
    evidence that separates the target from the rest counts and a shift of all logits
    changes nothing. Channel weights are the spatial mean of d(score)/d(activations);
    the map is ReLU of the weighted channel sum, upsampled so that every feature cell
    covers its own block of input pixels, then min-max scaled. The network's parameters
    and gradients are not modified.
    """
    pixels = _pixels(img)
    if pixels.shape != net.spec.input_dims[1:]:
        raise ShapeMismatchError(f"image is {pixels.shape}, network expects {net.spec.input_dims[1:]}")
    if not 0 <= target_class < net.spec.num_classes:
        raise LabelOutOfRangeError(f"target_class must lie in 0..{net.spec.num_classes - 1}")

    x = to_network_input(pixels[None], net.spec.input_dims[0])
    activations, _ = net.features(x)
    logits, head_cache = net.head_forward(activations)
    num_classes = logits.shape[1]
    dlogits = np.full_like(logits, -1.0 / (num_classes - 1))
    dlogits[0, target_class] = 1.0
    grads = net.head_backward(dlogits, head_cache, param_grads=False)

    channel_weights = grads[0].mean(axis=(1, 2))
    cam = np.maximum(np.tensordot(channel_weights, activations[0], axes=(0, 0)), 0.0)
    upsampled = bilinear_resize_array(cam, pixels.shape[0], pixels.shape[1], align_corners=False)
    return Heatmap(values=_normalize(np.maximum(upsampled, 0.0)), target_class=target_class)


# ============ LIME ============

@dataclass(frozen=True)
class LimeExplanation:
    grid: Tuple[int, int]
    segment_weights: np.ndarray
    intercept: float
    r2: Optional[float]
    num_perturbations: int
    seed: int
    target_class: int
    prediction: float

    @property
    def local_prediction(self) -> float:
        """Surrogate output on the all-segments-on vector"""
        return float(self.intercept + self.segment_weights.sum())

    def to_dict(self) -> Dict[str, Any]:
        return {
            "method": "lime", "grid": list(self.grid), "target_class": self.target_class,
            "segment_weights": self.segment_weights.tolist(), "intercept": self.intercept,
            "r2": self.r2, "num_perturbations": self.num_perturbations, "seed": self.seed,
            "prediction": self.prediction, "local_prediction": self.local_prediction,
        }


def grid_segments(height: int, width: int, rows: int, cols: int) -> np.ndarray:
    """Label map (H, W) assigning each pixel to one of rows*cols near-equal rectangles"""
    if not (1 <= rows <= height and 1 <= cols <= width):
        raise ValueError(f"a {rows}x{cols} grid does not fit a {height}x{width} image")
    row_of = (np.arange(height) * rows) // height
    col_of = (np.arange(width) * cols) // width
    return row_of[:, None] * cols + col_of[None, :]


def lime_kernel(distances: np.ndarray, num_segments: int) -> np.ndarray:
    """sqrt(exp(-d / width^2)) with width = 0.75 * sqrt(num_segments); d is the Hamming distance"""
    width = 0.75 * np.sqrt(num_segments)
    return np.sqrt(np.exp(-np.asarray(distances, dtype=np.float64) / width ** 2))


def lime_explain(model: ImageClassifier, img: Union[GrayImage, np.ndarray], target_class: int,
                 grid: Tuple[int, int] = (8, 8), n_perturbations: int = 1000, seed: int = 0,
                 fill: Union[str, float] = "zero", batch_size: int = 64, workers: int = 1) -> LimeExplanation:
    """
    Explain one prediction with a weighted linear surrogate over grid segments.

    Row 0 of the perturbation matrix keeps every segment; the others switch each segment
    on or off with probability 1/2. Switched-off segments take the fill value (0, the
    image mean with ``fill="mean"``, or a number). The whole perturbation set is drawn
    before any model query, so batches may run in parallel without changing the result.
    """
    pixels = _pixels(img)
    rows, cols = grid
    num_segments = rows * cols
    if n_perturbations < num_segments + 1:
        raise TooFewPerturbationsError(
            f"{n_perturbations} perturbations cannot fit {num_segments} segments; need at least {num_segments + 1}")
    if fill == "zero":
        fill_value = 0.0
    elif fill == "mean":
        fill_value = float(pixels.mean())
    else:
        fill_value = float(fill)

    segments = grid_segments(pixels.shape[0], pixels.shape[1], rows, cols)
    switches = class_rng(seed).integers(0, 2, size=(n_perturbations, num_segments)).astype(np.float64)
    switches[0] = 1.0

    def query(start: int) -> np.ndarray:
        keep = switches[start:start + batch_size][:, segments].astype(bool)
        perturbed = np.where(keep, pixels[None], fill_value)
        probs = np.asarray(model.predict_proba(perturbed))
        if not 0 <= target_class < probs.shape[1]:
            raise LabelOutOfRangeError(f"target_class must lie in 0..{probs.shape[1] - 1}")
        return probs[:, target_class]

    starts = range(0, n_perturbations, batch_size)
    with ThreadPoolExecutor(max_workers=max(1, workers)) as executor:
        responses = np.concatenate(list(executor.map(query, starts)))

    sample_weight = lime_kernel(num_segments - switches.sum(axis=1), num_segments)
    surrogate = LinearRegression().fit(switches, responses, sample_weight=sample_weight)

    weighted_mean = np.average(responses, weights=sample_weight)
    if np.average((responses - weighted_mean) ** 2, weights=sample_weight) <= 1e-18:
        r2 = None
    else:
        r2 = float(np.clip(surrogate.score(switches, responses, sample_weight=sample_weight), 0.0, 1.0))

    explanation = LimeExplanation(
        grid=(rows, cols), segment_weights=surrogate.coef_.reshape(rows, cols),
        intercept=float(surrogate.intercept_), r2=r2, num_perturbations=n_perturbations,
        seed=seed, target_class=target_class, prediction=float(responses[0]),
    )
    logger.debug(f"lime: {num_segments} segments, {n_perturbations} samples, r2={r2}")
    return explanation


# ============ Rendering ============

def _overlay_rgb(pixels: np.ndarray, explanation: Union[Heatmap, LimeExplanation],
                 alpha: float) -> np.ndarray:
    base = np.repeat((pixels / 255.0)[..., None], 3, axis=2)
    if isinstance(explanation, Heatmap):
        if explanation.values.shape != pixels.shape:
            raise ShapeMismatchError(f"heatmap is {explanation.values.shape}, image is {pixels.shape}")
        colors = matplotlib.colormaps[HEATMAP_CMAP](explanation.values)[..., :3]
        return (1.0 - alpha) * base + alpha * colors

    rows, cols = explanation.grid
    weights = explanation.segment_weights.reshape(-1)[grid_segments(pixels.shape[0], pixels.shape[1], rows, cols)]
    largest = float(np.abs(explanation.segment_weights).max())
    if largest == 0.0:
        return base
    strength = (alpha * np.abs(weights) / largest)[..., None]
    tint = np.where((weights > 0)[..., None], POSITIVE_RGB, NEGATIVE_RGB)
    return (1.0 - strength) * base + strength * tint


def render_overlay(img: Union[GrayImage, np.ndarray], explanation: Union[Heatmap, LimeExplanation],
                   out_path: Union[str, Path], alpha: float = OVERLAY_ALPHA) -> Path:
    """
    Write an RGB PNG: heatmaps through the viridis colormap at ``alpha``; LIME segments
    tinted green (supports the class) or red (against it) with opacity alpha * |w| / max|w|.
    """
    rgb = _overlay_rgb(_pixels(img), explanation, alpha)
    out_path = Path(out_path)
    data = np.clip(np.rint(rgb * 255.0), 0, 255).astype(np.uint8)
    try:
        out_path.parent.mkdir(parents=True, exist_ok=True)
        Image.fromarray(data).save(out_path)
    except (OSError, ValueError, KeyError) as e:
        raise ImageWriteError(f"cannot write overlay {out_path}: {e}") from e
    return out_path


def write_sidecar(explanation: Union[Heatmap, LimeExplanation], path: Union[str, Path]) -> Path:
    """Raw explanation values as JSON next to the overlay"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(explanation.to_dict(), indent=2), encoding="utf-8")
    return path
