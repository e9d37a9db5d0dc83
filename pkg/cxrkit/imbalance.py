"""
Class-imbalance strategies: inverse-frequency class weights for the loss, and random
oversampling of minority classes with rotation/scale/shift augmentation.
"""

import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator
from scipy import ndimage
from tqdm import tqdm

from .dataset import LabelScheme, Manifest, SampleRecord, Source, Split, class_counts, class_rng
from .errors import EmptyClassError, TargetBelowCurrentError
from .imaging import GrayImage, read_image, write_image

logger = logging.getLogger(__name__)


# ============ Weighted classes ============

@dataclass(frozen=True)
class ClassWeightTable:
    """w(c) = C_c * total / (N * n_c) for every class c"""
    weights: Tuple[float, ...]
    constants: Tuple[float, ...]
    counts: Tuple[int, ...]

    @property
    def num_classes(self) -> int:
        return len(self.weights)

    def as_array(self) -> np.ndarray:
        return np.array(self.weights, dtype=np.float64)

    def to_dict(self) -> Dict[str, Any]:
        return {"weights": list(self.weights), "constants": list(self.constants), "counts": list(self.counts)}

    @classmethod
    def uniform(cls, num_classes: int) -> "ClassWeightTable":
        return cls(weights=(1.0,) * num_classes, constants=(1.0,) * num_classes, counts=(1,) * num_classes)


def class_weights(counts: Sequence[int], constants: Optional[Sequence[float]] = None) -> ClassWeightTable:
    """
    Inverse-frequency class weights.

    Args:
        counts: Training samples per class
        constants: Per-class constant C_c (defaults to 1 for every class)
    """
    counts = tuple(int(c) for c in counts)
    if not counts:
        raise ValueError("counts must not be empty")
    empty = [i for i, c in enumerate(counts) if c <= 0]
    if empty:
        raise EmptyClassError(f"classes {empty} have no samples")
    num_classes = len(counts)
    constants = tuple(float(c) for c in constants) if constants is not None else (1.0,) * num_classes
    if len(constants) != num_classes:
        raise ValueError(f"{len(constants)} constants given for {num_classes} classes")
    if any(c <= 0 for c in constants):
        raise ValueError("class constants must be positive")

    total = sum(counts)
    weights = tuple(c_c * total / (num_classes * n_c) for c_c, n_c in zip(constants, counts))
    return ClassWeightTable(weights=weights, constants=constants, counts=counts)


# ============ Random oversampling ============

class AugmentSpec(BaseModel):
    """Ranges for the random geometric transform; magnitudes are mild defaults"""
    model_config = ConfigDict(frozen=True, extra="forbid")

    rotation_deg: float = Field(10.0, ge=0.0)
    scale: Tuple[float, float] = (0.9, 1.1)
    shift_px: float = Field(12.0, ge=0.0)
    fill: float = Field(0.0, ge=0.0, le=255.0)
    seed: int = 0

    @field_validator("scale")
    @classmethod
    def _check_scale(cls, value: Tuple[float, float]) -> Tuple[float, float]:
        lo, hi = value
        if lo <= 0 or lo > hi:
            raise ValueError(f"scale range must satisfy 0 < lo <= hi, got {value}")
        return value

    @classmethod
    def from_file(cls, path: Union[str, Path]) -> "AugmentSpec":
        return cls.model_validate_json(Path(path).read_text(encoding="utf-8"))


def apply_affine(img: GrayImage, angle_deg: float, scale: float, dx: float, dy: float,
                 fill: float = 0.0) -> GrayImage:
    """
    Rotate by angle_deg and scale about the image center, then shift by (dx, dy) pixels.

    Bilinear sampling; pixels that map from outside the frame get ``fill``.
    """
    theta = np.deg2rad(angle_deg)
    cos, sin = np.cos(theta), np.sin(theta)
    # output (row, col) -> input (row, col)
    matrix = np.array([[cos, sin], [-sin, cos]]) / scale
    center = (np.array(img.shape, dtype=np.float64) - 1.0) / 2.0
    offset = center - matrix @ (center + np.array([dy, dx]))
    out = ndimage.affine_transform(img.pixels, matrix, offset=offset, order=1,
                                   mode="grid-constant", cval=fill)
    return GrayImage.clipped(out)


def transform_sample(img: GrayImage, spec: AugmentSpec, rng: np.random.Generator) -> GrayImage:
    """Draw (angle, scale, dx, dy) uniformly from the AugmentSpec ranges and apply them"""
    angle = rng.uniform(-spec.rotation_deg, spec.rotation_deg)
    scale = rng.uniform(spec.scale[0], spec.scale[1])
    dx = rng.uniform(-spec.shift_px, spec.shift_px)
    dy = rng.uniform(-spec.shift_px, spec.shift_px)
    return apply_affine(img, angle, scale, dx, dy, spec.fill)


OversampleTarget = Union[str, int, Mapping[int, int]]

OVERSAMPLE_PRESETS: Dict[str, Tuple[LabelScheme, OversampleTarget]] = {
    "table2-rb": (LabelScheme.Binary, {0: 960, 1: 960}),
    "table2-rm3": (LabelScheme.Multi3, "max"),
    "table2-rm4": (LabelScheme.Multi4, "max"),
}


def resolve_targets(current: np.ndarray, target: OversampleTarget) -> np.ndarray:
    """Per-class target counts from 'max', a single count, or a per-class mapping"""
    current = np.asarray(current, dtype=np.int64)
    if isinstance(target, str):
        if target != "max":
            raise ValueError(f"target must be 'max', a count or a per-class mapping, got {target!r}")
        targets = np.full_like(current, current.max())
    elif isinstance(target, Mapping):
        targets = current.copy()
        for cls, count in target.items():
            targets[int(cls)] = int(count)
    else:
        targets = np.full_like(current, int(target))
    below = np.flatnonzero(targets < current)
    if below.size:
        raise TargetBelowCurrentError(
            f"targets {targets[below].tolist()} are below current counts {current[below].tolist()} "
            f"for classes {below.tolist()}")
    return targets


def oversample(manifest: Manifest, scheme: LabelScheme, spec: AugmentSpec, target: OversampleTarget,
               image_root: Union[str, Path], out_dir: Union[str, Path], workers: int = 1) -> Manifest:
    """
    Grow every Train class to its target with augmented copies of random Train records.

    Sources are drawn uniformly with replacement per class; each synthesized image uses a
    generator derived from (seed, class, index) so the output does not depend on thread
    scheduling. Synthesized files are written to out_dir and appended to the manifest as
    SYNTHETIC Train records. Val/Test records are left alone.
    """
    image_root = Path(image_root)
    out_dir = Path(out_dir)
    current = class_counts(manifest, scheme, Split.Train)
    targets = resolve_targets(current, target)

    labels = manifest.labels(scheme)
    jobs = []
    for cls in range(scheme.num_classes):
        needed = int(targets[cls] - current[cls])
        if needed == 0:
            continue
        pool = [r for r, label in zip(manifest.records, labels) if label == cls and r.split == Split.Train]
        if not pool:
            raise EmptyClassError(f"class {cls} ({scheme.class_names[cls]}) has no Train records to oversample")
        picks = class_rng(spec.seed, cls).integers(0, len(pool), size=needed)
        jobs.extend((cls, j, pool[pick]) for j, pick in enumerate(picks))

    def synthesize(job) -> SampleRecord:
        cls, index, source = job
        img = read_image(image_root / source.path)
        augmented = transform_sample(img, spec, class_rng(spec.seed, cls, index))
        out_path = write_image(augmented, out_dir / f"c{cls}_{index:05d}_{Path(source.path).stem}.png")
        relative = Path(os.path.relpath(out_path, image_root)).as_posix()
        return SampleRecord(path=relative, source=Source.SYNTHETIC, finding=source.finding, split=Split.Train)

    with ThreadPoolExecutor(max_workers=max(1, workers)) as executor:
        synthesized = list(tqdm(executor.map(synthesize, jobs), total=len(jobs),
                                desc="oversample", disable=None, leave=False))

    logger.info(f"oversampled {scheme.value} train split: {current.tolist()} -> {targets.tolist()} "
                f"({len(synthesized)} synthesized images)")
    return Manifest(manifest.records + tuple(synthesized), seed=spec.seed)
