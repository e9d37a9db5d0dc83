"""
Grayscale image container and the pre-denoising stages of the preprocessing chain:
artifact masking, harmonic inpainting, bilinear resizing and histograms.

All operations are pure: they take immutable ``GrayImage`` values and return new ones,
so they can be called from worker threads without locking.
"""

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Union

import numpy as np
import pandas as pd
from PIL import Image, UnidentifiedImageError
from scipy import ndimage

from .errors import AllMaskedError, ImageReadError, ImageWriteError, ZeroDimensionError

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]

LUMA_WEIGHTS = np.array([0.299, 0.587, 0.114])
INPAINT_TOL = 0.01
INPAINT_MAX_ITERS = 10_000

# 4-neighbourhood used by the Jacobi relaxation
_NEIGHBOURS = np.array([[0.0, 1.0, 0.0],
                        [1.0, 0.0, 1.0],
                        [0.0, 1.0, 0.0]])


@dataclass(frozen=True)
class GrayImage:
    """2-D grayscale raster of float64 intensities in [0, 255], shape (height, width)"""
    pixels: np.ndarray

    def __post_init__(self):
        arr = np.array(self.pixels, dtype=np.float64)
        if arr.ndim != 2:
            raise ValueError(f"GrayImage needs a 2-D array, got shape {arr.shape}")
        if arr.size == 0:
            raise ZeroDimensionError("GrayImage needs at least one pixel")
        if not np.all(np.isfinite(arr)):
            raise ValueError("GrayImage intensities must be finite")
        if arr.min() < 0.0 or arr.max() > 255.0:
            raise ValueError(f"GrayImage intensities must lie in [0, 255], got [{arr.min()}, {arr.max()}]")
        arr.setflags(write=False)
        object.__setattr__(self, "pixels", arr)

    @classmethod
    def clipped(cls, values: np.ndarray) -> "GrayImage":
        """Build an image from arbitrary finite values by clamping to [0, 255]"""
        return cls(np.clip(np.asarray(values, dtype=np.float64), 0.0, 255.0))

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def shape(self):
        return self.pixels.shape

    @property
    def data(self) -> np.ndarray:
        """Row-major flat view of the intensities"""
        return self.pixels.reshape(-1)


@dataclass(frozen=True)
class BinaryMask:
    """Boolean raster; True marks an artifact pixel to inpaint"""
    data: np.ndarray

    def __post_init__(self):
        arr = np.array(self.data, dtype=bool)
        if arr.ndim != 2:
            raise ValueError(f"BinaryMask needs a 2-D array, got shape {arr.shape}")
        arr.setflags(write=False)
        object.__setattr__(self, "data", arr)

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def count(self) -> int:
        return int(self.data.sum())


@dataclass(frozen=True)
class ThresholdParams:
    """Binary-threshold mask parameters; max_th is only used when rendering the mask"""
    min_th: float
    max_th: float

    def __post_init__(self):
        for name in ("min_th", "max_th"):
            value = getattr(self, name)
            if not 0.0 <= value <= 255.0:
                raise ValueError(f"{name} must lie in [0, 255], got {value}")
        if self.min_th > self.max_th:
            raise ValueError(f"min_th ({self.min_th}) must not exceed max_th ({self.max_th})")


@dataclass(frozen=True)
class Histogram:
    """Equal-width intensity histogram over [0, 255]"""
    counts: np.ndarray
    bin_edges: np.ndarray

    @property
    def bin_count(self) -> int:
        return len(self.counts)

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def to_frame(self, stage: Optional[str] = None) -> pd.DataFrame:
        frame = pd.DataFrame({
            "bin_left": self.bin_edges[:-1],
            "bin_right": self.bin_edges[1:],
            "count": self.counts,
        })
        if stage is not None:
            frame.insert(0, "stage", stage)
        return frame


# ============ Masking and inpainting ============

def threshold_mask(img: GrayImage, params: ThresholdParams) -> BinaryMask:
    """Mark every pixel with intensity >= min_th (inclusive)"""
    return BinaryMask(img.pixels >= params.min_th)


def render_mask(mask: BinaryMask, params: ThresholdParams) -> GrayImage:
    """Render a mask as an image: max_th on masked pixels, 0 elsewhere"""
    return GrayImage(np.where(mask.data, params.max_th, 0.0))


def inpaint(img: GrayImage, mask: BinaryMask,
            max_iters: int = INPAINT_MAX_ITERS, tol: float = INPAINT_TOL) -> GrayImage:
    """
    Fill masked pixels with the harmonic interpolation of their surroundings.

    Jacobi relaxation of the discrete Laplace equation on the masked set, with the
    unmasked pixels as fixed boundary values. Neighbours outside the frame are skipped.
    Masked pixels start from their own value clamped to the unmasked range, so the
    iterates obey the discrete maximum principle and a second pass is a no-op.

    Args:
        img: Image to repair
        mask: Pixels to replace (same shape as img)
        max_iters: Iteration cap
        tol: Stop once the largest per-pixel update drops below this

    Returns:
        New image; unmasked pixels are bit-identical to the input
    """
    if mask.data.shape != img.shape:
        raise ValueError(f"mask shape {mask.data.shape} does not match image shape {img.shape}")

    masked = mask.data
    if not masked.any():
        return img
    if masked.all():
        raise AllMaskedError("every pixel is masked; nothing to interpolate from")

    known = img.pixels[~masked]
    lo, hi = known.min(), known.max()

    u = np.array(img.pixels)
    u[masked] = np.clip(u[masked], lo, hi)
    neighbour_count = ndimage.convolve(np.ones_like(u), _NEIGHBOURS, mode="constant", cval=0.0)

    update = np.inf
    for iteration in range(1, max_iters + 1):
        average = ndimage.convolve(u, _NEIGHBOURS, mode="constant", cval=0.0) / neighbour_count
        update = np.abs(average[masked] - u[masked]).max()
        u[masked] = average[masked]
        if update < tol:
            logger.debug(f"inpaint converged after {iteration} iterations ({mask.count} pixels)")
            break
    else:
        logger.warning(f"inpaint stopped at max_iters={max_iters} with last update {update:.4g}")

    return GrayImage(u)


# ============ Resizing ============

def _aligned_coords(n_in: int, n_out: int, align_corners: bool = True) -> np.ndarray:
    if not align_corners:
        # output pixel centers mapped onto input pixel centers
        return (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    if n_out == 1:
        return np.array([(n_in - 1) / 2.0])
    return np.linspace(0.0, n_in - 1, n_out)


def bilinear_resize_array(arr: np.ndarray, out_h: int, out_w: int, align_corners: bool = True) -> np.ndarray:
    """
    Bilinear resize of any 2-D float array (no clamping). Corner-aligned by default;
    with ``align_corners=False`` each input pixel covers an equal block of the output.
    """
    if out_h < 1 or out_w < 1:
        raise ZeroDimensionError(f"target size must be positive, got {out_w}x{out_h}")
    arr = np.asarray(arr, dtype=np.float64)
    rows = _aligned_coords(arr.shape[0], out_h, align_corners)
    cols = _aligned_coords(arr.shape[1], out_w, align_corners)
    grid = np.meshgrid(rows, cols, indexing="ij")
    return ndimage.map_coordinates(arr, grid, order=1, mode="nearest")


def resize_bilinear(img: GrayImage, out_w: int, out_h: int) -> GrayImage:
    """Resize with corner-aligned bilinear sampling; same size returns the pixels unchanged"""
    if out_w < 1 or out_h < 1:
        raise ZeroDimensionError(f"target size must be positive, got {out_w}x{out_h}")
    if (out_h, out_w) == img.shape:
        return GrayImage(img.pixels)
    return GrayImage.clipped(bilinear_resize_array(img.pixels, out_h, out_w))


# ============ Histograms ============

def histogram(img: GrayImage, bins: int) -> Histogram:
    """Equal-width bins over [0, 255]; the top edge is inclusive"""
    if bins < 1:
        raise ValueError(f"bins must be >= 1, got {bins}")
    counts, edges = np.histogram(img.pixels, bins=bins, range=(0.0, 255.0))
    return Histogram(counts=counts.astype(np.int64), bin_edges=edges)


# ============ File I/O ============

def _to_gray_array(im: Image.Image) -> np.ndarray:
    if im.mode == "L":
        arr = np.asarray(im, dtype=np.float64)
    elif im.mode.startswith("I"):
        arr = np.asarray(im, dtype=np.float64) * (255.0 / 65535.0)
    elif im.mode == "F":
        arr = np.asarray(im, dtype=np.float64)
    else:
        rgb = np.asarray(im.convert("RGB"), dtype=np.float64)
        arr = rgb @ LUMA_WEIGHTS
    return np.clip(arr, 0.0, 255.0)


def read_image(path: PathLike) -> GrayImage:
    """Load a PNG/PGM (or any Pillow-readable) file as grayscale"""
    try:
        with Image.open(path) as im:
            im.load()
            arr = _to_gray_array(im)
    except (UnidentifiedImageError, OSError, ValueError) as e:
        raise ImageReadError(f"cannot read image {path}: {e}") from e
    return GrayImage(arr)


def write_image(img: GrayImage, path: PathLike) -> Path:
    """Write an 8-bit grayscale file; the format follows the suffix (.png, .pgm)"""
    path = Path(path)
    data = np.clip(np.rint(img.pixels), 0, 255).astype(np.uint8)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        Image.fromarray(data).save(path)
    except (OSError, ValueError, KeyError) as e:
        raise ImageWriteError(f"cannot write image {path}: {e}") from e
    return path
