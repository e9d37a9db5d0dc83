"""
Adaptive total-variation denoising with a log-fidelity term.

Minimizes, over u > 0,

    E(u) = sum(u - f * ln u) + sum(omega * |grad u|_eps)

by projected gradient descent. The edge-stopping weight omega = 1 / (1 + k |G_sigma * grad f|)
is computed once from the observed image and held fixed, which keeps E convex in u.
Intensities are shifted to [1, 256] internally so that ln u is defined everywhere.
"""

import logging
import math
from dataclasses import dataclass, field
from typing import List, Tuple, Union

import numpy as np
import pandas as pd
from scipy import ndimage

from .errors import DivergedError, NonPositiveUError
from .imaging import (BinaryMask, GrayImage, ThresholdParams, inpaint, resize_bilinear,
                      threshold_mask, INPAINT_MAX_ITERS, INPAINT_TOL)

logger = logging.getLogger(__name__)

ArrayLike = Union[GrayImage, np.ndarray]

INTERNAL_SHIFT = 1.0
POSITIVE_FLOOR = 1e-6
MAX_REJECTED_STEPS = 5


@dataclass(frozen=True)
class TVParams:
    """Adaptive TV parameters. Defaults are tuned for 8-bit radiographs, not taken from literature."""
    k: float = 0.05
    sigma: float = 1.5
    step: float = 0.05
    max_iters: int = 500
    tol: float = 1e-6
    eps: float = 1e-3

    def __post_init__(self):
        for name in ("k", "sigma", "step", "eps"):
            if not getattr(self, name) > 0:
                raise ValueError(f"TVParams.{name} must be > 0, got {getattr(self, name)}")
        if self.max_iters < 1:
            raise ValueError(f"TVParams.max_iters must be >= 1, got {self.max_iters}")
        if self.tol < 0:
            raise ValueError(f"TVParams.tol must be >= 0, got {self.tol}")


@dataclass(frozen=True)
class WeightField:
    """Per-pixel edge-stopping weights in (0, 1]"""
    data: np.ndarray

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]


@dataclass
class EnergyTrace:
    """Energy after every accepted descent step (index 0 is the starting point)"""
    energies: List[float] = field(default_factory=list)
    rejected: int = 0
    converged: bool = False

    @property
    def iterations(self) -> int:
        return max(len(self.energies) - 1, 0)

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame({"iter": np.arange(len(self.energies)), "energy": self.energies})

    def to_csv(self, path) -> None:
        self.to_frame().to_csv(path, index=False, lineterminator="\n", float_format="%.10g")


def _as_array(x: ArrayLike) -> np.ndarray:
    if isinstance(x, GrayImage):
        return x.pixels
    return np.asarray(x, dtype=np.float64)


# ============ Discrete operators ============

def gaussian_kernel(sigma: float) -> np.ndarray:
    """Sampled Gaussian truncated at radius ceil(3 sigma), renormalized to sum 1"""
    if not sigma > 0:
        raise ValueError(f"sigma must be > 0, got {sigma}")
    radius = int(math.ceil(3.0 * sigma))
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    kernel = np.exp(-0.5 * (x / sigma) ** 2)
    return kernel / kernel.sum()


def _blur(arr: np.ndarray, sigma: float) -> np.ndarray:
    kernel = gaussian_kernel(sigma)
    out = ndimage.convolve1d(arr, kernel, axis=0, mode="reflect")
    return ndimage.convolve1d(out, kernel, axis=1, mode="reflect")


def gaussian_blur(img: GrayImage, sigma: float) -> GrayImage:
    """Separable Gaussian blur with reflect padding; preserves total intensity"""
    return GrayImage.clipped(_blur(img.pixels, sigma))


def forward_diff(u: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Forward differences (ux, uy); zero in the last column / last row"""
    ux = np.zeros_like(u)
    uy = np.zeros_like(u)
    ux[:, :-1] = u[:, 1:] - u[:, :-1]
    uy[:-1, :] = u[1:, :] - u[:-1, :]
    return ux, uy


def forward_diff_adjoint(px: np.ndarray, py: np.ndarray) -> np.ndarray:
    """Adjoint of forward_diff, i.e. the negative discrete divergence of (px, py)"""
    px = px.copy()
    py = py.copy()
    px[:, -1] = 0.0
    py[-1, :] = 0.0
    out = -px - py
    out[:, 1:] += px[:, :-1]
    out[1:, :] += py[:-1, :]
    return out


def grad_magnitude(img: ArrayLike, eps: float = 0.0) -> np.ndarray:
    """
    Per-pixel sqrt(ux^2 + uy^2 + eps^2) from forward differences.

    Returns a plain float array: magnitudes are not bounded by 255.
    """
    if eps < 0:
        raise ValueError(f"eps must be >= 0, got {eps}")
    ux, uy = forward_diff(_as_array(img))
    return np.sqrt(ux ** 2 + uy ** 2 + eps ** 2)


def edge_weight(img: GrayImage, params: TVParams) -> WeightField:
    """omega = 1 / (1 + k |G_sigma * grad u|)"""
    smoothed = _blur(img.pixels, params.sigma)
    return WeightField(1.0 / (1.0 + params.k * grad_magnitude(smoothed, 0.0)))


# ============ Energy and descent ============

def tv_energy(u: ArrayLike, f: ArrayLike, omega: Union[WeightField, np.ndarray], eps: float) -> float:
    """Discrete energy sum(u - f ln u) + sum(omega * sqrt(ux^2 + uy^2 + eps^2))"""
    u = _as_array(u)
    f = _as_array(f)
    w = omega.data if isinstance(omega, WeightField) else np.asarray(omega, dtype=np.float64)
    if not (u.shape == f.shape == w.shape):
        raise ValueError(f"shape mismatch: u {u.shape}, f {f.shape}, omega {w.shape}")
    if np.any(u <= 0):
        raise NonPositiveUError("u must be strictly positive for the log-fidelity term")
    fidelity = np.sum(u - f * np.log(u))
    variation = np.sum(w * grad_magnitude(u, eps))
    return float(fidelity + variation)


def energy_gradient(u: np.ndarray, f: np.ndarray, omega: np.ndarray, eps: float) -> np.ndarray:
    """dE/du for the eps-regularized energy"""
    ux, uy = forward_diff(u)
    magnitude = np.sqrt(ux ** 2 + uy ** 2 + eps ** 2)
    return 1.0 - f / u + forward_diff_adjoint(omega * ux / magnitude, omega * uy / magnitude)


def tv_denoise(f: GrayImage, params: TVParams = TVParams()) -> Tuple[GrayImage, EnergyTrace]:
    """
    Denoise an image by gradient descent on the adaptive TV energy.

    A step that would raise the energy is rejected and the step size halved; five
    rejections in a row raise DivergedError. Stops when the relative energy change of an
    accepted step falls below params.tol, or after params.max_iters attempts.

    Returns:
        (denoised image in [0, 255], energy trace of accepted iterates)
    """
    observed = f.pixels + INTERNAL_SHIFT
    omega = edge_weight(f, params).data

    u = np.maximum(observed, POSITIVE_FLOOR)
    energy = tv_energy(u, observed, omega, params.eps)
    trace = EnergyTrace(energies=[energy])
    step = params.step
    rejected_in_a_row = 0

    for _ in range(params.max_iters):
        candidate = np.maximum(u - step * energy_gradient(u, observed, omega, params.eps), POSITIVE_FLOOR)
        candidate_energy = tv_energy(candidate, observed, omega, params.eps)

        if candidate_energy > energy:
            rejected_in_a_row += 1
            trace.rejected += 1
            if rejected_in_a_row >= MAX_REJECTED_STEPS:
                raise DivergedError(
                    f"energy increased on {rejected_in_a_row} consecutive iterations (step now {step:.3g})")
            step *= 0.5
            continue

        rejected_in_a_row = 0
        change = abs(energy - candidate_energy) / max(abs(energy), 1.0)
        u, energy = candidate, candidate_energy
        trace.energies.append(energy)
        if change < params.tol:
            trace.converged = True
            break

    logger.debug(f"tv_denoise: {trace.iterations} accepted steps, {trace.rejected} rejected, "
                 f"final energy {energy:.6g}")
    return GrayImage.clipped(u - INTERNAL_SHIFT), trace


# ============ Quality checks ============

def psnr(reference: ArrayLike, test: ArrayLike, peak: float = 255.0) -> float:
    """Peak signal-to-noise ratio in dB"""
    mse = float(np.mean((_as_array(reference) - _as_array(test)) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(peak ** 2 / mse)


def histogram_correlation(a: ArrayLike, b: ArrayLike, bins: int = 32) -> float:
    """Pearson correlation between the equal-width [0, 255] histograms of two images"""
    ha, _ = np.histogram(_as_array(a), bins=bins, range=(0.0, 255.0))
    hb, _ = np.histogram(_as_array(b), bins=bins, range=(0.0, 255.0))
    return float(np.corrcoef(ha, hb)[0, 1])


# ============ Full preprocessing chain ============

@dataclass(frozen=True)
class PreprocessStages:
    """Intermediate and final outputs of the preprocessing chain for one image"""
    mask: BinaryMask
    inpainted: GrayImage
    resized: GrayImage
    denoised: GrayImage
    trace: EnergyTrace


def preprocess_image(img: GrayImage, threshold: ThresholdParams, tv: TVParams = TVParams(),
                     size: Tuple[int, int] = (331, 331),
                     inpaint_iters: int = INPAINT_MAX_ITERS,
                     inpaint_tol: float = INPAINT_TOL) -> PreprocessStages:
    """threshold mask -> inpaint -> resize to size (width, height) -> adaptive TV denoise"""
    mask = threshold_mask(img, threshold)
    inpainted = inpaint(img, mask, max_iters=inpaint_iters, tol=inpaint_tol)
    resized = resize_bilinear(inpainted, size[0], size[1])
    denoised, trace = tv_denoise(resized, tv)
    return PreprocessStages(mask=mask, inpainted=inpainted, resized=resized, denoised=denoised, trace=trace)
