"""
Synthetic stand-ins for real radiographs: a bright-disc/dark-disc classification set,
a noisy step image for the denoiser, and a tiny-image replica of the fused source
table with its exact per-source, per-finding counts.
"""

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Mapping, Tuple, Union

import numpy as np

from .dataset import Finding, Manifest, SampleRecord, Source, Split, class_rng, write_manifest
from .imaging import GrayImage, write_image

logger = logging.getLogger(__name__)

BACKGROUND = 128.0
BRIGHT_DISC = 230.0
DARK_DISC = 25.0

# (Normal / dark, COVID19 / bright) per split
DISC_COUNTS: Dict[Split, Tuple[int, int]] = {
    Split.Train: (140, 60),
    Split.Val: (28, 12),
    Split.Test: (28, 12),
}

CORPUS_COUNTS: Dict[Source, Dict[Finding, int]] = {
    Source.COVID19: {Finding.COVID19: 108, Finding.OtherPneumonia: 45},
    Source.RSNA: {Finding.Normal: 453, Finding.OtherPneumonia: 470},
    Source.NLMMC: {Finding.Tuberculosis: 58, Finding.Normal: 80},
}


@dataclass(frozen=True)
class Disc:
    row: float
    col: float
    radius: float

    def mask(self, size: int) -> np.ndarray:
        rr, cc = np.mgrid[0:size, 0:size]
        return (rr - self.row) ** 2 + (cc - self.col) ** 2 <= self.radius ** 2


@dataclass(frozen=True)
class DiscDataset:
    manifest: Manifest
    discs: Dict[str, Disc]
    size: int


def disc_image(size: int, disc: Disc, value: float, noise_sigma: float,
               rng: np.random.Generator) -> GrayImage:
    pixels = np.full((size, size), BACKGROUND)
    pixels[disc.mask(size)] = value
    pixels = pixels + rng.normal(0.0, noise_sigma, size=pixels.shape)
    return GrayImage.clipped(pixels)


def make_disc_dataset(root: Union[str, Path], size: int = 64, seed: int = 0,
                      counts: Mapping[Split, Tuple[int, int]] = DISC_COUNTS,
                      noise_sigma: float = 8.0) -> DiscDataset:
    """
    Write a two-class disc dataset under root and return its manifest.

    Normal images carry a dark disc, COVID19 images a bright one, both on a mid-gray
    noisy background; radius and position vary per image. The manifest is written to
    root/manifest.csv with paths relative to root.
    """
    root = Path(root)
    records, discs = [], {}
    for split_index, (split, (n_dark, n_bright)) in enumerate(counts.items()):
        for finding, value, n in ((Finding.Normal, DARK_DISC, n_dark), (Finding.COVID19, BRIGHT_DISC, n_bright)):
            for i in range(n):
                rng = class_rng(seed, split_index, int(value), i)
                radius = rng.uniform(0.25, 0.32) * size
                margin = radius + 2.0
                disc = Disc(row=rng.uniform(margin, size - 1 - margin),
                            col=rng.uniform(margin, size - 1 - margin), radius=radius)
                path = f"{split.value.lower()}/{finding.value}_{i:04d}.png"
                write_image(disc_image(size, disc, value, noise_sigma, rng), root / path)
                records.append(SampleRecord(path=path, source=Source.SYNTHETIC, finding=finding, split=split))
                discs[path] = disc
    manifest = Manifest(tuple(records), seed=seed)
    write_manifest(manifest, root / "manifest.csv")
    logger.info(f"wrote {len(records)} disc images to {root}")
    return DiscDataset(manifest=manifest, discs=discs, size=size)


def step_image(size: int = 128, low: float = 64.0, high: float = 192.0) -> GrayImage:
    """Left half low, right half high"""
    pixels = np.full((size, size), low)
    pixels[:, size // 2:] = high
    return GrayImage(pixels)


def add_gaussian_noise(img: GrayImage, sigma: float, seed: int = 0) -> GrayImage:
    rng = class_rng(seed)
    return GrayImage.clipped(img.pixels + rng.normal(0.0, sigma, size=img.shape))


def corpus_standin(root: Union[str, Path], size: int = 16, seed: int = 0) -> Dict[Source, Manifest]:
    """
    1214 tiny images with the fused corpus's per-source/per-finding counts, one manifest
    per source at root/<source>.csv (paths relative to root).
    """
    root = Path(root)
    level = {Finding.Normal: 60.0, Finding.COVID19: 200.0, Finding.OtherPneumonia: 130.0, Finding.Tuberculosis: 170.0}
    manifests = {}
    for source_index, (source, findings) in enumerate(CORPUS_COUNTS.items()):
        records = []
        for finding, n in findings.items():
            for i in range(n):
                rng = class_rng(seed, source_index, int(level[finding]), i)
                pixels = level[finding] + rng.normal(0.0, 20.0, size=(size, size))
                path = f"{source.value}/{finding.value}_{i:04d}.png"
                write_image(GrayImage.clipped(pixels), root / path)
                records.append(SampleRecord(path=path, source=source, finding=finding))
        manifests[source] = Manifest(tuple(records), seed=seed)
        write_manifest(manifests[source], root / f"{source.value}.csv")
    logger.info(f"wrote {sum(len(m) for m in manifests.values())} stand-in images to {root}")
    return manifests
