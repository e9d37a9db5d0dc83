"""
Dataset-as-table: sample records, label schemes, fusion of source manifests,
deterministic stratified splitting and k-fold partitions.

Manifests are CSV files with the header ``path,source,finding,split``; paths are
relative to an image root so datasets can be moved.
"""

import logging
from dataclasses import dataclass, replace
from enum import Enum
from pathlib import Path
from typing import Dict, Iterator, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from sklearn.model_selection import StratifiedKFold

from .errors import ConfigError, CountMismatchError, DuplicatePathError, TooFewSamplesError

logger = logging.getLogger(__name__)

MANIFEST_COLUMNS = ["path", "source", "finding", "split"]


class Source(str, Enum):
    COVID19 = "COVID19"
    RSNA = "RSNA"
    NLMMC = "NLMMC"
    SYNTHETIC = "SYNTHETIC"


class Finding(str, Enum):
    Normal = "Normal"
    COVID19 = "COVID19"
    OtherPneumonia = "OtherPneumonia"
    Tuberculosis = "Tuberculosis"


class Split(str, Enum):
    Train = "Train"
    Val = "Val"
    Test = "Test"
    Unassigned = "Unassigned"


_ENCODINGS: Dict[str, Dict[Finding, int]] = {
    "Binary": {Finding.Normal: 0, Finding.COVID19: 1, Finding.OtherPneumonia: 0, Finding.Tuberculosis: 0},
    "Multi3": {Finding.Normal: 0, Finding.COVID19: 1, Finding.OtherPneumonia: 2, Finding.Tuberculosis: 2},
    "Multi4": {Finding.Normal: 0, Finding.COVID19: 1, Finding.OtherPneumonia: 2, Finding.Tuberculosis: 3},
}

_CLASS_NAMES: Dict[str, Tuple[str, ...]] = {
    "Binary": ("nonCOVID19", "COVID19"),
    "Multi3": ("Normal", "COVID19", "Other"),
    "Multi4": ("Normal", "COVID19", "OtherPneumonia", "Tuberculosis"),
}

_CODES = {"Binary": "B", "Multi3": "M3", "Multi4": "M4"}


class LabelScheme(str, Enum):
    """Binary (COVID-19 vs rest), 3-class and 4-class labelings of the four findings"""
    Binary = "Binary"
    Multi3 = "Multi3"
    Multi4 = "Multi4"

    @property
    def num_classes(self) -> int:
        return len(_CLASS_NAMES[self.value])

    @property
    def class_names(self) -> Tuple[str, ...]:
        return _CLASS_NAMES[self.value]

    @property
    def code(self) -> str:
        """Short code used in scenario names: B, M3, M4"""
        return _CODES[self.value]

    @classmethod
    def parse(cls, text: str) -> "LabelScheme":
        """Accept the enum name or the short code, case-insensitively"""
        key = text.strip().lower()
        for scheme in cls:
            if key in (scheme.value.lower(), scheme.code.lower()):
                return scheme
        raise ValueError(f"unknown label scheme {text!r}")

    def index_of(self, finding: Finding) -> int:
        return _ENCODINGS[self.value][Finding(finding)]


def encode_label(finding: Finding, scheme: LabelScheme) -> int:
    """Class index of a finding under a label scheme"""
    return scheme.index_of(finding)


@dataclass(frozen=True)
class SampleRecord:
    path: str
    source: Source
    finding: Finding
    split: Split = Split.Unassigned


@dataclass(frozen=True)
class Manifest:
    """Ordered sample records plus the seed used for any assignment"""
    records: Tuple[SampleRecord, ...]
    seed: int = 0

    def __post_init__(self):
        records = tuple(self.records)
        seen = set()
        for record in records:
            if record.path in seen:
                raise DuplicatePathError(f"duplicate path in manifest: {record.path}")
            seen.add(record.path)
        object.__setattr__(self, "records", records)

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self) -> Iterator[SampleRecord]:
        return iter(self.records)

    def labels(self, scheme: LabelScheme) -> np.ndarray:
        return np.array([scheme.index_of(r.finding) for r in self.records], dtype=np.int64)

    def subset(self, split: Split) -> "Manifest":
        return Manifest(tuple(r for r in self.records if r.split == split), seed=self.seed)


def class_counts(manifest: Manifest, scheme: LabelScheme, split: Optional[Split] = None) -> np.ndarray:
    """Per-class record counts, optionally restricted to one split"""
    if split is not None:
        manifest = manifest.subset(split)
    return np.bincount(manifest.labels(scheme), minlength=scheme.num_classes)


# ============ Fusion ============

def fuse(manifests: Sequence[Manifest]) -> Manifest:
    """Concatenate manifests in order; paths must be disjoint"""
    if not manifests:
        return Manifest(())
    records: List[SampleRecord] = []
    for m in manifests:
        records.extend(m.records)
    fused = Manifest(tuple(records), seed=manifests[0].seed)
    logger.info(f"fused {len(manifests)} manifests into {len(fused)} records")
    return fused


# ============ Splitting ============

SplitCounts = Mapping[int, Tuple[int, int, int]]

# Train/val/test sizes per class index; the random-oversampling columns share these
# sizes before the training split is oversampled.
SPLIT_PRESETS: Dict[str, Tuple[LabelScheme, Dict[int, Tuple[int, int, int]]]] = {
    "table2-cb": (LabelScheme.Binary, {0: (906, 90, 110), 1: (88, 9, 11)}),
    "table2-cm3": (LabelScheme.Multi3, {0: (437, 44, 52), 1: (88, 9, 11), 2: (469, 46, 58)}),
    "table2-cm4": (LabelScheme.Multi4, {0: (437, 44, 52), 1: (88, 9, 11), 2: (422, 41, 52), 3: (47, 5, 6)}),
}
SPLIT_PRESETS["table2-rb"] = SPLIT_PRESETS["table2-cb"]
SPLIT_PRESETS["table2-rm3"] = SPLIT_PRESETS["table2-cm3"]
SPLIT_PRESETS["table2-rm4"] = SPLIT_PRESETS["table2-cm4"]


def class_rng(seed: int, *keys: int) -> np.random.Generator:
    """PCG64 generator derived from (seed, keys...) so streams are independent and reproducible"""
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, *keys])))


def split(manifest: Manifest, scheme: LabelScheme, counts: Union[SplitCounts, Sequence[Tuple[int, int, int]]],
          seed: int) -> Manifest:
    """
    Assign Train/Val/Test per class.

    Each class's records (in manifest order) are shuffled with a PCG64 stream derived
    from (seed, class index); the first n_train go to Train, the next n_val to Val and
    the rest to Test. Record order in the returned manifest is unchanged.
    """
    if not isinstance(counts, Mapping):
        counts = dict(enumerate(counts))
    unknown = set(counts) - set(range(scheme.num_classes))
    if unknown:
        raise CountMismatchError(f"counts given for classes {sorted(unknown)} outside {scheme.value}")

    labels = manifest.labels(scheme)
    assigned = [Split.Unassigned] * len(manifest)
    for cls in range(scheme.num_classes):
        members = np.flatnonzero(labels == cls)
        n_train, n_val, n_test = counts.get(cls, (0, 0, 0))
        if min(n_train, n_val, n_test) < 0 or n_train + n_val + n_test != len(members):
            raise CountMismatchError(
                f"class {cls} ({scheme.class_names[cls]}) has {len(members)} records, "
                f"counts {(n_train, n_val, n_test)} sum to {n_train + n_val + n_test}")
        order = members[class_rng(seed, cls).permutation(len(members))]
        for position, index in enumerate(order):
            if position < n_train:
                assigned[index] = Split.Train
            elif position < n_train + n_val:
                assigned[index] = Split.Val
            else:
                assigned[index] = Split.Test

    records = tuple(replace(r, split=s) for r, s in zip(manifest.records, assigned))
    return Manifest(records, seed=seed)


# ============ Cross-validation folds ============

def stratified_folds(labels: np.ndarray, k: int, seed: int) -> List[Tuple[np.ndarray, np.ndarray]]:
    """Stratified (train_idx, val_idx) partitions; per-class fold sizes differ by at most 1"""
    if k < 2:
        raise ValueError(f"k must be >= 2, got {k}")
    labels = np.asarray(labels, dtype=np.int64)
    present = np.bincount(labels)
    present = present[present > 0]
    if len(labels) == 0 or present.min() < k:
        raise TooFewSamplesError(f"every class needs at least {k} samples, smallest has "
                                 f"{present.min() if len(present) else 0}")
    splitter = StratifiedKFold(n_splits=k, shuffle=True, random_state=seed % (2 ** 32))
    return [(train, val) for train, val in splitter.split(np.zeros(len(labels)), labels)]


def kfold(manifest: Manifest, k: int, seed: int,
          scheme: LabelScheme = LabelScheme.Multi4) -> List[Tuple[np.ndarray, np.ndarray]]:
    """Stratified k-fold index partitions of a manifest"""
    return stratified_folds(manifest.labels(scheme), k, seed)


# ============ CSV I/O ============

def to_frame(manifest: Manifest) -> pd.DataFrame:
    return pd.DataFrame(
        [(r.path, r.source.value, r.finding.value, r.split.value) for r in manifest.records],
        columns=MANIFEST_COLUMNS,
    )


def write_manifest(manifest: Manifest, path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    to_frame(manifest).to_csv(path, index=False, lineterminator="\n")
    return path


def read_manifest(path: Union[str, Path], seed: int = 0) -> Manifest:
    try:
        frame = pd.read_csv(path, dtype=str, keep_default_na=False)
    except (OSError, pd.errors.ParserError, pd.errors.EmptyDataError) as e:
        raise ConfigError(f"cannot read manifest {path}: {e}") from e
    if list(frame.columns) != MANIFEST_COLUMNS:
        raise ConfigError(f"manifest {path} must have header {','.join(MANIFEST_COLUMNS)}, "
                          f"got {','.join(frame.columns)}")
    try:
        records = tuple(
            SampleRecord(path=row.path, source=Source(row.source), finding=Finding(row.finding),
                         split=Split(row.split or Split.Unassigned.value))
            for row in frame.itertuples(index=False)
        )
    except ValueError as e:
        raise ConfigError(f"bad value in manifest {path}: {e}") from e
    return Manifest(records, seed=seed)
