"""
Training loop for the residual CNN: seeded mini-batch shuffling, Adam updates,
per-epoch evaluation on train and validation data, early stopping on validation loss,
and stratified k-fold cross-validation.
"""

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from pydantic import BaseModel, ConfigDict, Field
from tqdm import tqdm

from .dataset import LabelScheme, Manifest, Split, class_rng, stratified_folds
from .errors import EmptyManifestError
from .imaging import read_image, resize_bilinear
from .imbalance import ClassWeightTable, class_weights
from .layers import Tensor
from .metrics import EvalReport, evaluate, one_hot
from .network import NetworkSpec, ResidualCNN, to_network_input
from .resources import ResourceMonitor

logger = logging.getLogger(__name__)

TRACE_COLUMNS = ["epoch", "split", "loss", "accuracy", "precision", "recall", "specificity", "f1", "auc"]
FOLD_COLUMNS = ["fold", "loss", "accuracy", "precision", "recall", "specificity", "f1", "auc", "best_epoch"]


class TrainConfig(BaseModel):
    """Optimizer, batching and stopping settings; lr and patience are desk-scale defaults"""
    model_config = ConfigDict(frozen=True, extra="forbid")

    batch_size: int = Field(10, ge=1)
    learning_rate: float = Field(1e-3, gt=0.0)
    beta1: float = Field(0.9, ge=0.0, lt=1.0)
    beta2: float = Field(0.999, ge=0.0, lt=1.0)
    eps: float = Field(1e-8, gt=0.0)
    max_epochs: int = Field(30, ge=1)
    patience: int = Field(5, ge=1)
    min_delta: float = Field(0.0, ge=0.0)
    folds: int = Field(4, ge=2)
    seed: int = 0
    frozen_layers: Tuple[str, ...] = ()
    eval_batch_size: int = Field(32, ge=1)


# ============ Adam ============

@dataclass
class AdamState:
    """Step counter and first/second moment estimates, keyed by parameter name"""
    t: int = 0
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: Dict[str, Tensor], state: AdamState, config: TrainConfig) -> AdamState:
    """
    One bias-corrected Adam update, in place on ``Tensor.data``.

    Parameters whose grad is None (frozen) are skipped and get no moment buffers.
    """
    active = {name: p for name, p in params.items() if p.grad is not None}
    if not active:
        return state
    state.t += 1
    b1, b2 = config.beta1, config.beta2
    correction1 = 1.0 - b1 ** state.t
    correction2 = 1.0 - b2 ** state.t
    for name, p in active.items():
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m = np.zeros_like(p.data)
            v = np.zeros_like(p.data)
        m = b1 * m + (1.0 - b1) * p.grad
        v = b2 * v + (1.0 - b2) * p.grad ** 2
        state.m[name], state.v[name] = m, v
        p.data = p.data - config.learning_rate * (m / correction1) / (np.sqrt(v / correction2) + config.eps)
    return state


# ============ Early stopping ============

class EarlyStopping:
    """Stop once the monitored loss has not improved for ``patience`` epochs; keeps the best weights"""

    def __init__(self, patience: int = 5, min_delta: float = 0.0):
        self.patience = patience
        self.min_delta = min_delta
        self.best = float('inf')
        self.best_epoch = 0
        self.best_state: Optional[Dict[str, np.ndarray]] = None
        self.wait = 0
        self.stopped_epoch = 0

    def __call__(self, epoch: int, current: float, model: ResidualCNN) -> bool:
        if np.isfinite(current) and current < self.best - self.min_delta:
            self.best = current
            self.best_epoch = epoch
            self.best_state = model.state_dict()
            self.wait = 0
            return False
        self.wait += 1
        if self.wait >= self.patience:
            self.stopped_epoch = epoch
            return True
        return False

    def restore(self, model: ResidualCNN) -> None:
        if self.best_state is not None:
            model.load_state_dict(self.best_state)


# ============ Data ============

@dataclass
class LabeledImages:
    """Grayscale images (N, H, W) in [0, 255] and their class indices"""
    images: np.ndarray
    labels: np.ndarray
    paths: Tuple[str, ...] = ()

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 3 or len(self.images) != len(self.labels):
            raise ValueError(f"need images (N, H, W) with N labels, got {self.images.shape} and {self.labels.shape}")

    def __len__(self) -> int:
        return len(self.labels)

    def subset(self, index: np.ndarray) -> "LabeledImages":
        paths = tuple(self.paths[i] for i in index) if self.paths else ()
        return LabeledImages(self.images[index], self.labels[index], paths)

    @classmethod
    def from_manifest(cls, manifest: Manifest, split: Optional[Split], scheme: LabelScheme,
                      image_root: Union[str, Path], input_hw: Tuple[int, int],
                      workers: int = 1) -> "LabeledImages":
        """Load the records of one split, resizing any image that is not input_hw"""
        if split is not None:
            manifest = manifest.subset(split)
        if len(manifest) == 0:
            raise EmptyManifestError(f"no records to load for split {split.value if split else 'any'}")
        image_root = Path(image_root)
        height, width = input_hw

        def load(record) -> np.ndarray:
            img = read_image(image_root / record.path)
            if img.shape != (height, width):
                img = resize_bilinear(img, width, height)
            return img.pixels

        with ThreadPoolExecutor(max_workers=max(1, workers)) as executor:
            images = list(tqdm(executor.map(load, manifest.records), total=len(manifest),
                               desc=f"load {split.value if split else 'all'}", disable=None, leave=False))
        return cls(np.stack(images), manifest.labels(scheme), tuple(r.path for r in manifest.records))


# ============ Trace ============

@dataclass
class MetricTrace:
    """Per-epoch macro metrics for each split"""
    rows: List[Dict[str, Any]] = field(default_factory=list)

    def add(self, epoch: int, split: str, report: EvalReport) -> None:
        m = report.macro
        self.rows.append({
            "epoch": epoch, "split": split, "loss": report.loss,
            "accuracy": m.accuracy, "precision": m.precision, "recall": m.recall,
            "specificity": m.specificity, "f1": m.f1,
            "auc": m.auc if m.auc is not None else float("nan"),
        })

    def losses(self, split: str) -> List[float]:
        return [r["loss"] for r in self.rows if r["split"] == split]

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame(self.rows, columns=TRACE_COLUMNS)

    def to_csv(self, path: Union[str, Path]) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        self.to_frame().to_csv(path, index=False, lineterminator="\n", float_format="%.10g")
        return path


@dataclass
class TrainedModel:
    network: ResidualCNN
    trace: MetricTrace
    best_epoch: int
    best_val_loss: float
    epochs_run: int
    stopped_early: bool = False
    resources: Dict[str, Any] = field(default_factory=dict)


def evaluate_dataset(net: ResidualCNN, data: LabeledImages, weights=None, batch_size: int = 32) -> EvalReport:
    probs = net.predict_proba(data.images, batch_size=batch_size)
    names = net.spec.class_names or None
    return evaluate(probs, data.labels, weights, class_names=names)


def train(net: ResidualCNN, train_data: LabeledImages, val_data: LabeledImages,
          weights: Optional[ClassWeightTable], config: TrainConfig,
          monitor: Optional[ResourceMonitor] = None) -> TrainedModel:
    """
    Train in place and return the network restored to its best validation-loss epoch.

    Each epoch draws a fresh permutation from a generator seeded by config.seed, so
    (seed, data, config) determine the final parameters exactly.
    """
    if len(train_data) == 0 or len(val_data) == 0:
        raise EmptyManifestError("training and validation data must both be non-empty")
    if config.frozen_layers:
        net.freeze(config.frozen_layers)
    if weights is not None:
        logger.info(f"class weights: {[round(w, 4) for w in weights.weights]}")

    monitor = monitor or ResourceMonitor()
    num_classes = net.spec.num_classes
    channels = net.spec.input_dims[0]
    rng = class_rng(config.seed)
    state = AdamState()
    stopper = EarlyStopping(config.patience, config.min_delta)
    trace = MetricTrace()
    epochs_run = 0
    stopped_early = False

    for epoch in tqdm(range(1, config.max_epochs + 1), desc="epochs", disable=None, leave=False):
        order = rng.permutation(len(train_data))
        for start in range(0, len(order), config.batch_size):
            index = order[start:start + config.batch_size]
            batch = to_network_input(train_data.images[index], channels)
            net.backward(batch, one_hot(train_data.labels[index], num_classes), weights)
            adam_step(net.trainable_parameters(), state, config)

        train_report = evaluate_dataset(net, train_data, weights, config.eval_batch_size)
        val_report = evaluate_dataset(net, val_data, weights, config.eval_batch_size)
        trace.add(epoch, "train", train_report)
        trace.add(epoch, "val", val_report)
        usage = monitor.log_sample(f"epoch {epoch}")
        epochs_run = epoch
        logger.info(f"epoch {epoch}: train loss {train_report.loss:.4f} acc {train_report.macro.accuracy:.3f} | "
                    f"val loss {val_report.loss:.4f} acc {val_report.macro.accuracy:.3f} | "
                    f"rss {usage['rss_mb']:.0f}MB")

        if stopper(epoch, val_report.loss, net):
            stopped_early = True
            logger.info(f"early stop at epoch {epoch}: val loss has not improved since epoch {stopper.best_epoch}")
            break

    stopper.restore(net)
    return TrainedModel(network=net, trace=trace, best_epoch=stopper.best_epoch, best_val_loss=stopper.best,
                        epochs_run=epochs_run, stopped_early=stopped_early, resources=monitor.summary())


# ============ Cross-validation ============

@dataclass
class KFoldResult:
    models: List[TrainedModel]
    reports: List[EvalReport]
    table: pd.DataFrame

    def to_csv(self, path: Union[str, Path]) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        self.table.to_csv(path, index=False, lineterminator="\n", float_format="%.10g")
        return path


def kfold_train(spec: NetworkSpec, data: LabeledImages, config: TrainConfig,
                class_weighted: bool = True, constants: Optional[Sequence[float]] = None,
                monitor: Optional[ResourceMonitor] = None) -> KFoldResult:
    """
    One model per stratified fold, each from the same initialization (spec.seed).

    With class_weighted, class weights are recomputed from each fold's training labels.
    The returned table has one row per fold (validation metrics of the restored model)
    and a trailing ``mean`` row.
    """
    folds = stratified_folds(data.labels, config.folds, config.seed)
    models, reports, rows = [], [], []
    for fold, (train_idx, val_idx) in enumerate(folds, start=1):
        train_data, val_data = data.subset(train_idx), data.subset(val_idx)
        weights = None
        if class_weighted:
            counts = np.bincount(train_data.labels, minlength=spec.num_classes)
            weights = class_weights(counts, constants)
        logger.info(f"fold {fold}/{len(folds)}: {len(train_data)} train, {len(val_data)} val")
        trained = train(ResidualCNN(spec), train_data, val_data, weights, config, monitor)
        report = evaluate_dataset(trained.network, val_data, weights, config.eval_batch_size)
        models.append(trained)
        reports.append(report)
        m = report.macro
        rows.append({"fold": str(fold), "loss": report.loss, "accuracy": m.accuracy, "precision": m.precision,
                     "recall": m.recall, "specificity": m.specificity, "f1": m.f1,
                     "auc": m.auc if m.auc is not None else float("nan"), "best_epoch": trained.best_epoch})

    table = pd.DataFrame(rows, columns=FOLD_COLUMNS)
    mean_row = table[FOLD_COLUMNS[1:]].mean(numeric_only=True).to_dict()
    mean_row["fold"] = "mean"
    table = pd.concat([table, pd.DataFrame([mean_row], columns=FOLD_COLUMNS)], ignore_index=True)
    return KFoldResult(models=models, reports=reports, table=table)
