"""
Command-line entry point: ``cxrkit <subcommand> ...``.

Exit codes: 0 success, 1 partial failure or pipeline error, 2 configuration error.
"""

import argparse
import json
import logging
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from tqdm import tqdm

from .checkpoint import load_checkpoint, save_checkpoint
from .config import (ImbalanceStrategy, RunConfig, TVConfig, configure_logging, get_settings,
                     load_run_config)
from .dataset import (SPLIT_PRESETS, LabelScheme, Manifest, Split, class_counts, fuse, read_manifest, split,
                      write_manifest)
from .denoise import preprocess_image, psnr, tv_denoise
from .errors import ConfigError, CxrKitError, MissingRunError
from .explain import grad_cam, lime_explain, render_overlay, write_sidecar
from .imaging import histogram, read_image, render_mask, resize_bilinear, write_image
from .imbalance import OVERSAMPLE_PRESETS, AugmentSpec, class_weights, oversample
from .network import ResidualCNN
from .resources import ResourceMonitor
from .rundir import RunDirectory, find_runs, inputs_digest
from .synthetic import add_gaussian_noise, make_disc_dataset, step_image, corpus_standin
from .training import LabeledImages, evaluate_dataset, kfold_train, train

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_PARTIAL = 1
EXIT_CONFIG = 2

HISTOGRAM_BINS = 32
REPORT_METRICS = [("Accuracy", "accuracy"), ("Precision", "precision"), ("Recall", "recall"),
                  ("AUC", "auc"), ("Specificity", "specificity"), ("F1", "f1")]


# ============ preprocess ============

@dataclass
class PreprocessResult:
    manifest: Manifest
    processed: int
    failures: List[Tuple[str, str]] = field(default_factory=list)


def cmd_preprocess(config: RunConfig, out_dir: Path, keep_stages: bool = False, workers: int = 1) -> PreprocessResult:
    """
    Run mask -> inpaint -> resize -> denoise on every manifest image.

    Denoised images keep their relative paths (as .png) under out_dir, so out_dir is the
    image root of the returned manifest. Per-file failures are logged and collected in
    out_dir/failures.csv; the rest of the run continues.
    """
    if not config.paths.manifest:
        raise ConfigError("preprocess needs paths.manifest")
    if config.threshold is None:
        raise ConfigError("preprocess needs threshold.min_th and threshold.max_th")
    manifest = read_manifest(config.paths.manifest, seed=config.seed)
    image_root = Path(config.paths.image_root)
    threshold = config.threshold.to_params()
    tv = config.tv.to_params()
    height, width = config.network.input_hw

    def process(record) -> Tuple[str, Optional[pd.DataFrame], Optional[str]]:
        out_rel = Path(record.path).with_suffix(".png").as_posix()
        try:
            img = read_image(image_root / record.path)
            stages = preprocess_image(img, threshold, tv, size=(width, height))
            write_image(stages.denoised, out_dir / out_rel)
            if keep_stages:
                stem = out_dir / "stages" / Path(out_rel).with_suffix("")
                write_image(render_mask(stages.mask, threshold), f"{stem}_mask.png")
                write_image(stages.inpainted, f"{stem}_inpainted.png")
                write_image(stages.resized, f"{stem}_resized.png")
                write_image(stages.denoised, f"{stem}_denoised.png")
            frames = []
            for name, stage_img in (("raw", img), ("inpainted", stages.inpainted),
                                    ("resized", stages.resized), ("denoised", stages.denoised)):
                frame = histogram(stage_img, HISTOGRAM_BINS).to_frame(name)
                frame.insert(0, "path", out_rel)
                frames.append(frame)
            return out_rel, pd.concat(frames, ignore_index=True), None
        except CxrKitError as e:
            logger.warning(f"preprocess failed for {record.path}: {e}")
            return out_rel, None, str(e)

    out_dir.mkdir(parents=True, exist_ok=True)
    with ThreadPoolExecutor(max_workers=max(1, workers)) as executor:
        results = list(tqdm(executor.map(process, manifest.records), total=len(manifest),
                            desc="preprocess", disable=None, leave=False))

    records, histograms, failures = [], [], []
    for record, (out_rel, frame, error) in zip(manifest.records, results):
        if error is None:
            records.append(type(record)(path=out_rel, source=record.source, finding=record.finding,
                                        split=record.split))
            histograms.append(frame)
        else:
            failures.append((record.path, error))

    processed = Manifest(tuple(records), seed=manifest.seed)
    write_manifest(processed, out_dir / "manifest.csv")
    if histograms:
        pd.concat(histograms, ignore_index=True).to_csv(out_dir / "histograms.csv", index=False,
                                                        lineterminator="\n")
    pd.DataFrame(failures, columns=["path", "error"]).to_csv(out_dir / "failures.csv", index=False,
                                                             lineterminator="\n")
    logger.info(f"preprocessed {len(records)} of {len(manifest)} images into {out_dir}")
    return PreprocessResult(manifest=processed, processed=len(records), failures=failures)


# ============ train / run scenario ============

def cmd_run_scenario(config: RunConfig, workers: int = 1, cross_validate: bool = False) -> RunDirectory:
    """
    Apply the imbalance strategy, train, evaluate on Test and write every artifact to
    <output root>/<scenario>-<model>-s<seed>-<hash8>.
    """
    if not config.paths.manifest:
        raise ConfigError("train needs paths.manifest")
    manifest_path = Path(config.paths.manifest)
    manifest = read_manifest(manifest_path, seed=config.seed)
    image_root = Path(config.paths.image_root)
    scheme = config.scheme
    run_dir = RunDirectory(config.output_root() / config.run_name())
    run_dir.clear_events()
    config.write(run_dir.config_file)
    run_dir.append_event("start", scenario=config.scenario)
    monitor = ResourceMonitor()

    train_manifest = manifest
    weights = None
    before = class_counts(manifest, scheme, Split.Train)
    if config.imbalance is ImbalanceStrategy.WeightedLoss:
        weights = class_weights(before, config.class_constants)
        imbalance_info: Dict[str, Any] = {"strategy": config.imbalance.value, **weights.to_dict()}
        logger.info(f"{config.scenario}: class weight table {weights.to_dict()}")
    else:
        train_manifest = oversample(manifest, scheme, config.augment_spec(), config.oversample_target,
                                    image_root, run_dir.path / "oversampled", workers)
        write_manifest(train_manifest, run_dir.path / "manifest.csv")
        after = class_counts(train_manifest, scheme, Split.Train)
        imbalance_info = {"strategy": config.imbalance.value, "before": before.tolist(), "after": after.tolist()}
    n_train = int(class_counts(train_manifest, scheme, Split.Train).sum())
    logger.info(f"{config.scenario}: training manifest of {n_train} records")
    run_dir.append_event("imbalance", **imbalance_info)

    spec = config.network_spec()
    hw = config.network.input_hw
    train_data = LabeledImages.from_manifest(train_manifest, Split.Train, scheme, image_root, hw, workers)
    val_data = LabeledImages.from_manifest(manifest, Split.Val, scheme, image_root, hw, workers)
    test_data = LabeledImages.from_manifest(manifest, Split.Test, scheme, image_root, hw, workers)
    train_config = config.train_config()

    trained = train(ResidualCNN(spec), train_data, val_data, weights, train_config, monitor)
    run_dir.append_event("trained", best_epoch=trained.best_epoch, epochs_run=trained.epochs_run)
    report = evaluate_dataset(trained.network, test_data, weights, train_config.eval_batch_size)
    report.to_json(run_dir.report_file)
    trained.trace.to_csv(run_dir.trace_file)
    save_checkpoint(trained.network, run_dir.checkpoint_file)

    if cross_validate:
        folds = kfold_train(spec, train_data, train_config,
                            class_weighted=config.imbalance is ImbalanceStrategy.WeightedLoss,
                            constants=config.class_constants, monitor=monitor)
        folds.to_csv(run_dir.path / "kfold.csv")

    run_dir.write_json("run.json", {
        "scenario": config.scenario,
        "model": config.model,
        "seed": config.seed,
        "config_hash": config.config_hash(),
        "inputs_digest": inputs_digest([manifest_path] + [image_root / r.path for r in manifest.records]),
        "imbalance": imbalance_info,
        "train_records": n_train,
        "best_epoch": trained.best_epoch,
        "epochs_run": trained.epochs_run,
        "stopped_early": trained.stopped_early,
        "resources": monitor.samples,
    })
    run_dir.append_event("done", accuracy=report.macro.accuracy)
    logger.info(f"{config.scenario}: test accuracy {report.macro.accuracy:.4f}, artifacts in {run_dir.path}")
    return run_dir


# ============ report ============

def cmd_report(run_dirs: Sequence[Path]) -> pd.DataFrame:
    """One row per run with the macro test metrics and a best_<metric> flag column per metric"""
    if not run_dirs:
        raise MissingRunError("no run directories given")
    rows = []
    for path in run_dirs:
        path = Path(path)
        if not path.is_dir():
            raise MissingRunError(f"{path} is not a run directory")
        run = RunDirectory(path)
        report = run.load_report()
        config = load_run_config(run.config_file)
        row = {"run": run.name, "model": config.model, "scenario": config.scenario}
        for column, key in REPORT_METRICS:
            value = report["macro"].get(key)
            row[column] = float(value) if value is not None else float("nan")
        rows.append(row)
    table = pd.DataFrame(rows)
    for column, _ in REPORT_METRICS:
        table[f"best_{column}"] = table[column] == table[column].max()
    return table


# ============ argument handlers ============

def _parse_grid(text: str) -> Tuple[int, int]:
    try:
        rows, cols = (int(part) for part in text.lower().split("x"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"grid must look like 8x8, got {text!r}")
    return rows, cols


def _parse_target(text: str, scheme: LabelScheme):
    """'max', a single count, ``Name=N,...`` pairs or a JSON object; keys are class names or indices"""
    text = text.strip()
    if text == "max":
        return text
    if text.isdigit():
        return int(text)
    try:
        if text.startswith("{"):
            pairs = list(json.loads(text).items())
        else:
            pairs = [part.split("=", 1) for part in text.split(",") if part.strip()]
        return {_class_index(str(name), scheme): int(count) for name, count in pairs}
    except (AttributeError, TypeError, ValueError) as e:
        raise ConfigError(f"--target must be 'max', a count, Class=N pairs or a JSON object; got {text!r}: {e}") from e


def _class_index(name: str, scheme: LabelScheme) -> int:
    name = name.strip()
    if name.isdigit() and int(name) < scheme.num_classes:
        return int(name)
    lowered = [n.lower() for n in scheme.class_names]
    if name.lower() not in lowered:
        raise ConfigError(f"unknown {scheme.value} class {name!r}; choose from {list(scheme.class_names)}")
    return lowered.index(name.lower())


def _load_config(args) -> RunConfig:
    config = load_run_config(getattr(args, "config", None))
    overrides = {
        "scheme": getattr(args, "scheme", None),
        "imbalance": getattr(args, "imbalance", None),
        "seed": getattr(args, "seed", None),
        "model": getattr(args, "model_name", None),
        "paths.manifest": getattr(args, "manifest", None),
        "paths.image_root": getattr(args, "image_root", None),
        "paths.output_root": getattr(args, "output_root", None),
        "train.max_epochs": getattr(args, "epochs", None),
        "train.batch_size": getattr(args, "batch_size", None),
        "train.learning_rate": getattr(args, "lr", None),
        "train.patience": getattr(args, "patience", None),
        "train.folds": getattr(args, "folds", None),
        "train.frozen_layers": getattr(args, "freeze", None),
        "network.widths": getattr(args, "widths", None),
        "threshold.min_th": getattr(args, "min_th", None),
        "threshold.max_th": getattr(args, "max_th", None),
    }
    size = getattr(args, "size", None)
    if size is not None:
        overrides["network.input_hw"] = [size, size]
    return config.with_overrides(overrides)


def _workers(args) -> int:
    return args.workers or get_settings().workers


def _handle_fuse(args) -> int:
    fused = fuse([read_manifest(p) for p in args.manifests])
    write_manifest(fused, args.out)
    return EXIT_OK


def _handle_split(args) -> int:
    manifest = read_manifest(args.manifest, seed=args.seed)
    if args.preset:
        if args.preset not in SPLIT_PRESETS:
            raise ConfigError(f"unknown split preset {args.preset!r}; choose from {sorted(SPLIT_PRESETS)}")
        scheme, counts = SPLIT_PRESETS[args.preset]
    elif args.counts:
        scheme = LabelScheme.parse(args.scheme or "Binary")
        counts = {int(k): tuple(v) for k, v in json.loads(args.counts).items()}
    else:
        raise ConfigError("split needs --preset or --counts")
    write_manifest(split(manifest, scheme, counts, args.seed), args.out)
    return EXIT_OK


def _handle_preprocess(args) -> int:
    config = _load_config(args)
    result = cmd_preprocess(config, Path(args.out), args.keep_stages, _workers(args))
    return EXIT_PARTIAL if result.failures else EXIT_OK


def _handle_oversample(args) -> int:
    manifest = read_manifest(args.manifest, seed=args.seed)
    spec = AugmentSpec.from_file(args.spec) if args.spec else AugmentSpec()
    spec = spec.model_copy(update={"seed": args.seed})
    if args.preset:
        if args.preset not in OVERSAMPLE_PRESETS:
            raise ConfigError(f"unknown oversample preset {args.preset!r}; choose from {sorted(OVERSAMPLE_PRESETS)}")
        scheme, target = OVERSAMPLE_PRESETS[args.preset]
    else:
        scheme = LabelScheme.parse(args.scheme or "Binary")
        target = _parse_target(args.target, scheme)
    grown = oversample(manifest, scheme, spec, target, args.image_root, args.out_dir, _workers(args))
    write_manifest(grown, args.out)
    return EXIT_OK


def _handle_train(args) -> int:
    config = _load_config(args)
    cmd_run_scenario(config, _workers(args), cross_validate=args.cv)
    return EXIT_OK


def _handle_evaluate(args) -> int:
    net = load_checkpoint(args.model)
    scheme = LabelScheme.parse(args.scheme) if args.scheme else \
        {2: LabelScheme.Binary, 3: LabelScheme.Multi3, 4: LabelScheme.Multi4}[net.spec.num_classes]
    manifest = read_manifest(args.manifest)
    data = LabeledImages.from_manifest(manifest, Split(args.split), scheme, args.image_root,
                                       net.spec.input_dims[1:], _workers(args))
    report = evaluate_dataset(net, data)
    report.to_json(args.out)
    print(json.dumps(report.macro.to_dict(), indent=2))
    return EXIT_OK


def _handle_explain(args) -> int:
    net = load_checkpoint(args.model)
    img = read_image(args.image)
    height, width = net.spec.input_dims[1:]
    if img.shape != (height, width):
        logger.info(f"resizing {args.image} from {img.shape} to {(height, width)}")
        img = resize_bilinear(img, width, height)
    target = args.target_class
    if target is None:
        target = int(np.argmax(net.predict_proba(img.pixels[None])[0]))
    if args.method == "gradcam":
        explanation = grad_cam(net, img, target)
    else:
        explanation = lime_explain(net, img, target, grid=args.grid, n_perturbations=args.samples,
                                   seed=args.seed, fill=args.fill, workers=_workers(args))
    out = render_overlay(img, explanation, args.out)
    write_sidecar(explanation, out.with_suffix(".json"))
    return EXIT_OK


def _handle_report(args) -> int:
    run_dirs = [Path(p) for p in args.runs]
    if args.root:
        run_dirs += [r.path for r in find_runs(Path(args.root))]
    table = cmd_report(run_dirs)
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        table.to_csv(args.out, index=False, lineterminator="\n", float_format="%.4f")
    print(table.to_string(index=False, float_format=lambda v: f"{v:.4f}"))
    return EXIT_OK


def _handle_denoise(args) -> int:
    img = read_image(args.image)
    params = TVConfig(k=args.k, sigma=args.sigma, step=args.step, max_iters=args.max_iters,
                      tol=args.tol).to_params()
    denoised, trace = tv_denoise(img, params)
    write_image(denoised, args.out)
    if args.trace:
        trace.to_csv(args.trace)
    logger.info(f"denoised {args.image}: {trace.iterations} iterations, "
                f"PSNR vs input {psnr(img, denoised):.2f} dB")
    return EXIT_OK


def _handle_synth(args) -> int:
    out = Path(args.out)
    if args.kind == "discs":
        make_disc_dataset(out, size=args.size or 64, seed=args.seed)
    elif args.kind == "corpus":
        corpus_standin(out, size=args.size or 16, seed=args.seed)
    else:
        clean = step_image(args.size or 128)
        write_image(clean, out / "step_clean.png")
        write_image(add_gaussian_noise(clean, 15.0, args.seed), out / "step_noisy.png")
    return EXIT_OK


# ============ parser ============

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cxrkit", description="Chest X-ray preprocessing, training and explanation toolkit")
    parser.add_argument("--log-level", default=None, help="overrides CXRKIT_LOG_LEVEL")
    parser.add_argument("--workers", type=int, default=None, help="overrides CXRKIT_WORKERS")
    sub = parser.add_subparsers(dest="command", required=True)

    def run_options(p):
        p.add_argument("--config", help="RunConfig JSON file")
        p.add_argument("--manifest")
        p.add_argument("--image-root")
        p.add_argument("--scheme", help="Binary|Multi3|Multi4 or B|M3|M4")
        p.add_argument("--seed", type=int)
        p.add_argument("--size", type=int, help="square network input / preprocessing size")

    p = sub.add_parser("fuse", help="concatenate source manifests")
    p.add_argument("manifests", nargs="+")
    p.add_argument("--out", required=True)
    p.set_defaults(handler=_handle_fuse)

    p = sub.add_parser("split", help="assign Train/Val/Test per class")
    p.add_argument("--manifest", required=True)
    p.add_argument("--preset", help=f"one of {', '.join(sorted(SPLIT_PRESETS))}")
    p.add_argument("--counts", help='JSON {"class": [train, val, test]}')
    p.add_argument("--scheme")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(handler=_handle_split)

    p = sub.add_parser("preprocess", help="mask, inpaint, resize and denoise every image")
    run_options(p)
    p.add_argument("--min-th", type=float, required=True, help="lower bound of the bright-marker mask")
    p.add_argument("--max-th", type=float, required=True, help="upper bound of the bright-marker mask")
    p.add_argument("--out", required=True)
    p.add_argument("--keep-stages", action="store_true")
    p.set_defaults(handler=_handle_preprocess)

    p = sub.add_parser("oversample", help="grow Train classes with augmented copies")
    p.add_argument("--manifest", required=True)
    p.add_argument("--image-root", default=".")
    p.add_argument("--preset", help=f"one of {', '.join(sorted(OVERSAMPLE_PRESETS))}")
    p.add_argument("--scheme")
    p.add_argument("--target", default="max", help="max, a count, Class=N,... or a JSON object")
    p.add_argument("--spec", help="AugmentSpec JSON file")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out-dir", required=True, help="directory for synthesized images")
    p.add_argument("--out", required=True, help="output manifest")
    p.set_defaults(handler=_handle_oversample)

    p = sub.add_parser("train", help="run one scenario: imbalance strategy, training, test evaluation")
    run_options(p)
    p.add_argument("--imbalance", choices=[s.value for s in ImbalanceStrategy])
    p.add_argument("--model-name")
    p.add_argument("--output-root")
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--patience", type=int)
    p.add_argument("--folds", type=int)
    p.add_argument("--widths", type=int, nargs="+")
    p.add_argument("--freeze", nargs="+", help="layer ids or patterns, e.g. 'block*'")
    p.add_argument("--cv", action="store_true", help="also run k-fold cross-validation on the Train split")
    p.set_defaults(handler=_handle_train)

    p = sub.add_parser("evaluate", help="evaluate a checkpoint on one split")
    p.add_argument("--model", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--image-root", default=".")
    p.add_argument("--split", default=Split.Test.value, choices=[Split.Train.value, Split.Val.value, Split.Test.value])
    p.add_argument("--scheme")
    p.add_argument("--out", required=True)
    p.set_defaults(handler=_handle_evaluate)

    p = sub.add_parser("explain", help="Grad-CAM or LIME overlay for one image")
    p.add_argument("--model", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--class", dest="target_class", type=int)
    p.add_argument("--method", choices=["gradcam", "lime"], default="gradcam")
    p.add_argument("--grid", type=_parse_grid, default=(8, 8))
    p.add_argument("--samples", type=int, default=1000)
    p.add_argument("--fill", choices=["zero", "mean"], default="zero")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(handler=_handle_explain)

    p = sub.add_parser("report", help="compare finished runs")
    p.add_argument("runs", nargs="*")
    p.add_argument("--root", help="include every run below this directory")
    p.add_argument("--out", help="CSV output")
    p.set_defaults(handler=_handle_report)

    p = sub.add_parser("denoise", help="adaptive TV denoising of one image")
    p.add_argument("--image", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--trace", help="energy trace CSV")
    defaults = TVConfig()
    p.add_argument("--k", type=float, default=defaults.k)
    p.add_argument("--sigma", type=float, default=defaults.sigma)
    p.add_argument("--step", type=float, default=defaults.step)
    p.add_argument("--max-iters", type=int, default=defaults.max_iters)
    p.add_argument("--tol", type=float, default=defaults.tol)
    p.set_defaults(handler=_handle_denoise)

    p = sub.add_parser("synth", help="write synthetic datasets")
    p.add_argument("kind", choices=["discs", "corpus", "step"])
    p.add_argument("--out", required=True)
    p.add_argument("--size", type=int)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(handler=_handle_synth)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    configure_logging(args.log_level)
    try:
        return args.handler(args)
    except ConfigError as e:
        logger.error(f"configuration error: {e}")
        return EXIT_CONFIG
    except (CxrKitError, ValueError) as e:
        logger.error(f"{args.command} failed: {e}")
        return EXIT_PARTIAL


if __name__ == "__main__":
    sys.exit(main())
