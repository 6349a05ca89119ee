"""
Command-line interface

    python -m simreg <command> [options]

Commands:
    simulate   simulated pair (F_g, I0, S_g0) from a moving image
    train      train the registration network (REG / MTL / FEAT)
    register   register one pair, write field, reconstruction and metrics
    segment    atlas / multi-atlas / top-1 / MTL / FEAT segmentation
    invert     approximate field inversion with residual report
    evaluate   simulated test-set protocol, two pairs per image
    synth      write a synthetic labelled dataset

Dataset and atlas directories hold image_<id>.nii files with optional
matching label_<id>.nii files. Exit code 0 on success, 2 on any usage,
configuration or input error.
"""
import argparse
import json
import logging
import sys
import time
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

from pydantic import ValidationError

from simreg.config import ConfigError, RunConfig, load_run_config, settings
from simreg.models.configs import TrainingMode
from simreg.models.datasets import AtlasSet, TrainSample
from simreg.models.reports import METRIC_CSV_HEADER
from simreg.models.volumes import LabelMap, Volume
from simreg.services import preview
from simreg.services.checkpoint import load_checkpoint, save_checkpoint
from simreg.services.evaluation import (
    evaluate_dataset, log_summary, score_registration, summarize, write_reports,
)
from simreg.services.metrics import dice_per_class, summarize_dice
from simreg.services.network import NetworkParameters, init_network
from simreg.services.nifti_io import (
    atomic_write_bytes, field_paths, read_field, read_nifti, write_csv, write_field, write_nifti,
)
from simreg.services.preprocessing import VolumePreprocessor
from simreg.services.resampler import invert_field
from simreg.services.segmentation import (
    atlas_segment, backproject_prediction, multi_atlas_segment, register, segment_mtl,
)
from simreg.services.simulator import RegistrationSimulator
from simreg.services.synthetic import make_synthetic_dataset
from simreg.services.trainer import train, write_loss_history

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_ERROR = 2


class InputError(ValueError):
    """Missing or unusable input file"""


# ============= INPUT HELPERS =============

def require_file(path: Optional[Path], what: str) -> Path:
    if path is None:
        raise InputError(f"missing {what}")
    if not Path(path).is_file():
        raise InputError(f"{what} not found: {path}")
    return Path(path)


def require_field(stem: Path) -> Path:
    for path in field_paths(stem):
        require_file(path, "field component")
    return stem


def load_volume(path: Path, preprocessor: VolumePreprocessor) -> Volume:
    return preprocessor.process(read_nifti(path))


def load_pair(image_path: Path, label_path: Optional[Path],
              preprocessor: VolumePreprocessor) -> Tuple[Volume, Optional[LabelMap]]:
    image = read_nifti(image_path)
    labels = read_nifti(label_path, as_labels=True) if label_path is not None else None
    return preprocessor.process_pair(image, labels)


def _unify_classes(samples: List[TrainSample]) -> List[TrainSample]:
    """Give every label map the dataset-wide class count"""
    counts = [s.moving_labels.num_classes for s in samples if s.has_labels]
    if not counts:
        return samples
    classes = max(counts)
    return [
        TrainSample(s.moving, LabelMap(s.moving_labels.labels, classes)) if s.has_labels else s
        for s in samples
    ]


def load_dataset_dir(directory: Path, preprocessor: VolumePreprocessor) -> List[Tuple[str, TrainSample]]:
    """(id, sample) for every image_<id>.nii, labels from label_<id>.nii when present"""
    directory = Path(directory)
    if not directory.is_dir():
        raise InputError(f"dataset directory not found: {directory}")
    images = sorted(directory.glob("image_*.nii"))
    if not images:
        raise InputError(f"no image_*.nii files in {directory}")
    named = []
    for image_path in images:
        sample_id = image_path.stem[len("image_"):]
        label_path = directory / f"label_{sample_id}.nii"
        image, labels = load_pair(image_path, label_path if label_path.is_file() else None, preprocessor)
        named.append((sample_id, TrainSample(image, labels)))
    samples = _unify_classes([s for _, s in named])
    return [(name, s) for (name, _), s in zip(named, samples)]


def load_atlases(directory: Path, fraction: float, preprocessor: VolumePreprocessor) -> AtlasSet:
    entries = []
    for name, sample in load_dataset_dir(directory, preprocessor):
        if not sample.has_labels:
            raise InputError(f"atlas {name} has no label file")
        entries.append((sample.moving, sample.moving_labels))
    return AtlasSet(entries, selection_fraction=fraction)


def load_params(checkpoint: Optional[Path], seed: int, num_classes: Optional[int] = None) -> NetworkParameters:
    """Checkpoint parameters, or a fresh network (zero field) when none is configured"""
    if checkpoint is None and settings.SIMREG_CHECKPOINT_PATH:
        checkpoint = Path(settings.SIMREG_CHECKPOINT_PATH)
    if checkpoint is None:
        logger.warning("⚠️  No checkpoint given, using an untrained network (zero field)")
        return init_network(seed, num_classes)
    params, _, step = load_checkpoint(checkpoint)
    logger.info(f"Loaded checkpoint {checkpoint} (step {step})")
    return params


def output_dir(config: RunConfig) -> Path:
    out = config.resolved_output_dir()
    out.mkdir(parents=True, exist_ok=True)
    return out


def write_json(path: Path, payload: dict) -> Path:
    return atomic_write_bytes(path, (json.dumps(payload, indent=2, sort_keys=True) + "\n").encode("utf-8"))


def write_segment_previews(path: Path, target: Volume, labels: LabelMap, backprojected: LabelMap,
                           uncertainty: Optional[Volume], truth: Optional[LabelMap],
                           overlay_class: int) -> List[Path]:
    """
    <path>: uncertainty map (target image when there is none)
    <stem>_labels.png, <stem>_backprojected.png: label maps in greyscale
    <stem>_overlay.png: TP/FP/FN overlay, only with ground truth
    """
    path = Path(path)

    def sibling(suffix: str) -> Path:
        return path.with_name(f"{path.stem}_{suffix}.png")

    written = [
        preview.save_png(preview.render_scalar_map(uncertainty if uncertainty is not None else target), path),
        preview.save_png(preview.render_label_map(labels), sibling("labels")),
        preview.save_png(preview.render_label_map(backprojected), sibling("backprojected")),
    ]
    if truth is not None:
        overlay = preview.render_segmentation_overlay(target, labels, truth, overlay_class)
        written.append(preview.save_png(overlay, sibling("overlay")))
    return written


# ============= COMMANDS =============

def cmd_simulate(args, config: RunConfig) -> int:
    preprocessor = VolumePreprocessor()
    if args.moving is not None:
        moving, labels = load_pair(require_file(args.moving, "moving image"),
                                   require_file(args.labels, "label map") if args.labels else None,
                                   preprocessor)
    else:
        sample = make_synthetic_dataset(1, args.dims, seed=config.resolved_seed())[0]
        moving, labels = sample.moving, sample.moving_labels

    simulator = RegistrationSimulator(config.simulator)
    pair = simulator.generate(moving, labels)

    out = output_dir(config)
    write_field(pair.field, out / "field_gt", moving.spacing)
    write_nifti(pair.fixed, out / "fixed.nii")
    if args.moving is None:
        write_nifti(moving, out / "moving.nii")
        write_nifti(labels, out / "moving_labels.nii")
    if pair.fixed_labels is not None:
        write_nifti(pair.fixed_labels, out / "fixed_labels.nii")
    write_json(out / "transform.json", pair.transform.model_dump())
    logger.info(f"✅ Simulated pair written to {out}")
    return EXIT_OK


def cmd_train(args, config: RunConfig) -> int:
    preprocessor = VolumePreprocessor()
    if config.dataset_dir is not None:
        dataset = [s for _, s in load_dataset_dir(config.dataset_dir, preprocessor)]
    else:
        dataset = make_synthetic_dataset(args.synthetic, args.dims, seed=config.resolved_seed())
        logger.info(f"No dataset_dir, training on {len(dataset)} synthetic volumes")

    train_cfg = config.train.model_copy(update={"mode": config.mode})
    initial = load_params(config.checkpoint, train_cfg.seed) if config.checkpoint is not None else None
    result = train(dataset, config.simulator, train_cfg, params=initial)

    out = output_dir(config)
    hyper = {
        "mode": train_cfg.mode.value,
        "lambda": train_cfg.lambda_,
        "beta": train_cfg.beta,
        "learning_rate": train_cfg.learning_rate,
        "nlcc_window": train_cfg.nlcc_window,
        "seed": train_cfg.seed,
    }
    save_checkpoint(out / "model", result.params, hyper, step=result.optimizer_state.step)
    write_loss_history(out / "loss_history.csv", result.history)
    logger.info(f"✅ Training outputs written to {out}")
    return EXIT_OK


def cmd_register(args, config: RunConfig) -> int:
    moving_path = require_file(args.moving, "moving image")
    fixed_path = require_file(args.fixed, "fixed image")
    truth = require_field(args.ground_truth) if args.ground_truth is not None else None

    preprocessor = VolumePreprocessor()
    moving = load_volume(moving_path, preprocessor)
    fixed = load_volume(fixed_path, preprocessor)
    params = load_params(config.checkpoint, config.resolved_seed())
    started = time.perf_counter()
    field, recon = register(params, moving, fixed)
    report = score_registration(field, recon, fixed, pair_id=moving_path.stem,
                                ground_truth=read_field(truth) if truth is not None else None,
                                window=config.train.nlcc_window, elapsed=time.perf_counter() - started)

    out = output_dir(config)
    write_field(field, out / "field", fixed.spacing)
    write_nifti(recon, out / "recon.nii")
    write_csv(out / "metrics.csv", METRIC_CSV_HEADER, [report.to_csv_row()])
    if args.preview is not None:
        preview.save_png(preview.render_registration_panel(moving, fixed, recon, field), args.preview)
    logger.info(f"✅ Registered {moving_path.name} -> {fixed_path.name}: "
                f"NLCC={report.nlcc:.4f} MSE={report.mse:.5f} MI={report.mi:.4f}")
    return EXIT_OK


def cmd_segment(args, config: RunConfig) -> int:
    target_path = require_file(args.target, "target image")
    method = args.method or config.segmentation
    preprocessor = VolumePreprocessor()

    if args.atlas_image is not None:
        atlas_image, atlas_labels = load_pair(require_file(args.atlas_image, "atlas image"),
                                              require_file(args.atlas_labels, "atlas labels"),
                                              preprocessor)
        atlases = AtlasSet([(atlas_image, atlas_labels)], selection_fraction=config.selection_fraction)
    elif config.atlas_dir is not None:
        atlases = load_atlases(config.atlas_dir, config.selection_fraction, preprocessor)
    else:
        raise InputError("segment needs --atlas-dir or --atlas-image/--atlas-labels")

    truth_path = require_file(args.truth, "ground-truth labels") if args.truth is not None else None
    target, truth = load_pair(target_path, truth_path, preprocessor)
    num_classes = atlases.num_classes if method == "feat" else None
    params = load_params(config.checkpoint, config.resolved_seed(), num_classes)
    window = config.train.nlcc_window
    uncertainty = None

    if method in ("multi", "top1"):
        result = multi_atlas_segment(params, atlases, target, top_k=1 if method == "top1" else None,
                                     window=window, workers=args.workers)
        labels, uncertainty = result.labels, result.uncertainty
        reference = result.selected[0]
    elif method == "atlas":
        labels = atlas_segment(params, atlases.entries[0], target)
        reference = 0
    else:
        mode = TrainingMode.FEAT if method == "feat" else TrainingMode.MTL
        labels = segment_mtl(params, atlases.entries[0], target, mode)
        reference = 0

    field, _ = register(params, atlases.entries[reference][0], target)
    backprojected, inversion = backproject_prediction(
        field, labels, settings.SIMREG_INVERT_MAX_ITERS, settings.SIMREG_INVERT_TOL)

    out = output_dir(config)
    write_nifti(labels, out / "labels.nii", target.spacing)
    write_nifti(backprojected, out / "backprojected.nii", target.spacing)
    if uncertainty is not None:
        write_nifti(uncertainty, out / "uncertainty.nii")
    summary = {
        "method": method,
        "reference_atlas": reference,
        "inversion_iterations": inversion.iterations,
        "inversion_mean_residual": inversion.mean_residual,
        "inversion_converged": inversion.converged,
    }
    if truth is not None:
        scores = dice_per_class(labels, truth)
        summary["dice"] = scores
        if scores:
            mean, std = summarize_dice(scores)
            logger.info(f"Dice per class {[round(s, 4) for s in scores]} ({mean:.4f} ± {std:.4f})")
    write_json(out / "segment.json", summary)
    if args.preview is not None:
        write_segment_previews(args.preview, target, labels, backprojected, uncertainty, truth, args.overlay_class)
    logger.info(f"✅ Segmentation ({method}) written to {out}")
    return EXIT_OK


def cmd_invert(args, config: RunConfig) -> int:
    stem = require_field(args.field)
    field = read_field(stem)
    spacing = read_nifti(field_paths(stem)[0]).spacing
    max_iters = args.max_iters or settings.SIMREG_INVERT_MAX_ITERS
    tol = args.tol or settings.SIMREG_INVERT_TOL
    result = invert_field(field, max_iters=max_iters, tol=tol)

    out = output_dir(config)
    write_field(result.field, out / "field_inv", spacing)
    write_json(out / "inversion.json", {
        "iterations": result.iterations,
        "mean_residual": result.mean_residual,
        "max_residual": result.max_residual,
        "converged": result.converged,
    })
    marker = "✅" if result.converged else "⚠️ "
    logger.info(f"{marker} Inversion: {result.iterations} iterations, mean residual {result.mean_residual:.2e}")
    return EXIT_OK


def cmd_evaluate(args, config: RunConfig) -> int:
    preprocessor = VolumePreprocessor()
    if config.dataset_dir is not None:
        named = load_dataset_dir(config.dataset_dir, preprocessor)
    else:
        dataset = make_synthetic_dataset(args.synthetic, args.dims, seed=config.resolved_seed())
        named = [(f"{k:03d}", s) for k, s in enumerate(dataset)]

    params = load_params(config.checkpoint, config.resolved_seed())
    images = [(name, s.moving) for name, s in named]
    labels = [s.moving_labels for _, s in named]
    reports = evaluate_dataset(params, images, config.simulator, window=config.train.nlcc_window,
                               labels=labels if all(lab is not None for lab in labels) else None)

    out = output_dir(config)
    write_reports(out / "metrics.csv", reports)
    logger.info(f"✅ Evaluated {len(reports)} pairs ({len(images)} images)")
    log_summary(summarize(reports))
    return EXIT_OK


def cmd_synth(args, config: RunConfig) -> int:
    dataset = make_synthetic_dataset(args.n, args.dims, seed=config.resolved_seed())
    out = output_dir(config)
    for k, sample in enumerate(dataset):
        write_nifti(sample.moving, out / f"image_{k:03d}.nii")
        write_nifti(sample.moving_labels, out / f"label_{k:03d}.nii")
    logger.info(f"✅ Wrote {len(dataset)} synthetic samples to {out}")
    return EXIT_OK


COMMANDS = {
    "simulate": cmd_simulate,
    "train": cmd_train,
    "register": cmd_register,
    "segment": cmd_segment,
    "invert": cmd_invert,
    "evaluate": cmd_evaluate,
    "synth": cmd_synth,
}


# ============= PARSER =============

def _dims(text: str) -> Tuple[int, int, int]:
    parts = [int(p) for p in text.replace("x", ",").split(",")]
    if len(parts) == 1:
        parts *= 3
    if len(parts) != 3 or min(parts) < 1:
        raise argparse.ArgumentTypeError(f"dims must be N or D0,D1,D2, got {text!r}")
    return tuple(parts)


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="JSON run configuration")
    common.add_argument("--seed", type=int, help="overrides every seed in the run configuration")
    common.add_argument("--log-level", default=None, help="logging level (default from SIMREG_LOG_LEVEL)")
    common.add_argument("--output-dir", type=Path, help="directory for outputs")
    common.add_argument("--checkpoint", type=Path, help="checkpoint path without .json/.bin suffix")

    parser = argparse.ArgumentParser(prog="simreg", description="Simulation-supervised deformable registration")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", parents=[common], help="simulate a registration pair")
    p.add_argument("--moving", type=Path, help="moving image (.nii); synthetic volume if omitted")
    p.add_argument("--labels", type=Path, help="moving labels (.nii)")
    p.add_argument("--dims", type=_dims, default=(32, 32, 32), help="synthetic volume dims")

    p = sub.add_parser("train", parents=[common], help="train the registration network")
    p.add_argument("--dataset-dir", type=Path)
    p.add_argument("--mode", choices=[m.value for m in TrainingMode])
    p.add_argument("--steps", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--learning-rate", type=float)
    p.add_argument("--window", type=int, help="NLCC window (odd)")
    p.add_argument("--no-similarity", action="store_true", help="train with lambda = 0")
    p.add_argument("--synthetic", type=int, default=20, help="synthetic volumes when no dataset is given")
    p.add_argument("--dims", type=_dims, default=(32, 32, 32))

    p = sub.add_parser("register", parents=[common], help="register one pair")
    p.add_argument("--moving", type=Path, required=True)
    p.add_argument("--fixed", type=Path, required=True)
    p.add_argument("--ground-truth", type=Path, help="ground-truth field stem for EPE")
    p.add_argument("--preview", type=Path, help="write a PNG panel here")

    p = sub.add_parser("segment", parents=[common], help="atlas-based segmentation")
    p.add_argument("--target", type=Path, required=True)
    p.add_argument("--atlas-dir", type=Path)
    p.add_argument("--atlas-image", type=Path)
    p.add_argument("--atlas-labels", type=Path)
    p.add_argument("--method", choices=["atlas", "multi", "top1", "mtl", "feat"])
    p.add_argument("--selection-fraction", type=float)
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--truth", type=Path, help="ground-truth labels (.nii) for Dice and the overlay preview")
    p.add_argument("--overlay-class", type=int, default=1, help="class coloured in the overlay preview")
    p.add_argument("--preview", type=Path,
                   help="write the uncertainty map here, plus _labels/_backprojected/_overlay PNGs alongside")

    p = sub.add_parser("invert", parents=[common], help="invert a displacement field")
    p.add_argument("--field", type=Path, required=True, help="field stem (<stem>.x/.y/.z.nii)")
    p.add_argument("--max-iters", type=int)
    p.add_argument("--tol", type=float)

    p = sub.add_parser("evaluate", parents=[common], help="simulated test-set evaluation")
    p.add_argument("--dataset-dir", type=Path)
    p.add_argument("--synthetic", type=int, default=5, help="synthetic images when no dataset is given")
    p.add_argument("--dims", type=_dims, default=(32, 32, 32))

    p = sub.add_parser("synth", parents=[common], help="write a synthetic dataset")
    p.add_argument("--n", type=int, default=20)
    p.add_argument("--dims", type=_dims, default=(32, 32, 32))
    return parser


def _overrides(args) -> dict:
    overrides = {
        "seed": args.seed,
        "output_dir": args.output_dir,
        "checkpoint": args.checkpoint,
        "dataset_dir": getattr(args, "dataset_dir", None),
        "atlas_dir": getattr(args, "atlas_dir", None),
        "mode": getattr(args, "mode", None),
        "selection_fraction": getattr(args, "selection_fraction", None),
        "train.steps": getattr(args, "steps", None),
        "train.epochs": getattr(args, "epochs", None),
        "train.learning_rate": getattr(args, "learning_rate", None),
        "train.nlcc_window": getattr(args, "window", None),
    }
    if getattr(args, "no_similarity", False):
        overrides["train.lambda_"] = 0.0
    return overrides


def configure_logging(level: Optional[str]) -> None:
    logging.basicConfig(
        level=(level or settings.SIMREG_LOG_LEVEL).upper(),
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_OK if e.code == 0 else EXIT_ERROR

    configure_logging(args.log_level)
    try:
        config = load_run_config(args.config, _overrides(args))
        return COMMANDS[args.command](args, config)
    except ValidationError as e:
        logger.error(f"❌ Invalid configuration: {e}")
    except (ConfigError, ValueError, OSError) as e:
        logger.error(f"❌ {e}")
    return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
