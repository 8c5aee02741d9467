"""Command-line pipeline: phantom data, folds, training, evaluation, explanation.

Exit codes: 0 success, 1 usage error (bad flags, bad config keys, out-of-range
fold), 2 data or validation error (malformed manifests, unreadable images,
failed dataset checks).
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import replace
from pathlib import Path

from . import dataset, imaging
from .boxes import BBox, GeometryError, load_detections, map_range
from .dataset import FoldAssignment, Manifest, ManifestError, parse_manifest
from .imaging import PreprocessOptions


class UsageError(Exception):
    """Recoverable misuse of the command line; exits with code 1."""


class DataError(Exception):
    """The inputs are structurally valid but fail content checks; exits 2."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _thread_cap() -> int | None:
    raw = os.environ.get("RADCLS_THREADS")
    if raw is None or not raw.strip():
        return None
    try:
        n = int(raw)
    except ValueError:
        raise UsageError(f"RADCLS_THREADS must be an integer, got '{raw}'") from None
    if n < 1:
        raise UsageError(f"RADCLS_THREADS must be >= 1, got {n}")
    return n


def _apply_thread_cap() -> None:
    n = _thread_cap()
    if n is not None:
        import torch

        torch.set_num_threads(n)


def _parse_tiles(text: str) -> tuple[int, int]:
    parts = text.lower().split("x")
    if len(parts) != 2:
        raise UsageError(f"tile grid must look like WxH, got '{text}'")
    try:
        tx, ty = int(parts[0]), int(parts[1])
    except ValueError:
        raise UsageError(f"tile grid must look like WxH, got '{text}'") from None
    if tx < 1 or ty < 1:
        raise UsageError(f"tile counts must be >= 1, got '{text}'")
    return tx, ty


def _parse_box(text: str) -> BBox:
    parts = text.split(",")
    if len(parts) != 4:
        raise UsageError(f"box must look like X,Y,W,H, got '{text}'")
    try:
        x, y, w, h = (float(p) for p in parts)
        return BBox(x, y, w, h)
    except ValueError as exc:
        raise UsageError(f"bad box '{text}': {exc}") from None


def _preprocess_opts(args) -> PreprocessOptions:
    return PreprocessOptions(
        clahe_enabled=not args.no_clahe,
        clahe_clip=args.clahe_clip,
        clahe_tiles=_parse_tiles(args.clahe_tiles),
        crop_margin=args.crop_margin,
    )


def _add_preprocess_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--clahe-clip", type=float, default=2.0, metavar="C",
                   help="CLAHE clip limit in multiples of the uniform bin "
                        "height (default: 2.0)")
    p.add_argument("--clahe-tiles", default="8x8", metavar="WxH",
                   help="CLAHE tile grid (default: 8x8)")
    p.add_argument("--no-clahe", action="store_true",
                   help="skip contrast equalization")
    p.add_argument("--crop-margin", type=float, default=0.0, metavar="F",
                   help="extra ROI margin as a fraction of box size "
                        "(default: 0.0)")


def _read_manifest(path) -> Manifest:
    try:
        return parse_manifest(path)
    except FileNotFoundError:
        raise DataError(f"manifest not found: {path}") from None
    except ManifestError as exc:
        raise DataError(str(exc)) from None


def _read_folds(path) -> FoldAssignment:
    try:
        with open(path) as f:
            return FoldAssignment.from_json(f.read())
    except FileNotFoundError:
        raise DataError(f"fold file not found: {path}") from None
    except (ValueError, KeyError) as exc:
        raise DataError(f"bad fold file {path}: {exc}") from None


def cmd_synth(args) -> int:
    from . import phantom

    try:
        spec = phantom.PhantomSpec(
            n_subjects=args.subjects, image_size=args.image_size,
            signal_strength=args.signal, noise_sigma=args.noise, seed=args.seed)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    manifest = phantom.generate(spec, args.out)
    print(f"wrote {len(manifest)} images for {args.subjects} subjects to {args.out}")
    return 0


def cmd_prepare(args) -> int:
    manifest = _read_manifest(args.manifest)
    violations = dataset.validate_dataset(manifest, check_files=True)
    if args.validation_json:
        Path(args.validation_json).write_text(dataset.report_to_json(violations))
    if violations:
        print(dataset.report_to_text(violations), file=sys.stderr)
        raise DataError(f"dataset failed validation with {len(violations)} finding(s)")

    opts = _preprocess_opts(args)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    processed = []
    for rec in manifest:
        img = imaging.load_gray(rec.image_path)
        if args.letterbox:
            img = cropped = _crop_only(img, rec, opts)
            if opts.clahe_enabled:
                img = imaging.clahe(cropped, opts.clahe_clip, opts.clahe_tiles)
            img, _ = imaging.letterbox(img, (args.image_size, args.image_size),
                                       pad_value=args.pad_value)
        else:
            img = imaging.preprocess(img, rec.roi_box, args.image_size, opts)
        name = f"{rec.subject_id}_{rec.view.value}.png"
        imaging.save_gray(img, out_dir / name)
        processed.append(replace(rec, image_path=out_dir / name, roi_box=None))
    dataset.write_manifest(Manifest(processed), out_dir / "manifest.csv",
                           relative_to=out_dir)
    print(f"prepared {len(processed)} images into {out_dir}")
    return 0


def _crop_only(img, rec, opts: PreprocessOptions):
    from .boxes import crop_roi

    if rec.roi_box is None:
        return img
    return crop_roi(img, rec.roi_box, opts.crop_margin)


def cmd_split(args) -> int:
    manifest = _read_manifest(args.manifest)
    try:
        folds = dataset.split_folds(manifest, args.k, args.seed)
    except ValueError as exc:
        raise DataError(str(exc)) from None
    out = Path(args.out) if args.out else Path(args.manifest).parent / "folds.json"
    out.write_text(folds.to_json())
    sizes = ", ".join(str(s) for s in folds.fold_sizes())
    print(f"split {len(folds.fold_of_subject)} subjects into {args.k} folds "
          f"(sizes {sizes}); wrote {out}")
    return 0


def _train_namespace_values(args) -> dict:
    from .training import parse_config_text

    values: dict = {}
    if args.config:
        try:
            text = Path(args.config).read_text()
        except OSError as exc:
            raise DataError(f"cannot read config file: {exc}") from None
        values.update(parse_config_text(text, source=str(args.config)))
    for attr, key in (("lr", "lr_max"), ("batch_size", "batch_size"),
                      ("epochs", "epochs"), ("momentum", "momentum"),
                      ("dropout", "dropout_p"), ("seed", "seed"),
                      ("image_size", "model.input_size")):
        if getattr(args, attr, None) is not None:
            values[key] = getattr(args, attr)
    return values


def _resolve_train_configs(args):
    from .network import ModelConfig
    from .training import ConfigFileError, configs_from_values

    base = ModelConfig.tiny() if args.tiny else ModelConfig()
    try:
        train_cfg, model_cfg = configs_from_values(_train_namespace_values(args), base)
    except ConfigFileError as exc:
        raise UsageError(str(exc)) from None
    if args.no_augment:
        train_cfg = replace(
            train_cfg, augment=imaging.with_augment_defaults(train_cfg.augment, False))
    return train_cfg, model_cfg


def train_one_fold(manifest_path, folds_path, fold_i, model_cfg, train_cfg,
                   opts, out_dir, threads) -> str:
    """Train a single fold and write its artifacts; safe to run in a worker."""
    if threads is not None:
        import torch

        torch.set_num_threads(threads)
    from . import report
    from .network import save_checkpoint
    from .training import predict_records, train_fold, write_training_log

    manifest = parse_manifest(manifest_path)
    with open(folds_path) as f:
        folds = FoldAssignment.from_json(f.read())
    result = train_fold(manifest, folds, fold_i, model_cfg, train_cfg, opts)

    fold_dir = Path(out_dir) / f"fold_{fold_i}"
    fold_dir.mkdir(parents=True, exist_ok=True)
    save_checkpoint(fold_dir / "checkpoint.ckpt", result.model_cfg, result.params)
    write_training_log(fold_dir / "log.csv", result.log)
    val = manifest.records_of(folds.test_subjects(fold_i))
    preds = predict_records(result.model_cfg, result.params, val, opts)
    from .metrics import write_predictions

    write_predictions(preds, fold_dir / "predictions.csv")
    report.save_training_curves(result.log, fold_dir / "curves.png")
    last = result.log[-1]
    return (f"fold {fold_i}: best epoch {result.best_epoch} "
            f"(val loss {result.best_val_loss:.4f}), "
            f"final val accuracy {last.val_accuracy:.3f}")


def cmd_train(args) -> int:
    _apply_thread_cap()
    from .training import TrainingDivergedError

    manifest = _read_manifest(args.manifest)
    folds = _read_folds(args.folds)
    missing = [s for s in folds.fold_of_subject if s not in set(manifest.subjects())]
    if missing:
        raise DataError(f"fold file names unknown subjects: {', '.join(missing[:5])}")

    if args.fold is not None and not 0 <= args.fold < folds.k:
        raise UsageError(
            f"--fold {args.fold} out of range; valid folds are 0..{folds.k - 1}")
    train_cfg, model_cfg = _resolve_train_configs(args)
    opts = _preprocess_opts(args)
    fold_list = [args.fold] if args.fold is not None else list(range(folds.k))
    threads = _thread_cap()

    try:
        if args.parallel_folds > 1 and len(fold_list) > 1:
            import multiprocessing as mp
            from concurrent.futures import ProcessPoolExecutor

            ctx = mp.get_context("fork" if "fork" in mp.get_all_start_methods()
                                 else None)
            with ProcessPoolExecutor(max_workers=args.parallel_folds,
                                     mp_context=ctx) as pool:
                futures = [
                    pool.submit(train_one_fold, str(args.manifest), str(args.folds),
                                i, model_cfg, train_cfg, opts, str(args.out), threads)
                    for i in fold_list
                ]
                for fut in futures:
                    print(fut.result())
        else:
            for i in fold_list:
                print(train_one_fold(str(args.manifest), str(args.folds), i,
                                     model_cfg, train_cfg, opts, str(args.out),
                                     threads))
    except TrainingDivergedError as exc:
        raise DataError(str(exc)) from None
    except OSError as exc:
        raise DataError(str(exc)) from None
    return 0


def cmd_eval(args) -> int:
    from . import report
    from .metrics import load_fold_predictions, pool_folds, read_predictions

    if args.run_dir:
        per_fold = load_fold_predictions(args.run_dir)
        if not per_fold:
            raise DataError(f"no fold_*/predictions.csv found under {args.run_dir}")
        out_dir = Path(args.out) if args.out else Path(args.run_dir)
    else:
        try:
            per_fold = [read_predictions(p) for p in args.pred]
        except (OSError, ValueError) as exc:
            raise DataError(str(exc)) from None
        out_dir = Path(args.out) if args.out else Path(args.pred[0]).parent
    try:
        result = pool_folds(per_fold, threshold=args.threshold)
    except ValueError as exc:
        raise DataError(str(exc)) from None

    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "report.json").write_text(result.to_json())
    report.save_roc_svg(result.roc_points, out_dir / "roc.svg",
                        auroc=result.pooled.auroc)
    report.save_confusion_png(result.pooled.cm, out_dir / "confusion.png")
    pooled = result.pooled
    auroc_txt = "undefined" if pooled.auroc is None else f"{pooled.auroc:.4f}"
    acc_txt = "undefined" if pooled.accuracy is None else f"{pooled.accuracy:.4f}"
    print(f"pooled over {len(per_fold)} fold(s): accuracy {acc_txt}, "
          f"AUROC {auroc_txt}; wrote {out_dir / 'report.json'}")
    return 0


def cmd_explain(args) -> int:
    _apply_thread_cap()
    import torch

    from . import gradcam, report
    from .network import build_model, load_checkpoint

    try:
        cfg, params = load_checkpoint(args.checkpoint)
    except (OSError, ValueError) as exc:
        raise DataError(f"cannot load checkpoint: {exc}") from None
    model = build_model(cfg, params=params)
    try:
        img = imaging.load_gray(args.image)
    except OSError as exc:
        raise DataError(f"cannot read image: {exc}") from None
    box = _parse_box(args.box) if args.box else None
    opts = _preprocess_opts(args)
    try:
        pre = imaging.preprocess(img, box, cfg.input_size, opts)
    except GeometryError as exc:
        raise DataError(str(exc)) from None
    x = torch.from_numpy(imaging.normalize(pre)[None, None, :, :])
    try:
        heat, info = gradcam.explain_image(model, x, args.target_class, args.layer)
    except gradcam.ExplainError as exc:
        raise UsageError(str(exc)) from None
    rgb = gradcam.overlay(heat, pre, alpha=args.alpha)
    out = Path(args.out)
    report.save_gradcam_png(rgb, out)
    sidecar = out.with_suffix(".json")
    sidecar.write_text(json.dumps(info, indent=2, sort_keys=True) + "\n")
    print(f"wrote {out} and {sidecar} "
          f"(layer {info['layer_path']}, max activation {info['max_activation']:.6g})")
    return 0


def cmd_det_eval(args) -> int:
    gt_manifest = _read_manifest(args.gt)
    gt_dir = Path(args.gt).resolve().parent
    gts: dict[str, list[BBox]] = {}
    for rec in gt_manifest:
        if rec.roi_box is not None:
            gts.setdefault(str(Path(rec.image_path).resolve()), []).append(rec.roi_box)
    try:
        dets = load_detections(args.pred)
    except (OSError, ValueError) as exc:
        raise DataError(str(exc)) from None
    resolved = []
    for det in dets:
        p = Path(det.image_id)
        if not p.is_absolute():
            p = gt_dir / p
        resolved.append(replace(det, image_id=str(p.resolve())))
    metrics = map_range(resolved, gts)
    text = json.dumps(metrics.to_dict(), indent=2, sort_keys=True)
    print(text)
    if args.out:
        Path(args.out).write_text(text + "\n")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(
        prog="radcls",
        description="Radiograph classification pipeline: synthesize phantom data, "
                    "preprocess, split folds, train, evaluate, and explain.",
    )
    sub = parser.add_subparsers(dest="command", metavar="command")
    sub.required = True

    p = sub.add_parser("synth", help="generate a deterministic phantom dataset")
    p.add_argument("--subjects", type=int, required=True, help="number of subjects")
    p.add_argument("--out", required=True, metavar="DIR", help="output directory")
    p.add_argument("--seed", type=int, default=0, help="generator seed (default: 0)")
    p.add_argument("--image-size", type=int, default=160, metavar="N",
                   help="phantom image edge length (default: 160)")
    p.add_argument("--signal", type=float, default=0.9, metavar="S",
                   help="tear-band contrast in (0, 1] (default: 0.9)")
    p.add_argument("--noise", type=float, default=6.0, metavar="SIGMA",
                   help="Gaussian noise level (default: 6.0)")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("prepare",
                       help="validate a dataset and write preprocessed images")
    p.add_argument("--manifest", required=True, help="input manifest CSV")
    p.add_argument("--out", required=True, metavar="DIR",
                   help="directory for processed images and manifest")
    p.add_argument("--image-size", type=int, default=512, metavar="N",
                   help="output edge length (default: 512)")
    p.add_argument("--letterbox", action="store_true",
                   help="pad to square instead of stretching")
    p.add_argument("--pad-value", type=int, default=0, metavar="V",
                   help="letterbox fill intensity (default: 0)")
    p.add_argument("--validation-json", metavar="FILE",
                   help="also write the validation findings as JSON")
    _add_preprocess_flags(p)
    p.set_defaults(func=cmd_prepare)

    p = sub.add_parser("split", help="assign subjects to cross-validation folds")
    p.add_argument("--manifest", required=True, help="input manifest CSV")
    p.add_argument("--k", type=int, default=5, help="number of folds (default: 5)")
    p.add_argument("--seed", type=int, default=0, help="shuffle seed (default: 0)")
    p.add_argument("--out", metavar="FILE",
                   help="fold JSON path (default: folds.json beside the manifest)")
    p.set_defaults(func=cmd_split)

    p = sub.add_parser("train", help="train one fold or all folds")
    p.add_argument("--manifest", required=True, help="input manifest CSV")
    p.add_argument("--folds", required=True, metavar="FILE", help="fold JSON")
    p.add_argument("--out", required=True, metavar="DIR", help="run directory")
    which = p.add_mutually_exclusive_group(required=True)
    which.add_argument("--fold", type=int, metavar="I", help="train this fold only")
    which.add_argument("--all-folds", action="store_true", help="train every fold")
    p.add_argument("--config", metavar="FILE",
                   help="key=value config file (flags override it)")
    p.add_argument("--tiny", action="store_true",
                   help="small backbone preset for quick runs")
    p.add_argument("--lr", type=float, default=None, metavar="LR",
                   help="peak learning rate (default: 0.01)")
    p.add_argument("--batch-size", type=int, default=None, metavar="N",
                   help="batch size (default: 8)")
    p.add_argument("--epochs", type=int, default=None, metavar="N",
                   help="training epochs (default: 50)")
    p.add_argument("--momentum", type=float, default=None, metavar="M",
                   help="SGD momentum (default: 0.9)")
    p.add_argument("--dropout", type=float, default=None, metavar="P",
                   help="dropout before the final layer (default: 0.2)")
    p.add_argument("--seed", type=int, default=None, help="run seed (default: 0)")
    p.add_argument("--image-size", type=int, default=None, metavar="N",
                   help="model input edge length (default: 512, tiny preset: 64)")
    p.add_argument("--no-augment", action="store_true",
                   help="disable all training-time augmentation")
    p.add_argument("--parallel-folds", type=int, default=1, metavar="N",
                   help="worker processes for --all-folds; results are identical "
                        "to serial runs, only wall-clock time changes (default: 1)")
    _add_preprocess_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="pool per-fold predictions into a report")
    which = p.add_mutually_exclusive_group(required=True)
    which.add_argument("--run-dir", metavar="DIR",
                       help="training run directory with fold_*/predictions.csv")
    which.add_argument("--pred", action="append", metavar="CSV",
                       help="predictions CSV; repeat for multiple folds")
    p.add_argument("--out", metavar="DIR",
                   help="report directory (default: beside the inputs)")
    p.add_argument("--threshold", type=float, default=0.5,
                   help="positive-class score cutoff (default: 0.5)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("explain", help="write a Grad-CAM overlay for one image")
    p.add_argument("--checkpoint", required=True, help="trained checkpoint file")
    p.add_argument("--image", required=True, help="input image")
    p.add_argument("--out", required=True, metavar="PNG", help="overlay output path")
    p.add_argument("--target-class", type=int, default=1, metavar="C",
                   help="class whose evidence to map (default: 1, the tear class)")
    p.add_argument("--layer", metavar="PATH",
                   help="feature layer path (default: last stage)")
    p.add_argument("--box", metavar="X,Y,W,H", help="ROI box to crop before scoring")
    p.add_argument("--alpha", type=float, default=0.5,
                   help="overlay opacity (default: 0.5)")
    _add_preprocess_flags(p)
    p.set_defaults(func=cmd_explain)

    p = sub.add_parser("det-eval",
                       help="score detection CSVs against manifest ROI boxes")
    p.add_argument("--pred", required=True, metavar="CSV",
                   help="detections CSV (image_path,x,y,w,h,confidence)")
    p.add_argument("--gt", required=True, metavar="CSV",
                   help="manifest CSV whose ROI boxes are ground truth; relative "
                        "detection paths resolve against its directory")
    p.add_argument("--out", metavar="FILE", help="also write the JSON here")
    p.set_defaults(func=cmd_det_eval)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except DataError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except ManifestError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (OSError, GeometryError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
