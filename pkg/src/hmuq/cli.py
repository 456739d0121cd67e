"""Command-line pipeline around the library: dataset synthesis, training,
prediction, heatmap fitting, Monte-Carlo-dropout baselines, metric reports,
inter-observer analysis, clinical propagation, and SVG plots.

Every subcommand reads its inputs, writes artifacts under --out, and never
modifies what it read.  Reruns with the same inputs and seeds produce
byte-identical CSV files; SVG output differs only in a timestamp comment,
which --no-timestamp suppresses.  Exit status: 0 on success, 1 on runtime
errors (with a diagnostic on stderr), 2 on usage errors.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import os
import sys

import numpy as np

from .clinical import (
    accuracy_uncertainty_curve,
    classify,
    evaluate_measurement,
    load_measurements,
    mc_classify,
    write_curve_csv,
)
from .dataio import AnnotationRow, load_dataset, read_config_file, write_annotations
from .fitting import FitConfig, FitDegenerateError, argmax_coord, fit_config_from_dict
from .gauss import AnisotropicGaussian, InvalidParameterError
from .metrics import (
    aggregate_stats,
    fit_annotation_distribution,
    interobserver_decomps,
    point_error,
    report_row,
    write_report_csv,
)
from .svgplot import (
    PLOT_KINDS,
    PlotSpec,
    render_accuracy_curve,
    render_ellipse_overlay,
    render_offset_scatter,
    render_sigma_vs_error,
)
from .synthdata import SynthConfig, generate, synth_config_from_dict, write_synth_dataset
from .trainer import (
    TrainConfig,
    predict,
    read_checkpoint,
    train,
    train_config_from_dict,
    write_checkpoint,
)
from .uncertainty import McdConfig, mcd_heatmap_fit, mcd_max, mcd_predict, sample_uncertainty

CONFIG_ENV_VAR = "HMUQ_CONFIG"


def _say(args, message: str) -> None:
    if not args.quiet:
        print(message)


def _warn(message: str) -> None:
    print(f"warning: {message}", file=sys.stderr)


def _config_path(args):
    """--config wins; the environment variable only fills in an absent flag."""
    return args.config if args.config is not None else os.environ.get(CONFIG_ENV_VAR)


def _manifest_path(data):
    return os.path.join(data, "manifest.cfg") if os.path.isdir(data) else data


def _checkpoint_path(model):
    return os.path.join(model, "model.ckpt") if os.path.isdir(model) else model


def _load_training_dataset(data):
    ds = load_dataset(_manifest_path(data))
    if ds.coords is None:
        raise InvalidParameterError(
            f"{data}: dataset has observer annotations only; this command "
            f"needs the single-annotator table")
    return ds


def _write_csv(path, header, rows) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        writer.writerows(rows)


def _fit_config(args) -> FitConfig:
    path = _config_path(args)
    if path is None:
        return FitConfig()
    return fit_config_from_dict(read_config_file(path))


def _fit_landmarks(model, image, fit_cfg):
    """Per-landmark Gaussian fits of one forward pass (None where degenerate)."""
    out = []
    for heatmap in predict(model, image):
        try:
            out.append(sample_uncertainty(heatmap, fit_cfg))
        except FitDegenerateError:
            out.append(None)
    return out


# --- subcommands ----------------------------------------------------------------


def cmd_synth(args) -> int:
    path = _config_path(args)
    cfg = synth_config_from_dict(read_config_file(path)) if path else SynthConfig()
    if args.seed is not None:
        cfg = dataclasses.replace(cfg, seed=args.seed)
    cfg.validate()
    ds = generate(cfg)
    os.makedirs(args.out, exist_ok=True)
    manifest = write_synth_dataset(args.out, ds, cfg)
    _say(args, f"wrote {manifest}: {cfg.num_images} images, "
               f"{ds.landmark_count} landmarks, {cfg.image_size}x{cfg.image_size} px")
    return 0


def cmd_train(args) -> int:
    ds = _load_training_dataset(args.data)
    path = _config_path(args)
    cfg = train_config_from_dict(read_config_file(path)) if path else TrainConfig()
    if args.mode is not None:
        cfg = dataclasses.replace(cfg, target_mode=args.mode)
    if args.seed is not None:
        cfg = dataclasses.replace(cfg, seed=args.seed)
    if args.iterations is not None:
        cfg = dataclasses.replace(cfg, iterations=args.iterations)
    cfg.validate()
    model = train(ds, cfg)
    os.makedirs(args.out, exist_ok=True)
    ckpt = os.path.join(args.out, "model.ckpt")
    write_checkpoint(model, ckpt)
    _write_csv(os.path.join(args.out, "loss.csv"), ["iteration", "loss"],
               [(i, repr(float(v))) for i, v in enumerate(model.loss_trace)])
    _write_csv(os.path.join(args.out, "learned_covariances.csv"),
               ["landmark_id", "theta_deg", "sigma_maj", "sigma_min"],
               [(j, repr(d.theta_deg), repr(d.sigma_maj), repr(d.sigma_min))
                for j, d in enumerate(model.target_decomps)])
    _say(args, f"wrote {ckpt}: final loss {model.loss_trace[-1]:.4f}")
    for j, d in enumerate(model.target_decomps):
        _say(args, f"  landmark {j}: theta {d.theta_deg:+.2f} deg, "
                   f"sigma_maj {d.sigma_maj:.3f} px, sigma_min {d.sigma_min:.3f} px")
    return 0


def cmd_predict(args) -> int:
    model = read_checkpoint(_checkpoint_path(args.model))
    ds = load_dataset(_manifest_path(args.data))
    rows = []
    for image_id, image in zip(ds.ids, ds.images):
        for j, heatmap in enumerate(predict(model, image)):
            x, y = argmax_coord(heatmap)
            rows.append(AnnotationRow(image_id, j, "", float(x), float(y)))
    os.makedirs(args.out, exist_ok=True)
    out_path = os.path.join(args.out, "predictions.csv")
    write_annotations(out_path, rows)
    _say(args, f"wrote {out_path}: {len(rows)} predictions")
    return 0


def cmd_fit(args) -> int:
    model = read_checkpoint(_checkpoint_path(args.model))
    ds = load_dataset(_manifest_path(args.data))
    fit_cfg = _fit_config(args)
    rows = []
    skipped = 0
    for image_id, image in zip(ds.ids, ds.images):
        for j, pred in enumerate(_fit_landmarks(model, image, fit_cfg)):
            if pred is None:
                skipped += 1
                continue
            d = pred.covariance
            rows.append((image_id, j, repr(pred.coord[0]), repr(pred.coord[1]),
                         repr(d.theta_deg), repr(d.sigma_maj), repr(d.sigma_min),
                         int(pred.converged)))
    if skipped:
        _warn(f"{skipped} heatmaps were too flat for a Gaussian fit; rows omitted")
    os.makedirs(args.out, exist_ok=True)
    out_path = os.path.join(args.out, "fits.csv")
    _write_csv(out_path, ["image_id", "landmark_id", "x_px", "y_px",
                          "theta_deg", "sigma_maj", "sigma_min", "converged"], rows)
    _say(args, f"wrote {out_path}: {len(rows)} fits")
    return 0


def cmd_mcd(args) -> int:
    model = read_checkpoint(_checkpoint_path(args.model))
    ds = load_dataset(_manifest_path(args.data))
    fit_cfg = _fit_config(args)
    mcd_cfg = McdConfig(k=args.k, seed=0 if args.seed is None else args.seed)
    mcd_cfg.validate()
    rows = []
    skipped = 0
    for image_id, image in zip(ds.ids, ds.images):
        for j, stack in enumerate(mcd_predict(model, image, mcd_cfg)):
            preds = [mcd_max(stack)]
            try:
                preds.append(mcd_heatmap_fit(stack, fit_cfg))
            except FitDegenerateError:
                skipped += 1
            for p in preds:
                d = p.covariance
                rows.append((image_id, j, p.source, repr(p.coord[0]), repr(p.coord[1]),
                             repr(d.theta_deg), repr(d.sigma_maj), repr(d.sigma_min)))
    if skipped:
        _warn(f"{skipped} mean heatmaps were too flat for a Gaussian fit; rows omitted")
    os.makedirs(args.out, exist_ok=True)
    out_path = os.path.join(args.out, "mcd.csv")
    _write_csv(out_path, ["image_id", "landmark_id", "source", "x_px", "y_px",
                          "theta_deg", "sigma_maj", "sigma_min"], rows)
    _say(args, f"wrote {out_path}: {len(rows)} rows, k={mcd_cfg.k}")
    return 0


def cmd_eval(args) -> int:
    model = read_checkpoint(_checkpoint_path(args.model))
    ds = _load_training_dataset(args.data)
    fit_cfg = _fit_config(args)
    n_landmarks = model.predictor.landmark_count
    decomps_mm = [[] for _ in range(n_landmarks)]
    errors_mm = [[] for _ in range(n_landmarks)]
    skipped = 0
    for i, image in enumerate(ds.images):
        spacing = float(ds.spacing[i])
        for j, pred in enumerate(_fit_landmarks(model, image, fit_cfg)):
            if pred is None:
                skipped += 1
                continue
            decomps_mm[j].append(pred.covariance.scaled(spacing))
            errors_mm[j].append(point_error(ds.coords[i, j], pred.coord) * spacing)
    if skipped:
        _warn(f"{skipped} heatmaps were too flat for a Gaussian fit; "
              f"those images are excluded from the affected landmark's row")
    rows = []
    for j in range(n_landmarks):
        stats = aggregate_stats(decomps_mm[j]) if decomps_mm[j] else None
        rows.append(report_row(j, stats, errors_mm[j] or None))
    os.makedirs(args.out, exist_ok=True)
    out_path = os.path.join(args.out, "metrics.csv")
    write_report_csv(out_path, rows)
    _say(args, f"wrote {out_path}: {n_landmarks} landmarks over {len(ds.ids)} images")
    for row in rows:
        _say(args, "  " + " ".join(f"{k}={v}" for k, v in row.items() if v != ""))
    return 0


def cmd_interobs(args) -> int:
    ds = load_dataset(_manifest_path(args.data))
    if ds.observers is None:
        raise InvalidParameterError(f"{args.data}: dataset has no observer annotations")
    rows = []
    for j in range(ds.landmark_count):
        stats = aggregate_stats(interobserver_decomps(ds, j))
        rows.append(report_row(j, stats))
    os.makedirs(args.out, exist_ok=True)
    out_path = os.path.join(args.out, "interobserver.csv")
    write_report_csv(out_path, rows)
    n_rows = sum(len(v) for v in ds.observers.values())
    _say(args, f"wrote {out_path}: {n_rows} observer annotations over "
               f"{len(ds.ids)} images")
    for row in rows:
        _say(args, "  " + " ".join(f"{k}={v}" for k, v in row.items() if v != ""))
    return 0


def _landmark_names(path, landmark_count):
    """The names config maps landmark indices to measurement-expression names."""
    items = read_config_file(path)
    names = {}
    for key, value in items.items():
        try:
            index = int(key)
        except ValueError:
            raise InvalidParameterError(
                f"{path}: keys must be landmark indices, got {key!r}") from None
        if not 0 <= index < landmark_count:
            raise InvalidParameterError(
                f"{path}: landmark index {index} outside 0..{landmark_count - 1}")
        if value in names.values():
            raise InvalidParameterError(f"{path}: duplicate landmark name {value!r}")
        names[index] = value
    return names


def cmd_clinical(args) -> int:
    model = read_checkpoint(_checkpoint_path(args.model))
    ds = _load_training_dataset(args.data)
    fit_cfg = _fit_config(args)
    measurements = list(load_measurements(args.measurements).values())
    names = _landmark_names(args.names, ds.landmark_count)
    available = set(names.values())
    for mdef, _ in measurements:
        missing = [n for n in mdef.landmark_ids if n not in available]
        if missing:
            raise InvalidParameterError(
                f"measurement {mdef.name!r} needs landmark names {missing} "
                f"that {args.names} does not define")
    seed = 0 if args.seed is None else args.seed

    class_rows = []
    prob_rows = []
    per_measurement = {mdef.name: ([], [], []) for mdef, _ in measurements}
    skipped = 0
    for i, (image_id, image) in enumerate(zip(ds.ids, ds.images)):
        spacing = float(ds.spacing[i])
        fits = _fit_landmarks(model, image, fit_cfg)
        gaussians = {}
        for j, name in names.items():
            if fits[j] is not None:
                mean = (fits[j].coord[0] * spacing, fits[j].coord[1] * spacing)
                gaussians[name] = AnisotropicGaussian(
                    mean, fits[j].covariance.scaled(spacing), 1.0)
        gt_mm = {name: ds.coords[i, j] * spacing for j, name in names.items()}
        for m_index, (mdef, thresholds) in enumerate(measurements):
            if any(n not in gaussians for n in mdef.landmark_ids):
                skipped += 1
                continue
            gt_label = classify(evaluate_measurement(gt_mm, mdef), thresholds)
            result = mc_classify(gaussians, mdef, thresholds, n=args.samples,
                                 seed=[seed, i, m_index])
            class_rows.append((image_id, mdef.name, gt_label, result.hard_class,
                               f"{result.entropy_nats:.6f}",
                               int(result.hard_class == gt_label)))
            for label, prob in zip(result.labels, result.probs):
                prob_rows.append((image_id, mdef.name, label, f"{prob:.6f}"))
            ids, results, gts = per_measurement[mdef.name]
            ids.append(image_id)
            results.append(result)
            gts.append(gt_label)
    if skipped:
        _warn(f"{skipped} image/measurement pairs skipped (landmark fit failed)")

    os.makedirs(args.out, exist_ok=True)
    class_path = os.path.join(args.out, "classifications.csv")
    _write_csv(class_path, ["image_id", "measurement", "gt_class", "hard_class",
                            "entropy_nats", "correct"], class_rows)
    _write_csv(os.path.join(args.out, "probabilities.csv"),
               ["image_id", "measurement", "label", "probability"], prob_rows)
    for mdef, _ in measurements:
        ids, results, gts = per_measurement[mdef.name]
        if not ids:
            _warn(f"measurement {mdef.name!r} classified no images; no curve written")
            continue
        curve = accuracy_uncertainty_curve(ids, results, gts)
        write_curve_csv(os.path.join(args.out, f"curve_{mdef.name}.csv"), curve)
        _say(args, f"  {mdef.name}: accuracy {curve[-1][1]:.1f}% over {len(ids)} images")
    _say(args, f"wrote {class_path}: {len(class_rows)} classifications")
    return 0


def _require(args, parser, *flags) -> None:
    missing = [f"--{f}" for f in flags if getattr(args, f) is None]
    if missing:
        parser.error(f"--kind {args.kind} requires {', '.join(missing)}")


def cmd_plot(args, parser) -> int:
    spec = PlotSpec(args.kind, args.scale)
    spec.validate()
    timestamp = not args.no_timestamp

    if spec.kind == "accuracy_curve":
        _require(args, parser, "curves")
        curves = {}
        for path in args.curves:
            with open(path, "r", encoding="utf-8", newline="") as fh:
                reader = csv.reader(fh)
                header = next(reader, None)
                if header != ["fraction", "accuracy_percent"]:
                    raise InvalidParameterError(f"{path}: not an accuracy-curve CSV")
                pts = [(float(a), float(b)) for a, b in reader]
            label = os.path.splitext(os.path.basename(path))[0]
            curves[label.removeprefix("curve_")] = pts
        svg = render_accuracy_curve(curves, title="accuracy vs considered fraction",
                                    timestamp=timestamp)
    else:
        _require(args, parser, "model", "data")
        model = read_checkpoint(_checkpoint_path(args.model))
        ds = _load_training_dataset(args.data)
        if spec.kind == "ellipse_overlay":
            if args.image is not None and args.image not in ds.ids:
                raise InvalidParameterError(f"unknown image id {args.image!r}")
            index = ds.ids.index(args.image) if args.image is not None else 0
            items = [(f"L{j}", tuple(ds.coords[index, j]), d.canonical())
                     for j, d in enumerate(model.target_decomps)]
            svg = render_ellipse_overlay(ds.images[index].shape, items,
                                         scale=spec.ellipse_scale,
                                         title=f"learned covariance, {ds.ids[index]}",
                                         timestamp=timestamp)
        else:
            j = args.landmark
            if not 0 <= j < ds.landmark_count:
                raise InvalidParameterError(
                    f"landmark {j} outside 0..{ds.landmark_count - 1}")
            fit_cfg = FitConfig()
            coords, products, errors = [], [], []
            for i, image in enumerate(ds.images):
                pred = _fit_landmarks(model, image, fit_cfg)[j]
                if pred is None:
                    continue
                coords.append((i, pred))
                products.append(pred.covariance.product)
                errors.append(point_error(ds.coords[i, j], pred.coord))
            if not coords:
                raise InvalidParameterError(
                    f"no usable Gaussian fit for landmark {j} on any image")
            if spec.kind == "offset_scatter":
                offsets = np.array([np.asarray(p.coord) - ds.coords[i, j]
                                    for i, p in coords])
                overlays = [("learned", model.target_decomps[j].canonical())]
                if len(offsets) >= 3:
                    overlays.append(("empirical", fit_annotation_distribution(offsets)[1]))
                svg = render_offset_scatter(offsets, overlays, scale=spec.ellipse_scale,
                                            title=f"landmark {j} offsets (px)",
                                            timestamp=timestamp)
            else:
                svg = render_sigma_vs_error(products, errors,
                                            title=f"landmark {j} spread vs error",
                                            timestamp=timestamp)

    os.makedirs(args.out, exist_ok=True)
    out_path = os.path.join(args.out, f"{spec.kind}.svg")
    with open(out_path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(svg)
    _say(args, f"wrote {out_path}")
    return 0


# --- parser -----------------------------------------------------------------------


def build_parser() -> tuple[argparse.ArgumentParser, argparse.ArgumentParser]:
    parser = argparse.ArgumentParser(
        prog="hmuq",
        description="Landmark heatmap regression with anisotropic Gaussian "
                    "targets and uncertainty reports.")
    sub = parser.add_subparsers(dest="command", required=True, metavar="SUBCOMMAND")

    def add(name, help_text, **defaults):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--out", default=".", help="output directory (default: .)")
        p.add_argument("--quiet", action="store_true", help="suppress progress output")
        for flag, kwargs in defaults.items():
            p.add_argument(f"--{flag.replace('_', '-')}", **kwargs)
        return p

    config_help = ("flat key = value config file (the %s environment variable "
                   "supplies the path when the flag is absent)" % CONFIG_ENV_VAR)
    seed_kw = dict(type=int, default=None, help="override the random seed")
    data_kw = dict(required=True, help="dataset directory or manifest path")
    model_kw = dict(required=True, help="model directory or checkpoint path")

    add("synth", "generate a synthetic landmark dataset",
        config=dict(default=None, help=config_help), seed=seed_kw)
    add("train", "train a predictor and the target covariances",
        data=data_kw, config=dict(default=None, help=config_help),
        mode=dict(default=None, choices=("fixed_iso", "learned_iso", "learned_aniso"),
                  help="override the target mode"),
        iterations=dict(type=int, default=None, help="override the iteration count"),
        seed=seed_kw)
    add("predict", "write argmax landmark coordinates for a dataset",
        model=model_kw, data=data_kw)
    add("fit", "fit a Gaussian to every predicted heatmap",
        model=model_kw, data=data_kw, config=dict(default=None, help=config_help))
    add("mcd", "Monte-Carlo-dropout baselines (argmax spread and mean-heatmap fit)",
        model=model_kw, data=data_kw, config=dict(default=None, help=config_help),
        k=dict(type=int, default=20, help="number of stochastic forward passes"),
        seed=seed_kw)
    add("eval", "localization and distribution metrics, one CSV row per landmark",
        model=model_kw, data=data_kw, config=dict(default=None, help=config_help))
    add("interobs", "per-landmark observer-spread statistics (mm)",
        data=data_kw)
    add("clinical", "propagate landmark uncertainty into measurement classes",
        model=model_kw, data=data_kw,
        names=dict(required=True,
                   help="config mapping landmark indices to expression names"),
        measurements=dict(default=None,
                          help="measurement definitions (default: shipped table)"),
        samples=dict(type=int, default=10000, help="Monte-Carlo samples per image"),
        config=dict(default=None, help=config_help), seed=seed_kw)
    plot = add("plot", "render an SVG figure",
               kind=dict(required=True, choices=PLOT_KINDS),
               model=dict(default=None, help="model directory or checkpoint path"),
               data=dict(default=None, help="dataset directory or manifest path"),
               landmark=dict(type=int, default=0, help="landmark id for scatter kinds"),
               image=dict(default=None, help="image id for ellipse_overlay"),
               curves=dict(nargs="+", default=None,
                           help="accuracy-curve CSV files for accuracy_curve"),
               scale=dict(type=float, default=3.0, help="ellipse semi-axes in sigmas"),
               no_timestamp=dict(action="store_true",
                                 help="omit the timestamp comment from the SVG"))
    return parser, plot


HANDLERS = {
    "synth": cmd_synth,
    "train": cmd_train,
    "predict": cmd_predict,
    "fit": cmd_fit,
    "mcd": cmd_mcd,
    "eval": cmd_eval,
    "interobs": cmd_interobs,
    "clinical": cmd_clinical,
}


def main(argv=None) -> int:
    parser, plot_parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else 2
    try:
        if args.command == "plot":
            return cmd_plot(args, plot_parser)
        return HANDLERS[args.command](args)
    except SystemExit as exc:  # parser.error() inside a handler
        return exc.code if isinstance(exc.code, int) else 2
    except (OSError, ValueError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
