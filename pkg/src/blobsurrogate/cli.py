"""Command-line entry point for the blob-detection pipeline.

Subcommands cover every stage: ``phantom`` (synthesize volumes),
``optimize-log`` (grid-search LoG parameters), ``train-cd`` (train the
candidate-detection surrogate), ``train-cls`` (train the crop
classifier), ``detect`` (run either candidate stage, optionally followed
by the classifier), ``eval`` (FROC from detections), ``bench`` (time the
two candidate stages), ``sweep-c`` (candidate-target sweep), and
``plot`` (SVG rendering of report files).

Exit codes: 0 success, 1 domain error (bad data, bad formats, missing
files), 2 usage error.  Every output file is written atomically (temp
file in the destination directory, then rename), so an interrupted run
never leaves a partial artifact behind.  All stochastic subcommands
require ``--seed`` and are byte-reproducible given it.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import math
import os
import sys
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from threadpoolctl import threadpool_limits

from .bench import compare_pipelines, load_timing_report, save_timing_report
from .cropcls import CropSpec, classify_candidates
from .errors import BlobSurrogateError, ConfigError
from .estimators import CropProbabilityClassifier, SurrogateCandidateDetector
from .evaluation import (
    Detections,
    ExperimentConfig,
    froc,
    load_detections,
    operating_point,
    save_detections,
    sweep_candidate_values,
)
from .logs import save_training_log
from .nn import load_network, save_network
from .phantom import PhantomConfig, generate_phantom, load_phantom_config
from .plotting import render_bar_plot, render_line_plot
from .scalespace import (
    OptimizeGrid,
    detect_candidates,
    load_candidates,
    load_log_params,
    optimize_log_params,
    save_candidates,
)
from .surrogate import load_surrogate, save_surrogate
from .volume import load_ground_truth, load_volume, save_volume

_THREADS_ENV = "BLOBSURROGATE_THREADS"


class _UsageError(Exception):
    """Bad flag combinations that argparse cannot express declaratively."""


# ---------------------------------------------------------------------------
# small plumbing helpers


def _atomic_write_text(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".part")
    tmp.write_text(text)
    os.replace(tmp, path)


def _atomic_save(path: Path, saver: Callable[[Path], None]) -> None:
    """Run ``saver`` against a temp path, then rename over the target."""
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".part")
    saver(tmp)
    os.replace(tmp, path)


def _require_files(*paths: str | None) -> None:
    # Inputs are validated up front so long stages never start on bad paths.
    for p in paths:
        if p is not None and not Path(p).is_file():
            raise FileNotFoundError(f"input file not found: {p}")


def _floats(text: str) -> tuple[float, ...]:
    try:
        values = tuple(float(tok) for tok in text.split(",") if tok.strip())
    except ValueError as exc:
        raise ConfigError(f"expected comma-separated numbers, got {text!r}") from exc
    if not values:
        raise ConfigError("empty number list")
    return values


def _ints(text: str) -> tuple[int, ...]:
    return tuple(int(round(v)) for v in _floats(text))


def _load_pairs(volume_paths: Sequence[str], truth_paths: Sequence[str]):
    if len(volume_paths) != len(truth_paths):
        raise _UsageError("--volumes and --truths need the same number of paths")
    _require_files(*volume_paths, *truth_paths)
    volumes = [load_volume(p) for p in volume_paths]
    truths = [load_ground_truth(p) for p in truth_paths]
    return volumes, truths


def _resolve_threads(value: int | None) -> int:
    if value is None:
        value = int(os.environ.get(_THREADS_ENV, "1"))
    if value < 1:
        raise ConfigError("threads must be >= 1")
    return value


# ---------------------------------------------------------------------------
# subcommands


def _cmd_phantom(args: argparse.Namespace) -> int:
    if args.config is not None:
        _require_files(args.config)
        config = load_phantom_config(args.config)
    else:
        config = PhantomConfig()
    overrides: dict = {}
    if args.size is not None:
        overrides["size_vox"] = tuple(args.size)
    if args.spacing is not None:
        overrides["spacing_mm"] = args.spacing
    if args.lesion_count is not None:
        overrides["lesion_count_min"] = args.lesion_count[0]
        overrides["lesion_count_max"] = args.lesion_count[1]
    if args.lesion_contrast is not None:
        overrides["lesion_contrast"] = args.lesion_contrast
    if args.vessel_count is not None:
        overrides["vessel_count"] = args.vessel_count
    if args.noise_sigma is not None:
        overrides["noise_sigma"] = args.noise_sigma
    if args.background is not None:
        overrides["background"] = args.background
    if overrides:
        config = dataclasses.replace(config, **overrides)
    volume, truth = generate_phantom(config, args.seed)
    _atomic_save(Path(args.out), lambda p: save_volume(volume, p))
    if args.out_truth is not None:
        _atomic_write_text(Path(args.out_truth), truth.to_json())
    if args.out_config is not None:
        _atomic_write_text(Path(args.out_config), config.to_json())
    print(f"wrote {args.out} ({volume.dims[0]}x{volume.dims[1]}x{volume.dims[2]}, "
          f"{len(truth.lesions)} lesions)")
    return 0


def _cmd_optimize_log(args: argparse.Namespace) -> int:
    volumes, truths = _load_pairs(args.volumes, args.truths)
    grid = OptimizeGrid()
    if args.sigma_values is not None or args.sigma_step is not None \
            or args.thresholds is not None:
        grid = OptimizeGrid(
            sigma_values_mm=_floats(args.sigma_values) if args.sigma_values
            else grid.sigma_values_mm,
            sigma_step_mm=args.sigma_step if args.sigma_step is not None
            else grid.sigma_step_mm,
            thresholds=_floats(args.thresholds) if args.thresholds
            else grid.thresholds)
    result = optimize_log_params(
        volumes, truths, grid, args.min_sensitivity, args.hit_radius,
        args.max_candidates)
    _atomic_write_text(Path(args.out), result.params.to_json())
    if args.report is not None:
        _atomic_write_text(Path(args.report), json.dumps({
            "mean_sensitivity": result.mean_sensitivity,
            "mean_candidates": result.mean_candidates,
            "reached_target": result.reached_target,
        }, indent=2, sort_keys=True))
    flag = "" if result.reached_target else " (sensitivity target not reached)"
    print(f"wrote {args.out}: sigma {result.params.sigma_min_mm}..{result.params.sigma_max_mm} "
          f"step {result.params.sigma_step_mm}, threshold {result.params.response_threshold}, "
          f"mean sensitivity {result.mean_sensitivity:.3f}, "
          f"mean candidates {result.mean_candidates:.1f}{flag}")
    return 0


def _cmd_train_cd(args: argparse.Namespace) -> int:
    _require_files(args.log_params)
    volumes, truths = _load_pairs(args.volumes, args.truths)
    params = load_log_params(args.log_params)
    detector = SurrogateCandidateDetector(
        log_params=params,
        kernel_size=args.kernel_size,
        hidden_channels=args.hidden_channels,
        candidate_value=args.candidate_value,
        smooth_sigma_mm=args.smooth_sigma,
        epochs=args.epochs,
        learning_rate=args.lr,
        augment=not args.no_augment,
        min_sensitivity=args.min_sensitivity,
        hit_radius_mm=args.hit_radius,
        tau_grid_size=args.tau_grid,
        max_candidates=args.max_candidates,
        random_state=args.seed)
    detector.fit(volumes, truths)
    model = detector.model_
    _atomic_save(Path(args.out_weights),
                 lambda p: save_surrogate(model, p, Path(args.out_meta)))
    if args.out_log is not None:
        _atomic_save(Path(args.out_log),
                     lambda p: save_training_log(detector.train_log_, p))
    flag = "" if detector.reached_target_ else " (sensitivity target not reached)"
    last_loss = detector.train_log_[-1][1] if detector.train_log_ else math.nan
    print(f"wrote {args.out_weights}: depth {model.spec.depth}, "
          f"receptive field {model.spec.receptive_field_vox}, tau {model.tau:.6g}, "
          f"final loss {last_loss:.4f}{flag}")
    return 0


def _cmd_train_cls(args: argparse.Namespace) -> int:
    volumes, truths = _load_pairs(args.volumes, args.truths)
    if len(args.candidates) != len(volumes):
        raise _UsageError("--candidates needs one CSV per volume")
    _require_files(*args.candidates)
    candidates = [load_candidates(p) for p in args.candidates]
    classifier = CropProbabilityClassifier(
        edge_mm=args.edge_mm,
        channels=_ints(args.channels),
        kernel_size=args.kernel_size,
        iterations=args.iterations,
        batch_pairs=args.pairs,
        learning_rate=args.lr,
        augment=not args.no_augment,
        negative_min_mm=args.negative_min_mm,
        random_state=args.seed)
    classifier.fit(volumes, truths, candidates)
    net = classifier.network_
    _atomic_save(Path(args.out_weights), lambda p: save_network(net, p))
    if args.out_log is not None:
        _atomic_save(Path(args.out_log),
                     lambda p: save_training_log(classifier.train_log_, p))
    last_loss = classifier.train_log_[-1][1] if classifier.train_log_ else math.nan
    print(f"wrote {args.out_weights}: final loss {last_loss:.4f}")
    return 0


def _cmd_detect(args: argparse.Namespace) -> int:
    if (args.log_params is None) == (args.weights is None):
        raise _UsageError("pass exactly one of --log-params or --weights/--meta")
    if (args.weights is None) != (args.meta is None):
        raise _UsageError("--weights and --meta go together")
    _require_files(args.volume, args.log_params, args.weights, args.meta,
                   args.classifier)
    volume = load_volume(args.volume)
    if args.log_params is not None:
        candidates = detect_candidates(
            volume, load_log_params(args.log_params), args.max_candidates)
    else:
        model = load_surrogate(args.weights, args.meta)
        candidates = model.detect(volume, args.max_candidates)
    if args.classifier is None:
        _atomic_save(Path(args.out), lambda p: save_candidates(candidates, p))
        print(f"wrote {args.out}: {len(candidates.scores)} candidates")
        return 0
    net = load_network(args.classifier)
    spec = CropSpec(edge_mm=args.edge_mm)
    probs = classify_candidates(net, volume, candidates, spec)
    detections = Detections.from_scored(candidates.positions_mm, probs)
    _atomic_save(Path(args.out), lambda p: save_detections(detections, p))
    print(f"wrote {args.out}: {len(detections)} scored detections")
    return 0


def _cmd_eval(args: argparse.Namespace) -> int:
    if len(args.detections) != len(args.truths):
        raise _UsageError("--detections and --truths need the same number of paths")
    _require_files(*args.detections, *args.truths)
    detections = [load_detections(p) for p in args.detections]
    truths = [load_ground_truth(p) for p in args.truths]
    curve = froc(detections, truths, args.hit_radius)
    point = operating_point(curve, args.target_sensitivity)
    report = {
        "n_volumes": len(truths),
        "n_lesions": sum(len(t.lesions) for t in truths),
        "hit_radius_mm": args.hit_radius,
        "froc_csv": curve.to_csv(),
        "operating_point": {
            "threshold": point.threshold,
            "sensitivity": point.sensitivity,
            "afp": point.afp,
        },
    }
    _atomic_write_text(Path(args.out), json.dumps(report, indent=2, sort_keys=True))
    if args.froc_csv is not None:
        _atomic_write_text(Path(args.froc_csv), curve.to_csv())
    print(f"wrote {args.out}: sensitivity {point.sensitivity:.3f} at "
          f"{point.afp:.2f} FP/volume (threshold {point.threshold:.4f})")
    return 0


def _cmd_bench(args: argparse.Namespace, threads: int) -> int:
    _require_files(args.volume, args.log_params, args.weights, args.meta,
                   args.classifier)
    volume = load_volume(args.volume)
    params = load_log_params(args.log_params)
    model = load_surrogate(args.weights, args.meta)
    classifier_fn = None
    if args.classifier is not None:
        net = load_network(args.classifier)
        spec = CropSpec(edge_mm=args.edge_mm)
        classifier_fn = lambda cands: classify_candidates(net, volume, cands, spec)
    report, _, _ = compare_pipelines(
        volume, params, model, classifier_fn,
        warmups=args.warmups, runs=args.runs, threads=threads,
        max_candidates=args.max_candidates)
    _atomic_save(Path(args.out), lambda p: save_timing_report(report, p))
    print(f"wrote {args.out}: LoG {report.log_median_s * 1e3:.1f} ms, "
          f"surrogate {report.surrogate_median_s * 1e3:.1f} ms, "
          f"speedup x{report.speedup_ratio:.2f}")
    return 0


def _cmd_sweep_c(args: argparse.Namespace) -> int:
    if args.phantom_config is not None:
        _require_files(args.phantom_config)
        phantom = load_phantom_config(args.phantom_config)
    else:
        phantom = PhantomConfig()
    config = ExperimentConfig(
        phantom=phantom,
        n_train=args.n_train,
        n_test=args.n_test,
        seed=args.seed,
        min_sensitivity=args.min_sensitivity,
        surrogate_epochs=args.epochs,
    )
    result = sweep_candidate_values(config, _floats(args.values), args.budget)
    _atomic_write_text(Path(args.out), json.dumps(result, indent=2, sort_keys=True))
    for row in result["rows"]:
        print(f"c={row['candidate_value']:<8g} sensitivity at budget "
              f"{row['test_sensitivity_at_budget']:.3f} "
              f"(tau {row['budget_tau']:.4f}, "
              f"{row['mean_voxels_at_budget']:.0f} voxels)")
    print(f"wrote {args.out}")
    return 0


def _plot_froc(report: dict, deterministic: bool) -> str:
    from .evaluation import FrocCurve

    series = []
    if "froc" in report and isinstance(report["froc"], dict):
        items = sorted(report["froc"].items())
    elif "froc_csv" in report:
        items = [("detections", report["froc_csv"])]
    else:
        raise ConfigError("report has no FROC data")
    for name, csv_text in items:
        curve = FrocCurve.from_csv(csv_text)
        xs = [p.afp for p in curve]
        ys = [p.sensitivity for p in curve]
        series.append((name, xs, ys))
    return render_line_plot(series, title="FROC", xlabel="false positives per volume",
                            ylabel="sensitivity", deterministic=deterministic)


def _plot_timing(report_path: str, deterministic: bool) -> str:
    report = load_timing_report(report_path)
    return render_bar_plot(
        ["LoG", "surrogate"],
        [report.log_median_s, report.surrogate_median_s],
        title=f"candidate stage, median of {report.runs} runs "
              f"(speedup x{report.speedup_ratio:.2f})",
        ylabel="seconds", deterministic=deterministic)


def _plot_sweep(report: dict, deterministic: bool) -> str:
    rows = report.get("rows")
    if not rows:
        raise ConfigError("sweep report has no rows")
    xs = [math.log10(r["candidate_value"]) for r in rows]
    ys = [r["test_sensitivity_at_budget"] for r in rows]
    order = np.argsort(xs)
    xs = [xs[i] for i in order]
    ys = [ys[i] for i in order]
    return render_line_plot(
        [("sensitivity at budget", xs, ys)],
        title="candidate-target sweep", xlabel="log10(candidate value)",
        ylabel="sensitivity", deterministic=deterministic)


def _cmd_plot(args: argparse.Namespace) -> int:
    _require_files(args.input)
    if args.kind == "timing":
        svg = _plot_timing(args.input, args.deterministic)
    else:
        try:
            report = json.loads(Path(args.input).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"malformed report: {exc}") from exc
        if args.kind == "froc":
            svg = _plot_froc(report, args.deterministic)
        else:
            svg = _plot_sweep(report, args.deterministic)
    _atomic_write_text(Path(args.out), svg)
    print(f"wrote {args.out}")
    return 0


# ---------------------------------------------------------------------------
# parser


def _build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--threads", type=int, default=None,
                        help=f"thread cap for numeric libraries "
                             f"(default: ${_THREADS_ENV} or 1)")

    parser = argparse.ArgumentParser(
        prog="blobsurrogate",
        description="Volumetric blob detection: LoG candidates, a trained "
                    "conv surrogate, crop classification, and benchmarks.")
    sub = parser.add_subparsers(dest="command", metavar="command")

    p = sub.add_parser("phantom", parents=[common],
                       help="synthesize a volume with known lesions")
    p.add_argument("--out", required=True, help="output volume (.bsv)")
    p.add_argument("--out-truth", help="output lesion list (.json)")
    p.add_argument("--out-config", help="write the effective config (.json)")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--config", help="phantom config JSON (flags override it)")
    p.add_argument("--size", type=int, nargs=3, metavar=("NX", "NY", "NZ"))
    p.add_argument("--spacing", type=float, help="voxel spacing in mm")
    p.add_argument("--lesion-count", type=int, nargs=2, metavar=("MIN", "MAX"))
    p.add_argument("--lesion-contrast", type=float)
    p.add_argument("--vessel-count", type=int)
    p.add_argument("--noise-sigma", type=float)
    p.add_argument("--background", type=float)
    p.set_defaults(func=_cmd_phantom)

    p = sub.add_parser("optimize-log", parents=[common],
                       help="grid-search LoG scale range and threshold")
    p.add_argument("--volumes", nargs="+", required=True)
    p.add_argument("--truths", nargs="+", required=True)
    p.add_argument("--out", required=True, help="output LoG params (.json)")
    p.add_argument("--report", help="optional search stats (.json)")
    p.add_argument("--sigma-values", help="comma-separated sigma grid in mm")
    p.add_argument("--sigma-step", type=float)
    p.add_argument("--thresholds", help="comma-separated response thresholds")
    p.add_argument("--min-sensitivity", type=float, default=0.95)
    p.add_argument("--hit-radius", type=float, default=1.5)
    p.add_argument("--max-candidates", type=int, default=100000)
    p.set_defaults(func=_cmd_optimize_log)

    p = sub.add_parser("train-cd", parents=[common],
                       help="train the candidate-detection surrogate")
    p.add_argument("--volumes", nargs="+", required=True)
    p.add_argument("--truths", nargs="+", required=True)
    p.add_argument("--log-params", required=True)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out-weights", required=True, help="output weights (.bsw)")
    p.add_argument("--out-meta", required=True, help="output metadata (.json)")
    p.add_argument("--out-log", help="optional training log (.csv)")
    p.add_argument("--epochs", type=int, default=120)
    p.add_argument("--lr", type=float, default=0.002)
    p.add_argument("--kernel-size", type=int, default=3)
    p.add_argument("--hidden-channels", type=int, default=3)
    p.add_argument("--candidate-value", type=float, default=0.001)
    p.add_argument("--smooth-sigma", type=float, default=1.0)
    p.add_argument("--no-augment", action="store_true")
    p.add_argument("--min-sensitivity", type=float, default=0.95)
    p.add_argument("--hit-radius", type=float, default=1.5)
    p.add_argument("--tau-grid", type=int, default=256)
    p.add_argument("--max-candidates", type=int, default=100000)
    p.set_defaults(func=_cmd_train_cd)

    p = sub.add_parser("train-cls", parents=[common],
                       help="train the crop classifier on candidate points")
    p.add_argument("--volumes", nargs="+", required=True)
    p.add_argument("--truths", nargs="+", required=True)
    p.add_argument("--candidates", nargs="+", required=True,
                   help="one candidate CSV per volume")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out-weights", required=True, help="output weights (.bsw)")
    p.add_argument("--out-log", help="optional training log (.csv)")
    p.add_argument("--iterations", type=int, default=400)
    p.add_argument("--pairs", type=int, default=16)
    p.add_argument("--lr", type=float, default=5e-5)
    p.add_argument("--edge-mm", type=float, default=16.0)
    p.add_argument("--channels", default="8,16,32,64")
    p.add_argument("--kernel-size", type=int, default=3)
    p.add_argument("--no-augment", action="store_true")
    p.add_argument("--negative-min-mm", type=float, default=2.0)
    p.set_defaults(func=_cmd_train_cls)

    p = sub.add_parser("detect", parents=[common],
                       help="run a candidate stage, optionally with the classifier")
    p.add_argument("--volume", required=True)
    p.add_argument("--out", required=True,
                   help="candidates CSV, or detections CSV with --classifier")
    p.add_argument("--log-params", help="run the LoG stage")
    p.add_argument("--weights", help="run the surrogate stage (.bsw)")
    p.add_argument("--meta", help="surrogate metadata (.json)")
    p.add_argument("--classifier", help="crop-classifier weights (.bsw)")
    p.add_argument("--edge-mm", type=float, default=16.0)
    p.add_argument("--max-candidates", type=int, default=100000)
    p.set_defaults(func=_cmd_detect)

    p = sub.add_parser("eval", parents=[common],
                       help="FROC evaluation of detection CSVs")
    p.add_argument("--detections", nargs="+", required=True)
    p.add_argument("--truths", nargs="+", required=True)
    p.add_argument("--out", required=True, help="output report (.json)")
    p.add_argument("--froc-csv", help="optional FROC curve (.csv)")
    p.add_argument("--hit-radius", type=float, default=1.5)
    p.add_argument("--target-sensitivity", type=float, default=0.9)
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("bench", parents=[common],
                       help="time LoG vs surrogate on one volume")
    p.add_argument("--volume", required=True)
    p.add_argument("--log-params", required=True)
    p.add_argument("--weights", required=True)
    p.add_argument("--meta", required=True)
    p.add_argument("--classifier", help="also time the crop classifier once")
    p.add_argument("--edge-mm", type=float, default=16.0)
    p.add_argument("--out", required=True, help="output timing report (.json)")
    p.add_argument("--runs", type=int, default=5)
    p.add_argument("--warmups", type=int, default=1)
    p.add_argument("--max-candidates", type=int, default=100000)
    p.set_defaults(func=_cmd_bench)

    p = sub.add_parser("sweep-c", parents=[common],
                       help="sweep the candidate target value c at a fixed budget")
    p.add_argument("--values", default="1,0.1,0.01,0.001",
                   help="comma-separated c values")
    p.add_argument("--budget", type=float, required=True,
                   help="mean voxels above threshold to compare at")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out", required=True, help="output sweep report (.json)")
    p.add_argument("--phantom-config", help="phantom config JSON")
    p.add_argument("--n-train", type=int, default=4)
    p.add_argument("--n-test", type=int, default=2)
    p.add_argument("--epochs", type=int, default=120)
    p.add_argument("--min-sensitivity", type=float, default=0.9)
    p.set_defaults(func=_cmd_sweep_c)

    p = sub.add_parser("plot", parents=[common],
                       help="render a report file as an SVG")
    p.add_argument("--kind", choices=("froc", "timing", "c-sweep"), required=True)
    p.add_argument("--input", required=True, help="report file to render")
    p.add_argument("--out", required=True, help="output SVG path")
    p.add_argument("--deterministic", action="store_true",
                   help="omit the timestamp comment")
    p.set_defaults(func=_cmd_plot)

    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code is not None else 0
    if getattr(args, "func", None) is None:
        parser.print_usage(sys.stderr)
        return 2
    try:
        threads = _resolve_threads(args.threads)
        with threadpool_limits(limits=threads):
            if args.func is _cmd_bench:
                return args.func(args, threads)
            return args.func(args)
    except _UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 2
    except (BlobSurrogateError, FileNotFoundError, IsADirectoryError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
