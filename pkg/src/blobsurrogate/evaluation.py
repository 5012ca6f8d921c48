"""Detection scoring: greedy matching, FROC curves, and experiment orchestration.

A detection hits a lesion when it lies within the hit radius of the
centre.  Matching is greedy by descending probability: each detection
claims the nearest still-unclaimed lesion in range, so one lesion can
never be counted twice and extra detections on the same lesion count as
false positives.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from ._validation import check_finite, check_positive
from .cropcls import (
    CropAugmentation,
    CropSpec,
    build_classifier_net,
    classify_candidates,
    train_classifier,
)
from .errors import ConfigError, FormatError, UndefinedMetricError
from .phantom import PhantomConfig, generate_split
from .scalespace import (
    DEFAULT_HIT_RADIUS_MM,
    CandidateSet,
    LoGParams,
    OptimizeGrid,
    detect_candidates,
    optimize_log_params,
    sensitivity,
)
from .surrogate import (
    SurrogateModel,
    SurrogateSpec,
    ThresholdSelection,
    build_surrogate_net,
    build_training_targets,
    extract_candidates_from_response,
    predict_response,
    select_threshold,
    train_surrogate,
)
from .volume import GroundTruth


@dataclass(frozen=True)
class Detections:
    """Scored detections for one volume, sorted by descending probability."""

    positions_mm: np.ndarray
    probabilities: np.ndarray

    def __post_init__(self):
        pos = np.asarray(self.positions_mm, dtype=np.float64).reshape(-1, 3)
        prob = np.asarray(self.probabilities, dtype=np.float64).reshape(-1)
        if len(pos) != len(prob):
            raise ConfigError("positions and probabilities must have equal length")
        check_finite(pos, "detection positions")
        check_finite(prob, "detection probabilities")
        if np.any((prob < 0) | (prob > 1)):
            raise ConfigError("probabilities must lie in [0, 1]")
        if np.any(np.diff(prob) > 0):
            raise ConfigError("detections must be sorted by descending probability")
        pos.flags.writeable = False
        prob.flags.writeable = False
        object.__setattr__(self, "positions_mm", pos)
        object.__setattr__(self, "probabilities", prob)

    @staticmethod
    def from_scored(positions_mm: np.ndarray, probabilities: np.ndarray) -> "Detections":
        """Build from unsorted arrays; ties keep the original relative order."""
        pos = np.asarray(positions_mm, dtype=np.float64).reshape(-1, 3)
        prob = np.asarray(probabilities, dtype=np.float64).reshape(-1)
        order = np.argsort(-prob, kind="stable")
        return Detections(pos[order], prob[order])

    def __len__(self) -> int:
        return len(self.probabilities)

    def to_csv(self) -> str:
        lines = ["x_mm,y_mm,z_mm,probability"]
        for (x, y, z), p in zip(self.positions_mm, self.probabilities):
            lines.append(f"{float(x)!r},{float(y)!r},{float(z)!r},{float(p)!r}")
        return "\n".join(lines) + "\n"

    @staticmethod
    def from_csv(text: str) -> "Detections":
        lines = [ln for ln in text.splitlines() if ln.strip()]
        if not lines or lines[0].strip() != "x_mm,y_mm,z_mm,probability":
            raise FormatError(
                "detections CSV must start with header x_mm,y_mm,z_mm,probability")
        rows = []
        for ln in lines[1:]:
            parts = ln.split(",")
            if len(parts) != 4:
                raise FormatError(f"detections CSV row must have 4 fields: {ln!r}")
            try:
                rows.append([float(p) for p in parts])
            except ValueError as exc:
                raise FormatError(f"detections CSV has non-numeric field: {ln!r}") from exc
        if not rows:
            return Detections(np.zeros((0, 3)), np.zeros(0))
        arr = np.array(rows, dtype=np.float64)
        return Detections(arr[:, :3], arr[:, 3])


def save_detections(d: Detections, path: str | Path) -> None:
    Path(path).write_text(d.to_csv())


def load_detections(path: str | Path) -> Detections:
    return Detections.from_csv(Path(path).read_text())


@dataclass(frozen=True)
class MatchResult:
    """Greedy matching outcome: per-detection lesion index (-1 for FP)."""

    matched_lesion: np.ndarray
    n_truth: int

    @property
    def n_true_positives(self) -> int:
        return int(np.sum(self.matched_lesion >= 0))

    @property
    def n_false_positives(self) -> int:
        return int(np.sum(self.matched_lesion < 0))


def match_detections(
    detections: Detections,
    truth: GroundTruth,
    hit_radius_mm: float = DEFAULT_HIT_RADIUS_MM,
) -> MatchResult:
    """Greedy matching by descending probability against unclaimed lesions."""
    check_positive(hit_radius_mm, "hit_radius_mm")
    centers = truth.centers()
    matched = np.full(len(detections), -1, dtype=np.int64)
    claimed = np.zeros(len(centers), dtype=bool)
    for di in range(len(detections)):
        if len(centers) == 0:
            break
        d = np.sqrt(np.sum((centers - detections.positions_mm[di]) ** 2, axis=1))
        d[claimed] = np.inf
        best = int(np.argmin(d))
        if d[best] <= hit_radius_mm:
            matched[di] = best
            claimed[best] = True
    return MatchResult(matched_lesion=matched, n_truth=len(truth))


@dataclass(frozen=True)
class FrocPoint:
    threshold: float
    sensitivity: float
    afp: float  # mean false positives per volume


@dataclass(frozen=True)
class FrocCurve:
    """Operating points sorted by ascending sensitivity (descending threshold)."""

    points: tuple[FrocPoint, ...]

    def __iter__(self) -> Iterator[FrocPoint]:
        return iter(self.points)

    def __len__(self) -> int:
        return len(self.points)

    def to_csv(self) -> str:
        lines = ["threshold,sensitivity,afp"]
        for p in self.points:
            lines.append(f"{float(p.threshold)!r},{float(p.sensitivity)!r},{float(p.afp)!r}")
        return "\n".join(lines) + "\n"

    @staticmethod
    def from_csv(text: str) -> "FrocCurve":
        lines = [ln for ln in text.splitlines() if ln.strip()]
        if not lines or lines[0].strip() != "threshold,sensitivity,afp":
            raise FormatError("FROC CSV must start with header threshold,sensitivity,afp")
        pts = []
        for ln in lines[1:]:
            parts = ln.split(",")
            if len(parts) != 3:
                raise FormatError(f"FROC CSV row must have 3 fields: {ln!r}")
            try:
                pts.append(FrocPoint(*(float(p) for p in parts)))
            except ValueError as exc:
                raise FormatError(f"FROC CSV has non-numeric field: {ln!r}") from exc
        return FrocCurve(points=tuple(pts))


def froc(
    detections_list: Sequence[Detections],
    truths: Sequence[GroundTruth],
    hit_radius_mm: float = DEFAULT_HIT_RADIUS_MM,
) -> FrocCurve:
    """Pooled FROC over a set of volumes.

    The threshold sweep visits every distinct detection probability from
    high to low; at each threshold, detections with probability >= the
    threshold are matched per volume, lesion hits are pooled over all
    volumes, and false positives are averaged per volume.

    Raises
    ------
    UndefinedMetricError
        If the pooled ground truth has no lesions.
    """
    if len(detections_list) != len(truths) or not detections_list:
        raise ConfigError("need equal, non-empty detection and truth lists")
    n_lesions = sum(len(t) for t in truths)
    if n_lesions == 0:
        raise UndefinedMetricError("FROC is undefined with no lesions")
    all_probs = np.concatenate([d.probabilities for d in detections_list])
    thresholds = np.unique(all_probs)[::-1]
    points = []
    for thr in thresholds:
        tp = 0
        fp = 0
        for dets, truth in zip(detections_list, truths):
            keep = dets.probabilities >= thr
            sub = Detections(dets.positions_mm[keep], dets.probabilities[keep])
            m = match_detections(sub, truth, hit_radius_mm)
            tp += m.n_true_positives
            fp += m.n_false_positives
        points.append(FrocPoint(
            threshold=float(thr),
            sensitivity=tp / n_lesions,
            afp=fp / len(detections_list)))
    return FrocCurve(points=tuple(points))


def operating_point(curve: FrocCurve, target_sensitivity: float = 0.9) -> FrocPoint:
    """The curve point nearest the target sensitivity (ties: lower AFP, then higher threshold)."""
    if len(curve) == 0:
        raise UndefinedMetricError("empty FROC curve has no operating point")
    if not (0.0 < target_sensitivity <= 1.0):
        raise ConfigError("target_sensitivity must lie in (0, 1]")
    return min(
        curve.points,
        key=lambda p: (abs(p.sensitivity - target_sensitivity), p.afp, -p.threshold))


def dice_coefficient(a: np.ndarray, b: np.ndarray) -> float:
    """Overlap of two binary masks: ``2|a&b| / (|a|+|b|)``; two empty masks give 1."""
    a = np.asarray(a, dtype=bool)
    b = np.asarray(b, dtype=bool)
    if a.shape != b.shape:
        raise ConfigError(f"mask shapes differ: {a.shape} vs {b.shape}")
    total = int(a.sum()) + int(b.sum())
    if total == 0:
        return 1.0
    return 2.0 * int(np.logical_and(a, b).sum()) / total


@dataclass(frozen=True)
class ExperimentConfig:
    """Everything needed to run the two-pipeline comparison end to end."""

    phantom: PhantomConfig = PhantomConfig()
    n_train: int = 8
    n_test: int = 4
    seed: int = 0
    min_sensitivity: float = 0.9
    hit_radius_mm: float = DEFAULT_HIT_RADIUS_MM
    log_grid: OptimizeGrid = OptimizeGrid()
    max_candidates: int = 100000
    kernel_size: int = 3
    hidden_channels: int = 3
    candidate_value: float = 0.001
    smooth_sigma_mm: float = 1.0
    surrogate_epochs: int = 120
    surrogate_lr: float = 0.002
    surrogate_augment: bool = True
    tau_grid_size: int = 256
    crop: CropSpec = CropSpec()
    crop_aug: CropAugmentation = CropAugmentation()
    classifier_iterations: int = 400
    classifier_pairs: int = 16
    classifier_lr: float = 5e-5
    negative_min_mm: float = 2.0


def _candidates_to_detections(cands: CandidateSet, probs: np.ndarray) -> Detections:
    return Detections.from_scored(cands.positions_mm, probs)


def run_experiment(config: ExperimentConfig, out_dir: str | Path | None = None) -> dict:
    """Full comparison: filter-bank pipeline vs surrogate pipeline.

    Generates phantoms, fits the LoG parameters on the training split,
    trains the surrogate on LoG-candidate targets, selects its threshold,
    trains one crop classifier (negatives drawn from the surrogate's
    training candidates) shared by both pipelines, and reports candidate
    sensitivities, FROC tables, and operating points on the test split.

    If ``out_dir`` is given, the report (and a partial report on failure)
    is written there as ``report.json``; wall-clock fields live under
    ``timing_s`` so everything else is reproducible bit for bit.
    """
    report: dict = {"seed": config.seed}
    timing: dict[str, float] = {}
    report["timing_s"] = timing
    try:
        t0 = time.perf_counter()
        train, test = generate_split(
            config.phantom, config.n_train, config.n_test, config.seed)
        train_vols = [v for v, _ in train]
        train_truths = [t for _, t in train]
        test_vols = [v for v, _ in test]
        test_truths = [t for _, t in test]
        spacing = config.phantom.spacing_mm
        timing["phantoms"] = time.perf_counter() - t0

        t0 = time.perf_counter()
        opt = optimize_log_params(
            train_vols, train_truths, config.log_grid,
            config.min_sensitivity, config.hit_radius_mm, config.max_candidates)
        timing["optimize_log"] = time.perf_counter() - t0
        report["log_params"] = json.loads(opt.params.to_json())
        report["log_optimization"] = {
            "mean_sensitivity": opt.mean_sensitivity,
            "mean_candidates": opt.mean_candidates,
            "reached_target": opt.reached_target,
        }

        t0 = time.perf_counter()
        log_train_cands = [
            detect_candidates(v, opt.params, config.max_candidates) for v in train_vols]
        log_test_cands = [
            detect_candidates(v, opt.params, config.max_candidates) for v in test_vols]
        timing["log_candidates"] = time.perf_counter() - t0
        report["candidate_stage"] = {
            "log": {
                "train_sensitivity": float(np.mean([
                    sensitivity(c, t, config.hit_radius_mm)
                    for c, t in zip(log_train_cands, train_truths)])),
                "test_sensitivity": float(np.mean([
                    sensitivity(c, t, config.hit_radius_mm)
                    for c, t in zip(log_test_cands, test_truths)])),
                "mean_test_candidates": float(np.mean([
                    len(c) for c in log_test_cands])),
            }
        }

        seeds = np.random.SeedSequence(config.seed).spawn(3)
        t0 = time.perf_counter()
        spec = SurrogateSpec.for_log_params(
            opt.params, spacing, config.kernel_size, config.hidden_channels)
        net = build_surrogate_net(spec)
        net.initialize(np.random.default_rng(seeds[0]))
        targets = build_training_targets(
            train_vols, train_truths, opt.params, config.candidate_value,
            config.smooth_sigma_mm, config.hit_radius_mm, config.max_candidates)
        train_log = train_surrogate(
            net, train_vols, targets, config.surrogate_epochs,
            np.random.default_rng(seeds[1]), config.surrogate_lr,
            config.surrogate_augment)
        timing["train_surrogate"] = time.perf_counter() - t0
        report["surrogate"] = {
            "receptive_field_vox": spec.receptive_field_vox,
            "depth": spec.depth,
            "final_loss": train_log[-1][1],
        }

        t0 = time.perf_counter()
        train_resp = [predict_response(net, v) for v in train_vols]
        sel = select_threshold(
            train_resp, train_truths, spacing, config.min_sensitivity,
            config.hit_radius_mm, config.tau_grid_size)
        model = SurrogateModel(
            network=net, spec=spec, tau=sel.tau,
            candidate_value=config.candidate_value,
            smooth_sigma_mm=config.smooth_sigma_mm)
        sur_train_cands = [
            extract_candidates_from_response(r, spacing, sel.tau, config.max_candidates)
            for r in train_resp]
        sur_test_cands = [model.detect(v, config.max_candidates) for v in test_vols]
        timing["surrogate_candidates"] = time.perf_counter() - t0
        report["surrogate"].update({
            "tau": sel.tau,
            "tau_reached_target": sel.reached_target,
            "train_sensitivity_at_tau": sel.mean_sensitivity,
            "mean_voxels_above_tau": sel.mean_voxels_above,
            "mean_components_above_tau": sel.mean_components_above,
        })
        report["candidate_stage"]["surrogate"] = {
            "train_sensitivity": float(np.mean([
                sensitivity(c, t, config.hit_radius_mm)
                for c, t in zip(sur_train_cands, train_truths)])),
            "test_sensitivity": float(np.mean([
                sensitivity(c, t, config.hit_radius_mm)
                for c, t in zip(sur_test_cands, test_truths)])),
            "mean_test_candidates": float(np.mean([
                len(c) for c in sur_test_cands])),
        }

        t0 = time.perf_counter()
        crop_vox = config.crop.crop_vox(spacing)
        clf = build_classifier_net(config.crop, crop_vox)
        clf_rng = np.random.default_rng(seeds[2])
        clf.initialize(clf_rng)
        train_classifier(
            clf, train_vols, train_truths, sur_train_cands,
            config.classifier_iterations, config.classifier_pairs, clf_rng,
            config.classifier_lr, config.crop, config.crop_aug,
            config.negative_min_mm)
        timing["train_classifier"] = time.perf_counter() - t0

        t0 = time.perf_counter()
        pipelines = {"log": log_test_cands, "surrogate": sur_test_cands}
        report["froc"] = {}
        report["operating_points"] = {}
        for name, cand_sets in pipelines.items():
            dets = []
            for v, cands in zip(test_vols, cand_sets):
                probs = classify_candidates(clf, v, cands, config.crop)
                dets.append(_candidates_to_detections(cands, probs))
            curve = froc(dets, test_truths, config.hit_radius_mm)
            op = operating_point(curve, 0.9)
            report["froc"][name] = curve.to_csv()
            report["operating_points"][name] = {
                "threshold": op.threshold,
                "sensitivity": op.sensitivity,
                "afp": op.afp,
            }
        timing["classify_and_froc"] = time.perf_counter() - t0
        return report
    except BaseException as exc:
        report["error"] = f"{type(exc).__name__}: {exc}"
        raise
    finally:
        if out_dir is not None:
            out = Path(out_dir)
            out.mkdir(parents=True, exist_ok=True)
            (out / "report.json").write_text(report_to_json(report))


def report_to_json(report: dict) -> str:
    """Canonical JSON for reports: sorted keys, stable float formatting."""
    return json.dumps(report, indent=2, sort_keys=True)


def strip_timing(report: dict) -> dict:
    """A copy of a report without wall-clock fields (for determinism comparisons)."""
    return {k: v for k, v in report.items() if k != "timing_s"}


def sweep_candidate_values(
    config: ExperimentConfig,
    candidate_values: Sequence[float],
    voxel_budget: float,
) -> dict:
    """Retrain the surrogate for each target value ``c`` and compare sensitivities.

    All runs share the same phantoms, LoG parameters, and initial weights;
    only the training target changes.  Sensitivity is evaluated on the
    test split at the threshold whose mean voxel count is closest to
    ``voxel_budget``, so the comparison happens at a fixed candidate
    budget rather than at each run's own operating point.
    """
    if not candidate_values:
        raise ConfigError("need at least one candidate value")
    check_positive(voxel_budget, "voxel_budget")
    train, test = generate_split(
        config.phantom, config.n_train, config.n_test, config.seed)
    train_vols = [v for v, _ in train]
    train_truths = [t for _, t in train]
    test_vols = [v for v, _ in test]
    test_truths = [t for _, t in test]
    spacing = config.phantom.spacing_mm

    opt = optimize_log_params(
        train_vols, train_truths, config.log_grid,
        config.min_sensitivity, config.hit_radius_mm, config.max_candidates)
    spec = SurrogateSpec.for_log_params(
        opt.params, spacing, config.kernel_size, config.hidden_channels)
    seeds = np.random.SeedSequence(config.seed).spawn(2)

    rows = []
    for c in candidate_values:
        net = build_surrogate_net(spec)
        net.initialize(np.random.default_rng(seeds[0]))
        targets = build_training_targets(
            train_vols, train_truths, opt.params, c,
            config.smooth_sigma_mm, config.hit_radius_mm, config.max_candidates)
        train_surrogate(
            net, train_vols, targets, config.surrogate_epochs,
            np.random.default_rng(seeds[1]), config.surrogate_lr,
            config.surrogate_augment)
        test_resp = [predict_response(net, v) for v in test_vols]
        sel = select_threshold(
            test_resp, test_truths, spacing, config.min_sensitivity,
            config.hit_radius_mm, config.tau_grid_size, voxel_budget)
        sens_at_budget = float(np.mean([
            sensitivity(
                extract_candidates_from_response(
                    r, spacing, sel.budget_tau, config.max_candidates),
                t, config.hit_radius_mm)
            for r, t in zip(test_resp, test_truths)]))
        rows.append({
            "candidate_value": float(c),
            "budget_tau": sel.budget_tau,
            "mean_voxels_at_budget": sel.budget_mean_voxels,
            "test_sensitivity_at_budget": sens_at_budget,
        })
    return {
        "seed": config.seed,
        "voxel_budget": float(voxel_budget),
        "log_params": json.loads(opt.params.to_json()),
        "rows": rows,
    }
