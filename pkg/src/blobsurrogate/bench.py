"""Wall-clock comparison of the two candidate stages.

Timing uses the monotonic clock, discards warmup runs (which also absorb
JIT compilation), and reports the median of at least three measured
runs.  The timed closures return their outputs so callers can verify
that timing never changes what gets computed.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .errors import ConfigError, FormatError
from .scalespace import CandidateSet, LoGParams, detect_candidates
from .surrogate import SurrogateModel
from .volume import Volume3D


@dataclass(frozen=True)
class StageTiming:
    """Per-run seconds for one stage; the median is the headline number."""

    name: str
    warmup_s: tuple[float, ...]
    runs_s: tuple[float, ...]

    @property
    def median_s(self) -> float:
        return float(np.median(self.runs_s))


def time_stage(fn: Callable[[], object], name: str = "stage",
               warmups: int = 1, runs: int = 5) -> tuple[StageTiming, object]:
    """Run ``fn`` ``warmups + runs`` times; return timing and the last result.

    Raises
    ------
    ConfigError
        If fewer than 3 measured runs are requested (medians of 1 or 2
        runs are too noisy to headline).
    """
    if runs < 3:
        raise ConfigError("need at least 3 measured runs")
    if warmups < 0:
        raise ConfigError("warmups must be non-negative")
    warm = []
    for _ in range(warmups):
        t0 = time.perf_counter()
        fn()
        warm.append(time.perf_counter() - t0)
    measured = []
    result = None
    for _ in range(runs):
        t0 = time.perf_counter()
        result = fn()
        measured.append(time.perf_counter() - t0)
    return StageTiming(name=name, warmup_s=tuple(warm), runs_s=tuple(measured)), result


@dataclass(frozen=True)
class TimingReport:
    """Benchmark outcome: medians per stage and the headline speedup ratio."""

    volume_dims: tuple[int, int, int]
    spacing_mm: float
    n_scales: int
    receptive_field_vox: int
    threads: int
    warmups: int
    runs: int
    log_median_s: float
    surrogate_median_s: float
    speedup_ratio: float  # median(log) / median(surrogate)
    log_runs_s: tuple[float, ...]
    surrogate_runs_s: tuple[float, ...]
    classifier_s: float | None = None

    def to_json(self) -> str:
        d = {
            "volume_dims": list(self.volume_dims),
            "spacing_mm": self.spacing_mm,
            "n_scales": self.n_scales,
            "receptive_field_vox": self.receptive_field_vox,
            "threads": self.threads,
            "warmups": self.warmups,
            "runs": self.runs,
            "log_median_s": self.log_median_s,
            "surrogate_median_s": self.surrogate_median_s,
            "speedup_ratio": self.speedup_ratio,
            "log_runs_s": list(self.log_runs_s),
            "surrogate_runs_s": list(self.surrogate_runs_s),
            "classifier_s": self.classifier_s,
        }
        return json.dumps(d, indent=2, sort_keys=True)

    @staticmethod
    def from_json(text: str) -> "TimingReport":
        try:
            d = json.loads(text)
            return TimingReport(
                volume_dims=tuple(int(v) for v in d["volume_dims"]),
                spacing_mm=float(d["spacing_mm"]),
                n_scales=int(d["n_scales"]),
                receptive_field_vox=int(d["receptive_field_vox"]),
                threads=int(d["threads"]),
                warmups=int(d["warmups"]),
                runs=int(d["runs"]),
                log_median_s=float(d["log_median_s"]),
                surrogate_median_s=float(d["surrogate_median_s"]),
                speedup_ratio=float(d["speedup_ratio"]),
                log_runs_s=tuple(float(v) for v in d["log_runs_s"]),
                surrogate_runs_s=tuple(float(v) for v in d["surrogate_runs_s"]),
                classifier_s=(None if d.get("classifier_s") is None
                              else float(d["classifier_s"])),
            )
        except (KeyError, TypeError, ValueError, json.JSONDecodeError) as exc:
            raise FormatError(f"malformed timing report JSON: {exc}") from exc


def save_timing_report(report: TimingReport, path: str | Path) -> None:
    Path(path).write_text(report.to_json())


def load_timing_report(path: str | Path) -> TimingReport:
    return TimingReport.from_json(Path(path).read_text())


def compare_pipelines(
    volume: Volume3D,
    log_params: LoGParams,
    model: SurrogateModel,
    classifier_fn: Callable[[CandidateSet], object] | None = None,
    warmups: int = 1,
    runs: int = 5,
    threads: int = 1,
    max_candidates: int = 100000,
) -> tuple[TimingReport, CandidateSet, CandidateSet]:
    """Time LoG detection against surrogate detection on the same volume.

    Both stages run on identical inputs under the same thread setting.
    The classifier, when provided, is timed once on the surrogate's
    candidates (it is shared by both pipelines, so it does not affect the
    ratio).  Returns the report and both stages' candidate sets from the
    timed runs so callers can check them against untimed runs.
    """
    log_timing, log_cands = time_stage(
        lambda: detect_candidates(volume, log_params, max_candidates),
        "log", warmups, runs)
    sur_timing, sur_cands = time_stage(
        lambda: model.detect(volume, max_candidates),
        "surrogate", warmups, runs)
    classifier_s = None
    if classifier_fn is not None:
        t0 = time.perf_counter()
        classifier_fn(sur_cands)
        classifier_s = time.perf_counter() - t0
    report = TimingReport(
        volume_dims=volume.dims,
        spacing_mm=volume.spacing_mm,
        n_scales=len(log_params.scales()),
        receptive_field_vox=model.spec.receptive_field_vox,
        threads=threads,
        warmups=warmups,
        runs=runs,
        log_median_s=log_timing.median_s,
        surrogate_median_s=sur_timing.median_s,
        speedup_ratio=log_timing.median_s / sur_timing.median_s,
        log_runs_s=log_timing.runs_s,
        surrogate_runs_s=sur_timing.runs_s,
        classifier_s=classifier_s,
    )
    return report, log_cands, sur_cands
