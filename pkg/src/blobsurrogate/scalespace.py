"""Scale-normalized Laplacian-of-Gaussian blob candidates.

A candidate is a strict local maximum of the scale-normalized LoG
response, taken jointly over the 26 spatial neighbours and the same voxel
at adjacent scales, that exceeds a response threshold.  Responses are
sign-flipped so bright blobs on a dark background give positive maxima.

The Gaussian uses a sampled, renormalized kernel with radius
``ceil(sqrt(3) * sigma / spacing)`` taps on each side and reflecting
borders.  The Laplacian is the 6-neighbour finite difference, also with
reflecting borders, and scale normalization multiplies by ``sigma**2``
(sigma expressed in voxels, which folds in the spacing).
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np
from scipy import ndimage

from ._validation import check_finite, check_positive
from .errors import (
    ConfigError,
    FormatError,
    KernelTooLargeError,
    UndefinedMetricError,
)
from .volume import GroundTruth, Point3, Volume3D

DEFAULT_HIT_RADIUS_MM = 1.5


def radius_for_sigma(sigma_mm: float, spacing_mm: float) -> int:
    """Kernel radius in voxels for a Gaussian of width ``sigma_mm``.

    The rule is ``ceil(sqrt(3) * sigma / spacing)`` taps on each side of
    the centre, so e.g. sigma 4 mm on a 1 mm grid uses radius 7 and sigma
    1 mm uses radius 2.
    """
    check_positive(sigma_mm, "sigma_mm")
    check_positive(spacing_mm, "spacing_mm")
    return int(math.ceil(math.sqrt(3.0) * sigma_mm / spacing_mm))


def gaussian_kernel_1d(sigma_mm: float, spacing_mm: float) -> np.ndarray:
    """Sampled Gaussian taps at ``radius_for_sigma`` offsets, renormalized to sum 1."""
    r = radius_for_sigma(sigma_mm, spacing_mm)
    sigma_vox = sigma_mm / spacing_mm
    i = np.arange(-r, r + 1, dtype=np.float64)
    k = np.exp(-(i * i) / (2.0 * sigma_vox * sigma_vox))
    return (k / k.sum()).astype(np.float32)


def smooth_array(data: np.ndarray, spacing_mm: float, sigma_mm: float) -> np.ndarray:
    """Separable Gaussian smoothing of a raw ``(nz, ny, nx)`` array, reflecting borders.

    Raises
    ------
    KernelTooLargeError
        If the kernel radius reaches or exceeds the grid size on any axis.
    """
    r = radius_for_sigma(sigma_mm, spacing_mm)
    if r >= min(data.shape):
        raise KernelTooLargeError(
            f"kernel radius {r} does not fit volume of shape {data.shape}"
        )
    kernel = gaussian_kernel_1d(sigma_mm, spacing_mm)
    out = data
    for axis in range(3):
        out = ndimage.correlate1d(out, kernel, axis=axis, mode="reflect")
    return out


def gaussian_filter_3d(volume: Volume3D, sigma_mm: float) -> np.ndarray:
    """Separable Gaussian smoothing of a volume with reflecting borders."""
    return smooth_array(volume.data, volume.spacing_mm, sigma_mm)


def log_response(volume: Volume3D, sigma_mm: float) -> np.ndarray:
    """Scale-normalized, sign-flipped LoG response at one scale.

    Bright blobs of diameter comparable to ``sigma_mm`` produce positive
    local maxima whose height is invariant to blob size (up to
    discretization), which is what makes responses comparable across
    scales.
    """
    smoothed = gaussian_filter_3d(volume, sigma_mm)
    lap = np.full_like(smoothed, -6.0) * smoothed
    for axis in range(3):
        # reflecting border: the out-of-range neighbour equals the edge voxel
        fwd = np.concatenate(
            [np.take(smoothed, range(1, smoothed.shape[axis]), axis=axis),
             np.take(smoothed, [-1], axis=axis)], axis=axis)
        bwd = np.concatenate(
            [np.take(smoothed, [0], axis=axis),
             np.take(smoothed, range(0, smoothed.shape[axis] - 1), axis=axis)],
            axis=axis)
        lap += fwd + bwd
    sigma_vox = sigma_mm / volume.spacing_mm
    return -(sigma_vox * sigma_vox) * lap


@dataclass(frozen=True)
class LoGParams:
    """Scale range, scale step, and response threshold for candidate detection."""

    sigma_min_mm: float
    sigma_max_mm: float
    sigma_step_mm: float
    response_threshold: float

    def __post_init__(self):
        check_positive(self.sigma_min_mm, "sigma_min_mm")
        check_positive(self.sigma_max_mm, "sigma_max_mm")
        check_positive(self.sigma_step_mm, "sigma_step_mm")
        if self.sigma_min_mm > self.sigma_max_mm:
            raise ConfigError("sigma_min_mm must not exceed sigma_max_mm")
        if not np.isfinite(self.response_threshold) or self.response_threshold < 0:
            raise ConfigError("response_threshold must be finite and non-negative")

    def scales(self) -> tuple[float, ...]:
        """The scale ladder ``sigma_min, sigma_min + step, ... <= sigma_max``."""
        out = []
        i = 0
        while True:
            s = self.sigma_min_mm + i * self.sigma_step_mm
            if s > self.sigma_max_mm + 1e-9:
                break
            out.append(float(s))
            i += 1
        return tuple(out)

    def to_json(self) -> str:
        return json.dumps(
            {
                "sigma_min_mm": self.sigma_min_mm,
                "sigma_max_mm": self.sigma_max_mm,
                "sigma_step_mm": self.sigma_step_mm,
                "response_threshold": self.response_threshold,
            },
            indent=2, sort_keys=True)

    @staticmethod
    def from_json(text: str) -> "LoGParams":
        try:
            d = json.loads(text)
            return LoGParams(
                sigma_min_mm=float(d["sigma_min_mm"]),
                sigma_max_mm=float(d["sigma_max_mm"]),
                sigma_step_mm=float(d["sigma_step_mm"]),
                response_threshold=float(d["response_threshold"]),
            )
        except (KeyError, TypeError, ValueError, json.JSONDecodeError) as exc:
            raise FormatError(f"malformed LoG params JSON: {exc}") from exc


def save_log_params(params: LoGParams, path: str | Path) -> None:
    Path(path).write_text(params.to_json())


def load_log_params(path: str | Path) -> LoGParams:
    return LoGParams.from_json(Path(path).read_text())


@dataclass(frozen=True)
class CandidateSet:
    """Detected candidate points with scores, sorted by descending score.

    ``positions_mm`` has shape ``(n, 3)`` with columns ``(x, y, z)``;
    ``sigmas_mm`` records the scale at which each maximum occurred (NaN
    when the producer does not track scales).
    """

    positions_mm: np.ndarray
    scores: np.ndarray
    sigmas_mm: np.ndarray

    def __post_init__(self):
        pos = np.asarray(self.positions_mm, dtype=np.float64).reshape(-1, 3)
        sc = np.asarray(self.scores, dtype=np.float64).reshape(-1)
        sg = np.asarray(self.sigmas_mm, dtype=np.float64).reshape(-1)
        if not (len(pos) == len(sc) == len(sg)):
            raise ConfigError("positions, scores, and sigmas must have equal length")
        check_finite(pos, "candidate positions")
        check_finite(sc, "candidate scores")
        if np.any(np.diff(sc) > 0):
            raise ConfigError("candidate scores must be sorted in descending order")
        for arr in (pos, sc, sg):
            arr.flags.writeable = False
        object.__setattr__(self, "positions_mm", pos)
        object.__setattr__(self, "scores", sc)
        object.__setattr__(self, "sigmas_mm", sg)

    @staticmethod
    def empty() -> "CandidateSet":
        return CandidateSet(np.zeros((0, 3)), np.zeros(0), np.zeros(0))

    def __len__(self) -> int:
        return len(self.scores)

    def __iter__(self) -> Iterator[tuple[Point3, float]]:
        for p, s in zip(self.positions_mm, self.scores):
            yield Point3(*map(float, p)), float(s)

    def to_csv(self) -> str:
        lines = ["x_mm,y_mm,z_mm,score"]
        for (x, y, z), s in zip(self.positions_mm, self.scores):
            # repr of Python floats round-trips exactly
            lines.append(f"{float(x)!r},{float(y)!r},{float(z)!r},{float(s)!r}")
        return "\n".join(lines) + "\n"

    @staticmethod
    def from_csv(text: str) -> "CandidateSet":
        lines = [ln for ln in text.splitlines() if ln.strip()]
        if not lines or lines[0].strip() != "x_mm,y_mm,z_mm,score":
            raise FormatError("candidate CSV must start with header x_mm,y_mm,z_mm,score")
        rows = []
        for ln in lines[1:]:
            parts = ln.split(",")
            if len(parts) != 4:
                raise FormatError(f"candidate CSV row must have 4 fields: {ln!r}")
            try:
                rows.append([float(p) for p in parts])
            except ValueError as exc:
                raise FormatError(f"candidate CSV has non-numeric field: {ln!r}") from exc
        if not rows:
            return CandidateSet.empty()
        arr = np.array(rows, dtype=np.float64)
        if np.any(np.diff(arr[:, 3]) > 0):
            raise FormatError("candidate CSV rows must be sorted by descending score")
        return CandidateSet(arr[:, :3], arr[:, 3], np.full(len(arr), np.nan))


def save_candidates(cands: CandidateSet, path: str | Path) -> None:
    Path(path).write_text(cands.to_csv())


def load_candidates(path: str | Path) -> CandidateSet:
    return CandidateSet.from_csv(Path(path).read_text())


# offsets of the 26 spatial neighbours, and which of them precede the
# centre in lexicographic (z, y, x) order (those win score ties)
_NEIGHBOR_OFFSETS = np.array(
    [(dz, dy, dx)
     for dz in (-1, 0, 1) for dy in (-1, 0, 1) for dx in (-1, 0, 1)
     if (dz, dy, dx) != (0, 0, 0)],
    dtype=np.int64)
_NEIGHBOR_LEX_SMALLER = np.array(
    [tuple(o) < (0, 0, 0) for o in _NEIGHBOR_OFFSETS], dtype=bool)


def _spatial_max_filter(response: np.ndarray) -> np.ndarray:
    """Max over the 3x3x3 neighbourhood; missing voxels beyond borders count as -inf."""
    return ndimage.maximum_filter(
        response, size=3, mode="constant", cval=-np.inf)


def _stack_maxima(
    responses: Sequence[np.ndarray],
    neighbor_maxes: Sequence[np.ndarray],
    threshold: float,
) -> tuple[np.ndarray, np.ndarray]:
    """Strict joint local maxima of a scale stack above a threshold.

    Returns ``(indices, scores)`` where ``indices`` has rows
    ``(scale_index, z, y, x)``.  Strictness uses a deterministic
    tie-break: among equal-valued spatial neighbours the lexicographically
    smallest ``(z, y, x)`` wins, and at equal response across adjacent
    scales the smaller scale wins.
    """
    n_scales = len(responses)
    hit_idx: list[np.ndarray] = []
    hit_score: list[np.ndarray] = []
    for s in range(n_scales):
        r = responses[s]
        mask = (r > threshold) & (r >= neighbor_maxes[s])
        if s > 0:
            mask &= r >= responses[s - 1]
        if s + 1 < n_scales:
            mask &= r >= responses[s + 1]
        if not mask.any():
            continue
        idx = np.argwhere(mask)
        vals = r[mask]
        keep = np.ones(len(idx), dtype=bool)
        shape = np.array(r.shape, dtype=np.int64)
        for off, lex_smaller in zip(_NEIGHBOR_OFFSETS, _NEIGHBOR_LEX_SMALLER):
            nb = idx + off
            valid = np.all((nb >= 0) & (nb < shape), axis=1)
            nbc = np.clip(nb, 0, shape - 1)
            nv = r[nbc[:, 0], nbc[:, 1], nbc[:, 2]]
            worse = valid & (nv > vals)
            if lex_smaller:
                worse |= valid & (nv == vals)
            keep &= ~worse
        if s > 0:
            prev = responses[s - 1][idx[:, 0], idx[:, 1], idx[:, 2]]
            keep &= prev < vals  # equal response at the smaller scale wins there
        if s + 1 < n_scales:
            nxt = responses[s + 1][idx[:, 0], idx[:, 1], idx[:, 2]]
            keep &= nxt <= vals
        if keep.any():
            rows = np.concatenate(
                [np.full((int(keep.sum()), 1), s, dtype=np.int64), idx[keep]], axis=1)
            hit_idx.append(rows)
            hit_score.append(vals[keep])
    if not hit_idx:
        return np.zeros((0, 4), dtype=np.int64), np.zeros(0)
    indices = np.concatenate(hit_idx)
    scores = np.concatenate(hit_score)
    order = np.lexsort(
        (indices[:, 0], indices[:, 3], indices[:, 2], indices[:, 1], -scores))
    return indices[order], scores[order]


def detect_candidates(
    volume: Volume3D,
    params: LoGParams,
    max_candidates: int = 100000,
) -> CandidateSet:
    """Blob candidates: thresholded strict maxima of the LoG scale stack.

    Parameters
    ----------
    volume : Volume3D
        Input intensities.
    params : LoGParams
        Scale ladder and response threshold.
    max_candidates : int
        Keep at most this many candidates, by descending score.

    Returns
    -------
    CandidateSet
        Positions at voxel centres in mm, scores equal to the response at
        the maximum, and the scale at which each maximum occurred.
    """
    if max_candidates < 1:
        raise ConfigError("max_candidates must be at least 1")
    scales = params.scales()
    responses = [log_response(volume, s) for s in scales]
    neighbor_maxes = [_spatial_max_filter(r) for r in responses]
    indices, scores = _stack_maxima(responses, neighbor_maxes, params.response_threshold)
    indices = indices[:max_candidates]
    scores = scores[:max_candidates]
    spacing = volume.spacing_mm
    positions = indices[:, [3, 2, 1]].astype(np.float64) * spacing
    sigmas = np.array([scales[i] for i in indices[:, 0]], dtype=np.float64)
    return CandidateSet(positions_mm=positions, scores=scores, sigmas_mm=sigmas)


def sensitivity(
    candidates: CandidateSet | np.ndarray,
    truth: GroundTruth,
    hit_radius_mm: float = DEFAULT_HIT_RADIUS_MM,
) -> float:
    """Fraction of lesions with at least one candidate within the hit radius.

    Raises
    ------
    UndefinedMetricError
        If the ground truth contains no lesions.
    """
    if len(truth) == 0:
        raise UndefinedMetricError("sensitivity is undefined with no lesions")
    check_positive(hit_radius_mm, "hit_radius_mm")
    pos = candidates.positions_mm if isinstance(candidates, CandidateSet) else np.asarray(candidates)
    pos = pos.reshape(-1, 3)
    if len(pos) == 0:
        return 0.0
    centers = truth.centers()
    d2 = np.sum((centers[:, None, :] - pos[None, :, :]) ** 2, axis=2)
    hit = np.sqrt(d2.min(axis=1)) <= hit_radius_mm
    return float(hit.sum() / len(truth))


@dataclass(frozen=True)
class OptimizeGrid:
    """Search grid for the LoG parameter optimization.

    ``sigma_values_mm`` is the ladder from which contiguous
    ``(sigma_min, sigma_max)`` ranges are drawn; ``thresholds`` is the set
    of response thresholds tried for each range.
    """

    sigma_values_mm: tuple[float, ...] = (1.0, 2.0, 3.0, 4.0, 5.0, 6.0)
    sigma_step_mm: float = 1.0
    thresholds: tuple[float, ...] = (0.02, 0.05, 0.1, 0.15, 0.2, 0.3)

    def __post_init__(self):
        if len(self.sigma_values_mm) == 0 or len(self.thresholds) == 0:
            raise ConfigError("grid must contain at least one sigma and one threshold")
        if list(self.sigma_values_mm) != sorted(set(self.sigma_values_mm)):
            raise ConfigError("sigma_values_mm must be strictly increasing")
        for s in self.sigma_values_mm:
            check_positive(s, "sigma value")
        check_positive(self.sigma_step_mm, "sigma_step_mm")
        for t in self.thresholds:
            if not np.isfinite(t) or t < 0:
                raise ConfigError("thresholds must be finite and non-negative")


@dataclass(frozen=True)
class OptimizeLogResult:
    """Chosen parameters plus the training statistics that selected them."""

    params: LoGParams
    mean_sensitivity: float
    mean_candidates: float
    reached_target: bool


def optimize_log_params(
    volumes: Sequence[Volume3D],
    truths: Sequence[GroundTruth],
    grid: OptimizeGrid = OptimizeGrid(),
    min_sensitivity: float = 0.95,
    hit_radius_mm: float = DEFAULT_HIT_RADIUS_MM,
    max_candidates: int = 100000,
) -> OptimizeLogResult:
    """Exhaustive search for the cheapest LoG configuration that stays sensitive.

    Every contiguous ``(sigma_min, sigma_max)`` range of the grid ladder is
    paired with every threshold; a configuration is eligible when its mean
    sensitivity over the training volumes is at least ``min_sensitivity``.
    Among eligible configurations the one with the smallest mean candidate
    count wins; ties prefer higher sensitivity, then smaller sigma_max,
    then smaller sigma_min, then larger threshold.  If no configuration is
    eligible the most sensitive one is returned with
    ``reached_target=False``.

    The search shares the per-scale response volumes across
    configurations, which is exactly equivalent to running
    :func:`detect_candidates` independently per configuration.
    """
    if len(volumes) == 0 or len(volumes) != len(truths):
        raise ConfigError("need equal, non-empty lists of volumes and truths")
    if not (0.0 < min_sensitivity <= 1.0):
        raise ConfigError("min_sensitivity must lie in (0, 1]")
    sig = grid.sigma_values_mm
    n_sig = len(sig)
    configs = [
        LoGParams(sigma_min_mm=sig[i], sigma_max_mm=sig[j],
                  sigma_step_mm=grid.sigma_step_mm, response_threshold=t)
        for i in range(n_sig) for j in range(i, n_sig)
        for t in grid.thresholds]
    stats: list[list[tuple[float, int]]] = [[] for _ in configs]
    for volume, truth in zip(volumes, truths):
        # responses are cached on the exact scale value each config's ladder
        # produces, so sharing them across configs cannot change any result
        cache: dict[float, tuple[np.ndarray, np.ndarray]] = {}

        def resp_for(s: float) -> tuple[np.ndarray, np.ndarray]:
            if s not in cache:
                r = log_response(volume, s)
                cache[s] = (r, _spatial_max_filter(r))
            return cache[s]

        spacing = volume.spacing_mm
        for ci, params in enumerate(configs):
            pairs = [resp_for(s) for s in params.scales()]
            indices, scores = _stack_maxima(
                [p[0] for p in pairs], [p[1] for p in pairs],
                params.response_threshold)
            indices = indices[:max_candidates]
            pos = indices[:, [3, 2, 1]].astype(np.float64) * spacing
            sens = sensitivity(pos, truth, hit_radius_mm)
            stats[ci].append((sens, len(indices)))
    rows = []
    for params, per_vol in zip(configs, stats):
        mean_sens = float(np.mean([s for s, _ in per_vol]))
        mean_count = float(np.mean([c for _, c in per_vol]))
        rows.append((params, mean_sens, mean_count))
    def order_key(row, primary):
        p, mean_sens, mean_count = row
        return primary(mean_sens, mean_count) + (
            p.sigma_max_mm, p.sigma_min_mm, -p.response_threshold)

    eligible = [r for r in rows if r[1] >= min_sensitivity]
    if eligible:
        best = min(eligible, key=lambda r: order_key(r, lambda s, c: (c, -s)))
        reached = True
    else:
        best = min(rows, key=lambda r: order_key(r, lambda s, c: (-s, c)))
        reached = False
    params, mean_sens, mean_count = best
    return OptimizeLogResult(
        params=params, mean_sensitivity=mean_sens,
        mean_candidates=mean_count, reached_target=reached)
