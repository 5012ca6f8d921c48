"""A convolutional surrogate for the LoG candidate stage.

The idea: a stack of small convolutions whose receptive field covers the
largest LoG kernel can reproduce the candidate map of the whole filter
bank in a single fused pass, which is cheaper than running the bank
scale by scale.  The network is trained to regress a sparse target built
from the LoG candidates (small value ``c``) and the true lesion centres
(value 1), smoothed so gradients reach nearby voxels but peak heights
are preserved.  A threshold ``tau`` on the network output is then chosen
as the largest one that keeps mean lesion sensitivity above a floor.
"""

from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import ndimage

from ._validation import check_odd, check_positive
from .errors import ConfigError, FormatError, TrainingDivergedError
from .nn import Adam, Conv3D, Network, dice_loss, load_network, save_network
from .scalespace import (
    DEFAULT_HIT_RADIUS_MM,
    CandidateSet,
    LoGParams,
    detect_candidates,
    gaussian_kernel_1d,
    radius_for_sigma,
    smooth_array,
)
from .volume import GroundTruth, Volume3D


def conv_receptive_field(kernel_size: int, depth: int) -> int:
    """Receptive field of ``depth`` stacked stride-1 convolutions of size ``kernel_size``."""
    check_odd(kernel_size, "kernel_size")
    if depth < 1:
        raise ConfigError("depth must be at least 1")
    return kernel_size + (depth - 1) * (kernel_size - 1)


def depth_for_receptive_field(receptive_field: int, kernel_size: int = 3) -> int:
    """Number of stacked convolutions needed for an exact receptive field.

    Raises
    ------
    ConfigError
        If no integer depth gives exactly ``receptive_field``.
    """
    check_odd(kernel_size, "kernel_size")
    if kernel_size < 3:
        raise ConfigError("kernel_size must be at least 3 to grow a receptive field")
    if receptive_field < kernel_size:
        raise ConfigError(
            f"receptive field {receptive_field} smaller than kernel {kernel_size}")
    num = receptive_field - kernel_size
    if num % (kernel_size - 1) != 0:
        raise ConfigError(
            f"receptive field {receptive_field} is not reachable with kernel "
            f"{kernel_size}; nearest admissible values differ by {kernel_size - 1}")
    return 1 + num // (kernel_size - 1)


def receptive_field_for_log(params: LoGParams, spacing_mm: float,
                            kernel_size: int = 3) -> int:
    """Smallest admissible receptive field covering the largest LoG kernel.

    The largest Gaussian uses ``2 * radius + 1`` taps; the result is that
    span rounded up to the next value an integer conv depth can reach.
    """
    check_odd(kernel_size, "kernel_size")
    rf = 2 * radius_for_sigma(params.sigma_max_mm, spacing_mm) + 1
    rf = max(rf, kernel_size)
    while (rf - kernel_size) % (kernel_size - 1) != 0:
        rf += 1
    return rf


@dataclass(frozen=True)
class SurrogateSpec:
    """Architecture of the surrogate: receptive field, kernel, hidden width."""

    receptive_field_vox: int
    kernel_size: int = 3
    hidden_channels: int = 3

    def __post_init__(self):
        check_odd(self.kernel_size, "kernel_size")
        if self.hidden_channels < 1:
            raise ConfigError("hidden_channels must be positive")
        # validates admissibility
        depth_for_receptive_field(self.receptive_field_vox, self.kernel_size)

    @property
    def depth(self) -> int:
        return depth_for_receptive_field(self.receptive_field_vox, self.kernel_size)

    @staticmethod
    def for_log_params(params: LoGParams, spacing_mm: float,
                       kernel_size: int = 3, hidden_channels: int = 3) -> "SurrogateSpec":
        rf = receptive_field_for_log(params, spacing_mm, kernel_size)
        return SurrogateSpec(receptive_field_vox=rf, kernel_size=kernel_size,
                             hidden_channels=hidden_channels)


def build_surrogate_net(spec: SurrogateSpec) -> Network:
    """The conv stack: 1 -> hidden (ReLU) ... hidden -> 1 (sigmoid), all stride 1.

    Depth follows from the receptive field, so the output voxel at any
    position sees exactly the same input window the largest LoG kernel
    would.  Weights start at zero; call ``Network.initialize``.
    """
    depth = spec.depth
    if depth < 2:
        raise ConfigError("surrogate needs depth >= 2 (hidden plus output)")
    h, k = spec.hidden_channels, spec.kernel_size
    layers = [Conv3D(1, h, k, activation="relu")]
    layers += [Conv3D(h, h, k, activation="relu") for _ in range(depth - 2)]
    layers.append(Conv3D(h, 1, k, activation="sigmoid"))
    return Network(layers)


def build_target(
    volume: Volume3D,
    candidates: CandidateSet,
    truth: GroundTruth,
    candidate_value: float = 0.001,
    hit_radius_mm: float = DEFAULT_HIT_RADIUS_MM,
) -> np.ndarray:
    """Sparse regression target: ``c`` at decoy candidates, 1 at lesion centres.

    A candidate voxel gets ``candidate_value`` only if the candidate lies
    farther than ``hit_radius_mm`` from every lesion centre; candidates
    inside that radius are absorbed by the lesion's own peak.  Each lesion
    contributes exactly one voxel of value 1 (the voxel nearest its
    centre), which takes precedence over any candidate marking.
    """
    if not (0.0 < candidate_value <= 1.0):
        raise ConfigError("candidate_value must lie in (0, 1]")
    check_positive(hit_radius_mm, "hit_radius_mm")
    q = np.zeros_like(volume.data)
    centers = truth.centers()
    for pos in candidates.positions_mm:
        if len(centers) > 0:
            d = np.sqrt(np.sum((centers - pos[None, :]) ** 2, axis=1)).min()
            if d <= hit_radius_mm:
                continue
        ix, iy, iz = volume.voxel_of(pos)
        q[iz, iy, ix] = candidate_value
    for lesion in truth.lesions:
        ix, iy, iz = volume.voxel_of(lesion.center)
        q[iz, iy, ix] = 1.0
    return q


def smooth_target(q: np.ndarray, spacing_mm: float, sigma_mm: float = 1.0) -> np.ndarray:
    """Peak-preserving Gaussian spread of a sparse target.

    The blur is divided by the kernel's centre weight so an isolated peak
    keeps its height, then the original nonzero voxels are reassigned
    their exact values (overlapping halos would otherwise inflate them)
    and the result is clipped to [0, 1].
    """
    check_positive(sigma_mm, "sigma_mm")
    kernel = gaussian_kernel_1d(sigma_mm, spacing_mm)
    center_weight = float(kernel[len(kernel) // 2]) ** 3
    r = smooth_array(q.astype(np.float32), spacing_mm, sigma_mm) / center_weight
    nonzero = q > 0
    r[nonzero] = q[nonzero]
    return np.clip(r, 0.0, 1.0)


def build_training_targets(
    volumes: Sequence[Volume3D],
    truths: Sequence[GroundTruth],
    log_params: LoGParams,
    candidate_value: float = 0.001,
    smooth_sigma_mm: float = 1.0,
    hit_radius_mm: float = DEFAULT_HIT_RADIUS_MM,
    max_candidates: int = 100000,
) -> list[np.ndarray]:
    """LoG-candidate targets for every training volume, already smoothed."""
    targets = []
    for volume, truth in zip(volumes, truths):
        cands = detect_candidates(volume, log_params, max_candidates)
        q = build_target(volume, cands, truth, candidate_value, hit_radius_mm)
        targets.append(smooth_target(q, volume.spacing_mm, smooth_sigma_mm))
    return targets


def _augment_pair(
    x: np.ndarray, t: np.ndarray, rng: np.random.Generator, max_shift_vox: int = 2,
) -> tuple[np.ndarray, np.ndarray]:
    """Exact grid augmentations applied identically to volume and target.

    Integer shifts (zero fill), a 90-degree rotation in the (y, x) plane,
    and per-axis flips: these keep the sparse peaks exactly on voxels.
    """
    shifts = rng.integers(-max_shift_vox, max_shift_vox + 1, size=3)
    quarter_turns = int(rng.integers(0, 4))
    flips = rng.integers(0, 2, size=3).astype(bool)

    def apply(a: np.ndarray) -> np.ndarray:
        out = a
        for axis, s in enumerate(shifts):
            if s != 0:
                shifted = np.zeros_like(out)
                src = slice(None, out.shape[axis] - s) if s > 0 else slice(-s, None)
                dst = slice(s, None) if s > 0 else slice(None, out.shape[axis] + s)
                idx_src = [slice(None)] * 3
                idx_dst = [slice(None)] * 3
                idx_src[axis] = src
                idx_dst[axis] = dst
                shifted[tuple(idx_dst)] = out[tuple(idx_src)]
                out = shifted
        if quarter_turns:
            out = np.rot90(out, k=quarter_turns, axes=(1, 2))
        flip_axes = tuple(int(a) for a in np.flatnonzero(flips))
        if flip_axes:
            out = np.flip(out, axis=flip_axes)
        return np.ascontiguousarray(out)

    return apply(x), apply(t)


def train_surrogate(
    network: Network,
    volumes: Sequence[Volume3D],
    targets: Sequence[np.ndarray],
    epochs: int,
    rng: np.random.Generator,
    learning_rate: float = 0.002,
    augment: bool = True,
    max_shift_vox: int = 2,
) -> list[tuple[int, float, float]]:
    """Adam/Dice training over full volumes; returns (step, loss, seconds) rows.

    One step is one volume; volumes are visited in a fresh random order
    each epoch.  Raises :class:`TrainingDivergedError` the moment the
    loss stops being finite.
    """
    if len(volumes) == 0 or len(volumes) != len(targets):
        raise ConfigError("need equal, non-empty lists of volumes and targets")
    if epochs < 1:
        raise ConfigError("epochs must be at least 1")
    optimizer = Adam(network.parameters(), lr=learning_rate)
    log: list[tuple[int, float, float]] = []
    t0 = time.perf_counter()
    step = 0
    for _ in range(epochs):
        order = rng.permutation(len(volumes))
        for vi in order:
            x = volumes[vi].data[None, None]
            t = targets[vi][None, None]
            if augment:
                x3, t3 = _augment_pair(volumes[vi].data, targets[vi], rng, max_shift_vox)
                x, t = x3[None, None], t3[None, None]
            pred = network.forward(x, train=True)
            loss, grad = dice_loss(pred, t)
            if not math.isfinite(loss):
                raise TrainingDivergedError(step)
            network.backward(grad)
            optimizer.step(network.gradients())
            log.append((step, float(loss), time.perf_counter() - t0))
            step += 1
    return log


def predict_response(network: Network, volume: Volume3D) -> np.ndarray:
    """The network's voxelwise output in (0, 1) for one volume."""
    return network.forward(volume.data[None, None])[0, 0]


@dataclass(frozen=True)
class ThresholdSelection:
    """Chosen output threshold plus the statistics behind the choice."""

    tau: float
    mean_sensitivity: float
    mean_voxels_above: float
    mean_components_above: float
    reached_target: bool
    budget_tau: float | None = None
    budget_mean_voxels: float | None = None


def _count_components(mask: np.ndarray) -> int:
    _, n = ndimage.label(mask, structure=np.ones((3, 3, 3)))
    return int(n)


def select_threshold(
    responses: Sequence[np.ndarray],
    truths: Sequence[GroundTruth],
    spacing_mm: float,
    min_sensitivity: float = 0.95,
    hit_radius_mm: float = DEFAULT_HIT_RADIUS_MM,
    grid_size: int = 256,
    voxel_budget: float | None = None,
) -> ThresholdSelection:
    """Largest threshold keeping mean sensitivity at or above the floor.

    The grid is ``grid_size`` evenly spaced values strictly inside (0, 1),
    scanned from the top.  A lesion counts as detected at ``tau`` when any
    voxel within the hit radius of its centre responds above ``tau``.
    If no grid value reaches the floor, the most sensitive (smallest)
    threshold is returned with ``reached_target=False``.  When
    ``voxel_budget`` is given, the grid value whose mean voxel count is
    closest to the budget is also reported.
    """
    if len(responses) == 0 or len(responses) != len(truths):
        raise ConfigError("need equal, non-empty lists of responses and truths")
    if not (0.0 < min_sensitivity <= 1.0):
        raise ConfigError("min_sensitivity must lie in (0, 1]")
    if grid_size < 1:
        raise ConfigError("grid_size must be at least 1")
    check_positive(spacing_mm, "spacing_mm")
    check_positive(hit_radius_mm, "hit_radius_mm")
    taus = [i / (grid_size + 1) for i in range(grid_size, 0, -1)]  # descending

    # per lesion: the max response within the hit radius of its centre;
    # a lesion is detected at tau iff that max exceeds tau
    lesion_maxes: list[np.ndarray] = []
    sorted_values: list[np.ndarray] = []
    for resp, truth in zip(responses, truths):
        nz, ny, nx = resp.shape
        maxes = []
        r_vox = hit_radius_mm / spacing_mm
        for lesion in truth.lesions:
            cx, cy, cz = (c / spacing_mm for c in lesion.center)
            x0, x1 = max(0, math.ceil(cx - r_vox)), min(nx - 1, math.floor(cx + r_vox))
            y0, y1 = max(0, math.ceil(cy - r_vox)), min(ny - 1, math.floor(cy + r_vox))
            z0, z1 = max(0, math.ceil(cz - r_vox)), min(nz - 1, math.floor(cz + r_vox))
            best = -np.inf
            for iz in range(z0, z1 + 1):
                for iy in range(y0, y1 + 1):
                    for ix in range(x0, x1 + 1):
                        d = math.sqrt((ix - cx) ** 2 + (iy - cy) ** 2 + (iz - cz) ** 2)
                        if d * spacing_mm <= hit_radius_mm:
                            best = max(best, float(resp[iz, iy, ix]))
            maxes.append(best)
        lesion_maxes.append(np.array(maxes))
        sorted_values.append(np.sort(resp, axis=None))

    def stats_at(tau: float) -> tuple[float, float]:
        sens = []
        counts = []
        for maxes, vals in zip(lesion_maxes, sorted_values):
            if len(maxes):
                sens.append(float(np.mean(maxes > tau)))
            counts.append(float(len(vals) - np.searchsorted(vals, tau, side="right")))
        if not sens:
            raise ConfigError("threshold selection needs at least one lesion")
        return float(np.mean(sens)), float(np.mean(counts))

    chosen = None
    for tau in taus:  # descending: first hit is the largest eligible tau
        mean_sens, _ = stats_at(tau)
        if mean_sens >= min_sensitivity:
            chosen = tau
            reached = True
            break
    if chosen is None:
        chosen = taus[-1]  # smallest tau = most sensitive on the grid
        reached = False
    mean_sens, mean_vox = stats_at(chosen)
    mean_comp = float(np.mean([
        _count_components(r > chosen) for r in responses]))

    budget_tau = None
    budget_vox = None
    if voxel_budget is not None:
        check_positive(voxel_budget, "voxel_budget")
        best_gap = None
        for tau in taus:
            _, vox = stats_at(tau)
            gap = abs(vox - voxel_budget)
            # ties prefer the larger tau, which the descending scan visits first
            if best_gap is None or gap < best_gap:
                best_gap = gap
                budget_tau = tau
                budget_vox = vox
    return ThresholdSelection(
        tau=float(chosen), mean_sensitivity=mean_sens,
        mean_voxels_above=mean_vox, mean_components_above=mean_comp,
        reached_target=reached, budget_tau=budget_tau, budget_mean_voxels=budget_vox)


def extract_candidates_from_response(
    response: np.ndarray,
    spacing_mm: float,
    tau: float,
    max_candidates: int = 100000,
) -> CandidateSet:
    """Connected components above ``tau`` reduced to weighted centroids.

    Components use 26-connectivity; each yields one candidate at its
    response-weighted centroid with the component's peak response as the
    score.  Candidates come back sorted by descending score.
    """
    check_positive(spacing_mm, "spacing_mm")
    if max_candidates < 1:
        raise ConfigError("max_candidates must be at least 1")
    mask = response > tau
    if not mask.any():
        return CandidateSet.empty()
    labels, n = ndimage.label(mask, structure=np.ones((3, 3, 3)))
    ids = np.arange(1, n + 1)
    centroids = ndimage.center_of_mass(response, labels, ids)
    peaks = ndimage.maximum(response, labels, ids)
    rows = sorted(
        zip(peaks, centroids),
        key=lambda pc: (-pc[0], pc[1][0], pc[1][1], pc[1][2]))
    rows = rows[:max_candidates]
    positions = np.array(
        [[c[2] * spacing_mm, c[1] * spacing_mm, c[0] * spacing_mm] for _, c in rows])
    scores = np.array([float(p) for p, _ in rows])
    sigmas = np.full(len(rows), np.nan)
    return CandidateSet(positions_mm=positions, scores=scores, sigmas_mm=sigmas)


@dataclass
class SurrogateModel:
    """A trained surrogate: network, architecture, and chosen threshold."""

    network: Network
    spec: SurrogateSpec
    tau: float
    candidate_value: float = 0.001
    smooth_sigma_mm: float = 1.0

    def detect(self, volume: Volume3D, max_candidates: int = 100000) -> CandidateSet:
        resp = predict_response(self.network, volume)
        return extract_candidates_from_response(
            resp, volume.spacing_mm, self.tau, max_candidates)

    def meta_json(self) -> str:
        return json.dumps({
            "receptive_field_vox": self.spec.receptive_field_vox,
            "kernel_size": self.spec.kernel_size,
            "hidden_channels": self.spec.hidden_channels,
            "tau": self.tau,
            "candidate_value": self.candidate_value,
            "smooth_sigma_mm": self.smooth_sigma_mm,
        }, indent=2, sort_keys=True)


def save_surrogate(model: SurrogateModel, weights_path: str | Path,
                   meta_path: str | Path) -> None:
    save_network(model.network, weights_path)
    Path(meta_path).write_text(model.meta_json())


def load_surrogate(weights_path: str | Path, meta_path: str | Path) -> SurrogateModel:
    try:
        meta = json.loads(Path(meta_path).read_text())
        spec = SurrogateSpec(
            receptive_field_vox=int(meta["receptive_field_vox"]),
            kernel_size=int(meta["kernel_size"]),
            hidden_channels=int(meta["hidden_channels"]))
        tau = float(meta["tau"])
        candidate_value = float(meta.get("candidate_value", 0.001))
        smooth_sigma = float(meta.get("smooth_sigma_mm", 1.0))
    except (KeyError, TypeError, ValueError, json.JSONDecodeError) as exc:
        raise FormatError(f"malformed surrogate metadata: {exc}") from exc
    network = load_network(weights_path)
    return SurrogateModel(network=network, spec=spec, tau=tau,
                          candidate_value=candidate_value,
                          smooth_sigma_mm=smooth_sigma)
