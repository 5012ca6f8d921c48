"""Second-stage classifier over fixed-size crops around candidate points.

Candidates from either first stage are cut out as cubes (default 16 mm
edge), rescaled to [0, 1] per crop, and scored by a small strided conv
net with a dense sigmoid head.  Training uses balanced pairs: one crop
at a true lesion centre and one at a candidate far from every lesion,
per pair, with geometric and intensity augmentations on both.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy import ndimage

from ._validation import check_odd, check_positive
from .errors import ConfigError, SamplingError, TrainingDivergedError
from .nn import Adam, Conv3D, Dense, Flatten, Network, bce_loss
from .scalespace import CandidateSet, smooth_array
from .volume import GroundTruth, Volume3D


@dataclass(frozen=True)
class CropSpec:
    """Crop geometry and classifier architecture."""

    edge_mm: float = 16.0
    channels: tuple[int, ...] = (8, 16, 32, 64)
    kernel_size: int = 3

    def __post_init__(self):
        check_positive(self.edge_mm, "edge_mm")
        if len(self.channels) < 1 or any(c < 1 for c in self.channels):
            raise ConfigError("channels must be a non-empty tuple of positive ints")
        check_odd(self.kernel_size, "kernel_size")

    def crop_vox(self, spacing_mm: float) -> int:
        n = int(round(self.edge_mm / spacing_mm))
        if n < 2:
            raise ConfigError(
                f"crop edge {self.edge_mm} mm spans fewer than 2 voxels "
                f"at spacing {spacing_mm} mm")
        return n


@dataclass(frozen=True)
class CropAugmentation:
    """Magnitudes for the crop augmentation chain.

    Order of application: translation, rotation about a random axis,
    axis flips, gamma correction, elastic deformation.  Setting every
    magnitude to zero (and flips off, gamma range to (1, 1)) makes the
    chain an exact identity.
    """

    max_translation_mm: float = 2.0
    max_rotation_deg: float = 180.0
    flips: bool = True
    gamma_range: tuple[float, float] = (0.8, 1.2)
    elastic_max_mm: float = 1.5
    elastic_sigma_mm: float = 3.0

    def __post_init__(self):
        if self.max_translation_mm < 0 or self.max_rotation_deg < 0:
            raise ConfigError("augmentation magnitudes must be non-negative")
        lo, hi = self.gamma_range
        if not (0 < lo <= hi):
            raise ConfigError("gamma_range must satisfy 0 < lo <= hi")
        if self.elastic_max_mm < 0:
            raise ConfigError("elastic_max_mm must be non-negative")
        if self.elastic_max_mm > 0:
            check_positive(self.elastic_sigma_mm, "elastic_sigma_mm")

    @staticmethod
    def none() -> "CropAugmentation":
        return CropAugmentation(max_translation_mm=0.0, max_rotation_deg=0.0,
                                flips=False, gamma_range=(1.0, 1.0),
                                elastic_max_mm=0.0)


def extract_crop(volume: Volume3D, center_mm: Sequence[float],
                 edge_mm: float = 16.0) -> np.ndarray:
    """A cube of ``round(edge/spacing)`` voxels around a world point, rescaled to [0, 1].

    Sampling is trilinear; reads beyond the volume clamp to the border.
    A constant crop rescales to all zeros.
    """
    check_positive(edge_mm, "edge_mm")
    spacing = volume.spacing_mm
    n = int(round(edge_mm / spacing))
    if n < 2:
        raise ConfigError(f"crop edge {edge_mm} mm spans fewer than 2 voxels")
    cx, cy, cz = (float(c) / spacing for c in center_mm)
    offsets = np.arange(n, dtype=np.float64) - (n - 1) / 2.0
    zz, yy, xx = np.meshgrid(offsets + cz, offsets + cy, offsets + cx, indexing="ij")
    crop = ndimage.map_coordinates(
        volume.data.astype(np.float64), [zz, yy, xx], order=1, mode="nearest")
    lo, hi = float(crop.min()), float(crop.max())
    if hi - lo < 1e-12:
        return np.zeros((n, n, n), dtype=np.float32)
    return ((crop - lo) / (hi - lo)).astype(np.float32)


def _rotation_matrix(axis: np.ndarray, angle_rad: float) -> np.ndarray:
    a = axis / np.linalg.norm(axis)
    c, s = math.cos(angle_rad), math.sin(angle_rad)
    cross = np.array([
        [0, -a[2], a[1]],
        [a[2], 0, -a[0]],
        [-a[1], a[0], 0]])
    return c * np.eye(3) + s * cross + (1 - c) * np.outer(a, a)


def augment_crop(crop: np.ndarray, rng: np.random.Generator,
                 aug: CropAugmentation = CropAugmentation(),
                 spacing_mm: float = 1.0) -> np.ndarray:
    """One random draw of the augmentation chain applied to a crop.

    Random values are drawn only for the augmentations that are enabled,
    in the documented order, so results are reproducible for a given
    generator state and configuration.
    """
    check_positive(spacing_mm, "spacing_mm")
    if crop.ndim != 3:
        raise ConfigError(f"crop must be rank 3, got {crop.shape}")
    out = crop
    n = crop.shape[0]
    center = (np.array(crop.shape, dtype=np.float64) - 1.0) / 2.0

    needs_rigid = aug.max_translation_mm > 0 or aug.max_rotation_deg > 0
    if needs_rigid:
        shift_vox = np.zeros(3)
        if aug.max_translation_mm > 0:
            shift_vox = rng.uniform(
                -aug.max_translation_mm, aug.max_translation_mm, size=3) / spacing_mm
        rot = np.eye(3)
        if aug.max_rotation_deg > 0:
            axis = rng.normal(size=3)
            while np.linalg.norm(axis) < 1e-9:
                axis = rng.normal(size=3)
            angle = math.radians(
                float(rng.uniform(-aug.max_rotation_deg, aug.max_rotation_deg)))
            rot = _rotation_matrix(axis, angle)
        grid = np.stack(np.meshgrid(*(np.arange(s, dtype=np.float64)
                                      for s in crop.shape), indexing="ij"))
        rel = grid.reshape(3, -1) - center[:, None]
        src = rot.T @ rel + center[:, None] - shift_vox[:, None]
        out = ndimage.map_coordinates(
            out.astype(np.float64), src.reshape(3, *crop.shape),
            order=1, mode="nearest").astype(np.float32)

    if aug.flips:
        flip_axes = tuple(int(a) for a in np.flatnonzero(rng.integers(0, 2, size=3)))
        if flip_axes:
            out = np.ascontiguousarray(np.flip(out, axis=flip_axes))

    lo, hi = aug.gamma_range
    if not (lo == 1.0 and hi == 1.0):
        gamma = float(rng.uniform(lo, hi))
        out = np.power(np.clip(out, 0.0, 1.0), gamma).astype(np.float32)

    if aug.elastic_max_mm > 0:
        fields = rng.uniform(-1.0, 1.0, size=(3, *crop.shape))
        fields = np.stack([
            smooth_array(f.astype(np.float32), spacing_mm, aug.elastic_sigma_mm)
            for f in fields]).astype(np.float64)
        mag = np.sqrt(np.sum(fields ** 2, axis=0))
        peak = float(mag.max())
        if peak > 1e-12:
            fields *= aug.elastic_max_mm / peak
        grid = np.stack(np.meshgrid(*(np.arange(s, dtype=np.float64)
                                      for s in crop.shape), indexing="ij"))
        src = grid + fields / spacing_mm
        out = ndimage.map_coordinates(
            out.astype(np.float64), src, order=1, mode="nearest").astype(np.float32)

    return np.ascontiguousarray(out, dtype=np.float32)


def build_classifier_net(spec: CropSpec = CropSpec(), crop_vox: int = 16) -> Network:
    """Strided conv levels (channels doubling by config) and a dense sigmoid head."""
    if crop_vox < 2:
        raise ConfigError("crop_vox must be at least 2")
    layers: list = []
    in_ch = 1
    n = crop_vox
    k = spec.kernel_size
    for ch in spec.channels:
        layers.append(Conv3D(in_ch, ch, k, stride=2, activation="relu"))
        n = (n + 2 * (k // 2) - k) // 2 + 1
        if n < 1:
            raise ConfigError(
                f"crop of {crop_vox} voxels is too small for {len(spec.channels)} levels")
        in_ch = ch
    layers.append(Flatten())
    layers.append(Dense(in_ch * n ** 3, 1, activation="sigmoid"))
    return Network(layers)


def eligible_negatives(candidates: CandidateSet, truth: GroundTruth,
                       min_distance_mm: float = 2.0) -> np.ndarray:
    """Indices of candidates at least ``min_distance_mm`` from every lesion centre."""
    check_positive(min_distance_mm, "min_distance_mm")
    if len(candidates) == 0:
        return np.zeros(0, dtype=np.int64)
    centers = truth.centers()
    if len(centers) == 0:
        return np.arange(len(candidates), dtype=np.int64)
    d2 = np.sum(
        (candidates.positions_mm[:, None, :] - centers[None, :, :]) ** 2, axis=2)
    return np.flatnonzero(np.sqrt(d2.min(axis=1)) >= min_distance_mm).astype(np.int64)


def sample_paired_batch(
    volumes: Sequence[Volume3D],
    truths: Sequence[GroundTruth],
    candidates_list: Sequence[CandidateSet],
    batch_pairs: int,
    rng: np.random.Generator,
    spec: CropSpec = CropSpec(),
    aug: CropAugmentation = CropAugmentation(),
    negative_min_mm: float = 2.0,
) -> tuple[np.ndarray, np.ndarray]:
    """A balanced batch: ``batch_pairs`` lesion crops and as many decoy crops.

    Positives are crops at true lesion centres; negatives are crops at
    candidates at least ``negative_min_mm`` from every lesion centre.
    Both are augmented independently.  Returns ``(x, y)`` with x of shape
    ``(2 * batch_pairs, 1, n, n, n)`` and labels alternating 1, 0.

    Raises
    ------
    SamplingError
        If no volume has a lesion, or none has an eligible negative.
    """
    if batch_pairs < 1:
        raise ConfigError("batch_pairs must be at least 1")
    if not (len(volumes) == len(truths) == len(candidates_list)) or not volumes:
        raise ConfigError("need equal, non-empty volume/truth/candidate lists")
    pos_vols = [i for i, t in enumerate(truths) if len(t) > 0]
    if not pos_vols:
        raise SamplingError("no volume in the set has a lesion to crop")
    neg_pool = [
        (i, eligible_negatives(candidates_list[i], truths[i], negative_min_mm))
        for i in range(len(volumes))]
    neg_pool = [(i, idx) for i, idx in neg_pool if len(idx) > 0]
    if not neg_pool:
        raise SamplingError(
            f"no candidate lies at least {negative_min_mm} mm from every lesion")

    n = spec.crop_vox(volumes[0].spacing_mm)
    x = np.empty((2 * batch_pairs, 1, n, n, n), dtype=np.float32)
    y = np.empty((2 * batch_pairs, 1), dtype=np.float32)
    for b in range(batch_pairs):
        vi = pos_vols[int(rng.integers(len(pos_vols)))]
        lesion = truths[vi].lesions[int(rng.integers(len(truths[vi])))]
        crop = extract_crop(volumes[vi], lesion.center, spec.edge_mm)
        x[2 * b, 0] = augment_crop(crop, rng, aug, volumes[vi].spacing_mm)
        y[2 * b, 0] = 1.0

        vj, idx = neg_pool[int(rng.integers(len(neg_pool)))]
        ci = int(idx[int(rng.integers(len(idx)))])
        pos = candidates_list[vj].positions_mm[ci]
        crop = extract_crop(volumes[vj], pos, spec.edge_mm)
        x[2 * b + 1, 0] = augment_crop(crop, rng, aug, volumes[vj].spacing_mm)
        y[2 * b + 1, 0] = 0.0
    return x, y


def train_classifier(
    network: Network,
    volumes: Sequence[Volume3D],
    truths: Sequence[GroundTruth],
    candidates_list: Sequence[CandidateSet],
    iterations: int,
    batch_pairs: int,
    rng: np.random.Generator,
    learning_rate: float = 5e-5,
    spec: CropSpec = CropSpec(),
    aug: CropAugmentation = CropAugmentation(),
    negative_min_mm: float = 2.0,
) -> list[tuple[int, float, float]]:
    """Adam/BCE training on freshly sampled paired batches.

    Returns (step, loss, seconds) rows; raises
    :class:`TrainingDivergedError` if the loss stops being finite.
    """
    if iterations < 1:
        raise ConfigError("iterations must be at least 1")
    optimizer = Adam(network.parameters(), lr=learning_rate)
    log: list[tuple[int, float, float]] = []
    t0 = time.perf_counter()
    for step in range(iterations):
        x, y = sample_paired_batch(
            volumes, truths, candidates_list, batch_pairs, rng,
            spec, aug, negative_min_mm)
        pred = network.forward(x, train=True)
        loss, grad = bce_loss(pred, y)
        if not math.isfinite(loss):
            raise TrainingDivergedError(step)
        network.backward(grad)
        optimizer.step(network.gradients())
        log.append((step, float(loss), time.perf_counter() - t0))
    return log


def classify_candidates(
    network: Network,
    volume: Volume3D,
    candidates: CandidateSet,
    spec: CropSpec = CropSpec(),
    batch_size: int = 64,
) -> np.ndarray:
    """Lesion probability for each candidate, in candidate order (no augmentation)."""
    if batch_size < 1:
        raise ConfigError("batch_size must be at least 1")
    if len(candidates) == 0:
        return np.zeros(0, dtype=np.float64)
    n = spec.crop_vox(volume.spacing_mm)
    probs = np.empty(len(candidates), dtype=np.float64)
    for start in range(0, len(candidates), batch_size):
        block = candidates.positions_mm[start:start + batch_size]
        x = np.stack([
            extract_crop(volume, pos, spec.edge_mm) for pos in block])[:, None]
        out = network.forward(x.astype(np.float32))
        probs[start:start + len(block)] = out[:, 0].astype(np.float64)
    return probs
