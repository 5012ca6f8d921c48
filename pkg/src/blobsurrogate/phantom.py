"""Synthetic volumes with spherical lesions, vessel confounders, and noise.

Phantoms are fully deterministic given a seed: one generator drives the
whole build in a fixed order (lesion count, diameters, placements, vessel
placements, noise), so identical configs and seeds yield bitwise
identical volumes.

Lesions have Gaussian radial profiles whose full width at half maximum
equals the sampled diameter, so the nominal diameter marks the half-
contrast surface.  Vessels are straight bright cylinders with the same
cross-sectional convention; they are kept clear of lesion neighbourhoods
so ground truth stays unambiguous.  Noise is i.i.d. Gaussian.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from ._validation import check_positive
from .errors import CapacityError, ConfigError, FormatError
from .volume import GroundTruth, Lesion, Point3, Volume3D

# FWHM of a Gaussian is this multiple of its sigma
FWHM_FACTOR = 2.0 * math.sqrt(2.0 * math.log(2.0))

# Log-normal parameters fitted (quadrature + root finding) so that samples
# truncated to [1, 15] mm have mean 5.45 mm and standard deviation 2.67 mm.
DIAMETER_LOG_MU = 1.5976401036017227
DIAMETER_LOG_SIGMA = 0.5195465675308598


@dataclass(frozen=True)
class PhantomConfig:
    """Geometry and content parameters for one synthetic volume."""

    size_vox: tuple[int, int, int] = (64, 64, 64)  # (nx, ny, nz)
    spacing_mm: float = 1.0
    lesion_count_min: int = 2
    lesion_count_max: int = 5
    diameter_min_mm: float = 1.0
    diameter_max_mm: float = 15.0
    diameter_log_mu: float = DIAMETER_LOG_MU
    diameter_log_sigma: float = DIAMETER_LOG_SIGMA
    lesion_contrast: float = 1.0
    vessel_count: int = 2
    vessel_radius_min_mm: float = 0.8
    vessel_radius_max_mm: float = 1.5
    vessel_contrast: float = 0.9
    background: float = 0.1
    noise_sigma: float = 0.02
    max_place_attempts: int = 50

    def __post_init__(self):
        nx, ny, nz = self.size_vox
        if min(nx, ny, nz) < 4:
            raise ConfigError(f"size_vox must be at least 4 per axis, got {self.size_vox}")
        check_positive(self.spacing_mm, "spacing_mm")
        if not (0 <= self.lesion_count_min <= self.lesion_count_max):
            raise ConfigError("lesion counts must satisfy 0 <= min <= max")
        check_positive(self.diameter_min_mm, "diameter_min_mm")
        if self.diameter_max_mm < self.diameter_min_mm:
            raise ConfigError("diameter_max_mm must be >= diameter_min_mm")
        check_positive(self.diameter_log_sigma, "diameter_log_sigma")
        if self.vessel_count < 0:
            raise ConfigError("vessel_count must be non-negative")
        if self.vessel_count > 0:
            check_positive(self.vessel_radius_min_mm, "vessel_radius_min_mm")
            if self.vessel_radius_max_mm < self.vessel_radius_min_mm:
                raise ConfigError("vessel_radius_max_mm must be >= vessel_radius_min_mm")
        if self.noise_sigma < 0:
            raise ConfigError("noise_sigma must be non-negative")
        if self.lesion_contrast < 0 or self.vessel_contrast < 0:
            raise ConfigError("contrasts must be non-negative")
        if self.max_place_attempts < 1:
            raise ConfigError("max_place_attempts must be at least 1")

    def to_json(self) -> str:
        d = asdict(self)
        d["size_vox"] = list(d["size_vox"])
        return json.dumps(d, indent=2, sort_keys=True)

    @staticmethod
    def from_json(text: str) -> "PhantomConfig":
        try:
            d = json.loads(text)
            d["size_vox"] = tuple(int(v) for v in d["size_vox"])
            return PhantomConfig(**d)
        except (KeyError, TypeError, ValueError, json.JSONDecodeError) as exc:
            raise FormatError(f"malformed phantom config JSON: {exc}") from exc


def save_phantom_config(config: PhantomConfig, path: str | Path) -> None:
    Path(path).write_text(config.to_json())


def load_phantom_config(path: str | Path) -> PhantomConfig:
    return PhantomConfig.from_json(Path(path).read_text())


def sample_diameter(rng: np.random.Generator, config: PhantomConfig = PhantomConfig()) -> float:
    """One lesion diameter: log-normal rejection-sampled into the allowed range."""
    while True:
        d = float(rng.lognormal(config.diameter_log_mu, config.diameter_log_sigma))
        if config.diameter_min_mm <= d <= config.diameter_max_mm:
            return d


def _distance_point_to_line(point: np.ndarray, origin: np.ndarray, direction: np.ndarray) -> float:
    w = point - origin
    return float(np.linalg.norm(w - np.dot(w, direction) * direction))


def _paint_lesion(canvas: np.ndarray, spacing: float, center_xyz: np.ndarray,
                  diameter: float, contrast: float) -> None:
    sigma = diameter / FWHM_FACTOR
    half = int(math.ceil(4.0 * sigma / spacing))
    nz, ny, nx = canvas.shape
    cx, cy, cz = center_xyz / spacing
    x0, x1 = max(0, int(cx) - half), min(nx, int(cx) + half + 2)
    y0, y1 = max(0, int(cy) - half), min(ny, int(cy) + half + 2)
    z0, z1 = max(0, int(cz) - half), min(nz, int(cz) + half + 2)
    zz, yy, xx = np.meshgrid(
        np.arange(z0, z1), np.arange(y0, y1), np.arange(x0, x1), indexing="ij")
    r2 = ((xx * spacing - center_xyz[0]) ** 2
          + (yy * spacing - center_xyz[1]) ** 2
          + (zz * spacing - center_xyz[2]) ** 2)
    canvas[z0:z1, y0:y1, x0:x1] += contrast * np.exp(-r2 / (2.0 * sigma * sigma))


def _paint_vessel(canvas: np.ndarray, spacing: float, origin_xyz: np.ndarray,
                  direction_xyz: np.ndarray, radius: float, contrast: float) -> None:
    nz, ny, nx = canvas.shape
    zz, yy, xx = np.meshgrid(
        np.arange(nz, dtype=np.float64) * spacing,
        np.arange(ny, dtype=np.float64) * spacing,
        np.arange(nx, dtype=np.float64) * spacing, indexing="ij")
    wx, wy, wz = xx - origin_xyz[0], yy - origin_xyz[1], zz - origin_xyz[2]
    t = wx * direction_xyz[0] + wy * direction_xyz[1] + wz * direction_xyz[2]
    d2 = ((wx - t * direction_xyz[0]) ** 2
          + (wy - t * direction_xyz[1]) ** 2
          + (wz - t * direction_xyz[2]) ** 2)
    sigma = 2.0 * radius / FWHM_FACTOR
    canvas += contrast * np.exp(-d2 / (2.0 * sigma * sigma))


def _generate(config: PhantomConfig, rng: np.random.Generator) -> tuple[Volume3D, GroundTruth]:
    nx, ny, nz = config.size_vox
    spacing = config.spacing_mm
    extent = np.array([(nx - 1) * spacing, (ny - 1) * spacing, (nz - 1) * spacing])

    n_lesions = int(rng.integers(config.lesion_count_min, config.lesion_count_max + 1))
    diameters = [sample_diameter(rng, config) for _ in range(n_lesions)]

    centers: list[np.ndarray] = []
    for d in diameters:
        radius = d / 2.0
        lo = np.full(3, radius)
        hi = extent - radius
        if np.any(hi < lo):
            raise CapacityError(
                f"lesion of diameter {d:.2f} mm cannot keep its radius from the border")
        placed = False
        for _ in range(config.max_place_attempts):
            c = rng.uniform(lo, hi)
            ok = all(
                np.linalg.norm(c - ck) >= (d + dk) / 2.0
                for ck, dk in zip(centers, diameters))
            if ok:
                centers.append(c)
                placed = True
                break
        if not placed:
            raise CapacityError(
                f"could not place lesion {len(centers)} of {n_lesions} "
                f"after {config.max_place_attempts} attempts")

    vessels: list[tuple[np.ndarray, np.ndarray, float]] = []
    for _ in range(config.vessel_count):
        radius = float(rng.uniform(config.vessel_radius_min_mm, config.vessel_radius_max_mm))
        placed = False
        for _ in range(config.max_place_attempts):
            origin = rng.uniform(np.zeros(3), extent)
            direction = rng.normal(size=3)
            norm = np.linalg.norm(direction)
            if norm < 1e-9:
                continue
            direction = direction / norm
            # keep vessels away from lesions so ground truth stays unambiguous
            ok = all(
                _distance_point_to_line(c, origin, direction) >= d / 2.0 + radius + 1.0
                for c, d in zip(centers, diameters))
            if ok:
                vessels.append((origin, direction, radius))
                placed = True
                break
        if not placed:
            raise CapacityError(
                f"could not place vessel {len(vessels)} of {config.vessel_count} "
                f"after {config.max_place_attempts} attempts")

    canvas = np.full((nz, ny, nx), float(config.background), dtype=np.float64)
    for c, d in zip(centers, diameters):
        _paint_lesion(canvas, spacing, c, d, config.lesion_contrast)
    for origin, direction, radius in vessels:
        _paint_vessel(canvas, spacing, origin, direction, radius, config.vessel_contrast)
    if config.noise_sigma > 0:
        canvas += rng.normal(0.0, config.noise_sigma, size=canvas.shape)

    truth = GroundTruth(lesions=tuple(
        Lesion(center=Point3(*map(float, c)), diameter_mm=float(d))
        for c, d in zip(centers, diameters)))
    return Volume3D(data=canvas.astype(np.float32), spacing_mm=spacing), truth


def generate_phantom(config: PhantomConfig, seed: int) -> tuple[Volume3D, GroundTruth]:
    """Build one phantom volume and its ground truth, deterministically from ``seed``."""
    return _generate(config, np.random.default_rng(seed))


def generate_split(
    config: PhantomConfig, n_train: int, n_test: int, seed: int,
) -> tuple[list[tuple[Volume3D, GroundTruth]], list[tuple[Volume3D, GroundTruth]]]:
    """Independent train and test phantom lists from one master seed.

    Per-phantom streams come from spawned seed sequences, so changing
    ``n_train`` does not change what any individual phantom looks like.
    """
    if n_train < 0 or n_test < 0:
        raise ConfigError("n_train and n_test must be non-negative")
    children = np.random.SeedSequence(seed).spawn(n_train + n_test)
    samples = [_generate(config, np.random.default_rng(child)) for child in children]
    return samples[:n_train], samples[n_train:]
