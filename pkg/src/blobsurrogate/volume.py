"""Volumes, lesion ground truth, and their on-disk formats.

Conventions used throughout the package:

* A volume is a dense 3-D array of float32 intensities with isotropic
  voxel spacing given in millimetres.  Arrays are indexed ``[z, y, x]``
  and stored C-contiguous, so ``x`` varies fastest in memory.
* World coordinates are in millimetres.  The centre of voxel
  ``(ix, iy, iz)`` sits at ``(ix * spacing, iy * spacing, iz * spacing)``.
* Points are ``(x, y, z)`` triples in millimetres.

The binary volume format ("BSV1") is: 4-byte magic ``BSV1``; three
little-endian uint32 ``nx, ny, nz``; one little-endian float32 spacing in
mm; then ``nx * ny * nz`` little-endian float32 samples, x fastest.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple, Sequence

import numpy as np
from scipy import ndimage

from ._validation import check_finite, check_positive, check_rank
from .errors import FormatError, GeometryError

_MAGIC = b"BSV1"
_HEADER = struct.Struct("<4sIIIf")


class Point3(NamedTuple):
    """A point in world coordinates, millimetres."""

    x: float
    y: float
    z: float


@dataclass(frozen=True)
class Lesion:
    """A spherical lesion: world-space centre and diameter in mm."""

    center: Point3
    diameter_mm: float


@dataclass(frozen=True)
class GroundTruth:
    """Known lesion positions for one volume."""

    lesions: tuple[Lesion, ...]

    def __len__(self) -> int:
        return len(self.lesions)

    def centers(self) -> np.ndarray:
        """Lesion centres as an ``(n, 3)`` array of ``(x, y, z)`` mm."""
        if not self.lesions:
            return np.zeros((0, 3), dtype=np.float64)
        return np.array([list(l.center) for l in self.lesions], dtype=np.float64)

    def to_json(self) -> str:
        payload = {
            "lesions": [
                {"center_mm": [float(c) for c in l.center],
                 "diameter_mm": float(l.diameter_mm)}
                for l in self.lesions
            ]
        }
        return json.dumps(payload, indent=2, sort_keys=True)

    @staticmethod
    def from_json(text: str) -> "GroundTruth":
        try:
            payload = json.loads(text)
            lesions = tuple(
                Lesion(center=Point3(*map(float, item["center_mm"])),
                       diameter_mm=float(item["diameter_mm"]))
                for item in payload["lesions"]
            )
        except (KeyError, TypeError, ValueError, json.JSONDecodeError) as exc:
            raise FormatError(f"malformed ground-truth JSON: {exc}") from exc
        return GroundTruth(lesions=lesions)


def save_ground_truth(truth: GroundTruth, path: str | Path) -> None:
    Path(path).write_text(truth.to_json())


def load_ground_truth(path: str | Path) -> GroundTruth:
    return GroundTruth.from_json(Path(path).read_text())


@dataclass(frozen=True)
class Volume3D:
    """An isotropic volume.  ``data`` has shape ``(nz, ny, nx)`` and is read-only."""

    data: np.ndarray
    spacing_mm: float

    def __post_init__(self):
        data = np.ascontiguousarray(self.data, dtype=np.float32)
        check_rank(data, 3, "volume data")
        if min(data.shape) < 1:
            raise GeometryError(f"volume dims must be positive, got {data.shape}")
        check_finite(data, "volume data")
        check_positive(self.spacing_mm, "spacing_mm")
        data.flags.writeable = False
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "spacing_mm", float(self.spacing_mm))

    @property
    def dims(self) -> tuple[int, int, int]:
        """Grid size as ``(nx, ny, nz)``."""
        nz, ny, nx = self.data.shape
        return (nx, ny, nz)

    @property
    def extent_mm(self) -> tuple[float, float, float]:
        """Physical extent ``(x, y, z)`` spanned by voxel centres, in mm."""
        nx, ny, nz = self.dims
        s = self.spacing_mm
        return ((nx - 1) * s, (ny - 1) * s, (nz - 1) * s)

    def voxel_of(self, point: Sequence[float]) -> tuple[int, int, int]:
        """Nearest voxel index ``(ix, iy, iz)`` for a world point, clamped to the grid."""
        nx, ny, nz = self.dims
        x, y, z = (float(v) / self.spacing_mm for v in point)
        ix = min(max(int(round(x)), 0), nx - 1)
        iy = min(max(int(round(y)), 0), ny - 1)
        iz = min(max(int(round(z)), 0), nz - 1)
        return (ix, iy, iz)


def save_volume(volume: Volume3D, path: str | Path) -> None:
    """Write a volume in the BSV1 binary format."""
    nx, ny, nz = volume.dims
    header = _HEADER.pack(_MAGIC, nx, ny, nz, volume.spacing_mm)
    payload = np.ascontiguousarray(volume.data, dtype="<f4").tobytes()
    Path(path).write_bytes(header + payload)


def load_volume(path: str | Path) -> Volume3D:
    """Read a BSV1 volume, validating magic, sizes, and finiteness."""
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise FormatError(f"{path}: file shorter than BSV1 header")
    magic, nx, ny, nz, spacing = _HEADER.unpack_from(raw)
    if magic != _MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}, expected {_MAGIC!r}")
    if min(nx, ny, nz) < 1:
        raise FormatError(f"{path}: non-positive dims ({nx}, {ny}, {nz})")
    if not (np.isfinite(spacing) and spacing > 0):
        raise FormatError(f"{path}: non-positive spacing {spacing!r}")
    expected = _HEADER.size + 4 * nx * ny * nz
    if len(raw) != expected:
        raise FormatError(
            f"{path}: payload size mismatch, expected {expected} bytes, got {len(raw)}"
        )
    data = np.frombuffer(raw, dtype="<f4", offset=_HEADER.size).reshape(nz, ny, nx)
    if not np.isfinite(data).all():
        raise FormatError(f"{path}: payload contains non-finite values")
    return Volume3D(data=data.copy(), spacing_mm=float(spacing))


def resample_isotropic(
    data: np.ndarray,
    spacing_mm: Sequence[float],
    target_spacing_mm: float,
) -> Volume3D:
    """Resample an anisotropic grid onto an isotropic one by trilinear interpolation.

    Parameters
    ----------
    data : ndarray, shape (nz, ny, nx)
        Source intensities on a possibly anisotropic grid.
    spacing_mm : sequence of 3 floats
        Source spacing as ``(sx, sy, sz)`` in mm.
    target_spacing_mm : float
        Isotropic output spacing in mm.

    Returns
    -------
    Volume3D
        Output grid sized to preserve the physical extent (rounded to the
        nearest voxel).  Samples outside the source grid clamp to the
        border value.  When source and target grids already coincide the
        result is bitwise identical to the input.
    """
    data = np.asarray(data, dtype=np.float32)
    check_rank(data, 3, "data")
    check_finite(data, "data")
    sx, sy, sz = (check_positive(s, "spacing_mm") for s in spacing_mm)
    t = check_positive(target_spacing_mm, "target_spacing_mm")
    nz, ny, nx = data.shape
    out_nx = max(1, int(round(nx * sx / t)))
    out_ny = max(1, int(round(ny * sy / t)))
    out_nz = max(1, int(round(nz * sz / t)))
    cz = np.arange(out_nz, dtype=np.float64) * (t / sz)
    cy = np.arange(out_ny, dtype=np.float64) * (t / sy)
    cx = np.arange(out_nx, dtype=np.float64) * (t / sx)
    grid = np.meshgrid(cz, cy, cx, indexing="ij")
    out = ndimage.map_coordinates(data, grid, order=1, mode="nearest")
    return Volume3D(data=out.astype(np.float32), spacing_mm=t)


def sample_trilinear(data: np.ndarray, coords_zyx: np.ndarray) -> np.ndarray:
    """Trilinear samples of ``data`` at fractional voxel coordinates.

    Coordinates are ``(n, 3)`` in ``(z, y, x)`` voxel units; reads outside
    the grid clamp to the nearest border voxel.
    """
    coords = np.asarray(coords_zyx, dtype=np.float64)
    return ndimage.map_coordinates(
        np.asarray(data, dtype=np.float64), coords.T, order=1, mode="nearest"
    )
