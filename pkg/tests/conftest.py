import numpy as np
import pytest

from blobsurrogate import PhantomConfig, Volume3D, generate_phantom


@pytest.fixture
def small_config() -> PhantomConfig:
    return PhantomConfig(size_vox=(32, 32, 32), lesion_count_min=2,
                         lesion_count_max=3, diameter_min_mm=2.0,
                         diameter_max_mm=8.0, vessel_count=1)


@pytest.fixture
def small_phantom(small_config):
    return generate_phantom(small_config, 11)


def bump_volume(size=16, centers=((8.0, 8.0, 8.0),), sigma_mm=1.5,
                spacing_mm=1.0, background=0.1, amplitude=1.0) -> Volume3D:
    """A direct, loop-free construction of Gaussian bumps (test-local, no package code)."""
    n = size
    z, y, x = np.meshgrid(np.arange(n), np.arange(n), np.arange(n), indexing="ij")
    data = np.full((n, n, n), background, dtype=np.float64)
    for cx, cy, cz in centers:
        r2 = ((x * spacing_mm - cx) ** 2 + (y * spacing_mm - cy) ** 2
              + (z * spacing_mm - cz) ** 2)
        data += amplitude * np.exp(-r2 / (2.0 * sigma_mm ** 2))
    return Volume3D(data=data.astype(np.float32), spacing_mm=spacing_mm)
