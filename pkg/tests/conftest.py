"""Pytest configuration and shared fixtures."""

import numpy as np
import pytest

from src.vstorm.data import acquire_kt, default_phantom_spec
from src.vstorm.generator import (
    Activation,
    GeneratorSpec,
    LayerKind,
    LayerSpec,
    init_generator,
    mri_preset,
)
from src.vstorm.measurement import RandomRowEnsemble, synthetic_coil_maps

TINY_WIDTHS = (6, 5, 4, 4, 3)


def small_volume_spec(n_slices, latent_dim=3, grid=8):
    """Two-layer volumetric generator: dense to (grid/2)^2, then one stride-2 transposed conv."""
    half = grid // 2
    layers = (
        LayerSpec(LayerKind.DENSE, latent_dim, 4, grid=(half, half)),
        LayerSpec(LayerKind.TCONV, 4, 2 * n_slices, kernel=4, stride=2, activation=Activation.TANH),
    )
    return GeneratorSpec(layers, latent_dim, (n_slices, 2, grid, grid), volumetric=True, name="small")


def make_dataset(grid=16, n_slices=2, n_frames=6, rows=4, n_coils=2, sigma=0.0, seed=5, phantom_seed=3):
    spec = default_phantom_spec(seed=phantom_seed, grid_size=grid, n_slices=n_slices, n_frames=n_frames)
    maps = synthetic_coil_maps(grid, grid, n_coils) if n_coils else None
    ensemble = RandomRowEnsemble((grid, grid), rows, maps)
    return acquire_kt(spec, ensemble, sigma, seed=seed)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_dataset():
    """2 slices x 6 frames on a 16x16 grid, 4 of 16 rows, 2 coils, noiseless."""
    return make_dataset()


@pytest.fixture
def small_dataset():
    """2 slices x 3 frames on an 8x8 grid, for finite-difference checks."""
    return make_dataset(grid=8, n_slices=2, n_frames=3, rows=3)


@pytest.fixture
def make_net():
    def _make(n_slices=2, latent_dim=3, seed=0, gain=1.0, grid=16):
        return init_generator(mri_preset(grid, grid, n_slices, latent_dim, TINY_WIDTHS), seed, gain=gain)

    return _make


@pytest.fixture
def small_net():
    def _make(n_slices=2, latent_dim=3, seed=0, gain=1.0):
        return init_generator(small_volume_spec(n_slices, latent_dim), seed, gain=gain)

    return _make

