"""Tests for MNIST ingestion, the phantom and k-t acquisition."""

import gzip
import math
import struct

import numpy as np
import pytest
import torch

from src.vstorm.data import (
    IDX_IMAGES_MAGIC,
    IDX_LABELS_MAGIC,
    Frame,
    IdxFormatError,
    KTDataset,
    PhantomSpec,
    acquire_kt,
    corrupt_images,
    default_phantom_spec,
    ground_truth,
    load_mnist_idx,
    mnist_dataset,
    noise_level_for_snr,
    phantom_generate,
    phase_at,
    read_idx,
    read_idx_header,
)
from src.vstorm.measurement import RandomRowEnsemble, apply

from .conftest import make_dataset


def write_idx(path, magic, array, compress=False):
    array = np.asarray(array, dtype=np.uint8)
    raw = struct.pack(">I", magic) + struct.pack(f">{array.ndim}I", *array.shape) + array.tobytes()
    path.write_bytes(gzip.compress(raw) if compress else raw)
    return path


# === IDX ===


@pytest.mark.parametrize("compress", [False, True])
def test_read_idx(tmp_path, compress):
    """Plain and gzipped IDX files parse to the same array."""
    images = np.arange(2 * 3 * 4, dtype=np.uint8).reshape(2, 3, 4)
    path = write_idx(tmp_path / "images.idx", IDX_IMAGES_MAGIC, images, compress)

    assert read_idx_header(path) == (IDX_IMAGES_MAGIC, (2, 3, 4))
    assert np.array_equal(read_idx(path, IDX_IMAGES_MAGIC), images)


def test_read_idx_bad_magic(tmp_path):
    path = tmp_path / "bad.idx"
    path.write_bytes(b"\x12\x34\x08\x03" + b"\x00" * 16)

    with pytest.raises(IdxFormatError, match="byte 0"):
        read_idx(path)


def test_read_idx_wrong_kind(tmp_path):
    """A labels file where images are expected is rejected."""
    path = write_idx(tmp_path / "labels.idx", IDX_LABELS_MAGIC, np.zeros(4))
    with pytest.raises(IdxFormatError, match="expected magic"):
        read_idx(path, IDX_IMAGES_MAGIC)


def test_read_idx_truncated(tmp_path):
    path = write_idx(tmp_path / "images.idx", IDX_IMAGES_MAGIC, np.zeros((2, 4, 4)))
    path.write_bytes(path.read_bytes()[:-5])

    with pytest.raises(IdxFormatError, match="truncated at byte"):
        read_idx(path)

    path.write_bytes(struct.pack(">I", IDX_IMAGES_MAGIC) + b"\x00\x00")
    with pytest.raises(IdxFormatError, match="dimension table"):
        read_idx(path)


def test_load_mnist_scaling_and_filtering(tmp_path):
    """Bytes map to [-1, 1]; digit filtering and limits apply in that order."""
    images = np.zeros((4, 2, 2), dtype=np.uint8)
    images[1] = 255
    images[3] = 255
    labels = np.array([7, 3, 7, 3], dtype=np.uint8)
    img_path = write_idx(tmp_path / "img.idx", IDX_IMAGES_MAGIC, images)
    lbl_path = write_idx(tmp_path / "lbl.idx", IDX_LABELS_MAGIC, labels)

    loaded = load_mnist_idx(img_path)
    assert loaded.shape == (4, 1, 2, 2)
    assert loaded.min() == -1.0 and loaded.max() == 1.0

    threes = load_mnist_idx(img_path, lbl_path, digit=3, limit=1)
    assert threes.shape == (1, 1, 2, 2)
    assert np.all(threes == 1.0)


def test_load_mnist_digit_needs_labels(tmp_path):
    img_path = write_idx(tmp_path / "img.idx", IDX_IMAGES_MAGIC, np.zeros((1, 2, 2)))
    with pytest.raises(ValueError, match="labels"):
        load_mnist_idx(img_path, digit=1)


def test_load_mnist_label_count_mismatch(tmp_path):
    img_path = write_idx(tmp_path / "img.idx", IDX_IMAGES_MAGIC, np.zeros((3, 2, 2)))
    lbl_path = write_idx(tmp_path / "lbl.idx", IDX_LABELS_MAGIC, np.zeros(2))
    with pytest.raises(IdxFormatError, match="2 labels for 3 images"):
        load_mnist_idx(img_path, lbl_path, digit=0)


# === MNIST corruption ===


def test_corrupt_images_keeps_fixed_count(rng):
    """Each 28x28 image keeps round(0.3 * 784) = 235 pixels under its own mask."""
    images = rng.uniform(-1, 1, size=(3, 1, 28, 28))
    pairs = corrupt_images(images, 0.3, 0.0, seed=2)

    assert [len(op.kept_indices) for op, _ in pairs] == [235, 235, 235]
    assert pairs[0][0].kept_indices != pairs[1][0].kept_indices
    flat = torch.from_numpy(images[0]).reshape(-1)
    assert torch.equal(pairs[0][1], flat[list(pairs[0][0].kept_indices)])


def test_corrupt_images_noise_level(rng):
    images = np.zeros((50, 1, 28, 28))
    pairs = corrupt_images(images, 0.5, 0.05, seed=3)
    noise = torch.cat([b for _, b in pairs])

    assert float(noise.std()) == pytest.approx(0.05, rel=0.05)


def test_mnist_dataset(rng):
    images = rng.uniform(-1, 1, size=(5, 1, 6, 6))
    dataset = mnist_dataset(images, keep_fraction=0.5, noise_sd=0.0, seed=1)

    assert dataset.source == "mnist"
    assert (dataset.n_slices, dataset.n_frames) == (1, 5)
    assert dataset.ground_truth.shape == (1, 5, 1, 6, 6)
    assert not dataset.is_volumetric

    full = mnist_dataset(images, fully_sampled=True)
    assert torch.allclose(full.zero_filled()[2], torch.from_numpy(images[2]))


# === Phantom ===


def test_phase_is_periodic():
    """Both phases return after the common period 1 / gcd(f_c, f_r) = 80 frames."""
    spec = default_phantom_spec(seed=1, grid_size=16, n_slices=2, n_frames=200)
    for t in (0, 7, 33):
        for z in range(2):
            a = phase_at(spec, z, t)
            b = phase_at(spec, z, t + 80)
            assert a[0] == pytest.approx(b[0], abs=1e-9) or abs(abs(a[0] - b[0]) - 2 * math.pi) < 1e-9
            assert a[1] == pytest.approx(b[1], abs=1e-9) or abs(abs(a[1] - b[1]) - 2 * math.pi) < 1e-9

    assert np.allclose(phantom_generate(spec, 1, 5), phantom_generate(spec, 1, 85), atol=1e-9)


def test_phases_in_range_and_slices_desynchronized():
    spec = default_phantom_spec(seed=4, grid_size=16, n_slices=3, n_frames=10)
    for z in range(3):
        theta_c, theta_r = phase_at(spec, z, 9)
        assert 0 <= theta_c < 2 * math.pi and 0 <= theta_r < 2 * math.pi
    assert len(set(spec.phases_cardiac)) == 3


def test_phantom_stays_in_tanh_range():
    spec = default_phantom_spec(seed=2, grid_size=32, n_slices=2, n_frames=40)
    truth = ground_truth(spec)

    assert truth.shape == (2, 40, 2, 32, 32)
    assert np.abs(truth).max() < 1.0
    # the heart moves
    assert not np.allclose(truth[0, 0], truth[0, 5])


def test_phantom_spec_validation():
    spec = default_phantom_spec(seed=0, grid_size=16, n_slices=1, n_frames=4)
    bad = PhantomSpec.from_dict({**spec.to_dict(), "f_resp": spec.f_cardiac})
    with pytest.raises(ValueError, match="must differ"):
        bad.validate()
    with pytest.raises(ValueError, match="outside the grid"):
        PhantomSpec.from_dict({**spec.to_dict(), "resp_amplitude": 0.9}).validate()


def test_phantom_spec_dict_round_trip():
    spec = default_phantom_spec(seed=5, grid_size=16, n_slices=2, n_frames=4)
    assert PhantomSpec.from_dict(spec.to_dict()) == spec


# === Acquisition ===


def test_noiseless_acquisition_matches_truth(tiny_dataset):
    """b = A_i x_i exactly when sigma is zero."""
    truth = torch.from_numpy(tiny_dataset.ground_truth)
    for frame in tiny_dataset.frames[::5]:
        volume = torch.zeros(tiny_dataset.n_slices, *tiny_dataset.image_shape, dtype=torch.float64)
        volume[frame.z] = truth[frame.z, frame.t]
        assert torch.allclose(apply(frame.operator, volume), frame.b, atol=1e-12)


def test_noise_does_not_change_operators():
    clean = make_dataset(sigma=0.0, seed=8)
    noisy = make_dataset(sigma=0.1, seed=8)

    for a, b in zip(clean.frames, noisy.frames):
        assert a.operator.inner.kept_rows == b.operator.inner.kept_rows
    assert all(f.operator.inner.noise_free for f in clean.frames)
    assert not any(f.operator.inner.noise_free for f in noisy.frames)
    residual = torch.cat([b.b - a.b for a, b in zip(clean.frames, noisy.frames)])
    assert float(residual.std()) == pytest.approx(0.1, rel=0.1)


def test_snr_sets_noise_level():
    spec = default_phantom_spec(seed=3, grid_size=16, n_slices=1, n_frames=4)
    ensemble = RandomRowEnsemble((16, 16), 4)
    dataset = acquire_kt(spec, ensemble, 0.0, seed=1, snr_db=20.0)

    clean = acquire_kt(spec, ensemble, 0.0, seed=1)
    expected = noise_level_for_snr(torch.cat([f.b for f in clean.frames]), 20.0)
    assert dataset.frames[0].sigma_meas == pytest.approx(expected)


def test_acquisition_rejects_mismatched_ensemble():
    spec = default_phantom_spec(seed=3, grid_size=16, n_slices=1, n_frames=2)
    with pytest.raises(ValueError, match="does not match"):
        acquire_kt(spec, RandomRowEnsemble((8, 8), 2), 0.0, seed=0)


def test_dataset_validation(tiny_dataset):
    """Frames out of (z, t) order or with short measurements are named in the error."""
    frames = list(tiny_dataset.frames)
    swapped = [frames[1], frames[0], *frames[2:]]
    with pytest.raises(ValueError, match="frame 0"):
        KTDataset(tuple(swapped), 2, 6, tiny_dataset.image_shape)

    f = frames[3]
    frames[3] = Frame(f.z, f.t, f.operator, f.b[:-1], f.sigma_meas)
    with pytest.raises(ValueError, match=r"frame 3 \(z=0, t=3\)"):
        KTDataset(tuple(frames), 2, 6, tiny_dataset.image_shape)


def test_zero_filled_shapes(tiny_dataset):
    zero_filled = tiny_dataset.zero_filled()
    assert len(zero_filled) == 12
    assert zero_filled[0].shape == (2, 2, 16, 16)
    # slice 1 frames fill only slice 1
    assert zero_filled[7][0].abs().max() == 0


def test_dataset_save_load(tmp_path):
    dataset = make_dataset(sigma=0.05)
    path = tmp_path / "dataset.ktd"
    dataset.save(path)

    loaded = KTDataset.load(path)
    assert (loaded.n_slices, loaded.n_frames, loaded.image_shape) == (2, 6, (2, 16, 16))
    assert loaded.phantom == dataset.phantom
    assert np.array_equal(loaded.ground_truth, dataset.ground_truth)
    assert not loaded.frames[0].operator.inner.noise_free
    x = torch.from_numpy(np.random.default_rng(0).standard_normal((2, 2, 16, 16)))
    for a, b in zip(dataset.frames, loaded.frames):
        assert torch.equal(a.b, b.b)
        assert torch.allclose(apply(a.operator, x), apply(b.operator, x), atol=0)


# === Slice selection ===


def test_select_slices_keeps_measurements_and_truth():
    dataset = make_dataset(grid=16, n_slices=3, n_frames=4, sigma=0.05)
    sub = dataset.select_slices([2])

    assert (sub.n_slices, sub.n_frames, sub.image_shape) == (1, 4, (2, 16, 16))
    assert sub.phantom.n_slices == 1
    assert np.array_equal(sub.ground_truth, dataset.ground_truth[[2]])
    assert np.array_equal(ground_truth(sub.phantom), dataset.ground_truth[[2]])
    assert phase_at(sub.phantom, 0, 3) == phase_at(dataset.phantom, 2, 3)

    x = torch.from_numpy(np.random.default_rng(0).standard_normal((3, 2, 16, 16)))
    for original, selected in zip(dataset.slice_frames(2), sub.frames):
        assert (selected.z, selected.t) == (0, original.t)
        assert torch.equal(selected.b, original.b)
        assert selected.sigma_meas == original.sigma_meas
        assert torch.equal(apply(selected.operator, x[2:3]), apply(original.operator, x))


def test_select_slices_renumbers_in_given_order():
    dataset = make_dataset(grid=16, n_slices=3, n_frames=2)
    sub = dataset.select_slices([2, 0])

    assert [(f.z, f.t) for f in sub.frames] == [(0, 0), (0, 1), (1, 0), (1, 1)]
    assert torch.equal(sub.frame(1, 1).b, dataset.frame(0, 1).b)
    assert sub.phantom.phases_cardiac == (dataset.phantom.phases_cardiac[2], dataset.phantom.phases_cardiac[0])
    assert sub.frames[0].operator.input_shape == (2, 2, 16, 16)


@pytest.mark.parametrize("indices, message", [([], "distinct"), ([1, 1], "distinct"), ([3], "out of range")])
def test_select_slices_rejects_bad_indices(indices, message):
    with pytest.raises(ValueError, match=message):
        make_dataset(grid=16, n_slices=3, n_frames=2).select_slices(indices)


def test_select_slices_needs_volumetric_data(rng):
    dataset = mnist_dataset(rng.uniform(-1, 1, size=(3, 1, 6, 6)), keep_fraction=0.5, seed=1)
    with pytest.raises(ValueError, match="multislice"):
        dataset.select_slices([0])
