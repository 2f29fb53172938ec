"""Tests for metrics, latent-swap reconstruction and alignment."""

import math
from dataclasses import replace
from types import SimpleNamespace

import numpy as np
import pytest
import torch

from src.vstorm.data import default_phantom_spec, phantom_volume, phase_at
from src.vstorm.evaluation import (
    DB_CAP,
    alignment_score,
    empirical_kl,
    empirical_kl_summary,
    evaluate_series,
    gaussian_log_likelihood,
    kl_summary,
    psnr,
    reconstruct_series,
    reference_series,
    ser,
    ssim,
)
from src.vstorm.generator import init_generator, mnist_preset
from src.vstorm.latent import VariationalLatentBank
from src.vstorm.measurement import PixelMaskOperator
from src.vstorm.trainer import LossConfig, loss_multislice

from .conftest import make_dataset


def test_ser_examples():
    ref = np.ones((2, 4, 4))
    assert ser(ref, ref) == DB_CAP
    assert ser(ref, 0.9 * ref) == pytest.approx(20.0)
    assert ser(ref, np.zeros_like(ref)) == pytest.approx(0.0)


def test_ser_rejects_zero_reference():
    with pytest.raises(ValueError, match="all-zero"):
        ser(np.zeros((2, 3, 3)), np.ones((2, 3, 3)))


def test_psnr_on_magnitudes():
    """A pure phase change leaves the magnitude, and so PSNR, untouched."""
    rng = np.random.default_rng(0)
    ref = rng.normal(size=(2, 16, 16))
    rotated = np.stack((-ref[1], ref[0]))
    assert psnr(ref, rotated) == DB_CAP

    noisy = ref[:1] + 0.1
    assert psnr(ref[:1], noisy) == pytest.approx(10 * math.log10(4 / 0.01))


def test_ssim_bounds():
    rng = np.random.default_rng(1)
    ref = rng.uniform(-1, 1, size=(1, 16, 16))
    assert ssim(ref, ref) == pytest.approx(1.0)
    assert ssim(ref, ref + rng.normal(scale=0.6, size=ref.shape)) < 0.8


def test_shape_mismatch():
    with pytest.raises(ValueError, match="shape mismatch"):
        ser(np.ones((1, 4, 4)), np.ones((1, 4, 5)))


def test_evaluate_series_report():
    rng = np.random.default_rng(2)
    reference = rng.uniform(0.1, 1, size=(3, 2, 2, 16, 16))
    series = reference + 0.01 * rng.normal(size=reference.shape)

    report = evaluate_series(series, reference, metrics=("psnr", "ser"))
    assert len(report.records) == 3 * 2 * 2
    assert report.metrics == ["psnr", "ser"]
    assert report.aggregate("ser") > 30


def test_evaluate_series_skips_ser_on_empty_reference():
    reference = np.zeros((1, 1, 1, 16, 16))
    report = evaluate_series(np.ones_like(reference), reference)
    assert report.values("ser") == []
    assert len(report.values("psnr")) == 1


def test_reconstruct_series_swaps_latents(small_net):
    """Slice 1's means drive the whole volume, one row per frame."""
    net = small_net(n_slices=2)
    bank = VariationalLatentBank(2, 4, 3)
    with torch.no_grad():
        bank.mu.normal_(generator=torch.Generator().manual_seed(0))

    series = reconstruct_series(net, bank, 1)
    assert series.shape == (4, 2, 2, 8, 8)
    with torch.no_grad():
        expected = net(bank.mu[1, 2]).numpy()
    assert np.allclose(series[2], expected, rtol=0, atol=1e-12)


def test_reconstruct_series_sampling_and_range(small_net):
    net = small_net(n_slices=2)
    bank = VariationalLatentBank(2, 3, 3, initial_deviation=0.5)

    at_mean = reconstruct_series(net, bank, 0)
    sampled = reconstruct_series(net, bank, 0, sample=True, rng=np.random.default_rng(3))
    assert not np.array_equal(at_mean, sampled)
    with pytest.raises(ValueError, match="out of range"):
        reconstruct_series(net, bank, 2)


def test_reconstruct_series_single_image_generator():
    """A non-volumetric generator gets a slice axis of length one."""
    net = init_generator(mnist_preset(), seed=0)
    bank = VariationalLatentBank(1, 5, 2)
    assert reconstruct_series(net, bank, 0).shape == (5, 1, 1, 28, 28)


def test_reference_series_shape():
    spec = default_phantom_spec(seed=1, grid_size=16, n_slices=3, n_frames=7)
    assert reference_series(spec, 2).shape == (7, 3, 2, 16, 16)


@pytest.mark.slow
def test_alignment_of_true_trajectory_is_exact():
    """Every slice's ground-truth trajectory on the default phantom scores exactly 1."""
    spec = default_phantom_spec(seed=0)
    for z in range(spec.n_slices):
        assert alignment_score(reference_series(spec, z), spec, z) == 1.0


@pytest.mark.slow
def test_alignment_of_shuffled_series_is_chance():
    """
    A time-shuffled series hits the 3x3 neighbourhood of the true cell about
    9 / 256 of the time once the trajectory covers the phase torus.
    """
    spec = default_phantom_spec(seed=6, grid_size=32, n_slices=1, n_frames=2000, f_resp=0.0131)
    truth = reference_series(spec, 0)
    shuffled = truth[np.random.default_rng(0).permutation(spec.n_frames)]

    assert alignment_score(shuffled, spec, 0) < 0.05


class PhaseLookupGenerator:
    """Stands in for a trained generator: latent (theta_c, theta_r) -> phantom volume at those phases."""

    def __init__(self, phantom):
        self.phantom = phantom
        self.spec = SimpleNamespace(volumetric=True)

    def __call__(self, c):
        return torch.from_numpy(np.stack([phantom_volume(self.phantom, *row.tolist()) for row in c]))


def test_latent_swap_passes_the_phase_grid_oracle():
    """
    With latents equal to each slice's phases, the series built from slice z's
    latents matches slice z's phase pair on the 16x16 grid at every frame.
    """
    spec = replace(
        default_phantom_spec(seed=2, grid_size=32, n_slices=2, n_frames=24),
        phases_cardiac=(0.0, math.pi),
        phases_resp=(0.5, 0.5 + math.pi),
    )
    bank = VariationalLatentBank(2, 24, 2)
    with torch.no_grad():
        for z in range(2):
            for t in range(24):
                bank.mu[z, t] = torch.tensor(phase_at(spec, z, t), dtype=torch.float64)
    net = PhaseLookupGenerator(spec)

    series = reconstruct_series(net, bank, 1)

    assert np.allclose(series, reference_series(spec, 1), rtol=0, atol=1e-12)
    assert alignment_score(series, spec, 1) == 1.0
    # slice 0 runs half a cycle away on both axes
    assert alignment_score(series, spec, 0) == 0.0


def test_alignment_frame_count_mismatch():
    spec = default_phantom_spec(seed=6, grid_size=16, n_slices=1, n_frames=4)
    with pytest.raises(ValueError, match="frames"):
        alignment_score(np.zeros((3, 1, 2, 16, 16)), spec, 0)


def test_kl_summary_per_slice():
    bank = VariationalLatentBank(2, 3, 2, initial_deviation=1.0)
    with torch.no_grad():
        bank.mu[1] = 1.0
    summary = kl_summary(bank)
    assert summary[0] == pytest.approx(0.0, abs=1e-12)
    assert summary[1] == pytest.approx(1.0, rel=1e-12)


def test_empirical_kl():
    """Standard-normal trajectories score near zero; a collapsed one is infinite."""
    latents = np.random.default_rng(4).standard_normal((20000, 3))
    assert empirical_kl(latents) == pytest.approx(0.0, abs=5e-3)
    assert empirical_kl(np.ones((10, 2))) == math.inf

    bank = VariationalLatentBank(1, 4, 2)
    assert empirical_kl_summary(bank) == [math.inf]


def test_gaussian_log_likelihood():
    op = PixelMaskOperator((1, 2, 2), (0, 3))
    x = torch.tensor([[[1.0, 2.0], [3.0, 4.0]]], dtype=torch.float64)
    b = torch.tensor([1.0, 5.0], dtype=torch.float64)

    expected = -1.0 / (2 * 0.5) - math.log(2 * math.pi * 0.5)
    assert gaussian_log_likelihood(op, x, b, 0.5) == pytest.approx(expected)


def test_psnr_constant_offset_example():
    """ref = 0, recon = 0.5: MSE 0.25, PSNR = 10 log10(16)."""
    ref = np.zeros((1, 8, 8))
    assert psnr(ref, ref + 0.5) == pytest.approx(10 * math.log10(16))


def test_ser_scale_law():
    """ser(ref, a ref) = -20 log10 |1 - a|."""
    rng = np.random.default_rng(8)
    ref = rng.normal(size=(2, 6, 6))
    for alpha in rng.uniform(-2, 3, size=10):
        assert ser(ref, alpha * ref) == pytest.approx(-20 * math.log10(abs(1 - alpha)), rel=1e-9)
    assert ser(ref, ref / 2) == pytest.approx(6.0206, abs=1e-4)


def test_ssim_is_symmetric():
    rng = np.random.default_rng(9)
    for _ in range(5):
        a = rng.uniform(-1, 1, size=(2, 16, 16))
        b = rng.uniform(-1, 1, size=(2, 16, 16))
        assert ssim(a, b) == pytest.approx(ssim(b, a), abs=1e-12)


def test_metrics_are_per_frame():
    """Permuting frames permutes the per-frame metric rows."""
    rng = np.random.default_rng(10)
    reference = rng.uniform(0.1, 1, size=(3, 1, 2, 16, 16))
    series = reference + 0.05 * rng.normal(size=reference.shape)
    order = [2, 0, 1]

    straight = evaluate_series(series, reference, metrics=("ser",)).values("ser")
    permuted = evaluate_series(series[order], reference[order], metrics=("ser",)).values("ser")
    assert permuted == [straight[i] for i in order]


def test_kl_summary_shifted_slice():
    """A slice whose means sit at (1, 0, 0) with s = 1 averages KL 0.5."""
    bank = VariationalLatentBank(2, 4, 3, initial_deviation=1.0)
    with torch.no_grad():
        bank.mu[1, :, 0] = 1.0
    summary = kl_summary(bank)
    assert summary[1] == pytest.approx(0.5, rel=1e-12)


def test_zero_generator_reconstructs_zeros(small_net):
    net = small_net(n_slices=2)
    net.set_theta(torch.zeros(net.parameter_count(), dtype=torch.float64))
    bank = VariationalLatentBank(2, 3, 3)
    assert np.all(reconstruct_series(net, bank, 1) == 0)


def test_data_term_is_monte_carlo_log_likelihood(small_net):
    """
    Averaged over draws c = mu + s * eps, the summed per-frame log N(b; A D(c), sigma2 I)
    equals -data / (2 sigma2) minus the constant sum of (m_i / 2) log(2 pi sigma2).
    """
    dataset = make_dataset(grid=8, n_slices=2, n_frames=3, rows=3, sigma=0.1)
    net = small_net(n_slices=2)
    rng = np.random.default_rng(8)
    bank = VariationalLatentBank.from_arrays(rng.standard_normal((2, 3, 3)), rng.uniform(-2.0, 0.0, (2, 3, 3)))
    config = LossConfig(sigma2=0.0, lambda1=0.0, lambda2=0.0)
    sigma2 = 0.01
    constant = sum(0.5 * f.b.numel() * math.log(2 * math.pi * sigma2) for f in dataset.frames)
    s = bank.deviation().detach()

    data, log_lik = [], []
    for _ in range(50):
        eps = torch.from_numpy(rng.standard_normal((6, 3)))
        data.append(loss_multislice(net, bank, dataset, config, eps).terms["data"])
        with torch.no_grad():
            total = 0.0
            for i, frame in enumerate(dataset.frames):
                c = bank.mu[frame.z, frame.t] + s[frame.z, frame.t] * eps[i]
                total += gaussian_log_likelihood(frame.operator, net(c), frame.b, sigma2)
        log_lik.append(total)
    data, log_lik = np.array(data), np.array(log_lik)

    assert np.mean(log_lik) == pytest.approx(-np.mean(data) / (2 * sigma2) - constant, rel=1e-9)
    assert np.allclose(log_lik + data / (2 * sigma2), -constant, rtol=1e-9)
    assert np.std(data) > 0
