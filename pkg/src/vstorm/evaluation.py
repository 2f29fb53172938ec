"""
Evaluation

Reconstruction metrics (SER, PSNR, SSIM), latent-swap reconstruction of a
multislice model, alignment scoring against the phantom, and KL summaries of
the learned latents.

Complex images are compared by magnitude for PSNR/SSIM and as stacked
real/imaginary vectors for SER.
"""

import logging
import math

import numpy as np
import torch
import torch.nn.functional as F
from torchmetrics.functional.image import structural_similarity_index_measure

from .data import phantom_volume, phase_at
from .latent import kl_unit_gaussian
from .utils.images import magnitude
from .utils.models import MetricReport

logger = logging.getLogger(__name__)

DB_CAP = 300.0
DEFAULT_PEAK = 2.0
SSIM_SIGMA = 1.5
SSIM_WINDOW = 11
SSIM_K1 = 0.01
SSIM_K2 = 0.03


def _numpy(x):
    if isinstance(x, torch.Tensor):
        return x.detach().numpy()
    return np.asarray(x, dtype=np.float64)


def _check_shapes(ref, recon):
    if ref.shape != recon.shape:
        raise ValueError(f"shape mismatch: {ref.shape} vs {recon.shape}")


def ser(ref, recon):
    """20 log10(||ref|| / ||ref - recon||) in dB, capped at +300 dB."""
    ref, recon = _numpy(ref), _numpy(recon)
    _check_shapes(ref, recon)
    ref_norm = np.linalg.norm(ref.ravel())
    if ref_norm == 0:
        raise ValueError("SER is undefined for an all-zero reference")
    err_norm = np.linalg.norm((ref - recon).ravel())
    if err_norm == 0:
        return DB_CAP
    return min(DB_CAP, 20.0 * math.log10(ref_norm / err_norm))


def psnr(ref, recon, peak=DEFAULT_PEAK):
    """10 log10(peak^2 / MSE) in dB on magnitudes, capped at +300 dB."""
    ref, recon = magnitude(_numpy(ref)), magnitude(_numpy(recon))
    _check_shapes(ref, recon)
    mse = float(np.mean((ref - recon) ** 2))
    if mse == 0:
        return DB_CAP
    return min(DB_CAP, 10.0 * math.log10(peak * peak / mse))


def ssim(ref, recon, data_range=DEFAULT_PEAK):
    """Gaussian-window SSIM (sigma 1.5, 11x11) on magnitudes."""
    ref, recon = magnitude(_numpy(ref)), magnitude(_numpy(recon))
    _check_shapes(ref, recon)
    value = structural_similarity_index_measure(
        torch.from_numpy(recon)[None, None],
        torch.from_numpy(ref)[None, None],
        gaussian_kernel=True,
        sigma=SSIM_SIGMA,
        kernel_size=SSIM_WINDOW,
        data_range=data_range,
        k1=SSIM_K1,
        k2=SSIM_K2,
    )
    return float(value)


def reconstruct_series(net, bank, z, sample=False, rng=None):
    """
    Feed slice z's latents to the generator for every frame.

    Uses the posterior means unless sample is set, in which case each frame
    uses one draw from its q.

    Returns:
        Array of shape (n_frames, n_slices, channels, H, W); single-image
        generators get a slice axis of length 1.
    """
    if not 0 <= z < bank.n_slices:
        raise ValueError(f"source slice {z} out of range [0, {bank.n_slices})")
    with torch.no_grad():
        c = bank.mu[z]
        if sample:
            rng = rng or np.random.default_rng(0)
            eps = torch.from_numpy(rng.standard_normal(tuple(c.shape)))
            c = c + F.softplus(bank.rho[z]) * eps
        series = net(c).numpy()
    if not net.spec.volumetric:
        series = series[:, None]
    return series


def reference_series(spec, z):
    """Ground-truth volumes along slice z's phase trajectory, (n_frames, n_slices, 2, H, W)."""
    return np.stack([phantom_volume(spec, *phase_at(spec, z, t)) for t in range(spec.n_frames)])


def _phase_cell(theta, grid):
    return int(round(theta / (2.0 * math.pi / grid))) % grid


def _circular_gap(a, b, grid):
    gap = abs(a - b) % grid
    return min(gap, grid - gap)


def alignment_score(series, spec, z, grid=16):
    """
    Fraction of frames whose best-SER phase pair on a grid x grid lattice lies
    within one cell (circularly, on both axes) of slice z's true phase pair.
    """
    series = _numpy(series)
    if series.shape[0] != spec.n_frames:
        raise ValueError(f"series has {series.shape[0]} frames, phantom has {spec.n_frames}")
    step = 2.0 * math.pi / grid
    candidates = np.stack(
        [phantom_volume(spec, i * step, j * step) for i in range(grid) for j in range(grid)]
    ).reshape(grid * grid, -1)

    hits = 0
    for t in range(spec.n_frames):
        volume = series[t].ravel()
        # SER against candidate k is monotone in -||candidate_k - volume|| / ||candidate_k||
        errors = np.linalg.norm(candidates - volume, axis=1)
        best = int(np.argmax(np.linalg.norm(candidates, axis=1) / np.maximum(errors, 1e-300)))
        best_c, best_r = divmod(best, grid)
        theta_c, theta_r = phase_at(spec, z, t)
        true_c, true_r = _phase_cell(theta_c, grid), _phase_cell(theta_r, grid)
        if _circular_gap(best_c, true_c, grid) <= 1 and _circular_gap(best_r, true_r, grid) <= 1:
            hits += 1
    score = hits / spec.n_frames
    logger.info(f"Alignment score for source slice {z}: {score:.3f}")
    return score


def kl_summary(bank):
    """Per slice, the mean over frames of KL(q || N(0, I))."""
    with torch.no_grad():
        table = kl_unit_gaussian(bank.mu, bank.deviation())
    return [float(v) for v in table.mean(dim=1)]


def empirical_kl(latents):
    """
    KL(N(m, C) || N(0, I)) for the mean and covariance of a latent trajectory.

    Scores deterministic latents, which carry no deviation of their own.
    """
    latents = _numpy(latents)
    mean = latents.mean(axis=0)
    cov = np.atleast_2d(np.cov(latents, rowvar=False, bias=True))
    sign, logdet = np.linalg.slogdet(cov)
    if sign <= 0:
        return math.inf
    return 0.5 * float(np.trace(cov) + mean @ mean - latents.shape[1] - logdet)


def empirical_kl_summary(bank):
    mu = bank.mu.detach().numpy()
    return [empirical_kl(mu[z]) for z in range(bank.n_slices)]


def kl_spread(values):
    """max / min of per-slice KL values; inf when some slice has no KL at all."""
    values = [float(v) for v in values]
    if not values:
        raise ValueError("kl_spread needs at least one slice")
    low = min(values)
    if low <= 0:
        return math.inf
    return max(values) / low


def gaussian_log_likelihood(op, x, b, sigma2):
    """log N(b; A x, sigma2 I) = -||A x - b||^2 / (2 sigma2) - (m / 2) log(2 pi sigma2)."""
    residual = op.apply(x) - torch.as_tensor(b)
    m = residual.numel()
    return float(-(residual * residual).sum() / (2.0 * sigma2) - 0.5 * m * math.log(2.0 * math.pi * sigma2))


def evaluate_series(series, reference, metrics=("psnr", "ssim", "ser")):
    """
    Per-frame, per-slice metrics of a reconstruction against its reference.

    Args:
        series: (frames, slices, channels, H, W) reconstruction.
        reference: Array of the same shape.
        metrics: Subset of ("psnr", "ssim", "ser").

    Returns:
        MetricReport.
    """
    series, reference = _numpy(series), _numpy(reference)
    _check_shapes(series, reference)
    funcs = {"psnr": psnr, "ssim": ssim, "ser": ser}
    report = MetricReport()
    for t in range(series.shape[0]):
        for k in range(series.shape[1]):
            for name in metrics:
                if name == "ser" and not np.any(reference[t, k]):
                    continue
                report.add(t, k, name, funcs[name](reference[t, k], series[t, k]))
    logger.info(
        f"Evaluated {series.shape[0]} frames: "
        + ", ".join(f"{name}={report.aggregate(name):.4g}" for name in metrics)
    )
    return report
