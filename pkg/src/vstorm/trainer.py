"""
Trainer

Assembles the training objective

    sum_i ||A_i D(c_i) - b_i||^2 + sigma2 * sum_i KL(q_i) + lambda1 * ||theta||_1^2
        + lambda2 * sum_z ||grad_t mu||^2

and minimizes it over the generator parameters and the latent bank with Adam,
coarse-to-fine in time. The gstorm-baseline mode uses c = mu and no KL term.
"""

import logging
import math
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .config import MODES, PENALTIES
from .generator import GeneratorNetwork, GeneratorSpec, init_generator, mri_preset, penalty_of
from .latent import FrameNoise, VariationalLatentBank, kl_unit_gaussian, smoothness_term
from .measurement import stack_operators
from .utils.container import read_container, write_container
from .utils.models import EpochRecord, TrainReport

logger = logging.getLogger(__name__)

CHECKPOINT_KIND = "checkpoint"
TERMS = ("data", "kl", "penalty", "smoothness")


class NonFiniteLossError(RuntimeError):
    """A loss term became NaN or infinite during training."""

    def __init__(self, term, epoch, stage):
        self.term = term
        self.epoch = epoch
        self.stage = stage
        super().__init__(f"non-finite {term} term at stage {stage}, epoch {epoch}")


@dataclass(frozen=True)
class LossConfig:
    mode: str = "variational"
    sigma2: float = 1.0
    lambda1: float = 1e-8
    lambda2: float = 1e-2
    penalty: str = "l1sq"
    epochs: int = 300
    lr_theta: float = 1e-3
    lr_latent: float = 1e-2
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    bin_sizes: tuple = (16, 8, 1)
    batch_size: int = 0
    # Keep s at 0+ (c = mu) while still using the variational code path
    freeze_deviation: bool = False
    # KL weight ramps linearly from 1/n to 1 over the first n epochs
    kl_warmup_epochs: int = 0
    log_every: int = 10

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.penalty not in PENALTIES:
            raise ValueError(f"penalty must be one of {PENALTIES}, got {self.penalty!r}")
        for name in ("sigma2", "lambda1", "lambda2"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if self.epochs < 0 or self.batch_size < 0 or self.kl_warmup_epochs < 0:
            raise ValueError("epochs, batch_size and kl_warmup_epochs must be >= 0")
        if not self.bin_sizes or self.bin_sizes[-1] != 1 or min(self.bin_sizes) < 1:
            raise ValueError("bin_sizes must be positive and end with 1")

    @property
    def deterministic(self):
        return self.mode == "gstorm-baseline" or self.freeze_deviation

    @property
    def kl_weight(self):
        return 0.0 if self.deterministic else self.sigma2

    def kl_ramp(self, epoch):
        """Multiplier on the KL weight at a global epoch index."""
        if self.kl_warmup_epochs == 0:
            return 1.0
        return min(1.0, (epoch + 1) / self.kl_warmup_epochs)

    @classmethod
    def from_run_config(cls, cfg, mnist=False):
        """LossConfig from a RunConfig; the MNIST experiment has no time axis."""
        return cls(
            mode=cfg.mode,
            sigma2=cfg.mnist_sigma2 if mnist else cfg.sigma2,
            lambda1=cfg.lambda1,
            lambda2=0.0 if mnist else cfg.lambda2,
            penalty=cfg.penalty,
            epochs=cfg.mnist_epochs if mnist else cfg.epochs,
            lr_theta=cfg.lr_theta,
            lr_latent=cfg.lr_latent,
            beta1=cfg.beta1,
            beta2=cfg.beta2,
            adam_eps=cfg.adam_eps,
            bin_sizes=(1,) if mnist else tuple(cfg.bin_sizes),
            batch_size=cfg.mnist_batch_size if mnist else cfg.batch_size,
            freeze_deviation=cfg.freeze_deviation,
            kl_warmup_epochs=0 if mnist else cfg.kl_warmup_epochs,
            log_every=cfg.log_every,
        )


def latent_dim_for(cfg, n_slices):
    """Configured latent size, or 2 for single-slice and 3 for multislice data."""
    if cfg.latent_dim:
        return cfg.latent_dim
    return 2 if n_slices == 1 else 3


def build_model(cfg, dataset):
    """
    Fresh MRI-preset generator and latent bank sized for a k-t dataset.

    Returns:
        (GeneratorNetwork, VariationalLatentBank)
    """
    height, width = dataset.grid_shape
    n = latent_dim_for(cfg, dataset.n_slices)
    spec = mri_preset(height, width, dataset.n_slices, n, cfg.generator_widths, cfg.leaky_slope)
    net = init_generator(spec, cfg.seed, gain=cfg.init_gain)
    bank = VariationalLatentBank(dataset.n_slices, dataset.n_frames, n, cfg.initial_deviation)
    return net, bank


class FrameBatch:
    """Stacked operators and zero-filled measurements for every frame of a dataset."""

    def __init__(self, stacked, measured, slices, times):
        self.stacked = stacked
        self.measured = measured
        self.slices = slices
        self.times = times

    def __len__(self):
        return len(self.slices)

    @classmethod
    def from_dataset(cls, dataset, net):
        for i, frame in enumerate(dataset.frames):
            if tuple(frame.operator.input_shape) != net.output_shape:
                raise ValueError(
                    f"frame {i} (z={frame.z}, t={frame.t}): operator input {tuple(frame.operator.input_shape)} "
                    f"does not match generator output {net.output_shape}"
                )
        stacked = stack_operators([frame.operator for frame in dataset.frames])
        measured = stacked.embed([frame.b for frame in dataset.frames])
        slices = torch.as_tensor([frame.z for frame in dataset.frames], dtype=torch.long)
        times = torch.as_tensor([frame.t for frame in dataset.frames], dtype=torch.long)
        return cls(stacked, measured, slices, times)

    def bin_counts(self, n_slices, bin_size):
        """(n_slices, n_bins) count of frames that read each latent row."""
        rows = self.times // bin_size
        counts = torch.zeros(n_slices, int(rows.max()) + 1, dtype=torch.float64)
        counts.index_put_((self.slices, rows), torch.ones(len(rows), dtype=torch.float64), accumulate=True)
        return counts


@dataclass
class Objective:
    value: float
    terms: dict
    theta_grad: torch.Tensor
    mu_grad: torch.Tensor
    rho_grad: torch.Tensor


def _objective(net, bank, batch, config, eps, index, bin_size=1, batch_fraction=1.0, kl_ramp=1.0):
    """
    Loss and gradients over the frames in index.

    Frame (z, t) reads latent row (z, t // bin_size). Each row's KL counts once
    per frame that reads it, so a binned bank with every bin copied out to its
    frames has the same loss as the unbinned bank. Global terms (KL over the
    whole bank, the weight penalty, smoothness) are scaled by batch_fraction so
    that one epoch of minibatches adds up to the full-batch objective.
    """
    z = batch.slices[index]
    row = batch.times[index] // bin_size
    mu = bank.mu[z, row]
    if config.deterministic:
        c = mu
    else:
        c = mu + F.softplus(bank.rho[z, row]) * eps[index]

    x = net(c)
    data = batch.stacked.select(index).residual_energy(x, batch.measured[index]).sum()
    if config.deterministic:
        kl = torch.zeros((), dtype=data.dtype)
    else:
        counts = batch.bin_counts(bank.n_slices, bin_size).to(bank.mu.dtype)
        kl = (kl_unit_gaussian(bank.mu, bank.deviation()) * counts).sum() * batch_fraction
    penalty = penalty_of(net, config.penalty) * batch_fraction
    smoothness = smoothness_term(bank.mu) * batch_fraction
    kl_weight = config.kl_weight * kl_ramp
    total = data + kl_weight * kl + config.lambda1 * penalty + config.lambda2 * smoothness

    params = net.flat_parameters()
    grads = torch.autograd.grad(total, [*params, bank.mu, bank.rho], allow_unused=True)
    grads = [torch.zeros_like(p) if g is None else g for p, g in zip([*params, bank.mu, bank.rho], grads)]
    terms = {"data": data.item(), "kl": kl.item(), "penalty": penalty.item(), "smoothness": smoothness.item()}
    return Objective(
        value=total.item(),
        terms=terms,
        theta_grad=torch.cat([g.reshape(-1) for g in grads[:-2]]),
        mu_grad=grads[-2],
        rho_grad=grads[-1],
    )


def _full_objective(net, bank, dataset, config, eps, bin_size):
    n_bins = math.ceil(dataset.n_frames / bin_size)
    if bank.n_slices != dataset.n_slices or bank.n_frames != n_bins:
        raise ValueError(
            f"latent bank ({bank.n_slices}x{bank.n_frames}) does not match dataset "
            f"({dataset.n_slices}x{dataset.n_frames} frames, {n_bins} bins of {bin_size})"
        )
    batch = FrameBatch.from_dataset(dataset, net)
    if eps is None:
        eps = torch.zeros(len(batch), bank.latent_dim, dtype=bank.mu.dtype)
    return _objective(net, bank, batch, config, torch.as_tensor(eps), torch.arange(len(batch)), bin_size)


def loss_single_slice(net, bank, dataset, config, eps=None, bin_size=1):
    """
    Full objective and gradients for a one-slice dataset.

    Args:
        net: GeneratorNetwork.
        bank: VariationalLatentBank with one slice and ceil(frames / bin_size) rows.
        dataset: KTDataset with one slice.
        config: LossConfig.
        eps: (frames, latent_dim) standard-normal draws; None means zeros (c = mu).
        bin_size: Consecutive frames sharing one latent row.

    Returns:
        Objective.
    """
    if dataset.n_slices != 1:
        raise ValueError(f"loss_single_slice needs a one-slice dataset, got {dataset.n_slices} slices")
    return _full_objective(net, bank, dataset, config, eps, bin_size)


def loss_multislice(net, bank, dataset, config, eps=None, bin_size=1):
    """Full objective over all slices; frame (z, t) only sees slice z of the generated volume."""
    for i, frame in enumerate(dataset.frames):
        if not 0 <= frame.z < bank.n_slices:
            raise ValueError(f"frame {i}: slice index {frame.z} out of range [0, {bank.n_slices})")
    return _full_objective(net, bank, dataset, config, eps, bin_size)


# === Optimizer ===


@dataclass
class AdamState:
    step: int
    m: list
    v: list

    @classmethod
    def zeros(cls, params):
        return cls(0, [torch.zeros_like(p) for p in params], [torch.zeros_like(p) for p in params])


def adam_step(params, grads, state, lr, beta1=0.9, beta2=0.999, eps=1e-8):
    """
    One bias-corrected Adam update; params are updated in place.

    Returns:
        The new AdamState.
    """
    step = state.step + 1
    bias1 = 1.0 - beta1**step
    bias2_sqrt = math.sqrt(1.0 - beta2**step)
    m_new, v_new = [], []
    with torch.no_grad():
        for p, g, m, v in zip(params, grads, state.m, state.v):
            m = m * beta1 + g * (1.0 - beta1)
            v = v * beta2 + g * g * (1.0 - beta2)
            denom = v.sqrt() / bias2_sqrt + eps
            p.sub_((lr / bias1) * m / denom)
            m_new.append(m)
            v_new.append(v)
    return AdamState(step, m_new, v_new)


# === Progressive-in-time schedule ===


def stage_epochs(epochs, n_stages):
    """Split epochs evenly over stages; the remainder goes to the last stage."""
    base = epochs // n_stages
    split = [base] * n_stages
    split[-1] += epochs - base * n_stages
    return split


def _rebin(bank, n_frames, old_bin, new_bin):
    """Latent bank at a finer bin size; each new bin copies the coarse bin holding its first frame."""
    n_bins = math.ceil(n_frames / new_bin)
    parent = torch.as_tensor([(j * new_bin) // old_bin for j in range(n_bins)], dtype=torch.long)
    return VariationalLatentBank.from_arrays(
        bank.mu.detach()[:, parent].numpy(), bank.rho.detach()[:, parent].numpy()
    )


def unbin(bank, n_frames, bin_size):
    """Per-frame latent bank from a binned one; frame t copies bin t // bin_size."""
    return _rebin(bank, n_frames, bin_size, 1)


def _batches(n_frames, batch_size, rng):
    if batch_size == 0 or batch_size >= n_frames:
        return [torch.arange(n_frames)]
    order = torch.from_numpy(rng.permutation(n_frames))
    return [order[i : i + batch_size] for i in range(0, n_frames, batch_size)]


def _check_finite(objective, epoch, stage):
    for term in TERMS:
        if not math.isfinite(objective.terms[term]):
            raise NonFiniteLossError(term, epoch, stage)
    if not math.isfinite(objective.value):
        raise NonFiniteLossError("total", epoch, stage)


def _check_deviation(bank, config, epoch, stage):
    # softplus(rho) underflows to 0 for rho below about -745, where -log s is infinite
    if config.deterministic:
        return
    with torch.no_grad():
        if not bool((bank.deviation() > 0).all()):
            raise NonFiniteLossError("kl", epoch, stage)


def train(config, net, bank, dataset, seed, checkpoint_dir=None, config_text=""):
    """
    Fit the generator and latent bank to a dataset.

    Stages follow config.bin_sizes: frames in the same bin share one latent
    distribution, and each finer stage inherits its latents by copy. Adam state
    for theta carries across stages; latent state restarts with each stage.

    Args:
        config: LossConfig.
        net: GeneratorNetwork, updated in place.
        bank: VariationalLatentBank covering every frame, updated in place.
        dataset: KTDataset.
        seed: Seed for the per-frame noise streams and minibatch order.
        checkpoint_dir: Where stage checkpoints go; None skips them.
        config_text: Config snapshot embedded in checkpoints.

    Returns:
        TrainReport.
    """
    report = TrainReport(mode=config.mode, seed=seed)
    if config.epochs == 0:
        logger.info("epochs=0, nothing to train")
        return report
    if bank.n_slices != dataset.n_slices or bank.n_frames != dataset.n_frames:
        raise ValueError("latent bank does not match dataset")

    start = time.perf_counter()
    batch = FrameBatch.from_dataset(dataset, net)
    noise = FrameNoise(seed, len(batch), bank.latent_dim)
    order_rng = np.random.default_rng([seed, 1])
    theta_state = AdamState.zeros(net.flat_parameters())

    n_frames = dataset.n_frames
    stage_bank = _rebin(bank, n_frames, 1, config.bin_sizes[0])
    previous_bin = config.bin_sizes[0]
    epoch_index = 0

    for stage, (bin_size, n_epochs) in enumerate(
        zip(config.bin_sizes, stage_epochs(config.epochs, len(config.bin_sizes)))
    ):
        if stage > 0:
            stage_bank = _rebin(stage_bank, n_frames, previous_bin, bin_size)
        previous_bin = bin_size
        latent_state = AdamState.zeros(stage_bank.parameters())
        logger.info(f"Stage {stage}: bin size {bin_size}, {n_epochs} epochs")

        for _ in range(n_epochs):
            eps = noise.draw()
            index_sets = _batches(len(batch), config.batch_size, order_rng)
            sums = dict.fromkeys(TERMS, 0.0)
            total = 0.0
            kl_ramp = config.kl_ramp(epoch_index)
            for index in index_sets:
                _check_deviation(stage_bank, config, epoch_index, stage)
                objective = _objective(
                    net, stage_bank, batch, config, eps, index, bin_size, len(index) / len(batch), kl_ramp
                )
                _check_finite(objective, epoch_index, stage)
                for term in TERMS:
                    sums[term] += objective.terms[term]
                total += objective.value

                theta_grads = _split(objective.theta_grad, net.flat_parameters())
                theta_state = adam_step(
                    net.flat_parameters(), theta_grads, theta_state,
                    config.lr_theta, config.beta1, config.beta2, config.adam_eps,
                )
                latent_state = adam_step(
                    stage_bank.parameters(), [objective.mu_grad, objective.rho_grad], latent_state,
                    config.lr_latent, config.beta1, config.beta2, config.adam_eps,
                )

            record = EpochRecord(stage, epoch_index, bin_size, total, **sums)
            report.history.append(record)
            if config.log_every and epoch_index % config.log_every == 0:
                logger.info(
                    f"epoch {epoch_index}: total={record.total:.6g} data={record.data:.6g} "
                    f"kl={record.kl:.6g} penalty={record.penalty:.6g} smooth={record.smoothness:.6g}"
                )
            epoch_index += 1

        records = report.stage_records(stage)
        if len(records) > 1 and records[-1].total > records[0].total:
            logger.warning(f"Stage {stage} loss rose from {records[0].total:.6g} to {records[-1].total:.6g}")

        if checkpoint_dir is not None:
            full = _rebin(stage_bank, n_frames, bin_size, 1)
            save_checkpoint(Path(checkpoint_dir) / f"stage{stage}.ckpt", net, full, seed, stage, config_text)

    with torch.no_grad():
        bank.mu.copy_(stage_bank.mu)
        bank.rho.copy_(stage_bank.rho)
    report.wall_time = time.perf_counter() - start
    logger.info(f"Training finished in {report.wall_time:.1f}s, final total {report.final.total:.6g}")
    return report


def _split(flat, params):
    out = []
    offset = 0
    for p in params:
        out.append(flat[offset : offset + p.numel()].reshape(p.shape))
        offset += p.numel()
    return out


# === Checkpoints ===


def save_checkpoint(path, net, bank, seed, stage=-1, config_text=""):
    header = {
        "generator": net.spec.to_dict(),
        "seed": seed,
        "stage": stage,
        "config": config_text,
    }
    arrays = {"theta": net.theta().numpy(), **bank.to_arrays()}
    write_container(path, CHECKPOINT_KIND, header, arrays)


def load_checkpoint(path):
    """
    Returns:
        (GeneratorNetwork, VariationalLatentBank, header dict)
    """
    _, header, arrays = read_container(path, CHECKPOINT_KIND)
    net = GeneratorNetwork(GeneratorSpec.from_dict(header["generator"]))
    net.set_theta(torch.from_numpy(arrays["theta"]))
    bank = VariationalLatentBank.from_arrays(arrays["latent_mu"], arrays["latent_rho"])
    logger.info(f"Loaded checkpoint from {path} (stage {header['stage']})")
    return net, bank, header
