"""
Variational Latents

One Gaussian q = N(mu, diag(s^2)) per frame, with s = softplus(rho). Holds the
reparameterized sampling, the closed-form KL to the unit Gaussian prior, and
the temporal-smoothness penalty on the means.
"""

import csv
import logging
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

logger = logging.getLogger(__name__)

DEFAULT_DEVIATION = 0.1


def softplus_inverse(s):
    """rho with softplus(rho) = s, for s > 0."""
    s = torch.as_tensor(s, dtype=torch.float64)
    if (s <= 0).any():
        raise ValueError("softplus_inverse needs s > 0")
    return s + torch.log(-torch.expm1(-s))


class VariationalLatentBank:
    """
    Means and raw deviations for every (slice, time) frame.

    mu and rho are leaf tensors of shape (n_slices, n_frames, latent_dim).
    Flat frame index i = z * n_frames + t.
    """

    def __init__(self, n_slices, n_frames, latent_dim, initial_deviation=DEFAULT_DEVIATION, dtype=torch.float64):
        if n_slices < 1 or n_frames < 1 or latent_dim < 1:
            raise ValueError("latent bank needs at least one slice, frame and latent coordinate")
        shape = (n_slices, n_frames, latent_dim)
        self.mu = torch.zeros(shape, dtype=dtype, requires_grad=True)
        rho0 = softplus_inverse(initial_deviation).item()
        self.rho = torch.full(shape, rho0, dtype=dtype, requires_grad=True)

    @property
    def n_slices(self):
        return self.mu.shape[0]

    @property
    def n_frames(self):
        return self.mu.shape[1]

    @property
    def latent_dim(self):
        return self.mu.shape[2]

    def __len__(self):
        return self.n_slices * self.n_frames

    def deviation(self):
        """s = softplus(rho), differentiable."""
        return F.softplus(self.rho)

    def frame_index(self, z, t):
        if not (0 <= z < self.n_slices and 0 <= t < self.n_frames):
            raise ValueError(f"frame (z={z}, t={t}) outside bank of {self.n_slices}x{self.n_frames}")
        return z * self.n_frames + t

    def locate(self, frame):
        """Flat frame index -> (z, t)."""
        if not 0 <= frame < len(self):
            raise ValueError(f"unknown frame {frame}; bank has {len(self)} frames")
        return divmod(frame, self.n_frames)

    def parameters(self):
        return [self.mu, self.rho]

    def to_arrays(self):
        return {
            "latent_mu": self.mu.detach().numpy().copy(),
            "latent_rho": self.rho.detach().numpy().copy(),
        }

    @classmethod
    def from_arrays(cls, mu, rho):
        mu = np.asarray(mu, dtype=np.float64)
        rho = np.asarray(rho, dtype=np.float64)
        if mu.shape != rho.shape or mu.ndim != 3:
            raise ValueError(f"latent arrays must share a (slices, frames, dim) shape, got {mu.shape} and {rho.shape}")
        bank = cls(*mu.shape)
        with torch.no_grad():
            bank.mu.copy_(torch.from_numpy(mu))
            bank.rho.copy_(torch.from_numpy(rho))
        return bank

    def copy(self):
        arrays = self.to_arrays()
        return VariationalLatentBank.from_arrays(arrays["latent_mu"], arrays["latent_rho"])

    def export_csv(self, path):
        """Write (time, slice, mu_1..mu_n, s_1..s_n) rows."""
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        mu = self.mu.detach().numpy()
        s = self.deviation().detach().numpy()
        n = self.latent_dim
        with open(path, "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(["time", "slice", *[f"mu_{k + 1}" for k in range(n)], *[f"s_{k + 1}" for k in range(n)]])
            for z in range(self.n_slices):
                for t in range(self.n_frames):
                    writer.writerow([t, z, *[repr(float(v)) for v in mu[z, t]], *[repr(float(v)) for v in s[z, t]]])
        logger.info(f"Wrote latent trajectories for {len(self)} frames to {path}")


@dataclass
class LatentSample:
    c: torch.Tensor
    eps: torch.Tensor
    frame: int


def sample(bank, frame, eps):
    """
    c = mu + s * eps for one flat frame index; differentiable in mu and rho.

    eps may carry leading draw axes, e.g. (n_draws, latent_dim).
    """
    z, t = bank.locate(frame)
    eps = torch.as_tensor(eps, dtype=bank.mu.dtype)
    if eps.dim() < 1 or eps.shape[-1] != bank.latent_dim:
        raise ValueError(f"eps must have length {bank.latent_dim}, got shape {tuple(eps.shape)}")
    if not torch.isfinite(eps).all():
        raise ValueError("eps contains non-finite values")
    c = bank.mu[z, t] + F.softplus(bank.rho[z, t]) * eps
    return LatentSample(c=c, eps=eps, frame=frame)


def kl_unit_gaussian(mu, s, n=None):
    """
    KL(N(mu, diag(s^2)) || N(0, I)) = (-log det - n + trace + mu^T mu) / 2.

    Reduces over the last axis; leading axes are kept, so a (S, T, n) bank gives
    an (S, T) table.
    """
    mu = torch.as_tensor(mu, dtype=torch.float64) if not isinstance(mu, torch.Tensor) else mu
    s = torch.as_tensor(s, dtype=mu.dtype) if not isinstance(s, torch.Tensor) else s
    if (s <= 0).any():
        raise ValueError("kl_unit_gaussian needs s > 0")
    if n is not None and mu.shape[-1] != n:
        raise ValueError(f"latent length {mu.shape[-1]} does not match n={n}")
    return 0.5 * (-2.0 * torch.log(s) - 1.0 + s * s + mu * mu).sum(dim=-1)


def smoothness_term(mu):
    diff = mu[..., 1:, :] - mu[..., :-1, :]
    return diff.pow(2).sum()


def temporal_smoothness(bank, z):
    """
    sum_t ||mu(t+1, z) - mu(t, z)||^2 and its gradient with respect to mu.

    Only the means are penalized. A single frame gives 0.

    Returns:
        (value as float, gradient as a tensor shaped like bank.mu)
    """
    if not 0 <= z < bank.n_slices:
        raise ValueError(f"slice {z} out of range [0, {bank.n_slices})")
    mu = bank.mu.detach().clone().requires_grad_(True)
    value = smoothness_term(mu[z])
    (grad,) = torch.autograd.grad(value, mu, allow_unused=True)
    if grad is None:
        grad = torch.zeros_like(mu)
    return value.item(), grad


class FrameNoise:
    """
    Per-frame standard-normal streams, one child SeedSequence per frame.

    The draw for frame i at epoch e only depends on (seed, i, e).
    """

    def __init__(self, seed, n_frames, latent_dim):
        children = np.random.SeedSequence(seed).spawn(n_frames)
        self.streams = [np.random.default_rng(child) for child in children]
        self.latent_dim = latent_dim

    def draw(self):
        """One (n_frames, latent_dim) draw; call once per epoch."""
        return torch.from_numpy(np.stack([rng.standard_normal(self.latent_dim) for rng in self.streams]))


def monte_carlo_kl(mu, s, n_draws, seed=0):
    """
    Estimate E_q[log q(c) - log p(c)] by sampling; returns (mean, standard error).
    """
    mu = np.asarray(mu, dtype=np.float64)
    s = np.asarray(s, dtype=np.float64)
    rng = np.random.default_rng(seed)
    eps = rng.standard_normal((n_draws, mu.size))
    c = mu + s * eps
    log_q = -0.5 * (eps**2).sum(axis=1) - np.log(s).sum() - 0.5 * mu.size * math.log(2 * math.pi)
    log_p = -0.5 * (c**2).sum(axis=1) - 0.5 * mu.size * math.log(2 * math.pi)
    diff = log_q - log_p
    return float(diff.mean()), float(diff.std(ddof=1) / math.sqrt(n_draws))
