"""
Measurement Operators

Linear forward models that observe images and volumes: pixel masks,
row-subsampled unitary Fourier transforms with optional coil maps, and
slice-extracting Fourier operators for multislice volumes.

Complex images travel as two real channels (real, imaginary) in the
channel axis at position -3. Measurement vectors are real; complex samples
are stored as interleaved (real, imaginary) pairs. Operators are immutable.
"""

import logging
import math
from dataclasses import dataclass
from functools import cached_property

import numpy as np
import torch

logger = logging.getLogger(__name__)

PIXEL_MASK = "pixel_mask"
FOURIER = "fourier"
SLICE_FOURIER = "slice_fourier"


def _as_tensor(x):
    if isinstance(x, torch.Tensor):
        return x
    return torch.as_tensor(np.asarray(x, dtype=np.float64))


def to_complex(x):
    """(..., 2, H, W) real channels -> (..., H, W) complex."""
    if x.dim() < 3 or x.shape[-3] != 2:
        raise ValueError(f"expected a 2-channel (real, imaginary) grid, got shape {tuple(x.shape)}")
    return torch.complex(x[..., 0, :, :], x[..., 1, :, :])


def to_channels(z):
    """(..., H, W) complex -> (..., 2, H, W) real channels."""
    return torch.stack((z.real, z.imag), dim=-3)


def dft2_unitary(img):
    """Unitary 2D DFT of a 2-channel grid; batch dimensions are carried along."""
    img = _as_tensor(img)
    if not torch.isfinite(img).all():
        raise ValueError("dft2_unitary input contains non-finite values")
    return to_channels(torch.fft.fft2(to_complex(img), norm="ortho"))


def idft2_unitary(img):
    """Inverse of dft2_unitary."""
    img = _as_tensor(img)
    if not torch.isfinite(img).all():
        raise ValueError("idft2_unitary input contains non-finite values")
    return to_channels(torch.fft.ifft2(to_complex(img), norm="ortho"))


def synthetic_coil_maps(height, width, n_coils, width_scale=0.6, dtype=torch.complex128):
    """
    Smooth coil sensitivities: Gaussian bumps placed around the field of view
    with a gentle linear phase, normalized so that sum_c |S_c|^2 = 1 per pixel.

    Returns:
        Complex tensor of shape (n_coils, height, width).
    """
    if n_coils < 1:
        raise ValueError("n_coils must be >= 1")
    y = torch.linspace(-1.0, 1.0, height, dtype=torch.float64)[:, None]
    x = torch.linspace(-1.0, 1.0, width, dtype=torch.float64)[None, :]
    maps = []
    for c in range(n_coils):
        angle = 2.0 * math.pi * c / n_coils
        cy, cx = 0.8 * math.sin(angle), 0.8 * math.cos(angle)
        magnitude = torch.exp(-((y - cy) ** 2 + (x - cx) ** 2) / (2.0 * width_scale**2))
        phase = 0.5 * (x * math.cos(angle) + y * math.sin(angle))
        maps.append(torch.polar(magnitude, phase.expand(height, width)))
    maps = torch.stack(maps)
    norm = torch.sqrt((maps.abs() ** 2).sum(dim=0, keepdim=True))
    return (maps / norm).to(dtype)


def _check_input(op, x, shape):
    if tuple(x.shape[-len(shape) :]) != tuple(shape) or x.dim() < len(shape):
        raise ValueError(
            f"{type(op).__name__} expects input of shape (..., {', '.join(map(str, shape))}), "
            f"got {tuple(x.shape)}"
        )


def _check_measurement(op, b):
    if b.dim() < 1 or b.shape[-1] != op.measurement_length:
        raise ValueError(
            f"{type(op).__name__} expects measurements of length {op.measurement_length}, "
            f"got shape {tuple(b.shape)}"
        )


@dataclass(frozen=True)
class PixelMaskOperator:
    """Keeps a subset of pixels (the same subset in every channel), times scale."""

    shape: tuple  # (channels, height, width)
    kept_indices: tuple
    scale: float = 1.0

    kind = PIXEL_MASK

    def __post_init__(self):
        object.__setattr__(self, "shape", tuple(int(s) for s in self.shape))
        object.__setattr__(self, "kept_indices", tuple(int(i) for i in self.kept_indices))
        if len(self.shape) != 3:
            raise ValueError(f"shape must be (channels, height, width), got {self.shape}")
        n_pixels = self.shape[1] * self.shape[2]
        kept = self.kept_indices
        if any(b <= a for a, b in zip(kept, kept[1:])):
            raise ValueError("kept_indices must be sorted and unique")
        if kept and (kept[0] < 0 or kept[-1] >= n_pixels):
            raise ValueError(f"kept_indices out of bounds for {n_pixels} pixels")
        if self.scale <= 0:
            raise ValueError("scale must be positive")

    @cached_property
    def _index(self):
        return torch.as_tensor(self.kept_indices, dtype=torch.long)

    @property
    def input_shape(self):
        return self.shape

    @property
    def measurement_length(self):
        return self.shape[0] * len(self.kept_indices)

    def apply(self, x):
        x = _as_tensor(x)
        _check_input(self, x, self.shape)
        channels, height, width = self.shape
        flat = x.reshape(*x.shape[:-3], channels, height * width)
        kept = flat.index_select(flat.dim() - 1, self._index) * self.scale
        return kept.reshape(*x.shape[:-3], self.measurement_length)

    def adjoint(self, b):
        b = _as_tensor(b)
        _check_measurement(self, b)
        channels, height, width = self.shape
        values = b.reshape(*b.shape[:-1], channels, len(self.kept_indices)) * self.scale
        out = values.new_zeros(*b.shape[:-1], channels, height * width)
        out = out.index_copy(out.dim() - 1, self._index, values)
        return out.reshape(*b.shape[:-1], channels, height, width)

    def weights(self, dtype=torch.float64):
        """Dense sampling weights over the pixel grid (scale where kept, else 0)."""
        w = torch.zeros(self.shape[1] * self.shape[2], dtype=dtype)
        w[self._index] = self.scale
        return w

    def to_record(self):
        return {
            "kind": self.kind,
            "shape": list(self.shape),
            "kept": list(self.kept_indices),
            "scale": self.scale,
        }


@dataclass(frozen=True, eq=False)
class SubsampledFourierOperator:
    """Row-restricted unitary 2D DFT, applied per coil after multiplying by its map."""

    shape: tuple  # (height, width)
    kept_rows: tuple
    scale: float = 1.0
    coil_maps: torch.Tensor | None = None  # complex (n_coils, height, width)
    noise_free: bool = True

    kind = FOURIER

    def __post_init__(self):
        object.__setattr__(self, "shape", tuple(int(s) for s in self.shape))
        object.__setattr__(self, "kept_rows", tuple(int(r) for r in self.kept_rows))
        height, width = self.shape
        rows = self.kept_rows
        if any(b <= a for a, b in zip(rows, rows[1:])):
            raise ValueError("kept_rows must be sorted and unique")
        if rows and (rows[0] < 0 or rows[-1] >= height):
            raise ValueError(f"kept_rows must lie in [0, {height})")
        if self.scale <= 0:
            raise ValueError("scale must be positive")
        if self.coil_maps is not None:
            maps = self.coil_maps
            if not torch.is_complex(maps):
                maps = to_complex(_as_tensor(maps))
            if maps.dim() != 3 or tuple(maps.shape[-2:]) != self.shape:
                raise ValueError(
                    f"coil maps of shape {tuple(maps.shape)} do not match image shape {self.shape}"
                )
            object.__setattr__(self, "coil_maps", maps)

    @cached_property
    def _rows(self):
        return torch.as_tensor(self.kept_rows, dtype=torch.long)

    @property
    def input_shape(self):
        return (2, *self.shape)

    @property
    def n_coils(self):
        return 1 if self.coil_maps is None else self.coil_maps.shape[0]

    @property
    def measurement_length(self):
        return self.n_coils * len(self.kept_rows) * self.shape[1] * 2

    @property
    def undersampling_factor(self):
        return self.shape[0] / max(len(self.kept_rows), 1)

    def _coil_images(self, z):
        z = z.unsqueeze(-3)
        if self.coil_maps is not None:
            z = z * self.coil_maps
        return z

    def apply(self, x):
        x = _as_tensor(x)
        _check_input(self, x, self.input_shape)
        kspace = torch.fft.fft2(self._coil_images(to_complex(x)), norm="ortho")
        kept = kspace.index_select(kspace.dim() - 2, self._rows) * self.scale
        return torch.view_as_real(kept).reshape(*x.shape[:-3], self.measurement_length)

    def adjoint(self, b):
        b = _as_tensor(b)
        _check_measurement(self, b)
        height, width = self.shape
        lead = b.shape[:-1]
        kept = torch.view_as_complex(
            b.reshape(*lead, self.n_coils, len(self.kept_rows), width, 2).contiguous()
        )
        kspace = kept.new_zeros(*lead, self.n_coils, height, width)
        kspace = kspace.index_copy(kspace.dim() - 2, self._rows, kept * self.scale)
        coil_images = torch.fft.ifft2(kspace, norm="ortho")
        if self.coil_maps is not None:
            image = (coil_images * self.coil_maps.conj()).sum(dim=-3)
        else:
            image = coil_images.squeeze(-3)
        return to_channels(image)

    def weights(self, dtype=torch.float64):
        """Dense sampling weights over k-space rows (scale where kept, else 0)."""
        w = torch.zeros(self.shape[0], dtype=dtype)
        w[self._rows] = self.scale
        return w

    def to_record(self):
        return {
            "kind": self.kind,
            "shape": list(self.shape),
            "rows": list(self.kept_rows),
            "scale": self.scale,
            "coils": self.coil_maps is not None,
            "noise_free": self.noise_free,
        }


@dataclass(frozen=True, eq=False)
class SliceFourierOperator:
    """Extracts slice z of a volume, then measures it with the inner operator."""

    slice_index: int
    n_slices: int
    inner: SubsampledFourierOperator

    kind = SLICE_FOURIER

    def __post_init__(self):
        if not 0 <= self.slice_index < self.n_slices:
            raise ValueError(f"slice index {self.slice_index} out of range [0, {self.n_slices})")

    @property
    def input_shape(self):
        return (self.n_slices, *self.inner.input_shape)

    @property
    def measurement_length(self):
        return self.inner.measurement_length

    def apply(self, x):
        x = _as_tensor(x)
        _check_input(self, x, self.input_shape)
        return self.inner.apply(x[..., self.slice_index, :, :, :])

    def adjoint(self, b):
        image = self.inner.adjoint(_as_tensor(b))
        zeros = torch.zeros_like(image)
        slices = [image if z == self.slice_index else zeros for z in range(self.n_slices)]
        return torch.stack(slices, dim=-4)

    def weights(self, dtype=torch.float64):
        return self.inner.weights(dtype)

    def to_record(self):
        return {
            "kind": self.kind,
            "slice": self.slice_index,
            "n_slices": self.n_slices,
            "inner": self.inner.to_record(),
        }


def apply(op, x):
    """Forward measurement A x."""
    return op.apply(x)


def adjoint(op, b):
    """Adjoint A^T b."""
    return op.adjoint(b)


def operator_from_record(record, coil_maps=None):
    """Rebuild an operator from its to_record() description."""
    kind = record["kind"]
    if kind == PIXEL_MASK:
        return PixelMaskOperator(tuple(record["shape"]), tuple(record["kept"]), record["scale"])
    if kind == FOURIER:
        if record["coils"] and coil_maps is None:
            raise ValueError("operator record references coil maps but none were provided")
        return SubsampledFourierOperator(
            tuple(record["shape"]),
            tuple(record["rows"]),
            record["scale"],
            coil_maps if record["coils"] else None,
            record.get("noise_free", True),
        )
    if kind == SLICE_FOURIER:
        return SliceFourierOperator(
            record["slice"], record["n_slices"], operator_from_record(record["inner"], coil_maps)
        )
    raise ValueError(f"unknown operator kind: {kind}")


class StackedOperator:
    """
    Frame-wise operators of one kind applied to a batch in a single pass.

    Works in a dense layout: the full pixel grid (masks) or full k-space
    (Fourier) multiplied by per-frame sampling weights. Residuals against
    zero-filled measured data therefore have exactly the energy of
    sum_i ||A_i x_i - b_i||^2.
    """

    def __init__(self, kind, input_shape, weights, operators=(), slice_indices=None, coil_maps=None):
        self.kind = kind
        self.input_shape = tuple(input_shape)
        self.weights = weights
        self.operators = tuple(operators)
        self.slice_indices = slice_indices
        self.coil_maps = coil_maps

    @classmethod
    def from_operator(cls, op, weights):
        """Operator with op's geometry and explicit dense weights of shape (batch, n)."""
        if isinstance(op, PixelMaskOperator):
            return cls(PIXEL_MASK, op.input_shape, weights)
        inner = op.inner if isinstance(op, SliceFourierOperator) else op
        return cls(FOURIER, inner.input_shape, weights, coil_maps=inner.coil_maps)

    def __len__(self):
        return self.weights.shape[0]

    def select(self, index):
        """Sub-stack for the frames in index (a LongTensor)."""
        ops = [self.operators[i] for i in index.tolist()] if self.operators else ()
        slices = None if self.slice_indices is None else self.slice_indices[index]
        return StackedOperator(
            self.kind, self.input_shape, self.weights[index], ops, slices, self.coil_maps
        )

    def _slice_images(self, x):
        if self.slice_indices is None:
            return x
        return x[torch.arange(x.shape[0]), self.slice_indices]

    def apply_dense(self, x):
        if self.kind == PIXEL_MASK:
            _, height, width = self.input_shape
            flat = x.reshape(*x.shape[:-2], height * width)
            return flat * self.weights.unsqueeze(-2)
        z = to_complex(self._slice_images(x)).unsqueeze(-3)
        if self.coil_maps is not None:
            z = z * self.coil_maps
        return torch.fft.fft2(z, norm="ortho") * self.weights[:, None, :, None]

    def adjoint_dense(self, y):
        if self.kind == PIXEL_MASK:
            _, height, width = self.input_shape
            return (y * self.weights.unsqueeze(-2)).reshape(*y.shape[:-1], height, width)
        coil_images = torch.fft.ifft2(y * self.weights[:, None, :, None], norm="ortho")
        if self.coil_maps is not None:
            image = (coil_images * self.coil_maps.conj()).sum(dim=-3)
        else:
            image = coil_images.squeeze(-3)
        image = to_channels(image)
        if self.slice_indices is None:
            return image
        n_slices = self.operators[0].n_slices
        volume = image.new_zeros(image.shape[0], n_slices, *image.shape[1:])
        volume[torch.arange(image.shape[0]), self.slice_indices] = image
        return volume

    def embed(self, measurements):
        """Zero-filled dense layout of per-frame measurement vectors."""
        if self.kind == PIXEL_MASK:
            channels, height, width = self.input_shape
            out = torch.zeros(len(self.operators), channels, height * width, dtype=torch.float64)
            for i, (op, b) in enumerate(zip(self.operators, measurements)):
                out[i][:, op._index] = _as_tensor(b).reshape(channels, -1)
            return out
        _, height, width = self.input_shape
        n_coils = 1 if self.coil_maps is None else self.coil_maps.shape[0]
        out = torch.zeros(len(self.operators), n_coils, height, width, dtype=torch.complex128)
        for i, (op, b) in enumerate(zip(self.operators, measurements)):
            inner = op.inner if isinstance(op, SliceFourierOperator) else op
            rows = torch.view_as_complex(
                _as_tensor(b).reshape(n_coils, len(inner.kept_rows), width, 2).contiguous()
            )
            out[i][:, inner._rows, :] = rows
        return out

    def residual_energy(self, x, measured):
        """Per-frame ||A_i x_i - b_i||^2 as a tensor of shape (batch,)."""
        diff = self.apply_dense(x) - measured
        if torch.is_complex(diff):
            diff = torch.view_as_real(diff)
        return diff.pow(2).reshape(diff.shape[0], -1).sum(dim=1)


def stack_operators(ops):
    """Stack same-kind, same-geometry operators for batched evaluation."""
    ops = list(ops)
    if not ops:
        raise ValueError("cannot stack an empty operator list")
    first = ops[0]
    for i, op in enumerate(ops):
        if type(op) is not type(first) or op.input_shape != first.input_shape:
            raise ValueError(
                f"operator {i} ({type(op).__name__}, input {op.input_shape}) does not match "
                f"operator 0 ({type(first).__name__}, input {first.input_shape})"
            )
    weights = torch.stack([op.weights() for op in ops])
    if isinstance(first, PixelMaskOperator):
        return StackedOperator(PIXEL_MASK, first.input_shape, weights, ops)

    inners = [op.inner if isinstance(op, SliceFourierOperator) else op for op in ops]
    maps = inners[0].coil_maps
    for i, inner in enumerate(inners):
        same = (inner.coil_maps is None and maps is None) or (
            inner.coil_maps is not None
            and maps is not None
            and (inner.coil_maps is maps or torch.equal(inner.coil_maps, maps))
        )
        if not same:
            raise ValueError(f"operator {i} uses different coil maps than operator 0")
    slices = None
    if isinstance(first, SliceFourierOperator):
        slices = torch.as_tensor([op.slice_index for op in ops], dtype=torch.long)
    return StackedOperator(FOURIER, inners[0].input_shape, weights, ops, slices, maps)


# === Operator ensembles ===


@dataclass(frozen=True)
class BernoulliMaskEnsemble:
    """Each pixel kept independently with probability p; scale 1/sqrt(p) by default."""

    shape: tuple  # (channels, height, width)
    keep_probability: float
    scale: float | None = None

    def __post_init__(self):
        if not 0 < self.keep_probability <= 1:
            raise ValueError("keep_probability must be in (0, 1]")

    @property
    def normalization(self):
        return self.scale if self.scale is not None else 1.0 / math.sqrt(self.keep_probability)

    def draw(self, rng):
        n_pixels = self.shape[1] * self.shape[2]
        kept = np.flatnonzero(rng.random(n_pixels) < self.keep_probability)
        return PixelMaskOperator(self.shape, tuple(kept.tolist()), self.normalization)


@dataclass(frozen=True)
class FixedCountMaskEnsemble:
    """Uniform random subset of round(keep_fraction * n_pixels) pixels."""

    shape: tuple  # (channels, height, width)
    keep_fraction: float
    scale: float | None = None

    def __post_init__(self):
        if not 0 < self.keep_fraction <= 1:
            raise ValueError("keep_fraction must be in (0, 1]")

    @property
    def n_pixels(self):
        return self.shape[1] * self.shape[2]

    @property
    def count(self):
        return max(1, round(self.keep_fraction * self.n_pixels))

    @property
    def normalization(self):
        return self.scale if self.scale is not None else math.sqrt(self.n_pixels / self.count)

    def draw(self, rng):
        kept = np.sort(rng.choice(self.n_pixels, size=self.count, replace=False))
        return PixelMaskOperator(self.shape, tuple(kept.tolist()), self.normalization)


@dataclass(frozen=True, eq=False)
class RandomRowEnsemble:
    """Uniform random subset of k-space rows; scale sqrt(height / n_rows) by default."""

    shape: tuple  # (height, width)
    n_rows: int
    coil_maps: torch.Tensor | None = None
    scale: float | None = None

    def __post_init__(self):
        if not 1 <= self.n_rows <= self.shape[0]:
            raise ValueError(f"n_rows must be in [1, {self.shape[0]}]")

    @property
    def normalization(self):
        return self.scale if self.scale is not None else math.sqrt(self.shape[0] / self.n_rows)

    def draw(self, rng):
        rows = np.sort(rng.choice(self.shape[0], size=self.n_rows, replace=False))
        return SubsampledFourierOperator(
            self.shape, tuple(rows.tolist()), self.normalization, self.coil_maps
        )


def expectation_identity_estimate(ensemble, n_draws, probe_dim=None, seed=0):
    """
    Max entrywise deviation of the empirical E[A^T A] from the identity.

    The normal operator of every shipped operator kind is T^H diag(w^2) T for a
    fixed unitary T, so averaging n_draws operators equals one operator with
    mean squared weights. Its matrix is built column by column on basis vectors.

    Args:
        ensemble: Object with draw(rng) returning an operator.
        n_draws: Number of operator draws (>= 1).
        probe_dim: Optional check on the real input dimension.
        seed: RNG seed for the draws.

    Returns:
        max |E_hat[A^T A] - I| as a float.
    """
    if n_draws < 1:
        raise ValueError("n_draws must be >= 1")
    rng = np.random.default_rng(seed)

    template = ensemble.draw(rng)
    total = template.weights() ** 2
    for _ in range(n_draws - 1):
        total += ensemble.draw(rng).weights() ** 2

    stacked = StackedOperator.from_operator(template, torch.sqrt(total / n_draws).unsqueeze(0))
    dim = math.prod(stacked.input_shape)
    if probe_dim is not None and probe_dim != dim:
        raise ValueError(f"probe_dim {probe_dim} does not match operator input dimension {dim}")

    basis = torch.eye(dim, dtype=torch.float64).reshape(dim, *stacked.input_shape)
    gram = stacked.adjoint_dense(stacked.apply_dense(basis)).reshape(dim, dim)
    deviation = (gram - torch.eye(dim, dtype=torch.float64)).abs().max().item()
    logger.debug(f"E[A^T A] deviation {deviation:.3e} over {n_draws} draws")
    return deviation
