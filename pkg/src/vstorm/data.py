"""
Data

MNIST ingestion and corruption, the synthetic multislice dynamic phantom,
simulated k-t acquisition, and KTDataset persistence.
"""

import gzip
import logging
import math
import struct
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
import torch

from .measurement import (
    FixedCountMaskEnsemble,
    PixelMaskOperator,
    SliceFourierOperator,
    operator_from_record,
)
from .utils.container import read_container, write_container

logger = logging.getLogger(__name__)

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801
_GZIP_MAGIC = b"\x1f\x8b"

DATASET_KIND = "ktdataset"
TWO_PI = 2.0 * math.pi


# === MNIST ===


class IdxFormatError(ValueError):
    """Malformed IDX file; the message carries the byte offset."""


def _read_bytes(path):
    raw = Path(path).read_bytes()
    if raw.startswith(_GZIP_MAGIC):
        raw = gzip.decompress(raw)
    return raw


def _parse_idx_header(raw, path):
    if len(raw) < 4:
        raise IdxFormatError(f"{path}: truncated header at byte {len(raw)}")
    magic = struct.unpack_from(">I", raw, 0)[0]
    if magic >> 16 != 0 or (magic >> 8) & 0xFF != 0x08:
        raise IdxFormatError(f"{path}: bad magic 0x{magic:08x} at byte 0")
    ndim = magic & 0xFF
    end = 4 + 4 * ndim
    if len(raw) < end:
        raise IdxFormatError(f"{path}: truncated dimension table at byte {len(raw)}")
    dims = struct.unpack_from(f">{ndim}I", raw, 4)
    return magic, tuple(dims), end


def read_idx_header(path):
    """(magic, dims) of an IDX file, without reading the payload."""
    magic, dims, _ = _parse_idx_header(_read_bytes(path), path)
    return magic, dims


def read_idx(path, expected_magic=None):
    """Parse an IDX file of unsigned bytes into a uint8 array."""
    raw = _read_bytes(path)
    magic, dims, offset = _parse_idx_header(raw, path)
    if expected_magic is not None and magic != expected_magic:
        raise IdxFormatError(f"{path}: expected magic 0x{expected_magic:08x}, found 0x{magic:08x} at byte 0")
    count = math.prod(dims)
    if len(raw) < offset + count:
        raise IdxFormatError(f"{path}: payload truncated at byte {len(raw)}, expected {offset + count}")
    return np.frombuffer(raw, dtype=np.uint8, count=count, offset=offset).reshape(dims)


def load_mnist_idx(images_path, labels_path=None, digit=None, limit=None):
    """
    Load MNIST-style images scaled to [-1, 1].

    Args:
        images_path: IDX image file (optionally gzipped).
        labels_path: IDX label file, required when filtering by digit.
        digit: Keep only this label.
        limit: Keep at most this many images (after filtering).

    Returns:
        float64 array of shape (N, 1, rows, cols).
    """
    images = read_idx(images_path, IDX_IMAGES_MAGIC)
    if images.ndim != 3:
        raise IdxFormatError(f"{images_path}: expected 3 dimensions, found {images.ndim} at byte 3")
    if digit is not None:
        if labels_path is None:
            raise ValueError("a labels file is needed to filter by digit")
        labels = read_idx(labels_path, IDX_LABELS_MAGIC)
        if labels.shape[0] != images.shape[0]:
            raise IdxFormatError(
                f"{labels_path}: {labels.shape[0]} labels for {images.shape[0]} images at byte 4"
            )
        images = images[labels == digit]
    if limit is not None:
        images = images[:limit]
    logger.info(f"Loaded {images.shape[0]} images from {images_path}")
    return (2.0 * (images.astype(np.float64) / 255.0) - 1.0)[:, None, :, :]


def corrupt_images(images, keep_fraction, noise_sd, seed):
    """
    Independent fixed-count pixel masks plus Gaussian noise, one per image.

    Returns:
        List of (PixelMaskOperator, b) with b a float64 tensor.
    """
    images = torch.as_tensor(np.asarray(images, dtype=np.float64))
    ensemble = FixedCountMaskEnsemble(tuple(images.shape[1:]), keep_fraction, scale=1.0)
    rng = np.random.default_rng(seed)
    pairs = []
    for x in images:
        op = ensemble.draw(rng)
        b = op.apply(x)
        if noise_sd > 0:
            b = b + noise_sd * torch.from_numpy(rng.standard_normal(b.shape[0]))
        pairs.append((op, b))
    return pairs


def mnist_dataset(images, keep_fraction=0.3, noise_sd=0.05, seed=0, fully_sampled=False):
    """Wrap MNIST images as a one-slice dataset with one frame per image."""
    images = np.asarray(images, dtype=np.float64)
    if fully_sampled:
        shape = images.shape[1:]
        op = PixelMaskOperator(shape, tuple(range(shape[1] * shape[2])), 1.0)
        pairs = [(op, op.apply(torch.from_numpy(x))) for x in images]
        noise_sd = 0.0
    else:
        pairs = corrupt_images(images, keep_fraction, noise_sd, seed)
    frames = tuple(Frame(0, t, op, b, noise_sd) for t, (op, b) in enumerate(pairs))
    return KTDataset(
        frames=frames,
        n_slices=1,
        n_frames=len(frames),
        image_shape=tuple(images.shape[1:]),
        seed=seed,
        ground_truth=images[None],
        source="mnist",
    )


# === Phantom ===


@dataclass(frozen=True)
class Ellipse:
    """Smooth-edged ellipse in normalized [-1, 1] coordinates."""

    cy: float
    cx: float
    ry: float
    rx: float
    intensity: float
    cardiac: bool = False


@dataclass(frozen=True)
class PhantomSpec:
    grid_size: int
    n_slices: int
    n_frames: int
    f_cardiac: float
    f_resp: float
    phases_cardiac: tuple
    phases_resp: tuple
    anatomy: tuple  # per slice, a tuple of Ellipse
    cardiac_amplitude: float = 0.2
    resp_amplitude: float = 0.08
    edge_width: float = 0.02

    def validate(self):
        if self.grid_size < 8:
            raise ValueError("grid_size must be >= 8")
        if self.n_slices < 1 or self.n_frames < 1:
            raise ValueError("phantom needs at least one slice and one frame")
        if self.f_cardiac == self.f_resp:
            raise ValueError("cardiac and respiratory frequencies must differ")
        if len(self.phases_cardiac) != self.n_slices or len(self.phases_resp) != self.n_slices:
            raise ValueError("one cardiac and one respiratory phase per slice is required")
        if len(self.anatomy) != self.n_slices:
            raise ValueError(f"anatomy has {len(self.anatomy)} slices, expected {self.n_slices}")
        if self.cardiac_amplitude < 0 or self.resp_amplitude < 0:
            raise ValueError("motion amplitudes must be non-negative")
        for z, ellipses in enumerate(self.anatomy):
            total = 0.0
            for e in ellipses:
                if not -1.0 <= e.intensity <= 1.0:
                    raise ValueError(f"slice {z}: intensity {e.intensity} outside [-1, 1]")
                total += abs(e.intensity)
                grow = 1.0 + self.cardiac_amplitude if e.cardiac else 1.0
                reach_y = abs(e.cy) + e.ry * grow + self.resp_amplitude
                reach_x = abs(e.cx) + e.rx * grow + 0.5 * self.resp_amplitude
                if max(reach_y, reach_x) >= 1.0:
                    raise ValueError(f"slice {z}: motion moves an ellipse outside the grid")
            if total >= 1.0:
                raise ValueError(f"slice {z}: summed intensities {total} leave the tanh range")

    def select_slices(self, indices):
        """Phantom of the given slices only, renumbered 0..k-1; each keeps its anatomy and phases."""
        indices = tuple(indices)
        return replace(
            self,
            n_slices=len(indices),
            phases_cardiac=tuple(self.phases_cardiac[z] for z in indices),
            phases_resp=tuple(self.phases_resp[z] for z in indices),
            anatomy=tuple(self.anatomy[z] for z in indices),
        )

    def to_dict(self):
        d = asdict(self)
        d["phases_cardiac"] = list(self.phases_cardiac)
        d["phases_resp"] = list(self.phases_resp)
        d["anatomy"] = [[asdict(e) for e in ellipses] for ellipses in self.anatomy]
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["phases_cardiac"] = tuple(d["phases_cardiac"])
        d["phases_resp"] = tuple(d["phases_resp"])
        d["anatomy"] = tuple(tuple(Ellipse(**e) for e in ellipses) for ellipses in d["anatomy"])
        return cls(**d)


def _slice_anatomy(z, n_slices):
    # Slices further from the middle see a smaller heart and a narrower body
    offset = (z - (n_slices - 1) / 2) / max(n_slices, 1)
    heart = 1.0 - 0.6 * abs(offset)
    return (
        Ellipse(0.0, 0.0, 0.62, 0.72 - 0.1 * abs(offset), 0.3),
        Ellipse(-0.08, 0.12, 0.26 * heart, 0.24 * heart, 0.2, cardiac=True),
        Ellipse(-0.08, 0.12, 0.15 * heart, 0.13 * heart, 0.3, cardiac=True),
        Ellipse(0.45, 0.0, 0.08, 0.08, 0.15),
    )


def default_phantom_spec(
    seed=0,
    grid_size=64,
    n_slices=4,
    n_frames=192,
    f_cardiac=0.05,
    f_resp=0.0125,
    cardiac_amplitude=0.2,
    resp_amplitude=0.08,
):
    """Chest-like phantom with per-slice initial phases drawn uniformly from the seed."""
    rng = np.random.default_rng(seed)
    phases = rng.uniform(0.0, TWO_PI, size=(2, n_slices))
    spec = PhantomSpec(
        grid_size=grid_size,
        n_slices=n_slices,
        n_frames=n_frames,
        f_cardiac=f_cardiac,
        f_resp=f_resp,
        phases_cardiac=tuple(float(p) for p in phases[0]),
        phases_resp=tuple(float(p) for p in phases[1]),
        anatomy=tuple(_slice_anatomy(z, n_slices) for z in range(n_slices)),
        cardiac_amplitude=cardiac_amplitude,
        resp_amplitude=resp_amplitude,
    )
    spec.validate()
    return spec


def phase_at(spec, z, t):
    """(cardiac, respiratory) phase of slice z at frame t, in [0, 2 pi)."""
    if not 0 <= z < spec.n_slices:
        raise ValueError(f"slice {z} out of range [0, {spec.n_slices})")
    theta_c = (TWO_PI * spec.f_cardiac * t + spec.phases_cardiac[z]) % TWO_PI
    theta_r = (TWO_PI * spec.f_resp * t + spec.phases_resp[z]) % TWO_PI
    return theta_c, theta_r


def _grid(n):
    coords = (np.arange(n) + 0.5) / n * 2.0 - 1.0
    return coords[:, None], coords[None, :]


def render_slice(spec, z, theta_c, theta_r):
    """
    Slice z at a phase pair, as a (2, H, W) real/imaginary grid.

    Cardiac motion scales the cardiac ellipses by (1 + a_c sin) vertically and
    (1 + a_c cos / 2) horizontally; respiration shifts the anatomy by
    (a_r sin, a_r cos / 2).
    """
    theta_c = theta_c % TWO_PI
    theta_r = theta_r % TWO_PI
    y, x = _grid(spec.grid_size)
    dy = spec.resp_amplitude * math.sin(theta_r)
    dx = 0.5 * spec.resp_amplitude * math.cos(theta_r)
    scale_y = 1.0 + spec.cardiac_amplitude * math.sin(theta_c)
    scale_x = 1.0 + 0.5 * spec.cardiac_amplitude * math.cos(theta_c)

    magnitude = np.zeros((spec.grid_size, spec.grid_size))
    for e in spec.anatomy[z]:
        ry = e.ry * scale_y if e.cardiac else e.ry
        rx = e.rx * scale_x if e.cardiac else e.rx
        r = np.sqrt(((y - e.cy - dy) / ry) ** 2 + ((x - e.cx - dx) / rx) ** 2)
        magnitude += e.intensity * 0.5 * (1.0 - np.tanh((r - 1.0) / (spec.edge_width / min(ry, rx))))

    phase = 0.3 * x + 0.2 * y
    return np.stack((magnitude * np.cos(phase), magnitude * np.sin(phase)))


def phantom_generate(spec, z, t):
    """Ground-truth slice z at frame t."""
    return render_slice(spec, z, *phase_at(spec, z, t))


def phantom_volume(spec, theta_c, theta_r):
    """All slices at one phase pair, (n_slices, 2, H, W)."""
    return np.stack([render_slice(spec, z, theta_c, theta_r) for z in range(spec.n_slices)])


def ground_truth(spec):
    """(n_slices, n_frames, 2, H, W) ground truth for every frame."""
    return np.stack(
        [np.stack([phantom_generate(spec, z, t) for t in range(spec.n_frames)]) for z in range(spec.n_slices)]
    )


# === Datasets ===


@dataclass
class Frame:
    z: int
    t: int
    operator: object
    b: torch.Tensor = field(repr=False)
    sigma_meas: float = 0.0


@dataclass
class KTDataset:
    """Frames ordered by (z, t), each with its operator and measurement vector."""

    frames: tuple
    n_slices: int
    n_frames: int
    # Input shape of one slice image, e.g. (2, H, W) or (1, 28, 28)
    image_shape: tuple
    seed: int = 0
    coil_maps: torch.Tensor | None = None
    ground_truth: np.ndarray | None = None
    phantom: PhantomSpec | None = None
    source: str = "phantom"

    def __post_init__(self):
        self.validate()

    def validate(self):
        if len(self.frames) != self.n_slices * self.n_frames:
            raise ValueError(f"{len(self.frames)} frames for {self.n_slices} slices x {self.n_frames} frames")
        for i, frame in enumerate(self.frames):
            if (frame.z, frame.t) != divmod(i, self.n_frames):
                raise ValueError(f"frame {i} is (z={frame.z}, t={frame.t}); frames must be ordered by (z, t)")
            if frame.b.shape != (frame.operator.measurement_length,):
                raise ValueError(
                    f"frame {i} (z={frame.z}, t={frame.t}): b has shape {tuple(frame.b.shape)}, "
                    f"operator expects {frame.operator.measurement_length}"
                )

    def __len__(self):
        return len(self.frames)

    @property
    def is_volumetric(self):
        return isinstance(self.frames[0].operator, SliceFourierOperator)

    @property
    def grid_shape(self):
        return tuple(self.image_shape[-2:])

    def frame(self, z, t):
        if not (0 <= z < self.n_slices and 0 <= t < self.n_frames):
            raise ValueError(f"frame (z={z}, t={t}) outside dataset of {self.n_slices}x{self.n_frames}")
        return self.frames[z * self.n_frames + t]

    def slice_frames(self, z):
        return self.frames[z * self.n_frames : (z + 1) * self.n_frames]

    def select_slices(self, indices):
        """
        Sub-dataset holding only the given slices of a multislice acquisition.

        Slices are renumbered 0..k-1 in the order given. Measurements, sampling
        patterns, ground truth and phantom phases are those of the original
        slices, so a model trained on the subset is scored against the same truth.
        """
        indices = tuple(int(z) for z in indices)
        if not indices or len(set(indices)) != len(indices):
            raise ValueError(f"select_slices needs distinct slice indices, got {indices}")
        for z in indices:
            if not 0 <= z < self.n_slices:
                raise ValueError(f"slice {z} out of range [0, {self.n_slices})")
        if not self.is_volumetric:
            raise ValueError("only multislice k-t datasets can be split by slice")

        frames = []
        for new_z, z in enumerate(indices):
            for frame in self.slice_frames(z):
                op = SliceFourierOperator(new_z, len(indices), frame.operator.inner)
                frames.append(Frame(new_z, frame.t, op, frame.b.clone(), frame.sigma_meas))
        truth = None if self.ground_truth is None else self.ground_truth[list(indices)]
        logger.info(f"Selected slices {list(indices)} of {self.n_slices}")
        return KTDataset(
            frames=tuple(frames),
            n_slices=len(indices),
            n_frames=self.n_frames,
            image_shape=self.image_shape,
            seed=self.seed,
            coil_maps=self.coil_maps,
            ground_truth=truth,
            phantom=None if self.phantom is None else self.phantom.select_slices(indices),
            source=self.source,
        )

    def zero_filled(self):
        """Adjoint of each frame's operator applied to its measurements."""
        return [frame.operator.adjoint(frame.b) for frame in self.frames]

    def save(self, path):
        records = []
        for frame in self.frames:
            records.append(
                {"z": frame.z, "t": frame.t, "op": frame.operator.to_record(), "sigma": frame.sigma_meas}
            )
        header = {
            "n_slices": self.n_slices,
            "n_frames": self.n_frames,
            "image_shape": list(self.image_shape),
            "seed": self.seed,
            "source": self.source,
            "phantom": self.phantom.to_dict() if self.phantom else None,
            "frames": records,
        }
        arrays = {"b": torch.cat([frame.b for frame in self.frames]).numpy()}
        if self.coil_maps is not None:
            arrays["coil_maps"] = torch.view_as_real(self.coil_maps).numpy()
        if self.ground_truth is not None:
            arrays["ground_truth"] = self.ground_truth
        write_container(path, DATASET_KIND, header, arrays)

    @classmethod
    def load(cls, path):
        _, header, arrays = read_container(path, DATASET_KIND)
        coil_maps = None
        if "coil_maps" in arrays:
            coil_maps = torch.view_as_complex(torch.from_numpy(arrays["coil_maps"]).contiguous())
        b_all = torch.from_numpy(arrays["b"])
        frames = []
        offset = 0
        for record in header["frames"]:
            op = operator_from_record(record["op"], coil_maps)
            n = op.measurement_length
            frames.append(Frame(record["z"], record["t"], op, b_all[offset : offset + n].clone(), record["sigma"]))
            offset += n
        phantom = PhantomSpec.from_dict(header["phantom"]) if header["phantom"] else None
        dataset = cls(
            frames=tuple(frames),
            n_slices=header["n_slices"],
            n_frames=header["n_frames"],
            image_shape=tuple(header["image_shape"]),
            seed=header["seed"],
            coil_maps=coil_maps,
            ground_truth=arrays.get("ground_truth"),
            phantom=phantom,
            source=header["source"],
        )
        logger.info(f"Loaded {len(frames)} frames from {path}")
        return dataset


def noise_level_for_snr(clean, snr_db):
    """Noise deviation giving the requested SNR (dB) on the mean measurement power."""
    power = float(torch.mean(clean * clean))
    return math.sqrt(power / 10.0 ** (snr_db / 10.0))


def acquire_kt(spec, ensemble, sigma_meas, seed, snr_db=None):
    """
    Simulated slice-by-slice k-t acquisition of a phantom.

    Every frame draws a fresh operator from the ensemble; noise is drawn after
    all operators, so noisy and noiseless datasets share their operators.

    Args:
        spec: PhantomSpec.
        ensemble: Operator ensemble over (H, W) slice images, e.g. RandomRowEnsemble.
        sigma_meas: Gaussian noise deviation.
        seed: Acquisition seed.
        snr_db: When > 0, replaces sigma_meas with the level giving this SNR.

    Returns:
        KTDataset with ground truth attached.
    """
    spec.validate()
    if tuple(ensemble.shape) != (spec.grid_size, spec.grid_size):
        raise ValueError(f"ensemble shape {ensemble.shape} does not match {spec.grid_size}x{spec.grid_size} grid")

    rng = np.random.default_rng(seed)
    truth = ground_truth(spec)
    ops = []
    clean = []
    for z in range(spec.n_slices):
        for t in range(spec.n_frames):
            op = SliceFourierOperator(z, spec.n_slices, ensemble.draw(rng))
            ops.append(op)
            clean.append(op.inner.apply(torch.from_numpy(truth[z, t])))

    if snr_db is not None and snr_db > 0:
        sigma_meas = noise_level_for_snr(torch.cat(clean), snr_db)
    frames = []
    for i, (op, b) in enumerate(zip(ops, clean)):
        if sigma_meas > 0:
            b = b + sigma_meas * torch.from_numpy(rng.standard_normal(b.shape[0]))
            op = replace(op, inner=replace(op.inner, noise_free=False))
        z, t = divmod(i, spec.n_frames)
        frames.append(Frame(z, t, op, b, sigma_meas))

    logger.info(
        f"Acquired {len(frames)} frames ({spec.n_slices} slices x {spec.n_frames}), "
        f"sigma_meas={sigma_meas:.3g}"
    )
    return KTDataset(
        frames=tuple(frames),
        n_slices=spec.n_slices,
        n_frames=spec.n_frames,
        image_shape=(2, spec.grid_size, spec.grid_size),
        seed=seed,
        coil_maps=ops[0].inner.coil_maps,
        ground_truth=truth,
        phantom=spec,
    )
