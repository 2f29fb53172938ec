"""
Configuration for vstorm runs

Centralized config for parameters shared across phantom generation, training,
reconstruction and the MNIST experiment. Values come from the defaults below,
then an optional flat key-value file, then command-line flags.

File grammar: one ``key = value`` per line, ``#`` starts a comment, blank lines
are ignored. Keys are the RunConfig field names. Tuples are comma separated.
"""

import logging
import typing
from dataclasses import dataclass, fields, replace
from pathlib import Path

logger = logging.getLogger(__name__)

MODES = ("variational", "gstorm-baseline")
PENALTIES = ("l1sq", "l1")
IMAGE_FORMATS = ("png", "pgm")
# Section marker separating a run manifest's header from its config text
MANIFEST_SECTION = "[config]"

_TRUE = {"true", "1", "yes", "on"}
_FALSE = {"false", "0", "no", "off"}


class UsageError(ValueError):
    """Invalid configuration or command-line usage."""


@dataclass(frozen=True)
class RunConfig:
    """Resolved settings for one run."""

    # === Run ===
    # Master seed for phantom phases, operator draws, initialization and noise
    seed: int = 0
    # Torch intra-op threads; 1 makes every output bitwise reproducible
    threads: int = 1
    # Directory receiving datasets, checkpoints, CSVs, images and the manifest
    out_dir: str = "runs/default"
    dataset_path: str = ""
    checkpoint_path: str = ""

    # === Phantom ===
    grid_size: int = 64
    n_slices: int = 4
    n_frames: int = 192
    # Motion frequencies in cycles per frame
    f_cardiac: float = 0.05
    f_resp: float = 0.0125
    cardiac_amplitude: float = 0.2
    resp_amplitude: float = 0.08

    # === Acquisition ===
    # Fourier rows kept per frame (8 of 64 = 8x undersampling)
    rows_per_frame: int = 8
    n_coils: int = 3
    sigma_meas: float = 0.0
    # Measurement SNR in dB; when > 0 it overrides sigma_meas
    snr_db: float = 30.0

    # === Generator ===
    # 0 picks 2 for single-slice data and 3 for multislice data
    latent_dim: int = 0
    generator_widths: tuple[int, ...] = (80, 56, 40, 28, 20)
    leaky_slope: float = 0.1
    init_gain: float = 1e-2

    # === Training ===
    mode: str = "variational"
    epochs: int = 300
    # Frames per optimizer step; 0 uses every frame each step
    batch_size: int = 64
    lr_theta: float = 1e-3
    lr_latent: float = 1e-2
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    # Weight of the KL term (noise variance in the lower bound); see calibrate
    sigma2: float = 0.1
    lambda1: float = 1e-8
    lambda2: float = 1e-2
    penalty: str = "l1sq"
    # Progressive-in-time bin sizes, coarse to fine; the last must be 1
    bin_sizes: tuple[int, ...] = (16, 8, 1)
    initial_deviation: float = 0.1
    freeze_deviation: bool = False
    # Epochs over which the KL weight ramps up from sigma2 / n to sigma2
    kl_warmup_epochs: int = 100
    # Train on this one slice of a multislice dataset; -1 trains on all slices
    train_slice: int = -1
    log_every: int = 10

    # === Evaluation ===
    source_slice: int = 1
    phase_grid: int = 16
    sample_inference: bool = False
    image_format: str = "png"

    # === Calibration ===
    # calibrate trains once per (sigma2, lambda1, lambda2) combination
    calibrate_sigma2: tuple[float, ...] = (0.1, 1.0, 10.0)
    calibrate_lambda1: tuple[float, ...] = (1e-9, 1e-8, 1e-7)
    calibrate_lambda2: tuple[float, ...] = (1e-3, 1e-2, 1e-1)
    calibrate_epochs: int = 300

    # === MNIST ===
    mnist_dir: str = "data/mnist"
    mnist_download: bool = False
    mnist_digit: int = 1
    mnist_max_images: int = 1000
    keep_fraction: float = 0.3
    noise_sd: float = 0.05
    mnist_fully_sampled: bool = False
    mnist_epochs: int = 1000
    mnist_batch_size: int = 100
    mnist_sigma2: float = 1.0
    # Montage tiles per side for the latent-grid manifold image
    grid_resolution: int = 9

    def __post_init__(self):
        if self.mode not in MODES:
            raise UsageError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.penalty not in PENALTIES:
            raise UsageError(f"penalty must be one of {PENALTIES}, got {self.penalty!r}")
        if self.image_format not in IMAGE_FORMATS:
            raise UsageError(f"image_format must be one of {IMAGE_FORMATS}")
        if self.threads < 1:
            raise UsageError("threads must be >= 1")
        if not self.bin_sizes or self.bin_sizes[-1] != 1 or min(self.bin_sizes) < 1:
            raise UsageError("bin_sizes must be positive and end with 1 (the unbinned stage)")
        if self.grid_size < 8:
            raise UsageError(f"grid_size must be >= 8, got {self.grid_size}")
        if not 1 <= self.rows_per_frame <= self.grid_size:
            raise UsageError(f"rows_per_frame must lie in [1, grid_size={self.grid_size}], got {self.rows_per_frame}")
        if self.n_slices < 1 or self.n_frames < 1:
            raise UsageError("n_slices and n_frames must be >= 1")
        if self.train_slice < -1:
            raise UsageError(f"train_slice must be -1 (all slices) or a slice index, got {self.train_slice}")
        for name in ("epochs", "batch_size", "kl_warmup_epochs", "calibrate_epochs", "n_coils"):
            if getattr(self, name) < 0:
                raise UsageError(f"{name} must be >= 0")
        for name in ("sigma2", "lambda1", "lambda2"):
            values = (getattr(self, name), *getattr(self, f"calibrate_{name}"))
            if min(values) < 0:
                raise UsageError(f"{name} and calibrate_{name} must be >= 0")

    def to_text(self):
        """Serialize in the config-file grammar."""
        lines = []
        for f in fields(self):
            lines.append(f"{f.name} = {_format_value(getattr(self, f.name))}")
        return "\n".join(lines) + "\n"

    def with_overrides(self, overrides):
        """Return a copy with string or typed overrides applied."""
        return replace(self, **_coerce_all(overrides))


def _format_value(value):
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    return str(value)


def _field_types():
    return {f.name: f.type for f in fields(RunConfig)}


def _coerce(name, ftype, raw):
    if not isinstance(raw, str):
        return tuple(raw) if typing.get_origin(ftype) is tuple else raw
    text = raw.strip()
    try:
        if ftype is bool:
            lowered = text.lower()
            if lowered in _TRUE:
                return True
            if lowered in _FALSE:
                return False
            raise ValueError(text)
        if ftype is int:
            return int(text)
        if ftype is float:
            return float(text)
        if typing.get_origin(ftype) is tuple:
            item = typing.get_args(ftype)[0]
            return tuple(item(part) for part in text.split(",") if part.strip())
    except ValueError as e:
        raise UsageError(f"invalid value for {name}: {raw!r}") from e
    return text


def _coerce_all(values):
    types = _field_types()
    coerced = {}
    for name, raw in values.items():
        if name not in types:
            raise UsageError(f"unknown config key: {name}")
        coerced[name] = _coerce(name, types[name], raw)
    return coerced


def parse_config_text(text):
    """
    Parse config-file text into a dict of raw string values.

    A run manifest is accepted as well: when a ``[config]`` line is present,
    only the lines after it are read.
    """
    values = {}
    lines = text.splitlines()
    start = 0
    for i, line in enumerate(lines):
        if line.strip() == MANIFEST_SECTION:
            start = i + 1
            break
    for lineno, line in enumerate(lines[start:], start=start + 1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise UsageError(f"line {lineno}: expected 'key = value', got {line!r}")
        key, value = stripped.split("=", 1)
        values[key.strip()] = value.strip()
    return values


def load_config(path=None, overrides=None):
    """
    Resolve a RunConfig from defaults, an optional file, and overrides.

    Args:
        path: Config file path, or None for defaults only.
        overrides: Mapping of field name to value; wins over the file.

    Returns:
        RunConfig.
    """
    values = {}
    if path:
        path = Path(path)
        if not path.exists():
            raise UsageError(f"config file not found: {path}")
        values.update(parse_config_text(path.read_text()))
        logger.info(f"Loaded {len(values)} settings from {path}")
    if overrides:
        values.update({k: v for k, v in overrides.items() if v is not None})
    return RunConfig(**_coerce_all(values))
