"""
Generator Network

The decoder mapping a low-dimensional latent vector to an image (single
slice) or a volume (all slices emitted as channel groups of one 2D grid).
Parameters are shared across every frame and slice; gradients with respect
to the parameters and the latent input come from reverse-mode autodiff.
"""

import logging
import math
from dataclasses import asdict, dataclass, field
from enum import Enum

import torch
import torch.nn.functional as F

logger = logging.getLogger(__name__)

DEFAULT_SLOPE = 0.1
DEFAULT_GAIN = 1e-2


class LayerKind(Enum):
    DENSE = "dense"
    TCONV = "tconv"
    CONV = "conv"
    UPCONV = "upconv"


class Activation(Enum):
    LEAKY = "leaky"
    TANH = "tanh"
    NONE = "none"


@dataclass(frozen=True)
class LayerSpec:
    kind: LayerKind
    in_channels: int
    out_channels: int
    kernel: int = 1
    stride: int = 1
    activation: Activation = Activation.LEAKY
    slope: float = DEFAULT_SLOPE
    # Output grid of a dense layer, (height, width)
    grid: tuple = (1, 1)

    def to_dict(self):
        d = asdict(self)
        d["kind"] = self.kind.value
        d["activation"] = self.activation.value
        d["grid"] = list(self.grid)
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["kind"] = LayerKind(d["kind"])
        d["activation"] = Activation(d["activation"])
        d["grid"] = tuple(d.get("grid", (1, 1)))
        return cls(**d)

    def output_grid(self, grid):
        """Spatial grid produced from an input grid."""
        height, width = grid
        k, s = self.kernel, self.stride
        if self.kind == LayerKind.DENSE:
            return tuple(self.grid)
        if self.kind == LayerKind.TCONV:
            pad = (k - s) // 2
            return ((height - 1) * s - 2 * pad + k, (width - 1) * s - 2 * pad + k)
        if self.kind == LayerKind.UPCONV:
            height, width = height * s, width * s
            s = 1
        pad = k // 2
        return ((height + 2 * pad - k) // s + 1, (width + 2 * pad - k) // s + 1)


@dataclass(frozen=True)
class GeneratorSpec:
    """Layer chain plus latent size and declared output geometry."""

    layers: tuple
    latent_dim: int
    # (channels, H, W) for images, (slices, 2, H, W) for volumes
    output_shape: tuple
    volumetric: bool = False
    # Grid the latent is broadcast to when the first layer is not dense
    input_grid: tuple = (1, 1)
    name: str = "custom"

    def to_dict(self):
        return {
            "layers": [layer.to_dict() for layer in self.layers],
            "latent_dim": self.latent_dim,
            "output_shape": list(self.output_shape),
            "volumetric": self.volumetric,
            "input_grid": list(self.input_grid),
            "name": self.name,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            layers=tuple(LayerSpec.from_dict(x) for x in d["layers"]),
            latent_dim=d["latent_dim"],
            output_shape=tuple(d["output_shape"]),
            volumetric=d["volumetric"],
            input_grid=tuple(d.get("input_grid", (1, 1))),
            name=d.get("name", "custom"),
        )

    def validate(self):
        """Check layer chaining; raises ValueError naming the offending pair."""
        if not self.layers:
            raise ValueError("generator needs at least one layer")
        if self.latent_dim < 1:
            raise ValueError("latent_dim must be >= 1")
        first = self.layers[0]
        if first.kind != LayerKind.DENSE and first.in_channels != self.latent_dim:
            raise ValueError(
                f"layer 0 ({first.kind.value}) expects {first.in_channels} input channels "
                f"but the latent has {self.latent_dim}"
            )

        channels = first.in_channels if first.kind != LayerKind.DENSE else self.latent_dim
        grid = tuple(self.input_grid)
        for i, layer in enumerate(self.layers):
            if layer.kind == LayerKind.DENSE and i > 0:
                raise ValueError(f"layer {i} (dense) is only supported as the first layer")
            if layer.kernel < 1 or layer.stride < 1:
                raise ValueError(f"layer {i} ({layer.kind.value}) has invalid kernel/stride")
            if layer.in_channels != channels:
                source = f"layer {i - 1} ({self.layers[i - 1].kind.value})" if i else "the latent"
                raise ValueError(
                    f"layer {i} ({layer.kind.value}) expects {layer.in_channels} input channels "
                    f"but {source} produces {channels}"
                )
            channels = layer.out_channels
            grid = layer.output_grid(grid)

        expected_channels = math.prod(self.output_shape[:-2])
        if channels != expected_channels or grid != tuple(self.output_shape[-2:]):
            raise ValueError(
                f"layer chain produces {channels}x{grid[0]}x{grid[1]} but output shape "
                f"{tuple(self.output_shape)} was declared"
            )
        if self.volumetric and (len(self.output_shape) != 4 or self.output_shape[1] != 2):
            raise ValueError("volumetric output shape must be (slices, 2, H, W)")


@dataclass
class GradientBundle:
    d_theta: torch.Tensor
    d_latent: torch.Tensor = field(repr=False)


def _fan_in(layer):
    if layer.kind == LayerKind.DENSE:
        return layer.in_channels
    return layer.in_channels * layer.kernel * layer.kernel


class GeneratorNetwork(torch.nn.Module):
    """D_theta with one weight and one bias tensor per layer."""

    def __init__(self, spec, dtype=torch.float64):
        super().__init__()
        spec.validate()
        self.spec = spec
        self.weights = torch.nn.ParameterList()
        self.biases = torch.nn.ParameterList()
        for layer in spec.layers:
            self.weights.append(torch.nn.Parameter(torch.zeros(self._weight_shape(layer), dtype=dtype)))
            self.biases.append(torch.nn.Parameter(torch.zeros(self._bias_size(layer), dtype=dtype)))

    @staticmethod
    def _weight_shape(layer):
        if layer.kind == LayerKind.DENSE:
            return (layer.out_channels * layer.grid[0] * layer.grid[1], layer.in_channels)
        if layer.kind == LayerKind.TCONV:
            return (layer.in_channels, layer.out_channels, layer.kernel, layer.kernel)
        return (layer.out_channels, layer.in_channels, layer.kernel, layer.kernel)

    @staticmethod
    def _bias_size(layer):
        if layer.kind == LayerKind.DENSE:
            return layer.out_channels * layer.grid[0] * layer.grid[1]
        return layer.out_channels

    @property
    def latent_dim(self):
        return self.spec.latent_dim

    @property
    def output_shape(self):
        return tuple(self.spec.output_shape)

    @property
    def dtype(self):
        return self.weights[0].dtype

    def flat_parameters(self):
        """Parameters in theta order: layer by layer, weight then bias."""
        params = []
        for w, b in zip(self.weights, self.biases):
            params.extend((w, b))
        return params

    def parameter_count(self):
        return sum(p.numel() for p in self.flat_parameters())

    def theta(self):
        """Flat copy of all parameters."""
        return torch.cat([p.detach().reshape(-1) for p in self.flat_parameters()])

    def set_theta(self, theta):
        theta = torch.as_tensor(theta, dtype=self.dtype)
        if theta.numel() != self.parameter_count():
            raise ValueError(f"theta has {theta.numel()} entries, expected {self.parameter_count()}")
        offset = 0
        with torch.no_grad():
            for p in self.flat_parameters():
                p.copy_(theta[offset : offset + p.numel()].reshape(p.shape))
                offset += p.numel()

    def forward(self, c):
        if c.shape[-1] != self.latent_dim:
            raise ValueError(f"latent has length {c.shape[-1]}, expected {self.latent_dim}")
        lead = c.shape[:-1]
        h = c.reshape(-1, self.latent_dim)
        first = self.spec.layers[0]
        if first.kind != LayerKind.DENSE:
            h = h[:, :, None, None].expand(-1, -1, *self.spec.input_grid)

        for layer, w, b in zip(self.spec.layers, self.weights, self.biases):
            if layer.kind == LayerKind.DENSE:
                h = F.linear(h, w, b).reshape(-1, layer.out_channels, *layer.grid)
            elif layer.kind == LayerKind.TCONV:
                pad = (layer.kernel - layer.stride) // 2
                h = F.conv_transpose2d(h, w, b, stride=layer.stride, padding=pad)
            elif layer.kind == LayerKind.UPCONV:
                h = F.interpolate(h, scale_factor=layer.stride, mode="nearest")
                h = F.conv2d(h, w, b, padding=layer.kernel // 2)
            else:
                h = F.conv2d(h, w, b, stride=layer.stride, padding=layer.kernel // 2)

            if layer.activation == Activation.LEAKY:
                h = F.leaky_relu(h, negative_slope=layer.slope)
            elif layer.activation == Activation.TANH:
                h = torch.tanh(h)

        return h.reshape(*lead, *self.output_shape)


def init_generator(spec, seed, gain=DEFAULT_GAIN, dtype=torch.float64):
    """
    Build a generator with small random weights.

    Every weight and bias is uniform on +-gain * sqrt(1 / fan_in). The draw
    uses its own torch.Generator, so the same seed always gives the same theta.

    Args:
        spec: GeneratorSpec.
        seed: Integer seed.
        gain: Half-width multiplier.
        dtype: Parameter dtype.

    Returns:
        GeneratorNetwork.
    """
    net = GeneratorNetwork(spec, dtype=dtype)
    gen = torch.Generator().manual_seed(int(seed))
    with torch.no_grad():
        for layer, w, b in zip(spec.layers, net.weights, net.biases):
            bound = gain * math.sqrt(1.0 / _fan_in(layer))
            w.copy_((torch.rand(w.shape, generator=gen, dtype=dtype) * 2 - 1) * bound)
            b.copy_((torch.rand(b.shape, generator=gen, dtype=dtype) * 2 - 1) * bound)
    logger.info(f"Initialized {spec.name} generator: {len(spec.layers)} layers, {net.parameter_count()} parameters")
    return net


def mnist_preset(latent_dim=2, slope=DEFAULT_SLOPE):
    """Three layers: dense to 8x7x7, then two stride-2 transposed convolutions to 1x28x28."""
    layers = (
        LayerSpec(LayerKind.DENSE, latent_dim, 8, grid=(7, 7), slope=slope),
        LayerSpec(LayerKind.TCONV, 8, 16, kernel=4, stride=2, slope=slope),
        LayerSpec(LayerKind.TCONV, 16, 1, kernel=4, stride=2, activation=Activation.TANH),
    )
    return GeneratorSpec(layers, latent_dim, (1, 28, 28), volumetric=False, name="mnist")


def mri_preset(height, width, n_slices, latent_dim=3, widths=(80, 56, 40, 28, 20), slope=DEFAULT_SLOPE):
    """
    Ten layers: dense to a (H/16, W/16) grid, four upsampling stages of a
    stride-2 transposed convolution followed by a 3x3 convolution, and a final
    3x3 convolution to 2 * n_slices channels with tanh.
    """
    if height % 16 or width % 16:
        raise ValueError(f"MRI preset needs a grid divisible by 16, got {height}x{width}")
    if len(widths) != 5:
        raise ValueError("MRI preset needs 5 channel widths")
    layers = [LayerSpec(LayerKind.DENSE, latent_dim, widths[0], grid=(height // 16, width // 16), slope=slope)]
    for c_in, c_out in zip(widths, widths[1:]):
        layers.append(LayerSpec(LayerKind.TCONV, c_in, c_out, kernel=4, stride=2, slope=slope))
        layers.append(LayerSpec(LayerKind.CONV, c_out, c_out, kernel=3, slope=slope))
    layers.append(LayerSpec(LayerKind.CONV, widths[-1], 2 * n_slices, kernel=3, activation=Activation.TANH))
    return GeneratorSpec(
        tuple(layers), latent_dim, (n_slices, 2, height, width), volumetric=True, name="mri"
    )


def forward(net, c):
    """D_theta(c); c is (n,) or (batch, n)."""
    return net(torch.as_tensor(c, dtype=net.dtype))


def backward(net, c, upstream):
    """
    Reverse-mode gradients of <D_theta(c), upstream>.

    Returns:
        GradientBundle with d_theta aligned to net.theta() and d_latent shaped like c.
    """
    c = torch.as_tensor(c, dtype=net.dtype).detach().clone().requires_grad_(True)
    upstream = torch.as_tensor(upstream, dtype=net.dtype)
    out = net(c)
    if upstream.shape != out.shape:
        raise ValueError(f"upstream shape {tuple(upstream.shape)} does not match output {tuple(out.shape)}")
    params = net.flat_parameters()
    grads = torch.autograd.grad(out, [*params, c], grad_outputs=upstream)
    d_theta = torch.cat([g.reshape(-1) for g in grads[:-1]])
    return GradientBundle(d_theta=d_theta, d_latent=grads[-1])


def l1sq_penalty(theta):
    """(sum |theta|)^2 and its gradient 2 * sum|theta| * sign(theta)."""
    theta = torch.as_tensor(theta)
    norm = theta.abs().sum()
    return norm * norm, 2 * norm * torch.sign(theta)


def l1_penalty(theta):
    theta = torch.as_tensor(theta)
    return theta.abs().sum(), torch.sign(theta)


PENALTIES = {"l1sq": l1sq_penalty, "l1": l1_penalty}


def penalty_of(net, kind="l1sq"):
    """Differentiable penalty on the live parameters (for the training graph)."""
    if kind not in PENALTIES:
        raise ValueError(f"unknown penalty {kind!r}; expected one of {tuple(PENALTIES)}")
    value, _ = PENALTIES[kind](torch.cat([p.reshape(-1) for p in net.flat_parameters()]))
    return value
