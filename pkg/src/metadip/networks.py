"""Image generators: a skip-connected UNet (DIP) and a sinusoidal MLP (SIREN).

Both are written functionally: a network object holds only its architecture
and maps ``(ParameterSet, LatentInput) -> H x W x C tensor``. Keeping the
weights outside the module is what lets the inner loop treat updated weights
as differentiable functions of the initialization.
"""
from __future__ import annotations

import math
from collections import OrderedDict
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
import torch.nn.functional as F

from .errors import DimensionError


@dataclass(frozen=True)
class DipNetConfig:
    latent_channels: int = 16
    num_fourier_features: int = 64
    fourier_scale: float = 10.0
    latent_scale: float = 0.1
    channels: tuple[int, ...] = (32, 64, 64)
    skip_channels: tuple[int, ...] = (4, 4, 4)
    upsample_mode: str = "bilinear"
    out_channels: int = 3
    negative_slope: float = 0.2

    kind = "dip"

    def __post_init__(self):
        object.__setattr__(self, "channels", tuple(int(c) for c in self.channels))
        object.__setattr__(self, "skip_channels", tuple(int(c) for c in self.skip_channels))
        if len(self.channels) < 1:
            raise ValueError("DIP network needs at least one level")
        if len(self.skip_channels) != len(self.channels):
            raise ValueError("skip_channels must have one entry per level")
        if min(self.channels) < 1 or min(self.skip_channels) < 1:
            raise ValueError("channel counts must be positive")
        if self.latent_channels < 0 or self.num_fourier_features < 0:
            raise ValueError("latent and Fourier feature counts must be nonnegative")
        if self.latent_channels + self.num_fourier_features == 0:
            raise ValueError("network input would have zero channels")
        if self.out_channels not in (1, 3):
            raise ValueError("out_channels must be 1 or 3")
        if self.upsample_mode not in ("bilinear", "nearest"):
            raise ValueError(f"unsupported upsample mode {self.upsample_mode!r}")

    @property
    def levels(self) -> int:
        return len(self.channels)

    @property
    def input_channels(self) -> int:
        return self.latent_channels + 2 * self.num_fourier_features

    def to_dict(self) -> dict:
        return {"kind": self.kind, **asdict(self)}


@dataclass(frozen=True)
class SirenConfig:
    hidden_layers: int = 4
    hidden_width: int = 128
    omega0: float = 30.0
    out_channels: int = 3
    num_fourier_features: int = 64
    fourier_scale: float = 10.0

    kind = "siren"
    latent_channels = 0
    latent_scale = 0.0

    def __post_init__(self):
        if self.hidden_layers < 1 or self.hidden_width < 1:
            raise ValueError("SIREN needs at least one hidden layer of positive width")
        if self.omega0 <= 0:
            raise ValueError("omega0 must be positive")
        if self.num_fourier_features < 1:
            raise ValueError("SIREN consumes Fourier features; num_fourier_features must be >= 1")
        if self.out_channels not in (1, 3):
            raise ValueError("out_channels must be 1 or 3")

    def to_dict(self) -> dict:
        return {"kind": self.kind, **asdict(self)}


def config_from_dict(d: dict):
    d = dict(d)
    kind = d.pop("kind")
    if kind == "dip":
        return DipNetConfig(**d)
    if kind == "siren":
        return SirenConfig(**d)
    raise ValueError(f"unknown network kind {kind!r}")


class ParameterSet:
    """Ordered name -> tensor mapping with a canonical flat-vector view."""

    def __init__(self, tensors):
        self._tensors = OrderedDict(tensors)

    def __getitem__(self, name) -> torch.Tensor:
        return self._tensors[name]

    def __iter__(self):
        return iter(self._tensors)

    def __len__(self):
        return len(self._tensors)

    def items(self):
        return self._tensors.items()

    def values(self):
        return list(self._tensors.values())

    @property
    def names(self) -> list[str]:
        return list(self._tensors)

    @property
    def shapes(self) -> list[tuple[int, ...]]:
        return [tuple(t.shape) for t in self._tensors.values()]

    @property
    def numel(self) -> int:
        return sum(t.numel() for t in self._tensors.values())

    @property
    def dtype(self) -> torch.dtype:
        return next(iter(self._tensors.values())).dtype

    @property
    def groups(self) -> list[str]:
        """Layer-group names (parameter name minus ``.weight``/``.bias``), in order."""
        seen = OrderedDict()
        for name in self._tensors:
            seen.setdefault(group_of(name), None)
        return list(seen)

    def group_index(self) -> list[int]:
        lookup = {g: i for i, g in enumerate(self.groups)}
        return [lookup[group_of(n)] for n in self._tensors]

    def flatten(self) -> torch.Tensor:
        return torch.cat([t.reshape(-1) for t in self._tensors.values()])

    def unflatten(self, vector: torch.Tensor) -> "ParameterSet":
        if vector.numel() != self.numel:
            raise DimensionError(f"vector has {vector.numel()} entries, parameter set has {self.numel}")
        out, offset = OrderedDict(), 0
        for name, t in self._tensors.items():
            out[name] = vector[offset : offset + t.numel()].reshape(t.shape)
            offset += t.numel()
        return ParameterSet(out)

    def map(self, fn) -> "ParameterSet":
        return ParameterSet((k, fn(v)) for k, v in self._tensors.items())

    def detach(self) -> "ParameterSet":
        return self.map(lambda t: t.detach().clone())

    def requires_grad_(self) -> "ParameterSet":
        return self.map(lambda t: t.detach().clone().requires_grad_(True))

    def to(self, dtype) -> "ParameterSet":
        return self.map(lambda t: t.to(dtype))

    def equal(self, other: "ParameterSet") -> bool:
        return self.names == other.names and all(torch.equal(a, b) for a, b in zip(self.values(), other.values()))


def group_of(name: str) -> str:
    return name.rsplit(".", 1)[0] if name.endswith((".weight", ".bias")) else name


# ---------------------------------------------------------------------------
# Inputs


def pixel_grid(height: int, width: int) -> np.ndarray:
    """``H x W x 2`` (row, column) coordinates normalized to [0, 1]."""
    rows = np.linspace(0.0, 1.0, height) if height > 1 else np.zeros(1)
    cols = np.linspace(0.0, 1.0, width) if width > 1 else np.zeros(1)
    rr, cc = np.meshgrid(rows, cols, indexing="ij")
    return np.stack([rr, cc], axis=-1)


def fourier_features(coords, B) -> np.ndarray:
    """Stack ``cos(2 pi coords B^T)`` and ``sin(2 pi coords B^T)`` along channels."""
    coords = np.asarray(coords, dtype=np.float64)
    B = np.asarray(B, dtype=np.float64)
    if B.ndim != 2 or B.shape[1] != 2:
        raise DimensionError(f"feature matrix must be F x 2, got {B.shape}")
    if coords.shape[-1] != 2:
        raise DimensionError(f"coordinates must end in a length-2 axis, got {coords.shape}")
    proj = 2.0 * np.pi * coords @ B.T
    return np.concatenate([np.cos(proj), np.sin(proj)], axis=-1)


@dataclass
class LatentInput:
    """Fixed network input: latent noise ``z`` (d x H x W) and Fourier matrix ``B``."""

    z: np.ndarray
    B: np.ndarray
    feature_scale: float = 10.0
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        self.z = np.asarray(self.z, dtype=np.float32)
        self.B = np.asarray(self.B, dtype=np.float32)
        if self.z.ndim != 3:
            raise DimensionError("z must be d x H x W")
        if self.B.ndim != 2 or (self.B.size and self.B.shape[1] != 2):
            raise DimensionError("B must be F x 2")
        self.z.setflags(write=False)
        self.B.setflags(write=False)

    @property
    def height(self) -> int:
        return self.z.shape[1]

    @property
    def width(self) -> int:
        return self.z.shape[2]

    @property
    def shape(self) -> tuple[int, int]:
        return self.z.shape[1], self.z.shape[2]

    def features(self, dtype: torch.dtype) -> torch.Tensor:
        """Fourier features of the pixel grid, ``2F x H x W``."""
        key = ("ff", dtype)
        if key not in self._cache:
            ff = fourier_features(pixel_grid(self.height, self.width), self.B)
            self._cache[key] = torch.as_tensor(np.ascontiguousarray(ff.transpose(2, 0, 1)), dtype=dtype)
        return self._cache[key]

    def latent(self, dtype: torch.dtype) -> torch.Tensor:
        key = ("z", dtype)
        if key not in self._cache:
            self._cache[key] = torch.as_tensor(self.z.copy(), dtype=dtype)
        return self._cache[key]


def make_latent(config, height: int, width: int, seed: int) -> LatentInput:
    """Draw ``z ~ U(0, latent_scale)`` and ``B ~ N(0, fourier_scale^2)``."""
    rng = np.random.default_rng([seed, 0x1A7E])
    d = config.latent_channels
    z = rng.uniform(0.0, config.latent_scale, (d, height, width)) if d else np.zeros((0, height, width))
    B = rng.normal(0.0, config.fourier_scale, (config.num_fourier_features, 2))
    return LatentInput(z, B, config.fourier_scale)


# ---------------------------------------------------------------------------
# Networks


def _uniform(gen, shape, bound, dtype):
    return (torch.rand(shape, generator=gen, dtype=torch.float64) * 2.0 - 1.0).mul_(bound).to(dtype)


class DipNet:
    """UNet encoder-decoder with 1x1 skip branches and a sigmoid head.

    Level ``i`` halves the resolution with a strided 3x3 convolution; the
    decoder upsamples by two, concatenates the level's skip features and
    applies 3x3 then 1x1 convolutions. Inputs must be divisible by
    ``2**levels``.
    """

    def __init__(self, config: DipNetConfig):
        self.config = config
        self.layers = self._layout()

    def _layout(self):
        cfg = self.config
        layers = []  # (name, in, out, kernel)
        c = cfg.input_channels
        for i, (ch, sk) in enumerate(zip(cfg.channels, cfg.skip_channels)):
            layers.append((f"skip{i}", c, sk, 1))
            layers.append((f"down{i}", c, ch, 3))
            layers.append((f"enc{i}", ch, ch, 3))
            c = ch
        for i in reversed(range(cfg.levels)):
            out = cfg.channels[i]
            layers.append((f"dec{i}", c + cfg.skip_channels[i], out, 3))
            layers.append((f"mix{i}", out, out, 1))
            c = out
        layers.append(("head", c, cfg.out_channels, 1))
        return layers

    def init_params(self, seed: int, dtype=torch.float32) -> ParameterSet:
        gen = torch.Generator().manual_seed(int(seed))
        tensors = OrderedDict()
        for name, cin, cout, k in self.layers:
            bound = 1.0 / math.sqrt(cin * k * k)
            tensors[f"{name}.weight"] = _uniform(gen, (cout, cin, k, k), bound, dtype)
            tensors[f"{name}.bias"] = _uniform(gen, (cout,), bound, dtype)
        return ParameterSet(tensors)

    def network_input(self, latent: LatentInput, dtype, jitter: torch.Tensor | None = None) -> torch.Tensor:
        if latent.z.shape[0] != self.config.latent_channels or latent.B.shape[0] != self.config.num_fourier_features:
            raise DimensionError("latent input does not match the network configuration")
        z = latent.latent(dtype)
        if jitter is not None:
            z = z + jitter
        return torch.cat([z, latent.features(dtype)], dim=0).unsqueeze(0)

    def __call__(self, params: ParameterSet, latent: LatentInput, jitter: torch.Tensor | None = None) -> torch.Tensor:
        cfg = self.config
        h, w = latent.shape
        div = 2**cfg.levels
        if h % div or w % div:
            raise DimensionError(f"spatial size {h}x{w} must be divisible by {div} for {cfg.levels} levels")
        p = params
        act = lambda t: F.leaky_relu(t, cfg.negative_slope)  # noqa: E731
        x = self.network_input(latent, p.dtype, jitter)
        skips = []
        for i in range(cfg.levels):
            skips.append(act(F.conv2d(x, p[f"skip{i}.weight"], p[f"skip{i}.bias"])))
            x = act(F.conv2d(x, p[f"down{i}.weight"], p[f"down{i}.bias"], stride=2, padding=1))
            x = act(F.conv2d(x, p[f"enc{i}.weight"], p[f"enc{i}.bias"], padding=1))
        for i in reversed(range(cfg.levels)):
            if cfg.upsample_mode == "bilinear":
                x = F.interpolate(x, scale_factor=2, mode="bilinear", align_corners=False)
            else:
                x = F.interpolate(x, scale_factor=2, mode="nearest")
            x = torch.cat([x, skips[i]], dim=1)
            x = act(F.conv2d(x, p[f"dec{i}.weight"], p[f"dec{i}.bias"], padding=1))
            x = act(F.conv2d(x, p[f"mix{i}.weight"], p[f"mix{i}.bias"]))
        out = torch.sigmoid(F.conv2d(x, p["head.weight"], p["head.bias"]))
        return out[0].permute(1, 2, 0)


class SirenNet:
    """Sinusoidal MLP on per-pixel Fourier features with a linear head."""

    def __init__(self, config: SirenConfig):
        self.config = config
        cfg = config
        dims = [2 * cfg.num_fourier_features] + [cfg.hidden_width] * cfg.hidden_layers
        self.layers = [(f"sine{i}", dims[i], dims[i + 1]) for i in range(cfg.hidden_layers)]
        self.layers.append(("head", cfg.hidden_width, cfg.out_channels))

    def init_params(self, seed: int, dtype=torch.float32) -> ParameterSet:
        gen = torch.Generator().manual_seed(int(seed))
        w0 = self.config.omega0
        tensors = OrderedDict()
        for i, (name, fin, fout) in enumerate(self.layers):
            if i == 0:
                bound = 1.0 / fin
            else:
                bound = math.sqrt(6.0 / fin) / w0
            tensors[f"{name}.weight"] = _uniform(gen, (fout, fin), bound, dtype)
            tensors[f"{name}.bias"] = _uniform(gen, (fout,), 1.0 / math.sqrt(fin), dtype)
        return ParameterSet(tensors)

    def __call__(self, params: ParameterSet, latent: LatentInput, jitter: torch.Tensor | None = None) -> torch.Tensor:
        if latent.B.shape[0] != self.config.num_fourier_features:
            raise DimensionError("latent input does not match the network configuration")
        h, w = latent.shape
        x = latent.features(params.dtype).reshape(-1, h * w).T
        w0 = self.config.omega0
        for name, _, _ in self.layers[:-1]:
            x = torch.sin(w0 * F.linear(x, params[f"{name}.weight"], params[f"{name}.bias"]))
        out = F.linear(x, params["head.weight"], params["head.bias"])
        return out.reshape(h, w, self.config.out_channels)


def build_network(config, seed: int, dtype=torch.float32):
    """Return ``(net, params)`` with weights drawn deterministically from ``seed``."""
    if isinstance(config, DipNetConfig):
        net = DipNet(config)
    elif isinstance(config, SirenConfig):
        net = SirenNet(config)
    else:
        raise ValueError(f"unsupported network config {type(config).__name__}")
    return net, net.init_params(seed, dtype)


def forward(net, params: ParameterSet, latent: LatentInput) -> np.ndarray:
    """Evaluate the network and return the image as a float64 numpy array."""
    with torch.no_grad():
        return net(params, latent).detach().to(torch.float64).numpy()
