"""Visual feature extractor: strided residual head followed by an hourglass module.

Every convolution inside the hourglass pads explicitly with the configured
mode and size, then crops back to the nominal size, so the spatial layout
is the same for any padding size. The hourglass input can be replaced by
synthetic tensors (all zeros, all ones, fixed random, fresh random).
"""
from __future__ import annotations

import enum
from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn


class PaddingMode(str, enum.Enum):
    ZERO = "zero"
    REFLECT = "reflect"
    REPLICATE = "replicate"
    CIRCULAR = "circular"


class InputMode(str, enum.Enum):
    VISUAL = "visual"
    ALL_ZEROS = "all_zeros"
    ALL_ONES = "all_ones"
    FIXED_RANDOM = "fixed_random"
    RANDOM = "random"


@dataclass(frozen=True)
class BackboneConfig:
    padding_mode: PaddingMode = PaddingMode.ZERO
    padding_size: int = 1
    use_bias: bool = True
    input_mode: InputMode = InputMode.VISUAL
    feature_channels: int = 64
    downsample_factor: int = 4
    hourglass_depth: int = 3
    in_frames: int = 4

    def __post_init__(self):
        object.__setattr__(self, "padding_mode", PaddingMode(self.padding_mode))
        object.__setattr__(self, "input_mode", InputMode(self.input_mode))
        if self.padding_size < 1:
            raise ValueError("padding_size must be >= 1 to keep spatial dims with 3x3 kernels")
        if self.feature_channels <= 0:
            raise ValueError("feature_channels must be positive")
        if self.downsample_factor != 4:
            raise ValueError("the head has two stride-2 blocks, downsample_factor must be 4")

    def to_dict(self) -> dict:
        return {
            "padding_mode": self.padding_mode.value,
            "padding_size": self.padding_size,
            "use_bias": self.use_bias,
            "input_mode": self.input_mode.value,
            "feature_channels": self.feature_channels,
            "downsample_factor": self.downsample_factor,
            "hourglass_depth": self.hourglass_depth,
            "in_frames": self.in_frames,
        }

    @classmethod
    def from_dict(cls, d: dict) -> BackboneConfig:
        return cls(**d)


def _pad_index(n: int, p: int, mode: PaddingMode) -> torch.Tensor:
    idx = torch.arange(-p, n + p)
    if mode is PaddingMode.CIRCULAR:
        return idx % n
    if mode is PaddingMode.REPLICATE or n == 1:
        return idx.clamp(0, n - 1)
    # reflection without repeating the edge is periodic in 2 (n - 1)
    period = 2 * (n - 1)
    idx = idx % period
    return torch.where(idx >= n, period - idx, idx)


def pad2d(x: torch.Tensor, p: int, mode: PaddingMode | str) -> torch.Tensor:
    """Pad the last two dims by ``p`` on every side.

    Unlike ``F.pad``, reflect and circular accept pads larger than the map:
    the map is extended by repeated reflection / periodic wrap.
    """
    mode = PaddingMode(mode)
    if p == 0:
        return x
    if mode is PaddingMode.ZERO:
        return F.pad(x, (p, p, p, p))
    h, w = x.shape[-2:]
    if p < min(h, w) - 1 or (mode is PaddingMode.REPLICATE):
        return F.pad(x, (p, p, p, p), mode=mode.value)
    x = x.index_select(-2, _pad_index(h, p, mode).to(x.device))
    return x.index_select(-1, _pad_index(w, p, mode).to(x.device))


class PaddedConv2d(nn.Module):
    """3x3 convolution with explicit padding, cropped back to the input size."""

    def __init__(self, cin, cout, padding_mode=PaddingMode.ZERO, padding_size=1, bias=True):
        super().__init__()
        self.padding_mode = PaddingMode(padding_mode)
        self.padding_size = padding_size
        self.conv = nn.Conv2d(cin, cout, 3, padding=0, bias=bias)

    def forward(self, x):
        y = self.conv(pad2d(x, self.padding_size, self.padding_mode))
        c = self.padding_size - 1
        if c > 0:
            y = y[..., c:-c, c:-c]
        return y


class ResidualDown(nn.Module):
    def __init__(self, cin, cout, bias=True):
        super().__init__()
        self.conv1 = nn.Conv2d(cin, cout, 3, stride=2, padding=1, bias=bias)
        self.conv2 = nn.Conv2d(cout, cout, 3, padding=1, bias=bias)
        self.skip = nn.Conv2d(cin, cout, 1, stride=2, bias=bias)

    def forward(self, x):
        y = self.conv2(F.relu(self.conv1(x)))
        return F.relu(y + self.skip(x))


class Head(nn.Module):
    """Two stride-2 residual blocks over channel-stacked reference frames."""

    def __init__(self, in_frames: int, channels: int, bias: bool = True):
        super().__init__()
        self.block1 = ResidualDown(3 * in_frames, channels, bias)
        self.block2 = ResidualDown(channels, channels, bias)

    def forward(self, frames):
        # frames: (B, T, H, W, 3) uint8 or float in [0, 1]
        if frames.dtype == torch.uint8:
            frames = frames.to(self.block1.conv1.weight.dtype) / 255.0
        b, t, h, w, c = frames.shape
        x = frames.permute(0, 1, 4, 2, 3).reshape(b, t * c, h, w)
        return self.block2(self.block1(x))


class Hourglass(nn.Module):
    def __init__(self, depth, channels, padding_mode, padding_size, bias):
        super().__init__()

        def conv():
            return PaddedConv2d(channels, channels, padding_mode, padding_size, bias)

        self.depth = depth
        self.up = conv()
        self.low1 = conv()
        if depth > 1:
            self.inner = Hourglass(depth - 1, channels, padding_mode, padding_size, bias)
        else:
            self.inner = conv()
        self.low3 = conv()

    def forward(self, x):
        up = F.relu(self.up(x))
        low = F.relu(self.low1(F.max_pool2d(x, 2)))
        low = self.inner(low) if self.depth > 1 else F.relu(self.inner(low))
        low = F.relu(self.low3(low))
        return up + F.interpolate(low, scale_factor=2, mode="nearest")


def make_hourglass_input(mode, shape, generator=None, cached=None, head_output=None) -> torch.Tensor:
    """Build the tensor fed to the hourglass for a batch of shape ``(B, C, H', W')``."""
    mode = InputMode(mode)
    if mode is InputMode.VISUAL:
        if head_output is None:
            raise ValueError("visual mode needs the head output")
        return head_output
    if mode is InputMode.ALL_ZEROS:
        return torch.zeros(shape)
    if mode is InputMode.ALL_ONES:
        return torch.ones(shape)
    if mode is InputMode.FIXED_RANDOM:
        if cached is None:
            raise ValueError("fixed_random mode needs the cached sample")
        return cached.expand(shape)
    return torch.rand(shape, generator=generator)


class Backbone(nn.Module):
    """Head + hourglass with an input-replacement hook between the two."""

    def __init__(self, config: BackboneConfig, frame_size: tuple[int, int], seed: int = 0):
        super().__init__()
        self.config = config
        width, height = frame_size
        f = config.downsample_factor
        if width % (f << config.hourglass_depth) or height % (f << config.hourglass_depth):
            raise ValueError(f"frame size {frame_size} not divisible by the total stride")
        self.map_size = (height // f, width // f)
        self.head = Head(config.in_frames, config.feature_channels, config.use_bias)
        self.hourglass = Hourglass(
            config.hourglass_depth,
            config.feature_channels,
            config.padding_mode,
            config.padding_size,
            config.use_bias,
        )
        gen = torch.Generator().manual_seed(seed)
        fixed = torch.rand((1, config.feature_channels, *self.map_size), generator=gen)
        self.register_buffer("fixed_input", fixed)
        self.random_gen = torch.Generator().manual_seed(seed + 1)

    def hourglass_input(self, frames: torch.Tensor | None, batch: int) -> torch.Tensor:
        shape = (batch, self.config.feature_channels, *self.map_size)
        head_out = None
        if self.config.input_mode is InputMode.VISUAL:
            if frames is None:
                raise ValueError("visual input mode needs frames")
            head_out = self.head_downsample(frames)
        return make_hourglass_input(
            self.config.input_mode,
            shape,
            generator=self.random_gen,
            cached=self.fixed_input,
            head_output=head_out,
        ).to(self.fixed_input.dtype)

    def head_downsample(self, frames: torch.Tensor) -> torch.Tensor:
        h, w = frames.shape[2:4]
        f = self.config.downsample_factor
        if (h // f, w // f) != self.map_size:
            raise ValueError(f"frames of {w}x{h} do not match backbone map {self.map_size}")
        return self.head(frames)

    def forward(self, frames: torch.Tensor | None, batch: int | None = None) -> torch.Tensor:
        if batch is None:
            if frames is None:
                raise ValueError("need frames or a batch size")
            batch = frames.shape[0]
        return self.hourglass(self.hourglass_input(frames, batch))


def hourglass_refine(x: torch.Tensor, config: BackboneConfig, weights: Hourglass | None = None, seed: int = 0):
    """Run an hourglass over ``x``; builds seeded random weights when none are given."""
    if weights is None:
        with torch.random.fork_rng():
            torch.manual_seed(seed)
            weights = Hourglass(
                config.hourglass_depth, x.shape[1], config.padding_mode, config.padding_size, config.use_bias
            ).to(x.dtype)
    return weights(x)
