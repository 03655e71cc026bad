"""Generator with a compete-free input block.

The control code ``c`` alone drives a 4x4 seed map, which is added to a learned
constant. Noise ``z`` enters only at the 8x8 level, gated per channel by a
sigmoid mask computed from ``c``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F

from .latent import LatentCode
from .layers import init_normal_, upsample2x

TABLE_G_CHANNELS = (512, 256, 256, 128, 64)


def default_generator_channels(img_size: int, width_divisor: int = 1) -> tuple:
    n = int(math.log2(img_size)) - 1
    chans = list(TABLE_G_CHANNELS[:n])
    while len(chans) < n:
        chans.append(max(chans[-1] // 2, 8))
    return tuple(max(ch // width_divisor, 4) for ch in chans)


def _is_pow2(n: int) -> bool:
    return n > 0 and n & (n - 1) == 0


@dataclass
class GeneratorConfig:
    d: int
    n_z: int = 100
    img_size: int = 64
    img_channels: int = 3
    channel_schedule: Optional[Sequence[int]] = None
    seed_channels: Optional[int] = None
    compete_free: bool = True

    def __post_init__(self):
        if self.d < 1 or self.n_z < 1:
            raise ValueError("d and n_z must be positive")
        if not _is_pow2(self.img_size) or self.img_size < 16:
            raise ValueError(f"img_size must be a power of two >= 16, got {self.img_size}")
        if self.img_channels not in (1, 3):
            raise ValueError("img_channels must be 1 or 3")
        if self.channel_schedule is None:
            self.channel_schedule = default_generator_channels(self.img_size)
        self.channel_schedule = tuple(int(c) for c in self.channel_schedule)
        expected = int(math.log2(self.img_size)) - 1
        if len(self.channel_schedule) != expected:
            raise ValueError(
                f"channel_schedule needs {expected} entries for img_size={self.img_size}, "
                f"got {len(self.channel_schedule)}")
        if self.seed_channels is None:
            self.seed_channels = self.channel_schedule[0]
        if self.seed_channels != self.channel_schedule[0]:
            raise ValueError("seed_channels must equal channel_schedule[0]")

    @property
    def inject_channels(self) -> int:
        return self.channel_schedule[1]


class NoiseInjection(nn.Module):
    """``h + sigmoid(mask(c)) * zproj(z)`` at a fixed spatial size."""

    def __init__(self, d: int, n_z: int, channels: int, size: int = 8):
        super().__init__()
        self.channels = channels
        self.size = size
        self.mask_projection = nn.Linear(d, channels)
        self.z_projection = nn.Linear(n_z, channels * size * size)

    def mask(self, c):
        return torch.sigmoid(self.mask_projection(c))

    def forward(self, h, c, z):
        m = self.mask(c)[:, :, None, None]
        zf = self.z_projection(z).view(-1, self.channels, self.size, self.size)
        return h + m * zf


class UpBlock(nn.Module):
    def __init__(self, cin, cout):
        super().__init__()
        self.conv = nn.Conv2d(cin, cout, 3, 1, 1)
        self.bn = nn.BatchNorm2d(cout)

    def forward(self, x):
        return upsample2x(F.leaky_relu(self.bn(self.conv(x)), 0.1))


class Generator(nn.Module):
    def __init__(self, config: GeneratorConfig):
        super().__init__()
        self.config = config
        sched = config.channel_schedule
        if config.compete_free:
            self.seed_projection = nn.ConvTranspose2d(config.d, config.seed_channels, 4, 1, 0)
            self.learned_constant = nn.Parameter(torch.randn(config.seed_channels, 4, 4) * 0.02)
            self.injection = NoiseInjection(config.d, config.n_z, config.inject_channels)
        else:
            # plain (c, z) concatenation stem, as in InfoGAN
            self.seed_projection = nn.ConvTranspose2d(config.d + config.n_z, config.seed_channels, 4, 1, 0)
            self.learned_constant = None
            self.injection = None
        self.trunk = nn.ModuleList(UpBlock(cin, cout) for cin, cout in zip(sched[:-1], sched[1:]))
        self.to_image = nn.Conv2d(sched[-1], config.img_channels, 3, 1, 1)

    def forward(self, c, z):
        if isinstance(c, LatentCode):
            c = c.values
        if c.shape[0] != z.shape[0]:
            raise ValueError(f"batch mismatch: c has {c.shape[0]} rows, z has {z.shape[0]}")
        if c.shape[1] != self.config.d or z.shape[1] != self.config.n_z:
            raise ValueError("c or z has the wrong dimensionality")
        c = c.to(self.to_image.weight.dtype)
        z = z.to(self.to_image.weight.dtype)
        if self.config.compete_free:
            h = self.seed_projection(c[:, :, None, None]) + self.learned_constant
        else:
            h = self.seed_projection(torch.cat([c, z], dim=1)[:, :, None, None])
        for i, block in enumerate(self.trunk):
            h = block(h)
            if i == 0 and self.injection is not None:
                h = self.injection(h, c, z)
        return torch.sigmoid(self.to_image(h))


def build_generator(config: GeneratorConfig, rng: torch.Generator) -> Generator:
    seed = int(torch.randint(0, 2**62, (1,), generator=rng))
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        g = Generator(config)
        init_normal_(g)
        if g.learned_constant is not None:
            nn.init.normal_(g.learned_constant, 0.0, 0.02)
    return g


def generate(gen: Generator, c, z) -> torch.Tensor:
    """Images in [0, 1] of shape ``(B, img_channels, img_size, img_size)``."""
    return gen(c, z)


def latent_traversal(gen: Generator, c_base, z, dim: int, values) -> list:
    """One image per value, with entry ``dim`` of ``c_base`` replaced by that value.

    Runs in eval mode so every image is independent of its batch neighbours.
    """
    if isinstance(c_base, LatentCode):
        c_base = c_base.values
    c_base = c_base.reshape(1, -1)
    z = z.reshape(1, -1)
    d = c_base.shape[1]
    if not 0 <= dim < d:
        raise ValueError(f"dim {dim} out of range [0, {d})")
    values = [float(v) for v in values]
    if any(v < 0 or v > 1 for v in values):
        raise ValueError("traversal values must lie in [0, 1]")
    if not values:
        return []
    cs = c_base.repeat(len(values), 1)
    cs[:, dim] = torch.tensor(values, dtype=cs.dtype)
    was_training = gen.training
    gen.eval()
    try:
        with torch.no_grad():
            imgs = gen(cs, z.repeat(len(values), 1))
    finally:
        gen.train(was_training)
    return list(imgs)
