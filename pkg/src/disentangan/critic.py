"""Discriminator D and the code extractor Q that shares its lower trunk.

Q projects the shared features to a multiple of ``d`` channels, then runs two
grouped convolutions and a grouped linear head so that every output dimension
sees only its own slice of features.
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from typing import List, Optional, Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F

from .layers import (GroupedLinear, init_normal_, is_spectral_normalized, maybe_sn, raw_weight,
                     restart_power_iteration)

TABLE_D_CHANNELS = (64, 128, 256, 256, 512)
SIGMA_MIN = 1e-3
SIGMA_MAX = 10.0


class QMode(str, enum.Enum):
    DETERMINISTIC = "deterministic"
    PROBABILISTIC = "probabilistic"

    @classmethod
    def parse(cls, value) -> "QMode":
        if isinstance(value, QMode):
            return value
        aliases = {"det": cls.DETERMINISTIC, "prob": cls.PROBABILISTIC}
        return aliases.get(value) or cls(value)


def default_critic_channels(img_size: int, width_divisor: int = 1) -> tuple:
    n = int(math.log2(img_size)) - 1
    if n < 4:
        raise ValueError("critic needs img_size >= 32")
    if n == 4:
        chans = [64, 128, 256, 512]
    else:
        chans = list(TABLE_D_CHANNELS) + [512] * (n - 5)
    return tuple(max(ch // width_divisor, 4) for ch in chans)


@dataclass
class CriticConfig:
    d: int
    img_size: int = 64
    img_channels: int = 3
    trunk_channels: Optional[Sequence[int]] = None
    q_branch_level: int = 2
    q_mode: QMode = QMode.DETERMINISTIC
    spectral_norm: bool = True
    ortho_linear_head: bool = True

    def __post_init__(self):
        if self.d < 1:
            raise ValueError("d must be positive")
        if self.img_size < 32 or self.img_size & (self.img_size - 1):
            raise ValueError(f"img_size must be a power of two >= 32, got {self.img_size}")
        if self.img_channels not in (1, 3):
            raise ValueError("img_channels must be 1 or 3")
        self.q_mode = QMode.parse(self.q_mode)
        if self.trunk_channels is None:
            self.trunk_channels = default_critic_channels(self.img_size)
        self.trunk_channels = tuple(int(c) for c in self.trunk_channels)
        n_blocks = int(math.log2(self.img_size)) - 2
        if len(self.trunk_channels) != n_blocks + 1:
            raise ValueError(
                f"trunk_channels needs {n_blocks + 1} entries for img_size={self.img_size}")
        if not 1 <= self.q_branch_level < n_blocks:
            raise ValueError(f"q_branch_level must lie in [1, {n_blocks})")
        if self.branch_size < 4:
            raise ValueError("Q branch point leaves less than 4x4 spatial resolution")

    @property
    def n_blocks(self) -> int:
        return len(self.trunk_channels) - 1

    @property
    def branch_channels(self) -> int:
        return self.trunk_channels[self.q_branch_level]

    @property
    def branch_size(self) -> int:
        return self.img_size >> self.q_branch_level

    @property
    def q_channels(self) -> int:
        """Branch width rounded up to a multiple of ``d``."""
        return -(-self.branch_channels // self.d) * self.d


@dataclass
class QPrediction:
    mode: QMode
    logits: torch.Tensor
    sigma: Optional[torch.Tensor] = None

    @property
    def c_hat(self) -> torch.Tensor:
        return torch.sigmoid(self.logits)

    mu = c_hat


class DownBlock(nn.Module):
    def __init__(self, cin, cout, sn):
        super().__init__()
        self.conv = maybe_sn(nn.Conv2d(cin, cout, 3, 1, 1), sn)
        self.bn = nn.BatchNorm2d(cout)

    def forward(self, x):
        return F.avg_pool2d(F.leaky_relu(self.bn(self.conv(x)), 0.1), 2)


class QHead(nn.Module):
    def __init__(self, config: CriticConfig):
        super().__init__()
        d, sn = config.d, config.spectral_norm
        self.d = d
        self.mode = config.q_mode
        self.project = maybe_sn(nn.Conv2d(config.branch_channels, config.q_channels, 1), sn)
        self.group_conv1 = maybe_sn(nn.Conv2d(config.q_channels, d, 3, 1, 1, groups=d), sn)
        self.group_conv2 = maybe_sn(nn.Conv2d(d, d, 4, 2, 1, groups=d), sn)
        size = config.branch_size // 2  # after the first pool
        size = (size + 2 - 4) // 2 + 1  # strided 4x4 conv
        # the last pool is skipped when it would leave a single pixel per group
        self.final_pool = size >= 4
        if self.final_pool:
            size //= 2
        self.out_per_group = 2 if self.mode == QMode.PROBABILISTIC else 1
        self.linear = GroupedLinear(d, size * size, self.out_per_group)

    def forward(self, h) -> QPrediction:
        h = self.project(h)
        h = F.avg_pool2d(F.leaky_relu(self.group_conv1(h), 0.1), 2)
        h = F.leaky_relu(self.group_conv2(h), 0.1)
        if self.final_pool:
            h = F.avg_pool2d(h, 2)
        out = self.linear(h.flatten(2))
        if self.mode == QMode.PROBABILISTIC:
            sigma = torch.exp(out[..., 1]).clamp(SIGMA_MIN, SIGMA_MAX)
            return QPrediction(self.mode, out[..., 0], sigma)
        return QPrediction(self.mode, out[..., 0])


class Critic(nn.Module):
    def __init__(self, config: CriticConfig):
        super().__init__()
        self.config = config
        ch, sn = config.trunk_channels, config.spectral_norm
        self.stem = maybe_sn(nn.Conv2d(config.img_channels, ch[0], 1), sn)
        blocks = [DownBlock(ch[i], ch[i + 1], sn) for i in range(config.n_blocks)]
        self.shared = nn.ModuleList(blocks[: config.q_branch_level])
        self.d_only = nn.ModuleList(blocks[config.q_branch_level:])
        self.realness = maybe_sn(nn.Conv2d(ch[-1], 1, 4, 1, 0), sn)
        self.q = QHead(config)

    def _check_input(self, x):
        c = self.config
        if x.dim() != 4 or tuple(x.shape[1:]) != (c.img_channels, c.img_size, c.img_size):
            raise ValueError(
                f"expected images of shape (B, {c.img_channels}, {c.img_size}, {c.img_size}), "
                f"got {tuple(x.shape)}")

    def features(self, x):
        """Trunk activations shared by D and Q."""
        self._check_input(x)
        h = self.stem(x)
        for block in self.shared:
            h = block(h)
        return h

    def realness_from_features(self, h):
        for block in self.d_only:
            h = block(h)
        return self.realness(h).flatten()

    def forward(self, x):
        h = self.features(x)
        return self.realness_from_features(h), self.q(h)

    def discriminate(self, x) -> torch.Tensor:
        return self.realness_from_features(self.features(x))

    def extract_code(self, x) -> QPrediction:
        return self.q(self.features(x))

    def trunk_parameters(self):
        yield from self.stem.parameters()
        yield from self.shared.parameters()

    def d_head_parameters(self):
        yield from self.d_only.parameters()
        yield from self.realness.parameters()

    def d_parameters(self):
        yield from self.trunk_parameters()
        yield from self.d_head_parameters()

    def q_parameters(self):
        return self.q.parameters()

    def spectral_layers(self) -> List[nn.Module]:
        return [m for m in self.modules() if isinstance(m, nn.Conv2d) and is_spectral_normalized(m)]


def build_critic(config: CriticConfig, rng: torch.Generator) -> Critic:
    seed = int(torch.randint(0, 2**62, (1,), generator=rng))
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        critic = Critic(config)
        init_normal_(critic)
        for m in critic.spectral_layers():
            restart_power_iteration(m)
    return critic


def discriminate(critic: Critic, x) -> torch.Tensor:
    return critic.discriminate(x)


def extract_code(critic: Critic, x) -> QPrediction:
    return critic.extract_code(x)


def q_grouped_kernels(critic: Critic) -> List[torch.Tensor]:
    """Per grouped layer, a ``(d, k)`` matrix whose rows are the flattened group kernels.

    Rows are taken from the raw (pre spectral-norm) weights; cosine similarity
    is unaffected by the layer-wide spectral scaling.
    """
    q = critic.q
    d = q.d
    mats = [raw_weight(q.group_conv1).reshape(d, -1), raw_weight(q.group_conv2).reshape(d, -1)]
    if critic.config.ortho_linear_head:
        mats.append(q.linear.weight.reshape(d, -1))
    return mats
