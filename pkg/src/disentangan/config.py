"""Training configuration and its flat ``key = value`` text form."""
from __future__ import annotations

import dataclasses
import typing
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

from .critic import CriticConfig, QMode, default_critic_channels
from .generator import GeneratorConfig, default_generator_channels
from .latent import SamplingSchedule
from .objectives import LossWeights


@dataclass
class TrainConfig:
    # model
    d: int = 10
    n_z: int = 100
    img_size: int = 64
    img_channels: int = 1
    width_divisor: int = 1
    q_mode: str = "det"
    spectral_norm: bool = True
    ortho_linear_head: bool = True
    # optimisation
    batch_size: int = 64
    iterations: int = 50000
    learning_rate: float = 1e-4
    adam_beta1: float = 0.5
    adam_beta2: float = 0.99
    lam: float = 1.0
    gamma: float = 1.0
    ortho_weight: float = 1.0
    ortho_signed: bool = False
    onehot_period: int = 2
    onehot_phase: int = 1
    mi_updates_trunk: bool = False
    instance_noise_sigma0: float = 0.1
    anneal_end_iter: Optional[int] = None
    # ablations
    disable_onehot: bool = False
    disable_ortho: bool = False
    disable_competefree_g: bool = False
    # bookkeeping
    seed: int = 0
    strict: bool = True
    log_every: int = 100
    snapshot_every: int = 5000
    probe_every: int = 0
    probe_samples: int = 256
    dataset: str = "synth"
    dataset_path: Optional[str] = None
    synth_spec: str = "x=8,y=8,size=4,brightness=4"

    def __post_init__(self):
        if self.batch_size < 2:
            raise ValueError("batch_size must be at least 2")
        if self.iterations < 1:
            raise ValueError("iterations must be at least 1")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        self.q_mode = QMode.parse(self.q_mode).value
        LossWeights(self.lam, self.gamma, self.ortho_weight)
        SamplingSchedule(self.onehot_period, self.onehot_phase)

    @property
    def effective_anneal_end(self) -> int:
        return self.iterations // 2 if self.anneal_end_iter is None else self.anneal_end_iter

    @property
    def loss_weights(self) -> LossWeights:
        ortho = 0.0 if self.disable_ortho else self.ortho_weight
        return LossWeights(self.lam, self.gamma, ortho)

    @property
    def schedule(self) -> SamplingSchedule:
        if self.disable_onehot:
            return SamplingSchedule.never()
        return SamplingSchedule(self.onehot_period, self.onehot_phase)

    def generator_config(self) -> GeneratorConfig:
        return GeneratorConfig(
            d=self.d, n_z=self.n_z, img_size=self.img_size, img_channels=self.img_channels,
            channel_schedule=default_generator_channels(self.img_size, self.width_divisor),
            compete_free=not self.disable_competefree_g)

    def critic_config(self) -> CriticConfig:
        return CriticConfig(
            d=self.d, img_size=self.img_size, img_channels=self.img_channels,
            trunk_channels=default_critic_channels(self.img_size, self.width_divisor),
            q_mode=self.q_mode, spectral_norm=self.spectral_norm,
            ortho_linear_head=self.ortho_linear_head)

    # -- flat text ---------------------------------------------------------

    def to_flat(self) -> dict:
        return dataclasses.asdict(self)

    def to_text(self) -> str:
        lines = []
        for k, v in self.to_flat().items():
            lines.append(f"{k} = {'none' if v is None else v}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_flat(cls, values: dict) -> "TrainConfig":
        hints = typing.get_type_hints(cls)
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(values) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**{k: _coerce(v, hints[k]) for k, v in values.items()})

    @classmethod
    def from_text(cls, text: str) -> "TrainConfig":
        return cls.from_flat(parse_flat(text))

    @classmethod
    def from_file(cls, path) -> "TrainConfig":
        return cls.from_text(Path(path).read_text())

    def replace(self, **changes) -> "TrainConfig":
        return dataclasses.replace(self, **changes)


def parse_flat(text: str) -> dict:
    out = {}
    for n, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ValueError(f"line {n}: expected 'key = value', got {raw!r}")
        out[key.strip().replace("-", "_")] = value.strip()
    return out


def _coerce(value, hint):
    if not isinstance(value, str):
        return value
    if typing.get_origin(hint) is typing.Union:
        if value.lower() in ("none", "null", ""):
            return None
        hint = next(a for a in typing.get_args(hint) if a is not type(None))
    if hint is bool:
        low = value.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {value!r}")
    return hint(value)
