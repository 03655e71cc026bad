"""Control-code and noise sampling, plus the continuous / one-hot alternation."""
from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Optional

import torch


class CodeKind(str, enum.Enum):
    CONTINUOUS = "continuous"
    ONE_HOT = "one_hot"


@dataclass
class LatentCode:
    """A batch of control vectors that all share one sampling kind.

    ``values`` has shape ``(B, d)``; ``hot_index`` has shape ``(B,)`` and is
    set only for one-hot codes.
    """

    values: torch.Tensor
    kind: CodeKind
    hot_index: Optional[torch.Tensor] = None

    def __post_init__(self):
        if self.values.dim() == 1:
            self.values = self.values.unsqueeze(0)
            if self.hot_index is not None:
                self.hot_index = self.hot_index.reshape(1)
        if self.kind == CodeKind.ONE_HOT and self.hot_index is None:
            raise ValueError("one-hot code requires hot_index")
        if self.kind == CodeKind.CONTINUOUS and self.hot_index is not None:
            raise ValueError("continuous code must not carry hot_index")

    @property
    def dim(self) -> int:
        return self.values.shape[-1]

    def __len__(self):
        return self.values.shape[0]

    @classmethod
    def from_indices(cls, indices: torch.Tensor, d: int) -> "LatentCode":
        indices = torch.as_tensor(indices, dtype=torch.long).reshape(-1)
        if indices.numel() and (indices.min() < 0 or indices.max() >= d):
            raise ValueError(f"hot index out of range [0, {d})")
        values = torch.nn.functional.one_hot(indices, d).to(torch.float32)
        return cls(values, CodeKind.ONE_HOT, indices)

    def validate(self) -> None:
        v = self.values
        if not torch.all((v >= 0) & (v <= 1)):
            raise ValueError("code entries must lie in [0, 1]")
        if self.kind == CodeKind.ONE_HOT:
            expected = torch.nn.functional.one_hot(self.hot_index, self.dim).to(v.dtype)
            if not torch.equal(v, expected):
                raise ValueError("one-hot code does not match its hot_index")


def _check_dim(name: str, n: int) -> None:
    if not isinstance(n, int) or n <= 0:
        raise ValueError(f"{name} must be a positive integer, got {n!r}")


def sample_uniform_code(d: int, rng: torch.Generator, batch: int = 1) -> LatentCode:
    _check_dim("d", d)
    _check_dim("batch", batch)
    return LatentCode(torch.rand(batch, d, generator=rng), CodeKind.CONTINUOUS)


def sample_onehot_code(d: int, rng: torch.Generator, batch: int = 1) -> LatentCode:
    _check_dim("d", d)
    _check_dim("batch", batch)
    idx = torch.randint(0, d, (batch,), generator=rng)
    return LatentCode.from_indices(idx, d)


def sample_noise(n_z: int, rng: torch.Generator, batch: int = 1) -> torch.Tensor:
    _check_dim("n_z", n_z)
    _check_dim("batch", batch)
    return torch.randn(batch, n_z, generator=rng)


@dataclass(frozen=True)
class SamplingSchedule:
    """Iteration ``i`` (1-based) is one-hot iff ``i % period == onehot_phase``.

    ``period=None`` never samples one-hot codes.
    """

    period: Optional[int] = 2
    onehot_phase: int = 1

    def __post_init__(self):
        if self.period is None:
            return
        if self.period < 1:
            raise ValueError("period must be positive")
        if not 0 <= self.onehot_phase < self.period:
            raise ValueError("onehot_phase must lie in [0, period)")

    @classmethod
    def never(cls) -> "SamplingSchedule":
        return cls(period=None, onehot_phase=0)


def schedule_kind(schedule: SamplingSchedule, iteration: int) -> CodeKind:
    if iteration < 1:
        raise ValueError("iterations are counted from 1")
    if schedule.period is None:
        return CodeKind.CONTINUOUS
    if iteration % schedule.period == schedule.onehot_phase:
        return CodeKind.ONE_HOT
    return CodeKind.CONTINUOUS


def sample_code(kind: CodeKind, d: int, rng: torch.Generator, batch: int) -> LatentCode:
    if kind == CodeKind.ONE_HOT:
        return sample_onehot_code(d, rng, batch)
    return sample_uniform_code(d, rng, batch)

