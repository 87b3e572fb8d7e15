"""Per-teacher, per-nesting-level projection heads over embedding prefixes."""

from __future__ import annotations

from typing import Mapping, Sequence

import torch
import torch.nn as nn

from nestkd.errors import ConfigError
from nestkd.model import seeded

KINDS = ("cls", "patch")
ACTIVATIONS = {"silu": nn.SiLU, "gelu": nn.GELU}


def nesting_levels(d: int, depth: int) -> tuple[int, ...]:
    """``(d, d // 2, d // 4, ...)`` with ``depth`` entries."""
    if depth < 1:
        raise ConfigError("nesting depth must be >= 1")
    if d < 2 ** (depth - 1):
        raise ConfigError(f"width {d} is too small for {depth} halvings")
    return tuple(d // 2 ** i for i in range(depth))


def validate_levels(levels: Sequence[int], d: int) -> tuple[int, ...]:
    levels = tuple(int(m) for m in levels)
    if not levels:
        raise ConfigError("at least one nesting level is required")
    if any(a <= b for a, b in zip(levels, levels[1:])):
        raise ConfigError(f"nesting levels must be strictly decreasing: {levels}")
    if levels[-1] < 1:
        raise ConfigError("nesting levels must be >= 1")
    if levels[0] != d:
        raise ConfigError(f"largest nesting level {levels[0]} must equal the student width {d}")
    return levels


def make_head(m: int, teacher_dim: int, activation: str = "silu") -> nn.Sequential:
    act = ACTIVATIONS[activation]
    return nn.Sequential(
        nn.Linear(m, teacher_dim), act(),
        nn.Linear(teacher_dim, teacher_dim), act(),
        nn.Linear(teacher_dim, teacher_dim),
    )


class HeadBank(nn.Module):
    """One MLP per (teacher, kind, level); head ``(t, k, m)`` reads ``x[..., :m]`` only."""

    def __init__(self, student_dim: int, teacher_dims: Mapping[str, int], levels: Sequence[int],
                 activation: str = "silu"):
        super().__init__()
        if activation not in ACTIVATIONS:
            raise ConfigError(f"unknown head activation {activation!r}")
        for m in levels:
            if m > student_dim:
                raise ConfigError(f"nesting level {m} exceeds student width {student_dim}")
        self.student_dim = student_dim
        self.teacher_dims = dict(teacher_dims)
        self.levels = validate_levels(levels, student_dim)
        self.activation = activation
        self.heads = nn.ModuleDict()
        for t, dt in self.teacher_dims.items():
            for kind in KINDS:
                for m in self.levels:
                    self.heads[self.key(t, kind, m)] = make_head(m, dt, activation)

    @staticmethod
    def key(teacher: str, kind: str, m: int) -> str:
        return f"{teacher}:{kind}:{m}"

    def head(self, teacher: str, kind: str, m: int) -> nn.Module:
        k = self.key(teacher, kind, m)
        if k not in self.heads:
            raise KeyError(f"no head for teacher={teacher!r}, kind={kind!r}, level={m}")
        return self.heads[k]

    def __len__(self) -> int:
        return len(self.heads)

    def forward(self, x: torch.Tensor, teacher: str, kind: str, m: int) -> torch.Tensor:
        return self.head(teacher, kind, m)(x[..., :m])

    def archive_entries(self) -> dict[str, torch.Tensor]:
        """Parameters under ``head/{teacher}/{kind}/{m}/{param}`` keys."""
        out = {}
        for k, module in self.heads.items():
            t, kind, m = k.split(":")
            for name, p in module.state_dict().items():
                out[f"head/{t}/{kind}/{m}/{name}"] = p.detach().clone()
        return out

    def load_archive_entries(self, entries: Mapping[str, torch.Tensor]) -> None:
        state = {}
        for key, v in entries.items():
            if not key.startswith("head/"):
                continue
            _, t, kind, m, name = key.split("/", 4)
            state[f"heads.{self.key(t, kind, int(m))}.{name}"] = v
        self.load_state_dict(state)

    def spec(self) -> dict:
        return {"student_dim": self.student_dim, "teacher_dims": dict(self.teacher_dims),
                "levels": list(self.levels), "activation": self.activation}


def build_head_bank(d: int, teacher_dims: Mapping[str, int] | Sequence[int], levels: Sequence[int],
                    seed: int = 0, activation: str = "silu") -> HeadBank:
    if not isinstance(teacher_dims, Mapping):
        teacher_dims = {f"teacher{i}": int(dt) for i, dt in enumerate(teacher_dims)}
    if max(levels) > d:
        raise ConfigError(f"nesting level {max(levels)} exceeds student width {d}")
    with seeded(seed):
        return HeadBank(d, teacher_dims, levels, activation)


def project_cls(bank: HeadBank, cls: torch.Tensor, teacher: str, m: int) -> torch.Tensor:
    return bank(cls, teacher, "cls", m)


def project_patches(bank: HeadBank, patches: torch.Tensor, teacher: str, m: int) -> torch.Tensor:
    return bank(patches, teacher, "patch", m)
