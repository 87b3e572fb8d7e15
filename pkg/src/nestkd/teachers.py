"""Frozen teacher encoders, patch-grid resampling and batch standardization."""

from __future__ import annotations

import os
from dataclasses import asdict, dataclass, field
from typing import Callable, Mapping

import torch
import torch.nn as nn
import torch.nn.functional as F

from nestkd.errors import TeacherUnavailable
from nestkd.model import BackboneConfig, TokenBundle, VisionTransformer, seeded

STANDARDIZE_EPS = 1e-6


@dataclass(frozen=True)
class TeacherSpec:
    name: str
    dim: int
    grid: int
    mean: tuple[float, float, float] = (0.485, 0.456, 0.406)
    std: tuple[float, float, float] = (0.229, 0.224, 0.225)
    loader: str = "synthetic"
    options: Mapping[str, object] = field(default_factory=dict)

    def __post_init__(self):
        if self.dim < 1 or self.grid < 1:
            raise ValueError("teacher dim and grid must be >= 1")
        if not self.name or any(c in self.name for c in "./: "):
            raise ValueError(f"teacher name {self.name!r} must be non-empty without '.', '/', ':' or spaces")
        object.__setattr__(self, "mean", tuple(float(v) for v in self.mean))
        object.__setattr__(self, "std", tuple(float(v) for v in self.std))
        object.__setattr__(self, "options", dict(self.options))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["mean"], d["std"] = list(self.mean), list(self.std)
        return d


@dataclass(frozen=True)
class StandardizationStats:
    mean: torch.Tensor
    std: torch.Tensor
    epsilon: float = STANDARDIZE_EPS


class Teacher(nn.Module):
    """A frozen encoder behind the ``forward(images) -> TokenBundle`` contract."""

    def __init__(self, spec: TeacherSpec, encoder: nn.Module):
        super().__init__()
        self.spec = spec
        self.encoder = encoder
        self.encoder.eval()
        for p in self.encoder.parameters():
            p.requires_grad_(False)

    def train(self, mode: bool = True):
        # teachers never leave evaluation mode
        return super().train(False)

    @torch.no_grad()
    def forward(self, images) -> TokenBundle:
        out = self.encoder(images)
        return TokenBundle(out.cls.detach(), out.patches.detach(), out.registers.detach())


_LOADERS: dict[str, Callable[[TeacherSpec], nn.Module]] = {}


def register_teacher_loader(name: str, fn: Callable[[TeacherSpec], nn.Module]) -> None:
    """Register a loader that turns a spec into an encoder returning TokenBundles."""
    _LOADERS[name] = fn


def _synthetic_encoder(spec: TeacherSpec) -> nn.Module:
    opts = spec.options
    dim = spec.dim
    heads = next(h for h in (4, 2, 1) if dim % h == 0)
    image_size = int(opts.get("image_size", 224))
    if image_size % spec.grid:
        raise ValueError(f"grid {spec.grid} does not divide image size {image_size}")
    config = BackboneConfig(depth=int(opts.get("depth", 2)), width=dim, heads=heads,
                            patch_size=image_size // spec.grid, registers=0, image_size=image_size,
                            mean=spec.mean, std=spec.std)
    with seeded(int(opts.get("seed", 0))):
        enc = VisionTransformer(config)
        # wide random weights so outputs depend strongly on the image content
        for m in enc.modules():
            if isinstance(m, (nn.Linear, nn.Conv2d)):
                nn.init.xavier_uniform_(m.weight.view(m.weight.shape[0], -1))
                nn.init.normal_(m.bias, std=0.02)
        nn.init.normal_(enc.pos_embed, std=0.02)
        nn.init.normal_(enc.cls_token, std=0.02)
    return enc


def _checkpoint_loader(spec: TeacherSpec) -> nn.Module:
    """Load a locally stored encoder; the path comes from options or an env var."""
    env = "NESTKD_TEACHER_" + spec.name.upper().replace("-", "_")
    path = spec.options.get("checkpoint") or os.environ.get(env)
    if not path or not os.path.exists(path):
        raise TeacherUnavailable(f"teacher {spec.name!r}: set {env} or options.checkpoint to a local file")
    try:
        import timm  # noqa: F401
    except ImportError as exc:
        raise TeacherUnavailable(f"teacher {spec.name!r} needs the optional 'timm' package") from exc
    arch = spec.options.get("arch")
    if not arch:
        raise TeacherUnavailable(f"teacher {spec.name!r}: options.arch (a timm model name) is required")
    return _TimmEncoder(arch, path, spec.options)


class _TimmEncoder(nn.Module):
    def __init__(self, arch, path, options):
        super().__init__()
        import timm

        kwargs = dict(options.get("timm_kwargs", {}))
        self.model = timm.create_model(arch, pretrained=False, num_classes=0, **kwargs)
        state = torch.load(path, map_location="cpu")
        self.model.load_state_dict(state, strict=False)
        self.prefix = int(getattr(self.model, "num_prefix_tokens", 1))
        self.mean = torch.tensor(options.get("mean", (0.485, 0.456, 0.406))).view(1, 3, 1, 1)
        self.std = torch.tensor(options.get("std", (0.229, 0.224, 0.225))).view(1, 3, 1, 1)

    def forward(self, images):
        if images.dtype == torch.uint8:
            images = (images.permute(0, 3, 1, 2).float() / 255.0 - self.mean) / self.std
        tokens = self.model.forward_features(images)
        return TokenBundle(tokens[:, 0], tokens[:, self.prefix:], tokens[:, 1:self.prefix])


register_teacher_loader("synthetic", _synthetic_encoder)
register_teacher_loader("checkpoint", _checkpoint_loader)


def make_synthetic_teacher(seed: int, dim: int, grid: int = 16, depth: int = 2, name: str | None = None) -> TeacherSpec:
    if dim < 8:
        raise ValueError("synthetic teachers need dim >= 8")
    if not 2 <= depth <= 4:
        raise ValueError("synthetic teacher depth must be 2-4")
    # per-teacher input normalization, as real teachers publish their own constants
    jitter = ((seed * 37) % 11 - 5) / 100.0
    mean = tuple(round(v + jitter, 4) for v in (0.70, 0.55, 0.70))
    std = tuple(round(v + jitter / 2, 4) for v in (0.20, 0.22, 0.18))
    return TeacherSpec(name or f"synth{seed}", dim, grid, mean, std, "synthetic",
                       {"seed": int(seed), "depth": int(depth)})


def load_teacher(spec: TeacherSpec) -> Teacher:
    try:
        loader = _LOADERS[spec.loader]
    except KeyError:
        raise TeacherUnavailable(f"no loader registered for {spec.loader!r}") from None
    return Teacher(spec, loader(spec))


def teacher_forward(teacher: Teacher | TeacherSpec, images) -> TokenBundle:
    if isinstance(teacher, TeacherSpec):
        teacher = load_teacher(teacher)
    return teacher(images)


def resample_patch_grid(patches: torch.Tensor, target: int) -> torch.Tensor:
    """Bilinearly resize a ``(B, G*G, d)`` (or ``(G*G, d)``) token grid to ``target``."""
    squeeze = patches.ndim == 2
    x = patches.unsqueeze(0) if squeeze else patches
    b, n, d = x.shape
    g = int(round(n ** 0.5))
    if g * g != n:
        raise ValueError(f"{n} tokens do not form a square grid")
    if g == target:
        return patches
    grid = x.transpose(1, 2).reshape(b, d, g, g)
    out = F.interpolate(grid, size=(target, target), mode="bilinear", align_corners=False)
    out = out.reshape(b, d, target * target).transpose(1, 2)
    return out.squeeze(0) if squeeze else out


def standardization_stats(patches: torch.Tensor, epsilon: float = STANDARDIZE_EPS) -> StandardizationStats:
    """Per-channel mean/std pooled over batch and token axes (accumulated in float64)."""
    flat = patches.reshape(-1, patches.shape[-1]).double()
    mean = flat.mean(dim=0)
    std = flat.std(dim=0, unbiased=False)
    return StandardizationStats(mean, std, epsilon)


def standardize_patch_tokens(patches: torch.Tensor, stats: StandardizationStats | None = None) -> torch.Tensor:
    if stats is None:
        stats = standardization_stats(patches)
    out = (patches.double() - stats.mean) / (stats.std + stats.epsilon)
    return out.to(patches.dtype)
