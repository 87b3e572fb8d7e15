"""Student vision transformer, EMA shadow, cost accounting and checkpoints."""

from __future__ import annotations

import io
import os
import tempfile
from contextlib import contextmanager
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Iterable, Mapping, NamedTuple

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from nestkd.errors import ConfigError, ShapeError

IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)


@dataclass(frozen=True)
class BackboneConfig:
    depth: int
    width: int
    heads: int
    patch_size: int = 14
    registers: int = 4
    image_size: int = 224
    mlp_ratio: float = 4.0
    mean: tuple[float, float, float] = IMAGENET_MEAN
    std: tuple[float, float, float] = IMAGENET_STD

    def __post_init__(self):
        for name in ("depth", "width", "heads", "patch_size", "image_size"):
            if int(getattr(self, name)) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.registers < 0:
            raise ConfigError("registers must be >= 0")
        if self.width % self.heads:
            raise ConfigError(f"width {self.width} is not divisible by heads {self.heads}")
        if self.image_size % self.patch_size:
            raise ConfigError(f"image size {self.image_size} is not divisible by patch size {self.patch_size}")
        object.__setattr__(self, "mean", tuple(float(v) for v in self.mean))
        object.__setattr__(self, "std", tuple(float(v) for v in self.std))

    @property
    def grid(self) -> int:
        return self.image_size // self.patch_size

    @property
    def hidden(self) -> int:
        return int(self.width * self.mlp_ratio)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["mean"], d["std"] = list(self.mean), list(self.std)
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "BackboneConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown backbone keys: {sorted(unknown)}")
        return cls(**d)


PRESETS = {
    "B": BackboneConfig(depth=12, width=768, heads=12, patch_size=14, registers=4),
    "S": BackboneConfig(depth=12, width=384, heads=6, patch_size=14, registers=4),
    "tiny": BackboneConfig(depth=4, width=96, heads=3, patch_size=14, registers=4),
}


def preset(name: str, **overrides) -> BackboneConfig:
    try:
        base = PRESETS[name]
    except KeyError:
        raise ConfigError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}") from None
    return BackboneConfig(**{**base.to_dict(), **overrides})


class TokenBundle(NamedTuple):
    """Output tokens of one forward pass (batched).

    ``patches`` is ``(B, G*G, d)`` in row-major grid order; ``registers`` is
    ``(B, R, d)`` and never enters a loss.
    """

    cls: torch.Tensor
    patches: torch.Tensor
    registers: torch.Tensor

    @property
    def grid(self) -> int:
        g = int(round(self.patches.shape[1] ** 0.5))
        return g


class Attention(nn.Module):
    def __init__(self, dim, heads):
        super().__init__()
        self.heads = heads
        self.qkv = nn.Linear(dim, 3 * dim)
        self.proj = nn.Linear(dim, dim)

    def forward(self, x):
        b, n, d = x.shape
        qkv = self.qkv(x).reshape(b, n, 3, self.heads, d // self.heads).permute(2, 0, 3, 1, 4)
        out = F.scaled_dot_product_attention(qkv[0], qkv[1], qkv[2])
        return self.proj(out.transpose(1, 2).reshape(b, n, d))


class Block(nn.Module):
    def __init__(self, dim, heads, hidden):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim, eps=1e-6)
        self.attn = Attention(dim, heads)
        self.norm2 = nn.LayerNorm(dim, eps=1e-6)
        self.mlp = nn.Sequential(nn.Linear(dim, hidden), nn.GELU(), nn.Linear(hidden, dim))

    def forward(self, x):
        x = x + self.attn(self.norm1(x))
        return x + self.mlp(self.norm2(x))


class VisionTransformer(nn.Module):
    """Pre-norm ViT with a CLS token and optional register tokens.

    Registers carry no position embedding and are dropped from the patch
    outputs.
    """

    def __init__(self, config: BackboneConfig):
        super().__init__()
        self.config = config
        d = config.width
        self.patch_embed = nn.Conv2d(3, d, kernel_size=config.patch_size, stride=config.patch_size)
        self.cls_token = nn.Parameter(torch.zeros(1, 1, d))
        self.register_tokens = nn.Parameter(torch.zeros(1, config.registers, d)) if config.registers else None
        self.pos_embed = nn.Parameter(torch.zeros(1, 1 + config.grid ** 2, d))
        self.blocks = nn.ModuleList(Block(d, config.heads, config.hidden) for _ in range(config.depth))
        self.norm = nn.LayerNorm(d, eps=1e-6)
        self.register_buffer("pixel_mean", torch.tensor(config.mean).view(1, 3, 1, 1), persistent=False)
        self.register_buffer("pixel_std", torch.tensor(config.std).view(1, 3, 1, 1), persistent=False)

    def init_weights(self, std: float = 0.02):
        nn.init.trunc_normal_(self.pos_embed, std=std)
        nn.init.normal_(self.cls_token, std=1e-6)
        if self.register_tokens is not None:
            nn.init.normal_(self.register_tokens, std=1e-6)
        for m in self.modules():
            if isinstance(m, nn.Linear):
                nn.init.trunc_normal_(m.weight, std=std)
                nn.init.zeros_(m.bias)
            elif isinstance(m, nn.LayerNorm):
                nn.init.ones_(m.weight)
                nn.init.zeros_(m.bias)
        w = self.patch_embed.weight
        nn.init.trunc_normal_(w.view(w.shape[0], -1), std=std)
        nn.init.zeros_(self.patch_embed.bias)

    def preprocess(self, images) -> torch.Tensor:
        """uint8 ``(B, H, W, 3)`` arrays/tensors -> normalized float ``(B, 3, H, W)``.

        Float tensors in ``(B, 3, H, W)`` layout are assumed to be normalized already.
        """
        if isinstance(images, np.ndarray):
            images = np.ascontiguousarray(images)
            if not images.flags.writeable:  # cached tiles are read-only
                images = images.copy()
            images = torch.from_numpy(images)
        if images.dtype == torch.uint8:
            if images.ndim == 3:
                images = images.unsqueeze(0)
            # one fused affine in channels-last layout, then a single copy to NCHW
            scale = (1.0 / (255.0 * self.pixel_std)).view(3)
            offset = (self.pixel_mean / self.pixel_std).view(3)
            x = images.to(self.pixel_mean.dtype).mul_(scale).sub_(offset)
            return x.permute(0, 3, 1, 2).contiguous()
        return images.to(self.pixel_mean.dtype)

    def forward(self, images) -> TokenBundle:
        x = self.preprocess(images)
        size = self.config.image_size
        if x.ndim != 4 or x.shape[1] != 3 or x.shape[2] != size or x.shape[3] != size:
            raise ShapeError(f"expected images of shape (B, 3, {size}, {size}), got {tuple(x.shape)}")
        b = x.shape[0]
        x = self.patch_embed(x).flatten(2).transpose(1, 2)
        x = torch.cat([self.cls_token.expand(b, -1, -1), x], dim=1) + self.pos_embed
        r = self.config.registers
        if r:
            x = torch.cat([x[:, :1], self.register_tokens.expand(b, -1, -1), x[:, 1:]], dim=1)
        for blk in self.blocks:
            x = blk(x)
        x = self.norm(x)
        return TokenBundle(cls=x[:, 0], patches=x[:, 1 + r:], registers=x[:, 1:1 + r])


@contextmanager
def seeded(seed: int):
    """Run a block under a fixed torch seed without disturbing the global RNG."""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(int(seed))
        yield


def build_student(config: BackboneConfig | str, seed: int = 0) -> VisionTransformer:
    if isinstance(config, str):
        config = preset(config)
    with seeded(seed):
        model = VisionTransformer(config)
        model.init_weights()
    return model


def forward(model: VisionTransformer, images) -> TokenBundle:
    """Inference-mode forward (no autograd, eval mode)."""
    was_training = model.training
    model.eval()
    try:
        with torch.no_grad():
            return model(images)
    finally:
        model.train(was_training)


def _as_tensor_dict(params) -> dict[str, torch.Tensor]:
    if isinstance(params, nn.Module):
        return dict(params.named_parameters())
    if isinstance(params, Mapping):
        return dict(params)
    return {str(i): p for i, p in enumerate(params)}


@torch.no_grad()
def ema_update(student_params, shadow_params, decay: float):
    """``shadow <- decay * shadow + (1 - decay) * student``, in place.

    Accepts modules, name->tensor mappings or parallel sequences; returns the
    shadow argument.
    """
    decay = float(decay)
    if not 0.0 <= decay <= 1.0:
        raise ValueError(f"decay must lie in [0, 1], got {decay}")
    student = _as_tensor_dict(student_params)
    shadow = _as_tensor_dict(shadow_params)
    if student.keys() != shadow.keys():
        raise ShapeError("student and shadow parameter sets differ")
    for name, s in shadow.items():
        p = student[name]
        if p.shape != s.shape:
            raise ShapeError(f"shape mismatch for {name}: {tuple(p.shape)} vs {tuple(s.shape)}")
        s.mul_(decay).add_(p.detach().to(s.dtype), alpha=1.0 - decay)
    return shadow_params


def count_params(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())


def backbone_flops(config: BackboneConfig, image_size: int | None = None,
                   include_attention_matmuls: bool = False) -> int:
    """FLOPs of one forward pass, counted as 2 x multiply-accumulates.

    Counts the patch embedding and every linear layer (qkv, output projection,
    MLP). The token-token score/value products are excluded by default, the
    same convention as common layer-hook FLOP counters.
    """
    size = image_size or config.image_size
    grid = size // config.patch_size
    n = 1 + config.registers + grid * grid
    d, hidden = config.width, config.hidden
    patch_embed = grid * grid * 3 * config.patch_size ** 2 * d
    per_block = n * d * 3 * d + n * d * d + 2 * n * d * hidden
    if include_attention_matmuls:
        per_block += 2 * n * n * d
    return 2 * (patch_embed + config.depth * per_block)


def deployed_cost(model: VisionTransformer, image_size: int | None = None, head_bank: nn.Module | None = None) -> dict:
    """Parameter count and FLOPs; heads add parameters but no deployed FLOPs."""
    params = count_params(model) + (count_params(head_bank) if head_bank is not None else 0)
    return {"params": params, "flops": backbone_flops(model.config, image_size)}


# --- checkpoint archive ------------------------------------------------------

CHECKPOINT_FORMAT = "nestkd-checkpoint/1"


def save_archive(path, entries: Mapping[str, object]) -> Path:
    """Atomically write a string-keyed archive (write to temp file, then rename)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {"format": CHECKPOINT_FORMAT, **{k: entries[k] for k in sorted(entries)}}
    buf = io.BytesIO()
    torch.save(payload, buf)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(buf.getvalue())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return path


def load_archive(path) -> dict:
    archive = torch.load(Path(path), map_location="cpu", weights_only=False)
    if not isinstance(archive, dict) or archive.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path} is not a {CHECKPOINT_FORMAT} archive")
    return archive


def prefixed(entries: Mapping[str, object], prefix: str) -> dict:
    n = len(prefix)
    return {k[n:]: v for k, v in entries.items() if k.startswith(prefix)}


def backbone_entries(model: VisionTransformer, prefix: str = "params/") -> dict:
    return {prefix + k: v.detach().clone() for k, v in model.state_dict().items()}


def export_backbone(path, config: BackboneConfig, state: Mapping[str, torch.Tensor], step: int = 0,
                    extra: Mapping[str, object] | None = None) -> Path:
    """Write a backbone-only deploy archive."""
    entries = {"config": config.to_dict(), "step": int(step), "kind": "deploy"}
    entries.update({"params/" + k: v.detach().clone() for k, v in state.items()})
    if extra:
        entries.update(extra)
    return save_archive(path, entries)


def load_backbone(path, use_ema: bool = False) -> VisionTransformer:
    """Rebuild a student from a deploy or training archive."""
    from nestkd.errors import MissingEMA

    archive = load_archive(path)
    config = BackboneConfig.from_dict(archive["config"])
    state = prefixed(archive, "ema/" if use_ema else "params/")
    if use_ema and not state:
        raise MissingEMA(f"{path} has no EMA parameters")
    model = VisionTransformer(config)
    model.load_state_dict(state)
    model.eval()
    return model


def parameter_checksum(module_or_tensors: nn.Module | Iterable[torch.Tensor]) -> str:
    import hashlib

    h = hashlib.sha256()
    if isinstance(module_or_tensors, nn.Module):
        tensors = [t for _, t in sorted(module_or_tensors.state_dict().items())]
    else:
        tensors = list(module_or_tensors)
    for t in tensors:
        h.update(t.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()
