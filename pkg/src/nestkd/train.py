"""Optimization loop: schedules, AdamW, EMA, checkpoints and deploy export."""

from __future__ import annotations

import copy
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np
import torch

from nestkd.augment import VisualAugConfig, make_training_views
from nestkd.data import DatasetManifest, sample_by_proportion
from nestkd.errors import ConfigError, MissingEMA, NonFiniteLoss
from nestkd.heads import HeadBank, build_head_bank, nesting_levels
from nestkd.losses import CropOutputs, LossReport, total_loss
from nestkd.model import (
    BackboneConfig,
    build_student,
    ema_update,
    export_backbone,
    load_archive,
    prefixed,
    preset,
    save_archive,
)
from nestkd.teachers import Teacher, TeacherSpec, load_teacher, resample_patch_grid

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    """Training hyper-parameters.

    ``batch_size`` counts student views per step: each tile contributes an
    aligned and a non-aligned view, so a step sees ``batch_size // 2`` tiles
    (``batch_size`` tiles when the non-aligned crop is ablated).
    """

    total_steps: int = 300_000
    batch_size: int = 1024
    lr_start: float = 1e-4
    lr_end: float = 1e-5
    wd_start: float = 0.01
    wd_end: float = 0.02
    ema_start: float = 0.994
    ema_end: float = 1.0
    levels_depth: int = 5
    crop_ablation: bool = False
    seed: int = 0
    precision: str = "fp32"
    grad_clip: float = 3.0
    w_cls: float = 1.0
    w_patch: float = 1.0
    head_activation: str = "silu"
    checkpoint_every: int = 0
    deterministic: bool = True

    def __post_init__(self):
        if self.total_steps < 1:
            raise ConfigError("total_steps must be >= 1")
        if self.batch_size < 2:
            raise ConfigError("batch_size must be >= 2")
        if not 0 < self.lr_end <= self.lr_start:
            raise ConfigError("need 0 < lr_end <= lr_start")
        if not 0 <= self.ema_start <= self.ema_end <= 1:
            raise ConfigError("need 0 <= ema_start <= ema_end <= 1")
        if self.wd_start < 0 or self.wd_end < 0:
            raise ConfigError("weight decay must be >= 0")
        if self.precision not in ("fp32", "bf16"):
            raise ConfigError("precision must be 'fp32' or 'bf16'")
        if self.levels_depth < 1:
            raise ConfigError("levels_depth must be >= 1")

    @property
    def tiles_per_step(self) -> int:
        return self.batch_size if self.crop_ablation else self.batch_size // 2

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: Mapping) -> "TrainConfig":
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ConfigError(f"unknown train keys: {sorted(unknown)}")
        return cls(**d)


def cosine_schedule(start: float, end: float, step: float, total: float) -> float:
    """Cosine interpolation from ``start`` (step 0) to ``end`` (step ``total``).

    Steps outside ``[0, total]`` are clamped; the endpoints are returned exactly.
    """
    step = min(max(step, 0), total)
    w = 0.5 * (1.0 + math.cos(math.pi * step / total)) if total > 0 else 0.0
    return w * start + (1.0 - w) * end


def _decays(name: str, p: torch.Tensor) -> bool:
    if p.ndim < 2:
        return False
    return not any(tok in name for tok in ("cls_token", "register_tokens", "pos_embed"))


def _stack(views: Sequence[np.ndarray]) -> torch.Tensor:
    return torch.from_numpy(np.stack(views))


class Trainer:
    """Holds the trainable state (student, heads, optimizer, EMA) for one run."""

    def __init__(self, config: TrainConfig, student_config: BackboneConfig | str,
                 teachers: Sequence[TeacherSpec | Teacher], manifest: DatasetManifest | None = None,
                 aug_config: VisualAugConfig | None = None):
        self.config = config
        if isinstance(student_config, str):
            student_config = preset(student_config)
        self.student_config = student_config
        self.aug_config = aug_config or VisualAugConfig()
        self.manifest = manifest
        if config.deterministic:
            torch.use_deterministic_algorithms(True, warn_only=True)
        self.teachers: dict[str, Teacher] = {}
        for t in teachers:
            teacher = t if isinstance(t, Teacher) else load_teacher(t)
            if teacher.spec.name in self.teachers:
                raise ConfigError(f"duplicate teacher name {teacher.spec.name!r}")
            self.teachers[teacher.spec.name] = teacher
        if not self.teachers:
            raise ConfigError("at least one teacher is required")

        self.student = build_student(student_config, seed=config.seed)
        self.ema = copy.deepcopy(self.student).requires_grad_(False).eval()
        self.levels = nesting_levels(student_config.width, config.levels_depth)
        self.bank: HeadBank = build_head_bank(
            student_config.width, {n: t.spec.dim for n, t in self.teachers.items()}, self.levels,
            seed=config.seed + 1, activation=config.head_activation,
        )
        named = [(f"student.{n}", p) for n, p in self.student.named_parameters()]
        named += [(f"bank.{n}", p) for n, p in self.bank.named_parameters()]
        self._params = [p for _, p in named]
        groups = [
            {"params": [p for n, p in named if _decays(n, p)], "decay": True},
            {"params": [p for n, p in named if not _decays(n, p)], "decay": False},
        ]
        self.optimizer = torch.optim.AdamW(groups, lr=config.lr_start, weight_decay=config.wd_start)
        self.step = 0

    # -- schedules ----------------------------------------------------------

    def lr_at(self, step: int) -> float:
        c = self.config
        return cosine_schedule(c.lr_start, c.lr_end, step, c.total_steps)

    def wd_at(self, step: int) -> float:
        c = self.config
        return cosine_schedule(c.wd_start, c.wd_end, step, c.total_steps)

    def ema_decay_at(self, step: int) -> float:
        c = self.config
        return cosine_schedule(c.ema_start, c.ema_end, step, c.total_steps)

    # -- data ---------------------------------------------------------------

    def batch_for_step(self, step: int) -> list:
        """ViewSets for ``step``; a pure function of (seed, step) so resumes replay exactly."""
        if self.manifest is None:
            raise ConfigError("trainer has no manifest")
        rng = np.random.default_rng([self.config.seed, step])
        records = sample_by_proportion(self.manifest, self.config.tiles_per_step, seed=rng.integers(2 ** 63))
        view_rngs = rng.spawn(len(records))
        n_teachers = len(self.teachers)
        ids = ["student", *self.teachers]
        return [
            make_training_views(rec.load(), n_teachers, self.aug_config, r,
                                include_nonaligned=not self.config.crop_ablation, model_ids=ids)
            for rec, r in zip(records, view_rngs)
        ]

    # -- optimization -------------------------------------------------------

    def _student_forward(self, images: torch.Tensor):
        if self.config.precision == "bf16":
            with torch.autocast("cpu", dtype=torch.bfloat16):
                out = self.student(images)
            return type(out)(*(t.float() for t in out))
        return self.student(images)

    def compute_loss(self, viewsets) -> LossReport:
        nonaligned = not self.config.crop_ablation and viewsets[0].nonaligned is not None
        n = len(viewsets)
        student_in = [vs.aligned[0] for vs in viewsets]
        if nonaligned:
            student_in += [vs.nonaligned[0] for vs in viewsets]
        s_out = self._student_forward(_stack(student_in))
        grid = s_out.grid
        t_aligned, t_nonaligned = {}, {}
        for i, (name, teacher) in enumerate(self.teachers.items(), start=1):
            t_in = [vs.aligned[i] for vs in viewsets]
            if nonaligned:
                t_in += [vs.nonaligned[i] for vs in viewsets]
            out = teacher(_stack(t_in))
            patches = resample_patch_grid(out.patches[:n], grid)
            t_aligned[name] = type(out)(out.cls[:n], patches, out.registers[:n])
            if nonaligned:
                t_nonaligned[name] = type(out)(out.cls[n:], out.patches[n:], out.registers[n:])
        s_aligned = type(s_out)(s_out.cls[:n], s_out.patches[:n], s_out.registers[:n])
        aligned = CropOutputs(s_aligned, t_aligned)
        other = None
        if nonaligned:
            s_non = type(s_out)(s_out.cls[n:], s_out.patches[n:], s_out.registers[n:])
            other = CropOutputs(s_non, t_nonaligned)
        return total_loss(aligned, other, self.bank, self.levels, self.config.w_cls, self.config.w_patch)

    def train_step(self, viewsets) -> tuple[LossReport, dict]:
        """One AdamW update of student + heads, then the EMA update."""
        self.student.train()
        self.bank.train()
        step = self.step
        lr, wd, decay = self.lr_at(step), self.wd_at(step), self.ema_decay_at(step)
        report = self.compute_loss(viewsets)
        if not torch.isfinite(report.total):
            breakdown = {k: float(v.detach()) for k, v in report.breakdown.items()}
            raise NonFiniteLoss(f"non-finite loss at step {step + 1}: {breakdown}", breakdown)
        self.optimizer.zero_grad(set_to_none=True)
        report.total.backward()
        grad_norm = torch.nn.utils.clip_grad_norm_(self._params, self.config.grad_clip)
        for group in self.optimizer.param_groups:
            group["lr"] = lr
            group["weight_decay"] = wd if group["decay"] else 0.0
        self.optimizer.step()
        ema_update(self.student, self.ema, decay)
        self.step += 1
        record = {"step": self.step, "lr": lr, "wd": wd, "ema_decay": decay, "grad_norm": float(grad_norm)}
        record.update(report.to_record())
        return report, record

    # -- persistence --------------------------------------------------------

    def state_entries(self) -> dict:
        entries = {
            "kind": "train",
            "config": self.student_config.to_dict(),
            "train_config": self.config.to_dict(),
            "aug_config": self.aug_config.to_dict(),
            "teachers": [t.spec.to_dict() for t in self.teachers.values()],
            "head_spec": self.bank.spec(),
            "step": self.step,
            "rng/seed": self.config.seed,
            "optim": self.optimizer.state_dict(),
        }
        entries.update({"params/" + k: v.detach().clone() for k, v in self.student.state_dict().items()})
        entries.update({"ema/" + k: v.detach().clone() for k, v in self.ema.state_dict().items()})
        entries.update(self.bank.archive_entries())
        return entries

    def save(self, path) -> Path:
        return save_archive(path, self.state_entries())

    def load_state(self, path_or_archive) -> None:
        archive = path_or_archive if isinstance(path_or_archive, dict) else load_archive(path_or_archive)
        self.student.load_state_dict(prefixed(archive, "params/"))
        ema = prefixed(archive, "ema/")
        self.ema.load_state_dict(ema if ema else prefixed(archive, "params/"))
        self.bank.load_archive_entries(archive)
        self.optimizer.load_state_dict(archive["optim"])
        self.step = int(archive["step"])

    @classmethod
    def from_checkpoint(cls, path, manifest: DatasetManifest | None = None,
                        teachers: Sequence[TeacherSpec | Teacher] | None = None) -> "Trainer":
        archive = load_archive(path)
        if teachers is None:
            teachers = [TeacherSpec(**d) for d in archive["teachers"]]
        trainer = cls(TrainConfig.from_dict(archive["train_config"]), BackboneConfig.from_dict(archive["config"]),
                      teachers, manifest, VisualAugConfig(**archive["aug_config"]))
        trainer.load_state(archive)
        return trainer


def train_step(trainer: Trainer, viewsets) -> tuple[LossReport, dict]:
    return trainer.train_step(viewsets)


def export_deployed(checkpoint, use_ema: bool = True, out_path=None) -> Path:
    """Write a backbone-only archive (heads, optimizer and teacher data dropped)."""
    archive = checkpoint if isinstance(checkpoint, dict) else load_archive(checkpoint)
    state = prefixed(archive, "ema/" if use_ema else "params/")
    if use_ema and not state:
        raise MissingEMA("checkpoint has no EMA parameters")
    if out_path is None:
        if isinstance(checkpoint, dict):
            raise ValueError("out_path is required when exporting an in-memory archive")
        src = Path(checkpoint)
        out_path = src.with_name(src.stem + ("_deploy_ema.pt" if use_ema else "_deploy.pt"))
    config = BackboneConfig.from_dict(archive["config"])
    return export_backbone(out_path, config, state, int(archive.get("step", 0)),
                           {"source": "ema" if use_ema else "params"})


@dataclass
class RunResult:
    checkpoint: Path
    deploy: Path
    metrics: Path
    records: list


def _trim_metrics(path: Path, last_step: int) -> None:
    if not path.exists():
        return
    keep = [line for line in path.read_text().splitlines() if line and json.loads(line)["step"] <= last_step]
    path.write_text("".join(line + "\n" for line in keep))


def run_training(config: TrainConfig, manifest: DatasetManifest, teachers: Sequence[TeacherSpec | Teacher],
                 out_dir, student_config: BackboneConfig | str = "tiny", aug_config: VisualAugConfig | None = None,
                 resume=None, stop_at: int | None = None,
                 on_step: Callable[[Trainer, dict], None] | None = None) -> RunResult:
    """Train to ``config.total_steps`` (or ``stop_at``), logging one JSON line per step.

    Checkpoints go to ``out_dir/checkpoints`` every ``checkpoint_every`` steps
    and at the end; the final EMA backbone is exported to ``out_dir/deploy_ema.pt``.
    """
    out_dir = Path(out_dir)
    ckpt_dir = out_dir / "checkpoints"
    ckpt_dir.mkdir(parents=True, exist_ok=True)
    metrics_path = out_dir / "metrics.jsonl"
    if resume is not None:
        trainer = Trainer.from_checkpoint(resume, manifest, teachers)
        _trim_metrics(metrics_path, trainer.step)
    else:
        trainer = Trainer(config, student_config, teachers, manifest, aug_config)
        metrics_path.write_text("")
    end = min(stop_at or trainer.config.total_steps, trainer.config.total_steps)
    records = []
    every = trainer.config.checkpoint_every
    t0 = time.perf_counter()
    with metrics_path.open("a", encoding="utf-8") as fh:
        while trainer.step < end:
            _, record = trainer.train_step(trainer.batch_for_step(trainer.step))
            records.append(record)
            fh.write(json.dumps(record) + "\n")
            fh.flush()
            if on_step is not None:
                on_step(trainer, record)
            if record["step"] % 50 == 0 or record["step"] == 1:
                log.info("step %d/%d loss %.4f (%.1fs)", record["step"], end, record["total"],
                         time.perf_counter() - t0)
            if every and trainer.step % every == 0 and trainer.step < end:
                trainer.save(ckpt_dir / f"step_{trainer.step:07d}.pt")
    final = trainer.save(ckpt_dir / f"step_{trainer.step:07d}.pt")
    deploy = export_deployed(final, use_ema=True, out_path=out_dir / "deploy_ema.pt")
    return RunResult(final, deploy, metrics_path, records)
