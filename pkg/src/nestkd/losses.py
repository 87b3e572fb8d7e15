"""Multi-teacher, multi-level distillation objective.

Reduction convention: every (teacher, level) term is a mean over the batch
(and, for patch terms, over tokens and channels); terms are then summed over
teachers and levels.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence

import torch

from nestkd.errors import ShapeError
from nestkd.heads import HeadBank, project_cls, project_patches
from nestkd.model import TokenBundle
from nestkd.teachers import standardize_patch_tokens

COS_EPS = 1e-8


def cosine_loss(a: torch.Tensor, b: torch.Tensor, eps: float = COS_EPS) -> torch.Tensor:
    """``1 - cos(a, b)`` along the last axis; zero vectors count as orthogonal."""
    num = (a * b).sum(dim=-1)
    den = a.norm(dim=-1).clamp_min(eps) * b.norm(dim=-1).clamp_min(eps)
    return 1.0 - num / den


def cls_loss(student_cls: torch.Tensor, teacher_cls: Mapping[str, torch.Tensor], bank: HeadBank,
             levels: Sequence[int]):
    """Sum over teachers and levels of the batch-mean cosine loss.

    Returns ``(loss, {(teacher, m): term})``.
    """
    total = student_cls.new_zeros(())
    terms = {}
    for t in bank.teacher_dims:
        if t not in teacher_cls:
            raise KeyError(f"missing CLS output for teacher {t!r}")
        target = teacher_cls[t]
        for m in levels:
            term = cosine_loss(project_cls(bank, student_cls, t, m), target).mean()
            terms[(t, m)] = term
            total = total + term
    return total, terms


def patch_loss(student_patches: torch.Tensor, teacher_patches: Mapping[str, torch.Tensor], bank: HeadBank,
               levels: Sequence[int], standardize: bool = True):
    """Sum over teachers and levels of the token/channel-mean squared error.

    Teacher tokens must already be on the student's grid. With
    ``standardize`` they are standardized per channel over the batch and
    tokens first.
    """
    total = student_patches.new_zeros(())
    terms = {}
    for t in bank.teacher_dims:
        if t not in teacher_patches:
            raise KeyError(f"missing patch output for teacher {t!r}")
        target = teacher_patches[t]
        if target.shape[:2] != student_patches.shape[:2]:
            raise ShapeError(
                f"teacher {t!r} patch grid {tuple(target.shape[:2])} does not match student {tuple(student_patches.shape[:2])}"
            )
        if standardize:
            target = standardize_patch_tokens(target)
        for m in levels:
            pred = project_patches(bank, student_patches, t, m)
            term = (pred - target).pow(2).mean()
            terms[(t, m)] = term
            total = total + term
    return total, terms


@dataclass
class CropOutputs:
    student: TokenBundle
    teachers: Mapping[str, TokenBundle]


@dataclass
class LossReport:
    total: torch.Tensor
    cls_aligned: torch.Tensor
    cls_nonaligned: torch.Tensor
    patch_aligned: torch.Tensor
    breakdown: dict[str, torch.Tensor] = field(default_factory=dict)

    def to_record(self) -> dict:
        return {
            "total": float(self.total.detach()),
            "cls_aligned": float(self.cls_aligned.detach()),
            "cls_nonaligned": float(self.cls_nonaligned.detach()),
            "patch_aligned": float(self.patch_aligned.detach()),
            "breakdown": {k: float(v.detach()) for k, v in self.breakdown.items()},
        }


def total_loss(aligned: CropOutputs, nonaligned: CropOutputs | None, bank: HeadBank,
               levels: Sequence[int], w_cls: float = 1.0, w_patch: float = 1.0) -> LossReport:
    """CLS loss on both crops plus patch loss on the aligned crop.

    ``nonaligned=None`` (the cropping ablation) makes that component zero.
    """
    levels = tuple(levels)
    cls_a, terms_a = cls_loss(aligned.student.cls, {t: b.cls for t, b in aligned.teachers.items()}, bank, levels)
    patch_a, terms_p = patch_loss(aligned.student.patches, {t: b.patches for t, b in aligned.teachers.items()},
                                  bank, levels)
    breakdown = {f"cls_aligned/{t}/{m}": v for (t, m), v in terms_a.items()}
    breakdown.update({f"patch_aligned/{t}/{m}": v for (t, m), v in terms_p.items()})
    if nonaligned is not None:
        cls_n, terms_n = cls_loss(nonaligned.student.cls, {t: b.cls for t, b in nonaligned.teachers.items()},
                                  bank, levels)
        breakdown.update({f"cls_nonaligned/{t}/{m}": v for (t, m), v in terms_n.items()})
    else:
        cls_n = cls_a.new_zeros(())
    cls_a_w, cls_n_w, patch_w = w_cls * cls_a, w_cls * cls_n, w_patch * patch_a
    return LossReport(cls_a_w + cls_n_w + patch_w, cls_a_w, cls_n_w, patch_w, breakdown)
