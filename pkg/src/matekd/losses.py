"""Scalar training objectives.

Every loss works on raw logits, does the softmax internally in log-space,
and reduces with a batch mean when given 2-D inputs. Teacher logits are
always detached: the teacher is reachable through its outputs only, so no
objective here may propagate gradients into it.
"""
from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F


class LossError(ValueError):
    """Raised on malformed loss inputs."""


@dataclass(frozen=True)
class LossConfig:
    """Distillation knobs: softening temperature and baseline mix weight."""

    temperature: float = 2.0
    kd_lambda: float = 0.5

    def __post_init__(self):
        if self.temperature <= 0:
            raise LossError("temperature must be > 0")
        if not 0.0 <= self.kd_lambda <= 1.0:
            raise LossError("kd_lambda must be in [0, 1]")


def _check_pair(p_logits: torch.Tensor, q_logits: torch.Tensor) -> None:
    if p_logits.shape != q_logits.shape:
        raise LossError(f"logit shapes differ: {tuple(p_logits.shape)} vs {tuple(q_logits.shape)}")
    if p_logits.ndim not in (1, 2):
        raise LossError("expected a logit vector or a batch of logit vectors")


def kl_div(p_logits: torch.Tensor, q_logits: torch.Tensor) -> torch.Tensor:
    """D_KL(softmax(p) || softmax(q)), batch-mean for 2-D inputs."""
    _check_pair(p_logits, q_logits)
    log_p = F.log_softmax(p_logits, dim=-1)
    log_q = F.log_softmax(q_logits, dim=-1)
    kl = (log_p.exp() * (log_p - log_q)).sum(dim=-1)
    return kl.mean()


def ce_loss(student_logits: torch.Tensor, y: torch.Tensor | int) -> torch.Tensor:
    """Cross entropy against hard labels, batch-mean."""
    if student_logits.ndim == 1:
        student_logits = student_logits.unsqueeze(0)
    y = torch.as_tensor(y, dtype=torch.long).reshape(-1)
    c = student_logits.shape[-1]
    if ((y < 0) | (y >= c)).any():
        raise LossError(f"label out of range for {c} classes: {y.tolist()}")
    return F.cross_entropy(student_logits, y)


def kd_loss(teacher_logits: torch.Tensor, student_logits: torch.Tensor,
            temperature: float) -> torch.Tensor:
    """Temperature-softened KL between teacher and student, scaled by T^2."""
    if temperature <= 0:
        raise LossError(f"temperature must be > 0, got {temperature}")
    t = teacher_logits.detach() / temperature
    s = student_logits / temperature
    return temperature ** 2 * kl_div(t, s)


def kd_baseline_loss(ce: torch.Tensor, kd: torch.Tensor, kd_lambda: float) -> torch.Tensor:
    """(1 - lambda) * CE + lambda * KD."""
    if not 0.0 <= kd_lambda <= 1.0:
        raise LossError(f"kd_lambda must be in [0, 1], got {kd_lambda}")
    return (1.0 - kd_lambda) * ce + kd_lambda * kd


def adv_loss(teacher_logits: torch.Tensor, student_logits: torch.Tensor) -> torch.Tensor:
    """KL between teacher and student on pseudo samples, at temperature 1."""
    return kl_div(teacher_logits.detach(), student_logits)


def mate_kd_loss(ce: torch.Tensor, kd: torch.Tensor, adv: torch.Tensor) -> torch.Tensor:
    """Equal-weight mean of the CE, KD and adversarial terms."""
    for name, term in (("ce", ce), ("kd", kd), ("adv", adv)):
        if not torch.isfinite(torch.as_tensor(term)).all():
            raise LossError(f"non-finite {name} term: {term}")
    return (ce + kd + adv) / 3.0


def generator_objective(teacher_logits: torch.Tensor,
                        student_logits: torch.Tensor) -> torch.Tensor:
    """Teacher/student divergence on pseudo samples, to be MAXIMIZED.

    Same value as adv_loss; the trainer performs ascent by minimizing the
    negation. Gradients reach the generator through the student's relaxed
    input rows only — the teacher side is detached here and the trainer
    freezes student parameters during maximization steps.
    """
    return kl_div(teacher_logits.detach(), student_logits)
