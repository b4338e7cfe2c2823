"""Loss terms and the two non-gradient updates (center and EMA teacher)."""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn

from .errors import ContractError, NumericalError


@dataclass
class Temperatures:
    tpt_s: float
    tpt_t: float

    def __post_init__(self):
        if self.tpt_s <= 0 or self.tpt_t <= 0:
            raise ContractError("temperatures must be positive")


@dataclass
class LossBreakdown:
    l_cls: torch.Tensor
    l_mse: torch.Tensor
    total: torch.Tensor
    w: float


def softmax_H(logits: torch.Tensor, temperature: float) -> torch.Tensor:
    """Temperature softmax over the last axis, max-subtracted."""
    if temperature <= 0:
        raise ContractError(f"temperature must be positive, got {temperature}")
    if not torch.isfinite(logits).all():
        raise NumericalError("non-finite logits passed to softmax")
    z = logits / temperature
    z = z - z.amax(dim=-1, keepdim=True)
    e = z.exp()
    return e / e.sum(dim=-1, keepdim=True)


def teacher_targets(teacher_logits: torch.Tensor, center: torch.Tensor, tpt_t: float) -> torch.Tensor:
    return softmax_H(teacher_logits.detach() - center.detach(), tpt_t)


def cls_loss(student_logits: torch.Tensor, teacher_logits: torch.Tensor, center: torch.Tensor, temps: Temperatures) -> torch.Tensor:
    """Batch mean of -sum_k P_t,k log P_s,k; the teacher side carries no gradient."""
    if student_logits.shape != teacher_logits.shape or center.shape[-1] != student_logits.shape[-1]:
        raise ContractError(
            f"prototype dimension mismatch: student {tuple(student_logits.shape)}, "
            f"teacher {tuple(teacher_logits.shape)}, center {tuple(center.shape)}"
        )
    p_t = teacher_targets(teacher_logits, center, temps.tpt_t)
    log_p_s = torch.log_softmax(student_logits / temps.tpt_s, dim=-1)
    return -(p_t * log_p_s).sum(dim=-1).mean()


def mse_loss(predicted: torch.Tensor, targets: torch.Tensor, w: float = 1.0) -> torch.Tensor:
    """``w`` times the mean squared error over every masked pixel value; 0 when nothing is masked."""
    if predicted.shape != targets.shape:
        raise ContractError(f"prediction {tuple(predicted.shape)} vs target {tuple(targets.shape)}")
    if predicted.numel() == 0:
        return predicted.sum() * 0.0
    return w * ((predicted - targets) ** 2).mean()


def entropy(p: torch.Tensor) -> torch.Tensor:
    return -(p * torch.log(p.clamp_min(1e-30))).sum(dim=-1)


@torch.no_grad()
def update_center(center: torch.Tensor, teacher_logits: torch.Tensor, momentum: float) -> torch.Tensor:
    """c <- n c + (1 - n) * batch mean of teacher projections (returns a new tensor)."""
    if teacher_logits.ndim != 2 or teacher_logits.shape[0] < 1:
        raise ContractError("update_center needs a non-empty (B, K) batch")
    return momentum * center + (1.0 - momentum) * teacher_logits.mean(dim=0)


@torch.no_grad()
def ema_update(teacher: nn.Module, student: nn.Module, momentum: float) -> None:
    """theta_t <- m theta_t + (1 - m) theta_s for every teacher parameter, in place.

    The student may carry extra parameters (the pixel predictor); every teacher
    parameter must have a student counterpart of the same shape.
    """
    if not 0.0 <= momentum <= 1.0:
        raise ContractError(f"EMA momentum {momentum} outside [0, 1]")
    student_params = dict(student.named_parameters())
    for name, p_t in teacher.named_parameters():
        p_s = student_params.get(name)
        if p_s is None or p_s.shape != p_t.shape:
            raise ContractError(f"teacher parameter {name} has no matching student parameter")
        if momentum == 0.0:
            p_t.copy_(p_s)
        else:
            p_t.mul_(momentum).add_(p_s.detach(), alpha=1.0 - momentum)
