"""Pre-training loop: schedules, model state, the per-step pipeline and metric logging."""

from __future__ import annotations

import itertools
import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np
import torch

from .config import TrainConfig
from .data import Dataset, ImageBatch, make_batches, num_batches
from .errors import ContractError, TrainingError
from .model import PerANetwork, encode_teacher, patchify, predict_pixels
from .objective import (
    LossBreakdown,
    Temperatures,
    cls_loss,
    ema_update,
    entropy,
    mse_loss,
    teacher_targets,
    update_center,
)
from .views import BatchMasks, assemble_inputs, make_view_pair, sample_trimask

logger = logging.getLogger(__name__)

METRIC_FIELDS = ("step", "lr", "wd", "ema_m", "tpt_t", "l_cls", "l_mse", "teacher_entropy", "teacher_std")


@dataclass(frozen=True)
class ScheduleValues:
    lr: float
    wd: float
    ema_m: float
    tpt_t: float


def _cosine(start: float, end: float, progress: float) -> float:
    return end + 0.5 * (start - end) * (1.0 + math.cos(math.pi * progress))


def schedule_values(step: int, cfg: TrainConfig, steps_per_epoch: int) -> ScheduleValues:
    """Closed-form values at ``step`` (``step == total`` evaluates the end points).

    lr ramps linearly from 0 over the warmup epochs then follows a cosine to
    ``final_lr``; weight decay and EMA momentum follow increasing cosines over
    the whole run; the teacher temperature rises linearly per epoch and then
    stays at its maximum.
    """
    total = cfg.epochs * steps_per_epoch
    if not 0 <= step <= total:
        raise ContractError(f"step {step} outside [0, {total}]")
    warm = cfg.warmup_epochs * steps_per_epoch
    if step < warm:
        lr = cfg.base_lr * step / warm
    else:
        lr = _cosine(cfg.base_lr, cfg.final_lr, (step - warm) / max(1, total - warm))
    frac = step / total
    wd = _cosine(cfg.weight_decay_start, cfg.weight_decay_end, frac)
    ema_m = _cosine(cfg.ema_momentum_start, cfg.ema_momentum_end, frac)
    epoch = step // steps_per_epoch
    if cfg.tpt_t_warmup_epochs > 0:
        ramp = min(epoch / cfg.tpt_t_warmup_epochs, 1.0)
    else:
        ramp = 1.0
    tpt_t = cfg.tpt_t_start + (cfg.tpt_t_max - cfg.tpt_t_start) * ramp
    return ScheduleValues(lr, wd, ema_m, tpt_t)


@dataclass
class ModelState:
    config: TrainConfig
    student: PerANetwork
    teacher: PerANetwork
    optimizer: torch.optim.AdamW
    center: torch.Tensor
    step: int
    steps_per_epoch: int

    @property
    def total_steps(self) -> int:
        return self.config.epochs * self.steps_per_epoch


def _param_groups(model: torch.nn.Module):
    decay, no_decay = [], []
    for name, p in model.named_parameters():
        if p.ndim <= 1 or name.endswith(".bias") or name.endswith(("pos_embed", "cls_token", "mask_token")):
            no_decay.append(p)
        else:
            decay.append(p)
    return [{"params": decay, "weight_decay": 0.0}, {"params": no_decay, "weight_decay": 0.0}]


def init_state(cfg: TrainConfig, steps_per_epoch: int, dtype: torch.dtype = torch.float32) -> ModelState:
    cfg.validate()
    torch.manual_seed(cfg.seed)
    student = PerANetwork(cfg, with_predictor=True).to(dtype)
    teacher = PerANetwork(cfg, with_predictor=False).to(dtype)
    teacher.load_state_dict(student.state_dict(), strict=False)
    teacher.requires_grad_(False)
    teacher.eval()
    optimizer = torch.optim.AdamW(_param_groups(student), lr=0.0, betas=(0.9, 0.999))
    center = torch.zeros(cfg.num_prototypes, dtype=dtype)
    return ModelState(cfg, student, teacher, optimizer, center, 0, steps_per_epoch)


@dataclass
class StepInputs:
    student_view: torch.Tensor  # (B, 3, H, W)
    teacher_view: torch.Tensor
    target_view: torch.Tensor  # student view before color distortion
    masks: BatchMasks


def _to_tensor(images: list[np.ndarray], dtype) -> torch.Tensor:
    return torch.from_numpy(np.stack(images)).permute(0, 3, 1, 2).to(dtype).contiguous()


def prepare_inputs(images: np.ndarray, cfg: TrainConfig, step: int, dtype=torch.float32) -> StepInputs:
    """Views and masks for one batch; sample ``i`` draws from ``default_rng([seed, step, i])``."""
    b = cfg.backbone
    students, teachers, targets, masks = [], [], [], []
    for i, image in enumerate(images):
        rng = np.random.default_rng([cfg.seed, step, i])
        pair = make_view_pair(image, rng, cfg.aug, cfg.toggles.sa, b.image_size)
        students.append(pair.student_view)
        teachers.append(pair.teacher_view)
        targets.append(pair.student_target)
        if cfg.toggles.dm:
            masks.append(sample_trimask(b.num_patches, cfg.ratios, rng))
    batch_masks = BatchMasks.stack(masks) if cfg.toggles.dm else BatchMasks.dense(len(images), b.num_patches)
    return StepInputs(_to_tensor(students, dtype), _to_tensor(teachers, dtype), _to_tensor(targets, dtype), batch_masks)


@dataclass
class ForwardResult:
    losses: LossBreakdown
    teacher_logits: torch.Tensor
    teacher_probs: torch.Tensor


def forward_losses(
    student: PerANetwork, teacher: PerANetwork, center: torch.Tensor, inputs: StepInputs, cfg: TrainConfig, tpt_t: float
) -> ForwardResult:
    sb, tb = student.backbone, teacher.backbone
    pp = cfg.toggles.pp and inputs.masks.l_idx.shape[1] > 0
    student_patches = sb.patch_embed_images(inputs.student_view)
    with torch.no_grad():
        teacher_patches = tb.patch_embed_images(inputs.teacher_view)
    pixels = patchify(inputs.target_view, cfg.backbone.patch_size) if pp else None
    assembled = assemble_inputs(
        student_patches,
        teacher_patches,
        inputs.masks,
        sb.mask_token,
        sb.pos_embed,
        sb.cls_token,
        pixels,
        teacher_pos_embed=tb.pos_embed,
        teacher_cls_token=tb.cls_token,
    )
    out_s = sb.encode_student(assembled.student_tokens, assembled.mask_tokens)
    out_t = encode_teacher(assembled.teacher_tokens, tb)
    s_logits = student.projector(out_s.cls)
    with torch.no_grad():
        t_logits = teacher.projector(out_t.cls)
    l_cls = cls_loss(s_logits, t_logits, center, Temperatures(cfg.tpt_s, tpt_t))
    if pp:
        mask_out = out_s.mask_out if cfg.mse_through_encoder else out_s.mask_out.detach()
        l_mse = mse_loss(predict_pixels(mask_out, student.predictor), assembled.targets, 1.0)
    else:
        l_mse = torch.zeros((), dtype=l_cls.dtype)
    total = l_cls + cfg.mse_weight * l_mse
    probs = teacher_targets(t_logits, center, tpt_t)
    return ForwardResult(LossBreakdown(l_cls, l_mse, total, cfg.mse_weight), t_logits, probs)


def _teacher_logits(teacher: PerANetwork, inputs: StepInputs) -> torch.Tensor:
    tb = teacher.backbone
    patches = tb.patch_embed_images(inputs.teacher_view)
    masks = inputs.masks
    assembled = assemble_inputs(patches, patches, masks, tb.mask_token, tb.pos_embed, tb.cls_token)
    return teacher.projector(encode_teacher(assembled.teacher_tokens, tb).cls)


def _step_seed(seed: int, step: int) -> int:
    return int(np.random.SeedSequence([seed, step, 0x5EED]).generate_state(1)[0])


def train_step(state: ModelState, batch: ImageBatch) -> tuple[ModelState, dict]:
    """One optimisation step; mutates ``state`` in place and returns it with the step metrics."""
    cfg = state.config
    if len(batch.images) == 0:
        raise ContractError("empty batch")
    sched = schedule_values(state.step, cfg, state.steps_per_epoch)
    # drop-path masks come from the global torch generator, reseeded per step
    torch.manual_seed(_step_seed(cfg.seed, state.step))
    inputs = prepare_inputs(batch.images, cfg, state.step, dtype=state.center.dtype)

    state.student.train()
    if state.step == 0 and cfg.center_warm_start:
        # the running center starts at the first batch's teacher mean instead of 0
        with torch.no_grad():
            state.center = _teacher_logits(state.teacher, inputs).mean(dim=0)
    result = forward_losses(state.student, state.teacher, state.center, inputs, cfg, sched.tpt_t)
    losses = result.losses
    if not torch.isfinite(losses.total):
        raise TrainingError(f"non-finite loss at step {state.step}")

    opt = state.optimizer
    opt.zero_grad(set_to_none=True)
    losses.total.backward()
    if state.step // state.steps_per_epoch < cfg.freeze_prototypes_epochs:
        state.student.projector.prototypes.grad = None
    if cfg.clip_grad > 0:
        torch.nn.utils.clip_grad_norm_(state.student.parameters(), cfg.clip_grad)
    for i, group in enumerate(opt.param_groups):
        group["lr"] = sched.lr
        group["weight_decay"] = sched.wd if i == 0 else 0.0
    opt.step()
    ema_update(state.teacher, state.student, sched.ema_m)
    state.center = update_center(state.center, result.teacher_logits, cfg.center_momentum)

    metrics = {
        "step": state.step,
        "lr": sched.lr,
        "wd": sched.wd,
        "ema_m": sched.ema_m,
        "tpt_t": sched.tpt_t,
        "l_cls": float(losses.l_cls.detach()),
        "l_mse": float(losses.l_mse.detach()),
        # entropy of the batch-averaged teacher distribution: drops towards 0 on collapse
        "teacher_entropy": float(entropy(result.teacher_probs.mean(dim=0))),
        "teacher_std": float(result.teacher_logits.std(dim=0).mean()) if len(batch.images) > 1 else 0.0,
    }
    state.step += 1
    return state, metrics


def format_metrics(record: dict) -> str:
    return json.dumps({k: record[k] for k in METRIC_FIELDS})


def read_metrics(path: str | Path) -> list[dict]:
    return [json.loads(line) for line in Path(path).read_text().splitlines() if line.strip()]


def pretrain(
    cfg: TrainConfig,
    dataset: Dataset,
    out_dir: str | Path | None = None,
    state: ModelState | None = None,
    stop_step: int | None = None,
    callback: Callable[[ModelState, dict], None] | None = None,
) -> tuple[ModelState, list[dict]]:
    """Run (or resume) pre-training up to ``stop_step`` (default: the full schedule).

    Batches are a pure function of (seed, epoch), so a run resumed from a
    checkpoint at step k sees exactly the batches an uninterrupted run sees.
    """
    from .checkpoint import save_checkpoint

    spe = num_batches(len(dataset), cfg.batch_size)
    if state is None:
        state = init_state(cfg, spe)
    elif state.steps_per_epoch != spe:
        raise ContractError(f"state was built for {state.steps_per_epoch} steps/epoch, dataset gives {spe}")
    stop = state.total_steps if stop_step is None else min(stop_step, state.total_steps)
    out = Path(out_dir) if out_dir is not None else None
    log_file = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        log_file = open(out / "metrics.log", "a" if state.step > 0 else "w", encoding="utf-8")
    records = []
    try:
        while state.step < stop:
            epoch, offset = divmod(state.step, spe)
            batches = make_batches(dataset, cfg.batch_size, cfg.seed, shuffle=True, epoch=epoch)
            for batch in itertools.islice(batches, offset, None):
                if state.step >= stop:
                    break
                state, record = train_step(state, batch)
                records.append(record)
                if log_file is not None:
                    log_file.write(format_metrics(record) + "\n")
                if callback is not None:
                    callback(state, record)
                if out is not None and cfg.checkpoint_every and state.step % cfg.checkpoint_every == 0:
                    save_checkpoint(state, out / "checkpoints" / f"step_{state.step:06d}")
                if state.step % 50 == 0:
                    logger.info("step %d l_cls %.4f l_mse %.4f", state.step, record["l_cls"], record["l_mse"])
    finally:
        if log_file is not None:
            log_file.close()
    if out is not None:
        save_checkpoint(state, out / "checkpoint")
    return state, records
