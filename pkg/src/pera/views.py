"""Aligned view pairs and tripartite disjoint patch masks.

A pair shares one set of spatial parameters (crop box and flips) so that
patch ``i`` of the student view and patch ``i`` of the teacher view cover the
same source region; only the color distortion differs.  The patch grid is
then split into three disjoint parts: ``s`` (visible to the student), ``l``
(replaced by the learnable mask token in the student) and ``t`` (visible to
the teacher).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F
from torchvision.transforms.v2 import functional as TF

from .config import AugConfig, MaskRatios
from .errors import AugmentationError, ConfigurationError, ContractError

COLOR_OPS = ("brightness", "contrast", "saturation", "hue")


@dataclass(frozen=True)
class SpatialParams:
    hflip: bool
    vflip: bool
    crop_box: tuple[int, int, int, int]  # top, left, height, width
    target_size: int


@dataclass(frozen=True)
class ColorParams:
    order: tuple[str, ...]
    factors: dict[str, float] = field(default_factory=dict)
    grayscale: bool = False


@dataclass
class ViewPair:
    student_view: np.ndarray
    teacher_view: np.ndarray
    spatial: SpatialParams
    student_color: ColorParams
    teacher_color: ColorParams
    # equal to ``spatial`` (same object) when the pair is aligned
    teacher_spatial: SpatialParams | None = None
    # student view after the spatial transform, before color distortion
    student_target: np.ndarray | None = None


@dataclass(frozen=True)
class TriMask:
    num_patches: int
    s_idx: np.ndarray
    l_idx: np.ndarray
    t_idx: np.ndarray


@dataclass
class BatchMasks:
    """Per-sample index tensors, shape (B, part_size); every sample shares the part sizes."""

    s_idx: torch.Tensor
    l_idx: torch.Tensor
    t_idx: torch.Tensor
    num_patches: int

    @classmethod
    def stack(cls, masks: list[TriMask]) -> "BatchMasks":
        n = masks[0].num_patches

        def cat(attr):
            return torch.from_numpy(np.stack([getattr(m, attr) for m in masks]).astype(np.int64))

        return cls(cat("s_idx"), cat("l_idx"), cat("t_idx"), n)

    @classmethod
    def dense(cls, batch: int, num_patches: int) -> "BatchMasks":
        """Both sides see every patch and no mask token exists (disjoint masks switched off)."""
        full = torch.arange(num_patches).expand(batch, -1).clone()
        return cls(full, torch.zeros(batch, 0, dtype=torch.long), full.clone(), num_patches)


@dataclass
class AssembledInputs:
    student_tokens: torch.Tensor  # (B, 1 + |s|, D), positional embeddings added
    mask_tokens: torch.Tensor  # (B, |l|, D), mask token + positional embedding
    teacher_tokens: torch.Tensor  # (B, 1 + |t|, D)
    targets: torch.Tensor | None  # (B, |l|, 3 * P * P) raw pixels


# -- spatial ---------------------------------------------------------------


def sample_spatial(rng: np.random.Generator, height: int, width: int, aug: AugConfig, target_size: int) -> SpatialParams:
    """Random resized crop box plus flips, following the usual ten-attempt rejection scheme."""
    if height < 1 or width < 1 or target_size < 1:
        raise AugmentationError(f"cannot crop a {height}x{width} image to {target_size}")
    area = height * width
    log_ratio = (math.log(aug.crop_ratio[0]), math.log(aug.crop_ratio[1]))
    box = None
    for _ in range(10):
        target_area = area * rng.uniform(*aug.crop_scale)
        ratio = math.exp(rng.uniform(*log_ratio))
        w = int(round(math.sqrt(target_area * ratio)))
        h = int(round(math.sqrt(target_area / ratio)))
        if 0 < w <= width and 0 < h <= height:
            box = (int(rng.integers(0, height - h + 1)), int(rng.integers(0, width - w + 1)), h, w)
            break
    if box is None:
        # central crop at the clamped aspect ratio
        in_ratio = width / height
        if in_ratio < aug.crop_ratio[0]:
            w, h = width, int(round(width / aug.crop_ratio[0]))
        elif in_ratio > aug.crop_ratio[1]:
            h, w = height, int(round(height * aug.crop_ratio[1]))
        else:
            w, h = width, height
        box = ((height - h) // 2, (width - w) // 2, h, w)
    return SpatialParams(
        hflip=bool(rng.random() < aug.hflip_p),
        vflip=bool(rng.random() < aug.vflip_p),
        crop_box=box,
        target_size=target_size,
    )


def apply_spatial(image: np.ndarray, params: SpatialParams) -> np.ndarray:
    """Crop, bilinearly resize (half-pixel centers) and flip an H x W x C array."""
    top, left, h, w = params.crop_box
    H, W = image.shape[:2]
    if h < 1 or w < 1 or top < 0 or left < 0 or top + h > H or left + w > W:
        raise AugmentationError(f"crop box {params.crop_box} does not fit a {H}x{W} image")
    crop = torch.from_numpy(np.ascontiguousarray(image[top : top + h, left : left + w])).permute(2, 0, 1)[None]
    size = params.target_size
    if (h, w) != (size, size):
        crop = F.interpolate(crop, size=(size, size), mode="bilinear", align_corners=False)
    out = crop[0].permute(1, 2, 0).numpy()
    if params.hflip:
        out = out[:, ::-1]
    if params.vflip:
        out = out[::-1]
    return np.ascontiguousarray(out)


# -- color -----------------------------------------------------------------


def sample_color(rng: np.random.Generator, aug: AugConfig) -> ColorParams:
    order = tuple(COLOR_OPS[i] for i in rng.permutation(len(COLOR_OPS)))
    factors: dict[str, float] = {}
    if rng.random() < aug.jitter_p:
        for name in ("brightness", "contrast", "saturation"):
            strength = getattr(aug, name)
            factors[name] = float(rng.uniform(max(0.0, 1 - strength), 1 + strength))
        factors["hue"] = float(rng.uniform(-aug.hue, aug.hue))
    return ColorParams(order=order, factors=factors, grayscale=bool(rng.random() < aug.grayscale_p))


_NEUTRAL = {"brightness": 1.0, "contrast": 1.0, "saturation": 1.0, "hue": 0.0}
_ADJUST = {
    "brightness": TF.adjust_brightness,
    "contrast": TF.adjust_contrast,
    "saturation": TF.adjust_saturation,
    "hue": TF.adjust_hue,
}


def apply_color(image: np.ndarray, params: ColorParams) -> np.ndarray:
    x = torch.from_numpy(np.ascontiguousarray(image)).permute(2, 0, 1)
    for name in params.order:
        factor = params.factors.get(name, _NEUTRAL[name])
        # neutral factors are skipped, so a zero-strength jitter is an exact identity
        if factor != _NEUTRAL[name]:
            x = _ADJUST[name](x, factor)
    if params.grayscale:
        x = TF.rgb_to_grayscale(x, num_output_channels=3)
    return x.clamp(0.0, 1.0).permute(1, 2, 0).numpy().copy()


def make_view_pair(
    image: np.ndarray, rng: np.random.Generator, aug: AugConfig, spatial_alignment: bool = True, target_size: int | None = None
) -> ViewPair:
    if image.ndim != 3 or image.shape[2] != 3:
        raise AugmentationError(f"expected an H x W x 3 image, got shape {image.shape}")
    H, W = image.shape[:2]
    target_size = target_size or H
    spatial = sample_spatial(rng, H, W, aug, target_size)
    teacher_spatial = spatial if spatial_alignment else sample_spatial(rng, H, W, aug, target_size)
    student_color = sample_color(rng, aug)
    teacher_color = sample_color(rng, aug)
    student_base = apply_spatial(image, spatial)
    teacher_base = student_base if teacher_spatial is spatial else apply_spatial(image, teacher_spatial)
    return ViewPair(
        student_view=apply_color(student_base, student_color),
        teacher_view=apply_color(teacher_base, teacher_color),
        spatial=spatial,
        student_color=student_color,
        teacher_color=teacher_color,
        teacher_spatial=teacher_spatial,
        student_target=student_base,
    )


# -- masks -----------------------------------------------------------------


def round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5 + 1e-9))


def part_sizes(num_patches: int, ratios: MaskRatios) -> tuple[int, int, int]:
    """(|s|, |l|, |t|): |t| and |l| rounded half-up, |s| takes the remainder."""
    n_t = round_half_up(ratios.t * num_patches)
    n_l = round_half_up(ratios.l * num_patches)
    return num_patches - n_t - n_l, n_l, n_t


def sample_trimask(num_patches: int, ratios: MaskRatios, rng: np.random.Generator) -> TriMask:
    if num_patches < 3:
        raise ConfigurationError(f"need at least 3 patches for a tripartite mask, got {num_patches}")
    n_s, n_l, n_t = part_sizes(num_patches, ratios)
    if n_s < 1 or n_t < 1 or n_l < 0:
        raise ConfigurationError(
            f"ratios (s={ratios.s}, l={ratios.l}, t={ratios.t}) leave part sizes ({n_s}, {n_l}, {n_t}) at N={num_patches}"
        )
    perm = rng.permutation(num_patches)
    return TriMask(
        num_patches,
        s_idx=np.sort(perm[n_t + n_l :]),
        l_idx=np.sort(perm[n_t : n_t + n_l]),
        t_idx=np.sort(perm[:n_t]),
    )


def gather_tokens(x: torch.Tensor, idx: torch.Tensor) -> torch.Tensor:
    return torch.gather(x, 1, idx.unsqueeze(-1).expand(-1, -1, x.shape[-1]))


def assemble_inputs(
    student_patches: torch.Tensor,
    teacher_patches: torch.Tensor,
    masks: BatchMasks,
    mask_token: torch.Tensor,
    pos_embed: torch.Tensor,
    cls_token: torch.Tensor,
    pixel_patches: torch.Tensor | None = None,
    teacher_pos_embed: torch.Tensor | None = None,
    teacher_cls_token: torch.Tensor | None = None,
) -> AssembledInputs:
    """Build the sparse student and teacher token sequences.

    ``pos_embed`` has shape (1, N + 1, D) with the cls slot first.  The teacher
    uses its own positional/cls parameters when given (it is a separate network
    with the same layout).
    """
    B, N, D = student_patches.shape
    if teacher_patches.shape != student_patches.shape or N != masks.num_patches:
        raise ContractError(
            f"patch sequences {tuple(student_patches.shape)} / {tuple(teacher_patches.shape)} "
            f"do not match a mask over {masks.num_patches} patches"
        )
    if masks.s_idx.shape[0] != B or mask_token.shape[-1] != D or pos_embed.shape[1] != N + 1:
        raise ContractError("mask batch, mask token or positional embedding has the wrong shape")
    t_pos = pos_embed if teacher_pos_embed is None else teacher_pos_embed
    t_cls = cls_token if teacher_cls_token is None else teacher_cls_token

    def sparse(patches, idx, pos, cls):
        pos_patch = pos[:, 1:].expand(B, -1, -1)
        kept = gather_tokens(patches, idx) + gather_tokens(pos_patch, idx)
        return torch.cat([(cls + pos[:, :1]).expand(B, -1, -1), kept], dim=1)

    pos_patch = pos_embed[:, 1:].expand(B, -1, -1)
    mask_tokens = mask_token.view(1, 1, D) + gather_tokens(pos_patch, masks.l_idx)
    targets = None
    if pixel_patches is not None:
        targets = gather_tokens(pixel_patches, masks.l_idx)
    return AssembledInputs(
        student_tokens=sparse(student_patches, masks.s_idx, pos_embed, cls_token),
        mask_tokens=mask_tokens,
        teacher_tokens=sparse(teacher_patches, masks.t_idx, t_pos, t_cls),
        targets=targets,
    )
