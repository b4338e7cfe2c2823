"""Compact ViT backbone with midway mask-token injection, plus projection and pixel heads."""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .config import BackboneConfig, TrainConfig
from .errors import ConfigurationError, NumericalError


def patchify(images: torch.Tensor, patch_size: int) -> torch.Tensor:
    """(B, 3, H, W) -> (B, N, P*P*3), patches in row-major grid order, pixels as (p, q, c)."""
    B, C, H, W = images.shape
    if H % patch_size or W % patch_size:
        raise ConfigurationError(f"image {H}x{W} not divisible by patch size {patch_size}")
    gh, gw = H // patch_size, W // patch_size
    x = images.reshape(B, C, gh, patch_size, gw, patch_size)
    x = torch.einsum("bchpwq->bhwpqc", x)
    return x.reshape(B, gh * gw, patch_size * patch_size * C)


def unpatchify(patches: torch.Tensor, patch_size: int, channels: int = 3) -> torch.Tensor:
    B, N, _ = patches.shape
    g = int(round(N**0.5))
    x = patches.reshape(B, g, g, patch_size, patch_size, channels)
    x = torch.einsum("bhwpqc->bchpwq", x)
    return x.reshape(B, channels, g * patch_size, g * patch_size)


class DropPath(nn.Module):
    def __init__(self, p: float = 0.0):
        super().__init__()
        self.p = p

    def forward(self, x):
        if self.p == 0.0 or not self.training:
            return x
        keep = 1.0 - self.p
        mask = x.new_empty(x.shape[0], *([1] * (x.ndim - 1))).bernoulli_(keep)
        return x * mask / keep


class Attention(nn.Module):
    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.heads = heads
        self.scale = (dim // heads) ** -0.5
        self.qkv = nn.Linear(dim, dim * 3)
        self.proj = nn.Linear(dim, dim)

    def forward(self, x, return_attn: bool = False):
        B, T, D = x.shape
        qkv = self.qkv(x).reshape(B, T, 3, self.heads, D // self.heads).permute(2, 0, 3, 1, 4)
        q, k, v = qkv[0], qkv[1], qkv[2]
        attn = ((q * self.scale) @ k.transpose(-2, -1)).softmax(dim=-1)
        out = self.proj((attn @ v).transpose(1, 2).reshape(B, T, D))
        return (out, attn) if return_attn else out


class Block(nn.Module):
    def __init__(self, dim: int, heads: int, mlp_ratio: float, drop_path: float):
        super().__init__()
        hidden = int(dim * mlp_ratio)
        self.norm1 = nn.LayerNorm(dim, eps=1e-6)
        self.attn = Attention(dim, heads)
        self.norm2 = nn.LayerNorm(dim, eps=1e-6)
        self.mlp = nn.Sequential(nn.Linear(dim, hidden), nn.GELU(), nn.Linear(hidden, dim))
        self.drop_path = DropPath(drop_path)

    def forward(self, x, return_attn: bool = False):
        if return_attn:
            y, attn = self.attn(self.norm1(x), return_attn=True)
        else:
            y, attn = self.attn(self.norm1(x)), None
        x = x + self.drop_path(y)
        x = x + self.drop_path(self.mlp(self.norm2(x)))
        return (x, attn) if return_attn else x


@dataclass
class EncoderOutput:
    cls: torch.Tensor  # (B, D), after the final norm
    mask_out: torch.Tensor | None = None  # (B, |l|, D), residual stream, student only


def _check_finite(x: torch.Tensor, layer: int, role: str) -> None:
    if not torch.isfinite(x).all():
        raise NumericalError(f"non-finite activations in {role} encoder after layer {layer}")


class VisionTransformer(nn.Module):
    def __init__(self, cfg: BackboneConfig):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        D, N, P = cfg.embed_dim, cfg.num_patches, cfg.patch_size
        self.patch_embed = nn.Linear(3 * P * P, D)
        self.cls_token = nn.Parameter(torch.zeros(1, 1, D))
        self.pos_embed = nn.Parameter(torch.zeros(1, N + 1, D))
        self.mask_token = nn.Parameter(torch.zeros(D))
        rates = torch.linspace(0, cfg.drop_path_rate, cfg.depth).tolist()
        self.blocks = nn.ModuleList(Block(D, cfg.heads, cfg.mlp_ratio, r) for r in rates)
        self.norm = nn.LayerNorm(D, eps=1e-6)
        nn.init.trunc_normal_(self.pos_embed, std=0.02)
        nn.init.trunc_normal_(self.cls_token, std=0.02)
        nn.init.normal_(self.mask_token, std=0.02)
        self.apply(_init_linear)

    def patch_embed_images(self, images: torch.Tensor) -> torch.Tensor:
        """(B, 3, H, W) -> (B, N, D) patch tokens; positional embeddings are added later."""
        if images.shape[-1] != self.cfg.image_size or images.shape[-2] != self.cfg.image_size:
            raise ConfigurationError(
                f"image {tuple(images.shape[-2:])} does not match backbone size {self.cfg.image_size}"
            )
        return self.patch_embed(patchify(images, self.cfg.patch_size))

    def embed_dense(self, images: torch.Tensor) -> torch.Tensor:
        x = self.patch_embed_images(images)
        cls = self.cls_token.expand(x.shape[0], -1, -1)
        return torch.cat([cls, x], dim=1) + self.pos_embed

    def encode_student(self, tokens: torch.Tensor, mask_tokens: torch.Tensor, inject_layer: int | None = None) -> EncoderOutput:
        """Run cls + visible tokens; append mask tokens before block ``inject_layer``.

        With ``inject_layer == depth`` the mask tokens skip every block and come
        back unchanged.
        """
        inject = self.cfg.injection_layer if inject_layer is None else inject_layer
        if not 0 <= inject <= len(self.blocks):
            raise ConfigurationError(f"inject_layer {inject} outside [0, {len(self.blocks)}]")
        n_mask = mask_tokens.shape[1]
        x = tokens
        for i, blk in enumerate(self.blocks):
            if i == inject:
                x = torch.cat([x, mask_tokens], dim=1)
            x = blk(x)
            _check_finite(x, i, "student")
        if inject == len(self.blocks):
            x = torch.cat([x, mask_tokens], dim=1)
        mask_out = x[:, x.shape[1] - n_mask :]
        return EncoderOutput(cls=self.norm(x[:, 0]), mask_out=mask_out)

    def encode(self, tokens: torch.Tensor, role: str = "teacher") -> EncoderOutput:
        """Plain encoding of an already-assembled sequence (teacher path, dense features)."""
        x = tokens
        for i, blk in enumerate(self.blocks):
            x = blk(x)
            _check_finite(x, i, role)
        return EncoderOutput(cls=self.norm(x[:, 0]))

    def forward_features(self, images: torch.Tensor) -> torch.Tensor:
        return self.encode(self.embed_dense(images), role="dense").cls

    def last_attention(self, images: torch.Tensor) -> torch.Tensor:
        """Attention probabilities of the last block, shape (B, heads, N+1, N+1)."""
        x = self.embed_dense(images)
        for blk in self.blocks[:-1]:
            x = blk(x)
        _, attn = self.blocks[-1](x, return_attn=True)
        return attn


def _init_linear(m: nn.Module) -> None:
    if isinstance(m, nn.Linear):
        nn.init.trunc_normal_(m.weight, std=0.02)
        if m.bias is not None:
            nn.init.zeros_(m.bias)


class BatchStatNorm(nn.Module):
    """Batch normalisation that always uses the statistics of the current batch.

    No running buffers are kept, so an EMA copy of the weights behaves exactly
    like the network it averages.  A single-sample batch normalises to the bias.
    """

    def __init__(self, dim: int, eps: float = 1e-5):
        super().__init__()
        self.eps = eps
        self.weight = nn.Parameter(torch.ones(dim))
        self.bias = nn.Parameter(torch.zeros(dim))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        mean = x.mean(dim=0, keepdim=True)
        var = x.var(dim=0, unbiased=False, keepdim=True)
        return (x - mean) * torch.rsqrt(var + self.eps) * self.weight + self.bias


class ProjectionHead(nn.Module):
    """3-layer MLP, L2-normalised bottleneck, weight-normalised prototype layer (unit gain).

    With ``batchnorm`` the two hidden layers are batch-normalised, which keeps
    the per-image part of the bottleneck at unit scale from the first step.
    """

    def __init__(
        self, in_dim: int, num_prototypes: int, hidden_dim: int = 256, bottleneck_dim: int = 64, batchnorm: bool = False
    ):
        super().__init__()

        def norm():
            return BatchStatNorm(hidden_dim) if batchnorm else nn.Identity()

        self.mlp = nn.Sequential(
            nn.Linear(in_dim, hidden_dim),
            norm(),
            nn.GELU(),
            nn.Linear(hidden_dim, hidden_dim),
            norm(),
            nn.GELU(),
            nn.Linear(hidden_dim, bottleneck_dim),
        )
        self.apply(_init_linear)
        self.prototypes = nn.Parameter(torch.empty(num_prototypes, bottleneck_dim))
        nn.init.trunc_normal_(self.prototypes, std=0.02)

    def bottleneck(self, x: torch.Tensor) -> torch.Tensor:
        return F.normalize(self.mlp(x), dim=-1, eps=1e-12)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return F.linear(self.bottleneck(x), F.normalize(self.prototypes, dim=-1, eps=1e-12))


class PerANetwork(nn.Module):
    """Encoder + projector, and for the student also the pixel predictor."""

    def __init__(self, cfg: TrainConfig, with_predictor: bool = True):
        super().__init__()
        b = cfg.backbone
        self.backbone = VisionTransformer(b)
        self.projector = ProjectionHead(
            b.embed_dim, cfg.num_prototypes, cfg.head_hidden_dim, cfg.head_bottleneck_dim, cfg.head_batchnorm
        )
        self.predictor = nn.Linear(b.embed_dim, 3 * b.patch_size**2) if with_predictor else None
        if self.predictor is not None:
            _init_linear(self.predictor)


def project(cls: torch.Tensor, head: ProjectionHead) -> torch.Tensor:
    """cls features -> K prototype logits."""
    return head(cls)


def predict_pixels(mask_out: torch.Tensor, predictor: nn.Linear) -> torch.Tensor:
    """(B, |l|, D) -> (B, |l|, 3 * P * P) predicted raw pixel values."""
    return predictor(mask_out)


def attention_maps(images: torch.Tensor, backbone: VisionTransformer) -> torch.Tensor:
    """Last-layer cls-query attention over patches, shape (B, heads, grid, grid)."""
    with torch.no_grad():
        attn = backbone.last_attention(images)
    g = backbone.cfg.grid
    return attn[:, :, 0, 1:].reshape(attn.shape[0], attn.shape[1], g, g)


def encode_student(tokens: torch.Tensor, mask_tokens: torch.Tensor, backbone: VisionTransformer, inject_layer: int | None = None) -> EncoderOutput:
    return backbone.encode_student(tokens, mask_tokens, inject_layer)


def encode_teacher(tokens: torch.Tensor, backbone: VisionTransformer) -> EncoderOutput:
    """Teacher encoding: no gradient, and the teacher module is expected to stay in eval mode."""
    with torch.no_grad():
        return backbone.encode(tokens, role="teacher")
