"""Evaluation at desk scale: probing, reconstruction, feature statistics, 2-D embeddings and cost accounting."""

from __future__ import annotations

import csv
import math
import time
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn

from .config import BackboneConfig, MaskRatios, TrainConfig
from .data import Dataset
from .errors import CapabilityError, ConfigurationError, ContractError
from .model import patchify, unpatchify
from .trainer import ModelState, forward_losses, init_state, prepare_inputs, schedule_values
from .objective import ema_update, update_center
from .views import round_half_up, gather_tokens, part_sizes


@dataclass
class FeatureMatrix:
    rows: np.ndarray  # (n, D)
    labels: np.ndarray | None
    source: str


def _resolve(checkpoint) -> ModelState:
    if isinstance(checkpoint, ModelState):
        return checkpoint
    from .checkpoint import load_checkpoint

    return load_checkpoint(checkpoint)


def _images_tensor(images: np.ndarray, dtype=torch.float32) -> torch.Tensor:
    return torch.from_numpy(np.ascontiguousarray(images)).permute(0, 3, 1, 2).to(dtype)


def extract_features(checkpoint, dataset: Dataset, use_teacher: bool = True, batch_size: int = 128) -> FeatureMatrix:
    """Dense (unmasked) cls features of every image."""
    state = _resolve(checkpoint)
    size = state.config.backbone.image_size
    if dataset.image_size != size:
        raise ContractError(f"dataset images are {dataset.image_size}px, backbone expects {size}px")
    net = state.teacher if use_teacher else state.student
    was_training = net.training
    net.eval()
    rows = []
    with torch.no_grad():
        for start in range(0, len(dataset), batch_size):
            x = _images_tensor(dataset.images[start : start + batch_size], state.center.dtype)
            rows.append(net.backbone.forward_features(x).double().numpy())
    net.train(was_training)
    role = "teacher" if use_teacher else "student"
    return FeatureMatrix(np.concatenate(rows), dataset.labels, f"{role}@step{state.step}")


def stratified_split(labels: np.ndarray, train_ratio: float, seed: int) -> tuple[np.ndarray, np.ndarray]:
    rng = np.random.default_rng(seed)
    train, test = [], []
    for c in np.unique(labels):
        idx = rng.permutation(np.flatnonzero(labels == c))
        k = min(max(1, int(round(train_ratio * len(idx)))), len(idx) - 1)
        train.append(idx[:k])
        test.append(idx[k:])
    return np.sort(np.concatenate(train)), np.sort(np.concatenate(test))


def linear_probe(
    features: FeatureMatrix,
    train_ratio: float = 0.2,
    seed: int = 0,
    epochs: int = 100,
    lr: float = 1e-2,
    weight_decay: float = 1e-4,
    batch_size: int = 64,
) -> float:
    """Overall test accuracy (percent) of one linear layer trained with AdamW on frozen features.

    Features are standardised with training-split statistics; the learning rate
    follows a cosine over ``epochs`` passes.
    """
    if features.labels is None:
        raise ContractError("linear probe needs labels")
    labels = np.asarray(features.labels)
    classes = np.unique(labels)
    if len(classes) < 2:
        raise ContractError("linear probe needs at least two classes")
    train, test = stratified_split(labels, train_ratio, seed)
    x = features.rows.astype(np.float32)
    mu, sd = x[train].mean(0), x[train].std(0) + 1e-6
    x = (x - mu) / sd
    xt, yt = torch.from_numpy(x[train]), torch.from_numpy(labels[train]).long()
    xe, ye = torch.from_numpy(x[test]), torch.from_numpy(labels[test]).long()

    gen = torch.Generator().manual_seed(seed)
    clf = nn.Linear(x.shape[1], int(labels.max()) + 1)
    with torch.no_grad():
        clf.weight.normal_(0.0, 0.01, generator=gen)
        clf.bias.zero_()
    opt = torch.optim.AdamW(clf.parameters(), lr=lr, weight_decay=weight_decay)
    steps_per_epoch = math.ceil(len(train) / batch_size)
    total = epochs * steps_per_epoch
    loss_fn = nn.CrossEntropyLoss()
    step = 0
    for _ in range(epochs):
        order = torch.randperm(len(train), generator=gen)
        for start in range(0, len(train), batch_size):
            idx = order[start : start + batch_size]
            for g in opt.param_groups:
                g["lr"] = 0.5 * lr * (1 + math.cos(math.pi * step / total))
            opt.zero_grad()
            loss_fn(clf(xt[idx]), yt[idx]).backward()
            opt.step()
            step += 1
    with torch.no_grad():
        pred = clf(xe).argmax(1)
    return float((pred == ye).float().mean() * 100.0)


# -- reconstruction ----------------------------------------------------------


@dataclass
class Reconstruction:
    masked: np.ndarray  # (n, H, W, 3), masked patches shown as mid-grey
    composite: np.ndarray  # visible pixels kept, masked patches predicted (clipped to [0, 1])
    target: np.ndarray
    error: np.ndarray  # per-pixel squared error, zero outside the masked region
    mse: float  # mean squared error over masked pixels (unclipped predictions)


def reconstruct(checkpoint, images: np.ndarray, mask_ratio: float, seed: int = 0) -> Reconstruction:
    """Mask ``mask_ratio`` of the patches as the learnable part and fill them with the student's predictions."""
    state = _resolve(checkpoint)
    cfg = state.config
    if not cfg.toggles.pp:
        raise CapabilityError("checkpoint was trained without pixel prediction; it cannot reconstruct")
    if images.ndim == 3:
        images = images[None]
    b = cfg.backbone
    N, P = b.num_patches, b.patch_size
    n_l = round_half_up(mask_ratio * N)
    if not 0.0 <= mask_ratio < 1.0 or N - n_l < 1:
        raise ConfigurationError(f"mask ratio {mask_ratio} leaves no visible patch")
    target = images.astype(np.float32)
    if n_l == 0:
        return Reconstruction(target.copy(), target.copy(), target.copy(), np.zeros_like(target), 0.0)

    rng = np.random.default_rng(seed)
    perms = [rng.permutation(N) for _ in range(len(images))]
    l_idx = torch.from_numpy(np.stack([np.sort(p[:n_l]) for p in perms]))
    s_idx = torch.from_numpy(np.stack([np.sort(p[n_l:]) for p in perms]))
    net = state.student
    was_training = net.training
    net.eval()
    with torch.no_grad():
        x = _images_tensor(target, state.center.dtype)
        pixels = patchify(x, P)
        bb = net.backbone
        patches = bb.patch_embed_images(x)
        B = len(images)
        pos = bb.pos_embed[:, 1:].expand(B, -1, -1)
        tokens = torch.cat(
            [(bb.cls_token + bb.pos_embed[:, :1]).expand(B, -1, -1), gather_tokens(patches, s_idx) + gather_tokens(pos, s_idx)],
            dim=1,
        )
        mask_tokens = bb.mask_token.view(1, 1, -1) + gather_tokens(pos, l_idx)
        out = bb.encode_student(tokens, mask_tokens)
        pred = net.predictor(out.mask_out)
        truth = gather_tokens(pixels, l_idx)
        mse = float(((pred - truth) ** 2).mean())
        idx = l_idx.unsqueeze(-1).expand(-1, -1, pixels.shape[-1])
        filled = pixels.scatter(1, idx, pred.clamp(0, 1))
        greyed = pixels.scatter(1, idx, torch.full_like(pred, 0.5))
        err = torch.zeros_like(pixels).scatter(1, idx, (pred - truth) ** 2)
    net.train(was_training)

    def img(p):
        return unpatchify(p, P).permute(0, 2, 3, 1).float().numpy()

    return Reconstruction(img(greyed), img(filled), target, img(err), mse)


# -- feature statistics ------------------------------------------------------


@dataclass
class FeatureStats:
    diff_edges: np.ndarray
    diff_counts: np.ndarray
    value_edges: np.ndarray
    value_counts: np.ndarray
    mean_abs_diff: float
    diff_std: float
    value_std: float
    diff_max_bin_fraction: float
    value_max_bin_fraction: float


def _histogram(values: np.ndarray, bins: int, lo: float, hi: float) -> tuple[np.ndarray, np.ndarray]:
    edges = np.linspace(lo, hi, bins + 1)
    # out-of-range values land in the end bins so counts always sum to len(values)
    counts, _ = np.histogram(np.clip(values, lo, hi), bins=edges)
    return edges, counts


def feature_stats(
    checkpoint,
    dataset: Dataset,
    bins: int = 40,
    diff_range: tuple[float, float] = (0.0, 2.0),
    value_range: tuple[float, float] = (-4.0, 4.0),
) -> FeatureStats:
    """Histograms of per-image mean |student - teacher| cls difference and of pooled teacher feature values."""
    state = _resolve(checkpoint)
    fs = extract_features(state, dataset, use_teacher=False).rows
    ft = extract_features(state, dataset, use_teacher=True).rows
    diffs = np.abs(fs - ft).mean(axis=1)
    values = ft.ravel()
    d_edges, d_counts = _histogram(diffs, bins, *diff_range)
    v_edges, v_counts = _histogram(values, bins, *value_range)
    return FeatureStats(
        d_edges,
        d_counts,
        v_edges,
        v_counts,
        mean_abs_diff=float(diffs.mean()),
        diff_std=float(diffs.std()),
        value_std=float(values.std()),
        diff_max_bin_fraction=float(d_counts.max() / d_counts.sum()),
        value_max_bin_fraction=float(v_counts.max() / v_counts.sum()),
    )


def write_feature_stats(stats: FeatureStats, path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["histogram", "bin_lo", "bin_hi", "count"])
        for name, edges, counts in (("diff", stats.diff_edges, stats.diff_counts), ("value", stats.value_edges, stats.value_counts)):
            for lo, hi, c in zip(edges[:-1], edges[1:], counts):
                w.writerow([name, f"{lo:.6g}", f"{hi:.6g}", int(c)])


def write_feature_summary(stats: FeatureStats, path: str | Path, label: str = "") -> None:
    keys = ("mean_abs_diff", "diff_std", "value_std", "diff_max_bin_fraction", "value_max_bin_fraction")
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["checkpoint", *keys])
        w.writerow([label, *(f"{getattr(stats, k):.6g}" for k in keys)])


# -- 2-D embedding ---------------------------------------------------------


def embed_2d(features: FeatureMatrix, method: str = "pca") -> np.ndarray:
    """PCA projection to two coordinates per row (signs fixed so each axis' largest loading is positive)."""
    if method != "pca":
        raise ConfigurationError(f"unknown embedding method {method!r} (only 'pca' is built in)")
    x = np.asarray(features.rows, dtype=np.float64)
    if x.shape[0] < 2:
        raise ContractError("need at least two rows to embed")
    x = x - x.mean(axis=0)
    if not np.any(np.abs(x) > 1e-12):
        warnings.warn("constant features: 2-D embedding is all zeros", RuntimeWarning)
        return np.zeros((x.shape[0], 2))
    u, s, vt = np.linalg.svd(x, full_matrices=False)
    coords = np.zeros((x.shape[0], 2))
    k = min(2, len(s))
    for j in range(k):
        sign = np.sign(vt[j][np.argmax(np.abs(vt[j]))]) or 1.0
        coords[:, j] = u[:, j] * s[j] * sign
    return coords


def silhouette(coords_or_features: np.ndarray, labels: np.ndarray) -> float:
    from sklearn.metrics import silhouette_score

    return float(silhouette_score(coords_or_features, labels))


def write_embedding(coords: np.ndarray, labels: np.ndarray | None, path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["index", "x", "y", "label"])
        for i, (a, b) in enumerate(coords):
            w.writerow([i, f"{a:.8g}", f"{b:.8g}", "" if labels is None else int(labels[i])])


def write_features(features: FeatureMatrix, path: str | Path) -> None:
    """Raw feature export (for external embedding tools such as t-SNE)."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["index", "label", *(f"f{j}" for j in range(features.rows.shape[1]))])
        for i, row in enumerate(features.rows):
            label = "" if features.labels is None else int(features.labels[i])
            w.writerow([i, label, *(f"{v:.8g}" for v in row)])


# -- cost accounting ---------------------------------------------------------


@dataclass
class RoleCost:
    role: str
    tokens: int
    attention_flops: float
    linear_flops: float
    activation_elements: float


@dataclass
class CostReport:
    backbone: BackboneConfig
    ratios: MaskRatios
    roles: list[RoleCost]
    linear_ratio: float
    attention_ratio: float
    head_flops: dict[str, float] = field(default_factory=dict)
    timings: dict[str, float] = field(default_factory=dict)

    @property
    def step_time_ratio(self) -> float | None:
        if "dense_compute_s" in self.timings and "sparse_compute_s" in self.timings:
            return self.timings["dense_compute_s"] / self.timings["sparse_compute_s"]
        return None


def _encoder_cost(role: str, tokens: int, b: BackboneConfig, backprop: bool) -> RoleCost:
    D, L, r = b.embed_dim, b.depth, b.mlp_ratio
    # 2 FLOPs per multiply-accumulate
    linear = 2.0 * L * tokens * (4 + 2 * r) * D * D  # qkv, output proj, two MLP layers
    attention = 2.0 * L * 2 * tokens * tokens * D  # scores and attention-value product
    per_layer = tokens * D * (6 + 2 * r) + b.heads * tokens * tokens
    return RoleCost(role, tokens, attention, linear, per_layer * (L if backprop else 1))


def cost_account(
    backbone: BackboneConfig,
    ratios: MaskRatios,
    mode: str = "analytic",
    train_cfg: TrainConfig | None = None,
    images: np.ndarray | None = None,
    repeats: int = 5,
) -> CostReport:
    """Token and FLOP counts of the sparse pair against the dense two-view baseline.

    The analytic count charges every student token for the full depth, so
    mid-network injection of the mask tokens makes it an upper bound for the
    student.  ``mode="empirical"`` additionally times real training steps.
    """
    if mode not in ("analytic", "empirical"):
        raise ConfigurationError(f"unknown cost mode {mode!r}")
    backbone.validate()
    ratios.validate()
    N = backbone.num_patches
    n_s, n_l, n_t = part_sizes(N, ratios)
    roles = [
        _encoder_cost("student", n_s + n_l + 1, backbone, backprop=True),
        _encoder_cost("teacher", n_t + 1, backbone, backprop=False),
        _encoder_cost("dense_student", N + 1, backbone, backprop=True),
        _encoder_cost("dense_teacher", N + 1, backbone, backprop=False),
    ]
    sparse = roles[:2]
    dense = roles[2:]
    linear_ratio = sum(r.linear_flops for r in dense) / sum(r.linear_flops for r in sparse)
    attention_ratio = sum(r.attention_flops for r in dense) / sum(r.attention_flops for r in sparse)
    cfg = train_cfg or TrainConfig(backbone=backbone, ratios=ratios)
    D, K, h, bn = backbone.embed_dim, cfg.num_prototypes, cfg.head_hidden_dim, cfg.head_bottleneck_dim
    projector = 2.0 * (D * h + h * h + h * bn + bn * K)
    head_flops = {
        "projector_per_view": projector,
        "predictor_per_image": 2.0 * n_l * D * 3 * backbone.patch_size**2,
    }
    report = CostReport(backbone, ratios, roles, linear_ratio, attention_ratio, head_flops)
    if mode == "empirical":
        if images is None:
            raise ContractError("empirical cost accounting needs a batch of images")
        report.timings = time_steps(cfg, images, repeats)
    return report


def _dense_variant(cfg: TrainConfig) -> TrainConfig:
    import copy

    dense = copy.deepcopy(cfg)
    dense.toggles.dm = False
    dense.toggles.pp = False
    return dense


def time_steps(cfg: TrainConfig, images: np.ndarray, repeats: int = 5) -> dict[str, float]:
    """Median wall-clock seconds per training step, sparse PerA path vs dense two-view baseline.

    ``*_compute_s`` covers forward, backward, optimiser, EMA and center updates
    on pre-built views; ``*_step_s`` also includes building the views.
    """
    import copy

    sparse = copy.deepcopy(cfg)
    sparse.toggles.dm = True
    out = {}
    for name, variant in (("sparse", sparse), ("dense", _dense_variant(cfg))):
        state = init_state(variant, steps_per_epoch=max(repeats + 2, 2))
        compute, full = [], []
        for k in range(repeats + 1):
            t0 = time.perf_counter()
            inputs = prepare_inputs(images, variant, k)
            t1 = time.perf_counter()
            sched = schedule_values(k, variant, state.steps_per_epoch)
            state.student.train()
            res = forward_losses(state.student, state.teacher, state.center, inputs, variant, sched.tpt_t)
            state.optimizer.zero_grad(set_to_none=True)
            res.losses.total.backward()
            state.optimizer.step()
            ema_update(state.teacher, state.student, sched.ema_m)
            state.center = update_center(state.center, res.teacher_logits, variant.center_momentum)
            t2 = time.perf_counter()
            if k > 0:  # first step warms allocator caches
                compute.append(t2 - t1)
                full.append(t2 - t0)
        out[f"{name}_compute_s"] = float(np.median(compute))
        out[f"{name}_step_s"] = float(np.median(full))
    return out


def write_cost_report(report: CostReport, path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["role", "tokens", "attention_gflops", "linear_gflops", "activation_elements"])
        for r in report.roles:
            w.writerow([r.role, r.tokens, f"{r.attention_flops / 1e9:.6g}", f"{r.linear_flops / 1e9:.6g}", f"{r.activation_elements:.6g}"])
        w.writerow([])
        w.writerow(["quantity", "value"])
        w.writerow(["linear_ratio_dense_over_sparse", f"{report.linear_ratio:.6g}"])
        w.writerow(["attention_ratio_dense_over_sparse", f"{report.attention_ratio:.6g}"])
        for k, v in report.head_flops.items():
            w.writerow([f"{k}_gflops", f"{v / 1e9:.6g}"])
        for k, v in report.timings.items():
            w.writerow([k, f"{v:.6g}"])
        if report.step_time_ratio is not None:
            w.writerow(["step_time_ratio_dense_over_sparse", f"{report.step_time_ratio:.6g}"])
