"""Acceptance criteria 1-10, each checked at its stated tolerance.

Every test records one ``PASS``/``FAIL`` line; the lines are printed as the
test runs (visible with ``-s``) and again in the terminal summary.  Criteria
5, 6 and 8 share one default-configuration pre-training run.
"""

from __future__ import annotations

import csv
import math
import time
from pathlib import Path

import numpy as np
import pytest
import torch

from pera.cli import PATCH_GRID, RATIO_GRID, main
from pera.config import BackboneConfig, Config, MaskRatios
from pera.data import generate_synthetic_dataset
from pera.evalkit import cost_account, extract_features, linear_probe, reconstruct
from pera.model import encode_student
from pera.objective import Temperatures, cls_loss, ema_update, mse_loss, softmax_H, update_center
from pera.trainer import forward_losses, init_state, prepare_inputs, pretrain, schedule_values, train_step
from pera.checkpoint import load_checkpoint, save_checkpoint
from pera.data import num_batches
from pera.views import BatchMasks, assemble_inputs, part_sizes, sample_trimask

from conftest import random_dataset, tiny_config
from oracles import (
    center_loop,
    central_differences,
    cls_loss_loop,
    ema_loop,
    joint_encoder,
    mse_loop,
    relative_error,
    softmax_loop,
)

RESULTS: dict[int, str] = {}


def record(criterion: int, passed: bool, detail: str) -> bool:
    line = f"criterion {criterion:2d}: {'PASS' if passed else 'FAIL'}  {detail}"
    RESULTS[criterion] = line
    print(line)
    return passed


# -- 1. mask partition -------------------------------------------------------


def test_criterion_01_masks_partition():
    start = time.perf_counter()
    failures = 0
    count = 0
    for n in (16, 64, 196, 1024):
        for s, l, t in RATIO_GRID:
            ratios = MaskRatios(s, l, t)
            sizes = part_sizes(n, ratios)
            rng = np.random.default_rng([n, int(100 * l)])
            for _ in range(10_000 // 16 + 1):
                m = sample_trimask(n, ratios, rng)
                hits = np.bincount(np.concatenate([m.s_idx, m.l_idx, m.t_idx]), minlength=n)
                failures += int(hits.shape[0] != n or not np.all(hits == 1))
                failures += int((len(m.s_idx), len(m.l_idx), len(m.t_idx)) != sizes)
                count += 1
    elapsed = time.perf_counter() - start
    ok = failures == 0 and count >= 10_000 and elapsed < 10.0
    assert record(1, ok, f"{count} masks, {failures} violations, {elapsed:.1f}s (< 10s)")


# -- 2. loop oracles ---------------------------------------------------------


def test_criterion_02_loop_oracles():
    K, B = 8, 4
    rng = np.random.default_rng(2)
    worst = {}
    for trial in range(5):
        s, t = (rng.normal(0, 2, (B, K)) for _ in range(2))
        c = rng.normal(0, 0.5, K)
        for tau in (0.04, 0.07, 0.1):
            got = softmax_H(torch.from_numpy(t), tau).numpy()
            ref = np.array([softmax_loop(list(row), tau) for row in t])
            worst["softmax_H"] = max(worst.get("softmax_H", 0), float(np.max(np.abs(got - ref) / np.abs(ref))))
        temps = Temperatures(tpt_s=0.1, tpt_t=0.07)
        got = cls_loss(*(torch.from_numpy(a) for a in (s, t, c)), temps).item()
        ref = cls_loss_loop(s, t, c, 0.1, 0.07)
        worst["cls_loss"] = max(worst.get("cls_loss", 0), abs(got - ref) / abs(ref))
        pred, target = rng.normal(size=(B, 3, 48)), rng.normal(size=(B, 3, 48))
        got = mse_loss(torch.from_numpy(pred), torch.from_numpy(target), 0.7).item()
        ref = mse_loop(pred, target, 0.7)
        worst["mse_loss"] = max(worst.get("mse_loss", 0), abs(got - ref) / abs(ref))
        got = update_center(torch.from_numpy(c), torch.from_numpy(t), 0.9).numpy()
        ref = np.array(center_loop(c, t, 0.9))
        worst["update_center"] = max(worst.get("update_center", 0), float(np.max(np.abs(got - ref) / np.abs(ref))))
        teacher, student = torch.nn.Linear(K, B).double(), torch.nn.Linear(K, B).double()
        before = [p.detach().numpy().copy() for p in teacher.parameters()]
        ema_update(teacher, student, 0.992)
        for p_t, p_s, p0 in zip(teacher.parameters(), student.parameters(), before):
            ref = ema_loop(p0, p_s.detach().numpy(), 0.992)
            err = float(np.max(np.abs(p_t.detach().numpy() - ref) / np.abs(ref)))
            worst["ema_update"] = max(worst.get("ema_update", 0), err)
    ok = all(v <= 1e-10 for v in worst.values())
    assert record(2, ok, "max rel err " + ", ".join(f"{k} {v:.1e}" for k, v in worst.items()) + " (<= 1e-10)")


# -- 3. gradient check -------------------------------------------------------


def test_criterion_03_gradient_check():
    start = time.perf_counter()
    cfg = tiny_config()
    assert (cfg.backbone.embed_dim, cfg.backbone.depth, cfg.backbone.num_patches, cfg.num_prototypes) == (8, 2, 16, 8)
    state = init_state(cfg, 4, dtype=torch.float64)
    g = torch.Generator().manual_seed(3)
    with torch.no_grad():
        for p in state.teacher.parameters():
            p.add_(0.05 * torch.randn(p.shape, generator=g, dtype=p.dtype))
    images = np.random.default_rng(3).random((4, 16, 16, 3)).astype(np.float32)
    inputs = prepare_inputs(images, cfg, step=0, dtype=torch.float64)
    center = torch.randn(cfg.num_prototypes, dtype=torch.float64, generator=g) * 0.1
    student = state.student.train()

    def loss():
        return forward_losses(student, state.teacher, center, inputs, cfg, tpt_t=0.07).losses.total

    student.zero_grad()
    loss().backward()
    names = [n for n, _ in student.named_parameters()]
    params = list(student.parameters())
    analytic = [p.grad.detach().clone() for p in params]
    numeric = central_differences(loss, params, step=1e-3)
    errors = {n: relative_error(a, b) for n, a, b in zip(names, analytic, numeric)}
    worst = max(errors, key=errors.get)
    elapsed = time.perf_counter() - start
    ok = errors[worst] <= 1e-3 and elapsed < 120
    assert record(3, ok, f"worst relative error {errors[worst]:.1e} ({worst}) over {len(names)} tensors, {elapsed:.0f}s")


# -- 4. injection at layer 0 -------------------------------------------------


def test_criterion_04_injection_at_zero_is_joint_encoder():
    from pera.model import VisionTransformer

    worst = 0.0
    for seed in range(20):
        torch.manual_seed(seed)
        bb = VisionTransformer(
            BackboneConfig(image_size=32, patch_size=8, depth=3, embed_dim=16, heads=2, drop_path_rate=0.0)
        ).eval()
        images = torch.rand(2, 3, 32, 32, generator=torch.Generator().manual_seed(seed))
        masks = BatchMasks.stack(
            [sample_trimask(16, MaskRatios(0.3, 0.2, 0.5), np.random.default_rng([seed, b])) for b in range(2)]
        )
        with torch.no_grad():
            patches = bb.patch_embed_images(images)
            asm = assemble_inputs(patches, patches, masks, bb.mask_token, bb.pos_embed, bb.cls_token)
            out = encode_student(asm.student_tokens, asm.mask_tokens, bb, inject_layer=0)
            ref_cls, ref_mask = joint_encoder(bb, asm.student_tokens, asm.mask_tokens)
        worst = max(worst, (out.cls - ref_cls).abs().max().item(), (out.mask_out - ref_mask).abs().max().item())
    assert record(4, worst <= 1e-5, f"max |diff| {worst:.1e} over 20 instances (<= 1e-5)")


# -- 5, 6, 8. default pre-training run ----------------------------------------


@pytest.fixture(scope="module")
def default_run(tmp_path_factory):
    cfg = Config()
    cfg.validate()
    torch.manual_seed(0)
    train = generate_synthetic_dataset(cfg.data.num_images, cfg.trainer.backbone.image_size, cfg.data.num_classes, cfg.data.seed)
    start = time.perf_counter()
    state, records = pretrain(cfg.trainer, train, out_dir=tmp_path_factory.mktemp("default"))
    elapsed = time.perf_counter() - start
    return cfg, state, records, elapsed


@pytest.mark.slow
def test_criterion_05_default_pretraining(default_run):
    cfg, _, records, elapsed = default_run
    K = cfg.trainer.num_prototypes
    floor = 0.5 * math.log(K)
    entropies = np.array([r["teacher_entropy"] for r in records])
    l_cls = np.array([r["l_cls"] for r in records])
    reduction = 1.0 - l_cls[-10:].mean() / l_cls[:10].mean()
    ok = len(records) == 1000 and entropies.min() >= floor and reduction >= 0.20 and elapsed < 600
    assert record(
        5,
        ok,
        f"{len(records)} steps in {elapsed:.0f}s (< 600s); min teacher entropy {entropies.min():.2f} "
        f"(>= {floor:.2f}); l_cls {l_cls[:10].mean():.3f} -> {l_cls[-10:].mean():.3f}, "
        f"reduction {100 * reduction:.1f}% (>= 20%)",
    )


@pytest.mark.slow
def test_criterion_06_probe_beats_random_init(default_run):
    cfg, state, _, _ = default_run
    probe = generate_synthetic_dataset(cfg.data.probe_images, cfg.trainer.backbone.image_size, cfg.data.num_classes, cfg.data.probe_seed)
    random_state = init_state(cfg.trainer, num_batches(cfg.data.num_images, cfg.trainer.batch_size))
    e = cfg.eval
    seeds = (0, 1, 2)

    def oa(st):
        feats = extract_features(st, probe)
        return float(np.median([linear_probe(feats, e.train_ratio, s, epochs=e.probe_epochs, lr=e.probe_lr, weight_decay=e.probe_weight_decay) for s in seeds]))

    trained, untrained = oa(state), oa(random_state)
    gap = trained - untrained
    assert record(6, gap >= 15.0, f"probe OA {trained:.1f}% vs random-init {untrained:.1f}%, gap {gap:.1f} points (>= 15)")


@pytest.mark.slow
def test_criterion_08_masked_reconstruction(default_run):
    cfg, state, _, _ = default_run
    held_out = generate_synthetic_dataset(64, cfg.trainer.backbone.image_size, cfg.data.num_classes, seed=8).images
    untrained = init_state(cfg.trainer, num_batches(cfg.data.num_images, cfg.trainer.batch_size))
    trained_mse = reconstruct(state, held_out, 0.7, seed=0).mse
    untrained_mse = reconstruct(untrained, held_out, 0.7, seed=0).mse
    ratio = trained_mse / untrained_mse
    assert record(8, ratio < 0.5, f"masked MSE at 70%: trained {trained_mse:.4f} vs untrained {untrained_mse:.4f}, ratio {ratio:.2f} (< 0.5)")


# derived checks computed on the same run (not numbered criteria)


def _value_stats_pair(default_run):
    from pera.evalkit import feature_stats

    cfg, state, _, _ = default_run
    probe = generate_synthetic_dataset(200, cfg.trainer.backbone.image_size, cfg.data.num_classes, cfg.data.probe_seed)
    untrained = init_state(cfg.trainer, num_batches(cfg.data.num_images, cfg.trainer.batch_size))
    e = cfg.eval
    return [feature_stats(s, probe, e.histogram_bins, e.diff_range, e.value_range) for s in (state, untrained)]


@pytest.mark.slow
def test_trained_feature_values_are_more_peaked(default_run):
    trained, untrained = _value_stats_pair(default_run)
    assert trained.value_max_bin_fraction > untrained.value_max_bin_fraction


@pytest.mark.slow
def test_trained_student_teacher_difference_is_smaller(default_run):
    import copy

    from pera.evalkit import feature_stats

    cfg, state, _, _ = default_run
    probe = generate_synthetic_dataset(200, cfg.trainer.backbone.image_size, cfg.data.num_classes, cfg.data.probe_seed)
    spe = num_batches(cfg.data.num_images, cfg.trainer.batch_size)
    # a fresh state's teacher is a copy of its student, so the random-init
    # reference pairs two independently initialised networks
    untrained = init_state(cfg.trainer, spe)
    other = copy.deepcopy(cfg.trainer)
    other.seed = cfg.trainer.seed + 1
    untrained.teacher = init_state(other, spe).teacher
    trained_diff = feature_stats(state, probe).mean_abs_diff
    untrained_diff = feature_stats(untrained, probe).mean_abs_diff
    assert trained_diff < untrained_diff


# -- 7. cost model -----------------------------------------------------------


def test_criterion_07_cost():
    desk = Config().trainer
    backbone = BackboneConfig(image_size=512, patch_size=16, depth=desk.backbone.depth, embed_dim=desk.backbone.embed_dim, heads=desk.backbone.heads)
    assert backbone.num_patches == 1024
    ratios = MaskRatios(0.3, 0.2, 0.5)
    cfg = Config().trainer
    cfg.backbone = backbone
    images = generate_synthetic_dataset(4, 512, 4, seed=7).images
    report = cost_account(backbone, ratios, mode="empirical", train_cfg=cfg, images=images, repeats=3)
    timing = report.step_time_ratio
    ok = abs(report.linear_ratio - 1.99) <= 0.01 and abs(report.attention_ratio - 3.99) <= 0.02 and timing >= 1.5
    assert record(
        7,
        ok,
        f"N=1024 linear ratio {report.linear_ratio:.4f} (1.99 +- 0.01), attention ratio {report.attention_ratio:.4f} "
        f"(3.99 +- 0.02), dense/sparse compute time {timing:.2f} (>= 1.5)",
    )


# -- 9. EMA drift and resume -------------------------------------------------


def test_criterion_09_ema_drift_and_resume(tmp_path):
    cfg = tiny_config()
    state = init_state(cfg, 4, dtype=torch.float64)
    rng = np.random.default_rng(9)
    from pera.data import ImageBatch

    def batch():
        return ImageBatch(rng.random((4, 16, 16, 3)).astype(np.float32), None, np.arange(4))

    for _ in range(3):
        train_step(state, batch())
    worst_excess = -np.inf
    for _ in range(5):
        before = {n: p.detach().clone() for n, p in state.teacher.named_parameters()}
        m = schedule_values(state.step, cfg, state.steps_per_epoch).ema_m
        train_step(state, batch())
        student = dict(state.student.named_parameters())
        for n, p in state.teacher.named_parameters():
            drift = (p.detach() - before[n]).abs().max().item()
            bound = (1 - m) * (student[n].detach() - before[n]).abs().max().item()
            worst_excess = max(worst_excess, drift - bound * (1 + 1e-12) - 1e-15)
    drift_ok = worst_excess <= 0

    cfg = tiny_config(epochs=28, warmup_epochs=2)
    cfg.backbone.drop_path_rate = 0.1
    ds = random_dataset(16, 16)
    _, full = pretrain(cfg, ds, stop_step=110)
    st, _ = pretrain(cfg, ds, stop_step=100)
    save_checkpoint(st, tmp_path / "ck")
    _, rest = pretrain(cfg, ds, state=load_checkpoint(tmp_path / "ck"), stop_step=110)
    diff = max(abs(a[k] - b[k]) for a, b in zip(rest, full[100:]) for k in a if k != "step")
    resume_ok = len(rest) == 10 and diff <= 1e-6
    assert record(9, drift_ok and resume_ok, f"EMA drift within bound: {drift_ok}; resume 100+10 vs 110 max metric diff {diff:.1e} (<= 1e-6)")


# -- 10. ablation grid -------------------------------------------------------

SHORT = [
    "trainer.epochs=2",
    "trainer.warmup_epochs=1",
    "trainer.tpt_t_warmup_epochs=1",
    "data.num_images=64",
    "data.probe_images=200",
    "eval.probe_epochs=20",
]


@pytest.mark.slow
def test_criterion_10_ablation_grid(tmp_path, capsys):
    args = ["ablate", "--grid", "all", "--out", str(tmp_path)]
    for kv in SHORT:
        args += ["--set", kv]
    code = main(args)
    out = capsys.readouterr().out
    run = Path(out.strip().splitlines()[-1])
    expected = {
        "toggles": (["method", "ibot", "sa", "dm", "pp", "oa_tr20"], 4),
        "patch": (["method", "arch", "patch_size", "oa_tr20"], len(PATCH_GRID)),
        "ratios": (["method", "s_ratio", "l_ratio", "t_ratio", "oa_tr20"], len(RATIO_GRID)),
    }
    found = {}
    for grid, (columns, n) in expected.items():
        path = run / f"ablation_{grid}.csv"
        rows = list(csv.reader(open(path))) if path.is_file() else []
        found[grid] = bool(rows) and rows[0] == columns and len(rows) - 1 == n and (run / f"ablation_{grid}.png").is_file()
    ok = code == 0 and all(found.values())
    assert record(10, ok, f"exit {code}; tables " + ", ".join(f"{g} {'ok' if v else 'bad'}" for g, v in found.items()) + " (4+3+4 rows)")
