"""Command-line entry point: ``pera <subcommand> [--config FILE] [--set key=value ...] [--out DIR]``.

Every command writes into its own timestamped run directory (under ``--out``,
else ``$PERA_OUTPUT_ROOT``, else ``./runs``) together with a snapshot of the
resolved configuration.  Expected failures end with a one-line diagnostic and
a nonzero exit code:

    0 success, 1 usage error, 2 configuration error, 3 runtime/numerical error, 4 I/O error
"""

from __future__ import annotations

import argparse
import copy
import csv
import datetime as _dt
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__
from .config import Config, MaskRatios, dump_config, iter_keys, load_config
from .errors import ConfigurationError, PeraError

OUTPUT_ROOT_ENV = "PERA_OUTPUT_ROOT"
EXIT_USAGE, EXIT_CONFIG, EXIT_RUNTIME, EXIT_IO = 1, 2, 3, 4

logger = logging.getLogger("pera")

# (SA, DM, PP) rows of the component ablation; the IBOT column is always off here
TOGGLE_GRID = ((True, False, False), (True, True, False), (False, True, True), (True, True, True))
PATCH_GRID = (16, 14, 8)
PATCH_GRID_IMAGE_SIZE = 112  # divisible by every patch size in the grid
RATIO_GRID = ((0.3, 0.2, 0.5), (0.2, 0.3, 0.5), (0.2, 0.2, 0.6), (0.3, 0.1, 0.6))


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    """argparse exits with status 2 on bad usage; this CLI reserves 2 for configuration errors."""

    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _config_keys_epilog() -> str:
    lines = ["configuration keys (override with --set key=value):"]
    for key, value in iter_keys(Config()):
        lines.append(f"  {key} = {value!r}")
    return "\n".join(lines)


# -- run directories -------------------------------------------------------


def make_run_dir(command: str, out: str | None) -> Path:
    root = Path(out or os.environ.get(OUTPUT_ROOT_ENV) or "runs")
    stamp = _dt.datetime.now().strftime("%Y%m%d-%H%M%S")
    run = root / f"{command}-{stamp}"
    k = 1
    while run.exists():
        k += 1
        run = root / f"{command}-{stamp}-{k}"
    run.mkdir(parents=True)
    return run


def _snapshot(cfg: Config, run: Path) -> None:
    (run / "config.yaml").write_text(dump_config(cfg), encoding="utf-8")


# -- datasets --------------------------------------------------------------


def pretrain_dataset(cfg: Config):
    from .data import generate_synthetic_dataset, load_image_folder, parse_manifest

    size = cfg.trainer.backbone.image_size
    if cfg.data.root:
        if not cfg.data.manifest:
            raise ConfigurationError("data.root is set but data.manifest is not")
        return load_image_folder(cfg.data.root, parse_manifest(cfg.data.manifest), image_size=size)
    return generate_synthetic_dataset(cfg.data.num_images, size, cfg.data.num_classes, cfg.data.seed)


def probe_dataset(cfg: Config, image_size: int | None = None):
    """Labelled evaluation set: the image folder when one is configured, else a fresh synthetic draw."""
    from .data import generate_synthetic_dataset

    size = image_size or cfg.trainer.backbone.image_size
    if cfg.data.root:
        ds = pretrain_dataset(cfg)
        if ds.labels is None:
            raise ConfigurationError("probing needs labels in the manifest")
        return ds
    return generate_synthetic_dataset(cfg.data.probe_images, size, cfg.data.num_classes, cfg.data.probe_seed)


# -- commands --------------------------------------------------------------


def cmd_synth_data(args, cfg: Config, run: Path) -> None:
    from PIL import Image

    from .data import generate_synthetic_dataset

    size = cfg.trainer.backbone.image_size
    ds = generate_synthetic_dataset(cfg.data.num_images, size, cfg.data.num_classes, cfg.data.seed)
    img_dir = run / "images"
    img_dir.mkdir()
    lines = ["# path\tlabel\tresolution"]
    for i, (image, label) in enumerate(zip(ds.images, ds.labels)):
        name = f"img_{i:05d}.png"
        Image.fromarray((np.clip(image, 0, 1) * 255 + 0.5).astype(np.uint8)).save(img_dir / name)
        lines.append(f"images/{name}\t{int(label)}\t")
    (run / "manifest.tsv").write_text("\n".join(lines) + "\n", encoding="utf-8")
    print(f"wrote {len(ds)} images and manifest.tsv")


def _probe_median(features, cfg: Config) -> tuple[float, list[float]]:
    from .evalkit import linear_probe

    e = cfg.eval
    scores = [
        linear_probe(features, e.train_ratio, s, epochs=e.probe_epochs, lr=e.probe_lr, weight_decay=e.probe_weight_decay)
        for s in e.probe_seeds
    ]
    return float(np.median(scores)), scores


def train_and_probe(cfg: Config, run: Path) -> dict:
    """Pre-train, save the checkpoint and curves, then probe the teacher's frozen features."""
    from .evalkit import extract_features
    from .plotting import plot_training_curves
    from .trainer import pretrain

    state, records = pretrain(cfg.trainer, pretrain_dataset(cfg), out_dir=run)
    plot_training_curves(records, run / "curves.png", log_k=float(np.log(cfg.trainer.num_prototypes)))
    oa, scores = _probe_median(extract_features(state, probe_dataset(cfg)), cfg)
    with open(run / "probe.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["probe_seed", "oa"])
        for s, v in zip(cfg.eval.probe_seeds, scores):
            w.writerow([s, f"{v:.4f}"])
        w.writerow(["median", f"{oa:.4f}"])
    return {
        "oa": oa,
        "final_l_cls": records[-1]["l_cls"] if records else float("nan"),
        "min_teacher_entropy": min((r["teacher_entropy"] for r in records), default=float("nan")),
    }


def cmd_pretrain(args, cfg: Config, run: Path) -> None:
    summary = train_and_probe(cfg, run)
    with open(run / "summary.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(list(summary))
        w.writerow([f"{v:.6g}" for v in summary.values()])
    print(f"probe OA (median over seeds) {summary['oa']:.2f}%")


def ablation_rows(grid: str, base: Config) -> list[tuple[dict, Config]]:
    """(table columns, config) per row of one ablation grid."""
    rows = []
    if grid == "toggles":
        for sa, dm, pp in TOGGLE_GRID:
            cfg = copy.deepcopy(base)
            cfg.trainer.toggles.sa, cfg.trainer.toggles.dm, cfg.trainer.toggles.pp = sa, dm, pp
            cols = {"method": "PerA", "ibot": "", "sa": _tick(sa), "dm": _tick(dm), "pp": _tick(pp)}
            rows.append((cols, cfg))
    elif grid == "patch":
        for p in PATCH_GRID:
            cfg = copy.deepcopy(base)
            cfg.trainer.backbone.image_size = PATCH_GRID_IMAGE_SIZE
            cfg.trainer.backbone.patch_size = p
            arch = f"ViT-d{cfg.trainer.backbone.embed_dim}L{cfg.trainer.backbone.depth}"
            rows.append(({"method": "PerA", "arch": arch, "patch_size": p}, cfg))
    elif grid == "ratios":
        for s, l, t in RATIO_GRID:
            cfg = copy.deepcopy(base)
            cfg.trainer.ratios = MaskRatios(s, l, t)
            rows.append(({"method": "PerA", "s_ratio": f"{s:.0%}", "l_ratio": f"{l:.0%}", "t_ratio": f"{t:.0%}"}, cfg))
    else:
        raise ConfigurationError(f"unknown ablation grid {grid!r}")
    for _, cfg in rows:
        cfg.validate()
    return rows


def _tick(flag: bool) -> str:
    return "x" if flag else ""


def _ablation_job(job: tuple[dict, Config, str]) -> dict:
    cols, cfg, run = job
    run_dir = Path(run)
    run_dir.mkdir(parents=True, exist_ok=True)
    _snapshot(cfg, run_dir)
    result = train_and_probe(cfg, run_dir)
    return {**cols, "oa_tr20": result["oa"]}


def cmd_ablate(args, cfg: Config, run: Path) -> None:
    from .plotting import plot_ablation

    grids = ("toggles", "patch", "ratios") if args.grid == "all" else (args.grid,)
    for grid in grids:
        rows = ablation_rows(grid, cfg)
        jobs = [(cols, row_cfg, str(run / grid / f"row{i}")) for i, (cols, row_cfg) in enumerate(rows)]
        if args.parallel > 1:
            with ProcessPoolExecutor(max_workers=args.parallel) as pool:
                results = list(pool.map(_ablation_job, jobs))
        else:
            results = [_ablation_job(job) for job in jobs]
        table = run / f"ablation_{grid}.csv"
        with open(table, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=list(results[0]))
            w.writeheader()
            for r in results:
                w.writerow({k: (f"{v:.2f}" if isinstance(v, float) else v) for k, v in r.items()})
        labels = [" ".join(f"{k}={v}" for k, v in r.items() if k not in ("method", "oa_tr20") and v != "") for r in results]
        plot_ablation(labels, [r["oa_tr20"] for r in results], run / f"ablation_{grid}.png", title=grid)
        print(f"{grid}: {len(results)} runs -> {table.name}")


def _load_state(args, cfg: Config):
    from .checkpoint import load_checkpoint
    from .trainer import init_state
    from .data import num_batches

    if args.checkpoint:
        return load_checkpoint(args.checkpoint)
    # random-init reference with the configured architecture
    return init_state(cfg.trainer, num_batches(cfg.data.num_images, cfg.trainer.batch_size))


def cmd_probe(args, cfg: Config, run: Path) -> None:
    from .evalkit import extract_features

    state = _load_state(args, cfg)
    feats = extract_features(state, probe_dataset(cfg, state.config.backbone.image_size), use_teacher=not args.student)
    oa, scores = _probe_median(feats, cfg)
    with open(run / "probe.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["checkpoint", "probe_seed", "oa"])
        label = args.checkpoint or "random-init"
        for s, v in zip(cfg.eval.probe_seeds, scores):
            w.writerow([label, s, f"{v:.4f}"])
        w.writerow([label, "median", f"{oa:.4f}"])
    print(f"probe OA (median over seeds) {oa:.2f}%")


def cmd_visualize(args, cfg: Config, run: Path) -> None:
    import torch

    from .evalkit import (
        embed_2d,
        extract_features,
        feature_stats,
        reconstruct,
        silhouette,
        write_embedding,
        write_feature_stats,
        write_feature_summary,
        write_features,
    )
    from .errors import CapabilityError
    from .model import attention_maps
    from .plotting import plot_attention_maps, plot_embedding, plot_feature_histograms, plot_reconstructions, save_triptych

    state = _load_state(args, cfg)
    size = state.config.backbone.image_size
    ds = probe_dataset(cfg, size)
    e = cfg.eval
    n_show = min(args.num_images, len(ds))
    images = ds.images[:n_show]

    x = torch.from_numpy(np.ascontiguousarray(images)).permute(0, 3, 1, 2).to(state.center.dtype)
    state.teacher.eval()
    maps = attention_maps(x, state.teacher.backbone).float().numpy()
    plot_attention_maps(images, maps, run / "attention.png")

    try:
        recon = reconstruct(state, images, e.reconstruct_ratio, seed=cfg.trainer.seed)
        plot_reconstructions(recon, run / "reconstructions.png")
        for i in range(n_show):
            save_triptych(recon, i, run / f"triptych_{i:02d}.png")
    except CapabilityError as exc:
        logger.warning("skipping reconstructions: %s", exc)

    runs = {"checkpoint": state}
    if args.checkpoint:
        from .trainer import init_state

        runs["random-init"] = init_state(state.config, state.steps_per_epoch)
    stats, coords, rows = {}, {}, []
    for name, st in runs.items():
        fs = feature_stats(st, ds, e.histogram_bins, e.diff_range, e.value_range)
        stats[name] = fs
        write_feature_stats(fs, run / f"feature_hist_{name}.csv")
        write_feature_summary(fs, run / f"feature_summary_{name}.csv", label=name)
        feats = extract_features(st, ds)
        coords[name] = embed_2d(feats)
        write_embedding(coords[name], ds.labels, run / f"embedding_{name}.csv")
        write_features(feats, run / f"features_{name}.csv")
        sil = silhouette(feats.rows, ds.labels) if ds.labels is not None and len(np.unique(ds.labels)) > 1 else float("nan")
        rows.append([name, f"{fs.mean_abs_diff:.6g}", f"{fs.value_max_bin_fraction:.6g}", f"{sil:.6g}"])
    plot_feature_histograms(stats, run / "feature_hist.png")
    plot_embedding(coords, ds.labels, run / "embedding.png")
    with open(run / "visual_summary.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["checkpoint", "mean_abs_diff", "value_max_bin_fraction", "silhouette"])
        w.writerows(rows)
    print(f"wrote figures for {n_show} images")


def cmd_bench(args, cfg: Config, run: Path) -> None:
    from .data import generate_synthetic_dataset
    from .evalkit import cost_account, write_cost_report

    t = cfg.trainer
    images = None
    if args.mode == "empirical":
        size = t.backbone.image_size
        images = generate_synthetic_dataset(t.batch_size, size, cfg.data.num_classes, cfg.data.seed).images
    report = cost_account(t.backbone, t.ratios, args.mode, t, images, repeats=args.repeats)
    write_cost_report(report, run / "cost.csv")
    print(f"linear ratio {report.linear_ratio:.3f}, attention ratio {report.attention_ratio:.3f}")
    if report.step_time_ratio is not None:
        print(f"dense/sparse compute-time ratio {report.step_time_ratio:.2f}")


COMMANDS = {
    "synth-data": (cmd_synth_data, "write the synthetic dataset as PNGs plus a manifest"),
    "pretrain": (cmd_pretrain, "pre-train a student/teacher pair and probe it"),
    "ablate": (cmd_ablate, "run the component, patch-size and mask-ratio grids"),
    "probe": (cmd_probe, "linear-probe frozen features of a checkpoint (or a random init)"),
    "visualize": (cmd_visualize, "attention maps, reconstructions, histograms, 2-D embeddings"),
    "bench": (cmd_bench, "token/FLOP accounting and step timing"),
}


def build_parser() -> argparse.ArgumentParser:
    epilog = _config_keys_epilog()
    fmt = argparse.RawDescriptionHelpFormatter
    parser = _Parser(prog="pera", description=__doc__.splitlines()[0], epilog=epilog, formatter_class=fmt)
    parser.add_argument("--version", action="version", version=f"pera {__version__}")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)
    for name, (_, help_text) in COMMANDS.items():
        p = sub.add_parser(name, help=help_text, description=help_text, epilog=epilog, formatter_class=fmt)
        p.add_argument("--config", help="YAML config file")
        p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE", help="override one config key")
        p.add_argument("--out", help=f"output root (default: ${OUTPUT_ROOT_ENV} or ./runs)")
        p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
        if name == "ablate":
            p.add_argument("--grid", choices=("toggles", "patch", "ratios", "all"), default="all")
            p.add_argument("--parallel", type=int, default=1, metavar="N", help="run N grid rows concurrently")
        if name in ("probe", "visualize"):
            p.add_argument("--checkpoint", help="checkpoint directory (omit for a random-init network)")
            p.add_argument("--student", action="store_true", help="use the student encoder instead of the teacher")
        if name == "visualize":
            p.add_argument("--num-images", type=int, default=4)
        if name == "bench":
            p.add_argument("--mode", choices=("analytic", "empirical"), default="empirical")
            p.add_argument("--repeats", type=int, default=5)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError("pera: a subcommand is required (see pera --help)")
        if getattr(args, "parallel", 1) < 1:
            raise UsageError("pera ablate: --parallel must be >= 1")
    except UsageError as exc:
        print(parser.format_usage().rstrip(), file=sys.stderr)
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    func = COMMANDS[args.command][0]
    try:
        cfg = load_config(args.config, args.overrides)
        run = make_run_dir(args.command, args.out)
        _snapshot(cfg, run)
        func(args, cfg, run)
    except PeraError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except Exception as exc:  # unexpected: still one line, runtime class
        print(f"error: unexpected {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    print(run)
    return 0


if __name__ == "__main__":
    sys.exit(main())
