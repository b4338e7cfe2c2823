"""Shared tiny configurations for fast tests."""

from __future__ import annotations

import numpy as np
import pytest

from pera.config import BackboneConfig, MaskRatios, TrainConfig
from pera.data import Dataset


def tiny_config(**overrides) -> TrainConfig:
    """A 16x16-pixel, 16-patch, 2-layer network with 8 prototypes."""
    backbone = BackboneConfig(image_size=16, patch_size=4, depth=2, embed_dim=8, heads=2, mlp_ratio=2.0, drop_path_rate=0.0)
    cfg = TrainConfig(
        epochs=4,
        batch_size=4,
        warmup_epochs=1,
        tpt_t_warmup_epochs=2,
        num_prototypes=8,
        head_hidden_dim=16,
        head_bottleneck_dim=8,
        backbone=backbone,
        ratios=MaskRatios(0.3, 0.2, 0.5),
    )
    for key, value in overrides.items():
        setattr(cfg, key, value)
    cfg.validate()
    return cfg


def random_dataset(n: int, size: int, seed: int = 0, num_classes: int = 2) -> Dataset:
    rng = np.random.default_rng(seed)
    images = rng.random((n, size, size, 3)).astype(np.float32)
    labels = np.arange(n) % num_classes
    return Dataset(images, labels, [f"random:{i}" for i in range(n)], num_classes)


@pytest.fixture
def tiny_cfg() -> TrainConfig:
    return tiny_config()


def pytest_terminal_summary(terminalreporter):
    try:
        from test_acceptance import RESULTS
    except ImportError:
        return
    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for key in sorted(RESULTS):
            terminalreporter.write_line(RESULTS[key])
