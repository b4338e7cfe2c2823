"""Checkpoint directory format.

A checkpoint is a directory holding

* ``index.json``   array name, shape, dtype, byte offset and length, in blob order
* ``arrays.bin``   every array as little-endian float32, row-major, concatenated
* ``meta.json``    format version, step, steps per epoch, config and its hash

Random state is not stored: every random draw is derived from
``(seed, step, sample)``, so the step counter is the whole RNG state.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np
import torch

from .config import TrainConfig, config_hash, from_dict, to_dict
from .errors import CheckpointError, PeraError
from .trainer import ModelState, init_state

FORMAT_VERSION = 1
_OPT_KEYS = ("step", "exp_avg", "exp_avg_sq")


def _named_arrays(state: ModelState) -> list[tuple[str, torch.Tensor]]:
    arrays = [(f"student/{n}", p) for n, p in state.student.named_parameters()]
    arrays += [(f"teacher/{n}", p) for n, p in state.teacher.named_parameters()]
    arrays.append(("center", state.center))
    for name, p in state.student.named_parameters():
        slot = state.optimizer.state.get(p)
        if slot:
            for key in _OPT_KEYS:
                arrays.append((f"optim/{name}/{key}", slot[key]))
    return arrays


def _dump(obj, path: Path) -> None:
    path.write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n", encoding="utf-8")


def save_checkpoint(state: ModelState, path: str | Path) -> Path:
    path = Path(path)
    try:
        path.mkdir(parents=True, exist_ok=True)
        entries, offset = [], 0
        with open(path / "arrays.bin", "wb") as blob:
            for name, tensor in _named_arrays(state):
                # asarray keeps 0-d arrays 0-d (ascontiguousarray would promote them to 1-d)
                data = np.asarray(tensor.detach().cpu().numpy(), dtype="<f4", order="C")
                raw = data.tobytes(order="C")
                blob.write(raw)
                entries.append(
                    {"name": name, "shape": list(data.shape), "dtype": "float32", "offset": offset, "nbytes": len(raw)}
                )
                offset += len(raw)
        _dump({"format_version": FORMAT_VERSION, "arrays": entries}, path / "index.json")
        cfg = to_dict(state.config)
        _dump(
            {
                "format_version": FORMAT_VERSION,
                "step": state.step,
                "steps_per_epoch": state.steps_per_epoch,
                "config": cfg,
                "config_hash": config_hash(state.config),
            },
            path / "meta.json",
        )
    except OSError as exc:
        raise CheckpointError(f"cannot write checkpoint {path}: {exc}") from exc
    return path


def _load_json(path: Path) -> dict:
    try:
        return json.loads(path.read_text(encoding="utf-8"))
    except (OSError, ValueError) as exc:
        raise CheckpointError(f"cannot read {path}: {exc}") from exc


def load_checkpoint(path: str | Path) -> ModelState:
    path = Path(path)
    meta = _load_json(path / "meta.json")
    index = _load_json(path / "index.json")
    for doc in (meta, index):
        if doc.get("format_version") != FORMAT_VERSION:
            raise CheckpointError(f"{path}: unsupported format version {doc.get('format_version')!r}")
    try:
        cfg = from_dict(TrainConfig, meta["config"])
    except (KeyError, PeraError) as exc:
        raise CheckpointError(f"{path}: bad config in metadata ({exc})") from exc
    if config_hash(cfg) != meta.get("config_hash"):
        raise CheckpointError(f"{path}: config hash mismatch")
    try:
        blob = (path / "arrays.bin").read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read {path / 'arrays.bin'}: {exc}") from exc
    entries = index.get("arrays", [])
    expected = sum(e["nbytes"] for e in entries)
    if len(blob) != expected:
        raise CheckpointError(f"{path}: blob has {len(blob)} bytes, index expects {expected} (truncated or corrupt)")

    try:
        state = init_state(cfg, int(meta["steps_per_epoch"]))
    except PeraError as exc:
        raise CheckpointError(f"{path}: cannot rebuild model ({exc})") from exc
    state.step = int(meta["step"])
    arrays = {}
    for e in entries:
        if e.get("dtype") != "float32":
            raise CheckpointError(f"{path}: array {e['name']} has unsupported dtype {e.get('dtype')}")
        arr = np.frombuffer(blob, dtype="<f4", count=e["nbytes"] // 4, offset=e["offset"])
        arrays[e["name"]] = torch.from_numpy(arr.reshape(e["shape"]).astype(np.float32))

    def take(name: str, like: torch.Tensor) -> torch.Tensor:
        if name not in arrays:
            raise CheckpointError(f"{path}: missing array {name}")
        value = arrays.pop(name)
        if tuple(value.shape) != tuple(like.shape):
            raise CheckpointError(f"{path}: array {name} has shape {tuple(value.shape)}, expected {tuple(like.shape)}")
        return value

    with torch.no_grad():
        for prefix, net in (("student", state.student), ("teacher", state.teacher)):
            for n, p in net.named_parameters():
                p.copy_(take(f"{prefix}/{n}", p))
        state.center = take("center", state.center).clone()
        for n, p in state.student.named_parameters():
            if f"optim/{n}/exp_avg" in arrays:
                state.optimizer.state[p] = {
                    "step": take(f"optim/{n}/step", torch.zeros(())),
                    "exp_avg": take(f"optim/{n}/exp_avg", p).clone(),
                    "exp_avg_sq": take(f"optim/{n}/exp_avg_sq", p).clone(),
                }
    if arrays:
        raise CheckpointError(f"{path}: unexpected arrays {sorted(arrays)[:3]}")
    return state
