"""Versioned model checkpoints.

A checkpoint is an npz archive holding every layer's arrays (posteriors,
priors, gating, biases) bit-exactly, the architecture metadata needed to
rebuild the model (layer sizes, expert count, k, mode), the run's config
echo, and the accuracy-matrix row recorded at save time.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .harness import Model, TrainConfig

FORMAT_VERSION = 1


class CheckpointError(ValueError):
    """Missing, corrupt, or version-incompatible checkpoint."""


def save_checkpoint(path, model: Model, config_echo: dict[str, str],
                    final_row: np.ndarray | None = None) -> None:
    payload: dict[str, np.ndarray] = {
        "format_version": np.array(FORMAT_VERSION, dtype=np.int64),
        "arch": np.array(json.dumps(model.arch_meta())),
        "config_echo": np.array(json.dumps(config_echo)),
        "final_row": (np.asarray(final_row, dtype=np.float64)
                      if final_row is not None else np.zeros(0)),
    }
    for key, arr in model.state_arrays().items():
        payload[f"state.{key}"] = arr
    with open(path, "wb") as f:
        np.savez(f, **payload)


def load_checkpoint(path) -> tuple[Model, dict[str, str], np.ndarray]:
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"checkpoint not found: {path}")
    try:
        archive = np.load(path, allow_pickle=False)
    except Exception as exc:
        raise CheckpointError(f"unreadable checkpoint {path}: {exc}") from None
    if "format_version" not in archive:
        raise CheckpointError(f"{path}: missing format version")
    version = int(archive["format_version"])
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: format version {version} unsupported "
                              f"(expected {FORMAT_VERSION})")

    arch = json.loads(str(archive["arch"]))
    echo = json.loads(str(archive["config_echo"]))
    final_row = archive["final_row"]

    cfg = TrainConfig(mode=arch["mode"])
    model = Model(arch["layer_sizes"], cfg, np.random.default_rng(0),
                  n_experts=arch["n_experts"], k=arch["k"])
    state = {key[len("state."):]: archive[key] for key in archive.files
             if key.startswith("state.")}
    model.load_state(state)
    return model, echo, final_row
