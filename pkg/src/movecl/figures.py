"""Figure rendering for run directories.

Reads only the delimited outputs a run already wrote (train_log.csv,
accuracy_matrix.csv) and renders matplotlib figures next to them, so
plots never depend on in-memory training state and can be regenerated
from any archived run directory via the ``report`` CLI verb.
"""

from __future__ import annotations

import csv
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402


def read_delimited(path) -> list[dict[str, str]]:
    """Rows of a run CSV, skipping the commented config echo."""
    with open(path, newline="") as f:
        lines = [line for line in f if not line.startswith("#")]
    return list(csv.DictReader(lines))


def _floats(rows: list[dict[str, str]], key: str) -> list[float]:
    return [float(row[key]) for row in rows]


def plot_accuracy_matrix(csv_path, out_path) -> Path:
    rows = read_delimited(csv_path)
    n = len(rows)
    grid = [[row[f"task_{j}"] for j in range(n)] for row in rows]
    values = [[float(v) if v != "" else float("nan") for v in row] for row in grid]

    fig, ax = plt.subplots(figsize=(1.2 * n + 2, 1.2 * n + 1.5))
    im = ax.imshow(values, vmin=0.0, vmax=1.0, cmap="viridis")
    for t in range(n):
        for j in range(t + 1):
            ax.text(j, t, f"{values[t][j]:.2f}", ha="center", va="center",
                    color="white" if values[t][j] < 0.6 else "black", fontsize=9)
    ax.set_xlabel("evaluated task")
    ax.set_ylabel("after training stage")
    ax.set_xticks(range(n))
    ax.set_yticks(range(n))
    ax.set_title("held-out accuracy per task and stage")
    fig.colorbar(im, ax=ax, shrink=0.8)
    fig.tight_layout()
    fig.savefig(out_path, dpi=120)
    plt.close(fig)
    return Path(out_path)


def plot_training_curves(csv_path, out_path) -> Path:
    rows = read_delimited(csv_path)
    steps = list(range(len(rows)))
    tasks = _floats(rows, "task")

    fig, (ax1, ax2) = plt.subplots(2, 1, figsize=(8, 6), sharex=True)
    ax1.plot(steps, _floats(rows, "loss"), label="total loss")
    ax1.plot(steps, _floats(rows, "nll"), label="negative log-likelihood",
             linestyle="--")
    ax1.set_ylabel("loss")
    ax1.legend(fontsize=8)

    for key in ("gating_kl", "weight_kl", "entropy_cost", "dpp_diversity"):
        if key in rows[0]:
            ax2.plot(steps, _floats(rows, key), label=key)
    ax2.set_ylabel("regularizers")
    ax2.set_xlabel("epoch (all tasks, concatenated)")
    ax2.legend(fontsize=8)

    boundaries = [i for i in range(1, len(tasks)) if tasks[i] != tasks[i - 1]]
    for ax in (ax1, ax2):
        for b in boundaries:
            ax.axvline(b - 0.5, color="gray", linewidth=0.8, linestyle=":")
    fig.suptitle("training curves (dotted lines mark task boundaries)")
    fig.tight_layout()
    fig.savefig(out_path, dpi=120)
    plt.close(fig)
    return Path(out_path)


def plot_expert_load(csv_path, out_path) -> Path | None:
    rows = read_delimited(csv_path)
    load_keys = sorted(k for k in rows[0] if k.startswith("load_"))
    if not load_keys:
        return None
    steps = list(range(len(rows)))
    layers = sorted({key.split("_")[1] for key in load_keys})

    fig, axes = plt.subplots(len(layers), 1, figsize=(8, 2.2 * len(layers) + 1),
                             sharex=True, squeeze=False)
    for ax, layer in zip(axes[:, 0], layers):
        for key in (k for k in load_keys if k.split("_")[1] == layer):
            ax.plot(steps, _floats(rows, key), label=key.split("_")[-1])
        ax.set_ylabel(f"layer {layer[1:]} load")
        ax.set_ylim(-0.05, 1.05)
        ax.legend(fontsize=7, ncol=4)
    axes[-1, 0].set_xlabel("epoch (all tasks, concatenated)")
    fig.suptitle("fraction of inputs routed to each expert")
    fig.tight_layout()
    fig.savefig(out_path, dpi=120)
    plt.close(fig)
    return Path(out_path)


def render_run_dir(run_dir) -> list[Path]:
    """Render every figure the run directory's CSVs support."""
    run_dir = Path(run_dir)
    written: list[Path] = []
    matrix_csv = run_dir / "accuracy_matrix.csv"
    log_csv = run_dir / "train_log.csv"
    if matrix_csv.exists():
        written.append(plot_accuracy_matrix(matrix_csv,
                                            run_dir / "accuracy_matrix.png"))
    if log_csv.exists() and read_delimited(log_csv):
        written.append(plot_training_curves(log_csv,
                                            run_dir / "training_curves.png"))
        load_fig = plot_expert_load(log_csv, run_dir / "expert_load.png")
        if load_fig is not None:
            written.append(load_fig)
    return written
