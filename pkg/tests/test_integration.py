"""End-to-end runs on surrogate image data shaped like the real corpus.

Ten template classes of 28x28 noisy patterns stand in for handwritten
digits, written as proper IDX files, so the full ingestion -> stream ->
training -> evaluation pipeline is exercised at the real input width
even on machines without the dataset.
"""

import numpy as np
import pytest

from movecl.cli import main
from movecl.data import (
    LabeledDataset,
    load_mnist,
    make_permuted_tasks,
    make_split_tasks,
    write_idx,
)
from movecl.harness import TrainConfig, run_continual


def template_images(rng, templates, n_per_class):
    """Samples around fixed class templates, quantized to valid pixel bytes."""
    n_classes, dim = templates.shape
    inputs, labels = [], []
    for c in range(n_classes):
        noise = rng.normal(0.0, 0.15, size=(n_per_class, dim))
        imgs = np.clip(templates[c] * 0.8 + noise, 0.0, 1.0)
        inputs.append(np.rint(imgs * 255.0) / 255.0)
        labels.append(np.full(n_per_class, c, dtype=np.int64))
    order = rng.permutation(n_classes * n_per_class)
    return LabeledDataset(np.concatenate(inputs)[order],
                          np.concatenate(labels)[order],
                          tuple(range(n_classes)))


def surrogate_pair(seed=0, n_train=60, n_test=20):
    rng = np.random.default_rng(seed)
    templates = (rng.uniform(0.0, 1.0, size=(10, 784)) > 0.65).astype(np.float64)
    return (template_images(rng, templates, n_train),
            template_images(rng, templates, n_test))


@pytest.fixture(scope="module")
def surrogate_dir(tmp_path_factory):
    root = tmp_path_factory.mktemp("surrogate")
    train, test = surrogate_pair()
    write_idx(train, root / "train-images-idx3-ubyte",
              root / "train-labels-idx1-ubyte")
    write_idx(test, root / "t10k-images-idx3-ubyte",
              root / "t10k-labels-idx1-ubyte")
    return root


def test_split_pipeline_learns_templates(surrogate_dir):
    """Dense baseline nails every template task through the real ingest path."""
    train, test = load_mnist(surrogate_dir)
    stream = make_split_tasks(train, test)
    cfg = TrainConfig(mode="naive_dense", epochs=10, batch_size=64, seed=0)
    result = run_continual(stream, [784, 32, 32, 2], cfg)
    assert result.matrix.is_complete()
    diagonal = np.diag(result.matrix.grid)
    assert np.all(diagonal >= 0.9), diagonal


def test_split_mixture_learns_latest_task(surrogate_dir):
    """The mixture path trains end to end at full input width.

    Only the most recent task is asserted: with so few samples per task
    the first-task KL against the N(0, 1) prior dominates early stages.
    """
    train, test = load_mnist(surrogate_dir)
    stream = make_split_tasks(train, test)
    cfg = TrainConfig(epochs=15, batch_size=64, seed=0)
    result = run_continual(stream, [784, 32, 32, 2], cfg, n_experts=2)
    assert result.matrix.is_complete()
    assert result.matrix.grid[4, 4] >= 0.9


def test_permuted_pipeline_runs_at_full_width(surrogate_dir):
    train, test = load_mnist(surrogate_dir)
    stream = make_permuted_tasks(train, test, n_tasks=3, seed=1)
    cfg = TrainConfig(mode="naive_dense", epochs=10, batch_size=64, seed=1)
    result = run_continual(stream, [784, 32, 32, 10], cfg)
    assert result.matrix.is_complete()
    assert np.all(np.diag(result.matrix.grid) >= 0.9)


def test_cli_split_scenario_with_data_dir(surrogate_dir, tmp_path):
    out = tmp_path / "out"
    code = main(["run", "--set", "scenario=split_mnist",
                 "--set", "model.hidden=16,16",
                 "--set", "train.epochs=1",
                 "--set", "train.batch_size=64",
                 "--data-dir", str(surrogate_dir),
                 "--seed", "1", "--out", str(out)])
    assert code == 0
    summary = (out / "seed_1" / "summary.txt").read_text()
    assert "config.scenario = split_mnist" in summary
    ckpt = out / "seed_1" / "model.ckpt"
    code = main(["eval", "--checkpoint", str(ckpt),
                 "--data-dir", str(surrogate_dir)])
    assert code == 0
