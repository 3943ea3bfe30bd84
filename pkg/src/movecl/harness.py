"""Sequential-task training with prior snapshots and forgetting metrics.

The harness trains a single-head model over an ordered task stream. Each
task minimizes a batch-mean objective: negative utility (classification
log-likelihood under the softmax head) plus the per-layer weighted
regularizers from the mixture layers. At every task boundary the layer
priors snapshot the current posteriors and the optimizer moments reset,
so stale gradient statistics never leak across tasks.

Inference is task-agnostic by construction: evaluation receives raw
examples only, runs at posterior means with sampling disabled, and no
function on the inference path accepts a task identifier.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import (
    NumericError,
    Tape,
    Tensor,
    backward,
    gather_elements,
    leaky_relu,
    log_softmax,
    reduce_mean,
)
from .data import TaskStream
from .move import MoVELayer
from .variational import DenseLayer

BASELINE_MODES = ("hvcl", "vcl_single_expert", "naive_dense", "offline_oracle")

LEAKY_SLOPE = 0.01


@dataclass
class TrainConfig:
    """Training hyperparameters, shared by every baseline mode."""

    gating_kl_weight: float = 0.002
    weight_kl_weight: float = 0.75
    entropy_weight: float = 0.01
    diversity_weight: float = 0.01
    kernel_width: float = 1.0
    entropy_sign: int = 1
    epochs: int = 20
    batch_size: int = 256
    learning_rate: float = 6e-4
    seed: int = 0
    mode: str = "hvcl"

    def __post_init__(self) -> None:
        weights = (self.gating_kl_weight, self.weight_kl_weight,
                   self.entropy_weight, self.diversity_weight)
        if not all(np.isfinite(w) and w >= 0.0 for w in weights):
            raise ValueError(f"loss weights must be finite and >= 0, got {weights}")
        if self.kernel_width <= 0.0:
            raise ValueError("kernel_width must be positive")
        if self.entropy_sign not in (1, -1):
            raise ValueError("entropy_sign must be +1 or -1")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.learning_rate <= 0.0:
            raise ValueError("learning_rate must be positive")
        if self.mode not in BASELINE_MODES:
            raise ValueError(f"unknown mode {self.mode!r}, expected one of "
                             f"{BASELINE_MODES}")


class Adam:
    """Per-parameter first/second-moment optimizer."""

    def __init__(self, params: list[Tensor], lr: float,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> None:
        self.params = params
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in params]
        self.v = [np.zeros_like(p.data) for p in params]

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        self.t += 1
        correction1 = 1.0 - self.beta1 ** self.t
        correction2 = 1.0 - self.beta2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            g = p.grad
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p.data -= self.lr * (m / correction1) / (np.sqrt(v / correction2) + self.eps)

    def reset_state(self) -> None:
        """Forget moments (used at task boundaries)."""
        self.t = 0
        for m, v in zip(self.m, self.v):
            m[:] = 0.0
            v[:] = 0.0


def softmax_log_likelihood(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean log-likelihood of integer labels under the softmax head."""
    log_probs = log_softmax(logits, axis=1)
    rows = np.arange(len(labels))
    return reduce_mean(gather_elements(log_probs, rows, labels))


class Model:
    """A stack of layers ending in one shared output head.

    In the mixture modes every layer (head included) is a ``MoVELayer``;
    the naive and offline baselines use plain deterministic dense layers.
    Hidden layers use leaky-ReLU activations; the head emits raw logits.
    """

    def __init__(self, layer_sizes: list[int], cfg: TrainConfig,
                 rng: np.random.Generator, n_experts: int = 2, k: int = 1,
                 utility=None) -> None:
        if len(layer_sizes) < 2:
            raise ValueError("layer_sizes needs an input and an output extent")
        self.layer_sizes = list(layer_sizes)
        self.mode = cfg.mode
        self.n_experts = 1 if cfg.mode == "vcl_single_expert" else n_experts
        self.k = k
        self.utility = utility if utility is not None else softmax_log_likelihood
        self.tape = Tape()
        self.task_counter = 0

        variational = cfg.mode in ("hvcl", "vcl_single_expert")
        self.layers: list[MoVELayer | DenseLayer] = []
        for i, (d_in, d_out) in enumerate(zip(layer_sizes[:-1], layer_sizes[1:])):
            if variational:
                self.layers.append(MoVELayer(
                    d_in, d_out, self.n_experts, rng, k=k,
                    gating_kl_weight=cfg.gating_kl_weight,
                    weight_kl_weight=cfg.weight_kl_weight,
                    entropy_weight=cfg.entropy_weight,
                    diversity_weight=cfg.diversity_weight,
                    kernel_width=cfg.kernel_width,
                    entropy_sign=cfg.entropy_sign,
                    name=f"l{i}"))
            else:
                self.layers.append(DenseLayer(d_in, d_out, rng))

    @property
    def sampled(self) -> bool:
        return any(isinstance(layer, MoVELayer) for layer in self.layers)

    def move_layers(self) -> list[MoVELayer]:
        return [layer for layer in self.layers if isinstance(layer, MoVELayer)]

    def forward(self, x: Tensor, rng: np.random.Generator | None,
                sample: bool = True, need_aux: bool = True):
        auxes = []
        h = x
        last = len(self.layers) - 1
        for i, layer in enumerate(self.layers):
            if isinstance(layer, MoVELayer):
                h, aux = layer.forward(h, rng, sample=sample, need_aux=need_aux)
                if aux is not None:
                    auxes.append(aux)
            else:
                h = layer.forward(h)
            if i != last:
                h = leaky_relu(h, LEAKY_SLOPE)
        return h, auxes

    def predict(self, inputs: np.ndarray, batch_size: int = 2048) -> np.ndarray:
        """Deterministic class predictions at the posterior means."""
        out = []
        for start in range(0, len(inputs), batch_size):
            chunk = Tensor(inputs[start:start + batch_size])
            logits, _ = self.forward(chunk, rng=None, sample=False, need_aux=False)
            out.append(np.argmax(logits.data, axis=1))
        return np.concatenate(out) if out else np.zeros(0, dtype=np.int64)

    def parameters(self) -> list[Tensor]:
        params: list[Tensor] = []
        for layer in self.layers:
            params.extend(layer.parameters())
        return params

    def snapshot_priors(self) -> None:
        for layer in self.move_layers():
            layer.snapshot_layer_priors()

    def duplicate_expert_init(self) -> None:
        for layer in self.move_layers():
            layer.duplicate_expert_init()

    def state_arrays(self) -> dict[str, np.ndarray]:
        arrays = {}
        for i, layer in enumerate(self.layers):
            arrays.update({f"layers.{i:02d}.{k}": v
                           for k, v in layer.state_arrays().items()})
        return arrays

    def load_state(self, arrays: dict[str, np.ndarray]) -> None:
        for i, layer in enumerate(self.layers):
            prefix = f"layers.{i:02d}."
            layer.load_state({k[len(prefix):]: v for k, v in arrays.items()
                              if k.startswith(prefix)})

    def arch_meta(self) -> dict:
        return {"layer_sizes": self.layer_sizes, "n_experts": self.n_experts,
                "k": self.k, "mode": self.mode}


def total_loss(model: Model, inputs: np.ndarray, labels: np.ndarray,
               rng: np.random.Generator | None, sample: bool = True):
    """Batch objective: -mean utility plus weighted per-layer regularizers."""
    if len(inputs) == 0:
        raise ValueError("total_loss: empty batch")
    logits, auxes = model.forward(Tensor(inputs), rng, sample=sample)
    utility = model.utility(logits, labels)
    loss = -utility
    for aux in auxes:
        loss = loss + aux.weighted_total()

    parts = {"loss": float(loss.data), "nll": float(-utility.data),
             "gating_kl": 0.0, "weight_kl": 0.0,
             "entropy_cost": 0.0, "dpp_diversity": 0.0}
    for i, aux in enumerate(auxes):
        for key, value in aux.components().items():
            parts[key] += value
        if aux.entropy_report is not None:
            parts[f"h_cond_l{i}"] = aux.entropy_report.conditional_entropy
            parts[f"h_marg_l{i}"] = aux.entropy_report.marginal_entropy
    if not np.isfinite(parts["loss"]):
        detail = ", ".join(f"{k}={v:.4g}" for k, v in parts.items())
        raise NumericError(f"total loss diverged ({detail})")
    return loss, parts


def train_task(model: Model, dataset, cfg: TrainConfig, optimizer: Adam,
               shuffle_rng: np.random.Generator, sample_rng: np.random.Generator,
               task_index: int = 0) -> list[dict]:
    """Stochastic gradient steps over one task; returns per-epoch records."""
    records = []
    n = len(dataset)
    for epoch in range(cfg.epochs):
        for layer in model.move_layers():
            layer.reset_route_counts()
        order = shuffle_rng.permutation(n)
        sums: dict[str, float] = {}
        n_batches = 0
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            with model.tape:
                loss, parts = total_loss(model, dataset.inputs[idx],
                                         dataset.labels[idx], sample_rng,
                                         sample=model.sampled)
            optimizer.zero_grad()
            backward(loss)
            optimizer.step()
            for key, value in parts.items():
                sums[key] = sums.get(key, 0.0) + value
            n_batches += 1

        record = {"task": task_index, "epoch": epoch}
        record.update({key: value / n_batches for key, value in sums.items()})
        for i, layer in enumerate(model.move_layers()):
            counts = layer.route_counts
            loads = counts / max(counts.sum(), 1)
            for m, load in enumerate(loads):
                record[f"load_l{i}_m{m}"] = float(load)
            record[f"det_k_l{i}"] = layer.kernel_det()
        records.append(record)
    return records


def advance_task(model: Model, optimizer: Adam) -> None:
    """Task boundary: snapshot priors, reset optimizer moments."""
    model.snapshot_priors()
    optimizer.reset_state()
    model.task_counter += 1


def evaluate_accuracy(model: Model, dataset) -> float:
    """Deterministic held-out accuracy (posterior means, no sampling)."""
    if len(dataset) == 0:
        raise ValueError("evaluate_accuracy: empty held-out split")
    predictions = model.predict(dataset.inputs)
    return float(np.mean(predictions == dataset.labels))


def evaluate_row(model: Model, stream: TaskStream, up_to: int) -> np.ndarray:
    """Held-out accuracies on tasks 0..up_to; the model sees raw inputs only."""
    return np.array([evaluate_accuracy(model, stream.tasks[j].test)
                     for j in range(up_to + 1)])


class AccuracyMatrix:
    """Lower-triangular grid: entry (t, j) is task-j accuracy after stage t."""

    def __init__(self, n_tasks: int) -> None:
        if n_tasks < 1:
            raise ValueError("AccuracyMatrix: need at least one task")
        self.n_tasks = n_tasks
        self.grid = np.full((n_tasks, n_tasks), np.nan)

    def set_row(self, stage: int, accuracies) -> None:
        accuracies = np.asarray(accuracies, dtype=np.float64)
        if accuracies.shape != (stage + 1,):
            raise ValueError(f"stage {stage} expects {stage + 1} accuracies, "
                             f"got {accuracies.shape}")
        if np.any((accuracies < 0.0) | (accuracies > 1.0)):
            raise ValueError("accuracies must lie in [0, 1]")
        self.grid[stage, :stage + 1] = accuracies

    def row(self, stage: int) -> np.ndarray:
        return self.grid[stage, :stage + 1].copy()

    def final_row(self) -> np.ndarray:
        return self.row(self.n_tasks - 1)

    def is_complete(self) -> bool:
        tri = np.tril_indices(self.n_tasks)
        return bool(np.all(np.isfinite(self.grid[tri])))


def forgetting_metrics(matrix: AccuracyMatrix | np.ndarray) -> tuple[float, float]:
    """ACC (mean of the final row) and mean drop from each task's best.

    Forgetting averages, over every task except the last, the gap between
    the task's best accuracy at any stage and its final accuracy.
    """
    grid = matrix.grid if isinstance(matrix, AccuracyMatrix) else np.asarray(matrix)
    n = grid.shape[0]
    tri = np.tril_indices(n)
    if not np.all(np.isfinite(grid[tri])):
        raise ValueError("forgetting_metrics: incomplete accuracy matrix")
    acc = float(np.mean(grid[n - 1, :]))
    if n == 1:
        return acc, 0.0
    drops = [float(np.max(grid[j:, j]) - grid[n - 1, j]) for j in range(n - 1)]
    return acc, float(np.mean(drops))


@dataclass
class RunResult:
    matrix: AccuracyMatrix
    records: list[dict] = field(repr=False)
    model: Model = field(repr=False)

    def metrics(self) -> tuple[float, float]:
        return forgetting_metrics(self.matrix)


def _check_labels(stream: TaskStream, n_outputs: int) -> None:
    top = max(int(task.train.labels.max()) for task in stream.tasks)
    if top >= n_outputs:
        raise ValueError(f"labels reach {top} but the head has {n_outputs} outputs")


def run_continual(stream: TaskStream, layer_sizes: list[int], cfg: TrainConfig,
                  n_experts: int = 2, k: int = 1) -> RunResult:
    """Train tasks in order with prior snapshots at every boundary."""
    if cfg.mode == "offline_oracle":
        return offline_oracle_baseline(stream, layer_sizes, cfg,
                                       n_experts=n_experts, k=k)
    _check_labels(stream, layer_sizes[-1])
    init_ss, sample_ss, shuffle_ss = np.random.SeedSequence(cfg.seed).spawn(3)
    model = Model(layer_sizes, cfg, np.random.default_rng(init_ss),
                  n_experts=n_experts, k=k)
    optimizer = Adam(model.parameters(), cfg.learning_rate)
    sample_rng = np.random.default_rng(sample_ss)
    shuffle_rng = np.random.default_rng(shuffle_ss)

    matrix = AccuracyMatrix(len(stream))
    records: list[dict] = []
    for t, task in enumerate(stream.tasks):
        records.extend(train_task(model, task.train, cfg, optimizer,
                                   shuffle_rng, sample_rng, task_index=t))
        matrix.set_row(t, evaluate_row(model, stream, t))
        advance_task(model, optimizer)
    return RunResult(matrix, records, model)


def offline_oracle_baseline(stream: TaskStream, layer_sizes: list[int],
                            cfg: TrainConfig, n_experts: int = 2,
                            k: int = 1) -> RunResult:
    """Upper-bound reference: retrain from scratch on the union of tasks seen.

    Stage t trains a fresh deterministic dense model on the concatenated
    training sets of tasks 1..t and evaluates each of those tasks.
    """
    from .data import LabeledDataset

    _check_labels(stream, layer_sizes[-1])
    stage_cfg = TrainConfig(
        gating_kl_weight=0.0, weight_kl_weight=0.0, entropy_weight=0.0,
        diversity_weight=0.0, kernel_width=cfg.kernel_width,
        entropy_sign=cfg.entropy_sign, epochs=cfg.epochs,
        batch_size=cfg.batch_size, learning_rate=cfg.learning_rate,
        seed=cfg.seed, mode="naive_dense")

    matrix = AccuracyMatrix(len(stream))
    records: list[dict] = []
    model = None
    for t in range(len(stream)):
        init_ss, sample_ss, shuffle_ss = np.random.SeedSequence(
            (cfg.seed, t)).spawn(3)
        model = Model(layer_sizes, stage_cfg, np.random.default_rng(init_ss))
        optimizer = Adam(model.parameters(), cfg.learning_rate)
        union = LabeledDataset(
            np.concatenate([stream.tasks[j].train.inputs for j in range(t + 1)]),
            np.concatenate([stream.tasks[j].train.labels for j in range(t + 1)]),
            stream.tasks[0].train.classes)
        stage_records = train_task(model, union, stage_cfg, optimizer,
                                   np.random.default_rng(shuffle_ss),
                                   np.random.default_rng(sample_ss),
                                   task_index=t)
        records.extend(stage_records)
        matrix.set_row(t, evaluate_row(model, stream, t))
    return RunResult(matrix, records, model)
