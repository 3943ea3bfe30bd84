"""Sparsely gated mixture-of-variational-experts layers.

A layer holds M variational dense experts with identical architecture and
separate parameters, plus a deterministic gating network that produces a
per-input categorical distribution over experts. Only the top-k experts
(k = 1 by default) are evaluated per input row; the layer output is the
selected expert's response weighted by its gate probability, which keeps
the gating path differentiable without a straight-through estimator.

Regularization happens per layer: a categorical KL from the current
gating output to a frozen prior gating network evaluated on the same
inputs, a Gaussian KL from each batch-routed expert's posterior to its
frozen prior, a batch entropy cost on the gating output, and a DPP
log-determinant diversity term over the expert posteriors. Before the
first task the gating prior has all-zero parameters, so its output is
uniform over experts; snapshots replace it with a copy of the live
gating network.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import (
    DomainError,
    NumericError,
    Tensor,
    add_bias,
    assert_finite,
    gather_elements,
    gather_rows,
    log_softmax,
    matmul,
    reduce_mean,
    reduce_sum,
    scale_rows,
    scatter_rows,
    softmax,
)
from .diversity import EntropyReport, dpp_diversity_loss, entropy_cost, kernel_matrix
from .variational import VariationalDense


def top1_route(probs: np.ndarray) -> np.ndarray:
    """Per-row argmax with ties broken toward the lowest expert index."""
    return np.argmax(probs, axis=1)


def topk_indices(probs: np.ndarray, k: int) -> np.ndarray:
    """Indices of the k largest gate probabilities per row, ties to lower index."""
    if k == 1:
        return top1_route(probs)[:, np.newaxis]
    order = np.argsort(-probs, axis=1, kind="stable")
    return order[:, :k]


def categorical_kl_rows(p: np.ndarray, q: np.ndarray) -> np.ndarray:
    """Brute-force per-row KL(p || q) between categorical rows (test oracle)."""
    ratio = np.zeros_like(p)
    positive = p > 0.0
    ratio[positive] = p[positive] * (np.log(p[positive]) - np.log(q[positive]))
    return ratio.sum(axis=1)


class GatingNet:
    """Deterministic single-dense gating network with a frozen prior copy.

    The prior starts at zero parameters, whose softmax output is uniform
    for every input; after a snapshot it reproduces the live network's
    output on any input exactly.
    """

    def __init__(self, n_in: int, n_experts: int, rng: np.random.Generator) -> None:
        bound = 1.0 / np.sqrt(n_in)
        self.weight = Tensor(rng.uniform(-bound, bound, size=(n_in, n_experts)),
                             requires_grad=True)
        self.bias = Tensor(np.zeros(n_experts), requires_grad=True)
        self.prior_weight = Tensor(np.zeros((n_in, n_experts)))
        self.prior_bias = Tensor(np.zeros(n_experts))

    def logits(self, x: Tensor) -> Tensor:
        return add_bias(matmul(x, self.weight), self.bias)

    def prior_logits(self, x: Tensor) -> Tensor:
        return add_bias(matmul(x, self.prior_weight), self.prior_bias)

    def snapshot(self) -> None:
        self.prior_weight = Tensor(self.weight.data.copy())
        self.prior_bias = Tensor(self.bias.data.copy())

    def parameters(self) -> list[Tensor]:
        return [self.weight, self.bias]

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {
            "weight": self.weight.data,
            "bias": self.bias.data,
            "prior_weight": self.prior_weight.data,
            "prior_bias": self.prior_bias.data,
        }

    def load_state(self, arrays: dict[str, np.ndarray]) -> None:
        self.weight = Tensor(arrays["weight"].copy(), requires_grad=True)
        self.bias = Tensor(arrays["bias"].copy(), requires_grad=True)
        self.prior_weight = Tensor(arrays["prior_weight"].copy())
        self.prior_bias = Tensor(arrays["prior_bias"].copy())


@dataclass
class AuxLossBundle:
    """Per-layer regularization scalars and their loss weights.

    ``weight_kl`` is the raw divergence; ``weight_kl_scale`` amortizes it
    over the current task's dataset (the trainer sets 1/N_t so the KL is
    counted once per dataset, spread across steps). Per-sample terms
    (gating KL, entropy) are batch means and need no scale.
    """

    gating_kl: Tensor
    weight_kl: Tensor
    entropy_cost: Tensor
    dpp_diversity: Tensor
    gating_kl_weight: float
    weight_kl_weight: float
    entropy_weight: float
    diversity_weight: float
    weight_kl_scale: float = 1.0
    entropy_report: EntropyReport | None = field(default=None, repr=False)

    def weighted_total(self) -> Tensor:
        total = Tensor(0.0)
        for term, weight in ((self.gating_kl, self.gating_kl_weight),
                             (self.weight_kl,
                              self.weight_kl_weight * self.weight_kl_scale),
                             (self.entropy_cost, self.entropy_weight),
                             (self.dpp_diversity, self.diversity_weight)):
            if weight != 0.0:
                total = total + term * weight
        return total

    def components(self) -> dict[str, float]:
        return {
            "gating_kl": float(self.gating_kl.data),
            "weight_kl": float(self.weight_kl.data),
            "entropy_cost": float(self.entropy_cost.data),
            "dpp_diversity": float(self.dpp_diversity.data),
        }


class MoVELayer:
    """Mixture-of-variational-experts dense layer with sparse routing."""

    def __init__(self, n_in: int, n_out: int, n_experts: int,
                 rng: np.random.Generator, k: int = 1,
                 gating_kl_weight: float = 0.002,
                 weight_kl_weight: float = 0.75,
                 entropy_weight: float = 0.01,
                 diversity_weight: float = 0.01,
                 kernel_width: float = 1.0,
                 entropy_sign: int = 1,
                 dpp_jitter: float = 1e-6,
                 init_std: float = 0.05,
                 name: str = "move") -> None:
        if n_experts < 1:
            raise DomainError("MoVELayer: need at least one expert")
        if not 1 <= k <= n_experts:
            raise DomainError(f"MoVELayer: k={k} outside [1, {n_experts}]")
        self.n_in = n_in
        self.n_out = n_out
        self.n_experts = n_experts
        self.k = k
        self.name = name
        self.experts = [VariationalDense(n_in, n_out, rng, init_std)
                        for _ in range(n_experts)]
        self.gating = GatingNet(n_in, n_experts, rng)
        self.gating_kl_weight = gating_kl_weight
        self.weight_kl_weight = weight_kl_weight
        self.entropy_weight = entropy_weight
        self.diversity_weight = diversity_weight
        self.kernel_width = kernel_width
        self.entropy_sign = entropy_sign
        self.dpp_jitter = dpp_jitter
        # set by the trainer to 1/N_t so the weight KL is counted once per
        # dataset rather than once per step
        self.weight_kl_scale = 1.0
        # instrumentation: cumulative count of expert-forward row evaluations
        self.rows_evaluated = 0
        # per-expert routing counts, reset by the trainer at epoch boundaries
        self.route_counts = np.zeros(n_experts, dtype=np.int64)

    def gate(self, x: Tensor) -> Tensor:
        """Gating distribution over experts, one row per input."""
        return softmax(self.gating.logits(x), axis=1)

    def forward(self, x: Tensor, rng: np.random.Generator | None,
                sample: bool = True, need_aux: bool = True
                ) -> tuple[Tensor, AuxLossBundle | None]:
        """Route each row to its top-k experts and weight by gate probability.

        Only routed experts run a forward pass; with k=1 that is exactly
        one expert evaluation per input row. ``sample=False`` uses each
        expert's posterior means (evaluation path).
        """
        n = x.shape[0]
        logits = self.gating.logits(x)
        probs = softmax(logits, axis=1)
        assignment = topk_indices(probs.data, self.k)

        y: Tensor | None = None
        routed = np.unique(assignment)
        for m in routed:
            rows = np.nonzero((assignment == m).any(axis=1))[0]
            xm = gather_rows(x, rows)
            expert = self.experts[m]
            ym = expert.sample_forward(xm, rng) if sample else expert.mean_forward(xm)
            pm = gather_elements(probs, rows, np.full(rows.shape, m))
            contrib = scatter_rows(scale_rows(ym, pm), rows, n)
            y = contrib if y is None else y + contrib
            self.rows_evaluated += len(rows)
            self.route_counts[m] += len(rows)
        assert_finite(y, f"layer {self.name}")

        if not need_aux:
            return y, None

        log_p = log_softmax(logits, axis=1)
        log_q = log_softmax(self.gating.prior_logits(x), axis=1)
        gating_kl = reduce_mean(reduce_sum(probs * (log_p - log_q), axis=1))

        weight_kl: Tensor = Tensor(0.0)
        for m in routed:
            weight_kl = weight_kl + self.experts[m].weight_kl()

        cost, report = entropy_cost(probs, self.entropy_sign)

        if self.n_experts >= 2 and self.diversity_weight != 0.0:
            try:
                kmat = kernel_matrix([e.posterior for e in self.experts],
                                     self.kernel_width)
                dpp = dpp_diversity_loss(kmat, jitter=self.dpp_jitter)
            except NumericError as exc:
                raise NumericError(f"layer {self.name}: {exc}") from None
        else:
            dpp = Tensor(0.0)

        aux = AuxLossBundle(
            gating_kl=gating_kl, weight_kl=weight_kl,
            entropy_cost=cost, dpp_diversity=dpp,
            gating_kl_weight=self.gating_kl_weight,
            weight_kl_weight=self.weight_kl_weight,
            entropy_weight=self.entropy_weight,
            diversity_weight=self.diversity_weight,
            entropy_report=report,
        )
        return y, aux

    def snapshot_layer_priors(self) -> None:
        """Freeze gating and every expert posterior as the next task's priors."""
        self.gating.snapshot()
        for expert in self.experts:
            expert.snapshot_prior()

    def expert_load(self, inputs: np.ndarray) -> np.ndarray:
        """Fraction of inputs routed (top-1) to each expert; sums to one."""
        if len(inputs) == 0:
            raise DomainError("expert_load: empty dataset")
        probs = self.gate(Tensor(inputs))
        counts = np.bincount(top1_route(probs.data), minlength=self.n_experts)
        return counts / counts.sum()

    def diversity_loss_value(self) -> float:
        """Current DPP loss over expert posteriors (diagnostic, call off-tape)."""
        if self.n_experts < 2:
            return 0.0
        kmat = kernel_matrix([e.posterior for e in self.experts], self.kernel_width)
        return float(dpp_diversity_loss(kmat, jitter=self.dpp_jitter).data)

    def kernel_det(self) -> float:
        """det(K) over expert posteriors (diagnostic, call off-tape)."""
        if self.n_experts < 2:
            return 1.0
        kmat = kernel_matrix([e.posterior for e in self.experts], self.kernel_width)
        return float(np.linalg.det(kmat.values()))

    def duplicate_expert_init(self) -> None:
        """Overwrite every expert with a copy of expert 0 (diagnostics)."""
        src = self.experts[0]
        for expert in self.experts[1:]:
            expert.posterior.mu.data[:] = src.posterior.mu.data
            expert.posterior.rho.data[:] = src.posterior.rho.data
            expert.bias.data[:] = src.bias.data

    def parameters(self) -> list[Tensor]:
        params = self.gating.parameters()
        for expert in self.experts:
            params.extend(expert.parameters())
        return params

    def reset_route_counts(self) -> None:
        self.route_counts[:] = 0

    def state_arrays(self) -> dict[str, np.ndarray]:
        arrays = {f"gating.{k}": v for k, v in self.gating.state_arrays().items()}
        for m, expert in enumerate(self.experts):
            arrays.update({f"expert{m}.{k}": v
                           for k, v in expert.state_arrays().items()})
        return arrays

    def load_state(self, arrays: dict[str, np.ndarray]) -> None:
        self.gating.load_state({k.split(".", 1)[1]: v for k, v in arrays.items()
                                if k.startswith("gating.")})
        for m, expert in enumerate(self.experts):
            prefix = f"expert{m}."
            expert.load_state({k.split(".", 1)[1]: v for k, v in arrays.items()
                               if k.startswith(prefix)})
