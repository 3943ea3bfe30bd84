"""Self-contained oracle suite behind the ``selftest`` CLI verb.

Each check pits an implementation against an independent route: closed
forms against Monte Carlo or quadrature, adjoint gradients against
central differences, structural invariants against brute-force
enumeration. Checks call library functions through their module
namespaces so a test harness can inject faults and watch the matching
check fail by name.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diversity, variational
from .autodiff import Tensor, backward
from .harness import Adam, Model, TrainConfig, advance_task, total_loss
from .move import MoVELayer
from .variational import GaussianMeanField


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"[{status}] {self.name}: {self.detail}"


def _random_field(rng, dim, std_low=0.5, std_high=2.0) -> GaussianMeanField:
    mu = rng.standard_normal(dim)
    std = rng.uniform(std_low, std_high, size=dim)
    return GaussianMeanField(Tensor(mu), Tensor(np.log(np.expm1(std))))


def check_kl_monte_carlo(seed: int = 0) -> CheckResult:
    """Closed-form Gaussian KL vs E_p[log p - log q] over 1e5 samples."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(3):
        p = _random_field(rng, 50)
        q = _random_field(rng, 50)
        closed = float(variational.kl_diag_gaussian(p, q).data)
        x = rng.standard_normal((100_000, 50)) * p.std_values() + p.mu_values()

        def logpdf(x, mu, std):
            z = (x - mu) / std
            return np.sum(-0.5 * z * z - np.log(std), axis=1)

        mc = float(np.mean(logpdf(x, p.mu_values(), p.std_values())
                           - logpdf(x, q.mu_values(), q.std_values())))
        worst = max(worst, abs(closed - mc) / abs(mc))
    return CheckResult("kl_monte_carlo", worst <= 0.02,
                       f"worst relative error {worst:.4f} (tolerance 0.02)")


def check_w2_quadrature(seed: int = 0) -> CheckResult:
    """Closed-form W2^2 vs quantile-coupling quadrature, per dimension.

    Also certifies the squared std term: for pairs with distinct stds the
    quadrature must disagree with the unsquared reading.
    """
    rng = np.random.default_rng(seed)
    cases = [(0.0, 1.0, 3.0, 1.0), (0.0, 1.0, 0.0, 2.0)]
    cases += [(rng.standard_normal(), rng.uniform(0.7, 1.5),
               rng.standard_normal(), rng.uniform(0.7, 1.5)) for _ in range(6)]
    worst = 0.0
    squared_certified = True
    for mu_p, s_p, mu_q, s_q in cases:
        quad = diversity.w2_quadrature_oracle(mu_p, s_p, mu_q, s_q, n_points=100_000)
        closed = float(diversity.w2_diag_gaussian(
            _field(mu_p, s_p), _field(mu_q, s_q)).data)
        worst = max(worst, abs(quad - closed))
        unsquared = (mu_p - mu_q) ** 2 + abs(s_p - s_q)
        if abs(unsquared - closed) > 3e-4 and abs(quad - unsquared) <= 1e-4:
            squared_certified = False
    passed = worst <= 1e-4 and squared_certified
    return CheckResult("w2_quadrature", passed,
                       f"worst absolute error {worst:.2e} (tolerance 1e-4), "
                       f"squared std term certified: {squared_certified}")


def _field(mu: float, std: float) -> GaussianMeanField:
    return GaussianMeanField(Tensor(np.array([mu])),
                             Tensor(np.array([np.log(np.expm1(std))])))


def check_kernel_psd(seed: int = 0) -> CheckResult:
    """Kernel matrices over random expert sets: symmetric, unit diagonal, PSD."""
    rng = np.random.default_rng(seed)
    min_eig = np.inf
    for _ in range(100):
        m = int(rng.integers(2, 9))
        dim = int(rng.integers(2, 24))
        experts = [_random_field(rng, dim, 0.3, 2.5) for _ in range(m)]
        km = diversity.kernel_matrix(experts, h=float(rng.uniform(0.3, 3.0)))
        k = km.values()
        if not np.array_equal(k, k.T):
            return CheckResult("kernel_psd", False, "asymmetric kernel matrix")
        if not np.array_equal(np.diag(k), np.ones(m)):
            return CheckResult("kernel_psd", False, "diagonal is not exactly one")
        min_eig = min(min_eig, float(np.linalg.eigvalsh(k)[0]))
    return CheckResult("kernel_psd", min_eig >= -1e-8,
                       f"min eigenvalue over 100 sets {min_eig:.2e} (floor -1e-8)")


def check_logdet_gradient(seed: int = 0) -> CheckResult:
    """Adjoint log-det gradient vs symmetric-direction central differences."""
    from .autodiff import Tape

    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(3):
        b = rng.standard_normal((4, 4))
        k = b @ b.T + 4.0 * np.eye(4)
        t = Tensor(k.copy(), requires_grad=True)
        with Tape():
            loss = diversity.dpp_diversity_loss(t, jitter=1e-6)
        backward(loss)
        eps = 1e-6
        for i in range(4):
            for j in range(i, 4):
                pert = np.zeros((4, 4))
                pert[i, j] += eps
                pert[j, i] += eps
                f_plus = float(diversity.dpp_diversity_loss(
                    Tensor(k + pert), jitter=1e-6).data)
                f_minus = float(diversity.dpp_diversity_loss(
                    Tensor(k - pert), jitter=1e-6).data)
                fd = (f_plus - f_minus) / (2.0 * eps)
                an = (t.grad[i, j] + t.grad[j, i] if i != j else 2.0 * t.grad[i, i])
                worst = max(worst, abs(fd - an) / max(1.0, abs(fd), abs(an)))
    return CheckResult("logdet_gradient", worst <= 1e-5,
                       f"worst relative error {worst:.2e} (tolerance 1e-5)")


def _toy_model(seed: int) -> tuple[Model, np.ndarray, np.ndarray]:
    """4-d input, two mixture layers (3 hidden units, 2 experts), frozen noise."""
    cfg = TrainConfig(seed=seed)
    rng = np.random.default_rng(seed)
    model = Model([4, 3, 2], cfg, rng, n_experts=2)
    for layer in model.move_layers():
        for expert in layer.experts:
            expert.frozen_eps = rng.standard_normal(expert.posterior.shape)
    x = rng.standard_normal((6, 4))
    y = rng.integers(0, 2, size=6)
    return model, x, y


def check_end_to_end_gradient(seed: int = 0) -> CheckResult:
    """Full objective gradient on a toy mixture net vs central differences."""
    from .autodiff import finite_diff_check

    model, x, y = _toy_model(seed)
    # routing must not flip under probe perturbations
    probs = model.move_layers()[0].gate(Tensor(x)).data
    margin = float(np.min(np.abs(np.diff(np.sort(probs, axis=1)[:, -2:], axis=1))))
    if margin < 1e-3:
        return CheckResult("end_to_end_gradient", False,
                           f"routing margin {margin:.1e} too small for probing")

    def f():
        loss, _ = total_loss(model, x, y, rng=None)
        return loss

    err = finite_diff_check(f, model.parameters(), eps=1e-6)
    return CheckResult("end_to_end_gradient", err <= 1e-3,
                       f"worst relative error {err:.2e} (tolerance 1e-3)")


def check_sparse_routing(seed: int = 0) -> CheckResult:
    """Exactly one expert forward per row per mixture layer at k=1."""
    rng = np.random.default_rng(seed)
    layer = MoVELayer(8, 5, 4, rng, k=1)
    x = Tensor(rng.standard_normal((256, 8)))
    before = layer.rows_evaluated
    layer.forward(x, rng)
    evaluated = layer.rows_evaluated - before
    return CheckResult("sparse_routing", evaluated == 256,
                       f"256-row batch evaluated {evaluated} expert rows "
                       f"(expected 256, dense would be {256 * 4})")


def check_snapshot_recursion(seed: int = 0) -> CheckResult:
    """KL penalties are exactly zero after a snapshot, positive one step later."""
    rng = np.random.default_rng(seed)
    cfg = TrainConfig(seed=seed)
    model = Model([4, 6, 2], cfg, rng, n_experts=2)
    optimizer = Adam(model.parameters(), 1e-2)
    advance_task(model, optimizer)

    x = rng.standard_normal((32, 4))
    y = rng.integers(0, 2, size=32)
    _, parts = total_loss(model, x, y, np.random.default_rng(seed + 1))
    zero_after = parts["gating_kl"] == 0.0 and parts["weight_kl"] == 0.0

    with model.tape:
        loss, _ = total_loss(model, x, y, np.random.default_rng(seed + 2))
    optimizer.zero_grad()
    backward(loss)
    optimizer.step()
    _, parts2 = total_loss(model, x, y, np.random.default_rng(seed + 3))
    positive_after = parts2["gating_kl"] > 0.0 and parts2["weight_kl"] > 0.0

    return CheckResult(
        "snapshot_recursion", zero_after and positive_after,
        f"post-snapshot gating_kl={parts['gating_kl']:.1e} "
        f"weight_kl={parts['weight_kl']:.1e}; after one step "
        f"gating_kl={parts2['gating_kl']:.2e} weight_kl={parts2['weight_kl']:.2e}")


def check_entropy_bounds(seed: int = 0) -> CheckResult:
    """0 <= H(M|X) <= H(M) <= ln M on random batches; hand cases exact."""
    rng = np.random.default_rng(seed)
    slack = 1e-12
    for _ in range(1000):
        n = int(rng.integers(1, 12))
        m = int(rng.integers(2, 6))
        raw = rng.uniform(1e-6, 1.0, size=(n, m))
        probs = raw / raw.sum(axis=1, keepdims=True)
        _, rep = diversity.entropy_cost(Tensor(probs))
        if not (-slack <= rep.conditional_entropy
                and rep.conditional_entropy <= rep.marginal_entropy + slack
                and rep.marginal_entropy <= np.log(m) + slack):
            return CheckResult("entropy_bounds", False,
                               f"bounds violated: H(M|X)={rep.conditional_entropy} "
                               f"H(M)={rep.marginal_entropy} lnM={np.log(m)}")

    uniform_cost, _ = diversity.entropy_cost(Tensor(np.full((4, 4), 0.25)))
    onehot_cost, _ = diversity.entropy_cost(Tensor(np.eye(4)))
    same_cost, _ = diversity.entropy_cost(Tensor(np.tile([1.0, 0, 0, 0], (4, 1))))
    hand_ok = (uniform_cost.item() == 0.0
               and abs(onehot_cost.item() + np.log(4)) <= slack
               and same_cost.item() == 0.0)
    return CheckResult("entropy_bounds", hand_ok,
                       "1000 random batches within bounds; hand cases "
                       f"(0, -ln4, 0) -> ({uniform_cost.item():.3g}, "
                       f"{onehot_cost.item():.6f}, {same_cost.item():.3g})")


ALL_CHECKS = (
    check_kl_monte_carlo,
    check_w2_quadrature,
    check_kernel_psd,
    check_logdet_gradient,
    check_end_to_end_gradient,
    check_sparse_routing,
    check_snapshot_recursion,
    check_entropy_bounds,
)


def run_selftest(seed: int = 0) -> list[CheckResult]:
    return [check(seed) for check in ALL_CHECKS]
