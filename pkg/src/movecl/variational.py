"""Dense layers with diagonal-Gaussian weight posteriors and frozen priors.

A ``VariationalDense`` layer keeps a mean-field posterior over its weight
matrix, a frozen prior of the same shape, and a deterministic bias. The
forward pass draws one reparameterized weight sample per call (shared
across the batch), so gradients reach the posterior parameters through
the sample. Snapshotting copies the posterior into the prior bit-exactly,
which makes the KL to the prior exactly zero immediately afterwards.
"""

from __future__ import annotations

import numpy as np

from .autodiff import (
    DomainError,
    ShapeError,
    Tensor,
    add_bias,
    log,
    matmul,
    reduce_sum,
    softplus,
)


def rho_for_std(std: float) -> float:
    """Inverse softplus: the rho value whose softplus equals ``std``."""
    if std <= 0.0:
        raise DomainError("rho_for_std: std must be positive")
    return float(np.log(np.expm1(std)))


class GaussianMeanField:
    """Diagonal Gaussian over an array of weights.

    Parameterized as (mu, rho) with std = softplus(rho), so the standard
    deviation stays positive under unconstrained gradient steps.
    """

    def __init__(self, mu: Tensor, rho: Tensor) -> None:
        if mu.shape != rho.shape:
            raise ShapeError(f"mean field: mu {mu.shape} and rho {rho.shape} differ")
        self.mu = mu
        self.rho = rho

    @classmethod
    def initialized(cls, shape, rng: np.random.Generator, init_std: float = 0.05,
                    mu_scale: float | None = None) -> "GaussianMeanField":
        """Trainable field: fan-in-scaled uniform means, constant small std."""
        if mu_scale is None:
            fan_in = shape[0] if len(shape) > 0 else 1
            mu_scale = 1.0 / np.sqrt(fan_in)
        mu = rng.uniform(-mu_scale, mu_scale, size=shape)
        rho = np.full(shape, rho_for_std(init_std))
        return cls(Tensor(mu, requires_grad=True), Tensor(rho, requires_grad=True))

    @classmethod
    def standard_normal(cls, shape) -> "GaussianMeanField":
        """Frozen N(0, 1) field, the prior used before any task is seen."""
        mu = np.zeros(shape)
        rho = np.full(shape, rho_for_std(1.0))
        return cls(Tensor(mu), Tensor(rho))

    @property
    def shape(self) -> tuple[int, ...]:
        return self.mu.shape

    def std(self) -> Tensor:
        return softplus(self.rho)

    def mu_values(self) -> np.ndarray:
        return self.mu.data

    def std_values(self) -> np.ndarray:
        return np.logaddexp(0.0, self.rho.data)

    def frozen_copy(self) -> "GaussianMeanField":
        """Bit-exact copy that never receives gradients."""
        return GaussianMeanField(Tensor(self.mu.data.copy()), Tensor(self.rho.data.copy()))


def kl_diag_gaussian(p: GaussianMeanField, q: GaussianMeanField) -> Tensor:
    """KL(p || q) between diagonal Gaussians, in nats.

    Summed over dimensions:
        log(sigma_q / sigma_p) + (sigma_p^2 + (mu_p - mu_q)^2) / (2 sigma_q^2) - 1/2

    The terms are arranged so the result is exactly 0.0 when p and q hold
    bit-identical parameters (log difference, exact x/(2x) quotient).
    """
    if p.shape != q.shape:
        raise ShapeError(f"kl_diag_gaussian: shapes {p.shape} and {q.shape} differ")
    std_p = p.std()
    std_q = q.std()
    var_p = std_p * std_p
    var_q = std_q * std_q
    delta = p.mu - q.mu
    elem = (log(std_q) - log(std_p)) + (var_p + delta * delta) / (var_q * 2.0) - 0.5
    return reduce_sum(elem)


class VariationalDense:
    """Dense layer with a Gaussian mean-field posterior over its weights.

    The bias is a deterministic trainable vector; the prior is a frozen
    copy of a past posterior (initially N(0, 1) per weight).
    """

    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator,
                 init_std: float = 0.05) -> None:
        self.n_in = n_in
        self.n_out = n_out
        self.posterior = GaussianMeanField.initialized((n_in, n_out), rng, init_std)
        self.prior = GaussianMeanField.standard_normal((n_in, n_out))
        self.bias = Tensor(np.zeros(n_out), requires_grad=True)
        # test hook: when set, sampling uses this array instead of the rng
        self.frozen_eps: np.ndarray | None = None

    def sample_forward(self, x: Tensor, rng: np.random.Generator) -> Tensor:
        """One reparameterized weight draw, shared across the batch."""
        eps = self.frozen_eps if self.frozen_eps is not None else rng.standard_normal(
            self.posterior.shape)
        w = self.posterior.mu + self.posterior.std() * Tensor(eps)
        return add_bias(matmul(x, w), self.bias)

    def mean_forward(self, x: Tensor) -> Tensor:
        """Deterministic pass at the posterior means (evaluation path)."""
        return add_bias(matmul(x, self.posterior.mu), self.bias)

    def weight_kl(self) -> Tensor:
        return kl_diag_gaussian(self.posterior, self.prior)

    def snapshot_prior(self) -> None:
        """Freeze the current posterior as the prior for the next task."""
        self.prior = self.posterior.frozen_copy()

    def parameters(self) -> list[Tensor]:
        return [self.posterior.mu, self.posterior.rho, self.bias]

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {
            "mu": self.posterior.mu.data,
            "rho": self.posterior.rho.data,
            "bias": self.bias.data,
            "prior_mu": self.prior.mu.data,
            "prior_rho": self.prior.rho.data,
        }

    def load_state(self, arrays: dict[str, np.ndarray]) -> None:
        self.posterior = GaussianMeanField(
            Tensor(arrays["mu"].copy(), requires_grad=True),
            Tensor(arrays["rho"].copy(), requires_grad=True),
        )
        self.prior = GaussianMeanField(
            Tensor(arrays["prior_mu"].copy()), Tensor(arrays["prior_rho"].copy()))
        self.bias = Tensor(arrays["bias"].copy(), requires_grad=True)


class DenseLayer:
    """Plain deterministic dense layer (naive / offline baselines)."""

    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator) -> None:
        self.n_in = n_in
        self.n_out = n_out
        bound = 1.0 / np.sqrt(n_in)
        self.weight = Tensor(rng.uniform(-bound, bound, size=(n_in, n_out)),
                             requires_grad=True)
        self.bias = Tensor(np.zeros(n_out), requires_grad=True)

    def forward(self, x: Tensor) -> Tensor:
        return add_bias(matmul(x, self.weight), self.bias)

    def parameters(self) -> list[Tensor]:
        return [self.weight, self.bias]

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {"weight": self.weight.data, "bias": self.bias.data}

    def load_state(self, arrays: dict[str, np.ndarray]) -> None:
        self.weight = Tensor(arrays["weight"].copy(), requires_grad=True)
        self.bias = Tensor(arrays["bias"].copy(), requires_grad=True)
