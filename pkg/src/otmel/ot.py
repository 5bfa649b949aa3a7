"""Entropy-regularized discrete optimal transport.

The solver is the classic alternating row/column scaling of the kernel
``K = exp(-sharpness * C)``: larger ``sharpness`` weights the transport
cost more heavily relative to the entropy smoothing and yields plans
closer to the unregularized optimum. A factorial-time exact solver for
small square instances with uniform marginals is included as a test
oracle, together with plan diagnostics (cost, entropy).
"""

from __future__ import annotations

import functools
import itertools
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DimensionError, NonFiniteError
from .types import freeze_array


@dataclass(frozen=True)
class CostMatrix:
    """An n x m matrix of pairwise transport costs."""

    data: np.ndarray

    def __post_init__(self):
        arr = freeze_array(self.data)
        if arr.ndim != 2:
            raise DimensionError(f"cost matrix must be 2-D, got shape {arr.shape}")
        if not np.isfinite(arr).all():
            raise NonFiniteError("cost matrix contains non-finite values")
        object.__setattr__(self, "data", arr)

    @property
    def n(self) -> int:
        return self.data.shape[0]

    @property
    def m(self) -> int:
        return self.data.shape[1]


@dataclass(frozen=True)
class Marginals:
    """Row and column mass targets; each must be a probability vector."""

    mu: np.ndarray
    nu: np.ndarray

    def __post_init__(self):
        for name in ("mu", "nu"):
            vec = freeze_array(getattr(self, name))
            if vec.ndim != 1:
                raise DimensionError(f"{name} must be a vector, got shape {vec.shape}")
            if not np.isfinite(vec).all():
                raise NonFiniteError(f"{name} contains non-finite values")
            if (vec < 0).any():
                raise ConfigError(f"{name} has negative entries")
            if abs(vec.sum() - 1.0) > 1e-12:
                raise ConfigError(f"{name} must sum to 1, got {vec.sum()!r}")
            object.__setattr__(self, name, vec)

    @classmethod
    @functools.lru_cache(maxsize=4096)
    def uniform(cls, n: int, m: int) -> "Marginals":
        # Cached: instances are immutable and the uniform case is hot.
        return cls(np.full(n, 1.0 / n), np.full(m, 1.0 / m))


@dataclass(frozen=True)
class TransportPlan:
    """A nonnegative coupling plus diagnostics from the solve that produced it.

    ``achieved_marginal_error`` is the L1 distance of the plan's row and
    column sums from the requested marginals, recomputed from the final
    plan; ``converged`` records whether it beat the solver tolerance.
    """

    data: np.ndarray
    achieved_marginal_error: float
    iterations_used: int
    converged: bool = True

    def __post_init__(self):
        arr = freeze_array(self.data)
        if arr.ndim != 2:
            raise DimensionError(f"plan must be 2-D, got shape {arr.shape}")
        if (arr < 0).any():
            raise ConfigError("transport plan has negative entries")
        object.__setattr__(self, "data", arr)

    @property
    def n(self) -> int:
        return self.data.shape[0]

    @property
    def m(self) -> int:
        return self.data.shape[1]


@dataclass(frozen=True)
class SinkhornConfig:
    """Solver knobs.

    sharpness: kernel concentration; the kernel is exp(-sharpness * cost),
        so larger values produce sharper (lower-entropy) plans.
    tol: convergence threshold on the combined L1 marginal error.
    max_iter: cap on full row/column update pairs; hitting it is not an
        error, the best available plan is returned flagged unconverged.
    kernel_floor: lower clamp applied to kernel entries so the scaling
        divisions stay finite for extreme sharpness values.
    """

    sharpness: float = 0.6
    tol: float = 1e-6
    max_iter: int = 1000
    kernel_floor: float = 1e-300

    def __post_init__(self):
        if not self.sharpness > 0:
            raise ConfigError(f"sharpness must be positive, got {self.sharpness}")
        if not self.tol > 0:
            raise ConfigError(f"tol must be positive, got {self.tol}")
        if self.max_iter < 1:
            raise ConfigError(f"max_iter must be >= 1, got {self.max_iter}")


def _as_cost(cost) -> CostMatrix:
    return cost if isinstance(cost, CostMatrix) else CostMatrix(cost)


def sinkhorn(
    cost: CostMatrix | np.ndarray,
    marginals: Marginals,
    config: SinkhornConfig = SinkhornConfig(),
) -> TransportPlan:
    """Solve entropy-regularized transport by alternating scaling.

    Starts from all-ones scaling vectors, builds the kernel
    ``K = exp(-sharpness * C)``, and repeats ``u = mu / (K v)`` followed by
    ``v = nu / (K^T u)`` until the combined L1 marginal error of
    ``diag(u) K diag(v)`` drops below ``tol`` or ``max_iter`` pairs have
    run. Deterministic for fixed inputs; never raises on slow convergence.
    """
    cost = _as_cost(cost)
    n, m = cost.n, cost.m
    mu, nu = marginals.mu, marginals.nu
    if mu.shape[0] != n or nu.shape[0] != m:
        raise DimensionError(
            f"marginals ({mu.shape[0]}, {nu.shape[0]}) do not match cost {n}x{m}"
        )

    kernel = np.exp(-config.sharpness * cost.data)
    np.maximum(kernel, config.kernel_floor, out=kernel)

    u = np.ones(n)
    v = np.ones(m)
    kv = kernel @ v
    iterations = 0
    for iterations in range(1, config.max_iter + 1):
        u = mu / kv
        kt_u = kernel.T @ u
        v = nu / kt_u
        kv = kernel @ v
        # After this pair the columns are balanced by construction; the
        # residual lives in the rows.
        err = np.abs(u * kv - mu).sum() + np.abs(v * kt_u - nu).sum()
        if err < config.tol:
            break

    plan = u[:, None] * kernel * v[None, :]
    achieved = float(
        np.abs(plan.sum(axis=1) - mu).sum() + np.abs(plan.sum(axis=0) - nu).sum()
    )
    return TransportPlan(
        data=plan,
        achieved_marginal_error=achieved,
        iterations_used=iterations,
        converged=achieved < config.tol,
    )


_MAX_EXACT_SIZE = 8


def exact_ot_uniform_square(cost: CostMatrix | np.ndarray) -> TransportPlan:
    """Exact minimum-cost plan for square instances with uniform marginals.

    Enumerates all n! permutation matrices scaled by 1/n (the extreme
    points of the feasible polytope under uniform square marginals) and
    returns the cheapest; ties go to the lexicographically smallest
    permutation. Intended as a test oracle, hence the n <= 8 guard.
    """
    cost = _as_cost(cost)
    if cost.n != cost.m:
        raise DimensionError(f"exact solver needs a square cost, got {cost.n}x{cost.m}")
    n = cost.n
    if n > _MAX_EXACT_SIZE:
        raise ConfigError(f"exact solver is limited to n <= {_MAX_EXACT_SIZE}, got {n}")

    c = cost.data
    best_perm = None
    best_sum = np.inf
    for perm in itertools.permutations(range(n)):
        s = sum(c[i, perm[i]] for i in range(n))
        if s < best_sum:
            best_sum = s
            best_perm = perm

    plan = np.zeros((n, n))
    for i, j in enumerate(best_perm):
        plan[i, j] = 1.0 / n
    return TransportPlan(
        data=plan, achieved_marginal_error=0.0, iterations_used=0, converged=True
    )


def transport_cost(cost: CostMatrix | np.ndarray, plan: TransportPlan) -> float:
    """Total cost of a plan: the elementwise product summed over all pairs."""
    cost = _as_cost(cost)
    if cost.data.shape != plan.data.shape:
        raise DimensionError(
            f"cost {cost.data.shape} and plan {plan.data.shape} shapes differ"
        )
    return float(np.sum(cost.data * plan.data))


def plan_entropy(plan: TransportPlan | np.ndarray) -> float:
    """Shannon entropy of a plan, with 0 * log 0 taken as 0."""
    data = plan.data if isinstance(plan, TransportPlan) else np.asarray(plan, float)
    if (data < 0).any():
        raise ConfigError("entropy is undefined for negative entries")
    positive = data[data > 0]
    return float(-np.sum(positive * np.log(positive)))
