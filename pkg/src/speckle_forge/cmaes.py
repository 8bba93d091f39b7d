"""Covariance Matrix Adaptation Evolution Strategy over flattened mesh vectors.

Maximizing ask/evaluate/tell optimizer. Candidates are drawn from
N(m, sigma^2 C); after ranking, the mean, both evolution paths, the
covariance, and the step size are updated in that order:

    m      <- sum_i w_i x_{i:lambda}                     (best-mu ranking)
    p_c    <- (1-c_c) p_c + 1{||p_sigma|| < 1.5 sqrt(n)}
              * sqrt(1-(1-c_c)^2) sqrt(mu_w) y_w
    p_sigma<- (1-c_sigma) p_sigma
              + sqrt(1-(1-c_sigma)^2) sqrt(mu_w) C^(-1/2) y_w
    C      <- (1-c_1-c_mu) C + c_1 p_c p_c^T
              + c_mu sum_i w_i y_{i:lambda} y_{i:lambda}^T
    sigma  <- sigma * exp((c_sigma/d_sigma)(||p_sigma||/chi_n - 1))

with y_i = (x_i - m_old)/sigma and y_w the weighted recombination of the
best mu. The stalled-path indicator reads p_sigma from the previous
generation, matching the update order above. Learning rates default to
c_c = c_sigma = 4/n, c_1 = 2/n^2, c_mu = min(mu_w/n^2, 1 - c_1) and
d_sigma = 1 + sqrt(mu_w/n), clamped into (0, 1] for very small n.

The eigendecomposition backing sampling and C^(-1/2) is refreshed lazily
every max(1, floor(1/(10 n (c_1+c_mu)))) generations; a full decomposition
per generation is wasteful for mesh-sized problems (n > 1000).
"""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from ._util import atomic_write_text
from .errors import SpeckleForgeError, ValidationError


def default_population(n: int) -> int:
    return 4 + int(math.floor(3.0 * math.log(n)))


def _default_weights(mu: int) -> np.ndarray:
    raw = np.log(mu + 0.5) - np.log(np.arange(1, mu + 1))
    return raw / raw.sum()


@dataclass(frozen=True)
class CmaParams:
    """Static strategy constants; build with :meth:`for_dimension`."""

    n: int
    lam: int
    mu: int
    weights: np.ndarray
    mu_w: float
    c_c: float
    c_sigma: float
    c_1: float
    c_mu: float
    d_sigma: float
    sigma0: float
    max_evals: int
    seed: int
    diagonal: bool = False

    def __post_init__(self):
        if self.n < 1:
            raise ValidationError("dimension must be >= 1")
        if self.sigma0 <= 0:
            raise ValidationError("initial step size must be > 0")
        if self.lam < 2 or not (1 <= self.mu <= self.lam):
            raise ValidationError("need lambda >= 2 and 1 <= mu <= lambda")
        weights = np.asarray(self.weights, dtype=np.float64)
        if weights.shape != (self.mu,):
            raise ValidationError("need one recombination weight per parent")
        if np.any(weights <= 0) or np.any(np.diff(weights) > 0):
            raise ValidationError("weights must be positive and non-increasing")
        if abs(weights.sum() - 1.0) > 1e-9:
            raise ValidationError("weights must sum to 1")
        if self.c_1 + self.c_mu > 1.0 + 1e-12:
            raise ValidationError("c_1 + c_mu must not exceed 1")
        for name in ("c_c", "c_sigma", "c_1", "c_mu"):
            rate = getattr(self, name)
            if not 0.0 <= rate <= 1.0:
                raise ValidationError(f"{name} must lie in [0, 1]")
        weights.setflags(write=False)
        object.__setattr__(self, "weights", weights)

    @classmethod
    def for_dimension(
        cls,
        n: int,
        *,
        sigma0: float,
        max_evals: int,
        lam: int | None = None,
        seed: int = 0,
        diagonal: bool = False,
    ) -> "CmaParams":
        if n < 1:
            raise ValidationError("dimension must be >= 1")
        lam = default_population(n) if lam is None else int(lam)
        if lam < 2:
            raise ValidationError("population size must be >= 2")
        mu = lam // 2
        weights = _default_weights(mu)
        mu_w = 1.0 / float(np.sum(weights**2))
        c_1 = min(2.0 / n**2, 1.0)
        c_mu = min(mu_w / n**2, 1.0 - c_1)
        return cls(
            n=n,
            lam=lam,
            mu=mu,
            weights=weights,
            mu_w=mu_w,
            c_c=min(4.0 / n, 1.0),
            c_sigma=min(4.0 / n, 1.0),
            c_1=c_1,
            c_mu=c_mu,
            d_sigma=1.0 + math.sqrt(mu_w / n),
            sigma0=float(sigma0),
            max_evals=int(max_evals),
            seed=int(seed),
            diagonal=diagonal,
        )

    @property
    def chi_n(self) -> float:
        """E||N(0, I)|| ~ sqrt(n) (1 - 1/(4n) + 1/(21 n^2))."""
        n = self.n
        return math.sqrt(n) * (1.0 - 1.0 / (4.0 * n) + 1.0 / (21.0 * n**2))

    @property
    def eigen_interval(self) -> int:
        return max(1, int(math.floor(1.0 / (10.0 * self.n * (self.c_1 + self.c_mu)))))


@dataclass
class CmaState:
    """Mutable optimizer state; create with :func:`init`."""

    m: np.ndarray
    sigma: float
    C: np.ndarray
    p_c: np.ndarray
    p_sigma: np.ndarray
    g: int
    rng: np.random.Generator
    eigen_basis: np.ndarray
    eigen_scale: np.ndarray  # sqrt of eigenvalues
    eigen_age: int = 0
    repair_count: int = 0


def init(params: CmaParams, m0: Sequence[float]) -> CmaState:
    """Fresh state centered on m0 with C = I and zeroed evolution paths."""
    m = np.array(m0, dtype=np.float64)
    if m.shape != (params.n,):
        raise ValidationError(f"m0 must be a {params.n}-dimensional vector")
    if not np.isfinite(m).all():
        raise ValidationError("m0 must be finite")
    return CmaState(
        m=m,
        sigma=params.sigma0,
        C=np.eye(params.n),
        p_c=np.zeros(params.n),
        p_sigma=np.zeros(params.n),
        g=0,
        rng=np.random.default_rng(params.seed),
        eigen_basis=np.eye(params.n),
        eigen_scale=np.ones(params.n),
        eigen_age=-1,
    )


def _refresh_eigen(state: CmaState, params: CmaParams) -> None:
    if state.eigen_age >= 0 and state.g - state.eigen_age < params.eigen_interval:
        return
    if not np.isfinite(state.C).all():
        raise SpeckleForgeError("covariance matrix corrupted (non-finite entries)")
    if params.diagonal:
        values = np.diag(state.C).copy()
        basis = np.eye(params.n)
    else:
        try:
            values, basis = np.linalg.eigh(state.C)
        except np.linalg.LinAlgError as exc:
            raise SpeckleForgeError(f"covariance eigendecomposition failed: {exc}") from exc
    if float(np.min(values)) <= 0.0:
        # repair: floor non-positive eigenvalues and rebuild C so the
        # exposed state stays symmetric positive definite
        floor = max(float(np.max(values)), 1.0) * 1e-14
        values = np.maximum(values, floor)
        state.C = (basis * values) @ basis.T
        state.C = (state.C + state.C.T) / 2.0
        state.repair_count += 1
    state.eigen_basis = basis
    state.eigen_scale = np.sqrt(values)
    state.eigen_age = state.g


def ask(state: CmaState, params: CmaParams) -> np.ndarray:
    """Sample lambda candidates m + sigma * B D z, z ~ N(0, I); shape (lambda, n)."""
    _refresh_eigen(state, params)
    z = state.rng.standard_normal((params.lam, params.n))
    y = (z * state.eigen_scale) @ state.eigen_basis.T
    return state.m + state.sigma * y


def tell(
    state: CmaState,
    params: CmaParams,
    candidates: np.ndarray,
    fitnesses: Sequence[float],
) -> CmaState:
    """Rank maximizing, then update mean, paths, covariance, and step size."""
    candidates = np.asarray(candidates, dtype=np.float64)
    fitnesses = np.asarray(fitnesses, dtype=np.float64)
    if candidates.shape != (params.lam, params.n):
        raise ValidationError(f"expected {params.lam} candidates of dimension {params.n}")
    if fitnesses.shape != (params.lam,):
        raise ValidationError(f"expected {params.lam} fitness values")
    if not np.isfinite(fitnesses).all():
        raise ValidationError("fitness values must be finite")

    order = np.argsort(-fitnesses, kind="stable")[: params.mu]
    selected = candidates[order]
    y = (selected - state.m) / state.sigma
    y_w = params.weights @ y

    state.m = params.weights @ selected

    norm_p_sigma = float(np.linalg.norm(state.p_sigma))  # previous generation's path
    stalled = norm_p_sigma < 1.5 * math.sqrt(params.n)
    c_c, c_s = params.c_c, params.c_sigma
    state.p_c = (1.0 - c_c) * state.p_c + (
        math.sqrt(1.0 - (1.0 - c_c) ** 2) * math.sqrt(params.mu_w) * y_w if stalled else 0.0
    )

    # C^(-1/2) y_w through the cached eigendecomposition
    basis, scale = state.eigen_basis, state.eigen_scale
    if params.diagonal:
        whitened = y_w / scale
    else:
        whitened = basis @ ((basis.T @ y_w) / scale)
    state.p_sigma = (1.0 - c_s) * state.p_sigma + math.sqrt(1.0 - (1.0 - c_s) ** 2) * math.sqrt(
        params.mu_w
    ) * whitened

    rank_mu = (y.T * params.weights) @ y
    updated = (
        (1.0 - params.c_1 - params.c_mu) * state.C
        + params.c_1 * np.outer(state.p_c, state.p_c)
        + params.c_mu * rank_mu
    )
    if params.diagonal:
        updated = np.diag(np.diag(updated))
    state.C = (updated + updated.T) / 2.0

    state.sigma *= math.exp(
        (c_s / params.d_sigma) * (float(np.linalg.norm(state.p_sigma)) / params.chi_n - 1.0)
    )
    state.g += 1
    return state


@dataclass(frozen=True)
class TracePoint:
    """One generation of the score trace: best is the best-so-far fitness."""

    generation: int
    best: float
    mean: float
    sigma: float


@dataclass
class OptimizeResult:
    mean: np.ndarray
    best: np.ndarray
    best_score: float
    trace: list[TracePoint] = field(default_factory=list)
    evaluations: int = 0
    repair_count: int = 0


def optimize(
    fitness: Callable[[np.ndarray], float],
    params: CmaParams,
    m0: Sequence[float],
    map_fn: Callable[[Callable, Iterable], Iterable] | None = None,
) -> OptimizeResult:
    """Run ask/evaluate/tell until the evaluation budget is spent.

    The returned ``mean`` is the final distribution mean (the result mesh);
    ``best`` is the best-ever evaluated candidate. ``map_fn`` lets callers
    fan the lambda evaluations out to a pool; results are reassociated with
    candidates by position, so any order-preserving map is safe.
    """
    if params.max_evals < params.lam:
        raise ValidationError("evaluation budget must cover at least one generation")
    run_map = map_fn if map_fn is not None else map
    state = init(params, m0)
    result = OptimizeResult(
        mean=state.m.copy(), best=state.m.copy(), best_score=-math.inf
    )
    generations = math.ceil(params.max_evals / params.lam)
    for _ in range(generations):
        candidates = ask(state, params)
        try:
            scores = np.fromiter(
                run_map(fitness, candidates), dtype=np.float64, count=params.lam
            )
        except SpeckleForgeError:
            raise
        except Exception as exc:
            raise SpeckleForgeError(
                f"fitness evaluation failed at generation {state.g}: {exc}"
            ) from exc
        result.evaluations += params.lam
        top = int(np.argmax(scores))
        if scores[top] > result.best_score:
            result.best_score = float(scores[top])
            result.best = candidates[top].copy()
        tell(state, params, candidates, scores)
        result.trace.append(
            TracePoint(state.g, result.best_score, float(scores.mean()), state.sigma)
        )
    result.mean = state.m.copy()
    result.repair_count = state.repair_count
    return result


def write_trace_csv(trace: Sequence[TracePoint], path: str | Path) -> None:
    """Emit the per-generation score trace as CSV (generation, best, mean, sigma)."""
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow(["generation", "best", "mean", "sigma"])
    for point in trace:
        writer.writerow(
            [point.generation, f"{point.best:.17g}", f"{point.mean:.17g}", f"{point.sigma:.17g}"]
        )
    atomic_write_text(path, buffer.getvalue())


def read_trace_csv(path: str | Path) -> list[TracePoint]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return [
        TracePoint(int(r["generation"]), float(r["best"]), float(r["mean"]), float(r["sigma"]))
        for r in rows
    ]
