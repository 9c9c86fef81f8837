"""Analytic benchmark objectives with clamped gradients.

Each objective carries its minimizer and curvature metadata so simulations
can report distance-to-optimum and check the contraction condition.  Raw
gradients are rescaled onto a norm ball of radius ``grad_bound``; inside
``clamp_free_radius`` of the minimizer the clamp is inactive and the
gradient is exact.
"""

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .errors import InvalidParameterError

DEFAULT_GRAD_BOUND = 1e3


def clamp_gradient(raw, bound):
    """Rescale ``raw`` onto the ball of radius ``bound`` if it sticks out.

    Direction is preserved; vectors already inside the ball pass through
    unchanged.
    """
    if bound <= 0:
        raise InvalidParameterError(f"gradient bound must be positive, got {bound}")
    raw = np.asarray(raw, dtype=float)
    norm = float(np.linalg.norm(raw))
    if norm <= bound:
        return raw
    return raw * (bound / norm)


def _clamp_rows(grads, bound):
    # Row-wise version of clamp_gradient for batched evaluation.
    norms = np.linalg.norm(grads, axis=1)
    factor = np.where(norms > bound, bound / np.maximum(norms, 1e-300), 1.0)
    return grads * factor[:, None]


@dataclass(frozen=True)
class Objective:
    """A differentiable loss with optional optimum metadata.

    ``eval``/``grad`` act on a single parameter vector; ``eval_many`` and
    ``grad_many`` act on an (n, dim) batch and exist so the particle loop
    stays vectorized.
    """

    dim: int
    eval: Callable[[np.ndarray], float]
    grad: Callable[[np.ndarray], np.ndarray]
    minimizer: Optional[np.ndarray] = None
    min_value: Optional[float] = None
    grad_bound: float = DEFAULT_GRAD_BOUND
    grad_lipschitz: Optional[float] = None
    clamp_free_radius: Optional[float] = None
    name: str = ""
    eval_many: Optional[Callable[[np.ndarray], np.ndarray]] = field(default=None, repr=False)
    grad_many: Optional[Callable[[np.ndarray], np.ndarray]] = field(default=None, repr=False)

    def losses(self, positions):
        """Evaluate on every row of an (n, dim) array."""
        positions = np.asarray(positions, dtype=float)
        if self.eval_many is not None:
            return self.eval_many(positions)
        return np.array([self.eval(p) for p in positions])

    def gradients(self, positions):
        """Clamped gradient at every row of an (n, dim) array."""
        positions = np.asarray(positions, dtype=float)
        if self.grad_many is not None:
            return self.grad_many(positions)
        return np.array([self.grad(p) for p in positions])


def _check_center(dim, center):
    if dim < 1:
        raise InvalidParameterError(f"dim must be >= 1, got {dim}")
    center = np.asarray(center, dtype=float)
    if center.shape != (dim,):
        raise InvalidParameterError(
            f"center shape {center.shape} does not match dim {dim}"
        )
    return center


def make_quadratic(dim, center, scale=1.0, grad_bound=DEFAULT_GRAD_BOUND):
    """Isotropic quadratic well  scale * ||theta - center||^2."""
    center = _check_center(dim, center)
    if scale <= 0:
        raise InvalidParameterError(f"scale must be positive, got {scale}")

    def _eval(theta):
        d = np.asarray(theta, dtype=float) - center
        return float(scale * np.dot(d, d))

    def _grad(theta):
        d = np.asarray(theta, dtype=float) - center
        return clamp_gradient(2.0 * scale * d, grad_bound)

    def _eval_many(positions):
        d = positions - center
        return scale * np.einsum("ij,ij->i", d, d)

    def _grad_many(positions):
        return _clamp_rows(2.0 * scale * (positions - center), grad_bound)

    return Objective(
        dim=dim,
        eval=_eval,
        grad=_grad,
        minimizer=center,
        min_value=0.0,
        grad_bound=grad_bound,
        grad_lipschitz=2.0 * scale,
        clamp_free_radius=grad_bound / (2.0 * scale),
        name=f"quadratic(scale={scale})",
        eval_many=_eval_many,
        grad_many=_grad_many,
    )


def make_rastrigin(dim, center, grad_bound=DEFAULT_GRAD_BOUND):
    """Shifted Rastrigin: 10*dim + sum((x_i)^2 - 10*cos(2*pi*x_i)), x = theta - center."""
    center = _check_center(dim, center)

    def _eval(theta):
        x = np.asarray(theta, dtype=float) - center
        return float(10.0 * dim + np.sum(x * x - 10.0 * np.cos(2.0 * np.pi * x)))

    def _grad(theta):
        x = np.asarray(theta, dtype=float) - center
        return clamp_gradient(2.0 * x + 20.0 * np.pi * np.sin(2.0 * np.pi * x), grad_bound)

    def _eval_many(positions):
        x = positions - center
        return 10.0 * dim + np.sum(x * x - 10.0 * np.cos(2.0 * np.pi * x), axis=1)

    def _grad_many(positions):
        x = positions - center
        return _clamp_rows(2.0 * x + 20.0 * np.pi * np.sin(2.0 * np.pi * x), grad_bound)

    # Per coordinate |g_i| <= 2r + 20*pi, so staying within this radius of the
    # minimizer keeps the full gradient norm under grad_bound.
    radius = max(0.0, (grad_bound / np.sqrt(dim) - 20.0 * np.pi) / 2.0)
    return Objective(
        dim=dim,
        eval=_eval,
        grad=_grad,
        minimizer=center,
        min_value=0.0,
        grad_bound=grad_bound,
        grad_lipschitz=2.0 + 40.0 * np.pi**2,
        clamp_free_radius=radius,
        name="rastrigin",
        eval_many=_eval_many,
        grad_many=_grad_many,
    )


@dataclass(frozen=True)
class BenchmarkProblem:
    """A family of per-cluster objectives over a shared parameter space."""

    objectives: tuple

    def __post_init__(self):
        if len(self.objectives) < 1:
            raise InvalidParameterError("need at least one objective")
        dims = {o.dim for o in self.objectives}
        if len(dims) != 1:
            raise InvalidParameterError(f"objectives disagree on dim: {dims}")
        for i, o in enumerate(self.objectives):
            if o.minimizer is None:
                raise InvalidParameterError(f"objective {i} has no minimizer metadata")

    @property
    def n_clusters(self):
        return len(self.objectives)

    @property
    def dim(self):
        return self.objectives[0].dim

    @property
    def minimizers(self):
        return np.stack([o.minimizer for o in self.objectives])

    @property
    def separation(self):
        """Smallest pairwise distance between cluster minimizers."""
        mins = self.minimizers
        if len(mins) == 1:
            return 0.0
        dists = [
            float(np.linalg.norm(mins[i] - mins[j]))
            for i in range(len(mins))
            for j in range(i + 1, len(mins))
        ]
        return min(dists)

    @property
    def max_grad_lipschitz(self):
        vals = [o.grad_lipschitz for o in self.objectives if o.grad_lipschitz is not None]
        return max(vals) if vals else None


def make_well_problem(kind, dim, offset=2.0, scale=1.0, grad_bound=DEFAULT_GRAD_BOUND):
    """Two-cluster benchmark with minimizers at +-offset * ones(dim)."""
    centers = [offset * np.ones(dim), -offset * np.ones(dim)]
    return make_centers_problem(kind, dim, centers, scale=scale, grad_bound=grad_bound)


def make_centers_problem(kind, dim, centers, scale=1.0, grad_bound=DEFAULT_GRAD_BOUND):
    """Benchmark with one objective of the given kind per center."""
    makers = {
        "quadratic": lambda c: make_quadratic(dim, c, scale=scale, grad_bound=grad_bound),
        "rastrigin": lambda c: make_rastrigin(dim, c, grad_bound=grad_bound),
    }
    if kind not in makers:
        raise InvalidParameterError(f"unknown objective kind {kind!r}")
    return BenchmarkProblem(objectives=tuple(makers[kind](c) for c in centers))
