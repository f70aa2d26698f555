"""Per-particle objectives F and the solvers for F(X) - phi = |xi|^2 / 2."""

from __future__ import annotations

import logging
from collections.abc import Callable, Iterable
from dataclasses import dataclass, field
from typing import Any

import numpy as np
from scipy import linalg, optimize

from implicitfilter.constants import (
    FD_STEP,
    GRADIENT_TOL,
    MAX_SOLVER_ITER,
    MIN_SCAN_HALF_WIDTH,
    MIN_SCAN_POINTS,
    RESIDUAL_TOL_1D,
    RESIDUAL_TOL_MULTI,
    STATIC_OBS_NOISE,
    STATIC_SIGMA,
    SUBSTITUTE_BARRIER_MARGIN,
    SUBSTITUTE_HALF_WIDTH,
    SUBSTITUTE_POINTS,
)
from implicitfilter.errors import (
    DimensionMismatch,
    InvalidInput,
    MinimizationFailure,
    NonConvergence,
    NotUShaped,
    SingularJacobian,
)
from implicitfilter.sde_model import (
    LOG_2PI,
    ObservationModel,
    SdeModel,
    cubic_observation,
    linear_observation,
    static_model,
)

logger = logging.getLogger("implicitfilter")

ArrayFn = Callable[[np.ndarray], np.ndarray]

_MAX_EXPANSIONS = 64
_MINIMUM_CANDIDATES = 4


def default_tolerance(dim: int) -> float:
    """Residual tolerance for an objective of dimension ``dim``."""
    return RESIDUAL_TOL_1D if dim == 1 else RESIDUAL_TOL_MULTI


# ---------------------------------------------------------------------------
# Objectives
# ---------------------------------------------------------------------------
@dataclass(frozen=True, eq=False)
class GaussianTerm:
    """One factor exp(-r(X)^T W r(X) / 2) of exp(-F), W diagonal.

    ``residual`` maps (..., d) to (..., r), ``jacobian`` maps (..., d) to
    (..., r, d), and ``precision`` is the diagonal of W.
    """

    residual: ArrayFn
    jacobian: ArrayFn
    precision: np.ndarray

    def value(self, x: np.ndarray) -> np.ndarray:
        r = self.residual(x)
        return 0.5 * np.sum(self.precision * r**2, axis=-1)

    def gradient(self, x: np.ndarray) -> np.ndarray:
        r = self.residual(x)
        return np.einsum("...rd,...r->...d", self.jacobian(x), self.precision * r)


@dataclass(frozen=True, eq=False)
class SampleObjective:
    """F(X) = -log of the unnormalized target of one particle.

    Normalizing constants are left out of F and kept in ``log_normalizer`` so
    that ``F(X) + log_normalizer`` is the exact negative log density. Objectives
    built from :class:`GaussianTerm` factors can be linearized by Algorithm A;
    ``linear`` marks the case where every residual is affine and F is quadratic.
    """

    dim: int
    eval_fn: ArrayFn
    grad_fn: ArrayFn
    start: np.ndarray
    terms: tuple[GaussianTerm, ...] = ()
    log_normalizer: float = 0.0
    separable: bool = False
    linear: bool = False
    guesses: tuple[np.ndarray, ...] = ()
    context: dict[str, Any] = field(default_factory=dict)

    @classmethod
    def from_terms(
        cls, terms: Iterable[GaussianTerm], start: np.ndarray, **kwargs: Any
    ) -> SampleObjective:
        terms = tuple(terms)

        def eval_fn(x: np.ndarray) -> np.ndarray:
            return sum(term.value(x) for term in terms)

        def grad_fn(x: np.ndarray) -> np.ndarray:
            return sum(term.gradient(x) for term in terms)

        start = np.atleast_1d(np.asarray(start, dtype=float))
        return cls(
            dim=start.size, eval_fn=eval_fn, grad_fn=grad_fn, start=start, terms=terms, **kwargs
        )

    # ------------------------------------------------------------------
    # Public API
    # ------------------------------------------------------------------
    def eval(self, x: np.ndarray) -> float | np.ndarray:
        """F at ``x`` of shape (m,) (returns a float) or (..., m)."""
        x = self._checked(x)
        value = self.eval_fn(x)
        return float(value) if x.ndim == 1 else np.asarray(value, dtype=float)

    def grad(self, x: np.ndarray) -> np.ndarray:
        x = self._checked(x)
        return np.asarray(self.grad_fn(x), dtype=float)

    def second_derivative(self, x: float, step: float = FD_STEP) -> float:
        """F'' of a one-dimensional objective by central differences of the gradient."""
        h = step * max(1.0, abs(x))
        g = self.grad(np.array([[x + h], [x - h]]))[:, 0]
        return float((g[0] - g[1]) / (2.0 * h))

    def hessian(self, x: np.ndarray, step: float = FD_STEP) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        hess = np.empty((self.dim, self.dim))
        for j in range(self.dim):
            offset = np.zeros(self.dim)
            offset[j] = step * max(1.0, abs(x[j]))
            hess[:, j] = (self.grad(x + offset) - self.grad(x - offset)) / (2.0 * offset[j])
        return 0.5 * (hess + hess.T)

    def slice(self, axis: int, base: np.ndarray) -> SampleObjective:
        """F restricted to component ``axis`` with the others held at ``base``."""
        base = np.asarray(base, dtype=float).copy()
        if base.shape != (self.dim,):
            raise DimensionMismatch(f"base has shape {base.shape}, expected ({self.dim},)")

        def embed(x: np.ndarray) -> np.ndarray:
            full = np.broadcast_to(base, x.shape[:-1] + base.shape).copy()
            full[..., axis] = x[..., 0]
            return full

        return SampleObjective(
            dim=1,
            eval_fn=lambda x: self.eval_fn(embed(x)),
            grad_fn=lambda x: self.grad_fn(embed(x))[..., axis : axis + 1],
            start=base[axis : axis + 1],
            separable=True,
            linear=self.linear,
            guesses=tuple(g[axis : axis + 1] for g in self.guesses),
            context={"slice_axis": axis},
        )

    # ------------------------------------------------------------------
    # Private
    # ------------------------------------------------------------------
    def _checked(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if x.ndim == 0 or x.shape[-1] != self.dim:
            raise DimensionMismatch(f"expected last dimension {self.dim}, got shape {x.shape}")
        return x


def _identity_jacobian(dim: int) -> ArrayFn:
    eye = np.eye(dim)
    return lambda x: np.broadcast_to(eye, np.shape(x)[:-1] + (dim, dim))


def _prior_term(mean: np.ndarray, variance: np.ndarray) -> GaussianTerm:
    return GaussianTerm(
        residual=lambda x: x - mean,
        jacobian=_identity_jacobian(mean.size),
        precision=1.0 / variance,
    )


def _observation_term(
    obs: ObservationModel, b: np.ndarray, select: slice | None = None
) -> GaussianTerm:
    """Observation factor on the block ``select`` of a (possibly stacked) state."""
    if select is None:
        return GaussianTerm(
            residual=lambda x: obs.h(x) - b, jacobian=obs.h_jacobian, precision=obs.precision
        )

    def jacobian(x: np.ndarray) -> np.ndarray:
        jac = np.zeros(x.shape[:-1] + (obs.obs_dimension, x.shape[-1]))
        jac[..., select] = obs.h_jacobian(x[..., select])
        return jac

    return GaussianTerm(
        residual=lambda x: obs.h(x[..., select]) - b, jacobian=jacobian, precision=obs.precision
    )


def _checked_observation(obs: ObservationModel, b: np.ndarray | None) -> np.ndarray | None:
    if b is None:
        return None
    b = np.atleast_1d(np.asarray(b, dtype=float))
    if b.shape != (obs.obs_dimension,):
        raise DimensionMismatch(f"observation has shape {b.shape}, expected ({obs.obs_dimension},)")
    return b


def _preimage_guess(
    obs: ObservationModel, b: np.ndarray | None, around: np.ndarray
) -> tuple[np.ndarray, ...]:
    if b is None or obs.h_inverse is None:
        return ()
    guess = np.array(around, dtype=float)
    guess[: obs.obs_dimension] = obs.h_inverse(b)
    return (guess,)


def _observation_normalizer(obs: ObservationModel) -> float:
    return 0.5 * float(np.sum(np.log(obs.noise_cov) + LOG_2PI))


def _transition_normalizer(variance: np.ndarray) -> float:
    return 0.5 * float(np.sum(np.log(variance) + LOG_2PI))


def build_objective(
    model: SdeModel,
    obs: ObservationModel,
    x_prev: np.ndarray,
    b_next: np.ndarray | None,
    t: float,
) -> SampleObjective:
    """F(X) = -log p(X | x_prev) - log p(b_next | X), constants moved to ``log_normalizer``.

    ``b_next=None`` leaves only the transition factor (a step without data).
    """
    x_prev = np.atleast_1d(np.asarray(x_prev, dtype=float))
    if x_prev.shape != (model.dimension,) or obs.state_dimension != model.dimension:
        raise DimensionMismatch(
            f"x_prev has shape {x_prev.shape}; model and observation expect ({model.dimension},)"
        )
    b = _checked_observation(obs, b_next)

    mean = model.mean_step(x_prev, t)
    variance = model.increment_variance(x_prev, t)
    terms = [_prior_term(mean, variance)]
    log_normalizer = _transition_normalizer(variance)
    if b is not None:
        terms.append(_observation_term(obs, b))
        log_normalizer += _observation_normalizer(obs)

    return SampleObjective.from_terms(
        terms,
        start=mean,
        log_normalizer=log_normalizer,
        separable=obs.is_diagonal,
        linear=obs.is_linear,
        guesses=_preimage_guess(obs, b, mean),
        context={"x_prev": x_prev, "b_next": b, "t": t},
    )


def build_backward_objective(
    model: SdeModel,
    obs: ObservationModel,
    x_before: np.ndarray,
    x_after: np.ndarray,
    b_mid: np.ndarray | None,
    t_mid: float,
) -> SampleObjective:
    """Objective of a state at ``t_mid`` given both neighbours and its own observation.

    F(X) = |X - mean(x_before)|^2/(2q) + |h(X) - b_mid|^2/(2s) + |x_after - mean(X)|^2/(2q).
    """
    if not model.additive_noise:
        raise InvalidInput("backward objectives need additive noise (state-independent diffusion)")
    x_before = np.atleast_1d(np.asarray(x_before, dtype=float))
    x_after = np.atleast_1d(np.asarray(x_after, dtype=float))
    if x_before.shape != (model.dimension,) or x_after.shape != (model.dimension,):
        raise DimensionMismatch(f"neighbour states must have shape ({model.dimension},)")
    b = _checked_observation(obs, b_mid)

    dt = model.time_step
    mean = model.mean_step(x_before, t_mid - dt)
    variance = model.increment_variance(x_before, t_mid - dt)
    forward_variance = model.increment_variance(x_before, t_mid)
    terms = [_prior_term(mean, variance)]
    log_normalizer = _transition_normalizer(variance) + _transition_normalizer(forward_variance)
    if b is not None:
        terms.append(_observation_term(obs, b))
        log_normalizer += _observation_normalizer(obs)
    terms.append(
        GaussianTerm(
            residual=lambda x: x_after - model.mean_step(x, t_mid),
            jacobian=lambda x: -model.mean_step_jacobian(x, t_mid),
            precision=1.0 / forward_variance,
        )
    )

    return SampleObjective.from_terms(
        terms,
        start=mean,
        log_normalizer=log_normalizer,
        separable=obs.is_diagonal,
        linear=obs.is_linear and model.affine_drift,
        guesses=(x_after, *_preimage_guess(obs, b, mean)),
        context={"x_before": x_before, "x_after": x_after, "b_next": b, "t": t_mid},
    )


def _chain_term(model: SdeModel, j: int, t_j: float, precision: np.ndarray) -> GaussianTerm:
    """Transition from block j-1 to block j of a stacked path."""
    m = model.dimension
    prev_block, block = slice((j - 1) * m, j * m), slice(j * m, (j + 1) * m)

    def residual(x: np.ndarray) -> np.ndarray:
        return x[..., block] - model.mean_step(x[..., prev_block], t_j)

    def jacobian(x: np.ndarray) -> np.ndarray:
        jac = np.zeros(x.shape[:-1] + (m, x.shape[-1]))
        jac[..., block] = np.eye(m)
        jac[..., prev_block] = -model.mean_step_jacobian(x[..., prev_block], t_j)
        return jac

    return GaussianTerm(residual=residual, jacobian=jacobian, precision=precision)


def build_joint_objective(
    model: SdeModel,
    obs: ObservationModel,
    x_prev: np.ndarray,
    b: np.ndarray,
    gap: int,
    t: float,
) -> SampleObjective:
    """Objective over the stacked path X^{n+1}, ..., X^{n+gap}; only the last state is observed."""
    if gap < 1:
        raise InvalidInput("gap must be >= 1")
    if not model.additive_noise:
        raise InvalidInput("joint objectives need additive noise (state-independent diffusion)")
    x_prev = np.atleast_1d(np.asarray(x_prev, dtype=float))
    if x_prev.shape != (model.dimension,):
        raise DimensionMismatch(f"x_prev has shape {x_prev.shape}, expected ({model.dimension},)")
    b = _checked_observation(obs, b)

    m, dt = model.dimension, model.time_step
    total = gap * m
    variance = model.increment_variance(x_prev, t)
    precision = 1.0 / variance

    first = slice(0, m)

    def first_jacobian(x: np.ndarray) -> np.ndarray:
        jac = np.zeros(x.shape[:-1] + (m, total))
        jac[..., first] = np.eye(m)
        return jac

    mean = model.mean_step(x_prev, t)
    terms = [
        GaussianTerm(
            residual=lambda x: x[..., first] - mean, jacobian=first_jacobian, precision=precision
        )
    ]
    path = [mean]
    for j in range(1, gap):
        terms.append(_chain_term(model, j, t + j * dt, precision))
        path.append(model.mean_step(path[-1], t + j * dt))
    terms.append(_observation_term(obs, b, slice((gap - 1) * m, total)))

    start = np.concatenate(path)
    return SampleObjective.from_terms(
        terms,
        start=start,
        log_normalizer=gap * _transition_normalizer(variance) + _observation_normalizer(obs),
        separable=False,
        linear=obs.is_linear and model.affine_drift,
        context={"x_prev": x_prev, "b_next": b, "t": t, "gap": gap},
    )


def static_objective(
    observation: str,
    b: float,
    sigma: float = STATIC_SIGMA,
    s: float = STATIC_OBS_NOISE,
) -> SampleObjective:
    """F(x) = x^2/(2 sigma) + (h(x) - b)^2/(2 s) with h linear or cubic."""
    factories = {"linear": linear_observation, "cubic": cubic_observation}
    if observation not in factories:
        raise InvalidInput(
            f"unknown observation {observation!r}; expected one of {sorted(factories)}"
        )
    obs = factories[observation](1, 1, s)
    return build_objective(static_model(sigma), obs, np.zeros(1), np.array([b]), 0.0)


# ---------------------------------------------------------------------------
# Solutions
# ---------------------------------------------------------------------------
@dataclass(frozen=True, eq=False)
class ImplicitSolution:
    """A solved sample X with its additive factor phi and log Jacobian."""

    position: np.ndarray
    phi: float
    log_jacobian: float
    residual: float
    iterations: int
    xi: np.ndarray

    @property
    def log_weight(self) -> float:
        """log(exp(-phi) J), before the objective's ``log_normalizer``."""
        return -self.phi + self.log_jacobian


@dataclass(frozen=True, eq=False)
class BatchSolution:
    """Algorithm B applied to many reference draws of one scalar objective."""

    positions: np.ndarray
    phi: np.ndarray
    log_jacobian: np.ndarray
    residual: np.ndarray
    iterations: np.ndarray

    @property
    def log_weights(self) -> np.ndarray:
        return -self.phi + self.log_jacobian


@dataclass(frozen=True, eq=False)
class GaussianBatch:
    positions: np.ndarray
    phi: np.ndarray
    log_jacobian: float


@dataclass(frozen=True, eq=False)
class QuadraticForm:
    """F(X) = offset + (X - center)^T matrix (X - center) / 2."""

    center: np.ndarray
    matrix: np.ndarray
    offset: float

    def __post_init__(self) -> None:
        center = np.atleast_1d(np.asarray(self.center, dtype=float))
        matrix = np.atleast_2d(np.asarray(self.matrix, dtype=float))
        if matrix.shape != (center.size, center.size):
            raise DimensionMismatch(
                f"matrix has shape {matrix.shape}, expected {(center.size,) * 2}"
            )
        if np.max(np.abs(matrix - matrix.T)) > 1e-12 * max(1.0, float(np.max(np.abs(matrix)))):
            raise InvalidInput("quadratic form matrix is not symmetric")
        try:
            linalg.cholesky(matrix, lower=False)
        except linalg.LinAlgError as exc:
            raise InvalidInput("quadratic form matrix is not positive definite") from exc
        object.__setattr__(self, "center", center)
        object.__setattr__(self, "matrix", matrix)

    @property
    def trace_mean(self) -> float:
        """trace(A) / m."""
        return float(np.trace(self.matrix)) / self.center.size

    def eval(self, x: np.ndarray) -> float:
        y = np.asarray(x, dtype=float) - self.center
        return self.offset + 0.5 * float(y @ self.matrix @ y)


@dataclass(frozen=True, eq=False)
class _Linearization:
    center: np.ndarray
    hessian: np.ndarray
    chol: np.ndarray
    phi: float


def _linearize(obj: SampleObjective, x: np.ndarray) -> _Linearization:
    """Complete the square of F with every residual linearized about ``x``."""
    m = obj.dim
    hessian = np.zeros((m, m))
    rhs = np.zeros(m)
    pieces = []
    for term in obj.terms:
        r = np.atleast_1d(term.residual(x))
        jac = np.atleast_2d(term.jacobian(x))
        w = term.precision
        c = jac @ x - r
        hessian += jac.T @ (w[:, None] * jac)
        rhs += jac.T @ (w * c)
        pieces.append((jac, c, w))
    try:
        chol = linalg.cholesky(hessian, lower=False)
    except linalg.LinAlgError as exc:
        raise NonConvergence("linearized objective is not positive definite") from exc
    center = linalg.cho_solve((chol, False), rhs)
    phi = sum(0.5 * float(np.sum(w * (jac @ center - c) ** 2)) for jac, c, w in pieces)
    return _Linearization(center=center, hessian=hessian, chol=chol, phi=phi)


def quadratic_form(obj: SampleObjective) -> QuadraticForm:
    """The exact quadratic form of an objective whose residuals are all affine."""
    if not (obj.linear and obj.terms):
        raise InvalidInput("quadratic_form needs a linear objective built from Gaussian terms")
    lin = _linearize(obj, obj.start)
    matrix = 0.5 * (lin.hessian + lin.hessian.T)
    return QuadraticForm(center=lin.center, matrix=matrix, offset=lin.phi)


# ---------------------------------------------------------------------------
# Algorithm A: iterated linearization
# ---------------------------------------------------------------------------
def solve_algorithm_a(
    obj: SampleObjective,
    xi: np.ndarray,
    tol: float = RESIDUAL_TOL_1D,
    max_iter: int = MAX_SOLVER_ITER,
    start: np.ndarray | None = None,
    compute_jacobian: bool = True,
) -> ImplicitSolution:
    """Solve F(X) - phi = |xi|^2/2 by repeatedly completing the square of the linearized F.

    Each pass linearizes the residuals about the current iterate, writes F as
    (X - a)^T H (X - a)/2 + phi and moves to X = a + R^{-1} xi with H = R^T R.
    Linear residuals converge in one pass and have the constant Jacobian
    det(R)^{-1}; otherwise the Jacobian is taken by finite differences.

    Raises:
        NonConvergence: no fixed point within ``max_iter`` passes, or the
            linearized Hessian lost definiteness (F is likely not convex).
    """
    if not obj.terms:
        raise InvalidInput("Algorithm A needs an objective built from Gaussian terms")
    xi = np.atleast_1d(np.asarray(xi, dtype=float))
    if xi.shape != (obj.dim,):
        raise DimensionMismatch(f"xi has shape {xi.shape}, expected ({obj.dim},)")

    x = np.array(obj.start if start is None else start, dtype=float)
    half_norm = 0.5 * float(xi @ xi)
    lin = _linearize(obj, x)
    residual = np.inf
    for iteration in range(1, max_iter + 1):
        x = lin.center + linalg.solve_triangular(lin.chol, xi, lower=False)
        lin = _linearize(obj, x)
        residual = abs(obj.eval(x) - lin.phi - half_norm)
        if residual <= tol:
            break
    else:
        raise NonConvergence(
            f"Algorithm A did not converge in {max_iter} iterations (residual {residual:.3e})"
        )

    if obj.linear:
        log_jacobian = -float(np.sum(np.log(np.diag(lin.chol))))
    elif compute_jacobian:

        def resolve(o: SampleObjective, e: np.ndarray, warm: np.ndarray) -> ImplicitSolution:
            return solve_algorithm_a(o, e, tol, max_iter, start=warm, compute_jacobian=False)

        log_jacobian = float(np.log(jacobian_numeric(resolve, obj, xi, x)))
    else:
        log_jacobian = float("nan")

    return ImplicitSolution(
        position=x,
        phi=lin.phi,
        log_jacobian=log_jacobian,
        residual=residual,
        iterations=iteration,
        xi=xi,
    )


def linear_gaussian_proposal(
    mean: np.ndarray,
    variance: np.ndarray,
    obs_matrix: np.ndarray,
    obs_cov: np.ndarray,
    b: np.ndarray,
    xi: np.ndarray,
) -> GaussianBatch:
    """Closed-form implicit samples for all particles of a linear-Gaussian step.

    ``mean`` (M, m) holds the Euler means, ``variance`` (m,) the shared increment
    variance. Per particle phi = (b - H mu)^T (H Q H^T + R)^{-1} (b - H mu) / 2
    and the Jacobian is the same for every particle.
    """
    mean = np.atleast_2d(np.asarray(mean, dtype=float))
    xi = np.atleast_2d(np.asarray(xi, dtype=float))
    variance = np.asarray(variance, dtype=float)
    obs_matrix = np.atleast_2d(np.asarray(obs_matrix, dtype=float))
    obs_cov = np.atleast_1d(np.asarray(obs_cov, dtype=float))
    b = np.atleast_1d(np.asarray(b, dtype=float))
    if xi.shape != mean.shape:
        raise DimensionMismatch(f"xi has shape {xi.shape}, expected {mean.shape}")

    precision = np.diag(1.0 / variance) + obs_matrix.T @ (obs_matrix / obs_cov[:, None])
    chol = linalg.cholesky(precision, lower=False)
    rhs = mean / variance + obs_matrix.T @ (b / obs_cov)
    center = linalg.cho_solve((chol, False), rhs.T).T
    positions = center + linalg.solve_triangular(chol, xi.T, lower=False).T

    innovation = b - mean @ obs_matrix.T
    innovation_cov = obs_matrix @ (variance[:, None] * obs_matrix.T) + np.diag(obs_cov)
    solved = linalg.cho_solve(linalg.cho_factor(innovation_cov), innovation.T).T
    phi = 0.5 * np.sum(innovation * solved, axis=1)
    log_jacobian = -float(np.sum(np.log(np.diag(chol))))
    return GaussianBatch(positions=positions, phi=phi, log_jacobian=log_jacobian)


# ---------------------------------------------------------------------------
# Minimization and U-shaped substitutes
# ---------------------------------------------------------------------------
def find_minimum(
    obj: SampleObjective,
    half_width: float = MIN_SCAN_HALF_WIDTH,
    n_points: int = MIN_SCAN_POINTS,
) -> tuple[np.ndarray, float]:
    """Absolute minimum (z, F(z)) of ``obj``.

    One-dimensional objectives are scanned on a grid around the start point and
    the guesses; every interior local minimum is refined by golden-section search
    and polished with Newton steps. Higher dimensions use BFGS from each start.

    Raises:
        MinimizationFailure: the grid minimum sits on the scan boundary.
    """
    if obj.dim == 1:
        z, value = _find_minimum_1d(obj, half_width, n_points)
    else:
        z, value = _find_minimum_nd(obj)
    gradient = float(np.max(np.abs(obj.grad(z))))
    if gradient >= GRADIENT_TOL:
        logger.debug("Minimum polish stopped at |grad|=%.3e", gradient)
    return z, value


def _find_minimum_1d(
    obj: SampleObjective, half_width: float, n_points: int
) -> tuple[np.ndarray, float]:
    centers = [float(obj.start[0]), *(float(g[0]) for g in obj.guesses)]
    lo, hi = min(centers) - half_width, max(centers) + half_width
    n = max(n_points, int(n_points * (hi - lo) / (2.0 * half_width)))
    grid = np.linspace(lo, hi, n)
    values = obj.eval(grid[:, None])
    values = np.where(np.isfinite(values), values, np.inf)

    best = int(np.argmin(values))
    if best in (0, n - 1):
        raise MinimizationFailure(f"minimum of F lies on the scan boundary [{lo:.3g}, {hi:.3g}]")

    inner = values[1:-1]
    local = np.flatnonzero((inner <= values[:-2]) & (inner <= values[2:])) + 1
    local = local[np.argsort(values[local])][:_MINIMUM_CANDIDATES]

    z, z_value = grid[best], float(values[best])
    for i in local:
        x = _refine_1d(obj, grid[i - 1], grid[i], grid[i + 1])
        value = obj.eval(np.array([x]))
        if value < z_value:
            z, z_value = x, value
    return np.array([z]), float(z_value)


def _refine_1d(obj: SampleObjective, a: float, b: float, c: float) -> float:
    def f(s: float) -> float:
        return obj.eval(np.array([s]))

    try:
        x = float(optimize.minimize_scalar(f, bracket=(a, b, c), method="golden").x)
    except ValueError:
        # flat neighbours do not form a strict bracket
        x = float(optimize.minimize_scalar(f, bounds=(a, c), method="bounded").x)

    for _ in range(MAX_SOLVER_ITER):
        g = float(obj.grad(np.array([x]))[0])
        if abs(g) < GRADIENT_TOL:
            break
        curvature = obj.second_derivative(x)
        if not curvature > 0:
            break
        step = x - g / curvature
        if not a <= step <= c:
            break
        x = step
    return x


def _find_minimum_nd(obj: SampleObjective) -> tuple[np.ndarray, float]:
    best: tuple[np.ndarray, float] | None = None
    for start in (obj.start, *obj.guesses):
        result = optimize.minimize(
            obj.eval,
            start,
            jac=obj.grad,
            method="BFGS",
            options={"gtol": GRADIENT_TOL, "maxiter": 1000},
        )
        x = _newton_polish(obj, np.asarray(result.x, dtype=float))
        value = obj.eval(x)
        if np.isfinite(value) and (best is None or value < best[1]):
            best = (x, value)
    if best is None:
        raise MinimizationFailure("no start point reached a finite minimum")
    return best


def _newton_polish(obj: SampleObjective, x: np.ndarray) -> np.ndarray:
    for _ in range(MAX_SOLVER_ITER):
        g = obj.grad(x)
        if np.max(np.abs(g)) < GRADIENT_TOL:
            break
        try:
            factor = linalg.cho_factor(obj.hessian(x))
        except linalg.LinAlgError:
            break
        x = x - linalg.cho_solve(factor, g)
    return x


@dataclass(frozen=True)
class _Chord:
    side: float
    anchor: float
    anchor_value: float


@dataclass(frozen=True, eq=False)
class UShapedSubstitute:
    """F0: F with the secondary structure on each side of z replaced by a chord.

    Between z and an anchor point x_a beyond the barrier, F0 is the straight line
    from (z, F(z)) to (x_a, F(x_a)); elsewhere F0 = F. The functions act on 1-D
    arrays of scalar positions.
    """

    original: SampleObjective
    min_location: np.ndarray
    min_value: float
    chords: tuple[_Chord, ...] = ()

    @property
    def is_identity(self) -> bool:
        return not self.chords

    def f0_eval(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        out = np.asarray(self.original.eval(x[..., None]), dtype=float)
        for chord in self.chords:
            inside, slope = self._on_chord(chord, x)
            out = np.where(inside, self.min_value + slope * (x - self.min_location[0]), out)
        return out

    def f0_grad(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        out = self.original.grad(x[..., None])[..., 0]
        for chord in self.chords:
            inside, slope = self._on_chord(chord, x)
            out = np.where(inside, slope, out)
        return out

    def as_objective(self) -> SampleObjective:
        return SampleObjective(
            dim=1,
            eval_fn=lambda x: self.f0_eval(x[..., 0]),
            grad_fn=lambda x: self.f0_grad(x[..., 0])[..., None],
            start=self.min_location.copy(),
            separable=True,
            context={"substitute_for": self.original.context},
        )

    def _on_chord(self, chord: _Chord, x: np.ndarray) -> tuple[np.ndarray, float]:
        z = float(self.min_location[0])
        u = chord.side * (x - z)
        inside = (u >= 0.0) & (u < chord.side * (chord.anchor - z))
        slope = (chord.anchor_value - self.min_value) / (chord.anchor - z)
        return inside, slope


def _scalar_view(
    target: SampleObjective | UShapedSubstitute,
) -> tuple[ArrayFn, ArrayFn, SampleObjective]:
    """(F or F0 on 1-D position arrays, its derivative, the original objective)."""
    if isinstance(target, UShapedSubstitute):
        return target.f0_eval, target.f0_grad, target.original
    if target.dim != 1:
        raise DimensionMismatch("scalar solvers need a one-dimensional objective")
    return (lambda x: target.eval(x[:, None])), (lambda x: target.grad(x[:, None])[:, 0]), target


def is_u_shaped(
    target: SampleObjective | UShapedSubstitute,
    z: float,
    half_width: float = SUBSTITUTE_HALF_WIDTH,
    n_points: int = SUBSTITUTE_POINTS,
) -> bool:
    """True when F is strictly increasing outward from ``z`` on both sides of the grid."""
    f, _, _ = _scalar_view(target)
    for side in (-1.0, 1.0):
        values = f(z + side * np.linspace(0.0, half_width, n_points // 2 + 1))
        if not np.all(np.diff(values) > 0):
            return False
    return True


def build_u_substitute(
    obj: SampleObjective,
    minimum: tuple[np.ndarray, float] | None = None,
    half_width: float = SUBSTITUTE_HALF_WIDTH,
    n_points: int = SUBSTITUTE_POINTS,
    margin: float = SUBSTITUTE_BARRIER_MARGIN,
) -> UShapedSubstitute:
    """U-shaped F0 for a one-dimensional F; F0 = F when F is already U-shaped.

    On a side where F stops increasing, the local maximum x_m is located on the
    grid. The anchor is the first point beyond x_m where F reaches
    F(x_m) + margin * (F(x_m) - F(z)) and keeps increasing up to the edge.
    """
    if obj.dim != 1:
        raise DimensionMismatch("U-shaped substitutes are one-dimensional")
    z, z_value = minimum if minimum is not None else find_minimum(obj)
    z0 = float(np.asarray(z)[0])

    def f(x: np.ndarray) -> np.ndarray:
        return obj.eval(x[:, None])

    chords = []
    for side in (-1.0, 1.0):
        xs = z0 + side * np.linspace(0.0, half_width, n_points // 2 + 1)
        values = f(xs)
        rising = np.diff(values) > 0
        if rising.all():
            continue

        peak = values[int(np.argmax(~rising))]
        level = peak + margin * (peak - z_value)
        monotone_from = np.append(np.flip(np.cumprod(np.flip(rising))).astype(bool), True)
        past_peak = np.arange(values.size) > int(np.argmax(~rising))
        candidates = np.flatnonzero(past_peak & (values >= level) & monotone_from)
        if candidates.size == 0:
            logger.warning(
                "No monotone anchor above the barrier within %.1f of z=%.4f; using the scan edge",
                half_width,
                z0,
            )
            j = values.size - 1
            chords.append(_Chord(side, float(xs[j]), float(values[j])))
            continue

        j = int(candidates[0])
        anchor, anchor_value = float(xs[j]), float(values[j])
        if values[j - 1] < level and rising[j - 1]:
            anchor = optimize.brentq(
                lambda s: f(np.array([s]))[0] - level, xs[j - 1], xs[j], xtol=1e-13
            )
            anchor_value = float(f(np.array([anchor]))[0])
        chords.append(_Chord(side, anchor, anchor_value))

    if chords:
        logger.debug("Built U-shaped substitute with %d chord(s) around z=%.4f", len(chords), z0)
    return UShapedSubstitute(
        original=obj, min_location=np.array([z0]), min_value=float(z_value), chords=tuple(chords)
    )


# ---------------------------------------------------------------------------
# Algorithm B: branch-wise safeguarded Newton
# ---------------------------------------------------------------------------
def _second_derivative(df: ArrayFn, z: float) -> float:
    h = FD_STEP * max(1.0, abs(z))
    g = df(np.array([z + h, z - h]))
    return float((g[0] - g[1]) / (2.0 * h))


def _branch_newton(
    f: ArrayFn,
    df: ArrayFn,
    z: float,
    z_value: float,
    xi: np.ndarray,
    tol: float,
    max_iter: int,
    curvature: float,
) -> tuple[np.ndarray, np.ndarray]:
    """Roots of f(X) - z_value = xi^2/2 on the branch sign(X - z) = sign(xi)."""
    x = np.full(xi.shape, z)
    iterations = np.zeros(xi.shape, dtype=int)
    active = xi != 0
    if not active.any():
        return x, iterations

    side = np.sign(xi)
    target = z_value + 0.5 * xi**2
    width = 1.0 / np.sqrt(curvature) if np.isfinite(curvature) and curvature > 0 else 1.0

    # bracket: double outward from z until f passes the target level
    lo = np.full(xi.shape, z)
    hi = z + side * width * np.maximum(np.abs(xi), 1.0)
    f_lo = np.full(xi.shape, z_value)
    f_hi = f(hi)
    for _ in range(_MAX_EXPANSIONS):
        if np.any(active & ~(f_hi > f_lo)):
            raise NotUShaped(f"F does not increase away from its minimum at z={z:.6g}")
        short = active & (f_hi < target)
        if not short.any():
            break
        lo = np.where(short, hi, lo)
        f_lo = np.where(short, f_hi, f_lo)
        hi = np.where(short, z + 2.0 * (hi - z), hi)
        f_hi = np.where(short, f(hi), f_hi)
    else:
        raise NonConvergence("could not bracket the root of F(X) - phi = xi^2/2")

    x = np.where(active, hi, z)
    done = ~active
    for _ in range(max_iter):
        g = f(x) - target
        done |= np.abs(g) <= tol
        if done.all():
            break
        iterations[~done] += 1
        below = g < 0
        lo = np.where(~done & below, x, lo)
        hi = np.where(~done & ~below, x, hi)
        with np.errstate(divide="ignore", invalid="ignore"):
            newton = x - g / df(x)
        inside = np.isfinite(newton) & ((newton - lo) * (newton - hi) < 0)
        proposal = np.where(inside, newton, 0.5 * (lo + hi))
        spacing = 4.0 * np.finfo(float).eps * np.maximum(1.0, np.abs(x))
        stalled = ~done & (np.abs(hi - lo) <= spacing)
        x = np.where(done | stalled, x, proposal)
        done |= stalled
    if not done.all():
        worst = float(np.max(np.abs(f(x) - target)[~done]))
        raise NonConvergence(
            f"Algorithm B did not converge in {max_iter} iterations (residual {worst:.3e})"
        )
    return x, iterations


def _log_jacobian_1d(df: ArrayFn, xi: np.ndarray, x: np.ndarray, curvature: float) -> np.ndarray:
    """log |dX/dxi| = log(|xi| / |F'(X)|), with the limit sqrt(1/F''(z)) at xi = 0."""
    out = np.empty(xi.shape)
    at_min = xi == 0
    if at_min.any():
        if not curvature > 0:
            raise SingularJacobian("F'' vanishes at the minimum")
        out[at_min] = -0.5 * np.log(curvature)
    moving = ~at_min
    if moving.any():
        slope = np.abs(df(x[moving]))
        if np.any(slope == 0):
            raise SingularJacobian("F'(X) = 0 away from the minimum")
        out[moving] = np.log(np.abs(xi[moving])) - np.log(slope)
    return out


def solve_algorithm_b_batch(
    target: SampleObjective | UShapedSubstitute,
    xi: np.ndarray,
    tol: float = RESIDUAL_TOL_1D,
    max_iter: int = MAX_SOLVER_ITER,
    minimum: tuple[np.ndarray, float] | None = None,
) -> BatchSolution:
    """Algorithm B for many scalar reference draws of one objective at once.

    With a substitute, the sample solves F0(X) - min F0 = xi^2/2 and
    phi = min F0 + F(X) - F0(X), so that F(X) - phi = xi^2/2 still holds.
    """
    f, df, base = _scalar_view(target)
    if isinstance(target, UShapedSubstitute):
        z, z_value = float(target.min_location[0]), target.min_value
    else:
        z_arr, z_value = minimum if minimum is not None else find_minimum(target)
        z = float(np.asarray(z_arr)[0])
    xi = np.asarray(xi, dtype=float).ravel()

    curvature = _second_derivative(df, z)
    x, iterations = _branch_newton(f, df, z, z_value, xi, tol, max_iter, curvature)
    f_x = np.asarray(base.eval(x[:, None]), dtype=float)
    phi = z_value + f_x - f(x)
    residual = np.abs(f_x - phi - 0.5 * xi**2)
    log_jacobian = _log_jacobian_1d(df, xi, x, curvature)
    return BatchSolution(
        positions=x, phi=phi, log_jacobian=log_jacobian, residual=residual, iterations=iterations
    )


def solve_algorithm_b(
    target: SampleObjective | UShapedSubstitute,
    xi: np.ndarray | float,
    tol: float = RESIDUAL_TOL_1D,
    max_iter: int = MAX_SOLVER_ITER,
    minimum: tuple[np.ndarray, float] | None = None,
) -> ImplicitSolution:
    """Solve F(X) - phi = |xi|^2/2 on the branch selected by sign(xi).

    Separable multi-dimensional objectives are solved one component at a time
    through slices at the minimum.

    Raises:
        NotUShaped: F decreased while bracketing away from z.
        NonConvergence: Newton with bisection safeguards ran out of iterations.
    """
    xi = np.atleast_1d(np.asarray(xi, dtype=float))
    if isinstance(target, UShapedSubstitute) or target.dim == 1:
        if xi.shape != (1,):
            raise DimensionMismatch(f"xi has shape {xi.shape}, expected (1,)")
        batch = solve_algorithm_b_batch(target, xi, tol, max_iter, minimum)
        return ImplicitSolution(
            position=batch.positions.copy(),
            phi=float(batch.phi[0]),
            log_jacobian=float(batch.log_jacobian[0]),
            residual=float(batch.residual[0]),
            iterations=int(batch.iterations[0]),
            xi=xi,
        )
    return _solve_separable(target, xi, tol, max_iter, minimum=minimum)


@dataclass(frozen=True, eq=False)
class UShapedPlan:
    """Minimum and per-component substitutes shared by all draws of one objective."""

    minimum: tuple[np.ndarray, float]
    substitutes: tuple[UShapedSubstitute, ...]


def plan_u_shaped(obj: SampleObjective) -> UShapedPlan:
    z, z_value = find_minimum(obj)
    if obj.dim == 1:
        substitutes = (build_u_substitute(obj, (z, z_value)),)
    elif obj.separable:
        substitutes = tuple(
            build_u_substitute(obj.slice(i, z), (z[i : i + 1], z_value)) for i in range(obj.dim)
        )
    else:
        raise NonConvergence("no componentwise reduction for a non-separable objective")
    return UShapedPlan(minimum=(z, z_value), substitutes=substitutes)


def _solve_separable(
    obj: SampleObjective,
    xi: np.ndarray,
    tol: float,
    max_iter: int,
    minimum: tuple[np.ndarray, float] | None = None,
    plan: UShapedPlan | None = None,
) -> ImplicitSolution:
    if not obj.separable:
        raise NonConvergence("Algorithm B needs a separable objective in more than one dimension")
    if xi.shape != (obj.dim,):
        raise DimensionMismatch(f"xi has shape {xi.shape}, expected ({obj.dim},)")
    if plan is not None:
        z, z_value = plan.minimum
    else:
        z, z_value = minimum if minimum is not None else find_minimum(obj)

    position = np.empty(obj.dim)
    phi, log_jacobian, iterations = z_value, 0.0, 0
    for i in range(obj.dim):
        component = plan.substitutes[i] if plan is not None else obj.slice(i, z)
        part = solve_algorithm_b_batch(
            component, xi[i : i + 1], tol, max_iter, (z[i : i + 1], z_value)
        )
        position[i] = part.positions[0]
        phi += float(part.phi[0]) - z_value
        log_jacobian += float(part.log_jacobian[0])
        iterations = max(iterations, int(part.iterations[0]))

    residual = abs(obj.eval(position) - phi - 0.5 * float(xi @ xi))
    return ImplicitSolution(
        position=position,
        phi=phi,
        log_jacobian=log_jacobian,
        residual=residual,
        iterations=iterations,
        xi=xi,
    )


def solve_with_plan(
    obj: SampleObjective,
    xi: np.ndarray,
    plan: UShapedPlan,
    tol: float = RESIDUAL_TOL_1D,
    max_iter: int = MAX_SOLVER_ITER,
) -> ImplicitSolution:
    """Algorithm B on the U-shaped substitutes of ``plan``."""
    xi = np.atleast_1d(np.asarray(xi, dtype=float))
    if obj.dim == 1:
        return solve_algorithm_b(plan.substitutes[0], xi, tol, max_iter)
    return _solve_separable(obj, xi, tol, max_iter, plan=plan)


# ---------------------------------------------------------------------------
# Random direction
# ---------------------------------------------------------------------------
def solve_random_direction(q: QuadraticForm, xi: np.ndarray) -> ImplicitSolution:
    """X = a + xi / sqrt(Lambda) with Lambda = trace(A)/m.

    phi = offset + lambda^2 (eta^T A eta - Lambda) / 2 with eta = xi/|xi| and
    lambda = |xi| / sqrt(Lambda); the Jacobian is Lambda^(-m/2).
    """
    xi = np.atleast_1d(np.asarray(xi, dtype=float))
    m = q.center.size
    if xi.shape != (m,):
        raise DimensionMismatch(f"xi has shape {xi.shape}, expected ({m},)")
    trace_mean = q.trace_mean
    log_jacobian = -0.5 * m * float(np.log(trace_mean))
    norm = float(np.linalg.norm(xi))
    if norm == 0.0:
        return ImplicitSolution(
            position=q.center.copy(),
            phi=q.offset,
            log_jacobian=log_jacobian,
            residual=0.0,
            iterations=0,
            xi=xi,
        )

    eta = xi / norm
    lam = norm / np.sqrt(trace_mean)
    position = q.center + lam * eta
    phi = q.offset + 0.5 * lam**2 * (float(eta @ q.matrix @ eta) - trace_mean)
    residual = abs(q.eval(position) - phi - 0.5 * norm**2)
    return ImplicitSolution(
        position=position,
        phi=phi,
        log_jacobian=log_jacobian,
        residual=residual,
        iterations=0,
        xi=xi,
    )


# ---------------------------------------------------------------------------
# Jacobians
# ---------------------------------------------------------------------------
def jacobian_numeric(
    solver: Callable[[SampleObjective, np.ndarray, np.ndarray], ImplicitSolution],
    obj: SampleObjective,
    xi: np.ndarray,
    x: np.ndarray,
    h_fd: float = FD_STEP,
) -> float:
    """|det dX/dxi| by central differences, re-solving warm-started from ``x``."""
    xi = np.atleast_1d(np.asarray(xi, dtype=float))
    columns = np.empty((xi.size, xi.size))
    for j in range(xi.size):
        step = np.zeros(xi.size)
        step[j] = h_fd
        plus = solver(obj, xi + step, x).position
        minus = solver(obj, xi - step, x).position
        columns[:, j] = (plus - minus) / (2.0 * h_fd)
    det = abs(float(np.linalg.det(columns)))
    if not np.isfinite(det) or det == 0.0:
        raise SingularJacobian(f"finite-difference Jacobian is singular at xi={xi}")
    return det


def jacobian_implicit_1d(
    target: SampleObjective | UShapedSubstitute,
    xi: float,
    x: float,
    z: float | None = None,
) -> float:
    """J = |xi| / |F'(X)| from implicit differentiation; sqrt(1/F''(z)) at xi = 0."""
    _, df, _ = _scalar_view(target)
    if z is None:
        if not isinstance(target, UShapedSubstitute):
            raise InvalidInput("z is required unless target is a UShapedSubstitute")
        z = float(target.min_location[0])
    curvature = _second_derivative(df, z) if xi == 0 else np.nan
    log_j = _log_jacobian_1d(df, np.array([float(xi)]), np.array([float(x)]), curvature)
    return float(np.exp(log_j[0]))


# ---------------------------------------------------------------------------
# Solver selection
# ---------------------------------------------------------------------------
def routes_to_algorithm_b(
    obj: SampleObjective, proposal: str, use_random_direction: bool = False
) -> bool:
    """Whether ``proposal`` solves ``obj`` on its U-shaped substitute.

    implicit_auto keeps Algorithm A for linear objectives, where one step is
    exact, and for coupled ones that have no componentwise reduction. A
    nonlinear scalar or separable F goes to Algorithm B; on a non-convex F the
    weighted samples of A are biased.
    """
    if use_random_direction and obj.linear and obj.terms:
        return False
    if proposal == "implicit_b":
        return True
    return proposal == "implicit_auto" and not obj.linear and (obj.dim == 1 or obj.separable)


def solve_implicit(
    obj: SampleObjective,
    xi: np.ndarray,
    proposal: str = "implicit_auto",
    tol: float | None = None,
    max_iter: int = MAX_SOLVER_ITER,
    use_random_direction: bool = False,
    plan: UShapedPlan | None = None,
) -> ImplicitSolution:
    """Solve one particle with the configured method.

    See :func:`routes_to_algorithm_b` for how ``implicit_auto`` picks a solver.
    When it picks Algorithm A and A does not converge, it falls back to
    Algorithm B. Linear objectives go through the random-direction map when
    ``use_random_direction`` is set.
    """
    tol = default_tolerance(obj.dim) if tol is None else tol
    if use_random_direction and obj.linear and obj.terms:
        return solve_random_direction(quadratic_form(obj), xi)
    if not routes_to_algorithm_b(obj, proposal):
        try:
            return solve_algorithm_a(obj, xi, tol, max_iter)
        except NonConvergence:
            if proposal == "implicit_a":
                raise
            logger.debug("Algorithm A did not converge; falling back to the U-shaped solver")
    if plan is None:
        plan = plan_u_shaped(obj)
    return solve_with_plan(obj, xi, plan, tol, max_iter)
