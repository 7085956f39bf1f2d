"""Finite-state reference solutions for the operator equation ``A f = b``.

On a discrete joint law of ``(X1, X2)`` the conditional expectation operator
is the row-stochastic matrix ``A[j, i] = P(X1 = i | X2 = j)``.  All inner
products are weighted by the marginal probabilities, ``<f, g> = sum w f g``,
so ``A*`` is the adjoint under those weights:
``(A* g)[i] = sum_j P(X2 = j | X1 = i) g[j]``.

Computations go through the symmetrized matrix ``S = D2 A D1^{-1}`` with
``D = diag(sqrt(w))``, which turns the weighted problems into ordinary
Euclidean ones.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from . import _random
from .errors import ConfigError, DimensionError

_ATOL = 1e-10


@dataclass(frozen=True, eq=False)
class DiscretizedOperator:
    matrix: np.ndarray  # (K2, K1), A[j, i] = P(X1 = i | X2 = j)
    w1: np.ndarray
    w2: np.ndarray
    x1_grid: np.ndarray | None = None
    x2_grid: np.ndarray | None = None

    def __post_init__(self):
        A = np.asarray(self.matrix, dtype=np.float64)
        K2, K1 = A.shape
        if self.w1.shape != (K1,) or self.w2.shape != (K2,):
            raise DimensionError("marginal weights do not match the operator shape")
        if np.any(self.w1 <= 0) or np.any(self.w2 <= 0):
            raise ConfigError("marginal weights must be strictly positive")
        if abs(self.w1.sum() - 1) > _ATOL or abs(self.w2.sum() - 1) > _ATOL:
            raise ConfigError("marginal weights must sum to 1")
        if np.any(A < 0) or np.max(np.abs(A.sum(axis=1) - 1)) > _ATOL:
            raise ConfigError("operator rows must be probability vectors")

    @property
    def shape(self) -> tuple[int, int]:
        return self.matrix.shape

    @property
    def joint(self) -> np.ndarray:
        """Joint pmf laid out as ``P[i, j] = P(X1 = i, X2 = j)``."""
        return (self.matrix * self.w2[:, None]).T

    def apply(self, f) -> np.ndarray:
        f = _vec(f, self.shape[1], "f")
        return self.matrix @ f

    def adjoint(self, g) -> np.ndarray:
        g = _vec(g, self.shape[0], "g")
        return (self.matrix.T @ (self.w2 * g)) / self.w1

    def symmetrized(self) -> np.ndarray:
        return np.sqrt(self.w2)[:, None] * self.matrix / np.sqrt(self.w1)[None, :]

    def norm(self) -> float:
        """Operator norm between the weighted spaces (at most 1 for a conditional expectation)."""
        return float(np.linalg.norm(self.symmetrized(), 2))

    def to_dict(self) -> dict:
        doc = {
            "shape": list(self.shape),
            "matrix": self.matrix.ravel().tolist(),
            "w1": self.w1.tolist(),
            "w2": self.w2.tolist(),
        }
        if self.x1_grid is not None:
            doc["x1_grid"] = np.asarray(self.x1_grid).tolist()
        if self.x2_grid is not None:
            doc["x2_grid"] = np.asarray(self.x2_grid).tolist()
        return doc

    @classmethod
    def from_dict(cls, doc: dict) -> "DiscretizedOperator":
        K2, K1 = doc["shape"]
        grid = lambda k: None if k not in doc else np.asarray(doc[k], dtype=np.float64)
        return cls(
            np.asarray(doc["matrix"], dtype=np.float64).reshape(K2, K1),
            np.asarray(doc["w1"], dtype=np.float64),
            np.asarray(doc["w2"], dtype=np.float64),
            grid("x1_grid"),
            grid("x2_grid"),
        )

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def from_json(cls, text: str) -> "DiscretizedOperator":
        return cls.from_dict(json.loads(text))


@dataclass(frozen=True, eq=False)
class SingularSystem:
    """Weighted singular triples ``A phi_j = lambda_j psi_j``, ``A* psi_j = lambda_j phi_j``.

    ``phi`` has shape (r, K1) and ``psi`` shape (r, K2); rows are the functions.
    """

    values: np.ndarray
    phi: np.ndarray
    psi: np.ndarray
    w1: np.ndarray
    w2: np.ndarray

    def coefficients(self, f) -> np.ndarray:
        """Weighted inner products ``<f, phi_j>``."""
        return self.phi @ (self.w1 * np.asarray(f, dtype=np.float64))

    def to_csv(self) -> str:
        lines = ["j,lambda_j"]
        lines += [f"{j + 1},{v:.17g}" for j, v in enumerate(self.values)]
        return "\n".join(lines) + "\n"


def _vec(v, n, name) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    if v.shape != (n,):
        raise DimensionError(f"{name} has shape {v.shape}, expected ({n},)")
    return v


def wnorm2(f, w) -> float:
    """Squared weighted norm ``sum w f^2``."""
    f = np.asarray(f, dtype=np.float64)
    return float(np.sum(w * f * f))


def operator_from_pmf(joint_pmf, x1_grid=None, x2_grid=None) -> DiscretizedOperator:
    """Exact operator of a joint pmf laid out as ``P[i, j] = P(X1 = i, X2 = j)``."""
    P = np.asarray(joint_pmf, dtype=np.float64)
    if P.ndim != 2 or np.any(P < 0) or abs(P.sum() - 1) > 1e-9:
        raise ConfigError("joint pmf must be a nonnegative matrix summing to 1")
    w1 = P.sum(axis=1)
    w2 = P.sum(axis=0)
    if np.any(w1 <= 0) or np.any(w2 <= 0):
        raise ConfigError("every marginal probability must be positive")
    A = (P / w2[None, :]).T
    A = A / A.sum(axis=1, keepdims=True)
    return DiscretizedOperator(A, w1 / w1.sum(), w2 / w2.sum(), x1_grid, x2_grid)


def _nearest(points, grid) -> np.ndarray:
    d2 = ((points[:, None, :] - grid[None, :, :]) ** 2).sum(axis=2)
    return np.argmin(d2, axis=1)


def estimate_operator(source, grids=None) -> DiscretizedOperator:
    """Build the conditional-expectation matrix.

    ``source`` is either a design exposing ``joint_pmf`` (exact mode) or a
    batch of single-point samples (empirical mode).  In empirical mode
    ``grids = (x1_grid, x2_grid)`` is required; each sample point is assigned
    to its nearest grid point and the operator is the table of conditional
    frequencies.
    """
    if hasattr(source, "joint_pmf"):
        g1 = getattr(source, "x1_grid", None)
        g2 = getattr(source, "x2_grid", None)
        if grids is not None:
            g1, g2 = grids
        return operator_from_pmf(source.joint_pmf, g1, g2)
    if grids is None:
        raise ConfigError("empirical operator estimation needs (x1_grid, x2_grid)")
    g1 = np.asarray(grids[0], dtype=np.float64)
    g2 = np.asarray(grids[1], dtype=np.float64)
    x1 = np.asarray(source.points[:, 0, :])
    x2 = np.asarray(source.x2)
    i = _nearest(x1, g1)
    j = _nearest(x2, g2)
    counts = np.zeros((len(g1), len(g2)))
    np.add.at(counts, (i, j), 1.0)
    col = counts.sum(axis=0)
    if np.any(col == 0):
        empty = np.flatnonzero(col == 0).tolist()
        raise ConfigError(f"no observations in x2 cells {empty}")
    if np.any(counts.sum(axis=1) == 0):
        raise ConfigError("some x1 grid cells were never observed")
    return operator_from_pmf(counts / counts.sum(), g1, g2)


def tikhonov_solve(op: DiscretizedOperator, b, alpha: float) -> np.ndarray:
    """Solve ``(alpha I + A* A) f = A* b`` in the weighted geometry."""
    if not alpha > 0:
        raise ConfigError(f"alpha must be positive, got {alpha}")
    b = _vec(b, op.shape[0], "b")
    S = op.symmetrized()
    s1 = np.sqrt(op.w1)
    rhs = S.T @ (np.sqrt(op.w2) * b)
    g = np.linalg.solve(alpha * np.eye(S.shape[1]) + S.T @ S, rhs)
    return g / s1


def normal_equation_residual(op: DiscretizedOperator, f, b, alpha: float) -> float:
    """Weighted norm of ``alpha f + A* A f - A* b``."""
    r = alpha * np.asarray(f) + op.adjoint(op.apply(f)) - op.adjoint(b)
    return float(np.sqrt(wnorm2(r, op.w1)))


def svd_system(op: DiscretizedOperator) -> SingularSystem:
    S = op.symmetrized()
    U, s, Vt = np.linalg.svd(S, full_matrices=False)
    phi = Vt / np.sqrt(op.w1)[None, :]
    psi = U.T / np.sqrt(op.w2)[None, :]
    return SingularSystem(s, phi, psi, op.w1, op.w2)


def make_beta_regular_truth(
    sys: SingularSystem,
    beta: float,
    coeff_norm: float,
    seed: int,
    n_components: int | None = None,
    min_value: float = 1e-12,
) -> np.ndarray:
    """A truth ``f = sum_j c_j phi_j`` with ``sum_j c_j^2 / lambda_j^(2 beta) = coeff_norm^2``.

    ``c_j = s lambda_j^beta g_j`` with standard normal ``g_j`` and a global
    scale ``s``.  Only the leading ``n_components`` singular functions are used
    (all by default); each of them must have a singular value above
    ``min_value``.
    """
    if not beta > 0:
        raise ConfigError("beta must be positive")
    if coeff_norm < 0:
        raise ConfigError("coeff_norm must be nonnegative")
    r = len(sys.values) if n_components is None else int(n_components)
    lam = sys.values[:r]
    if np.any(lam <= min_value):
        raise ConfigError("zero singular values among the requested components")
    g = _random.normal(_random.make_rng(seed), r)
    c = lam**beta * g
    reg = np.sum(c**2 / lam ** (2 * beta))
    c = c * (coeff_norm / np.sqrt(reg)) if coeff_norm > 0 else np.zeros(r)
    return c @ sys.phi[:r]


def regularity_sum(sys: SingularSystem, f, beta: float, n_components: int | None = None) -> float:
    r = len(sys.values) if n_components is None else int(n_components)
    c = sys.coefficients(f)[:r]
    return float(np.sum(c**2 / sys.values[:r] ** (2 * beta)))


def primal_loss(op: DiscretizedOperator, f, b, alpha: float) -> float:
    """``0.5 ||A f - b||^2 + 0.5 alpha ||f||^2`` in the weighted norms."""
    f = _vec(f, op.shape[1], "f")
    b = _vec(b, op.shape[0], "b")
    return 0.5 * wnorm2(op.apply(f) - b, op.w2) + 0.5 * alpha * wnorm2(f, op.w1)


def suboptimality(op: DiscretizedOperator, f, b, alpha: float) -> float:
    """Primal loss gap to the Tikhonov minimizer."""
    f_alpha = tikhonov_solve(op, b, alpha)
    return primal_loss(op, f, b, alpha) - primal_loss(op, f_alpha, b, alpha)


def best_response(f, op: DiscretizedOperator, b) -> np.ndarray:
    """Inner maximizer ``u* = A f - b`` of the grid game."""
    return op.apply(f) - _vec(b, op.shape[0], "b")


def grid_payoff(op: DiscretizedOperator, f, u, b, alpha: float) -> float:
    """Exact expectation of the game payoff on the grid.

    ``E[(f(X1) - b(X2)) u(X2) - u(X2)^2 / 2 + alpha f(X1)^2 / 2]``.
    """
    f = _vec(f, op.shape[1], "f")
    u = _vec(u, op.shape[0], "u")
    b = _vec(b, op.shape[0], "b")
    P = op.joint
    cross = float(f @ P @ u)
    return cross - float(np.sum(op.w2 * b * u)) - 0.5 * wnorm2(u, op.w2) + 0.5 * alpha * wnorm2(f, op.w1)


def grid_payoff_gradients(op: DiscretizedOperator, f, u, b, alpha: float):
    """Euclidean gradients of :func:`grid_payoff` in the grid values of ``f`` and ``u``."""
    P = op.joint
    gf = P @ u + alpha * op.w1 * f
    gu = P.T @ f - op.w2 * b - op.w2 * u
    return gf, gu
