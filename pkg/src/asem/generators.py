"""Seeded synthetic data for the worked examples.

* IV regression: ``Y = g0(X) + eps`` with ``E[eps | Z] = 0``.
* Dynamic panel: ``Y_it = m(Y_{i,t-1}, X_it) + alpha_i + eps_it``, first
  differenced so that the fixed effects drop out.
* Discrete instances with an exactly known joint pmf, used for every
  comparison against the finite-state oracle.

Default design parameters here are repo choices, not values taken from any
reference experiment.  Noise is Gaussian truncated at three scales, keeping
targets bounded.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import _random
from .errors import ConfigError
from .samples import SampleBatch

G0_KINDS = ("linear", "sigmoid", "sine", "zero")


@dataclass(frozen=True)
class Curve:
    """Scalar response ``amp * h(freq * s)`` of the index ``s = sum(x)``."""

    kind: str = "sine"
    amp: float = 1.0
    freq: float = 1.0

    def __post_init__(self):
        if self.kind not in G0_KINDS:
            raise ConfigError(f"unknown function kind {self.kind!r}; expected one of {G0_KINDS}")

    def __call__(self, X) -> np.ndarray:
        s = np.asarray(X, dtype=np.float64)
        s = s.sum(axis=-1) if s.ndim > 1 else s
        if self.kind == "linear":
            return self.amp * self.freq * s
        if self.kind == "sigmoid":
            return self.amp * (2.0 / (1.0 + np.exp(-self.freq * s)) - 1.0)
        if self.kind == "sine":
            return self.amp * np.sin(self.freq * s)
        return np.zeros_like(s)


# -- IV regression --------------------------------------------------------------


@dataclass(frozen=True)
class IvDesign:
    """Endogenous regressor recipe.

    ``Z`` is uniform on the cube ``[-1, 1]^d`` scaled by ``1/sqrt(d)``.  With
    confounder ``e`` and independent noise ``nu``::

        X_k = tanh(rho * sqrt(d) Z_k + sqrt(1 - rho^2) e_k) / sqrt(d)
        Y   = g0(X) + e_1 + nu
    """

    g0: Curve = field(default_factory=lambda: Curve("sine", 1.0, 2.0))
    rho: float = 0.5
    confounder_scale: float = 0.1
    noise_scale: float = 0.1
    dim: int = 1

    def __post_init__(self):
        if not 0.0 <= self.rho <= 1.0:
            raise ConfigError("rho must lie in [0, 1]")
        if self.confounder_scale < 0 or self.noise_scale < 0:
            raise ConfigError("noise scales must be nonnegative")
        if self.dim < 1:
            raise ConfigError("dim must be positive")


def _iv_draw(design: IvDesign, n: int, seed: int):
    if n < 1:
        raise ConfigError("n must be at least 1")
    rng = _random.make_rng(seed)
    d = design.dim
    z_unit = rng.uniform(-1.0, 1.0, size=(n, d))
    e = _random.truncated_normal(rng, (n, d), design.confounder_scale)
    nu = _random.truncated_normal(rng, n, design.noise_scale)
    x = np.tanh(design.rho * z_unit + math.sqrt(1.0 - design.rho**2) * e) / math.sqrt(d)
    z = z_unit / math.sqrt(d)
    eps = e[:, 0] + nu
    y = design.g0(x) + eps
    return x, z, y, eps


def gen_iv(design: IvDesign, n: int, seed: int) -> SampleBatch:
    x, z, y, _ = _iv_draw(design, n, seed)
    return SampleBatch(np.ones((n, 1)), x[:, None, :], z, y)


# -- dynamic panel ------------------------------------------------------------------


@dataclass(frozen=True)
class PanelDesign:
    """``Y_it = lag * Y_{i,t-1} + g(X_it) + alpha_i + eps_it``.

    The structural function ``m(y, x) = lag * y + g(x)`` is linear in the
    lagged outcome.  Each unit starts at its stationary level
    ``alpha_i / (1 - lag)`` and runs ``burn_in`` periods before recording, so
    the first differences do not depend on the fixed effects at all.

    Emitted points are ``U = (tanh(Y / y_scale), X) / sqrt(1 + p)``, a
    bijective squashing that keeps every point in the unit ball without
    changing the conditioning information.
    """

    g: Curve = field(default_factory=lambda: Curve("sine", 0.5, 2.0))
    lag: float = 0.5
    fe_scale: float = 1.0
    noise_scale: float = 0.1
    n_units: int = 1000
    n_periods: int = 6
    regressor_dim: int = 1
    burn_in: int = 50
    y_scale: float = 4.0

    def __post_init__(self):
        if self.n_periods < 3:
            raise ConfigError("first differencing with an instrument needs n_periods >= 3")
        if self.n_units < 1:
            raise ConfigError("n_units must be at least 1")
        if self.fe_scale < 0 or self.noise_scale < 0:
            raise ConfigError("scales must be nonnegative")
        if not -1.0 < self.lag < 1.0:
            raise ConfigError("lag coefficient must lie in (-1, 1) for a stationary panel")
        if self.regressor_dim < 1 or self.burn_in < 0:
            raise ConfigError("invalid regressor_dim or burn_in")

    @property
    def dim(self) -> int:
        return 1 + self.regressor_dim

    def embed(self, y, x) -> np.ndarray:
        y = np.asarray(y, dtype=np.float64)
        u = np.concatenate([np.tanh(y / self.y_scale)[..., None], np.asarray(x)], axis=-1)
        return u / math.sqrt(self.dim)

    def structural(self, points) -> np.ndarray:
        """``m`` evaluated at emitted (squashed) points."""
        u = np.asarray(points, dtype=np.float64) * math.sqrt(self.dim)
        y = self.y_scale * np.arctanh(np.clip(u[..., 0], -1.0, 1.0))
        return self.lag * y + self.g(u[..., 1:])


def _panel_draw(design: PanelDesign, seed: int):
    rng = _random.make_rng(seed)
    N, T, p = design.n_units, design.n_periods, design.regressor_dim
    total = design.burn_in + T
    # Noise and regressors come first so that changing fe_scale leaves them untouched.
    x = rng.uniform(-1.0, 1.0, size=(N, total, p))
    eps = _random.truncated_normal(rng, (N, total), design.noise_scale)
    alpha = _random.normal(rng, N, design.fe_scale)
    gx = design.g(x)
    # Deviation from the unit's stationary level; fixed effects never enter it.
    dev = np.empty((N, total))
    prev = np.zeros(N)
    for t in range(total):
        prev = design.lag * prev + gx[:, t] + eps[:, t]
        dev[:, t] = prev
    level = alpha / (1.0 - design.lag)
    keep = slice(design.burn_in, total)
    return dev[:, keep], level, x[:, keep], eps[:, keep]


def gen_panel(design: PanelDesign, seed: int) -> SampleBatch:
    """First-differenced samples for ``t = 3..T``.

    Each sample has evaluation points ``(+1, U_{t-1}), (-1, U_{t-2})`` with
    ``U_s = (Y_s, X_{s+1})``, instrument ``U_{t-2}`` and target
    ``b_tilde = Y_t - Y_{t-1}``, computed from the fixed-effect-free deviations.
    """
    dev, level, x, _ = _panel_draw(design, seed)
    N, T = dev.shape
    y = dev + level[:, None]
    # U_s pairs Y_s with X_{s+1}; rows s = 0..T-2
    U = design.embed(y[:, :-1], x[:, 1:])
    t = np.arange(2, T)
    u_lag1 = U[:, t - 1]
    u_lag2 = U[:, t - 2]
    dy = dev[:, t] - dev[:, t - 1]
    n = N * len(t)
    d = design.dim
    points = np.stack([u_lag1, u_lag2], axis=2).reshape(n, 2, d)
    coefs = np.tile([1.0, -1.0], (n, 1))
    return SampleBatch(coefs, points, u_lag2.reshape(n, d), dy.reshape(n))


def panel_differenced_noise(design: PanelDesign, seed: int) -> np.ndarray:
    """The true ``eps_t - eps_{t-1}`` aligned with :func:`gen_panel` output."""
    _, _, _, eps = _panel_draw(design, seed)
    t = np.arange(2, eps.shape[1])
    return (eps[:, t] - eps[:, t - 1]).reshape(-1)


# -- discrete instances ---------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class DiscreteDesign:
    joint_pmf: np.ndarray  # (K1, K2)
    x1_grid: np.ndarray  # (K1, d)
    x2_grid: np.ndarray  # (K2, d)
    f_true: np.ndarray  # (K1,)
    noise_scale: float = 0.0

    def __post_init__(self):
        P = np.asarray(self.joint_pmf, dtype=np.float64)
        if P.ndim != 2 or np.any(P < 0) or abs(P.sum() - 1.0) > 1e-9:
            raise ConfigError("joint pmf must be a nonnegative matrix summing to 1")
        if np.any(P.sum(axis=1) <= 0) or np.any(P.sum(axis=0) <= 0):
            raise ConfigError("every marginal probability must be positive")
        K1, K2 = P.shape
        if len(self.x1_grid) != K1 or len(self.x2_grid) != K2 or len(self.f_true) != K1:
            raise ConfigError("grid or truth sizes do not match the pmf")
        if max(np.linalg.norm(self.x1_grid, axis=1).max(), np.linalg.norm(self.x2_grid, axis=1).max()) > 1 + 1e-12:
            raise ConfigError("grid embeddings must lie in the unit ball")
        if self.noise_scale < 0:
            raise ConfigError("noise_scale must be nonnegative")

    @property
    def dim(self) -> int:
        return self.x1_grid.shape[1]

    @property
    def b(self) -> np.ndarray:
        """``E[b_tilde | X2 = j]`` for every instrument state."""
        P = self.joint_pmf
        return (P.T @ self.f_true) / P.sum(axis=0)


def circle_grid(K: int) -> np.ndarray:
    """``K`` equally spaced points on the unit circle."""
    ang = 2.0 * np.pi * np.arange(K) / K
    return np.stack([np.cos(ang), np.sin(ang)], axis=1)


def lifted_circle_grid(K: int) -> np.ndarray:
    """``K`` equally spaced circle points lifted to ``(cos, sin, 1) / sqrt(2)``.

    The constant coordinate acts as a hidden-layer bias for nets without one.
    Without it a bias-free ReLU net restricted to the circle cannot express
    odd angular frequencies above one.
    """
    return np.hstack([circle_grid(K), np.ones((K, 1))]) / np.sqrt(2.0)


def banded_pmf(K1: int, K2: int, width: float) -> np.ndarray:
    """Joint pmf ``P[i, j] ~ exp(-(s_i - t_j)^2 / (2 width^2))`` on ``[-1, 1]`` grids.

    Smaller ``width`` means a stronger instrument and a better conditioned
    operator.
    """
    s = np.linspace(-1.0, 1.0, K1)
    t = np.linspace(-1.0, 1.0, K2)
    P = np.exp(-((s[:, None] - t[None, :]) ** 2) / (2.0 * width**2))
    return P / P.sum()


def discrete_iv_design(
    K1: int = 20,
    K2: int = 20,
    width: float = 0.1,
    truth: str = "sine",
    amp: float = 1.0,
    noise_scale: float = 0.0,
    f_true=None,
) -> DiscreteDesign:
    """Default finite IV instance: banded pmf, lifted circle embeddings.

    The default truth is ``amp * sin(pi s)`` on the ``[-1, 1]`` state grid.
    """
    s = np.linspace(-1.0, 1.0, K1)
    if f_true is None:
        curves = {
            "sine": np.sin(np.pi * s),
            "linear": s,
            "cosine": np.cos(np.pi * s / 2.0),
        }
        if truth not in curves:
            raise ConfigError(f"unknown discrete truth {truth!r}")
        f_true = amp * curves[truth]
    return DiscreteDesign(
        banded_pmf(K1, K2, width), lifted_circle_grid(K1), lifted_circle_grid(K2), np.asarray(f_true, float), noise_scale
    )


def draw_pairs(design: DiscreteDesign, n: int, seed: int):
    """Sample ``n`` state pairs ``(i, j)`` from the joint pmf by inverse CDF."""
    if n < 1:
        raise ConfigError("n must be at least 1")
    rng = _random.make_rng(seed)
    P = design.joint_pmf
    cdf = np.cumsum(P.ravel())
    cdf /= cdf[-1]
    flat = np.minimum(np.searchsorted(cdf, rng.random(n), side="right"), cdf.size - 1)
    i, j = np.divmod(flat, P.shape[1])
    noise = (
        _random.truncated_normal(rng, n, design.noise_scale) if design.noise_scale > 0 else np.zeros(n)
    )
    return i, j, noise


def gen_discrete(design: DiscreteDesign, n: int, seed: int) -> SampleBatch:
    i, j, noise = draw_pairs(design, n, seed)
    return SampleBatch(
        np.ones((n, 1)),
        design.x1_grid[i][:, None, :],
        design.x2_grid[j],
        design.f_true[i] + noise,
    )


# -- moment checks -----------------------------------------------------------------------


def default_test_functions(include_square: bool = True) -> dict:
    fns = {"one": lambda z: np.ones(len(z)), "z1": lambda z: z[:, 0]}
    if include_square:
        fns["z1_sq"] = lambda z: z[:, 0] ** 2
    return fns


def moment_check(samples: SampleBatch, test_functions: dict, truth) -> list[tuple[str, float, float]]:
    """Empirical ``E[eps h(x2)]`` with its standard error for each test function.

    ``eps = b_tilde - sum_k c_k truth(x_k)``; ``truth`` maps an ``(n, d)``
    array of points to values.
    """
    if len(samples) == 0:
        raise ConfigError("moment_check needs at least one sample")
    n, P = samples.coefs.shape
    fitted = np.zeros(n)
    for k in range(P):
        fitted += samples.coefs[:, k] * truth(samples.points[:, k, :])
    eps = samples.b_tilde - fitted
    rows = []
    for name, h in test_functions.items():
        prod = eps * np.asarray(h(samples.x2), dtype=np.float64)
        se = float(prod.std(ddof=1) / math.sqrt(n)) if n > 1 else 0.0
        rows.append((name, float(prod.mean()), se))
    return rows
