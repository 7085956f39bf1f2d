"""ReLU network parametrizations used by both players of the game.

Two architectures are supported:

* ``two_layer``: ``f(x) = m^{-1/2} sum_r b_r relu(W_r . x)`` with frozen
  output signs ``b_r`` and trainable first-layer rows ``W_r``.
* ``multi_layer``: ``x0 = A x``, ``x_h = m^{-1/2} relu(W_h x_{h-1})`` for
  ``h = 1..H`` and ``f(x) = b . x_H``; only the square middle layers ``W_h``
  train, ``A`` and ``b`` stay at their initial draws.

Weights are stored as one flat vector (rows of ``W`` for two-layer nets,
row-major ``W_1, ..., W_H`` for deep nets).  The feasible set is a Euclidean
ball of radius ``B`` around the initial weights (per layer, in Frobenius norm,
for deep nets).

The ReLU derivative at exactly zero is taken as 0.
"""

from __future__ import annotations

import base64
import json
import math
import warnings
from dataclasses import dataclass, replace
from typing import Callable, Union

import numpy as np

from . import _random
from .errors import ConfigError, DimensionError

TWO_LAYER = "two_layer"
MULTI_LAYER = "multi_layer"
ARCHS = (TWO_LAYER, MULTI_LAYER)

_MAX_PARAMS = 1 << 31
_PROJ_SLACK = 1e-12


@dataclass(frozen=True)
class TwoLayerConfig:
    input_dim: int
    width: int
    radius: float

    def __post_init__(self):
        _check_positive_int("input_dim", self.input_dim)
        _check_positive_int("width", self.width)
        if not (self.radius > 0 and math.isfinite(self.radius)):
            raise ConfigError(f"radius must be positive and finite, got {self.radius}")
        if self.width * self.input_dim > _MAX_PARAMS:
            raise ConfigError("width * input_dim overflows the supported parameter count")

    @property
    def n_params(self) -> int:
        return self.width * self.input_dim


@dataclass(frozen=True)
class DeepConfig:
    input_dim: int
    width: int
    depth: int
    radius: float

    def __post_init__(self):
        _check_positive_int("input_dim", self.input_dim)
        _check_positive_int("width", self.width)
        _check_positive_int("depth", self.depth)
        if not (self.radius > 0 and math.isfinite(self.radius)):
            raise ConfigError(f"radius must be positive and finite, got {self.radius}")
        if self.depth * self.width**2 > _MAX_PARAMS:
            raise ConfigError("depth * width**2 overflows the supported parameter count")
        # Width condition of the deep-net theory, up to unspecified constants.
        if self.radius > math.sqrt(self.width) * self.depth**-6:
            warnings.warn(
                f"radius {self.radius} exceeds sqrt(width) * depth^-6 = "
                f"{math.sqrt(self.width) * self.depth**-6:.3g}; the linearized regime "
                "may not apply",
                RuntimeWarning,
                stacklevel=3,
            )

    @property
    def n_params(self) -> int:
        return self.depth * self.width**2


Config = Union[TwoLayerConfig, DeepConfig]


def _check_positive_int(name, value):
    if isinstance(value, bool) or not isinstance(value, (int, np.integer)) or value < 1:
        raise ConfigError(f"{name} must be a positive integer, got {value!r}")


def _readonly(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a, dtype=np.float64)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class NetworkState:
    """Weights of one network plus the frozen parts of its initialization.

    ``output_signs`` is set for two-layer nets; ``input_embed`` and
    ``output_vec`` for deep nets.  All arrays are read-only.
    """

    arch: str
    config: Config
    seed: int
    weights: np.ndarray
    init_weights: np.ndarray
    output_signs: np.ndarray | None = None
    input_embed: np.ndarray | None = None
    output_vec: np.ndarray | None = None

    @property
    def input_dim(self) -> int:
        return self.config.input_dim

    @property
    def width(self) -> int:
        return self.config.width

    @property
    def radius(self) -> float:
        return self.config.radius

    def matrix(self, flat: np.ndarray | None = None) -> np.ndarray:
        """Reshape flat weights into ``(m, d)`` or ``(H, m, m)``."""
        flat = self.weights if flat is None else flat
        m = self.config.width
        if self.arch == TWO_LAYER:
            return flat.reshape(m, self.config.input_dim)
        return flat.reshape(self.config.depth, m, m)

    def with_weights(self, weights: np.ndarray) -> "NetworkState":
        weights = np.asarray(weights, dtype=np.float64)
        if weights.shape != self.init_weights.shape:
            raise DimensionError(
                f"weights have shape {weights.shape}, expected {self.init_weights.shape}"
            )
        return replace(self, weights=_readonly(weights.copy()))

    def displacement(self) -> float:
        return float(np.linalg.norm(self.weights - self.init_weights))


def init_network(arch: str, config: Config, seed: int) -> NetworkState:
    """Draw a fresh network with ``W = W(0)``.

    Two-layer: ``b_r`` uniform on {-1, 1}, rows of ``W(0)`` Gaussian with
    covariance ``I/d``.  Deep: entries of ``A`` and every ``W_h(0)`` are
    N(0, 2), entries of the output vector N(0, 1).
    """
    if arch == TWO_LAYER:
        if not isinstance(config, TwoLayerConfig):
            raise ConfigError("two_layer networks need a TwoLayerConfig")
        rng = _random.make_rng(seed)
        m, d = config.width, config.input_dim
        w0 = _random.normal(rng, m * d, std=1.0 / math.sqrt(d))
        signs = _random.rademacher(rng, m)
        return NetworkState(
            arch, config, int(seed), _readonly(w0), _readonly(w0.copy()), output_signs=_readonly(signs)
        )
    if arch == MULTI_LAYER:
        if not isinstance(config, DeepConfig):
            raise ConfigError("multi_layer networks need a DeepConfig")
        rng = _random.make_rng(seed)
        m, d, H = config.width, config.input_dim, config.depth
        embed = _random.normal(rng, (m, d), std=math.sqrt(2.0))
        w0 = _random.normal(rng, H * m * m, std=math.sqrt(2.0))
        out = _random.normal(rng, m)
        return NetworkState(
            arch,
            config,
            int(seed),
            _readonly(w0),
            _readonly(w0.copy()),
            input_embed=_readonly(embed),
            output_vec=_readonly(out),
        )
    raise ConfigError(f"unknown architecture {arch!r}; expected one of {ARCHS}")


def _as_input(state: NetworkState, x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (state.input_dim,):
        raise DimensionError(f"input has shape {x.shape}, expected ({state.input_dim},)")
    return x


def _forward_flat(state: NetworkState, flat: np.ndarray, x: np.ndarray) -> float:
    if state.arch == TWO_LAYER:
        W = state.matrix(flat)
        return float(state.output_signs @ np.maximum(W @ x, 0.0)) / math.sqrt(state.width)
    Ws = state.matrix(flat)
    scale = 1.0 / math.sqrt(state.width)
    h = state.input_embed @ x
    for Wh in Ws:
        h = scale * np.maximum(Wh @ h, 0.0)
    return float(state.output_vec @ h)


def _gradient_flat(state: NetworkState, flat: np.ndarray, x: np.ndarray) -> np.ndarray:
    m = state.width
    scale = 1.0 / math.sqrt(m)
    if state.arch == TWO_LAYER:
        W = state.matrix(flat)
        active = (W @ x > 0.0).astype(np.float64)
        return (scale * (state.output_signs * active)[:, None] * x[None, :]).ravel()
    Ws = state.matrix(flat)
    acts = [state.input_embed @ x]
    masks = []
    for Wh in Ws:
        z = Wh @ acts[-1]
        masks.append(z > 0.0)
        acts.append(scale * np.maximum(z, 0.0))
    grad = np.empty_like(Ws)
    upstream = np.asarray(state.output_vec, dtype=np.float64)
    for h in range(len(Ws) - 1, -1, -1):
        dz = scale * upstream * masks[h]
        grad[h] = np.outer(dz, acts[h])
        upstream = Ws[h].T @ dz
    return grad.ravel()


def forward(state: NetworkState, x) -> float:
    """Network output at a single input vector."""
    return _forward_flat(state, state.weights, _as_input(state, x))


def gradient(state: NetworkState, x) -> np.ndarray:
    """Gradient of :func:`forward` with respect to the flat trainable weights."""
    return _gradient_flat(state, state.weights, _as_input(state, x))


def forward_at_init(state: NetworkState, x) -> float:
    return _forward_flat(state, state.init_weights, _as_input(state, x))


def gradient_at_init(state: NetworkState, x) -> np.ndarray:
    return _gradient_flat(state, state.init_weights, _as_input(state, x))


def linearized_forward(state: NetworkState, x) -> float:
    """First-order Taylor expansion of the network in its weights around ``W(0)``."""
    x = _as_input(state, x)
    g0 = _gradient_flat(state, state.init_weights, x)
    f0 = _forward_flat(state, state.init_weights, x)
    return f0 + float(g0 @ (state.weights - state.init_weights))


def evaluate(state: NetworkState, X) -> np.ndarray:
    """Vectorized :func:`forward` over the rows of ``X``."""
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    if X.shape[1] != state.input_dim:
        raise DimensionError(f"inputs have {X.shape[1]} columns, expected {state.input_dim}")
    scale = 1.0 / math.sqrt(state.width)
    if state.arch == TWO_LAYER:
        return scale * (np.maximum(X @ state.matrix().T, 0.0) @ state.output_signs)
    H = X @ state.input_embed.T
    for Wh in state.matrix():
        H = scale * np.maximum(H @ Wh.T, 0.0)
    return H @ state.output_vec


def evaluate_linearized(state: NetworkState, X) -> np.ndarray:
    """Vectorized :func:`linearized_forward` over the rows of ``X``."""
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    if state.arch == TWO_LAYER:
        # Two-layer nets are positively homogeneous, so f(W0, x) = grad(W0, x) . W0
        # and the linearization collapses to grad(W0, x) . W.
        scale = 1.0 / math.sqrt(state.width)
        active = X @ state.matrix(state.init_weights).T > 0.0
        return scale * ((X @ state.matrix().T) * active) @ state.output_signs
    return np.array([linearized_forward(state, x) for x in X])


def project(state: NetworkState) -> NetworkState:
    """Metric projection of the weights onto the feasible ball(s) around ``W(0)``."""
    delta = state.weights - state.init_weights
    B = state.radius
    slack = B * (1.0 + _PROJ_SLACK)  # rescaled points can land an ulp outside; keep projection idempotent
    if state.arch == TWO_LAYER:
        norm = np.linalg.norm(delta)
        if norm <= slack:
            return state
        return state.with_weights(state.init_weights + (B / norm) * delta)
    blocks = delta.reshape(state.config.depth, -1)
    norms = np.linalg.norm(blocks, axis=1)
    if np.all(norms <= slack):
        return state
    factors = np.where(norms > slack, B / np.where(norms > 0, norms, 1.0), 1.0)
    return state.with_weights(state.init_weights + (blocks * factors[:, None]).ravel())


def project_flat(arch: str, config: Config, w: np.ndarray, w0: np.ndarray) -> np.ndarray:
    """Array-level counterpart of :func:`project` (returns a new array)."""
    delta = w - w0
    B = config.radius
    if arch == TWO_LAYER:
        norm = np.linalg.norm(delta)
        return w0 + (B / norm) * delta if norm > B else w.copy()
    blocks = delta.reshape(config.depth, -1)
    norms = np.linalg.norm(blocks, axis=1)
    factors = np.where(norms > B, B / np.where(norms > 0, norms, 1.0), 1.0)
    return w0 + (blocks * factors[:, None]).ravel()


def sample_in_ball(state: NetworkState, rng: np.random.Generator) -> NetworkState:
    """Weights drawn uniformly from the feasible set of ``state``."""
    B = state.radius
    if state.arch == TWO_LAYER:
        delta = _random.uniform_ball(rng, state.init_weights.size, B)
    else:
        H = state.config.depth
        size = state.width**2
        delta = np.concatenate([_random.uniform_ball(rng, size, B) for _ in range(H)])
    return state.with_weights(state.init_weights + delta)


# -- linearization error -----------------------------------------------------

StateFactory = Callable[[int, int], NetworkState]


def two_layer_factory(input_dim: int, radius: float) -> StateFactory:
    return lambda m, seed: init_network(TWO_LAYER, TwoLayerConfig(input_dim, m, radius), seed)


def multi_layer_factory(input_dim: int, depth: int, radius: float) -> StateFactory:
    def make(m, seed):
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            cfg = DeepConfig(input_dim, m, depth, radius)
        return init_network(MULTI_LAYER, cfg, seed)

    return make


def linearization_gap(
    state_factory: StateFactory, m_grid, n_samples: int, seed: int
) -> list[tuple[int, float, float]]:
    """Monte Carlo estimates of the value and gradient linearization errors.

    For each width a fresh initialization, a uniform point of the feasible
    ball and an input on the unit sphere are drawn ``n_samples`` times.
    Returns rows ``(m, mean (f - f_lin)^2, mean ||grad f - grad f_lin||^2)``.
    """
    m_grid = [int(m) for m in m_grid]
    if not m_grid:
        raise ConfigError("m_grid must be nonempty")
    if any(b <= a for a, b in zip(m_grid, m_grid[1:])):
        raise ConfigError("m_grid must be strictly increasing")
    if n_samples < 100:
        raise ConfigError("n_samples must be at least 100")
    rows = []
    for m, m_seed in zip(m_grid, _random.spawn_seeds(seed, len(m_grid))):
        rng = _random.make_rng(m_seed)
        val = np.empty(n_samples)
        grd = np.empty(n_samples)
        for i in range(n_samples):
            state = state_factory(m, int(rng.integers(0, 2**63)))
            state = sample_in_ball(state, rng)
            x = _random.unit_sphere(rng, 1, state.input_dim)[0]
            g0 = _gradient_flat(state, state.init_weights, x)
            f0 = _forward_flat(state, state.init_weights, x)
            f_lin = f0 + float(g0 @ (state.weights - state.init_weights))
            val[i] = (_forward_flat(state, state.weights, x) - f_lin) ** 2
            grd[i] = float(np.sum((_gradient_flat(state, state.weights, x) - g0) ** 2))
        rows.append((m, float(val.mean()), float(grd.mean())))
    return rows


# -- serialization -----------------------------------------------------------


def _config_dict(config: Config) -> dict:
    out = {"input_dim": config.input_dim, "width": config.width, "radius": config.radius}
    if isinstance(config, DeepConfig):
        out["depth"] = config.depth
    return out


def make_config(arch: str, params: dict) -> Config:
    if arch == TWO_LAYER:
        return TwoLayerConfig(int(params["input_dim"]), int(params["width"]), float(params["radius"]))
    if arch == MULTI_LAYER:
        # Deserialized states were validated when first built; skip the width warning.
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            return DeepConfig(
                int(params["input_dim"]), int(params["width"]), int(params["depth"]), float(params["radius"])
            )
    raise ConfigError(f"unknown architecture {arch!r}")


def state_to_dict(state: NetworkState, binary: bool = False) -> dict:
    """JSON-ready description; ``W(0)`` is omitted and re-derived from the seed.

    With ``binary=True`` the weights are stored as a base64 little-endian
    float64 blob instead of a list.
    """
    doc = {"arch": state.arch, "config": _config_dict(state.config), "seed": state.seed}
    if binary:
        doc["W_b64"] = base64.b64encode(weights_to_bytes(state)).decode("ascii")
    else:
        doc["W"] = state.weights.tolist()
    return doc


def state_from_dict(doc: dict) -> NetworkState:
    base = init_network(doc["arch"], make_config(doc["arch"], doc["config"]), int(doc["seed"]))
    if "W_b64" in doc:
        w = weights_from_bytes(base64.b64decode(doc["W_b64"]))
    else:
        w = np.asarray(doc["W"], dtype=np.float64)
    return base.with_weights(w)


def state_to_json(state: NetworkState) -> str:
    return json.dumps(state_to_dict(state))


def state_from_json(text: str) -> NetworkState:
    return state_from_dict(json.loads(text))


def weights_to_bytes(state: NetworkState) -> bytes:
    return np.ascontiguousarray(state.weights, dtype="<f8").tobytes()


def weights_from_bytes(blob: bytes) -> np.ndarray:
    return np.frombuffer(blob, dtype="<f8").astype(np.float64)
