"""The min-max game between a primal network ``f`` and a dual network ``u``.

Per sample the payoff is::

    F = u(x2) * (sum_k c_k f(x_k) - b_tilde) - u(x2)^2 / 2 + alpha/2 * f(x_ridge)^2

``f`` descends and ``u`` ascends.  Training keeps weight snapshots so the
returned estimator can average network *outputs* over the trajectory.
"""

from __future__ import annotations

import itertools
import logging
import math
import os
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from . import kernels
from .errors import ConfigError, DimensionError, NonFiniteError, StreamExhausted
from .nn_models import (
    TWO_LAYER,
    NetworkState,
    evaluate,
    forward,
    gradient,
    project_flat,
    state_to_json,
)
from .oracle import best_response  # noqa: F401  (re-exported game-side helper)
from .samples import Sample, SampleBatch

log = logging.getLogger(__name__)

MAX_DEFAULT_SNAPSHOTS = 512
TRACE_COLUMNS = ("iter", "payoff", "grad_norm_theta", "grad_norm_omega", "dist_theta", "dist_omega")
_FEAS_TOL = 1e-9


@dataclass(frozen=True)
class GameConfig:
    """Hyperparameters of one training run.

    Parameters
    ----------
    alpha : float
        Ridge weight, nonnegative.
    eta : float
        Constant stepsize, positive.
    T : int
        Number of update pairs.
    snapshot_stride : int, optional
        Keep the pre-update iterate of every ``snapshot_stride``-th step.
        Defaults to the smallest stride keeping at most 512 snapshots.
    seed : int
        Recorded with the trace for provenance.
    batch_size : int
        Samples averaged per gradient step (1 is the plain algorithm).
    """

    alpha: float
    eta: float
    T: int
    snapshot_stride: int | None = None
    seed: int = 0
    batch_size: int = 1

    def __post_init__(self):
        if not (self.alpha >= 0 and math.isfinite(self.alpha)):
            raise ConfigError(f"alpha must be nonnegative, got {self.alpha}")
        if not (self.eta >= 0 and math.isfinite(self.eta)):
            raise ConfigError(f"eta must be nonnegative, got {self.eta}")
        if int(self.T) != self.T or self.T < 1:
            raise ConfigError(f"T must be a positive integer, got {self.T}")
        if self.snapshot_stride is None:
            object.__setattr__(self, "snapshot_stride", max(1, -(-int(self.T) // MAX_DEFAULT_SNAPSHOTS)))
        if int(self.snapshot_stride) != self.snapshot_stride or self.snapshot_stride < 1:
            raise ConfigError(f"snapshot_stride must be a positive integer, got {self.snapshot_stride}")
        if int(self.batch_size) != self.batch_size or self.batch_size < 1:
            raise ConfigError(f"batch_size must be a positive integer, got {self.batch_size}")

    @property
    def n_snapshots(self) -> int:
        return self.T // self.snapshot_stride


# -- single-sample payoff and gradients ----------------------------------------


def _check_pair(theta: NetworkState, omega: NetworkState, sample: Sample):
    if theta.input_dim != sample.dim or omega.input_dim != sample.dim:
        raise DimensionError(
            f"sample points have length {sample.dim}, networks expect "
            f"{theta.input_dim} and {omega.input_dim}"
        )


def residual(f_state: NetworkState, sample: Sample) -> float:
    """``sum_k c_k f(x_k) - b_tilde``."""
    if f_state.input_dim != sample.dim:
        raise DimensionError(f"sample points have length {sample.dim}, network expects {f_state.input_dim}")
    return sum(c * forward(f_state, x) for c, x in sample.eval_points) - sample.b_tilde


def payoff(theta: NetworkState, omega: NetworkState, sample: Sample, alpha: float) -> float:
    _check_pair(theta, omega, sample)
    u = forward(omega, sample.x2)
    f_r = forward(theta, sample.eval_points[sample.ridge_index][1])
    return residual(theta, sample) * u - 0.5 * u * u + 0.5 * alpha * f_r * f_r


def grad_theta(theta: NetworkState, omega: NetworkState, sample: Sample, alpha: float) -> np.ndarray:
    """``u(x2) sum_k c_k grad f(x_k) + alpha f(x_ridge) grad f(x_ridge)``."""
    _check_pair(theta, omega, sample)
    u = forward(omega, sample.x2)
    g = np.zeros_like(theta.weights)
    for k, (c, x) in enumerate(sample.eval_points):
        w = u * c
        if k == sample.ridge_index:
            w += alpha * forward(theta, x)
        if w != 0.0:
            g += w * gradient(theta, x)
    return g


def grad_omega(theta: NetworkState, omega: NetworkState, sample: Sample, alpha: float) -> np.ndarray:
    """``(residual - u(x2)) grad u(x2)``; ``alpha`` does not enter."""
    _check_pair(theta, omega, sample)
    u = forward(omega, sample.x2)
    return (residual(theta, sample) - u) * gradient(omega, sample.x2)


# -- training ------------------------------------------------------------------


@dataclass
class TrainTrace:
    """Everything recorded by :func:`sgda_run`.

    ``log`` has one row per iteration with the columns of ``TRACE_COLUMNS``.
    Snapshot ``i`` is the iterate in force at 1-based step
    ``snapshot_iters[i]``, before that step's update.
    """

    config: GameConfig
    log: np.ndarray
    snapshot_iters: np.ndarray
    theta_snapshots: list
    omega_snapshots: list
    theta: NetworkState
    omega: NetworkState
    runtime: float = 0.0
    backend: str = field(default="numpy")

    def to_csv(self, fh=None) -> str | None:
        lines = [",".join(TRACE_COLUMNS)]
        for row in self.log:
            lines.append(str(int(row[0])) + "," + ",".join("%.17g" % v for v in row[1:]))
        text = "\n".join(lines) + "\n"
        if fh is None:
            return text
        fh.write(text)
        return None

    def export_snapshots(self, directory: str, prefix: str = "theta") -> list[str]:
        """Write each snapshot as JSON named ``<prefix>_<iteration>.json``."""
        os.makedirs(directory, exist_ok=True)
        paths = []
        for it, state in zip(self.snapshot_iters, self.theta_snapshots):
            p = os.path.join(directory, f"{prefix}_{int(it)}.json")
            with open(p, "w") as fh:
                fh.write(state_to_json(state))
            paths.append(p)
        return paths


def _as_batch(data, n: int) -> SampleBatch:
    if isinstance(data, SampleBatch):
        if len(data) < n:
            raise StreamExhausted(f"data has {len(data)} samples, {n} are needed")
        return data[:n] if len(data) > n else data
    taken = list(itertools.islice(iter(data), n))
    if len(taken) < n:
        raise StreamExhausted(f"sample stream ended after {len(taken)} of {n} samples")
    return SampleBatch.from_samples(taken)


def _check_feasible(state: NetworkState, name: str):
    delta = state.weights - state.init_weights
    if state.arch == TWO_LAYER:
        norms = [np.linalg.norm(delta)]
    else:
        norms = np.linalg.norm(delta.reshape(state.config.depth, -1), axis=1)
    if max(norms) > state.radius * (1 + _FEAS_TOL):
        raise ConfigError(f"{name} starts outside its feasible ball")


def sgda_run(
    theta0: NetworkState,
    omega0: NetworkState,
    config: GameConfig,
    data: SampleBatch | Iterable[Sample],
    use_numba: bool | None = None,
) -> TrainTrace:
    """Projected simultaneous stochastic gradient descent-ascent.

    Each step draws the next ``batch_size`` samples, evaluates both gradients
    at the current pair and then applies ``theta -= eta g_theta``,
    ``omega += eta g_omega`` followed by projection onto the balls.

    Raises
    ------
    StreamExhausted
        If ``data`` holds fewer than ``T * batch_size`` samples.
    NonFiniteError
        If a payoff or gradient becomes non-finite; carries the iteration.
    """
    import time

    if theta0.arch != omega0.arch:
        raise ConfigError("both players must use the same architecture")
    _check_feasible(theta0, "theta0")
    _check_feasible(omega0, "omega0")
    T, bs, stride = int(config.T), int(config.batch_size), int(config.snapshot_stride)
    batch = _as_batch(data, T * bs)
    if batch.dim != theta0.input_dim or batch.dim != omega0.input_dim:
        raise DimensionError(f"samples have length {batch.dim}, networks expect {theta0.input_dim}")
    n_snap = T // stride
    trace_log = np.zeros((T, len(TRACE_COLUMNS)))
    t0 = time.perf_counter()
    if theta0.arch == TWO_LAYER:
        W = theta0.matrix().copy()
        V = omega0.matrix().copy()
        snaps_f = np.zeros((n_snap,) + W.shape)
        snaps_u = np.zeros((n_snap,) + V.shape)
        if theta0.width == omega0.width:
            fn = kernels.select_sgda_two_layer(use_numba)
            backend = "numba" if fn is kernels.sgda_two_layer_numba else "numpy"
            status = fn(
                W, theta0.matrix(theta0.init_weights).copy(), np.asarray(theta0.output_signs),
                V, omega0.matrix(omega0.init_weights).copy(), np.asarray(omega0.output_signs),
                batch.coefs, batch.points, batch.x2, batch.b_tilde, batch.ridge_index,
                float(config.alpha), float(config.eta), float(theta0.radius), float(omega0.radius),
                T, bs, stride, trace_log, snaps_f, snaps_u,
            )
        else:
            backend = "generic"
            status, W, V, snaps_f, snaps_u = _sgda_generic(theta0, omega0, config, batch, trace_log)
    else:
        backend = "generic"
        status, W, V, snaps_f, snaps_u = _sgda_generic(theta0, omega0, config, batch, trace_log)
    runtime = time.perf_counter() - t0
    if status != -1:
        raise NonFiniteError(int(status), "payoff or gradient")
    iters = stride * np.arange(1, n_snap + 1)
    theta_snaps = [theta0.with_weights(s.ravel()) for s in snaps_f]
    omega_snaps = [omega0.with_weights(s.ravel()) for s in snaps_u]
    log.debug("sgda_run finished: T=%d backend=%s runtime=%.3fs", T, backend, runtime)
    return TrainTrace(
        config=config,
        log=trace_log,
        snapshot_iters=iters,
        theta_snapshots=theta_snaps,
        omega_snapshots=omega_snaps,
        theta=theta0.with_weights(np.ravel(W)),
        omega=omega0.with_weights(np.ravel(V)),
        runtime=runtime,
        backend=backend,
    )


def _sgda_generic(theta0, omega0, config, batch: SampleBatch, trace_log):
    """Architecture-agnostic loop built from the single-sample gradients."""
    T, bs, stride = int(config.T), int(config.batch_size), int(config.snapshot_stride)
    alpha, eta = float(config.alpha), float(config.eta)
    theta, omega = theta0, omega0
    snaps_f, snaps_u = [], []
    for t in range(T):
        if (t + 1) % stride == 0:
            snaps_f.append(theta.weights.copy())
            snaps_u.append(omega.weights.copy())
        gt = np.zeros_like(theta.weights)
        go = np.zeros_like(omega.weights)
        pay = 0.0
        for s in range(t * bs, (t + 1) * bs):
            sample = batch[s]
            gt += grad_theta(theta, omega, sample, alpha)
            go += grad_omega(theta, omega, sample, alpha)
            pay += payoff(theta, omega, sample, alpha)
        gt /= bs
        go /= bs
        pay /= bs
        nf, nu = float(np.linalg.norm(gt)), float(np.linalg.norm(go))
        if not (math.isfinite(pay) and math.isfinite(nf) and math.isfinite(nu)):
            return t + 1, theta.weights, omega.weights, snaps_f, snaps_u
        wt = project_flat(theta.arch, theta.config, theta.weights - eta * gt, theta.init_weights)
        wo = project_flat(omega.arch, omega.config, omega.weights + eta * go, omega.init_weights)
        theta, omega = theta.with_weights(wt), omega.with_weights(wo)
        trace_log[t] = (t + 1, pay, nf, nu, theta.displacement(), omega.displacement())
    return -1, theta.weights, omega.weights, snaps_f, snaps_u


# -- averaged output -----------------------------------------------------------


class AveragedEstimator:
    """Arithmetic mean of network outputs over a list of snapshots."""

    def __init__(self, snapshots: Sequence[NetworkState]):
        snapshots = list(snapshots)
        if not snapshots:
            raise ConfigError("an averaged estimator needs at least one snapshot")
        first = snapshots[0]
        for s in snapshots[1:]:
            if s.arch != first.arch or s.config != first.config:
                raise ConfigError("all snapshots must share architecture and configuration")
        self.snapshots = snapshots

    def __len__(self) -> int:
        return len(self.snapshots)

    @property
    def input_dim(self) -> int:
        return self.snapshots[0].input_dim

    def __call__(self, x) -> float:
        return float(np.mean([forward(s, x) for s in self.snapshots]))

    def evaluate(self, X) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        acc = np.zeros(X.shape[0])
        for s in self.snapshots:
            acc += evaluate(s, X)
        return acc / len(self.snapshots)

    def evaluate_each(self, X) -> np.ndarray:
        """Outputs of every snapshot, shape ``(n_snapshots, len(X))``."""
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        return np.stack([evaluate(s, X) for s in self.snapshots])


def average_estimator(trace: TrainTrace) -> AveragedEstimator:
    if not trace.theta_snapshots:
        raise ConfigError("trace holds no snapshots; lower snapshot_stride or raise T")
    return AveragedEstimator(trace.theta_snapshots)


__all__ = [
    "GameConfig",
    "TrainTrace",
    "AveragedEstimator",
    "residual",
    "payoff",
    "grad_theta",
    "grad_omega",
    "sgda_run",
    "average_estimator",
    "best_response",
    "TRACE_COLUMNS",
]
