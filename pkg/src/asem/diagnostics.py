"""Experiment drivers and verification harnesses.

Sweeps return :class:`SweepResult` objects (rows plus a summary) that can be
written as CSV with a leading provenance comment or as JSON.  Cells of a sweep
are independent and can run in a process pool; each cell derives all of its
randomness from ``(spec, seed)``.
"""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import io
import json
import logging
import math
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import _random
from .errors import ConfigError
from .game import AveragedEstimator, GameConfig, TrainTrace, average_estimator, sgda_run
from .generators import DiscreteDesign, IvDesign, gen_discrete
from .nn_models import (
    MULTI_LAYER,
    TWO_LAYER,
    DeepConfig,
    NetworkState,
    TwoLayerConfig,
    evaluate,
    evaluate_linearized,
    forward,
    gradient,
    init_network,
    linearization_gap,
    multi_layer_factory,
    sample_in_ball,
    two_layer_factory,
)
from .oracle import (
    operator_from_pmf,
    primal_loss,
    svd_system,
    make_beta_regular_truth,
    tikhonov_solve,
    wnorm2,
)
from .samples import Sample, SampleBatch

log = logging.getLogger(__name__)


# -- small utilities -----------------------------------------------------------------


def loglog_slope(x, y) -> float:
    """Least-squares slope of ``log y`` against ``log x``; NaN if undefined."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    ok = np.isfinite(x) & np.isfinite(y) & (x > 0) & (y > 0)
    if ok.sum() < 2:
        return float("nan")
    return float(np.polyfit(np.log(x[ok]), np.log(y[ok]), 1)[0])


def _jsonable(obj):
    if dataclasses.is_dataclass(obj) and not isinstance(obj, type):
        return {"type": type(obj).__name__, **{f.name: _jsonable(getattr(obj, f.name)) for f in dataclasses.fields(obj)}}
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    return obj


def spec_hash(spec) -> str:
    """SHA-256 of the canonical JSON form of a spec (or any dataclass / mapping)."""
    text = json.dumps(_jsonable(spec), sort_keys=True, separators=(",", ":"), default=repr)
    return hashlib.sha256(text.encode()).hexdigest()


def _fmt(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return "%.17g" % v
    return str(v)


@dataclass
class SweepResult:
    """Rows of a sweep (dicts sharing ``columns``) plus summary values."""

    columns: list
    rows: list
    summary: dict = field(default_factory=dict)
    spec_hash: str = ""
    seeds: list = field(default_factory=list)
    name: str = "sweep"

    def to_csv(self, fh=None) -> str | None:
        buf = io.StringIO()
        buf.write(f"# {self.name} spec_hash={self.spec_hash} seeds={json.dumps(list(self.seeds))}\n")
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(self.columns)
        for r in self.rows:
            w.writerow([_fmt(r.get(c, "")) for c in self.columns])
        for k, v in self.summary.items():
            buf.write(f"# summary {k}={_fmt(v) if not isinstance(v, (dict, list)) else json.dumps(_jsonable(v))}\n")
        text = buf.getvalue()
        if fh is None:
            return text
        fh.write(text)
        return None

    def to_json(self) -> str:
        return json.dumps(
            {
                "name": self.name,
                "spec_hash": self.spec_hash,
                "seeds": list(self.seeds),
                "rows": _jsonable(self.rows),
                "summary": _jsonable(self.summary),
            },
            indent=1,
        )

    def column(self, name) -> np.ndarray:
        return np.array([r[name] for r in self.rows])


def _run_cells(fn: Callable, cells: list, workers: int) -> list:
    """Evaluate ``fn(cell)`` for every cell, in a process pool if ``workers > 1``.

    Results come back in cell order regardless of completion order.
    """
    if workers <= 1 or len(cells) <= 1:
        return [fn(c) for c in cells]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, cells))


# -- sweep specification -------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class SweepSpec:
    """Grid of training runs on one instance.

    Parameters
    ----------
    instance : DiscreteDesign or IvDesign
        Data source; convergence and consistency sweeps need a discrete design.
    widths, horizons, alphas : sequences
        Grids of ``m``, ``T`` and ``alpha``.
    betas : sequence
        Source-condition exponents for consistency sweeps (ignored elsewhere).
    eta_scale, eta_power : float
        Stepsize rule ``eta = eta_scale * T ** -eta_power``.
    radius : float
        Ball radius ``B`` for both players.
    seeds : sequence of int
        Distinct run seeds; every cell uses the same seed list.
    truth_norm, truth_seed, noise_scale : float, int, float
        Consistency sweeps draw a beta-regular truth with this regularity norm
        and truth seed and add noise of this scale to ``b_tilde``.
    """

    instance: DiscreteDesign | IvDesign
    widths: tuple = (2048,)
    horizons: tuple = (8000,)
    alphas: tuple = (0.05,)
    betas: tuple = (1.0,)
    eta_scale: float = 0.5
    eta_power: float = 0.5
    radius: float = 10.0
    arch: str = TWO_LAYER
    depth: int = 2
    seeds: tuple = (0, 1, 2, 3, 4)
    batch_size: int = 1
    truth_norm: float = 2.0
    truth_seed: int = 0
    noise_scale: float = 0.1
    output: str | None = None

    def __post_init__(self):
        for name in ("widths", "horizons", "alphas", "seeds"):
            vals = tuple(getattr(self, name))
            object.__setattr__(self, name, vals)
            if not vals:
                raise ConfigError(f"{name} grid must be nonempty")
        object.__setattr__(self, "betas", tuple(self.betas))
        if len(set(self.seeds)) != len(self.seeds):
            raise ConfigError("seeds must be distinct")
        if any(int(m) != m or m < 1 for m in self.widths) or any(int(t) != t or t < 1 for t in self.horizons):
            raise ConfigError("widths and horizons must be positive integers")
        if any(not (a >= 0) for a in self.alphas):
            raise ConfigError("alphas must be nonnegative")
        if self.eta_scale < 0 or not self.radius > 0:
            raise ConfigError("eta_scale must be nonnegative and radius positive")
        if self.arch not in (TWO_LAYER, MULTI_LAYER):
            raise ConfigError(f"unknown architecture {self.arch!r}")

    def eta(self, T: int) -> float:
        return self.eta_scale * float(T) ** (-self.eta_power)

    def network_config(self, m: int, d: int):
        if self.arch == TWO_LAYER:
            return TwoLayerConfig(d, int(m), self.radius)
        return DeepConfig(d, int(m), self.depth, self.radius)


def run_seeds(seed: int) -> tuple[int, int, int]:
    """Independent (data, theta, omega) seeds derived from one run seed."""
    a, b, c = _random.spawn_seeds(seed, 3)
    return a, b, c


def _require_discrete(spec: SweepSpec) -> DiscreteDesign:
    if not isinstance(spec.instance, DiscreteDesign):
        raise ConfigError("this sweep needs a discrete instance with a known operator")
    return spec.instance


def oracle_solution(op, b, alpha: float) -> np.ndarray:
    """Tikhonov solution, or the minimum-norm least-squares solution when ``alpha == 0``."""
    if alpha > 0:
        return tikhonov_solve(op, b, alpha)
    S = op.symmetrized()
    g = np.linalg.pinv(S) @ (np.sqrt(op.w2) * np.asarray(b, dtype=np.float64))
    return g / np.sqrt(op.w1)


@dataclass
class FittedRun:
    """Outcome of one training run on a discrete instance."""

    trace: TrainTrace
    estimator: AveragedEstimator
    f_grid: np.ndarray
    runtime: float


def fit_discrete(design: DiscreteDesign, spec: SweepSpec, m: int, T: int, alpha: float, seed: int) -> FittedRun:
    """Train on ``T * batch_size`` fresh samples and tabulate the averaged net on the X1 grid."""
    data_seed, th_seed, om_seed = run_seeds(seed)
    data = gen_discrete(design, T * spec.batch_size, data_seed)
    cfg = spec.network_config(m, design.dim)
    theta0 = init_network(spec.arch, cfg, th_seed)
    omega0 = init_network(spec.arch, cfg, om_seed)
    gcfg = GameConfig(alpha=alpha, eta=spec.eta(T), T=int(T), seed=int(seed), batch_size=spec.batch_size)
    t0 = time.perf_counter()
    trace = sgda_run(theta0, omega0, gcfg, data)
    est = average_estimator(trace)
    f_grid = est.evaluate(design.x1_grid)
    return FittedRun(trace, est, f_grid, time.perf_counter() - t0)


def _nan_row(row: dict, columns: Sequence[str], err: Exception) -> dict:
    for c in columns:
        row.setdefault(c, float("nan"))
    row["status"] = f"{type(err).__name__}: {err}"
    return row


# -- convergence ----------------------------------------------------------------------

CONVERGENCE_COLUMNS = [
    "m", "T", "eta", "alpha", "seed", "suboptimality", "l2_error_vs_oracle",
    "rel_l2_error_vs_oracle", "avg_suboptimality", "runtime", "status",
]


def _convergence_cell(args):
    spec, m, T, alpha, seed = args
    design = spec.instance
    row = {"m": int(m), "T": int(T), "eta": spec.eta(T), "alpha": float(alpha), "seed": int(seed)}
    try:
        op = operator_from_pmf(design.joint_pmf, design.x1_grid, design.x2_grid)
        b = design.b
        fa = oracle_solution(op, b, alpha)
        L_star = primal_loss(op, fa, b, alpha)
        run = fit_discrete(design, spec, m, T, alpha, seed)
        per_snap = run.estimator.evaluate_each(design.x1_grid)
        dist = math.sqrt(wnorm2(run.f_grid - fa, op.w1))
        norm = math.sqrt(wnorm2(fa, op.w1))
        row.update(
            suboptimality=primal_loss(op, run.f_grid, b, alpha) - L_star,
            l2_error_vs_oracle=dist,
            rel_l2_error_vs_oracle=dist / norm if norm > 0 else float("nan"),
            avg_suboptimality=float(np.mean([primal_loss(op, f, b, alpha) for f in per_snap]) - L_star),
            runtime=run.runtime,
            status="ok",
        )
    except Exception as err:  # recorded per row; the sweep continues
        log.warning("convergence cell m=%s T=%s alpha=%s seed=%s failed: %s", m, T, alpha, seed, err)
        row = _nan_row(row, CONVERGENCE_COLUMNS, err)
    return row


def _median_by(rows, keys, value):
    groups: dict = {}
    for r in rows:
        groups.setdefault(tuple(r[k] for k in keys), []).append(r[value])
    return {k: float(np.nanmedian(v)) if np.any(np.isfinite(v)) else float("nan") for k, v in groups.items()}


def convergence_experiment(spec: SweepSpec, workers: int = 1) -> SweepResult:
    """Train over the ``m x T x alpha x seed`` grid and score the averaged nets.

    Summary entries: ``median_suboptimality[m,T,alpha]`` and the log-log slope
    of median suboptimality against ``T`` for every ``(m, alpha)`` pair.
    """
    _require_discrete(spec)
    cells = [(spec, m, T, a, s) for m in spec.widths for T in spec.horizons for a in spec.alphas for s in spec.seeds]
    rows = _run_cells(_convergence_cell, cells, workers)
    med = _median_by(rows, ("m", "T", "alpha"), "suboptimality")
    summary = {"median_suboptimality": {f"m={k[0]},T={k[1]},alpha={k[2]}": v for k, v in med.items()}}
    for m in spec.widths:
        for a in spec.alphas:
            Ts = list(spec.horizons)
            summary[f"slope_T[m={m},alpha={a}]"] = loglog_slope(Ts, [med[(int(m), int(T), float(a))] for T in Ts])
    summary["n_failed"] = sum(r["status"] != "ok" for r in rows)
    return SweepResult(CONVERGENCE_COLUMNS, rows, summary, spec_hash(spec), list(spec.seeds), "convergence")


# -- consistency ----------------------------------------------------------------------

CONSISTENCY_COLUMNS = ["alpha", "beta", "T", "m", "seed", "l2_error_to_truth", "oracle_bias", "runtime", "status"]


def beta_design(spec: SweepSpec, beta: float) -> DiscreteDesign:
    """Copy of the sweep's discrete instance with a beta-regular truth and the sweep's noise scale."""
    design = _require_discrete(spec)
    op = operator_from_pmf(design.joint_pmf, design.x1_grid, design.x2_grid)
    truth = make_beta_regular_truth(svd_system(op), beta, spec.truth_norm, spec.truth_seed)
    return DiscreteDesign(design.joint_pmf, design.x1_grid, design.x2_grid, truth, spec.noise_scale)


def _consistency_cell(args):
    spec, beta, m, T, alpha, seed = args
    row = {"alpha": float(alpha), "beta": float(beta), "T": int(T), "m": int(m), "seed": int(seed)}
    try:
        design = beta_design(spec, beta)
        op = operator_from_pmf(design.joint_pmf, design.x1_grid, design.x2_grid)
        fa = oracle_solution(op, design.b, alpha)
        run = fit_discrete(design, spec, m, T, alpha, seed)
        row.update(
            l2_error_to_truth=wnorm2(run.f_grid - design.f_true, op.w1),
            oracle_bias=wnorm2(fa - design.f_true, op.w1),
            runtime=run.runtime,
            status="ok",
        )
    except Exception as err:
        log.warning("consistency cell beta=%s alpha=%s seed=%s failed: %s", beta, alpha, seed, err)
        row = _nan_row(row, CONSISTENCY_COLUMNS, err)
    return row


def consistency_experiment(spec: SweepSpec, workers: int = 1) -> SweepResult:
    """Squared weighted L2(X1) error of the averaged net to a beta-regular truth over alpha.

    Summary entries: median error per ``(beta, m, T, alpha)``, the minimizing
    alpha per ``(beta, m, T)`` and whether that minimizer is interior to the grid.
    """
    _require_discrete(spec)
    if not spec.betas:
        raise ConfigError("consistency sweeps need a nonempty beta grid")
    cells = [
        (spec, beta, m, T, a, s)
        for beta in spec.betas for m in spec.widths for T in spec.horizons for a in spec.alphas for s in spec.seeds
    ]
    rows = _run_cells(_consistency_cell, cells, workers)
    med = _median_by(rows, ("beta", "m", "T", "alpha"), "l2_error_to_truth")
    alphas = sorted(float(a) for a in spec.alphas)
    summary = {"median_error": {f"beta={k[0]},m={k[1]},T={k[2]},alpha={k[3]}": v for k, v in med.items()}}
    for beta in spec.betas:
        for m in spec.widths:
            for T in spec.horizons:
                vals = [med[(float(beta), int(m), int(T), a)] for a in alphas]
                i = int(np.nanargmin(vals)) if np.any(np.isfinite(vals)) else -1
                key = f"beta={beta},m={m},T={T}"
                summary[f"argmin_alpha[{key}]"] = alphas[i] if i >= 0 else float("nan")
                summary[f"interior_min[{key}]"] = bool(
                    0 < i < len(alphas) - 1 and vals[i] < vals[0] and vals[i] < vals[-1]
                )
    summary["n_failed"] = sum(r["status"] != "ok" for r in rows)
    return SweepResult(CONSISTENCY_COLUMNS, rows, summary, spec_hash(spec), list(spec.seeds), "consistency")


# -- regularization bias --------------------------------------------------------------

BIAS_COLUMNS = ["beta", "alpha", "truth_seed", "bias_sq"]


def regularization_bias(
    design: DiscreteDesign, betas, alphas, truth_norm: float = 1.0, truth_seeds: Sequence[int] = (0, 1, 2, 3, 4)
) -> SweepResult:
    """Oracle bias ``||f^alpha - f||^2`` for beta-regular truths.

    One truth is drawn per seed; the summary holds the log-log slope in alpha
    of the median bias over truth seeds for every beta.
    """
    if not betas or not alphas or not truth_seeds:
        raise ConfigError("beta, alpha and seed grids must be nonempty")
    op = operator_from_pmf(design.joint_pmf, design.x1_grid, design.x2_grid)
    sys = svd_system(op)
    rows, summary = [], {}
    for beta in betas:
        table = np.empty((len(truth_seeds), len(alphas)))
        for i, s in enumerate(truth_seeds):
            f = make_beta_regular_truth(sys, beta, truth_norm, s)
            b = op.apply(f)
            for k, a in enumerate(alphas):
                table[i, k] = wnorm2(tikhonov_solve(op, b, a) - f, op.w1)
                rows.append({"beta": float(beta), "alpha": float(a), "truth_seed": int(s), "bias_sq": table[i, k]})
        summary[f"slope[beta={beta}]"] = loglog_slope(alphas, np.median(table, axis=0))
    spec = {"betas": list(betas), "alphas": list(alphas), "truth_norm": truth_norm, "pmf": design.joint_pmf}
    return SweepResult(BIAS_COLUMNS, rows, summary, spec_hash(spec), list(truth_seeds), "bias")


# -- linearization --------------------------------------------------------------------

LINEARIZATION_COLUMNS = ["m", "mean_sq_value_gap", "mean_sq_grad_gap"]


def linearization_experiment(
    input_dim: int = 4,
    radius: float = 1.0,
    widths: Sequence[int] = (64, 256, 1024, 4096, 16384),
    n_samples: int = 2000,
    seed: int = 0,
    arch: str = TWO_LAYER,
    depth: int = 2,
) -> SweepResult:
    """Mean squared gap between the net and its linearization as the width grows."""
    if not widths:
        raise ConfigError("width grid must be nonempty")
    factory = two_layer_factory(input_dim, radius) if arch == TWO_LAYER else multi_layer_factory(input_dim, depth, radius)
    table = linearization_gap(factory, list(widths), n_samples, seed)
    rows = [{"m": int(m), "mean_sq_value_gap": v, "mean_sq_grad_gap": g} for m, v, g in table]
    summary = {
        "slope_value": loglog_slope([r["m"] for r in rows], [r["mean_sq_value_gap"] for r in rows]),
        "slope_grad": loglog_slope([r["m"] for r in rows], [r["mean_sq_grad_gap"] for r in rows]),
    }
    spec = {"input_dim": input_dim, "radius": radius, "widths": list(widths), "n_samples": n_samples, "arch": arch, "depth": depth}
    return SweepResult(LINEARIZATION_COLUMNS, rows, summary, spec_hash(spec), [seed], "linearization")


# -- regret harness -------------------------------------------------------------------


@dataclass(frozen=True)
class RegretSpec:
    """Online projected gradient descent on random quadratics over a ball.

    The losses are ``f_t(theta) = theta' Q theta / 2 - q_t' theta`` with one
    random positive semidefinite ``Q`` per seed (eigenvalues in
    ``[0, curvature_max]``) and fresh linear terms ``||q_t|| <= linear_max``.
    Updates use ``grad f_t + zeta_t + xi``: ``zeta_t`` uniform on the sphere of
    radius ``noise_scale``, ``xi`` a fixed vector of norm ``bias``.

    ``M`` bounds ``||theta||^2 / 2`` on the ball and ``K`` bounds the update
    norm; both default to the values implied by the other parameters.
    """

    dim: int = 5
    radius: float = 0.5
    curvature_max: float = 0.5
    linear_max: float = 0.1
    noise_scale: float = 0.2
    bias: float = 0.05
    T: int = 2000
    eta: float | None = None
    delta: float = 0.05
    M: float | None = None
    K: float | None = None
    seeds: tuple = tuple(range(20))
    max_violations: int = 3

    def __post_init__(self):
        object.__setattr__(self, "seeds", tuple(self.seeds))
        if self.dim < 1 or self.T < 1:
            raise ConfigError("dim and T must be at least 1")
        for name in ("radius", "curvature_max"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be positive")
        for name in ("linear_max", "noise_scale", "bias"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be nonnegative")
        if not 0 < self.delta < 1:
            raise ConfigError("delta must lie in (0, 1)")
        if not self.seeds:
            raise ConfigError("seeds must be nonempty")
        if self.M is not None and self.M < self.M_implied:
            raise ConfigError(f"M={self.M} is below sup ||theta||^2/2 = {self.M_implied}")
        if self.K is not None and self.K < self.K_implied:
            raise ConfigError(f"K={self.K} is below the implied update bound {self.K_implied}")
        if self.eta is not None and not self.eta > 0:
            raise ConfigError("eta must be positive")

    @property
    def M_implied(self) -> float:
        return 0.5 * self.radius**2

    @property
    def K_implied(self) -> float:
        return self.curvature_max * self.radius + self.linear_max + self.noise_scale + self.bias

    @property
    def M_value(self) -> float:
        return self.M_implied if self.M is None else self.M

    @property
    def K_value(self) -> float:
        return self.K_implied if self.K is None else self.K

    @property
    def eta_value(self) -> float:
        if self.eta is not None:
            return self.eta
        return math.sqrt(2.0 * self.M_value / (self.K_value * self.T))


def ball_quadratic_min(Q, q, radius: float) -> np.ndarray:
    """Minimizer of ``x' Q x / 2 - q' x`` over ``||x|| <= radius`` for PSD ``Q``.

    Interior stationary point if feasible, otherwise the boundary point
    ``(Q + lam I)^{-1} q`` with ``lam >= 0`` found by bisection on the norm.
    """
    evals, evecs = np.linalg.eigh(Q)
    qt = evecs.T @ q
    tol = 1e-12 * max(1.0, float(np.max(np.abs(evals))))
    if np.all(evals > tol):
        x = qt / evals
        if np.linalg.norm(x) <= radius:
            return evecs @ x
    elif np.linalg.norm(qt[evals <= tol]) <= 1e-14:
        keep = evals > tol
        x = np.zeros_like(qt)
        x[keep] = qt[keep] / evals[keep]
        if np.linalg.norm(x) <= radius:
            return evecs @ x

    def norm_at(lam):
        return np.linalg.norm(qt / (evals + lam))

    lo, hi = 0.0, max(1.0, float(np.linalg.norm(q)) / radius)
    while norm_at(hi) > radius:
        hi *= 2.0
    lo = max(lo, 1e-300 - float(evals.min()))
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if norm_at(mid) > radius:
            lo = mid
        else:
            hi = mid
    return evecs @ (qt / (evals + hi))


@dataclass
class RegretReport:
    rows: list
    violations: int
    passed: bool
    spec: RegretSpec

    columns = ["seed", "regret", "bound", "term_step", "term_radius", "term_noise", "term_bias", "violated"]

    def to_result(self) -> SweepResult:
        return SweepResult(
            self.columns, self.rows, {"violations": self.violations, "passed": self.passed},
            spec_hash(self.spec), list(self.spec.seeds), "regret",
        )


def regret_bound_terms(spec: RegretSpec, bias_norms) -> dict:
    M, K, eta, T = spec.M_value, spec.K_value, spec.eta_value, spec.T
    return {
        "term_step": eta * K / 2.0,
        "term_radius": M / (T * eta),
        "term_noise": 8.0 * K * math.sqrt(M * math.log(1.0 / spec.delta) / T),
        "term_bias": 2.0 * math.sqrt(2.0 * M) / T * float(np.sum(bias_norms)),
    }


def regret_run(spec: RegretSpec, seed: int) -> dict:
    """One online run; returns average regret against the best fixed point and the bound."""
    rng = _random.make_rng(seed)
    n, R = spec.dim, spec.radius
    evecs = np.linalg.qr(_random.normal(rng, (n, n)))[0]
    evals = spec.curvature_max * rng.random(n)
    Q = (evecs * evals) @ evecs.T
    qs = _random.unit_sphere(rng, spec.T, n) * (spec.linear_max * rng.random((spec.T, 1)))
    zetas = _random.unit_sphere(rng, spec.T, n) * spec.noise_scale
    xi = _random.unit_sphere(rng, 1, n)[0] * spec.bias
    eta = spec.eta_value
    theta = np.zeros(n)
    losses = np.empty(spec.T)
    for t in range(spec.T):
        losses[t] = 0.5 * theta @ Q @ theta - qs[t] @ theta
        step = Q @ theta - qs[t] + zetas[t] + xi
        theta = theta - eta * step
        nrm = np.linalg.norm(theta)
        if nrm > R:
            theta *= R / nrm
    qbar = qs.mean(axis=0)
    best = ball_quadratic_min(Q, qbar, R)
    best_loss = 0.5 * best @ Q @ best - qbar @ best
    regret = float(losses.mean() - best_loss)
    terms = regret_bound_terms(spec, np.full(spec.T, spec.bias))
    bound = float(sum(terms.values()))
    return {"seed": int(seed), "regret": regret, "bound": bound, **terms, "violated": regret > bound}


def regret_harness(spec: RegretSpec = RegretSpec()) -> RegretReport:
    """Run every seed and count violations of the high-probability regret bound."""
    rows = [regret_run(spec, s) for s in spec.seeds]
    v = sum(r["violated"] for r in rows)
    return RegretReport(rows, v, v <= spec.max_violations, spec)


# -- decomposition of the regret ------------------------------------------------------


@dataclass
class DecompositionReport:
    """Averaged terms of the regret split through the linearized game.

    ``raw_regret = gap_iterates + linearized_regret + gap_comparator``.
    """

    raw_regret: float
    gap_iterates: float
    linearized_regret: float
    gap_comparator: float
    n_snapshots: int
    identity_error: float

    @property
    def identity_holds(self) -> bool:
        return self.identity_error <= 1e-8

    def as_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["identity_holds"] = self.identity_holds
        return d


def _batch_payoffs(f_vals, u_vals, batch: SampleBatch, alpha: float) -> float:
    """Mean payoff on a batch from tabulated ``f`` at every point and ``u`` at ``x2``."""
    res = np.sum(batch.coefs * f_vals, axis=1) - batch.b_tilde
    f_r = f_vals[np.arange(len(batch)), batch.ridge_index]
    return float(np.mean(res * u_vals - 0.5 * u_vals**2 + 0.5 * alpha * f_r**2))


def _tabulate(state: NetworkState, batch: SampleBatch, linear: bool):
    ev = evaluate_linearized if linear else evaluate
    n, P, d = batch.points.shape
    f = ev(state, batch.points.reshape(n * P, d)).reshape(n, P)
    return f


class _PairEvaluator:
    """Exact and linearized outputs of nets sharing one initialization on fixed inputs.

    For two-layer nets the initial activation pattern is cached and a single
    matmul per state serves both outputs.
    """

    def __init__(self, init_state: NetworkState, X: np.ndarray):
        self.X = X
        self.fast = init_state.arch == TWO_LAYER
        if self.fast:
            self.W0 = np.asarray(init_state.init_weights)
            self.mask0 = X @ init_state.matrix(init_state.init_weights).T > 0.0

    def __call__(self, state: NetworkState):
        if not (self.fast and np.array_equal(state.init_weights, self.W0)):
            return evaluate(state, self.X), evaluate_linearized(state, self.X)
        Z = self.X @ state.matrix().T
        scale = 1.0 / math.sqrt(state.width)
        return scale * (np.maximum(Z, 0.0) @ state.output_signs), scale * ((Z * self.mask0) @ state.output_signs)


def decomposition_report(trace: TrainTrace, frozen_batch: SampleBatch, comparator: NetworkState | None = None) -> DecompositionReport:
    """Split the average payoff regret of the primal iterates on a frozen batch.

    With ``phi_t(theta)`` the batch-mean payoff against the dual snapshot
    ``omega_t`` and ``phi_hat_t`` the same with both nets replaced by their
    linearizations around initialization, the report holds the averages of
    ``phi_t(theta_t) - phi_hat_t(theta_t)``,
    ``phi_hat_t(theta_t) - phi_hat_t(theta_c)`` and
    ``phi_hat_t(theta_c) - phi_t(theta_c)`` over the stored snapshots.
    """
    if not trace.theta_snapshots:
        raise ConfigError("the trace holds no snapshots to decompose")
    comparator = trace.theta if comparator is None else comparator
    alpha = trace.config.alpha
    n, P, d = frozen_batch.points.shape
    f_pair = _PairEvaluator(trace.theta_snapshots[0], frozen_batch.points.reshape(n * P, d))
    u_pair = _PairEvaluator(trace.omega_snapshots[0], frozen_batch.x2)
    fc, fc_hat = (v.reshape(n, P) for v in f_pair(comparator))
    phi_it, phi_hat_it, phi_c, phi_hat_c = [], [], [], []
    for th, om in zip(trace.theta_snapshots, trace.omega_snapshots):
        u, u_hat = u_pair(om)
        f, f_hat = (v.reshape(n, P) for v in f_pair(th))
        phi_it.append(_batch_payoffs(f, u, frozen_batch, alpha))
        phi_hat_it.append(_batch_payoffs(f_hat, u_hat, frozen_batch, alpha))
        phi_c.append(_batch_payoffs(fc, u, frozen_batch, alpha))
        phi_hat_c.append(_batch_payoffs(fc_hat, u_hat, frozen_batch, alpha))
    phi_it, phi_hat_it = np.array(phi_it), np.array(phi_hat_it)
    phi_c, phi_hat_c = np.array(phi_c), np.array(phi_hat_c)
    raw = float(np.mean(phi_it - phi_c))
    t16 = float(np.mean(phi_it - phi_hat_it))
    t17 = float(np.mean(phi_hat_it - phi_hat_c))
    t16b = float(np.mean(phi_hat_c - phi_c))
    return DecompositionReport(raw, t16, t17, t16b, len(phi_it), abs(t16 + t17 + t16b - raw))


# -- GMM objective --------------------------------------------------------------------


@dataclass
class GmmResult:
    value: float
    psi: np.ndarray
    gram: np.ndarray
    regularized: bool


def _evaluator(g):
    if isinstance(g, NetworkState):
        return lambda X: evaluate(g, X)
    if isinstance(g, AveragedEstimator):
        return g.evaluate
    if callable(g):
        return lambda X: np.asarray(g(X), dtype=np.float64)
    raise ConfigError("g must be a NetworkState, AveragedEstimator or a callable on point arrays")


def gmm_moments(g, test_functions, samples: SampleBatch):
    """Moment violations ``psi_j = mean(resid * h_j(x2))`` and Gram matrix ``mean(h h')``.

    ``resid = b_tilde - sum_k c_k g(x_k)``.
    """
    if not test_functions:
        raise ConfigError("at least one test function is required")
    fns = list(test_functions.values()) if isinstance(test_functions, dict) else list(test_functions)
    ev = _evaluator(g)
    n, P, d = samples.points.shape
    gv = ev(samples.points.reshape(n * P, d)).reshape(n, P)
    resid = samples.b_tilde - np.sum(samples.coefs * gv, axis=1)
    H = np.stack([np.asarray(h(samples.x2), dtype=np.float64) for h in fns], axis=1)
    return H.T @ resid / n, H.T @ H / n


def gmm_objective(g, test_functions, samples: SampleBatch, regularize: bool = True) -> GmmResult:
    """``psi' Lambda^{-1} psi / 2``, the inner maximum over the span of the test functions.

    A singular ``Lambda`` gets ``1e-10 * trace(Lambda) / M`` added to its
    diagonal when ``regularize`` is set and raises otherwise.
    """
    psi, Lam = gmm_moments(g, test_functions, samples)
    M = len(psi)
    regularized = False
    try:
        if np.linalg.cond(Lam) > 1e12:
            raise np.linalg.LinAlgError("ill-conditioned Gram matrix")
        L = np.linalg.cholesky(Lam)
    except np.linalg.LinAlgError:
        if not regularize:
            raise ConfigError("test-function Gram matrix is singular") from None
        Lam = Lam + 1e-10 * np.trace(Lam) / M * np.eye(M)
        L = np.linalg.cholesky(Lam)
        regularized = True
    z = np.linalg.solve(L, psi)
    return GmmResult(0.5 * float(z @ z), psi, Lam, regularized)


def gmm_inner_value(coeffs, psi, gram) -> float:
    """Inner objective ``a' psi - a' Lambda a / 2`` for span coefficients ``a``."""
    a = np.asarray(coeffs, dtype=np.float64)
    return float(a @ psi - 0.5 * a @ gram @ a)


def gmm_direct_max(g, test_functions, samples: SampleBatch, tol: float = 1e-14, max_iter: int = 10_000) -> float:
    """Maximize the inner objective over span coefficients by conjugate gradients."""
    psi, Lam = gmm_moments(g, test_functions, samples)
    a = np.zeros_like(psi)
    r = psi - Lam @ a
    p = r.copy()
    rr = r @ r
    for _ in range(max_iter):
        if rr <= tol * tol * max(1.0, psi @ psi):
            break
        Ap = Lam @ p
        step = rr / (p @ Ap)
        a += step * p
        r -= step * Ap
        rr_new = r @ r
        p = r + (rr_new / rr) * p
        rr = rr_new
    return gmm_inner_value(a, psi, Lam)


# -- gradient audit -------------------------------------------------------------------


@dataclass
class AuditReport:
    max_rel_theta: float
    max_rel_omega: float
    max_rel_net: float
    n_probes: int
    n_resampled: int
    tolerance: float = 1e-5

    @property
    def max_rel(self) -> float:
        return max(self.max_rel_theta, self.max_rel_omega, self.max_rel_net)

    @property
    def passed(self) -> bool:
        return self.max_rel <= self.tolerance

    def as_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d.update(max_rel=self.max_rel, passed=self.passed)
        return d


def _preactivations(state: NetworkState, x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if state.arch == TWO_LAYER:
        return state.matrix() @ x
    scale = 1.0 / math.sqrt(state.width)
    h = state.input_embed @ x
    out = []
    for Wh in state.matrix():
        z = Wh @ h
        out.append(z)
        h = scale * np.maximum(z, 0.0)
    return np.concatenate(out)


def _kink_free(state: NetworkState, points, margin: float) -> bool:
    return all(np.min(np.abs(_preactivations(state, x))) > margin for x in points)


def _directional_error(fn, grad, w, directions, h) -> float:
    gnorm = max(float(np.linalg.norm(grad)), 1e-300)
    worst = 0.0
    for v in directions:
        fd = (fn(w + h * v) - fn(w - h * v)) / (2.0 * h)
        worst = max(worst, abs(fd - float(grad @ v)) / gnorm)
    return worst


def gradient_audit(
    theta: NetworkState,
    omega: NetworkState,
    n_probes: int = 100,
    seed: int = 0,
    alpha: float = 0.1,
    n_points: int = 2,
    n_directions: int = 6,
    step: float = 1e-6,
    margin: float = 1e-3,
    tolerance: float = 1e-5,
) -> AuditReport:
    """Compare analytic gradients with central differences along random directions.

    Each probe draws weights uniformly in both feasible balls, unit-sphere
    inputs, coefficients and a target, resampling until every pre-activation
    exceeds ``margin`` in magnitude.  The error of a probe is
    ``|fd - g.v| / ||g||`` for unit directions ``v``.
    """
    from .game import grad_omega, grad_theta, payoff

    rng = _random.make_rng(seed)
    d = theta.input_dim
    worst = [0.0, 0.0, 0.0]
    resampled = 0
    for _ in range(n_probes):
        while True:
            th = sample_in_ball(theta, rng)
            om = sample_in_ball(omega, rng)
            pts = _random.unit_sphere(rng, n_points + 1, d)
            if _kink_free(th, pts[:-1], margin) and _kink_free(om, pts[-1:], margin):
                break
            resampled += 1
        coefs = rng.uniform(-1.0, 1.0, n_points)
        sample = Sample(tuple((float(c), x) for c, x in zip(coefs, pts[:-1])), pts[-1], float(rng.normal()), int(rng.integers(n_points)))
        dirs_t = _random.unit_sphere(rng, n_directions, th.weights.size)
        dirs_o = _random.unit_sphere(rng, n_directions, om.weights.size)
        worst[0] = max(worst[0], _directional_error(
            lambda w: payoff(th.with_weights(w), om, sample, alpha), grad_theta(th, om, sample, alpha), th.weights, dirs_t, step))
        worst[1] = max(worst[1], _directional_error(
            lambda w: payoff(th, om.with_weights(w), sample, alpha), grad_omega(th, om, sample, alpha), om.weights, dirs_o, step))
        x = pts[0]
        worst[2] = max(worst[2], _directional_error(
            lambda w: forward(th.with_weights(w), x), gradient(th, x), th.weights, dirs_t, step))
    return AuditReport(worst[0], worst[1], worst[2], n_probes, resampled, tolerance)


__all__ = [
    "SweepSpec", "SweepResult", "RegretSpec", "RegretReport", "DecompositionReport", "GmmResult", "AuditReport",
    "convergence_experiment", "consistency_experiment", "regularization_bias", "linearization_experiment",
    "regret_harness", "regret_run", "ball_quadratic_min", "decomposition_report", "gmm_objective",
    "gmm_direct_max", "gmm_moments", "gradient_audit", "loglog_slope", "spec_hash", "oracle_solution",
    "fit_discrete", "beta_design", "run_seeds",
]
