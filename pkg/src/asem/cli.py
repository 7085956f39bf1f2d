"""Command-line entry point: ``asem {simulate,train,oracle,experiment,audit}``.

Exit codes: 0 success, 1 validation error, 2 runtime failure,
3 failed invariant or acceptance check.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import math
import os
import sys

import numpy as np

from . import diagnostics as dg
from .config import RunConfig, iv_design, load_config, panel_design
from .errors import ConfigError, DimensionError, NonFiniteError, StreamExhausted
from .game import GameConfig, average_estimator, sgda_run
from .generators import (
    DiscreteDesign,
    default_test_functions,
    discrete_iv_design,
    gen_discrete,
    gen_iv,
    gen_panel,
)
from .nn_models import MULTI_LAYER, TWO_LAYER, DeepConfig, TwoLayerConfig, init_network
from .oracle import operator_from_pmf, primal_loss, svd_system, make_beta_regular_truth, tikhonov_solve
from .samples import SampleBatch

EXIT_OK, EXIT_VALIDATION, EXIT_RUNTIME, EXIT_INVARIANT = 0, 1, 2, 3

log = logging.getLogger("asem")


# -- helpers ---------------------------------------------------------------------------


def _out_dir(cfg: RunConfig, override: str | None) -> str:
    path = override or cfg.out or "."
    os.makedirs(path, exist_ok=True)
    return path


def _header(cfg: RunConfig) -> str:
    return f"# config_hash={cfg.hash()} seed={cfg.seed}\n"


def _write(path: str, text: str):
    with open(path, "w") as fh:
        fh.write(text)
    log.info("wrote %s", path)


def discrete_design(section: dict) -> DiscreteDesign:
    design = discrete_iv_design(
        K1=section.get("K1", 20),
        K2=section.get("K2", 20),
        width=section.get("width", 0.1),
        truth=section.get("truth", "sine"),
        amp=section.get("amp", 2.0),
        noise_scale=section.get("noise_scale", 0.0),
    )
    if "beta" in section:
        op = operator_from_pmf(design.joint_pmf, design.x1_grid, design.x2_grid)
        f = make_beta_regular_truth(
            svd_system(op), section["beta"], section.get("truth_norm", 2.0), section.get("truth_seed", 0)
        )
        design = DiscreteDesign(design.joint_pmf, design.x1_grid, design.x2_grid, f, design.noise_scale)
    return design


def _sample_count(section: dict) -> int:
    n = section.get("n", 10_000)
    if isinstance(n, bool) or not isinstance(n, int) or n < 1:
        raise ConfigError(f"generator n must be a positive integer, got {n!r}")
    return n


def make_samples(section: dict, n: int | None, seed: int) -> SampleBatch:
    kind = section["kind"]
    if kind == "iv":
        return gen_iv(iv_design(section), n or _sample_count(section), seed)
    if kind == "panel":
        return gen_panel(panel_design(section), seed)
    if kind == "discrete":
        return gen_discrete(discrete_design(section), n or _sample_count(section), seed)
    with open(section["path"]) as fh:
        return SampleBatch.from_csv(fh)


def network_config(section: dict, d: int, radius_key: str = "radius"):
    arch = section.get("arch", TWO_LAYER)
    width = section.get("width", 256)
    radius = section.get(radius_key, section.get("radius", 10.0))
    if arch == TWO_LAYER:
        return arch, TwoLayerConfig(d, width, radius)
    if arch == MULTI_LAYER:
        return arch, DeepConfig(d, width, section.get("depth", 2), radius)
    raise ConfigError(f"unknown network arch {arch!r}")


# -- commands -------------------------------------------------------------------------


def cmd_simulate(cfg: RunConfig, args) -> int:
    cfg.require("generator")
    if cfg.generator["kind"] == "file":
        raise ConfigError("simulate needs a synthetic generator, not a file")
    batch = make_samples(cfg.generator, None, cfg.seed)
    out = _out_dir(cfg, args.out)
    _write(os.path.join(out, "samples.csv"), batch.to_csv(comment=f"config_hash={cfg.hash()} seed={cfg.seed}"))
    manifest = {
        "config_hash": cfg.hash(),
        "seed": cfg.seed,
        "design": cfg.generator,
        "n_samples": len(batch),
        "dim": batch.dim,
        "max_points": batch.max_points,
    }
    _write(os.path.join(out, "manifest.json"), json.dumps(manifest, indent=1))
    print(json.dumps(manifest) if args.json else f"wrote {len(batch)} samples to {out}")
    return EXIT_OK


def cmd_train(cfg: RunConfig, args) -> int:
    cfg.require("generator", "game")
    g = cfg.game
    gcfg = GameConfig(
        alpha=g.get("alpha", 0.05),
        eta=g["eta"] if "eta" in g else 0.5 / math.sqrt(g.get("T", 1000)),
        T=g.get("T", 1000),
        snapshot_stride=g.get("snapshot_stride"),
        seed=cfg.seed,
        batch_size=g.get("batch_size", 1),
    )
    data_seed, th_seed, om_seed = dg.run_seeds(cfg.seed)
    need = gcfg.T * gcfg.batch_size
    data = make_samples(cfg.generator, need if cfg.generator["kind"] in ("iv", "discrete") else None, data_seed)
    arch, ncfg = network_config(cfg.network, data.dim)
    _, ocfg = network_config(cfg.network, data.dim, "radius_omega")
    theta0 = init_network(arch, ncfg, th_seed)
    omega0 = init_network(arch, ocfg, om_seed)
    trace = sgda_run(theta0, omega0, gcfg, data)
    out = _out_dir(cfg, args.out)
    _write(os.path.join(out, "trace.csv"), _header(cfg) + trace.to_csv())
    trace.export_snapshots(os.path.join(out, "snapshots"))
    est = average_estimator(trace)
    summary = {
        "config_hash": cfg.hash(),
        "seed": cfg.seed,
        "T": gcfg.T,
        "eta": gcfg.eta,
        "alpha": gcfg.alpha,
        "n_snapshots": len(est),
        "backend": trace.backend,
        "runtime": trace.runtime,
        "dist_theta": trace.theta.displacement(),
        "dist_omega": trace.omega.displacement(),
    }
    if cfg.generator["kind"] == "discrete":
        design = discrete_design(cfg.generator)
        op = operator_from_pmf(design.joint_pmf, design.x1_grid, design.x2_grid)
        fa = dg.oracle_solution(op, design.b, gcfg.alpha)
        L_star = primal_loss(op, fa, design.b, gcfg.alpha)
        f_bar = est.evaluate(design.x1_grid)
        each = est.evaluate_each(design.x1_grid)
        summary["suboptimality"] = primal_loss(op, f_bar, design.b, gcfg.alpha) - L_star
        summary["avg_suboptimality"] = float(np.mean([primal_loss(op, f, design.b, gcfg.alpha) for f in each]) - L_star)
        summary["l2_error_vs_oracle"] = float(np.sqrt(np.sum(op.w1 * (f_bar - fa) ** 2)))
    else:
        res = dg.gmm_objective(est, default_test_functions(), data)
        summary["gmm_objective"] = res.value
        summary["gmm_regularized"] = res.regularized
    _write(os.path.join(out, "summary.json"), json.dumps(summary, indent=1))
    print(json.dumps(summary) if args.json else "\n".join(f"{k}: {v}" for k, v in summary.items()))
    return EXIT_OK


def cmd_oracle(cfg: RunConfig, args) -> int:
    cfg.require("generator", "oracle")
    if cfg.generator["kind"] != "discrete":
        raise ConfigError("the oracle needs a discrete generator section")
    section = dict(cfg.generator)
    o = cfg.oracle
    action = o.get("action", "tikhonov")
    if action == "truth" or "beta" in o:
        section.update({k: o[k] for k in ("beta", "truth_norm", "truth_seed") if k in o})
        section.setdefault("beta", 1.0)
    design = discrete_design(section)
    op = operator_from_pmf(design.joint_pmf, design.x1_grid, design.x2_grid)
    out = _out_dir(cfg, args.out)
    if action == "svd":
        sys_ = svd_system(op)
        _write(os.path.join(out, "singular_values.csv"), _header(cfg) + sys_.to_csv())
        result = {"singular_values": sys_.values.tolist()}
    elif action in ("tikhonov", "truth"):
        alpha = o.get("alpha", 0.05)
        fa = tikhonov_solve(op, design.b, alpha)
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        d = design.dim
        w.writerow(["i"] + [f"x_{j + 1}" for j in range(d)] + ["w1", "f_true", "f_alpha"])
        for i in range(len(fa)):
            w.writerow([i] + ["%.17g" % v for v in design.x1_grid[i]] + ["%.17g" % op.w1[i], "%.17g" % design.f_true[i], "%.17g" % fa[i]])
        _write(os.path.join(out, "oracle.csv"), _header(cfg) + buf.getvalue())
        _write(os.path.join(out, "operator.json"), op.to_json())
        result = {"alpha": alpha, "L_star": primal_loss(op, fa, design.b, alpha)}
    else:
        raise ConfigError(f"unknown oracle action {action!r}")
    print(json.dumps(result) if args.json else f"oracle {action} written to {out}")
    return EXIT_OK


def _sweep_spec(cfg: RunConfig, e: dict) -> dg.SweepSpec:
    cfg.require("generator")
    if cfg.generator["kind"] != "discrete":
        raise ConfigError("convergence and consistency sweeps need a discrete generator")
    kw = {k: (tuple(v) if isinstance(v, list) else v) for k, v in e.items() if k != "kind"}
    kw.setdefault("seeds", tuple(range(cfg.seed, cfg.seed + 5)))
    return dg.SweepSpec(instance=discrete_design(cfg.generator), **kw)


def _decomposition(cfg: RunConfig, e: dict, workers: int) -> dg.SweepResult:
    cfg.require("generator")
    if cfg.generator["kind"] != "discrete":
        raise ConfigError("decomposition runs need a discrete generator")
    widths = e.get("widths", [64, 4096])
    if not widths:
        raise ConfigError("width grid must be nonempty")
    T = e.get("T", 500)
    design = discrete_design(cfg.generator)
    frozen = gen_discrete(design, e.get("n_frozen", 2000), cfg.seed + 7919)
    rows = []
    for m in widths:
        spec = dg.SweepSpec(design, widths=(m,), horizons=(T,), alphas=(e.get("alpha", 0.05),), radius=e.get("radius", 1.0))
        gcfg = GameConfig(e.get("alpha", 0.05), e.get("eta", 0.5 / math.sqrt(T)), T, snapshot_stride=1, seed=cfg.seed)
        ds, ts, os_ = dg.run_seeds(cfg.seed)
        ncfg = spec.network_config(m, design.dim)
        trace = sgda_run(init_network(TWO_LAYER, ncfg, ts), init_network(TWO_LAYER, ncfg, os_), gcfg, gen_discrete(design, T, ds))
        rep = dg.decomposition_report(trace, frozen)
        rows.append({"m": m, **rep.as_dict()})
    cols = ["m", "raw_regret", "gap_iterates", "linearized_regret", "gap_comparator", "n_snapshots", "identity_error", "identity_holds"]
    summary = {"identity_holds": all(r["identity_holds"] for r in rows)}
    return dg.SweepResult(cols, rows, summary, cfg.hash(), [cfg.seed], "decomposition")


def cmd_experiment(cfg: RunConfig, args) -> int:
    cfg.require("experiment")
    e = cfg.experiment
    kind = e["kind"]
    workers = args.workers or os.cpu_count() or 1
    failed = False
    if kind in ("convergence", "consistency"):
        spec = _sweep_spec(cfg, e)
        res = dg.convergence_experiment(spec, workers) if kind == "convergence" else dg.consistency_experiment(spec, workers)
        if kind == "convergence":
            subs = res.column("suboptimality")
            failed = bool(np.any(subs[np.isfinite(subs)] < -1e-10))
    elif kind == "linearization":
        kw = {k: v for k, v in e.items() if k != "kind"}
        kw.setdefault("seed", cfg.seed)
        res = dg.linearization_experiment(**kw)
    elif kind == "regret":
        kw = {k: (tuple(v) if isinstance(v, list) else v) for k, v in e.items() if k != "kind"}
        kw.setdefault("seeds", tuple(range(cfg.seed, cfg.seed + 20)))
        res = dg.regret_harness(dg.RegretSpec(**kw)).to_result()
        failed = not res.summary["passed"]
    elif kind == "decomposition":
        res = _decomposition(cfg, e, workers)
        failed = not res.summary["identity_holds"]
    else:  # bias
        cfg.require("generator")
        design = discrete_design(cfg.generator)
        res = dg.regularization_bias(
            design, e.get("betas", [0.5, 1.0, 2.0]), e.get("alphas", [1e-3, 1e-2, 1e-1]),
            e.get("truth_norm", 1.0), e.get("truth_seeds", list(range(cfg.seed, cfg.seed + 5))),
        )
    res.spec_hash = res.spec_hash or cfg.hash()
    out = _out_dir(cfg, args.out)
    if args.json:
        text = res.to_json()
        _write(os.path.join(out, f"{kind}.json"), text)
        print(text)
    else:
        text = res.to_csv()
        _write(os.path.join(out, f"{kind}.csv"), text)
        print(text, end="")
    return EXIT_INVARIANT if failed else EXIT_OK


def cmd_audit(cfg: RunConfig, args) -> int:
    a = cfg.audit
    d = a.get("input_dim", 4)
    section = {"arch": a.get("arch", TWO_LAYER), "width": a.get("width", 64), "depth": a.get("depth", 2), "radius": a.get("radius", 1.0)}
    arch, ncfg = network_config(section, d)
    theta = init_network(arch, ncfg, cfg.seed)
    omega = init_network(arch, ncfg, cfg.seed + 1)
    rep = dg.gradient_audit(theta, omega, a.get("n_probes", 100), cfg.seed, a.get("alpha", 0.1), a.get("n_points", 2))
    out = _out_dir(cfg, args.out)
    _write(os.path.join(out, "audit.json"), json.dumps({"config_hash": cfg.hash(), "seed": cfg.seed, **rep.as_dict()}, indent=1))
    print(json.dumps(rep.as_dict()) if args.json else f"max relative error {rep.max_rel:.3g} ({'pass' if rep.passed else 'FAIL'})")
    return EXIT_OK if rep.passed else EXIT_INVARIANT


COMMANDS = {
    "simulate": cmd_simulate,
    "train": cmd_train,
    "oracle": cmd_oracle,
    "experiment": cmd_experiment,
    "audit": cmd_audit,
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="asem", description="Adversarial estimation of operator equations with ReLU networks.")
    p.add_argument("command", choices=sorted(COMMANDS))
    p.add_argument("--config", required=True, help="TOML run configuration")
    p.add_argument("--seed", type=int, default=None, help="override the config seed")
    p.add_argument("--out", default=None, help="output directory (overrides the config)")
    p.add_argument("--workers", type=int, default=None, help="parallel sweep workers (default: CPU count)")
    p.add_argument("--json", action="store_true", help="emit JSON instead of CSV / text")
    return p


def main(argv=None) -> int:
    logging.basicConfig(level=os.environ.get("ASEM_LOG", "WARNING").upper(), format="%(levelname)s %(name)s: %(message)s")
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as exc:  # argparse exits 2 on usage errors; map to validation
        return EXIT_OK if exc.code == 0 else EXIT_VALIDATION
    try:
        cfg = load_config(args.config)
        if args.seed is not None:
            cfg.seed = args.seed
        if args.workers is not None and args.workers < 1:
            raise ConfigError("--workers must be positive")
        return COMMANDS[args.command](cfg, args)
    except (ConfigError, DimensionError, TypeError, KeyError) as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_VALIDATION
    except NonFiniteError as err:
        print(f"runtime error: {err} (iteration {err.iteration})", file=sys.stderr)
        return EXIT_RUNTIME
    except (StreamExhausted, RuntimeError, FloatingPointError, OSError, ValueError) as err:
        print(f"runtime error: {err}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
