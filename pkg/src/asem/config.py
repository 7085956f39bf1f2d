"""TOML run configuration with strict key checking.

Layout::

    seed = 0                 # mandatory
    out = "runs/demo"        # optional output directory

    [generator]              # kind = "iv" | "panel" | "discrete" | "file"
    [network]                # arch, width, radius, depth
    [game]                   # alpha, eta, T, snapshot_stride, batch_size
    [oracle]                 # action = "tikhonov" | "svd" | "truth"
    [experiment]             # kind = "convergence" | "consistency" | ...
    [audit]                  # gradient audit settings

Unknown keys anywhere are errors.
"""

from __future__ import annotations

import copy
import hashlib
import json
import sys
from dataclasses import dataclass, field, fields

if sys.version_info >= (3, 11):
    import tomllib
else:  # pragma: no cover - exercised on 3.10
    import tomli as tomllib

from .errors import ConfigError
from .generators import Curve, IvDesign, PanelDesign

TOP_KEYS = {"seed", "out", "generator", "network", "game", "oracle", "experiment", "audit"}

GENERATOR_KEYS = {
    "iv": {"kind", "n", "g0", "rho", "confounder_scale", "noise_scale", "dim"},
    "panel": {"kind", "g", "lag", "fe_scale", "noise_scale", "n_units", "n_periods", "regressor_dim", "burn_in", "y_scale"},
    "discrete": {"kind", "n", "K1", "K2", "width", "truth", "amp", "noise_scale", "beta", "truth_norm", "truth_seed"},
    "file": {"kind", "path"},
}
NETWORK_KEYS = {"arch", "width", "radius", "depth", "radius_omega"}
GAME_KEYS = {"alpha", "eta", "T", "snapshot_stride", "batch_size"}
ORACLE_KEYS = {"action", "alpha", "beta", "truth_norm", "truth_seed"}
SWEEP_KEYS = {
    "kind", "widths", "horizons", "alphas", "betas", "eta_scale", "eta_power", "radius", "arch", "depth",
    "seeds", "batch_size", "truth_norm", "truth_seed", "noise_scale",
}
EXPERIMENT_KEYS = {
    "convergence": SWEEP_KEYS,
    "consistency": SWEEP_KEYS,
    "linearization": {"kind", "input_dim", "radius", "widths", "n_samples", "arch", "depth"},
    "regret": {
        "kind", "dim", "radius", "curvature_max", "linear_max", "noise_scale", "bias", "T", "eta", "delta", "M", "K",
        "seeds", "max_violations",
    },
    "decomposition": {"kind", "widths", "T", "alpha", "eta", "radius", "n_frozen"},
    "bias": {"kind", "betas", "alphas", "truth_norm", "truth_seeds"},
}
AUDIT_KEYS = {"arch", "input_dim", "width", "depth", "radius", "n_probes", "alpha", "n_points"}
CURVE_KEYS = {"kind", "amp", "freq"}


def _check_keys(table, allowed, where):
    if not isinstance(table, dict):
        raise ConfigError(f"[{where}] must be a table")
    extra = set(table) - set(allowed)
    if extra:
        raise ConfigError(f"unknown key(s) in [{where}]: {', '.join(sorted(extra))}")


@dataclass
class RunConfig:
    """Parsed configuration; sections are plain dicts validated on load."""

    seed: int
    out: str | None = None
    generator: dict = field(default_factory=dict)
    network: dict = field(default_factory=dict)
    game: dict = field(default_factory=dict)
    oracle: dict = field(default_factory=dict)
    experiment: dict = field(default_factory=dict)
    audit: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {f.name: copy.deepcopy(getattr(self, f.name)) for f in fields(self)}

    def hash(self) -> str:
        text = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(text.encode()).hexdigest()

    def require(self, *sections):
        for s in sections:
            if not getattr(self, s):
                raise ConfigError(f"this command needs a [{s}] section")


def parse_config(doc: dict) -> RunConfig:
    _check_keys(doc, TOP_KEYS, "top level")
    if "seed" not in doc:
        raise ConfigError("a top-level seed is mandatory")
    seed = doc["seed"]
    if isinstance(seed, bool) or not isinstance(seed, int):
        raise ConfigError("seed must be an integer")
    gen = doc.get("generator", {})
    if gen:
        kind = gen.get("kind")
        if kind not in GENERATOR_KEYS:
            raise ConfigError(f"generator kind must be one of {sorted(GENERATOR_KEYS)}, got {kind!r}")
        _check_keys(gen, GENERATOR_KEYS[kind], "generator")
        for key in ("g0", "g"):
            if key in gen:
                _check_keys(gen[key], CURVE_KEYS, f"generator.{key}")
    _check_keys(doc.get("network", {}), NETWORK_KEYS, "network")
    _check_keys(doc.get("game", {}), GAME_KEYS, "game")
    _check_keys(doc.get("oracle", {}), ORACLE_KEYS, "oracle")
    exp = doc.get("experiment", {})
    if exp:
        kind = exp.get("kind")
        if kind not in EXPERIMENT_KEYS:
            raise ConfigError(f"experiment kind must be one of {sorted(EXPERIMENT_KEYS)}, got {kind!r}")
        _check_keys(exp, EXPERIMENT_KEYS[kind], "experiment")
    _check_keys(doc.get("audit", {}), AUDIT_KEYS, "audit")
    return RunConfig(
        seed=seed,
        out=doc.get("out"),
        generator=dict(gen),
        network=dict(doc.get("network", {})),
        game=dict(doc.get("game", {})),
        oracle=dict(doc.get("oracle", {})),
        experiment=dict(exp),
        audit=dict(doc.get("audit", {})),
    )


def load_config(path: str) -> RunConfig:
    try:
        with open(path, "rb") as fh:
            doc = tomllib.load(fh)
    except OSError as err:
        raise ConfigError(f"cannot read config {path}: {err}") from None
    except tomllib.TOMLDecodeError as err:
        raise ConfigError(f"malformed config {path}: {err}") from None
    return parse_config(doc)


def loads_config(text: str) -> RunConfig:
    try:
        return parse_config(tomllib.loads(text))
    except tomllib.TOMLDecodeError as err:
        raise ConfigError(f"malformed config: {err}") from None


def iv_design(section: dict) -> IvDesign:
    kw = {k: v for k, v in section.items() if k not in ("kind", "n")}
    if "g0" in kw:
        kw["g0"] = Curve(**kw["g0"])
    return IvDesign(**kw)


def panel_design(section: dict) -> PanelDesign:
    kw = {k: v for k, v in section.items() if k != "kind"}
    if "g" in kw:
        kw["g"] = Curve(**kw["g"])
    return PanelDesign(**kw)
