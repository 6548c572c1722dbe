"""Experiment configuration files (YAML) with strict parsing.

Every mapping is checked against a fixed key set; the first unknown,
missing or mistyped entry raises :class:`ConfigError` naming its dotted path
(``network.layers[1].activation.variance``).  :func:`config_to_dict` is the
exact inverse of :func:`parse_config` on valid input.
"""
from __future__ import annotations

import math
import re
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any

import yaml

from .channels import Activation, Layer, NetworkSpec, Prior
from .metrics import AXES, SweepSpec
from .replica_solver import SolverOptions
from .simulator import ORACLES


class _Loader(yaml.SafeLoader):
    pass


# YAML 1.1 wants a dot in floats; accept plain scientific notation like 1e-9 too
_Loader.add_implicit_resolver(
    "tag:yaml.org,2002:float",
    re.compile(r"""^(?:[-+]?(?:[0-9][0-9_]*)\.[0-9_]*(?:[eE][-+]?[0-9]+)?
    |[-+]?(?:[0-9][0-9_]*)(?:[eE][-+]?[0-9]+)
    |\.[0-9_]+(?:[eE][-+]?[0-9]+)?
    |[-+]?\.(?:inf|Inf|INF)
    |\.(?:nan|NaN|NAN))$""", re.X),
    list("-+0123456789."),
)


class ConfigError(ValueError):
    def __init__(self, path: str, message: str):
        super().__init__(f"{path or '<root>'}: {message}")
        self.path = path


@dataclass(frozen=True)
class SimulateConfig:
    dims: tuple[int, ...]
    n_trials: int
    seed: int = 0
    redraw_matrices: bool = True
    oracle_kind: str = "brute_force"
    moments: tuple[tuple[int, int], ...] = ((1, 1), (0, 2), (2, 0), (2, 2))
    threshold: float = 4.0
    allowance: float = 0.05


@dataclass(frozen=True)
class SweepConfig:
    axis: str
    values: tuple[float, ...]
    layer: int | None = None


@dataclass(frozen=True)
class OutputConfig:
    path: str | None = None
    format: str = "csv"


@dataclass(frozen=True)
class ExperimentConfig:
    network: NetworkSpec
    solver: SolverOptions = field(default_factory=SolverOptions)
    simulate: SimulateConfig | None = None
    sweep: SweepConfig | None = None
    output: OutputConfig = field(default_factory=OutputConfig)


# ---------------------------------------------------------------------------
# typed accessors


def _mapping(node: Any, path: str, required: set[str], optional: set[str]) -> dict:
    if not isinstance(node, dict):
        raise ConfigError(path, f"expected a mapping, got {type(node).__name__}")
    for key in node:
        if key not in required | optional:
            allowed = ", ".join(sorted(required | optional))
            raise ConfigError(_join(path, key), f"unknown key (allowed: {allowed})")
    for key in sorted(required):
        if key not in node:
            raise ConfigError(_join(path, key), "missing required key")
    return node


def _join(path: str, key) -> str:
    return f"{path}.{key}" if path else str(key)


def _number(node: Any, path: str, *, positive=False, nonneg=False) -> float:
    if isinstance(node, bool) or not isinstance(node, (int, float)):
        raise ConfigError(path, f"expected a number, got {node!r}")
    v = float(node)
    if not math.isfinite(v):
        raise ConfigError(path, "must be finite")
    if positive and not v > 0:
        raise ConfigError(path, "must be > 0")
    if nonneg and v < 0:
        raise ConfigError(path, "must be >= 0")
    return v


def _int(node: Any, path: str, minimum: int | None = None) -> int:
    if isinstance(node, bool) or not isinstance(node, int):
        raise ConfigError(path, f"expected an integer, got {node!r}")
    if minimum is not None and node < minimum:
        raise ConfigError(path, f"must be >= {minimum}")
    return node


def _bool(node: Any, path: str) -> bool:
    if not isinstance(node, bool):
        raise ConfigError(path, f"expected true/false, got {node!r}")
    return node


def _choice(node: Any, path: str, choices) -> str:
    if node not in choices:
        raise ConfigError(path, f"expected one of {tuple(choices)}, got {node!r}")
    return node


def _list(node: Any, path: str, nonempty=True) -> list:
    if not isinstance(node, list):
        raise ConfigError(path, f"expected a list, got {type(node).__name__}")
    if nonempty and not node:
        raise ConfigError(path, "must not be empty")
    return node


def _build(path: str, ctor, *args, **kwargs):
    try:
        return ctor(*args, **kwargs)
    except ValueError as exc:
        raise ConfigError(path, str(exc)) from None


# ---------------------------------------------------------------------------
# sections


def _prior(node, path) -> Prior:
    kind = _choice(_mapping(node, path, {"kind"}, {"values", "weights", "mean", "variance",
                                                    "sparsity"}).get("kind"),
                   _join(path, "kind"), ("discrete", "gaussian", "bernoulli_gaussian"))
    keys = {"discrete": ({"values"}, {"weights"}), "gaussian": (set(), {"mean", "variance"}),
            "bernoulli_gaussian": ({"sparsity"}, {"variance"})}[kind]
    _mapping(node, path, {"kind"} | keys[0], keys[1])
    if kind == "discrete":
        vals = [_number(v, f"{path}.values[{i}]")
                for i, v in enumerate(_list(node["values"], _join(path, "values")))]
        wts = None
        if "weights" in node:
            wts = [_number(w, f"{path}.weights[{i}]", nonneg=True)
                   for i, w in enumerate(_list(node["weights"], _join(path, "weights")))]
            if len(wts) != len(vals):
                raise ConfigError(_join(path, "weights"), "needs one weight per value")
        return _build(path, Prior.discrete, vals, wts)
    var = _number(node.get("variance", 1.0), _join(path, "variance"), nonneg=True)
    if kind == "gaussian":
        return _build(path, Prior.gaussian, _number(node.get("mean", 0.0), _join(path, "mean")),
                      var)
    return _build(path, Prior.bernoulli_gaussian,
                  _number(node["sparsity"], _join(path, "sparsity")), var)


def _activation(node, path) -> Activation:
    _mapping(node, path, {"kind"}, {"variance", "levels", "thresholds"})
    kind = _choice(node["kind"], _join(path, "kind"), ("awgn", "identity", "sign", "discrete_map"))
    allowed = {"awgn": ({"variance"}, set()), "identity": (set(), set()),
               "sign": (set(), {"variance"}),
               "discrete_map": ({"levels"}, {"thresholds", "variance"})}[kind]
    _mapping(node, path, {"kind"} | allowed[0], allowed[1])
    var = _number(node.get("variance", 0.0), _join(path, "variance"), nonneg=True)
    if kind == "discrete_map":
        levels = [_number(v, f"{path}.levels[{i}]")
                  for i, v in enumerate(_list(node["levels"], _join(path, "levels")))]
        thr = [_number(v, f"{path}.thresholds[{i}]")
               for i, v in enumerate(_list(node.get("thresholds", []), _join(path, "thresholds"),
                                           nonempty=False))]
        return _build(path, Activation.discrete_map, levels, thr, var)
    return _build(path, Activation, kind, variance=var)


def _network(node, path) -> NetworkSpec:
    _mapping(node, path, {"prior", "layers"}, set())
    prior = _prior(node["prior"], _join(path, "prior"))
    layers = []
    for i, lay in enumerate(_list(node["layers"], _join(path, "layers"))):
        lp = f"{path}.layers[{i}]"
        _mapping(lay, lp, {"alpha", "activation"}, set())
        alpha = _number(lay["alpha"], _join(lp, "alpha"), positive=True)
        layers.append(Layer(alpha, _activation(lay["activation"], _join(lp, "activation"))))
    return NetworkSpec(prior, tuple(layers))


def _floats(node, path) -> tuple[float, ...]:
    return tuple(_number(v, f"{path}[{i}]") for i, v in enumerate(_list(node, path)))


def _solver(node, path) -> SolverOptions:
    keys = {f.name for f in fields(SolverOptions)}
    _mapping(node, path, set(), keys)
    kw: dict[str, Any] = {}
    if "damping" in node:
        kw["damping"] = _number(node["damping"], _join(path, "damping"))
    if "tol" in node:
        kw["tol"] = _number(node["tol"], _join(path, "tol"), positive=True)
    if "max_iter" in node:
        kw["max_iter"] = _int(node["max_iter"], _join(path, "max_iter"), 1)
    if "grid_order" in node:
        kw["grid_order"] = _int(node["grid_order"], _join(path, "grid_order"), 2)
    if "init_style" in node:
        kw["init_style"] = _choice(node["init_style"], _join(path, "init_style"),
                                   ("cold", "warm", "multi_start"))
    if "init" in node:
        kw["init"] = _floats(node["init"], _join(path, "init"))
    if "starts" in node:
        sp = _join(path, "starts")
        kw["starts"] = tuple(_floats(s, f"{sp}[{i}]") for i, s in enumerate(_list(node["starts"], sp)))
    return _build(path, SolverOptions, **kw)


def _simulate(node, path, net: NetworkSpec) -> SimulateConfig:
    keys = {f.name for f in fields(SimulateConfig)}
    _mapping(node, path, {"dims", "n_trials"}, keys - {"dims", "n_trials"})
    dp = _join(path, "dims")
    dims = tuple(_int(v, f"{dp}[{i}]", 1) for i, v in enumerate(_list(node["dims"], dp)))
    if len(dims) != net.n_layers + 1:
        raise ConfigError(dp, f"needs {net.n_layers + 1} entries, one per layer boundary")
    for l, alpha in enumerate(net.alphas):
        if abs(dims[l + 1] - alpha * dims[l]) > 1.0:
            raise ConfigError(dp, f"dims[{l + 1}]/dims[{l}] does not match alpha = {alpha}")
    kw: dict[str, Any] = dict(dims=dims, n_trials=_int(node["n_trials"], _join(path, "n_trials"), 0))
    if "seed" in node:
        kw["seed"] = _int(node["seed"], _join(path, "seed"), 0)
    if "redraw_matrices" in node:
        kw["redraw_matrices"] = _bool(node["redraw_matrices"], _join(path, "redraw_matrices"))
    if "oracle_kind" in node:
        kw["oracle_kind"] = _choice(node["oracle_kind"], _join(path, "oracle_kind"), ORACLES)
    if "moments" in node:
        mp = _join(path, "moments")
        pairs = []
        for i, pair in enumerate(_list(node["moments"], mp)):
            pp = f"{mp}[{i}]"
            if not isinstance(pair, list) or len(pair) != 2:
                raise ConfigError(pp, "expected a pair [i, j]")
            pairs.append((_int(pair[0], pp, 0), _int(pair[1], pp, 0)))
        kw["moments"] = tuple(pairs)
    if "threshold" in node:
        kw["threshold"] = _number(node["threshold"], _join(path, "threshold"), positive=True)
    if "allowance" in node:
        kw["allowance"] = _number(node["allowance"], _join(path, "allowance"), nonneg=True)
    return SimulateConfig(**kw)


def _sweep(node, path, net: NetworkSpec) -> SweepConfig:
    _mapping(node, path, {"axis", "values"}, {"layer"})
    axis = _choice(node["axis"], _join(path, "axis"), AXES)
    values = _floats(node["values"], _join(path, "values"))
    layer = None
    if node.get("layer") is not None:
        layer = _int(node["layer"], _join(path, "layer"), 0)
        if layer >= net.n_layers:
            raise ConfigError(_join(path, "layer"), "layer index out of range")
    _build(path, SweepSpec, axis, values, net, layer)
    return SweepConfig(axis, values, layer)


def _output(node, path) -> OutputConfig:
    _mapping(node, path, set(), {"path", "format"})
    out_path = node.get("path")
    if out_path is not None and not isinstance(out_path, str):
        raise ConfigError(_join(path, "path"), "expected a string")
    fmt = _choice(node.get("format", "csv"), _join(path, "format"), ("csv", "table"))
    return OutputConfig(out_path, fmt)


def parse_config(data: Any) -> ExperimentConfig:
    """Validate a decoded YAML document and build the typed config."""
    _mapping(data, "", {"network"}, {"solver", "simulate", "sweep", "output"})
    net = _network(data["network"], "network")
    return ExperimentConfig(
        network=net,
        solver=_solver(data.get("solver", {}), "solver"),
        simulate=_simulate(data["simulate"], "simulate", net) if "simulate" in data else None,
        sweep=_sweep(data["sweep"], "sweep", net) if "sweep" in data else None,
        output=_output(data.get("output", {}), "output"),
    )


def load_config(path: str | Path) -> ExperimentConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError("", f"cannot read {path}: {exc.strerror}") from None
    try:
        data = yaml.load(text, Loader=_Loader)
    except yaml.YAMLError as exc:
        raise ConfigError("", f"invalid YAML: {exc}") from None
    return parse_config(data)


# ---------------------------------------------------------------------------
# serialisation


def _prior_dict(p: Prior) -> dict:
    if p.kind == "discrete":
        return {"kind": "discrete", "values": p.values.tolist(), "weights": p.weights.tolist()}
    if p.kind == "gaussian":
        return {"kind": "gaussian", "mean": p.mean, "variance": p.variance}
    return {"kind": "bernoulli_gaussian", "sparsity": p.sparsity, "variance": p.variance}


def _activation_dict(a: Activation) -> dict:
    out: dict[str, Any] = {"kind": a.kind}
    if a.kind != "identity":
        out["variance"] = a.variance
    if a.kind == "discrete_map":
        out["levels"] = list(a.levels)
        out["thresholds"] = list(a.thresholds)
    return out


def config_to_dict(cfg: ExperimentConfig) -> dict:
    s = cfg.solver
    solver: dict[str, Any] = {"damping": s.damping, "tol": s.tol, "max_iter": s.max_iter,
                              "grid_order": s.grid_order, "init_style": s.init_style}
    if s.init is not None:
        solver["init"] = list(s.init)
    if s.starts is not None:
        solver["starts"] = [list(v) for v in s.starts]
    out: dict[str, Any] = {
        "network": {
            "prior": _prior_dict(cfg.network.prior),
            "layers": [{"alpha": lay.alpha, "activation": _activation_dict(lay.activation)}
                       for lay in cfg.network.layers],
        },
        "solver": solver,
    }
    if cfg.simulate is not None:
        sim = cfg.simulate
        out["simulate"] = {"dims": list(sim.dims), "n_trials": sim.n_trials, "seed": sim.seed,
                           "redraw_matrices": sim.redraw_matrices, "oracle_kind": sim.oracle_kind,
                           "moments": [list(m) for m in sim.moments],
                           "threshold": sim.threshold, "allowance": sim.allowance}
    if cfg.sweep is not None:
        sw = {"axis": cfg.sweep.axis, "values": list(cfg.sweep.values)}
        if cfg.sweep.layer is not None:
            sw["layer"] = cfg.sweep.layer
        out["sweep"] = sw
    o = {"format": cfg.output.format}
    if cfg.output.path is not None:
        o["path"] = cfg.output.path
    out["output"] = o
    return out


def dump_config(cfg: ExperimentConfig) -> str:
    return yaml.safe_dump(config_to_dict(cfg), sort_keys=False)
