"""Reported quantities: average MSE, multiuser efficiency, SER and sweep tables."""
from __future__ import annotations

import csv
import io
import warnings
from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

from .channels import Layer, NetworkSpec, Prior
from .replica_solver import FixedPointResult, SolverOptions, solve
from .scalar_estimators import qpsk_ser_from_eta

SWEEP_HEADER = ("axis", "eta", "avg_mse", "ser", "iterations", "converged")
AXES = ("noise_variance", "alpha", "sparsity")


class UnconvergedWarning(RuntimeWarning):
    pass


def avg_mse_from_state(result: FixedPointResult) -> float:
    """t_x[0] - d[0]; warns when the fixed point did not converge."""
    if not result.converged:
        warnings.warn("average MSE taken from an unconverged fixed point", UnconvergedWarning,
                      stacklevel=2)
    return float(result.state.t_x[0] - result.state.d[0])


def multiuser_efficiency(result: FixedPointResult, noise_var: float) -> float:
    """noise_var / eta, the fraction of the effective noise that is real noise."""
    if not result.eta > 0:
        raise ValueError("effective noise must be > 0")
    if not noise_var > 0:
        raise ValueError("noise variance must be > 0")
    return noise_var / result.eta


@dataclass(frozen=True)
class SweepSpec:
    """One-parameter family of networks around ``base``.

    ``noise_variance`` and ``alpha`` act on ``layer`` (default: the last one);
    ``sparsity`` needs a Bernoulli-Gaussian prior.
    """

    axis: str
    values: tuple[float, ...]
    base: NetworkSpec
    layer: int | None = None

    def __post_init__(self):
        if self.axis not in AXES:
            raise ValueError(f"unknown sweep axis {self.axis!r}; choose from {AXES}")
        vals = tuple(float(v) for v in self.values)
        object.__setattr__(self, "values", vals)
        if not vals:
            raise ValueError("sweep needs at least one value")
        steps = [b - a for a, b in zip(vals, vals[1:])]
        if not (all(s > 0 for s in steps) or all(s < 0 for s in steps)):
            raise ValueError("sweep values must be strictly monotonic")
        if self.axis == "sparsity" and self.base.prior.kind != "bernoulli_gaussian":
            raise ValueError("sparsity sweep needs a bernoulli_gaussian prior")
        if self.layer is not None and not 0 <= self.layer < self.base.n_layers:
            raise ValueError("sweep layer out of range")
        if self.axis == "noise_variance":
            act = self.base.layers[self.target_layer].activation
            if act.kind == "identity" or act.kind == "discrete_map" and not act.thresholds:
                raise ValueError("noise sweep needs a noisy activation")

    @property
    def target_layer(self) -> int:
        return self.base.n_layers - 1 if self.layer is None else self.layer

    def network(self, value: float) -> NetworkSpec:
        base = self.base
        if self.axis == "sparsity":
            prior = Prior.bernoulli_gaussian(value, base.prior.variance)
            return NetworkSpec(prior, base.layers)
        layers = list(base.layers)
        lay = layers[self.target_layer]
        if self.axis == "alpha":
            layers[self.target_layer] = Layer(value, lay.activation)
        else:
            layers[self.target_layer] = Layer(lay.alpha, replace(lay.activation, variance=value))
        return NetworkSpec(base.prior, tuple(layers))


@dataclass(frozen=True)
class SweepRow:
    axis: float
    eta: float | None
    avg_mse: float | None
    ser: float | None
    iterations: int
    converged: bool
    error: str | None = None


def _ser(prior: Prior, eta: float) -> float | None:
    if prior.is_discrete and len(prior.atoms) == 2:
        return qpsk_ser_from_eta(eta)
    return None


def run_sweep(spec: SweepSpec, opts: SolverOptions | None = None,
              warm_start: bool = True) -> list[SweepRow]:
    """Solve every point of the sweep; failures become rows instead of exceptions."""
    opts = opts or SolverOptions()
    rows: list[SweepRow] = []
    prev = None
    for value in spec.values:
        point = opts
        if warm_start and prev is not None:
            point = replace(opts, init_style="warm", init=tuple(prev.state.d))
        try:
            net = spec.network(value)
            res = solve(net, point)
        except (ValueError, ArithmeticError) as exc:
            rows.append(SweepRow(value, None, None, None, 0, False, str(exc)))
            prev = None
            continue
        rows.append(SweepRow(value, res.eta, res.avg_mse, _ser(net.prior, res.eta),
                             res.iterations, res.converged))
        prev = res if res.converged else None
    return rows


def format_cell(v) -> str:
    """CSV cell text: blank for None, lowercase booleans, shortest round-trip floats."""
    if v is None:
        return ""
    if isinstance(v, str):
        return v
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(int(v))


def sweep_csv(rows: Sequence[SweepRow]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(SWEEP_HEADER)
    for r in rows:
        w.writerow([format_cell(r.axis), format_cell(r.eta), format_cell(r.avg_mse), format_cell(r.ser),
                    format_cell(r.iterations), format_cell(r.converged)])
    return buf.getvalue()


__all__ = ["SweepSpec", "SweepRow", "avg_mse_from_state", "multiuser_efficiency",
           "run_sweep", "sweep_csv", "format_cell", "SWEEP_HEADER", "UnconvergedWarning"]
