"""Command-line entry point: ``mlglm-replica {predict,simulate,validate,sweep}``."""
from __future__ import annotations

import argparse
import csv
import io
import sys
from dataclasses import replace
from typing import Sequence

import numpy as np

from .config import ConfigError, ExperimentConfig, load_config
from .metrics import SWEEP_HEADER, SweepSpec, format_cell, run_sweep, sweep_csv
from .replica_solver import solve
from .simulator import OracleInfeasible, moment_report, run_trials

EXIT_OK = 0
EXIT_FAILED = 1
EXIT_CONFIG = 2
EXIT_UNCONVERGED = 3
EXIT_INFEASIBLE = 4

TRIAL_HEADER = ("trial", "coord", "x0", "xhat")
MOMENT_HEADER = ("i", "j", "empirical", "std_err", "predicted", "z", "pass")
LAYER_HEADER = ("layer", "t_x", "d", "q", "d_tilde")


def _table(header: Sequence[str], rows: Sequence[Sequence[str]]) -> str:
    widths = [max(len(h), *(len(r[k]) for r in rows)) if rows else len(h)
              for k, h in enumerate(header)]
    lines = ["  ".join(h.rjust(w) for h, w in zip(header, widths))]
    lines += ["  ".join(c.rjust(w) for c, w in zip(r, widths)) for r in rows]
    return "\n".join(lines) + "\n"


def _render(header, rows, fmt: str) -> str:
    rows = [[format_cell(c) for c in r] for r in rows]
    if fmt == "table":
        return _table(header, rows)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def _emit(text: str, path: str | None, out) -> None:
    if path is None:
        out.write(text)
        return
    with open(path, "w", newline="") as fh:
        fh.write(text)


def cmd_predict(cfg: ExperimentConfig, out_path: str | None, out=sys.stdout) -> int:
    res = solve(cfg.network, cfg.solver)
    st = res.state
    layers = [[l, float(st.t_x[l]), float(st.d[l]), float(st.q[l]), float(st.d_tilde[l])]
              for l in range(cfg.network.n_layers)]
    out.write(f"eta          {res.eta:.12g}\n")
    out.write(f"avg_mse      {res.avg_mse:.12g}\n")
    out.write(f"iterations   {res.iterations}\n")
    out.write(f"converged    {format_cell(res.converged)}\n")
    out.write(_table(LAYER_HEADER, [[format_cell(c) for c in r] for r in layers]))
    if out_path is not None:
        row = ["", res.eta, res.avg_mse, None, res.iterations, res.converged]
        _emit(_render(SWEEP_HEADER, [row], cfg.output.format), out_path, out)
    return EXIT_OK if res.converged else EXIT_UNCONVERGED


def _need_simulate(cfg: ExperimentConfig):
    if cfg.simulate is None:
        raise ConfigError("simulate", "this command needs a simulate section")
    return cfg.simulate


def cmd_simulate(cfg: ExperimentConfig, out_path: str | None, threads: int,
                 out=sys.stdout) -> int:
    sim = _need_simulate(cfg)
    batch = run_trials(cfg.network, sim.dims, sim.n_trials, sim.seed, sim.redraw_matrices,
                       sim.oracle_kind, threads)
    rows = [[t, k, float(batch.x0[t, k]), float(batch.xhat[t, k])]
            for t in range(len(batch)) for k in range(batch.x0.shape[1])]
    _emit(_render(TRIAL_HEADER, rows, cfg.output.format), out_path, out)
    if len(batch) and out_path is not None:
        mse = float(np.mean((batch.x0 - batch.xhat) ** 2))
        out.write(f"trials {len(batch)}  empirical avg_mse {mse:.10g}\n")
    return EXIT_OK


def cmd_validate(cfg: ExperimentConfig, out_path: str | None, threads: int,
                 out=sys.stdout) -> int:
    sim = _need_simulate(cfg)
    if sim.oracle_kind != "brute_force":
        raise ConfigError("simulate.oracle_kind", "validate uses the brute_force oracle")
    batch = run_trials(cfg.network, sim.dims, sim.n_trials, sim.seed, sim.redraw_matrices,
                       "brute_force", threads)
    rep = moment_report(batch, cfg.network, sim.moments, cfg.solver, sim.threshold,
                        sim.allowance)
    rows = [[r.i, r.j, r.empirical, r.std_err, r.predicted, r.z_score, r.passed]
            for r in rep.rows]
    text = _render(MOMENT_HEADER, rows, cfg.output.format)
    _emit(text, out_path, out)
    out.write(f"eta {rep.eta:.12g}  trials {rep.n_trials}  orthogonality gap "
              f"{rep.orthogonality_gap:.6g} (se {rep.orthogonality_se:.3g})  "
              f"{'PASS' if rep.passed else 'FAIL'}\n")
    if not rep.solver.converged:
        return EXIT_UNCONVERGED
    return EXIT_OK if rep.passed else EXIT_FAILED


def cmd_sweep(cfg: ExperimentConfig, out_path: str | None, out=sys.stdout) -> int:
    if cfg.sweep is None:
        raise ConfigError("sweep", "this command needs a sweep section")
    spec = SweepSpec(cfg.sweep.axis, cfg.sweep.values, cfg.network, cfg.sweep.layer)
    rows = run_sweep(spec, cfg.solver)
    if cfg.output.format == "csv":
        text = sweep_csv(rows)
    else:
        text = _render(SWEEP_HEADER, [[r.axis, r.eta, r.avg_mse, r.ser, r.iterations,
                                       r.converged] for r in rows], "table")
    _emit(text, out_path, out)
    for r in rows:
        if r.error:
            sys.stderr.write(f"axis value {r.axis}: {r.error}\n")
    return EXIT_OK if all(r.converged for r in rows) else EXIT_UNCONVERGED


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mlglm-replica",
                                description="Replica predictions and exact-MMSE checks for "
                                            "multi-layer generalized linear models.")
    p.add_argument("command", choices=("predict", "simulate", "validate", "sweep"))
    p.add_argument("--config", required=True, help="YAML experiment file")
    p.add_argument("--out", help="output file (overrides output.path)")
    p.add_argument("--threads", type=int, default=1, help="worker threads for trials")
    p.add_argument("--grid-order", type=int, help="quadrature order override")
    p.add_argument("--seed", type=int, help="simulation seed override")
    return p


def main(argv: Sequence[str] | None = None, out=None) -> int:
    out = out or sys.stdout
    args = build_parser().parse_args(argv)
    try:
        if args.threads < 1:
            raise ConfigError("--threads", "must be >= 1")
        cfg = load_config(args.config)
        if args.grid_order is not None:
            try:
                cfg = replace(cfg, solver=replace(cfg.solver, grid_order=args.grid_order))
            except ValueError as exc:
                raise ConfigError("--grid-order", str(exc)) from None
        if args.seed is not None:
            if cfg.simulate is None:
                raise ConfigError("--seed", "no simulate section to seed")
            if args.seed < 0:
                raise ConfigError("--seed", "must be >= 0")
            cfg = replace(cfg, simulate=replace(cfg.simulate, seed=args.seed))
        out_path = args.out if args.out is not None else cfg.output.path
        if args.command == "predict":
            return cmd_predict(cfg, out_path, out)
        if args.command == "simulate":
            return cmd_simulate(cfg, out_path, args.threads, out)
        if args.command == "validate":
            return cmd_validate(cfg, out_path, args.threads, out)
        return cmd_sweep(cfg, out_path, out)
    except ConfigError as exc:
        sys.stderr.write(f"config error: {exc}\n")
        return EXIT_CONFIG
    except OracleInfeasible as exc:
        sys.stderr.write(f"oracle infeasible: {exc}\n")
        return EXIT_INFEASIBLE


if __name__ == "__main__":
    sys.exit(main())
