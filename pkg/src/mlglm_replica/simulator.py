"""Finite-size ML-GLM sampling and exact-MMSE oracles.

Two oracles are provided:

* :func:`exact_mmse_brute_force` enumerates every input configuration of a
  discrete prior and computes ``P(y | x0)`` exactly, summing over discrete
  intermediate layers and integrating Gaussian ones in closed form.
* :func:`lmmse_gaussian_oracle` handles all-Gaussian networks (Gaussian prior,
  awgn/identity activations), where the MMSE estimator is linear.

Each trial draws its randomness from ``default_rng([seed, 1, index])`` so a
batch is reproducible regardless of how trials are scheduled.
"""
from __future__ import annotations

import itertools
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.linalg import cho_factor, cho_solve
from scipy.special import logsumexp

from .channels import NetworkSpec
from .replica_solver import FixedPointResult, SolverOptions, solve
from .scalar_estimators import SisoChannel, siso_joint_moment

CONFIG_BUDGET = 2**20


class OracleInfeasible(RuntimeError):
    """The requested exact oracle cannot run on this network."""


@dataclass(frozen=True, eq=False)
class FiniteNetwork:
    spec: NetworkSpec
    dims: tuple[int, ...]
    matrices: tuple[np.ndarray, ...]

    def __post_init__(self):
        for l, H in enumerate(self.matrices):
            if H.shape != (self.dims[l + 1], self.dims[l]):
                raise ValueError(f"matrix {l} has shape {H.shape}, expected "
                                 f"{(self.dims[l + 1], self.dims[l])}")


def check_dims(spec: NetworkSpec, dims: Sequence[int]) -> tuple[int, ...]:
    dims = tuple(int(n) for n in dims)
    if len(dims) != spec.n_layers + 1:
        raise ValueError(f"need {spec.n_layers + 1} dimensions, got {len(dims)}")
    if any(n < 1 for n in dims):
        raise ValueError("dimensions must be positive")
    for l, alpha in enumerate(spec.alphas):
        if abs(dims[l + 1] - alpha * dims[l]) > 1.0:
            raise ValueError(f"dims[{l + 1}] / dims[{l}] = {dims[l + 1]}/{dims[l]} does not "
                             f"match alpha = {alpha} within rounding")
    return dims


def sample_network(spec: NetworkSpec, dims: Sequence[int], rng: np.random.Generator,
                   zero_matrices: bool = False) -> FiniteNetwork:
    """Draw H^(l) with i.i.d. N(0, 1/N_{l+1}) entries (all zeros under the test hook)."""
    dims = check_dims(spec, dims)
    mats = []
    for l in range(spec.n_layers):
        shape = (dims[l + 1], dims[l])
        if zero_matrices:
            mats.append(np.zeros(shape))
        else:
            mats.append(rng.standard_normal(shape) / math.sqrt(dims[l + 1]))
    return FiniteNetwork(spec, dims, tuple(mats))


def sample_trial(fnet: FiniteNetwork, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    x0 = fnet.spec.prior.sample(rng, fnet.dims[0])
    x = x0
    for H, act in zip(fnet.matrices, fnet.spec.activations):
        x = act.sample(H @ x, rng)
    return x0, x


# ---------------------------------------------------------------------------
# brute-force oracle


def _budget_check(alphabet_size: int, n: int, what: str) -> None:
    count = alphabet_size**n
    if count > CONFIG_BUDGET:
        raise OracleInfeasible(
            f"{what}: {alphabet_size}^{n} = {count} configurations exceed the budget "
            f"2^{int(math.log2(CONFIG_BUDGET))} = {CONFIG_BUDGET}")


def _configs(values: np.ndarray, n: int) -> np.ndarray:
    return np.array(list(itertools.product(values, repeat=n)), float).reshape(-1, n)


def oracle_feasibility(spec: NetworkSpec, dims: Sequence[int]) -> None:
    """Raise :class:`OracleInfeasible` unless the brute-force oracle can run."""
    if not spec.prior.is_discrete:
        raise OracleInfeasible("brute-force oracle needs a discrete prior")
    _budget_check(len(spec.prior.atoms), dims[0], "input")
    gaussian_seen = False
    for l, act in enumerate(spec.activations):
        last = l == spec.n_layers - 1
        if act.is_gaussian:
            gaussian_seen = True
            continue
        if gaussian_seen:
            raise OracleInfeasible(
                f"layer {l}: discrete activation after a Gaussian intermediate has no exact form")
        if not last:
            _budget_check(len(act.output_alphabet), dims[l + 1], f"layer {l} intermediate")


def exact_mmse_brute_force(fnet: FiniteNetwork, y: np.ndarray) -> np.ndarray:
    """Posterior mean of x0 by exhaustive summation over the input alphabet.

    ``P(y | x0)`` is built layer by layer over a set of branches: discrete
    intermediates are enumerated (log-transition matrices chain the layers),
    Gaussian ones keep a shared covariance and are integrated analytically.
    """
    spec = fnet.spec
    oracle_feasibility(spec, fnet.dims)
    prior = spec.prior
    X = _configs(prior.values, fnet.dims[0])
    with np.errstate(divide="ignore"):
        log_prior = _configs(np.log(prior.weights), fnet.dims[0]).sum(axis=1)
    means = X
    cov = None
    trans = None  # log P(branch | x0); None while branches are the x0 configs
    loglik = None
    L = spec.n_layers
    for l, (H, act) in enumerate(zip(fnet.matrices, spec.activations)):
        means = means @ H.T
        if cov is not None:
            cov = H @ cov @ H.T
        last = l == L - 1
        if act.is_gaussian:
            if act.variance > 0:
                eye = act.variance * np.eye(H.shape[0])
                cov = eye if cov is None else cov + eye
            if last:
                loglik = _gaussian_loglik(y, means, cov)
            continue
        if last:
            loglik = np.zeros(means.shape[0])
            for a in range(means.shape[1]):
                loglik += act.log_prob(y[a], means[:, a])
            continue
        S = _configs(np.array(act.output_alphabet), H.shape[0])
        lp = np.zeros((means.shape[0], S.shape[0]))
        for a in range(means.shape[1]):
            lp += act.log_prob(S[None, :, a], means[:, a, None])
        trans = lp if trans is None else logsumexp(trans[:, :, None] + lp[None, :, :], axis=1)
        means = S
    log_py = loglik if trans is None else logsumexp(trans + loglik[None, :], axis=1)
    log_post = log_prior + log_py
    if not np.any(np.isfinite(log_post)):
        raise OracleInfeasible("observation has zero likelihood under every configuration")
    post = np.exp(log_post - logsumexp(log_post))
    return post @ X


def _gaussian_loglik(y: np.ndarray, means: np.ndarray, cov: np.ndarray | None) -> np.ndarray:
    resid = y[None, :] - means
    if cov is None:
        # noiseless linear observation: only exactly consistent branches survive
        scale = 1.0 + np.linalg.norm(y)
        ok = np.linalg.norm(resid, axis=1) <= 1e-9 * scale
        return np.where(ok, 0.0, -np.inf)
    try:
        cf = cho_factor(cov, lower=True)
    except np.linalg.LinAlgError as exc:
        raise OracleInfeasible("singular observation covariance") from exc
    sol = cho_solve(cf, resid.T)
    logdet = 2.0 * np.sum(np.log(np.diag(cf[0])))
    return -0.5 * np.einsum("ij,ji->i", resid, sol) - 0.5 * logdet


# ---------------------------------------------------------------------------
# LMMSE oracle


def _linear_gaussian(fnet: FiniteNetwork) -> tuple[np.ndarray, np.ndarray]:
    spec = fnet.spec
    if spec.prior.kind != "gaussian" or not all(a.is_gaussian for a in spec.activations):
        raise OracleInfeasible("LMMSE oracle needs a Gaussian prior and awgn/identity layers")
    A = np.eye(fnet.dims[0])
    noise = np.zeros((fnet.dims[0], fnet.dims[0]))
    for H, act in zip(fnet.matrices, spec.activations):
        A = H @ A
        noise = H @ noise @ H.T + act.variance * np.eye(H.shape[0])
    return A, noise


def _gram(A, noise, var):
    return var * A @ A.T + noise


def lmmse_gaussian_oracle(fnet: FiniteNetwork, y: np.ndarray) -> np.ndarray:
    """Joint-Gaussian conditional mean of x0 given y."""
    A, noise = _linear_gaussian(fnet)
    mu, var = fnet.spec.prior.mean, fnet.spec.prior.variance
    G = _gram(A, noise, var)
    resid = y - A @ np.full(A.shape[1], mu)
    return mu + var * A.T @ np.linalg.lstsq(G, resid, rcond=None)[0]


def lmmse_avg_mse(fnet: FiniteNetwork) -> float:
    """(1/N1) trace of the posterior covariance."""
    A, noise = _linear_gaussian(fnet)
    var = fnet.spec.prior.variance
    G = _gram(A, noise, var)
    inner = np.linalg.lstsq(G, A, rcond=None)[0]
    return float(var - var**2 * np.einsum("ij,ij->", A, inner) / A.shape[1])


def lmmse_avg_mse_mc(spec: NetworkSpec, dims: Sequence[int], n_draws: int, seed: int) -> float:
    """lmmse_avg_mse averaged over independent matrix draws."""
    vals = [lmmse_avg_mse(sample_network(spec, dims, np.random.default_rng([seed, 2, k])))
            for k in range(n_draws)]
    return math.fsum(vals) / n_draws


# ---------------------------------------------------------------------------
# trial batches


ORACLES = {"brute_force": exact_mmse_brute_force, "lmmse": lmmse_gaussian_oracle}


@dataclass(frozen=True, eq=False)
class TrialBatch:
    x0: np.ndarray  # (n_trials, N1)
    y: tuple[np.ndarray, ...]
    xhat: np.ndarray  # (n_trials, N1)
    seed: int
    oracle_kind: str

    @property
    def records(self) -> list[tuple[np.ndarray, np.ndarray, np.ndarray]]:
        return list(zip(self.x0, self.y, self.xhat))

    def __len__(self) -> int:
        return self.x0.shape[0]


def _trial_rng(seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng([seed, 1, index])


def run_trials(spec: NetworkSpec, dims: Sequence[int], n_trials: int, seed: int,
               redraw_matrices: bool = True, oracle_kind: str = "brute_force",
               threads: int = 1, zero_matrices: bool = False) -> TrialBatch:
    """Sample ``n_trials`` (x0, y) pairs and estimate x0 with the chosen oracle."""
    dims = check_dims(spec, dims)
    if oracle_kind not in ORACLES:
        raise ValueError(f"unknown oracle {oracle_kind!r}")
    if oracle_kind == "brute_force":
        oracle_feasibility(spec, dims)
    else:
        _linear_gaussian(sample_network(spec, dims, np.random.default_rng(0), zero_matrices=True))
    oracle = ORACLES[oracle_kind]
    fixed = None
    if not redraw_matrices:
        fixed = sample_network(spec, dims, np.random.default_rng([seed, 0]), zero_matrices)

    def one(index: int):
        rng = _trial_rng(seed, index)
        fnet = fixed or sample_network(spec, dims, rng, zero_matrices)
        x0, y = sample_trial(fnet, rng)
        return x0, y, oracle(fnet, y)

    if threads > 1 and n_trials > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            out = list(pool.map(one, range(n_trials)))
    else:
        out = [one(i) for i in range(n_trials)]
    n1 = dims[0]
    x0 = np.array([o[0] for o in out]).reshape(n_trials, n1)
    xhat = np.array([o[2] for o in out]).reshape(n_trials, n1)
    return TrialBatch(x0, tuple(o[1] for o in out), xhat, seed, oracle_kind)


# ---------------------------------------------------------------------------
# decoupling test


@dataclass(frozen=True)
class MomentRow:
    i: int
    j: int
    empirical: float
    std_err: float
    predicted: float
    z_score: float
    passed: bool


@dataclass
class MomentReport:
    rows: list[MomentRow]
    orthogonality_gap: float
    orthogonality_se: float
    orthogonality_passed: bool
    eta: float
    n_trials: int
    solver: FixedPointResult

    @property
    def passed(self) -> bool:
        return all(r.passed for r in self.rows) and self.orthogonality_passed


def _mean_se(per_trial: np.ndarray) -> tuple[float, float]:
    n = per_trial.size
    mean = math.fsum(per_trial.tolist()) / n
    if n < 2:
        return mean, 0.0
    dev = per_trial - mean
    return mean, math.sqrt(math.fsum((dev * dev).tolist()) / (n - 1) / n)


def moment_report(batch: TrialBatch, spec: NetworkSpec, moments: Sequence[tuple[int, int]],
                  opts: SolverOptions | None = None, threshold: float = 4.0,
                  allowance: float = 0.05) -> MomentReport:
    """Compare empirical E[x0^i xhat^j] with the scalar-channel prediction.

    A row passes when ``|emp - pred| <= threshold * SE + allowance * |pred|``;
    standard errors come from per-trial coordinate averages.
    """
    opts = opts or SolverOptions()
    result = solve(spec, opts)
    ch = SisoChannel(spec.prior, result.eta)
    n = batch.x0.shape[0]
    if n == 0:
        raise ValueError("moment test needs at least one trial")
    rows = []
    for i, j in moments:
        per_trial = np.mean(batch.x0**i * batch.xhat**j, axis=1)
        emp, se = _mean_se(per_trial)
        pred = siso_joint_moment(ch, i, j, opts.grid_order)
        diff = emp - pred
        z = diff / se if se > 0 else (0.0 if abs(diff) < 1e-12 else math.copysign(math.inf, diff))
        ok = abs(diff) <= threshold * se + allowance * abs(pred) + 1e-12
        rows.append(MomentRow(i, j, emp, se, pred, z, ok))
    gap_trials = np.mean(batch.x0 * batch.xhat - batch.xhat**2, axis=1)
    gap, gap_se = _mean_se(gap_trials)
    return MomentReport(rows, gap, gap_se, abs(gap) <= threshold * gap_se + 1e-12,
                        result.eta, n, result)


def decoupling_moment_test(spec: NetworkSpec, dims: Sequence[int], n_trials: int,
                           moments: Sequence[tuple[int, int]], seed: int,
                           opts: SolverOptions | None = None, *, redraw_matrices: bool = True,
                           threads: int = 1, threshold: float = 4.0,
                           allowance: float = 0.05) -> MomentReport:
    """Run the brute-force oracle over ``n_trials`` and test the moment identities."""
    batch = run_trials(spec, dims, n_trials, seed, redraw_matrices, "brute_force", threads)
    return moment_report(batch, spec, moments, opts, threshold, allowance)
