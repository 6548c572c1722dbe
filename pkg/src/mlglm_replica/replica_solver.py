"""Replica fixed-point equations for exact MMSE estimation in a multi-layer GLM.

Layers are indexed from 0 here.  Layer ``l`` mixes ``x^(l)`` (power ``t_x[l]``)
with an i.i.d. Gaussian matrix of aspect ratio ``alpha[l]`` into ``z^(l)`` and
applies its activation to produce ``x^(l+1)``; the last activation emits the
observation ``y``.

Every update has the same shape: a Gaussian input ``z | xi ~ N(b, B)`` with
``b = sqrt(m) xi``, ``m = d[l] / alpha[l]``, ``B = (t_x[l] - d[l]) / alpha[l]``,
passed through the activation and observed either exactly (last layer) or in
extra Gaussian noise of variance ``1 / (2 d_tilde[l+1])``.  Then

* ``q[l]``   = E[ E[z | obs, xi]^2 ]
* ``d[l+1]`` = E[ E[x^(l+1) | obs, xi]^2 ]
* ``d_tilde[l] = alpha (alpha q - d) / (2 (t_x - d)^2)``
* ``d[0]``   = E[<X>^2] of the scalar channel with ``eta = 1 / (2 d_tilde[0])``

For two layers the classic names map as ``c = t_x[0]``, ``e = t_x[1]``,
``d = d[0]``, ``f = d[1]``, ``q = q[0]``, ``h = q[1]``, ``d~ = d_tilde[0]``,
``f~ = d_tilde[1]``.  Posterior-mean numerators are squared in every update.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.special import expit, logsumexp

from .channels import DEGENERATE_VAR, Activation, NetworkSpec, Prior
from .quadrature import DEFAULT_ORDER, MAX_ORDER, TAIL, normal_line_rule, resolution, trapezoid
from .scalar_estimators import MIN_ETA, SisoChannel, scalar_mmse, siso_joint_moment

D_TILDE_MIN = 1e-12
D_TILDE_MAX = 1e12
D_CLAMP = 1e-9  # d is kept below t_x * (1 - D_CLAMP)
COLD_FRACTION = 1e-3
# half-width, in pre-activation standard deviations, of the band around a threshold
_BAND = TAIL + 4.0
_CHUNK = 128


@dataclass
class ReplicaState:
    t_x: np.ndarray
    d: np.ndarray
    q: np.ndarray
    d_tilde: np.ndarray

    def copy(self) -> "ReplicaState":
        return ReplicaState(self.t_x.copy(), self.d.copy(), self.q.copy(), self.d_tilde.copy())

    def as_two_layer(self) -> dict[str, float]:
        if len(self.t_x) != 2:
            raise ValueError("two-layer names only apply to L = 2")
        return dict(c=self.t_x[0], e=self.t_x[1], d=self.d[0], f=self.d[1], q=self.q[0],
                    h=self.q[1], d_tilde=self.d_tilde[0], f_tilde=self.d_tilde[1])


@dataclass(frozen=True)
class SolverOptions:
    damping: float = 0.5
    tol: float = 1e-9
    max_iter: int = 5000
    grid_order: int = DEFAULT_ORDER
    init_style: str = "cold"
    init: tuple[float, ...] | None = None
    starts: tuple[tuple[float, ...], ...] | None = None

    def __post_init__(self):
        if not 0.0 <= self.damping < 1.0:
            raise ValueError("damping must lie in [0, 1)")
        if not self.tol > 0:
            raise ValueError("tol must be > 0")
        if self.max_iter < 1:
            raise ValueError("max_iter must be >= 1")
        if not 2 <= self.grid_order <= MAX_ORDER:
            raise ValueError(f"grid_order must lie in [2, {MAX_ORDER}]")
        if self.init_style not in ("cold", "warm", "multi_start"):
            raise ValueError(f"unknown init_style {self.init_style!r}")
        if self.init_style == "warm" and self.init is None:
            raise ValueError("warm start needs init values for d")


@dataclass
class FixedPointResult:
    state: ReplicaState
    eta: float
    avg_mse: float
    iterations: int
    residual: float
    converged: bool
    saturated: bool = False
    all_solutions: list[tuple[ReplicaState, float]] = field(default_factory=list)


# ---------------------------------------------------------------------------
# per-layer integrals


def _gaussian_layer(act: Activation, m: float, B: float, A: float) -> tuple[float, float]:
    # everything is jointly Gaussian: LMMSE algebra is exact
    noise = act.variance
    denom = B + noise + A
    if denom < DEGENERATE_VAR:
        return B, m + B + noise
    return B * B / denom, m + (B + noise) ** 2 / denom


def _threshold_nodes(thr: np.ndarray, m: float, s: float, order: int):
    """Nodes/weights for b ~ N(0, m) restricted to bands around the thresholds."""
    if m < DEGENERATE_VAR:
        return np.zeros(1), np.ones(1)
    sd = math.sqrt(m)
    span = TAIL * sd
    h = min(s, sd) / resolution(order)
    bands = sorted((max(t - _BAND * s, -span), min(t + _BAND * s, span)) for t in thr)
    merged: list[list[float]] = []
    for lo, hi in bands:
        if hi <= lo:
            continue
        if merged and lo <= merged[-1][1]:
            merged[-1][1] = max(merged[-1][1], hi)
        else:
            merged.append([lo, hi])
    if not merged:
        return np.zeros(0), np.zeros(0)
    parts = [trapezoid(lo, hi, h) for lo, hi in merged]
    b = np.concatenate([p[0] for p in parts])
    w = np.concatenate([p[1] for p in parts]) * np.exp(-0.5 * b**2 / m) / math.sqrt(2 * math.pi * m)
    return b, w


def _binary_obs_moments(levels, logp, r, p, A, order):
    # two levels: the bin posterior is a logistic in the observation
    gap = levels[1] - levels[0]
    t, wt = normal_line_rule(order, gap / math.sqrt(A))
    with np.errstate(invalid="ignore"):
        u = logp[:, 1] - logp[:, 0]
    shift = 0.5 * gap * gap / A
    slope = gap / math.sqrt(A) * t
    er2 = np.zeros(logp.shape[0])
    ev = np.zeros(logp.shape[0])
    for j, sign in ((0, -1.0), (1, 1.0)):
        w1 = expit(u[:, None] + sign * shift + slope[None, :])
        w1 = np.where(np.isnan(w1), float(j), w1)
        R = r[:, :1] + w1 * (r[:, 1:] - r[:, :1])
        er2 += p[:, j] * ((R * R) @ wt)
        ev += p[:, j] * ((w1 * (1.0 - w1)) @ wt) * gap * gap
    return er2, ev


def _quantizer_layer(act: Activation, m: float, B: float, A: float, order: int,
                     t_next: float) -> tuple[float, float]:
    levels, thr = act.quantizer
    s2 = B + act.variance
    if len(levels) == 1 or s2 < DEGENERATE_VAR:
        # output is a known function of b (or constant): nothing left to infer about x
        return 0.0, t_next
    s = math.sqrt(s2)
    b, wb = _threshold_nodes(thr, m, s, order)
    if b.size == 0:
        return 0.0, t_next
    edges = np.concatenate([[-np.inf], thr, [np.inf]])
    # E[z | bin k, b] = b + (B / s) r_k with r_k the truncated-normal mean shift
    logp = act.bin_log_probs(b, B)
    alpha = (edges[None, :] - b[:, None]) / s
    log_phi = -0.5 * alpha**2 - 0.5 * math.log(2 * math.pi)
    with np.errstate(invalid="ignore", over="ignore"):
        r = np.exp(log_phi[:, :-1] - logp) - np.exp(log_phi[:, 1:] - logp)
    r = np.where(np.isfinite(logp), r, 0.0)
    p = np.exp(logp)

    if A < DEGENERATE_VAR:
        er2 = np.sum(p * r * r, axis=1)
        ev = np.zeros_like(er2)
    elif len(levels) == 2:
        er2, ev = _binary_obs_moments(levels, logp, r, p, A, order)
    else:
        spread = levels.max() - levels.min()
        gaps = np.diff(np.sort(levels))
        t, wt = normal_line_rule(order, spread / math.sqrt(A),
                                 cap=min(24.0 * spread / gaps.min(), 4096.0))
        # obs = levels[j] + sqrt(A) t; quadratic part of the log-likelihood of level k
        dev = levels[:, None, None] - levels[None, None, :] + math.sqrt(A) * t[None, :, None]
        quad = -0.5 * dev**2 / A  # (K_true, nt, K)
        er2 = np.empty(b.size)
        ev = np.empty(b.size)
        for start in range(0, b.size, _CHUNK):
            sl = slice(start, start + _CHUNK)
            logits = logp[sl, None, None, :] + quad[None]
            w = np.exp(logits - logsumexp(logits, axis=-1, keepdims=True))
            rr = w @ r[sl, None, :, None]
            xhat = w @ levels
            var = np.einsum("bjtk,bjtk->bjt", w, (levels - xhat[..., None]) ** 2)
            er2[sl] = np.einsum("bj,bjt,t->b", p[sl], rr[..., 0] ** 2, wt)
            ev[sl] = np.einsum("bj,bjt,t->b", p[sl], var, wt)
    excess = (B / s) ** 2 * float(wb @ er2)
    d_next = t_next - float(wb @ ev)
    return excess, d_next


def _layer_moments(act: Activation, m: float, B: float, A: float, order: int,
                   t_next: float) -> tuple[float, float]:
    """(E[E[z|obs,xi]^2] - m, E[E[x|obs,xi]^2]) for z|xi ~ N(sqrt(m) xi, B), obs = x + N(0, A).

    The first entry is returned net of ``m`` so that ``alpha q - d = alpha (q - m)``
    keeps full precision when ``d`` is close to ``t_x``.
    """
    m, B = max(m, 0.0), max(B, 0.0)
    if act.is_gaussian:
        return _gaussian_layer(act, m, B, A)
    return _quantizer_layer(act, m, B, A, order, t_next)


def _input_params(t_x: float, d: float, alpha: float) -> tuple[float, float]:
    return d / alpha, (t_x - d) / alpha


# ---------------------------------------------------------------------------
# public update equations


def forward_power_sweep(net: NetworkSpec) -> list[float]:
    """Powers t_x[l] entering each layer, starting from E[X^2] of the prior."""
    powers = [net.prior.second_moment()]
    for lay in net.layers[:-1]:
        powers.append(lay.activation.output_power(powers[-1] / lay.alpha))
    return powers


def _output_power(net: NetworkSpec, t_x: Sequence[float], layer: int) -> float:
    lay = net.layers[layer]
    return lay.activation.output_power(t_x[layer] / lay.alpha)


def q_last_layer(net: NetworkSpec, state: ReplicaState, order: int = DEFAULT_ORDER) -> float:
    """Power of the posterior mean of z^(L-1) given y and the known part of z."""
    last = net.n_layers - 1
    t, d = state.t_x[last], state.d[last]
    if not 0 <= d < t:
        raise ValueError("last-layer d must satisfy 0 <= d < t_x")
    m, B = _input_params(t, d, net.alphas[last])
    return m + _layer_moments(net.activations[last], m, B, 0.0, order,
                              _output_power(net, state.t_x, last))[0]


def _middle(net: NetworkSpec, state: ReplicaState, layer: int, order: int) -> tuple[float, float]:
    if not 0 <= layer < net.n_layers - 1:
        raise ValueError("middle-layer update needs 0 <= layer < L - 1")
    dt_next = state.d_tilde[layer + 1]
    if not dt_next > 0:
        raise ValueError("d_tilde of the next layer must be > 0")
    m, B = _input_params(state.t_x[layer], state.d[layer], net.alphas[layer])
    return _layer_moments(net.activations[layer], m, B, 1.0 / (2.0 * dt_next), order,
                          state.t_x[layer + 1])


def q_middle_layer(net: NetworkSpec, state: ReplicaState, layer: int,
                   order: int = DEFAULT_ORDER) -> float:
    """q[layer] for layer < L - 1, observing x^(layer+1) through 1/(2 d_tilde[layer+1])."""
    m = state.d[layer] / net.alphas[layer]
    return m + _middle(net, state, layer, order)[0]


def d_middle_layer(net: NetworkSpec, state: ReplicaState, layer: int,
                   order: int = DEFAULT_ORDER) -> float:
    """d[layer] for layer >= 1: power of the estimate of x^(layer)."""
    if layer < 1:
        raise ValueError("d_middle_layer needs layer >= 1; use d_first_layer")
    return _middle(net, state, layer - 1, order)[1]


def d_tilde_update(t_x: float, d: float, q: float, alpha: float) -> float:
    """alpha (alpha q - d) / (2 (t_x - d)^2), clamped to [1e-12, 1e12]."""
    gap = t_x - d
    if gap < 1e-12:
        return D_TILDE_MAX
    return _clamp_d_tilde(alpha * (alpha * q - d) / (2.0 * gap * gap))


def _clamp_d_tilde(val: float) -> float:
    return float(min(max(val, D_TILDE_MIN), D_TILDE_MAX))


def _d_tilde_from_excess(t_x: float, d: float, excess: float, alpha: float) -> float:
    # same as d_tilde_update with alpha q - d = alpha * excess
    gap = t_x - d
    if gap < 1e-12:
        return D_TILDE_MAX
    return _clamp_d_tilde(alpha * alpha * excess / (2.0 * gap * gap))


def d_first_layer(prior: Prior, d_tilde: float, order: int = DEFAULT_ORDER) -> float:
    """E[<X>^2] of the scalar channel with eta = 1 / (2 d_tilde)."""
    eta = max(1.0 / (2.0 * d_tilde), MIN_ETA)
    return siso_joint_moment(SisoChannel(prior, eta), 0, 2, order)


# ---------------------------------------------------------------------------
# iteration


def _rel_change(new: np.ndarray, old: np.ndarray) -> float:
    return float(np.max(np.abs(new - old) / (np.abs(old) + 1e-12)))


def _clamp_d(d: float, t: float) -> float:
    return min(max(d, 0.0), t * (1.0 - D_CLAMP))


def _iterate(net: NetworkSpec, t_x: np.ndarray, d0: Sequence[float],
             opts: SolverOptions) -> FixedPointResult:
    L = net.n_layers
    alphas, acts, order, lam = net.alphas, net.activations, opts.grid_order, opts.damping
    t_out = [_output_power(net, t_x, l) for l in range(L)]
    d = np.array([_clamp_d(float(v), t) for v, t in zip(d0, t_x)])
    q = np.full(L, np.nan)
    dt = np.full(L, np.nan)
    residual, converged, it = math.inf, False, 0
    for it in range(1, opts.max_iter + 1):
        q_new, dt_new = np.empty(L), np.empty(L)
        for l in reversed(range(L)):
            m, B = _input_params(t_x[l], d[l], alphas[l])
            A = 0.0 if l == L - 1 else 1.0 / (2.0 * dt_new[l + 1])
            excess = _layer_moments(acts[l], m, B, A, order, t_out[l])[0]
            q_new[l] = m + excess
            dt_new[l] = _d_tilde_from_excess(t_x[l], d[l], excess, alphas[l])
        raw = np.empty(L)
        d_new = np.empty(L)
        raw[0] = d_first_layer(net.prior, dt_new[0], order)
        d_new[0] = _clamp_d((1 - lam) * raw[0] + lam * d[0], t_x[0])
        for l in range(1, L):
            m, B = _input_params(t_x[l - 1], d_new[l - 1], alphas[l - 1])
            raw[l] = _layer_moments(acts[l - 1], m, B, 1.0 / (2.0 * dt_new[l]), order, t_x[l])[1]
            d_new[l] = _clamp_d((1 - lam) * raw[l] + lam * d[l], t_x[l])
        raw = np.array([_clamp_d(v, t) for v, t in zip(raw, t_x)])
        residual = _rel_change(raw, d)
        if it > 1:
            residual = max(residual, _rel_change(q_new, q), _rel_change(dt_new, dt))
        d, q, dt = d_new, q_new, dt_new
        if residual < opts.tol:
            converged = True
            break
    state = ReplicaState(t_x.copy(), d, q, dt)
    return FixedPointResult(
        state=state,
        eta=1.0 / (2.0 * dt[0]),
        avg_mse=float(t_x[0] - d[0]),
        iterations=it,
        residual=residual,
        converged=converged,
        saturated=bool(np.any(dt >= D_TILDE_MAX)),
    )


def _starts(t_x: np.ndarray, opts: SolverOptions) -> list[np.ndarray]:
    cold = COLD_FRACTION * t_x
    if opts.init_style == "cold":
        return [cold]
    if opts.init_style == "warm":
        return [np.asarray(opts.init, float)]
    if opts.starts:
        return [np.asarray(s, float) for s in opts.starts]
    return [cold, 0.5 * t_x, (1.0 - 1e-6) * t_x]


def _distinct(a: ReplicaState, b: ReplicaState, tol: float) -> bool:
    pa = np.concatenate([a.d, a.q, a.d_tilde])
    pb = np.concatenate([b.d, b.q, b.d_tilde])
    return _rel_change(pa, pb) > 10 * tol


def solve(net: NetworkSpec, opts: SolverOptions | None = None) -> FixedPointResult:
    """Damped sweeps (backward q / d_tilde, forward d) until self-consistent.

    Under ``multi_start`` every distinct converged fixed point is reported in
    ``all_solutions``; the primary result is the first start.  No selection
    between coexisting solutions is attempted.
    """
    opts = opts or SolverOptions()
    t_x = np.array(forward_power_sweep(net))
    starts = _starts(t_x, opts)
    for s in starts:
        if len(s) != net.n_layers:
            raise ValueError("initial d must have one entry per layer")
    runs = [_iterate(net, t_x, s, opts) for s in starts]
    primary = runs[0]
    if opts.init_style == "multi_start":
        found: list[tuple[ReplicaState, float]] = []
        for run in runs:
            if run.converged and all(_distinct(run.state, st, opts.tol) for st, _ in found):
                found.append((run.state, run.avg_mse))
        primary.all_solutions = found
    return primary


def solve_slm(prior: Prior, noise_var: float, alpha: float,
              opts: SolverOptions | None = None) -> FixedPointResult:
    """Scalar iteration of eta = noise_var + eps(eta) / alpha for a linear AWGN layer."""
    opts = opts or SolverOptions()
    if noise_var < 0 or not alpha > 0:
        raise ValueError("need noise_var >= 0 and alpha > 0")
    t = prior.second_moment()
    d0 = COLD_FRACTION * t if opts.init_style != "warm" else float(opts.init[0])
    eta = max(noise_var + (t - _clamp_d(d0, t)) / alpha, MIN_ETA)
    lam, order = opts.damping, opts.grid_order
    residual, converged, it = math.inf, False, 0
    for it in range(1, opts.max_iter + 1):
        new = max(noise_var + scalar_mmse(SisoChannel(prior, eta), order) / alpha, MIN_ETA)
        residual = abs(new - eta) / (abs(eta) + 1e-12)
        eta = (1 - lam) * new + lam * eta
        if residual < opts.tol:
            converged = True
            break
    mse = scalar_mmse(SisoChannel(prior, eta), order)
    d = t - mse
    m, B = _input_params(t, d, alpha)
    q = m + _gaussian_layer(Activation.awgn(noise_var), m, B, 0.0)[0]
    state = ReplicaState(np.array([t]), np.array([d]), np.array([q]),
                         np.array([1.0 / (2.0 * eta)]))
    return FixedPointResult(state=state, eta=eta, avg_mse=mse, iterations=it,
                            residual=residual, converged=converged)
