"""The equivalent scalar AWGN channel ``Y = X0 + W``, ``W ~ N(0, eta)``.

Posterior mean, scalar MMSE and the joint moments ``E[X0^i <X>^j]`` that the
decoupling principle matches against finite-size simulations.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import comb, expit, ndtr
from scipy.special import logsumexp

from .channels import Prior
from .quadrature import DEFAULT_ORDER, make_grid, normal_line_rule

MAX_MOMENT_ORDER = 8
# caller-side floor on the effective noise
MIN_ETA = 1e-12


@dataclass(frozen=True)
class SisoChannel:
    prior: Prior
    eta: float

    def __post_init__(self):
        if not (math.isfinite(self.eta) and self.eta > 0):
            raise ValueError(f"effective noise eta must be finite and > 0, got {self.eta!r}")


def _gaussian_raw_moment(i: int, mean, var):
    """E[(mean + sqrt(var) Z)^i] for standard normal Z."""
    out = np.zeros(np.broadcast(mean, var).shape)
    for k in range(0, i + 1, 2):
        dfact = math.prod(range(k - 1, 0, -2)) if k else 1
        out = out + comb(i, k, exact=True) * np.power(mean, i - k) * np.power(var, k / 2) * dfact
    return out


def posterior_mean(ch: SisoChannel, y):
    """E[X0 | Y = y] under the prior and AWGN of variance ``eta``."""
    p, eta = ch.prior, ch.eta
    y = np.asarray(y, float)
    if p.kind == "discrete":
        vals = p.values
        with np.errstate(divide="ignore"):
            logits = np.log(p.weights) - 0.5 * (y[..., None] - vals) ** 2 / eta
        post = np.exp(logits - logsumexp(logits, axis=-1, keepdims=True))
        out = post @ vals
    elif p.kind == "gaussian":
        out = p.mean + p.variance / (p.variance + eta) * (y - p.mean)
    else:
        rho, s2 = p.sparsity, p.variance
        if rho == 0.0 or s2 == 0.0:
            out = np.zeros_like(y)
        else:
            gain = s2 / (s2 + eta)
            if rho == 1.0:
                slab = np.ones_like(y)
            else:
                log_odds = (math.log(rho / (1 - rho)) + 0.5 * math.log(eta / (s2 + eta))
                            + 0.5 * y**2 * gain / eta)
                slab = expit(log_odds)
            out = slab * gain * y
    return float(out) if out.ndim == 0 else out


def _discrete_rule(p: Prior, eta: float, order: int):
    vals = np.sort(p.values)
    if len(vals) == 1:
        return normal_line_rule(order)
    gaps = np.diff(vals)
    steep = (vals[-1] - vals[0]) / math.sqrt(eta)
    # the closest pair sets where the first transition sits
    cap = min(24.0 * (vals[-1] - vals[0]) / gaps.min(), 4096.0)
    return normal_line_rule(order, steep, cap)


def _bg_rule(p: Prior, eta: float, order: int):
    # log-odds of the slab is c0 + a t^2 on the slab's own scale; resolve its
    # slope over the band where the logistic is not saturated
    rho, s2 = p.sparsity, p.variance
    a = s2 / (2 * eta)
    c0 = math.log(rho / (1 - rho)) + 0.5 * math.log(eta / (s2 + eta))
    steep = 2 * math.sqrt(a * max(36.0 - c0, 0.0))
    return normal_line_rule(order, steep, cap=256.0)


def siso_joint_moment(ch: SisoChannel, i: int, j: int, order: int = DEFAULT_ORDER) -> float:
    """E[X0^i <X>^j] over prior and noise."""
    if i < 0 or j < 0 or i + j > MAX_MOMENT_ORDER:
        raise ValueError(f"moment orders must be >= 0 with i + j <= {MAX_MOMENT_ORDER}")
    p, eta = ch.prior, ch.eta
    if i == 0 and j == 0:
        return 1.0
    if p.kind == "discrete":
        t, wt = _discrete_rule(p, eta, order)
        vals, wts = p.values, p.weights
        y = vals[:, None] + math.sqrt(eta) * t[None, :]
        xhat = posterior_mean(ch, y)
        inner = (xhat**j) @ wt
        return float(np.dot(wts * vals**i, inner))
    if p.kind == "gaussian":
        # <X> is affine in Y, so the integrand is a polynomial: Hermite is exact
        g = make_grid(max(order, MAX_MOMENT_ORDER))
        y = p.mean + math.sqrt(p.variance + eta) * g.nodes
        xhat = posterior_mean(ch, y)
        post_var = p.variance * eta / (p.variance + eta)
        return float(g.weights @ (_gaussian_raw_moment(i, xhat, post_var) * xhat**j))
    rho, s2 = p.sparsity, p.variance
    if rho == 0.0 or s2 == 0.0:
        return 0.0
    if rho == 1.0:
        return siso_joint_moment(SisoChannel(Prior.gaussian(0.0, s2), eta), i, j, order)
    t, wt = _bg_rule(p, eta, order)
    total = 0.0
    if i == 0:
        spike = posterior_mean(ch, math.sqrt(eta) * t)
        total += (1 - rho) * float(wt @ spike**j)
    y = math.sqrt(s2 + eta) * t
    xhat = posterior_mean(ch, y)
    gain = s2 / (s2 + eta)
    cond = _gaussian_raw_moment(i, gain * y, gain * eta)
    total += rho * float(wt @ (cond * xhat**j))
    return total


def scalar_mmse(ch: SisoChannel, order: int = DEFAULT_ORDER) -> float:
    """eps(eta) = E[(X0 - <X>)^2] = E[X0^2] - E[<X>^2] by orthogonality."""
    return max(ch.prior.second_moment() - siso_joint_moment(ch, 0, 2, order), 0.0)


def qpsk_mse_closed_form(d_tilde: float, order: int = DEFAULT_ORDER) -> float:
    """MMSE of a +-1 input at eta = 1/(2 d_tilde): 1 - E[tanh(2 d~ + sqrt(2 d~) z)]."""
    if not d_tilde > 0:
        raise ValueError("d_tilde must be > 0")
    slope = math.sqrt(2 * d_tilde)
    t, w = normal_line_rule(order, slope)
    return float(1.0 - w @ np.tanh(2 * d_tilde + slope * t))


def q_function(x):
    """Gaussian tail probability Q(x) = P(Z > x)."""
    return ndtr(-np.asarray(x, float))


def mse_to_ser_qpsk(arg: float) -> float:
    """QPSK symbol error rate 2 Q(sqrt(arg)) - Q(sqrt(arg))^2.

    ``arg`` is the squared Q-function argument, i.e. the per-dimension SNR
    for unit-power +-1 symbols.  Use :func:`qpsk_ser_from_eta` to convert
    from an effective noise variance.
    """
    if math.isnan(arg) or arg < 0:
        raise ValueError("SER argument must be >= 0")
    q = float(q_function(math.sqrt(arg)))
    return 2 * q - q * q


def qpsk_ser_from_eta(eta: float, reading: str = "snr") -> float:
    """SER of a +-1 input seen through noise variance ``eta``.

    ``reading="snr"`` uses the textbook argument 1/eta (unit symbol power);
    ``reading="literal"`` feeds eta itself, as the formula is sometimes
    printed.
    """
    if not eta > 0:
        raise ValueError("eta must be > 0")
    if reading == "snr":
        return mse_to_ser_qpsk(1.0 / eta)
    if reading == "literal":
        return mse_to_ser_qpsk(eta)
    raise ValueError(f"unknown SER reading {reading!r}")
