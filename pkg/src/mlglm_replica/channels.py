"""Scalar priors and per-layer stochastic activations.

Every other module consumes the small surface defined here: second moments,
conditional laws ``P(x_out | z)``, output-bin probabilities under a Gaussian
input, and elementwise sampling.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.special import log_ndtr, ndtr

PRIOR_KINDS = ("discrete", "gaussian", "bernoulli_gaussian")
ACTIVATION_KINDS = ("awgn", "identity", "sign", "discrete_map")

# variances below this are treated as exact point masses
DEGENERATE_VAR = 1e-12


def _log_interval_prob(lo, hi):
    """log(Phi(hi) - Phi(lo)) computed without cancellation."""
    lo, hi = np.broadcast_arrays(np.asarray(lo, float), np.asarray(hi, float))
    out = np.empty(lo.shape)
    upper = lo > 0
    # right tail: use the complementary CDF
    a, b = log_ndtr(-lo[upper]), log_ndtr(-hi[upper])
    with np.errstate(divide="ignore"):
        out[upper] = a + np.log1p(-np.exp(b - a))
    a, b = log_ndtr(hi[~upper]), log_ndtr(lo[~upper])
    with np.errstate(divide="ignore"):
        out[~upper] = a + np.log1p(-np.exp(b - a))
    return out


@dataclass(frozen=True)
class Prior:
    """Scalar input law P_X.

    ``discrete`` stores exact atoms ``((value, weight), ...)``; ``gaussian``
    uses ``mean``/``variance``; ``bernoulli_gaussian`` is zero with
    probability ``1 - sparsity`` and N(0, variance) otherwise.
    """

    kind: str
    atoms: tuple[tuple[float, float], ...] = ()
    mean: float = 0.0
    variance: float = 1.0
    sparsity: float = 1.0

    def __post_init__(self):
        if self.kind not in PRIOR_KINDS:
            raise ValueError(f"unknown prior kind {self.kind!r}")
        if self.kind == "discrete":
            atoms = tuple((float(v), float(w)) for v, w in self.atoms)
            object.__setattr__(self, "atoms", atoms)
            if not atoms:
                raise ValueError("discrete prior needs at least one atom")
            vals = np.array([v for v, _ in atoms])
            wts = np.array([w for _, w in atoms])
            if not np.all(np.isfinite(vals)):
                raise ValueError("atom values must be finite")
            if np.any(wts < 0) or abs(wts.sum() - 1.0) > 1e-12:
                raise ValueError("atom weights must be nonnegative and sum to 1")
            if len(set(vals.tolist())) != len(vals):
                raise ValueError("atom values must be distinct")
        else:
            if not (math.isfinite(self.variance) and self.variance >= 0):
                raise ValueError("variance must be finite and >= 0")
            if not math.isfinite(self.mean):
                raise ValueError("mean must be finite")
            if self.kind == "bernoulli_gaussian":
                if not 0.0 <= self.sparsity <= 1.0:
                    raise ValueError("sparsity must lie in [0, 1]")
                if self.mean != 0.0:
                    raise ValueError("bernoulli_gaussian components are zero-mean")

    @classmethod
    def discrete(cls, values: Sequence[float], weights: Sequence[float] | None = None) -> "Prior":
        if weights is None:
            weights = [1.0 / len(values)] * len(values)
        return cls("discrete", atoms=tuple(zip(values, weights)))

    @classmethod
    def binary(cls) -> "Prior":
        """Equiprobable +-1 atoms (one real dimension of QPSK)."""
        return cls.discrete([-1.0, 1.0], [0.5, 0.5])

    @classmethod
    def gaussian(cls, mean: float = 0.0, variance: float = 1.0) -> "Prior":
        return cls("gaussian", mean=mean, variance=variance)

    @classmethod
    def bernoulli_gaussian(cls, sparsity: float, variance: float = 1.0) -> "Prior":
        return cls("bernoulli_gaussian", sparsity=sparsity, variance=variance)

    @property
    def is_discrete(self) -> bool:
        return self.kind == "discrete"

    @property
    def values(self) -> np.ndarray:
        return np.array([v for v, _ in self.atoms])

    @property
    def weights(self) -> np.ndarray:
        return np.array([w for _, w in self.atoms])

    def first_moment(self) -> float:
        if self.kind == "discrete":
            return math.fsum(v * w for v, w in self.atoms)
        if self.kind == "gaussian":
            return self.mean
        return 0.0

    def second_moment(self) -> float:
        if self.kind == "discrete":
            return math.fsum(w * v * v for v, w in self.atoms)
        if self.kind == "gaussian":
            return self.mean**2 + self.variance
        return self.sparsity * self.variance

    def sample(self, rng: np.random.Generator, size) -> np.ndarray:
        if self.kind == "discrete":
            idx = rng.choice(len(self.atoms), size=size, p=self.weights)
            return self.values[idx]
        if self.kind == "gaussian":
            return self.mean + math.sqrt(self.variance) * rng.standard_normal(size)
        active = rng.random(size) < self.sparsity
        return np.where(active, math.sqrt(self.variance) * rng.standard_normal(size), 0.0)


def prior_second_moment(p: Prior) -> float:
    """E[X^2] under ``p``."""
    return p.second_moment()


@dataclass(frozen=True)
class Activation:
    """Elementwise conditional law P(x_out | z) of one layer.

    Kinds
    -----
    awgn
        ``x_out = z + n``, ``n ~ N(0, variance)``.
    identity
        ``x_out = z``.
    sign
        ``x_out = sign(z + n)`` with optional Gaussian pre-noise of
        ``variance`` (probit when positive).
    discrete_map
        Noisy quantizer: ``x_out = levels[k]`` when
        ``thresholds[k-1] < z + n <= thresholds[k]``, ``n ~ N(0, variance)``.
        A single level with no thresholds gives an output independent of z.
    """

    kind: str
    variance: float = 0.0
    levels: tuple[float, ...] = ()
    thresholds: tuple[float, ...] = ()
    _levels: np.ndarray = field(init=False, repr=False, compare=False)
    _thresholds: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if self.kind not in ACTIVATION_KINDS:
            raise ValueError(f"unknown activation kind {self.kind!r}")
        if not (math.isfinite(self.variance) and self.variance >= 0):
            raise ValueError("activation variance must be finite and >= 0")
        if self.kind == "identity" and self.variance != 0.0:
            raise ValueError("identity activation has no noise; use awgn")
        if self.kind == "sign":
            if self.levels or self.thresholds:
                raise ValueError("sign activation has a fixed alphabet {-1, +1}")
            levels, thresholds = (-1.0, 1.0), (0.0,)
        elif self.kind == "discrete_map":
            levels = tuple(float(v) for v in self.levels)
            thresholds = tuple(float(t) for t in self.thresholds)
            object.__setattr__(self, "levels", levels)
            object.__setattr__(self, "thresholds", thresholds)
            if not levels:
                raise ValueError("discrete_map needs at least one output level")
            if len(thresholds) != len(levels) - 1:
                raise ValueError("discrete_map needs len(levels) - 1 thresholds")
            if len(set(levels)) != len(levels):
                raise ValueError("discrete_map levels must be distinct")
            if any(b <= a for a, b in zip(thresholds, thresholds[1:])):
                raise ValueError("discrete_map thresholds must be strictly increasing")
            if not all(map(math.isfinite, levels + thresholds)):
                raise ValueError("discrete_map parameters must be finite")
        else:
            if self.levels or self.thresholds:
                raise ValueError(f"{self.kind} activation takes no levels/thresholds")
            levels, thresholds = (), ()
        object.__setattr__(self, "_levels", np.array(levels, float))
        object.__setattr__(self, "_thresholds", np.array(thresholds, float))

    @classmethod
    def awgn(cls, variance: float) -> "Activation":
        return cls("awgn", variance=variance)

    @classmethod
    def identity(cls) -> "Activation":
        return cls("identity")

    @classmethod
    def sign(cls, pre_noise: float = 0.0) -> "Activation":
        return cls("sign", variance=pre_noise)

    @classmethod
    def discrete_map(cls, levels, thresholds=(), variance: float = 0.0) -> "Activation":
        return cls("discrete_map", variance=variance, levels=tuple(levels),
                   thresholds=tuple(thresholds))

    @property
    def is_gaussian(self) -> bool:
        """True for kinds whose output is z plus Gaussian noise."""
        return self.kind in ("awgn", "identity")

    @property
    def output_alphabet(self) -> tuple[float, ...] | None:
        if self.is_gaussian:
            return None
        return tuple(self._levels.tolist())

    @property
    def quantizer(self) -> tuple[np.ndarray, np.ndarray]:
        """(levels, thresholds) of the discrete kinds."""
        if self.is_gaussian:
            raise ValueError(f"{self.kind} activation has no finite alphabet")
        return self._levels, self._thresholds

    def level_index(self, x_out) -> np.ndarray:
        """Index into the output alphabet; rejects values outside it."""
        levels = self.quantizer[0]
        x = np.asarray(x_out, float)
        idx = np.abs(x[..., None] - levels).argmin(axis=-1)
        if not np.allclose(levels[idx], x, rtol=0, atol=1e-9):
            raise ValueError(f"value(s) outside the output alphabet {tuple(levels)}")
        return idx

    def bin_log_probs(self, mean, var=0.0) -> np.ndarray:
        """log P(x_out = levels[k]) when z ~ N(mean, var); shape ``mean.shape + (K,)``.

        ``var`` is the input uncertainty; the activation's own pre-noise is added.
        """
        levels, thr = self.quantizer
        mean = np.asarray(mean, float)
        s2 = var + self.variance
        edges = np.concatenate([[-np.inf], thr, [np.inf]])
        if s2 < DEGENERATE_VAR:
            k = np.searchsorted(thr, mean, side="left")
            out = np.full(mean.shape + (len(levels),), -np.inf)
            np.put_along_axis(out, k[..., None], 0.0, axis=-1)
            return out
        s = math.sqrt(s2)
        a = (edges[None, :] - mean.reshape(-1, 1)) / s
        logp = _log_interval_prob(a[:, :-1], a[:, 1:])
        return logp.reshape(mean.shape + (len(levels),))

    def output_power(self, z_var: float) -> float:
        """E[x_out^2] when z ~ N(0, z_var)."""
        if self.is_gaussian:
            return z_var + self.variance
        levels = self.quantizer[0]
        p = np.exp(self.bin_log_probs(np.zeros(1), z_var)[0])
        return float(np.dot(p, levels**2))

    def conditional_mean(self, z) -> np.ndarray:
        z = np.asarray(z, float)
        if self.is_gaussian:
            return z.copy()
        return np.exp(self.bin_log_probs(z)) @ self.quantizer[0]

    def conditional_variance(self, z) -> np.ndarray:
        z = np.asarray(z, float)
        if self.is_gaussian:
            return np.full(z.shape, self.variance)
        levels = self.quantizer[0]
        p = np.exp(self.bin_log_probs(z))
        return p @ levels**2 - (p @ levels) ** 2

    def log_prob(self, x_out, z) -> np.ndarray:
        """Elementwise log P(x_out | z) (log-density for awgn)."""
        x_out, z = np.broadcast_arrays(np.asarray(x_out, float), np.asarray(z, float))
        if self.is_gaussian:
            if self.variance < DEGENERATE_VAR:
                raise ValueError("point-mass activation has no density")
            v = self.variance
            return -0.5 * (x_out - z) ** 2 / v - 0.5 * math.log(2 * math.pi * v)
        k = self.level_index(x_out)
        logp = self.bin_log_probs(z)
        return np.take_along_axis(logp, k[..., None], axis=-1)[..., 0]

    def sample(self, z, rng: np.random.Generator) -> np.ndarray:
        z = np.asarray(z, float)
        noise = math.sqrt(self.variance) * rng.standard_normal(z.shape) if self.variance else 0.0
        if self.is_gaussian:
            return z + noise
        levels, thr = self.quantizer
        return levels[np.searchsorted(thr, z + noise, side="left")]


def conditional_density(a: Activation, x_out: float, z: float) -> float:
    """P(x_out | z): a density for awgn, a probability mass for discrete kinds."""
    return float(np.exp(a.log_prob(x_out, z)))


def sample_activation(a: Activation, z, rng: np.random.Generator):
    """Draw x_out ~ P(. | z); deterministic given the generator state."""
    out = a.sample(z, rng)
    return float(out) if np.ndim(out) == 0 else out


@dataclass(frozen=True)
class Layer:
    alpha: float
    activation: Activation

    def __post_init__(self):
        if not (math.isfinite(self.alpha) and self.alpha > 0):
            raise ValueError("layer aspect ratio alpha must be finite and > 0")


@dataclass(frozen=True)
class NetworkSpec:
    """Prior plus ordered layers; layer l maps x^(l) to x^(l+1) via alpha_l and its activation."""

    prior: Prior
    layers: tuple[Layer, ...]

    def __post_init__(self):
        layers = tuple(
            lay if isinstance(lay, Layer) else Layer(float(lay[0]), lay[1]) for lay in self.layers
        )
        if not layers:
            raise ValueError("network needs at least one layer")
        object.__setattr__(self, "layers", layers)

    @property
    def n_layers(self) -> int:
        return len(self.layers)

    @property
    def alphas(self) -> tuple[float, ...]:
        return tuple(lay.alpha for lay in self.layers)

    @property
    def activations(self) -> tuple[Activation, ...]:
        return tuple(lay.activation for lay in self.layers)
