"""Domain-conditioned deep sigmoid flow and the masked residual transform."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .numerics import Tensor, abs_, clip, exp, log, matmul, reshape, sigmoid, softmax, softplus, square, sum_
from .numerics.autodiff import _sigmoid_np, _softplus_np

SIGMOID_EPS = 1e-7
TINY = 1e-300
LOG_2PI = math.log(2.0 * math.pi)
# softplus(UNIT_SLOPE_RAW) == 1.0 exactly in float64 (one ulp above log(e - 1)).
UNIT_SLOPE_RAW = 0.5413248546129182


class DomainIndexError(IndexError):
    pass


@dataclass
class DeepSigmoidFlow:
    """One DSF layer per latent component, with a parameter table per domain.

    For component i under domain u::

        eps_i = logit( sum_k w_k * sigmoid(a_k * z_i + b_k) )

    with a_k = softplus(raw_a) > 0 and w = softmax(logits), so each map is
    strictly increasing whatever the raw parameter values.
    """

    raw_a: Tensor  # [n_domains, n_latent, K]
    b: Tensor
    logits: Tensor

    @property
    def n_domains(self) -> int:
        return self.raw_a.shape[0]

    @property
    def n_latent(self) -> int:
        return self.raw_a.shape[1]

    @property
    def n_units(self) -> int:
        return self.raw_a.shape[2]

    def parameters(self) -> list[tuple[str, Tensor]]:
        return [("flow.raw_a", self.raw_a), ("flow.b", self.b), ("flow.logits", self.logits)]

    @classmethod
    def init(cls, n_domains: int, n_latent: int, n_units: int = 8, rng: np.random.Generator | None = None) -> DeepSigmoidFlow:
        shape = (n_domains, n_latent, n_units)
        if rng is None:
            raw = np.full(shape, UNIT_SLOPE_RAW)
            b = np.zeros(shape)
            logits = np.zeros(shape)
        else:
            raw = UNIT_SLOPE_RAW + 0.1 * rng.standard_normal(shape)
            b = rng.uniform(-1.0, 1.0, size=shape)
            logits = 0.1 * rng.standard_normal(shape)
        return cls(Tensor(raw, True), Tensor(b, True), Tensor(logits, True))

    @classmethod
    def identity(cls, n_domains: int, n_latent: int) -> DeepSigmoidFlow:
        """K=1, w=1, a=1, b=0: eps = logit(sigmoid(z)), log-det exactly 0."""
        return cls.init(n_domains, n_latent, 1)

    def check_domains(self, u: np.ndarray) -> np.ndarray:
        u = np.asarray(u, dtype=np.int64)
        if u.size and (u.min() < 0 or u.max() >= self.n_domains):
            raise DomainIndexError(f"domain index out of range [0, {self.n_domains}): min={u.min()}, max={u.max()}")
        return u


def _onehot(u: np.ndarray, n: int) -> np.ndarray:
    out = np.zeros((len(u), n))
    out[np.arange(len(u)), u] = 1.0
    return out


def _select(table: Tensor, onehot: np.ndarray) -> Tensor:
    d, n, k = table.shape
    return reshape(matmul(onehot, reshape(table, (d, n * k))), (len(onehot), n, k))


def flow_components(flow: DeepSigmoidFlow, z: Tensor, u) -> tuple[Tensor, Tensor]:
    """Per-component outputs and log-derivatives, both shaped [B, n_latent]."""
    z = z if isinstance(z, Tensor) else Tensor(z)
    u = flow.check_domains(u)
    if z.ndim != 2 or z.shape[1] != flow.n_latent or z.shape[0] != len(u):
        raise ValueError(f"flow: expected [{len(u)}, {flow.n_latent}] latents, got {z.shape}")
    oh = _onehot(u, flow.n_domains)
    a = softplus(_select(flow.raw_a, oh))
    b = _select(flow.b, oh)
    w = softmax(_select(flow.logits, oh), axis=-1)
    h = a * reshape(z, (z.shape[0], z.shape[1], 1)) + b
    s = sigmoid(h)
    sn = sigmoid(-h)
    y = clip(sum_(w * s, axis=-1), SIGMOID_EPS, None)
    ybar = clip(sum_(w * sn, axis=-1), SIGMOID_EPS, None)
    slope = clip(sum_(w * a * s * sn, axis=-1), TINY, None)
    eps = log(y) - log(ybar)
    # d eps / dz = slope / (y * (1 - y)); the ratio form is exactly 1 for the identity unit.
    logderiv = log(slope / (y * ybar))
    return eps, logderiv


def flow_forward(flow: DeepSigmoidFlow, z, u) -> tuple[Tensor, Tensor]:
    eps, logderiv = flow_components(flow, z, u)
    return eps, sum_(logderiv, axis=1)


def standard_normal_logpdf(eps: Tensor) -> Tensor:
    return sum_(-0.5 * square(eps) - 0.5 * LOG_2PI, axis=1)


def prior_logdensity(flow: DeepSigmoidFlow, z, u) -> Tensor:
    """log p(z | u) = log N(F_u(z); 0, I) + log|det dF_u/dz| per row."""
    eps, logdet = flow_forward(flow, z, u)
    return standard_normal_logpdf(eps) + logdet


# ----------------------------------------------------------- numpy inverse


def _forward_np(flow: DeepSigmoidFlow, z: np.ndarray, u: np.ndarray) -> np.ndarray:
    a = _softplus_np(flow.raw_a.data[u])
    b = flow.b.data[u]
    lg = flow.logits.data[u]
    w = np.exp(lg - lg.max(axis=-1, keepdims=True))
    w /= w.sum(axis=-1, keepdims=True)
    h = a * z[..., None] + b
    y = np.maximum((w * _sigmoid_np(h)).sum(-1), SIGMOID_EPS)
    ybar = np.maximum((w * _sigmoid_np(-h)).sum(-1), SIGMOID_EPS)
    return np.log(y) - np.log(ybar)


class BracketError(RuntimeError):
    pass


def flow_inverse(flow: DeepSigmoidFlow, eps: np.ndarray, u, tol: float = 1e-8, max_doublings: int = 60) -> np.ndarray:
    """Invert the componentwise increasing map by bisection.

    The bracket starts at [-10, 10] and doubles until it straddles the
    target; BracketError if that takes more than ``max_doublings``.
    """
    eps = np.asarray(eps.data if isinstance(eps, Tensor) else eps, dtype=np.float64)
    u = flow.check_domains(u)
    lo = np.full(eps.shape, -10.0)
    hi = np.full(eps.shape, 10.0)
    for _ in range(max_doublings + 1):
        bad_lo = _forward_np(flow, lo, u) > eps
        bad_hi = _forward_np(flow, hi, u) < eps
        if not (bad_lo.any() or bad_hi.any()):
            break
        lo = np.where(bad_lo, 2.0 * lo, lo)
        hi = np.where(bad_hi, 2.0 * hi, hi)
    else:
        raise BracketError(f"no bracket after {max_doublings} doublings (target range [{eps.min():.3g}, {eps.max():.3g}])")
    for _ in range(400):
        mid = 0.5 * (lo + hi)
        f = _forward_np(flow, mid, u)
        below = f < eps
        lo = np.where(below, mid, lo)
        hi = np.where(below, hi, mid)
        if np.all(hi - lo <= 4 * np.finfo(float).eps * np.maximum(1.0, np.abs(mid))):
            break
    z = 0.5 * (lo + hi)
    err = np.abs(_forward_np(flow, z, u) - eps)
    if err.max(initial=0.0) > tol:
        raise BracketError(f"bisection residual {err.max():.3g} exceeds {tol} (target outside the flow's range?)")
    return z


# ---------------------------------------------------------- masked residual


@dataclass
class LatentMask:
    """Per-component gate m: zero entries are content (domain-invariant) dims."""

    values: Tensor  # [n_latent]

    @classmethod
    def init(cls, n_latent: int, value: float = 1.0) -> LatentMask:
        return cls(Tensor(np.full(n_latent, value), True))

    def parameters(self) -> list[tuple[str, Tensor]]:
        return [("mask.values", self.values)]

    def l1(self) -> Tensor:
        return sum_(abs_(self.values))

    def content_dims(self) -> np.ndarray:
        return np.flatnonzero(self.values.data == 0.0)


def masked_residual(eps, mask: LatentMask, flow: DeepSigmoidFlow, u) -> Tensor:
    """z = eps + m * F_u(eps); dims with m_i = 0 pass through untouched."""
    eps = eps if isinstance(eps, Tensor) else Tensor(eps)
    if mask.values.shape != (eps.shape[1],):
        raise ValueError(f"mask shape {mask.values.shape} does not match latent width {eps.shape[1]}")
    shifted, _ = flow_forward(flow, eps, u)
    return eps + mask.values * shifted


def gated_prior_logdensity(flow: DeepSigmoidFlow, mask: LatentMask, z, u) -> Tensor:
    """Prior density when a mask gates which dims are domain-conditioned.

    eps_i = z_i + c_i (F_u(z)_i - z_i) with c = min(|m|, 1). The map is a
    convex combination of two increasing maps, so it stays invertible and
    c_i = 0 leaves z_i standard normal in every domain.
    """
    z = z if isinstance(z, Tensor) else Tensor(z)
    f, logderiv = flow_components(flow, z, u)
    c = clip(abs_(mask.values), None, 1.0)
    eps = z + c * (f - z)
    deriv = (1.0 - c) + c * exp(logderiv)
    return standard_normal_logpdf(eps) + sum_(log(deriv), axis=1)

