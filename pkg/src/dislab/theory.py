"""Numeric checks of the identifiability conditions.

Sufficient-change rank tests on analytic Gaussian scores, the per-latent
domain-count bound, and block-structure tests on the Jacobian of
h = g^-1 o g_hat for a trained decoder.
"""

from __future__ import annotations

import itertools
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Iterable

import numpy as np

from .metrics import abs_correlation, assignment
from .numerics import Tensor, backward, sum_
from .synthgen import DomainPrior, MixingGraph, MixingSpec, invert, invert_tensor, mix

RANK_RTOL = 1e-8
BLOCK_THRESHOLD = 0.1
PERTURB_SCALE = 0.5

SATISFIED = "satisfied"
VIOLATED = "violated"
INSUFFICIENT = "insufficient-domains"
NOT_APPLICABLE = "not-applicable"


def numeric_rank(m: np.ndarray, rtol: float = RANK_RTOL) -> tuple[int, np.ndarray]:
    """Rank counting singular values above ``rtol * s_max``."""
    if m.size == 0:
        return 0, np.zeros(0)
    s = np.linalg.svd(m, compute_uv=False)
    if s[0] == 0.0:
        return 0, s
    return int((s > rtol * s[0]).sum()), s


@dataclass
class AssumptionReport:
    kind: str  # "A3" or "A4"
    k: list[int]
    a: list[int] = field(default_factory=list)
    latents: list[int] = field(default_factory=list)  # Pa(x_k) for A3, z_a for A4
    n_vectors: int = 0
    required_rank: int = 0
    singular_values: list[float] = field(default_factory=list)
    rank: int = 0
    n_domains: int = 0
    verdict: str = NOT_APPLICABLE
    extra_rank: int | None = None  # rank of the three-instance system, reported only

    def to_dict(self) -> dict:
        return asdict(self)


def _as_set(k: Iterable[int] | int) -> list[int]:
    return sorted({int(k)} if isinstance(k, (int, np.integer)) else {int(i) for i in k})


# ------------------------------------------------------------ score vectors


def gaussian_scores(prior: DomainPrior, z: np.ndarray, u: int) -> np.ndarray:
    return prior.score(z, u)


def make_instances(
    spec: MixingSpec,
    k: Iterable[int],
    rng: np.random.Generator,
    prior: DomainPrior | None = None,
    n_instances: int = 3,
) -> tuple[np.ndarray, list[np.ndarray]]:
    """A base observation plus ``n_instances`` variants differing only on x_k.

    Each variant perturbs the parent latents of x_k, re-mixes, and copies just
    the x_k coordinates into the base point so x_{\\k} stays fixed.
    """
    k = _as_set(k)
    pa = sorted(spec.graph.parents(k))
    loc = prior.means.mean(axis=0) if prior is not None else np.zeros(spec.n_latent)
    z0 = loc + rng.standard_normal(spec.n_latent)
    x0 = mix(spec, z0[None])[0]
    xs = []
    for _ in range(n_instances):
        z = z0.copy()
        z[pa] += PERTURB_SCALE * rng.standard_normal(len(pa))
        x = x0.copy()
        x[k] = mix(spec, z[None])[0][k]
        xs.append(x)
    return x0, xs


def score_vectors_w(spec: MixingSpec, prior: DomainPrior, k: Iterable[int], instances, u: int) -> np.ndarray:
    """w(k, u): interleaved (score at instance 1, minus score at instance 0) over Pa(x_k).

    ``instances`` holds two full observation vectors that agree off x_k.
    Scores are the analytic Gaussian d log p(z | u) / dz_i at z = g^-1(x).
    """
    k = _as_set(k)
    inst = np.asarray(instances, dtype=np.float64)
    if inst.ndim != 2 or inst.shape[0] != 2 or inst.shape[1] != spec.n_obs:
        raise ValueError(f"expected two observation vectors of width {spec.n_obs}, got shape {inst.shape}")
    pa = sorted(spec.graph.parents(k))
    z = invert(spec, inst)
    s1 = gaussian_scores(prior, z[1], u)[pa]
    s0 = gaussian_scores(prior, z[0], u)[pa]
    return np.stack([s1, -s0], axis=1).reshape(-1)


def check_a3(spec: MixingSpec, prior: DomainPrior, k: Iterable[int], seed: int = 0) -> AssumptionReport:
    k = _as_set(k)
    pa = sorted(spec.graph.parents(k))
    need = len(pa)
    rep = AssumptionReport(kind="A3", k=k, latents=pa, required_rank=need, n_domains=prior.n_domains)
    rng = np.random.default_rng(seed)
    _, xs = make_instances(spec, k, rng, prior, n_instances=3)
    n_use = min(need, prior.n_domains - 1)
    if n_use > 0:
        w0 = score_vectors_w(spec, prior, k, xs[:2], 0)
        m = np.stack([score_vectors_w(spec, prior, k, xs[:2], u) - w0 for u in range(1, n_use + 1)])
        rep.n_vectors = n_use
        rep.rank, s = numeric_rank(m)
        rep.singular_values = s.tolist()
        # Three-instance system: scores at every instance, differenced against domain 0.
        zs = invert(spec, np.stack(xs))
        base = np.concatenate([gaussian_scores(prior, z, 0)[pa] for z in zs])
        big = np.stack([np.concatenate([gaussian_scores(prior, z, u)[pa] for z in zs]) - base for u in range(1, prior.n_domains)])
        rep.extra_rank, _ = numeric_rank(big)
    if prior.n_domains < need + 1:
        rep.verdict = INSUFFICIENT
    else:
        rep.verdict = SATISFIED if rep.rank == need else VIOLATED
    return rep


def z_a_set(graph: MixingGraph, a: Iterable[int], k: Iterable[int]) -> list[int]:
    """Latents feeding x_a but not x_k."""
    return sorted(graph.parents(_as_set(a)) - graph.parents(_as_set(k))) if _as_set(a) else []


def _point(prior: DomainPrior, za: list[int], values: np.ndarray, u: int) -> np.ndarray:
    # z_b and z_k sit at the domain's prior means; only z_a varies.
    z = prior.means[u].copy()
    z[za] = values
    return z


def v_vector(prior: DomainPrior, za: list[int], za1: np.ndarray, za0: np.ndarray, u: int) -> np.ndarray:
    """V(a, k, u): second- then first-order scores over z_a at the two z_a instances."""
    d2_1 = prior.second_score(u)[za]
    d2_0 = prior.second_score(u)[za]
    d1_1 = gaussian_scores(prior, _point(prior, za, za1, u), u)[za]
    d1_0 = gaussian_scores(prior, _point(prior, za, za0, u), u)[za]
    return np.concatenate([np.stack([d2_1, -d2_0], axis=1).reshape(-1), np.stack([d1_1, -d1_0], axis=1).reshape(-1)])


def check_a4(spec: MixingSpec, prior: DomainPrior, a: Iterable[int], k: Iterable[int], seed: int = 0) -> AssumptionReport:
    """Rank test for component-wise changes of z_a.

    z_b and z_k are held at the per-domain prior means. With a factorised
    Gaussian prior the z_a scores do not depend on them, so this choice only
    matters for non-factorised priors.
    """
    a, k = _as_set(a), _as_set(k)
    if set(a) & set(k):
        raise ValueError(f"x_a and x_k must be disjoint, got {a} and {k}")
    za = z_a_set(spec.graph, a, k)
    rep = AssumptionReport(kind="A4", k=k, a=a, latents=za, n_domains=prior.n_domains)
    if not za:
        return rep
    need = 2 * len(za)
    rep.required_rank = need
    rng = np.random.default_rng(seed)
    za0 = prior.means.mean(axis=0)[za] + rng.standard_normal(len(za))
    za1 = za0 + PERTURB_SCALE * rng.standard_normal(len(za))
    n_use = min(need, prior.n_domains - 1)
    if n_use > 0:
        v0 = v_vector(prior, za, za1, za0, 0)
        m = np.stack([v_vector(prior, za, za1, za0, u) - v0 for u in range(1, n_use + 1)])
        rep.n_vectors = n_use
        rep.rank, s = numeric_rank(m)
        rep.singular_values = s.tolist()
    if prior.n_domains < need + 1:
        rep.verdict = INSUFFICIENT
    else:
        rep.verdict = SATISFIED if rep.rank == need else VIOLATED
    return rep


# ----------------------------------------------------------- domain counts


@dataclass
class DomainRequirement:
    latent: int
    required: int
    k: list[int]
    a: list[int]
    z_a: list[int]


def _subsets(items: list[int]):
    for r in range(len(items) + 1):
        yield from itertools.combinations(items, r)


def required_domains_detail(graph_or_spec) -> list[DomainRequirement]:
    """Per latent, the cheapest (k, a) pair under max(|Pa(x_k)|, 2|z_a| + 1).

    Enumerates every disjoint pair of observed subsets with a nonempty, the
    empty k included; on a fully connected graph only k = {} leaves z_a
    nonempty, which gives the 2n + 1 bound.
    """
    graph = graph_or_spec.graph if isinstance(graph_or_spec, MixingSpec) else graph_or_spec
    obs = list(range(graph.n_obs))
    best: dict[int, DomainRequirement] = {}
    for k in _subsets(obs):
        pa_k = graph.parents(k) if k else frozenset()
        rest = [j for j in obs if j not in k]
        for a in _subsets(rest):
            if not a:
                continue
            za = sorted(graph.parents(a) - pa_k)
            if not za:
                continue
            need = max(len(pa_k), 2 * len(za) + 1)
            for i in za:
                cur = best.get(i)
                if cur is None or need < cur.required:
                    best[i] = DomainRequirement(i, need, list(k), list(a), za)
    return [best[i] for i in range(graph.n_latent)]


def required_domains(graph_or_spec) -> list[int]:
    return [r.required for r in required_domains_detail(graph_or_spec)]


# ------------------------------------------------------- h-Jacobian blocks


@dataclass
class HJacobianEstimate:
    per_point: np.ndarray  # [B, n, n], J[b, i, j] = dz_i / dzhat_j
    mean_abs: np.ndarray  # [n, n]

    def __post_init__(self):
        if self.mean_abs.ndim != 2 or self.mean_abs.shape[0] != self.mean_abs.shape[1]:
            raise ValueError(f"h-Jacobian must be square, got {self.mean_abs.shape}")
        if not np.all(np.isfinite(self.per_point)):
            raise FloatingPointError("h-Jacobian has non-finite entries")


def _decoder_fn(model) -> Callable[[Tensor], Tensor]:
    return model.decoder if hasattr(model, "decoder") else model


def jacobian_rows(fn: Callable[[Tensor], Tensor], points: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-point Jacobian of a row-wise map, one backward pass per output column."""
    zt = Tensor(np.asarray(points, dtype=np.float64), requires_grad=True)
    out = fn(zt)
    rows = []
    for i in range(out.shape[1]):
        g = backward(sum_(out[:, i])).get(zt)
        rows.append(np.zeros(zt.shape) if g is None else g)
    return out.data, np.stack(rows, axis=1)


def estimate_h_jacobian(spec: MixingSpec, model, points) -> HJacobianEstimate:
    dec = _decoder_fn(model)
    _, J = jacobian_rows(lambda z: invert_tensor(spec, dec(z)), points)
    if J.shape[1:] != (spec.n_latent, spec.n_latent):
        raise ValueError(f"decoder latent width does not match the mixer: {J.shape[1:]}")
    return HJacobianEstimate(J, np.abs(J).mean(axis=0))


def decoder_support(model, points, threshold: float = BLOCK_THRESHOLD) -> tuple[np.ndarray, np.ndarray]:
    """Scale-free decoder mass M[k, j] and the boolean support M >= threshold.

    Mean |dx_k/dzhat_j| is multiplied by the spread of zhat_j so rescaling a
    latent does not change the support, then each row is divided by its max.
    """
    points = np.asarray(points, dtype=np.float64)
    _, J = jacobian_rows(_decoder_fn(model), points)
    mass = np.abs(J).mean(axis=0) * points.std(axis=0)[None, :]
    top = mass.max(axis=1, keepdims=True)
    mass = mass / np.where(top > 0, top, 1.0)
    return mass, mass >= threshold


@dataclass
class BlockVerdict:
    k: int
    j: int
    parents: list[int]
    values: list[float]
    passed: bool


def check_subspace_blocks(
    J: HJacobianEstimate,
    spec: MixingSpec,
    model=None,
    threshold: float = BLOCK_THRESHOLD,
    *,
    support: np.ndarray | None = None,
    points=None,
) -> list[BlockVerdict]:
    """For every (x_k, zhat_j) pair the decoder leaves unconnected, test that
    the row-normalised |J_h[i, j]| stays under ``threshold`` for i in Pa(x_k).

    The support comes from ``support`` if given, else from the model's
    decoder at ``points``.
    """
    if support is None:
        if model is None or points is None:
            raise ValueError("need either an explicit support or a model with evaluation points")
        _, support = decoder_support(model, points, threshold)
    M = J.mean_abs
    norms = np.linalg.norm(M, axis=1, keepdims=True)
    R = M / np.where(norms > 0, norms, 1.0)
    out = []
    for k in range(spec.n_obs):
        pa = sorted(spec.graph.parents(k))
        for j in range(M.shape[1]):
            if support[k, j]:
                continue
            vals = [float(R[i, j]) for i in pa]
            out.append(BlockVerdict(k, j, pa, vals, all(v < threshold for v in vals)))
    return out


# ------------------------------------------------------------------ report


def theory_report(spec: MixingSpec, prior: DomainPrior, seed: int = 0, blocks: dict | None = None) -> dict:
    n = spec.n_obs
    a3 = [check_a3(spec, prior, k, seed).to_dict() for k in _subsets(list(range(n))) if k]
    a4 = []
    for k in _subsets(list(range(n))):
        rest = [j for j in range(n) if j not in k]
        for a in _subsets(rest):
            if a:
                a4.append(check_a4(spec, prior, a, k, seed).to_dict())
    req = required_domains_detail(spec)
    return {
        "n_domains": prior.n_domains,
        "rank_rtol": RANK_RTOL,
        "block_threshold": BLOCK_THRESHOLD,
        "fully_connected": spec.graph.is_fully_connected,
        "required_domains": [asdict(r) for r in req],
        "subspace_identifiable": [r["k"] for r in a3 if r["verdict"] == SATISFIED],
        "componentwise_identifiable": sorted(r.latent for r in req if r.required <= prior.n_domains),
        "a3": a3,
        "a4": a4,
        "blocks": blocks or {},
    }


def write_theory_report(report: dict, path: str | Path) -> Path:
    path = Path(path)
    path.write_text(json.dumps(report, indent=1, sort_keys=True) + "\n")
    return path


def off_support_mass(model, points, spec: MixingSpec, z_true) -> float:
    """Share of the decoder's scale-free Jacobian mass on entries the true graph lacks.

    Estimated latents are matched to true ones with the MCC assignment, so
    entry (k, j) counts as off-support when the latent matched to zhat_j is
    not a parent of x_k.
    """
    points = np.asarray(points, dtype=np.float64)
    _, J = jacobian_rows(_decoder_fn(model), points)
    mass = np.abs(J).mean(axis=0) * points.std(axis=0)[None, :]
    match = assignment(abs_correlation(z_true, points))  # true i -> estimated j
    owner = np.empty(len(match), dtype=np.int64)
    owner[match] = np.arange(len(match))  # estimated j -> true i
    allowed = spec.graph.adjacency[owner, :].T  # [obs k, estimated j]
    total = mass.sum()
    return float(mass[~allowed].sum() / total) if total > 0 else 0.0
