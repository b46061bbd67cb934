"""Ground-truth synthetic data: sparse, exactly invertible LeakyReLU mixers
applied to domain-conditioned factorised Gaussian latents.
"""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np

from .numerics import Tensor, leaky_relu, matmul, seeded_rng

logger = logging.getLogger(__name__)

FORMAT_VERSION = 1
DEFAULT_SLOPE = 0.2
MAX_ATTEMPTS = 100
MIN_ABS_DET = 1e-6
MAX_COND = 1e4


class MixingConstructionError(RuntimeError):
    pass


class DatasetIntegrityError(RuntimeError):
    pass


# ------------------------------------------------------------------ graphs


@dataclass(frozen=True)
class MixingGraph:
    """Bipartite latent -> observed graph; ``adjacency[i, j]`` means z_i feeds x_j."""

    adjacency: np.ndarray

    def __post_init__(self):
        a = np.asarray(self.adjacency, dtype=bool)
        if a.ndim != 2:
            raise ValueError(f"adjacency must be 2-D, got shape {a.shape}")
        if not a.any(axis=0).all():
            raise ValueError(f"observed variables without parents: {np.flatnonzero(~a.any(axis=0)).tolist()}")
        if not a.any(axis=1).all():
            raise ValueError(f"latent variables without children: {np.flatnonzero(~a.any(axis=1)).tolist()}")
        a.setflags(write=False)
        object.__setattr__(self, "adjacency", a)

    @property
    def n_latent(self) -> int:
        return self.adjacency.shape[0]

    @property
    def n_obs(self) -> int:
        return self.adjacency.shape[1]

    def parents(self, k: Iterable[int] | int) -> frozenset[int]:
        """Pa(x_k): union of latent parents of the observed index set ``k``."""
        ks = [k] if isinstance(k, (int, np.integer)) else list(k)
        return frozenset(int(i) for i in np.flatnonzero(self.adjacency[:, ks].any(axis=1)))

    def children(self, i: int) -> frozenset[int]:
        return frozenset(int(j) for j in np.flatnonzero(self.adjacency[i]))

    @property
    def is_fully_connected(self) -> bool:
        return bool(self.adjacency.all())

    def to_list(self) -> list[list[int]]:
        return self.adjacency.astype(int).tolist()

    @classmethod
    def from_edges(cls, n_latent: int, n_obs: int, edges: Iterable[tuple[int, int]]) -> MixingGraph:
        a = np.zeros((n_latent, n_obs), dtype=bool)
        for i, j in edges:
            a[i, j] = True
        return cls(a)

    @classmethod
    def identity(cls, n: int) -> MixingGraph:
        return cls(np.eye(n, dtype=bool))

    @classmethod
    def fully_connected(cls, n: int) -> MixingGraph:
        return cls(np.ones((n, n), dtype=bool))


def layer_masks(graph: MixingGraph, depth: int) -> list[np.ndarray]:
    """Per-layer weight masks (shape [out, in]) whose composition has support A.

    The first layer routes z_i only to units j with A[i, j]. Later layers let
    unit j read unit j' only when Pa(x_j') is a subset of Pa(x_j), so by
    induction unit j never depends on a latent outside Pa(x_j). The diagonal
    is always kept, so every edge of A survives.
    """
    first = graph.adjacency.T.copy()
    pa = graph.adjacency.T  # [obs, latent]
    subset = ~(pa[None, :, :] & ~pa[:, None, :]).any(axis=2)  # subset[j, j']: Pa(j') <= Pa(j)
    return [first] + [subset.copy() for _ in range(depth - 1)]


# ------------------------------------------------------------------ mixers


@dataclass
class MixingSpec:
    graph: MixingGraph
    weights: list[np.ndarray]  # each [n, n], acting as h -> W @ h
    biases: list[np.ndarray]
    masks: list[np.ndarray]
    slope: float = DEFAULT_SLOPE
    seed: int = 0

    @property
    def depth(self) -> int:
        return len(self.weights)

    @property
    def n_latent(self) -> int:
        return self.graph.n_latent

    @property
    def n_obs(self) -> int:
        return self.graph.n_obs

    def to_dict(self) -> dict:
        return {
            "adjacency": self.graph.to_list(),
            "weights": [w.tolist() for w in self.weights],
            "biases": [b.tolist() for b in self.biases],
            "slope": self.slope,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> MixingSpec:
        graph = MixingGraph(np.array(d["adjacency"], dtype=bool))
        weights = [np.array(w, dtype=np.float64) for w in d["weights"]]
        return cls(
            graph=graph,
            weights=weights,
            biases=[np.array(b, dtype=np.float64) for b in d["biases"]],
            masks=layer_masks(graph, len(weights)),
            slope=float(d["slope"]),
            seed=int(d["seed"]),
        )

    def digest(self) -> str:
        h = hashlib.sha256()
        h.update(np.ascontiguousarray(self.graph.adjacency, dtype=np.uint8).tobytes())
        for w, b in zip(self.weights, self.biases):
            h.update(np.ascontiguousarray(w, dtype="<f8").tobytes())
            h.update(np.ascontiguousarray(b, dtype="<f8").tobytes())
        h.update(np.float64(self.slope).tobytes())
        h.update(int(self.seed).to_bytes(8, "little"))
        return h.hexdigest()


def _draw_layer(rng: np.random.Generator, mask: np.ndarray) -> np.ndarray:
    # Magnitudes bounded away from zero so every allowed edge carries signal.
    mag = rng.uniform(0.5, 1.5, size=mask.shape)
    sign = rng.choice([-1.0, 1.0], size=mask.shape)
    return mag * sign * mask


def build_mixing_spec(
    graph: MixingGraph,
    depth: int,
    seed: int,
    *,
    slope: float = DEFAULT_SLOPE,
    with_bias: bool = False,
) -> MixingSpec:
    if graph.n_latent != graph.n_obs:
        raise ValueError(f"invertible mixer needs n_latent == n_obs, got {graph.n_latent} and {graph.n_obs}")
    if depth < 1:
        raise ValueError(f"depth must be >= 1, got {depth}")
    if not slope > 0:
        raise ValueError(f"LeakyReLU slope must be positive for invertibility, got {slope}")
    rng = seeded_rng(seed)
    masks = layer_masks(graph, depth)
    n = graph.n_latent
    weights, biases = [], []
    for layer, mask in enumerate(masks):
        for _ in range(MAX_ATTEMPTS):
            w = _draw_layer(rng, mask)
            det = abs(np.linalg.det(w))
            cond = np.linalg.cond(w)
            if det > MIN_ABS_DET and cond < MAX_COND:
                break
        else:
            raise MixingConstructionError(
                f"layer {layer}: no invertible draw in {MAX_ATTEMPTS} attempts "
                f"(last |det|={det:.3g}, cond={cond:.3g}, mask density={mask.mean():.2f})"
            )
        weights.append(w)
        biases.append(rng.uniform(-0.5, 0.5, size=n) if with_bias else np.zeros(n))
    return MixingSpec(graph=graph, weights=weights, biases=biases, masks=masks, slope=slope, seed=seed)


def _inv_leaky(y: np.ndarray, slope: float) -> np.ndarray:
    return np.where(y > 0, y, y / slope)


def mix(spec: MixingSpec, z: np.ndarray) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    if z.ndim != 2 or z.shape[1] != spec.n_latent:
        raise ValueError(f"mix: expected [N, {spec.n_latent}] latents, got {z.shape}")
    h = z
    for w, b in zip(spec.weights, spec.biases):
        pre = h @ w.T + b
        h = np.where(pre > 0, pre, spec.slope * pre)
    return h


def mix_tensor(spec: MixingSpec, z: Tensor) -> Tensor:
    """Differentiable version of :func:`mix` for autodiff Jacobians."""
    h = z
    for w, b in zip(spec.weights, spec.biases):
        h = leaky_relu(matmul(h, w.T) + b, spec.slope)
    return h


def invert(spec: MixingSpec, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != spec.n_obs:
        raise ValueError(f"invert: expected [N, {spec.n_obs}] observations, got {x.shape}")
    h = x
    for layer in reversed(range(spec.depth)):
        w, b = spec.weights[layer], spec.biases[layer]
        pre = _inv_leaky(h, spec.slope) - b
        try:
            h = np.linalg.solve(w, pre.T).T
        except np.linalg.LinAlgError as exc:
            raise MixingConstructionError(f"layer {layer} is singular") from exc
    return h


def invert_tensor(spec: MixingSpec, x: Tensor) -> Tensor:
    """Differentiable exact inverse: inverse LeakyReLU then a fixed linear solve."""
    h = x
    for layer in reversed(range(spec.depth)):
        w, b = spec.weights[layer], spec.biases[layer]
        scale = np.where(h.data > 0, 1.0, 1.0 / spec.slope)
        h = matmul(h * scale - b, np.linalg.inv(w).T)
    return h


# ------------------------------------------------------------------ priors


@dataclass
class DomainPrior:
    """Independent Gaussian latents per domain: z_i | u ~ N(means[u, i], exp(logvars[u, i]))."""

    means: np.ndarray  # [n_domains, n_latent]
    logvars: np.ndarray

    def __post_init__(self):
        self.means = np.atleast_2d(np.asarray(self.means, dtype=np.float64))
        self.logvars = np.atleast_2d(np.asarray(self.logvars, dtype=np.float64))
        if self.means.shape != self.logvars.shape:
            raise ValueError(f"means {self.means.shape} and logvars {self.logvars.shape} differ")
        if np.isnan(self.means).any() or np.isnan(self.logvars).any():
            raise ValueError("prior parameters contain NaN")

    @property
    def n_domains(self) -> int:
        return self.means.shape[0]

    @property
    def n_latent(self) -> int:
        return self.means.shape[1]

    @property
    def variances(self) -> np.ndarray:
        return np.exp(self.logvars)

    def score(self, z: np.ndarray, u: int) -> np.ndarray:
        """d/dz_i log p(z | u) for the factorised Gaussian."""
        return -(np.asarray(z) - self.means[u]) / self.variances[u]

    def second_score(self, u: int) -> np.ndarray:
        """d^2/dz_i^2 log p(z | u); constant in z for Gaussians."""
        return -1.0 / self.variances[u]

    def logdensity(self, z: np.ndarray, u: int) -> np.ndarray:
        var = self.variances[u]
        return (-0.5 * np.log(2 * np.pi * var) - 0.5 * (np.asarray(z) - self.means[u]) ** 2 / var).sum(axis=-1)

    def to_dict(self) -> dict:
        return {"means": self.means.tolist(), "logvars": self.logvars.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> DomainPrior:
        return cls(np.array(d["means"]), np.array(d["logvars"]))


def random_prior(n_domains: int, n_latent: int, seed: int) -> DomainPrior:
    if n_domains < 1:
        raise ValueError("need at least one domain")
    rng = seeded_rng(seed)
    means = rng.uniform(-2.0, 2.0, size=(n_domains, n_latent))
    logvars = rng.uniform(-1.0, 0.5, size=(n_domains, n_latent))
    return DomainPrior(means, logvars)


# ----------------------------------------------------------------- datasets


@dataclass
class DatasetBundle:
    x: np.ndarray
    z: np.ndarray
    u: np.ndarray
    train_idx: np.ndarray
    test_idx: np.ndarray
    spec: MixingSpec
    prior: DomainPrior
    seed: int
    meta: dict = field(default_factory=dict)

    @property
    def spec_digest(self) -> str:
        return self.spec.digest()

    @property
    def n_domains(self) -> int:
        return self.prior.n_domains

    def __len__(self) -> int:
        return len(self.x)

    def digest(self) -> str:
        h = hashlib.sha256(self.spec_digest.encode())
        for arr, dt in ((self.x, "<f8"), (self.z, "<f8"), (self.u, "<u4"), (self.train_idx, "<u4"), (self.test_idx, "<u4")):
            h.update(np.ascontiguousarray(arr, dtype=dt).tobytes())
        return h.hexdigest()

    def train(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        i = self.train_idx
        return self.x[i], self.z[i], self.u[i]

    def test(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        i = self.test_idx
        return self.x[i], self.z[i], self.u[i]


def split_indices(n: int, rng: np.random.Generator, test_frac: float = 0.1) -> tuple[np.ndarray, np.ndarray]:
    perm = rng.permutation(n)
    n_test = int(round(n * test_frac))
    return np.sort(perm[n_test:]), np.sort(perm[:n_test])


def sample_dataset(spec: MixingSpec, prior: DomainPrior, n_per_domain: int, seed: int) -> DatasetBundle:
    if n_per_domain < 10:
        raise ValueError(f"n_per_domain must be >= 10 for a 90/10 split, got {n_per_domain}")
    if prior.n_latent != spec.n_latent:
        raise ValueError(f"prior has {prior.n_latent} latents, spec has {spec.n_latent}")
    rng = seeded_rng(seed)
    zs, us = [], []
    for d in range(prior.n_domains):
        eps = rng.standard_normal((n_per_domain, prior.n_latent))
        zs.append(prior.means[d] + np.sqrt(prior.variances[d]) * eps)
        us.append(np.full(n_per_domain, d, dtype=np.int64))
    z = np.concatenate(zs)
    u = np.concatenate(us)
    x = mix(spec, z)
    train_idx, test_idx = split_indices(len(z), rng)
    return DatasetBundle(x=x, z=z, u=u, train_idx=train_idx, test_idx=test_idx, spec=spec, prior=prior, seed=seed)


# ------------------------------------------------------------------ presets

N_LATENT = 4
PRESET_DEPTH = 2

_CHAIN = [(0, 0), (0, 1), (1, 1), (1, 2), (2, 2), (2, 3), (3, 3)]
PRESET_EDGES: dict[str, list[tuple[int, int]]] = {
    "A": _CHAIN,
    "B": _CHAIN + [(3, 0)],
    "C": _CHAIN + [(3, 0), (0, 2), (1, 3)],
    "full": [(i, j) for i in range(N_LATENT) for j in range(N_LATENT)],
}


def preset_graph(name: str) -> MixingGraph:
    try:
        edges = PRESET_EDGES[name]
    except KeyError:
        raise ValueError(f"unknown preset {name!r}; choose from {sorted(PRESET_EDGES)}") from None
    return MixingGraph.from_edges(N_LATENT, N_LATENT, edges)


def preset(name: str, n_domains: int, seed: int, depth: int = PRESET_DEPTH) -> tuple[MixingSpec, DomainPrior]:
    """Stand-in graphs for the three synthetic datasets (plus ``"full"``).

    ``A`` is a chain where z_i feeds x_i and x_{i+1}; ``B`` and ``C`` add one
    and three cross edges. The mixer depends only on (name, seed); domain
    parameters are drawn per domain from a separate stream.
    """
    graph = preset_graph(name)
    spec = build_mixing_spec(graph, depth, seed)
    prior = random_prior(n_domains, graph.n_latent, seed + 7919)
    return spec, prior


# --------------------------------------------------------------- disk format


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def save_dataset(bundle: DatasetBundle, directory: str | Path) -> Path:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    np.ascontiguousarray(bundle.x, dtype="<f8").tofile(d / "x.f64le")
    np.ascontiguousarray(bundle.z, dtype="<f8").tofile(d / "z.f64le")
    np.ascontiguousarray(bundle.u, dtype="<u4").tofile(d / "u.u32le")
    meta = {
        "version": FORMAT_VERSION,
        "n_rows": len(bundle.x),
        "n_obs": bundle.x.shape[1],
        "n_latent": bundle.z.shape[1],
        "n_domains": bundle.n_domains,
        "seed": bundle.seed,
        "spec_digest": bundle.spec_digest,
        "digest": bundle.digest(),
        "train_idx": bundle.train_idx.tolist(),
        "test_idx": bundle.test_idx.tolist(),
        "spec": bundle.spec.to_dict(),
        "prior": bundle.prior.to_dict(),
        "files": {name: _sha256(d / name) for name in ("x.f64le", "z.f64le", "u.u32le")},
        **bundle.meta,
    }
    (d / "meta.json").write_text(json.dumps(meta, indent=1, sort_keys=True) + "\n")
    return d


def load_dataset(directory: str | Path) -> DatasetBundle:
    d = Path(directory)
    try:
        meta = json.loads((d / "meta.json").read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise DatasetIntegrityError(f"{d}: unreadable meta.json ({exc})") from exc
    try:
        if meta["version"] != FORMAT_VERSION:
            raise DatasetIntegrityError(f"{d}: format version {meta['version']} != {FORMAT_VERSION}")
        for name, digest in meta["files"].items():
            if _sha256(d / name) != digest:
                raise DatasetIntegrityError(f"{d}/{name}: checksum mismatch")
        n, n_obs, n_lat = meta["n_rows"], meta["n_obs"], meta["n_latent"]
        x = np.fromfile(d / "x.f64le", dtype="<f8").reshape(n, n_obs)
        z = np.fromfile(d / "z.f64le", dtype="<f8").reshape(n, n_lat)
        u = np.fromfile(d / "u.u32le", dtype="<u4").astype(np.int64)
        spec = MixingSpec.from_dict(meta["spec"])
        prior = DomainPrior.from_dict(meta["prior"])
        extra = {k: meta[k] for k in ("preset", "stand_in") if k in meta}
        bundle = DatasetBundle(
            x=x,
            z=z,
            u=u,
            train_idx=np.array(meta["train_idx"], dtype=np.int64),
            test_idx=np.array(meta["test_idx"], dtype=np.int64),
            spec=spec,
            prior=prior,
            seed=int(meta["seed"]),
            meta=extra,
        )
    except (KeyError, ValueError, TypeError, OSError) as exc:
        raise DatasetIntegrityError(f"{d}: malformed dataset ({exc})") from exc
    if spec.digest() != meta["spec_digest"] or bundle.digest() != meta["digest"]:
        raise DatasetIntegrityError(f"{d}: digest mismatch")
    return bundle
