"""CG-VAE: MLP encoder/decoder, conditional deep-sigmoid-flow prior and a
sparsity penalty on the decoder Jacobian.

The trainer minimises ``-L_r + alpha * L_s + beta * L_KL (+ gamma_m * L_m)``.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .flows import DeepSigmoidFlow, LatentMask, gated_prior_logdensity, prior_logdensity
from .numerics import (
    AdamWState,
    NonFiniteGradient,
    Tensor,
    abs_,
    adamw_step,
    backward,
    clip,
    exp,
    leaky_relu,
    log,
    matmul,
    mean,
    reshape,
    seeded_rng,
    square,
    sum_,
)
from .synthgen import DatasetBundle

logger = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1
LOG_2PI = math.log(2.0 * math.pi)
PENALTY_KINDS = ("L1", "L2", "finite_diff")
PENALTY_SCALES = ("none", "batch_std")


class DivergenceError(FloatingPointError):
    pass


class CheckpointError(RuntimeError):
    pass


# -------------------------------------------------------------------- config


@dataclass
class TrainConfig:
    lr: float = 3e-3
    batch_size: int = 64
    alpha: float = 5e-2
    beta: float = 1e-3
    epochs: int = 300
    seed: int = 0
    penalty_kind: str = "L1"
    alpha_zero_ablation: bool = False
    hidden: int = 64
    n_layers: int = 5
    slope: float = 0.2
    flow_units: int = 8
    weight_decay: float = 1e-2
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    logvar_clamp: float = 10.0
    mc_samples: int = 1
    fd_step: float = 1e-2
    fd_reduce: str = "summed"
    use_mask: bool = False
    gamma_m: float = 1e-2
    penalty_scale: str = "none"

    def __post_init__(self):
        if self.alpha < 0 or self.beta < 0:
            raise ValueError(f"alpha and beta must be >= 0, got {self.alpha}, {self.beta}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.penalty_kind not in PENALTY_KINDS:
            raise ValueError(f"penalty_kind must be one of {PENALTY_KINDS}, got {self.penalty_kind!r}")
        if self.fd_reduce not in ("summed", "entrywise"):
            raise ValueError(f"fd_reduce must be 'summed' or 'entrywise', got {self.fd_reduce!r}")
        if self.penalty_scale not in PENALTY_SCALES:
            raise ValueError(f"penalty_scale must be one of {PENALTY_SCALES}, got {self.penalty_scale!r}")
        if self.mc_samples < 1:
            raise ValueError(f"mc_samples must be >= 1, got {self.mc_samples}")
        if self.fd_step <= 0:
            raise ValueError("fd_step must be positive")

    @property
    def effective_alpha(self) -> float:
        return 0.0 if self.alpha_zero_ablation else self.alpha

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> TrainConfig:
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown TrainConfig fields: {sorted(unknown)}")
        return cls(**d)


# -------------------------------------------------------------------- model


@dataclass
class MLP:
    """LeakyReLU MLP; the last layer is affine."""

    weights: list[Tensor]  # [in, out]
    biases: list[Tensor]
    slope: float = 0.2

    @classmethod
    def init(cls, sizes: list[int], rng: np.random.Generator, slope: float = 0.2) -> MLP:
        ws, bs = [], []
        for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
            bound = 1.0 / math.sqrt(fan_in)
            ws.append(Tensor(rng.uniform(-bound, bound, (fan_in, fan_out)), True))
            bs.append(Tensor(rng.uniform(-bound, bound, fan_out), True))
        return cls(ws, bs, slope)

    @property
    def sizes(self) -> list[int]:
        return [self.weights[0].shape[0]] + [w.shape[1] for w in self.weights]

    def parameters(self, prefix: str) -> list[tuple[str, Tensor]]:
        out = []
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            out += [(f"{prefix}.{i}.weight", w), (f"{prefix}.{i}.bias", b)]
        return out

    def __call__(self, x, check_finite: bool = False) -> Tensor:
        h = x if isinstance(x, Tensor) else Tensor(x)
        last = len(self.weights) - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            h = matmul(h, w) + b
            if i < last:
                h = leaky_relu(h, self.slope)
            if check_finite and not np.all(np.isfinite(h.data)):
                raise DivergenceError(f"non-finite activations at layer {i}")
        return h

    def forward_with_jacobian(self, z) -> tuple[Tensor, Tensor]:
        """Output and Jacobian tangents, recorded on the tape.

        Tangents are pushed forward alongside the activations, giving
        ``T[j, b, i] = d out_i / d z_j`` at sample b. LeakyReLU derivatives are
        piecewise constant, so the tangents stay differentiable in the weights
        without second-order autodiff.
        """
        h = z if isinstance(z, Tensor) else Tensor(z)
        n_in = h.shape[1]
        last = len(self.weights) - 1
        t = None
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            pre = matmul(h, w) + b
            t = reshape(w, (n_in, 1, w.shape[1])) if t is None else matmul(t, w)
            if i < last:
                h = leaky_relu(pre, self.slope)
                t = t * np.where(pre.data > 0, 1.0, self.slope)
            else:
                h = pre
        return h, t


@dataclass
class CgvaeModel:
    encoder: MLP
    decoder: MLP
    flow: DeepSigmoidFlow
    mask: LatentMask | None = None
    logvar_clamp: float = 10.0

    @property
    def n_latent(self) -> int:
        return self.decoder.weights[0].shape[0]

    @property
    def n_obs(self) -> int:
        return self.decoder.weights[-1].shape[1]

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        out = self.encoder.parameters("encoder") + self.decoder.parameters("decoder") + self.flow.parameters()
        if self.mask is not None:
            out += self.mask.parameters()
        return out

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def decode(self, z) -> Tensor:
        return self.decoder(z)

    def posterior_mean(self, x: np.ndarray) -> np.ndarray:
        mu, _ = encode_stats(self, x)
        return mu.data


def build_model(n_obs: int, n_latent: int, n_domains: int, cfg: TrainConfig) -> CgvaeModel:
    rng = seeded_rng(cfg.seed)
    hidden = [cfg.hidden] * (cfg.n_layers - 1)
    encoder = MLP.init([n_obs] + hidden + [2 * n_latent], rng, cfg.slope)
    decoder = MLP.init([n_latent] + hidden + [n_obs], rng, cfg.slope)
    flow = DeepSigmoidFlow.init(n_domains, n_latent, cfg.flow_units, rng)
    mask = LatentMask.init(n_latent) if cfg.use_mask else None
    return CgvaeModel(encoder, decoder, flow, mask, cfg.logvar_clamp)


# -------------------------------------------------------------- loss terms


@dataclass
class LossBreakdown:
    """Batch-averaged terms. ``total`` is the minimised objective."""

    L_r: float
    L_KL: float
    L_s: float = 0.0
    L_m: float = 0.0
    total: float = 0.0

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class Terms:
    """Differentiable loss terms for one batch, plus the posterior sample."""

    L_r: Tensor
    L_KL: Tensor
    z: Tensor
    L_s: Tensor | None = None
    L_m: Tensor | None = None


def encode_stats(model: CgvaeModel, x) -> tuple[Tensor, Tensor]:
    out = model.encoder(x, check_finite=True)
    n = model.n_latent
    mu = out[:, :n]
    logvar = clip(out[:, n:], -model.logvar_clamp, model.logvar_clamp)
    return mu, logvar


def encode(model: CgvaeModel, x, eta: np.ndarray | None = None, rng: np.random.Generator | None = None):
    """Posterior statistics and a reparameterised sample z = mu + sigma * eta."""
    mu, logvar = encode_stats(model, x)
    if eta is None:
        eta = (rng or np.random.default_rng()).standard_normal(mu.shape)
    z = mu + exp(0.5 * logvar) * eta
    return mu, logvar, z


def elbo_terms(model: CgvaeModel, x, u, eta: np.ndarray | None = None, rng: np.random.Generator | None = None) -> Terms:
    """Reconstruction and single-sample KL estimate for a batch."""
    x = np.asarray(x, dtype=np.float64)
    if len(x) == 0:
        raise ValueError("elbo_terms: empty batch")
    if eta is None:
        eta = (rng or np.random.default_rng()).standard_normal((len(x), model.n_latent))
    eta = np.asarray(eta, dtype=np.float64)
    mu, logvar, z = encode(model, x, eta)
    xhat = model.decoder(z)
    L_r = -mean(sum_(square(x - xhat), axis=1))
    log_q = sum_(-0.5 * LOG_2PI - 0.5 * logvar - 0.5 * eta**2, axis=1)
    if model.mask is None:
        log_p = prior_logdensity(model.flow, z, u)
    else:
        log_p = gated_prior_logdensity(model.flow, model.mask, z, u)
    L_KL = mean(log_q - log_p)
    return Terms(L_r=L_r, L_KL=L_KL, z=z)


def decoder_jacobian(model: CgvaeModel, z) -> np.ndarray:
    """Decoder Jacobian as an array [B, n_obs, n_latent]."""
    _, t = model.decoder.forward_with_jacobian(z)
    return np.transpose(t.data, (1, 2, 0))


def latent_scale(z: Tensor) -> Tensor:
    """Differentiable per-latent batch standard deviation, shaped [n, 1, 1]."""
    centred = z - mean(z, axis=0, keepdims=True)
    var = mean(square(centred), axis=0)
    return reshape(exp(0.5 * log(var + 1e-12)), (z.shape[1], 1, 1))


def sparse_penalty_exact(model: CgvaeModel, z, kind: str = "L1", scale: str = "none") -> Tensor:
    """Batch mean of sum_ij |dxhat_i/dz_j| (L1) or of the squared entries (L2).

    With ``scale="batch_std"`` column j is multiplied by the batch std of
    z_j, i.e. the Jacobian is taken with respect to standardised latents.
    That makes the penalty invariant to rescaling a latent, a direction in
    which the KL term is flat.
    """
    z = z if isinstance(z, Tensor) else Tensor(z)
    _, t = model.decoder.forward_with_jacobian(z)
    batch = t.shape[1]
    if scale == "batch_std":
        t = t * latent_scale(z)
    elif scale != "none":
        raise ValueError(f"unknown penalty scale {scale!r}")
    if kind == "L1":
        return sum_(abs_(t)) * (1.0 / batch)
    if kind == "L2":
        return sum_(square(t)) * (1.0 / batch)
    raise ValueError(f"exact penalty kind must be L1 or L2, got {kind!r}")


def sparse_penalty_fd(model: CgvaeModel, z, step: float = 1e-2, reduce: str = "summed") -> Tensor:
    """Forward-difference penalty.

    ``summed`` takes the L1 norm of the summed directional differences
    ``sum_i (G(z + step e_i) - G(z)) / step``, i.e. of the Jacobian row
    sums. ``entrywise`` sums the absolute value of every difference, which
    approximates the exact L1 penalty instead. All perturbed copies go
    through the decoder as one stacked batch.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    z = z if isinstance(z, Tensor) else Tensor(z)
    b, n = z.shape
    offsets = np.concatenate([np.zeros((1, n)), step * np.eye(n)])  # [n+1, n]
    stacked = reshape(reshape(z, (1, b, n)) + offsets[:, None, :], ((n + 1) * b, n))
    out = model.decoder(stacked)
    out = reshape(out, (n + 1, b, out.shape[1]))
    base = out[0:1]
    diffs = (out[1:] - base) * (1.0 / step)  # [n, b, n_obs]
    if reduce == "summed":
        return sum_(abs_(sum_(diffs, axis=0))) * (1.0 / b)
    if reduce == "entrywise":
        return sum_(abs_(diffs)) * (1.0 / b)
    raise ValueError(f"reduce must be 'summed' or 'entrywise', got {reduce!r}")


def sparse_penalty(model: CgvaeModel, z, cfg: TrainConfig) -> Tensor:
    if cfg.penalty_kind == "finite_diff":
        return sparse_penalty_fd(model, z, cfg.fd_step, cfg.fd_reduce)
    return sparse_penalty_exact(model, z, cfg.penalty_kind, cfg.penalty_scale)


def objective(model: CgvaeModel, x, u, cfg: TrainConfig, eta: np.ndarray | None = None, rng=None) -> tuple[Tensor, Terms]:
    terms = elbo_terms(model, x, u, eta, rng)
    total = -terms.L_r + cfg.beta * terms.L_KL
    alpha = cfg.effective_alpha
    if alpha > 0:
        terms.L_s = sparse_penalty(model, terms.z, cfg)
        total = total + alpha * terms.L_s
    if model.mask is not None:
        terms.L_m = model.mask.l1()
        total = total + cfg.gamma_m * terms.L_m
    return total, terms


def breakdown(total: Tensor, terms: Terms) -> LossBreakdown:
    return LossBreakdown(
        L_r=terms.L_r.item(),
        L_KL=terms.L_KL.item(),
        L_s=terms.L_s.item() if terms.L_s is not None else 0.0,
        L_m=terms.L_m.item() if terms.L_m is not None else 0.0,
        total=total.item(),
    )


# ------------------------------------------------------------------ training


@dataclass
class TrainResult:
    model: CgvaeModel
    history: list[LossBreakdown] = field(default_factory=list)
    steps: int = 0


def train(
    model: CgvaeModel,
    dataset: DatasetBundle,
    cfg: TrainConfig,
    *,
    callback=None,
) -> TrainResult:
    """Mini-batch AdamW on the training split; deterministic given ``cfg.seed``."""
    if dataset.n_domains < 1:
        raise ValueError("dataset has no domains")
    x_all, _, u_all = dataset.train()
    rng = seeded_rng(cfg.seed + 1)
    named = model.named_parameters()
    names = [n for n, _ in named]
    params = [p for _, p in named]
    state = AdamWState(lr=cfg.lr, beta1=cfg.beta1, beta2=cfg.beta2, eps=cfg.adam_eps, weight_decay=cfg.weight_decay)
    state.init([p.data for p in params])
    result = TrainResult(model)
    n = len(x_all)
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        sums = np.zeros(5)
        batches = 0
        for start in range(0, n, cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            # Several posterior samples per row are stacked into one batch.
            idx_mc = np.tile(idx, cfg.mc_samples)
            eta = rng.standard_normal((len(idx_mc), model.n_latent))
            try:
                total, terms = objective(model, x_all[idx_mc], u_all[idx_mc], cfg, eta)
            except DivergenceError as exc:
                raise DivergenceError(f"epoch {epoch} batch {batches}: {exc}") from exc
            if not np.isfinite(total.data):
                raise DivergenceError(f"loss is {total.item()} at epoch {epoch} batch {batches}")
            grads = backward(total)
            try:
                adamw_step([p.data for p in params], [grads.get(p, np.zeros(p.shape)) for p in params], state, names)
            except NonFiniteGradient as exc:
                raise DivergenceError(f"epoch {epoch} batch {batches}: {exc}") from exc
            b = breakdown(total, terms)
            sums += (b.L_r, b.L_KL, b.L_s, b.L_m, b.total)
            batches += 1
        result.history.append(LossBreakdown(*(sums / max(batches, 1))))
        result.steps = state.step
        if callback is not None:
            callback(epoch, result.history[-1])
    return result


# ---------------------------------------------------------------- checkpoints


def _param_blob(model: CgvaeModel) -> bytes:
    return b"".join(np.ascontiguousarray(p.data, dtype="<f8").tobytes() for p in model.parameters())


def architecture(model: CgvaeModel) -> dict:
    return {
        "encoder_sizes": model.encoder.sizes,
        "decoder_sizes": model.decoder.sizes,
        "slope": model.encoder.slope,
        "n_domains": model.flow.n_domains,
        "flow_units": model.flow.n_units,
        "use_mask": model.mask is not None,
        "logvar_clamp": model.logvar_clamp,
    }


def checkpoint_save(model: CgvaeModel, path: str | Path, cfg: TrainConfig | None = None, dataset_digest: str = "") -> Path:
    d = Path(path)
    d.mkdir(parents=True, exist_ok=True)
    blob = _param_blob(model)
    manifest = {
        "version": CHECKPOINT_VERSION,
        "architecture": architecture(model),
        "config": cfg.to_dict() if cfg is not None else None,
        "dataset_digest": dataset_digest,
        "params": [{"name": n, "shape": list(p.shape)} for n, p in model.named_parameters()],
        "params_sha256": hashlib.sha256(blob).hexdigest(),
    }
    (d / "params.f64le").write_bytes(blob)
    (d / "model.json").write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    return d


def read_manifest(path: str | Path) -> dict:
    d = Path(path)
    try:
        manifest = json.loads((d / "model.json").read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{d}: unreadable model.json ({exc})") from exc
    if manifest.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"{d}: checkpoint version {manifest.get('version')} != {CHECKPOINT_VERSION}")
    return manifest


def checkpoint_load(path: str | Path) -> tuple[CgvaeModel, dict]:
    d = Path(path)
    manifest = read_manifest(d)
    try:
        blob = (d / "params.f64le").read_bytes()
    except OSError as exc:
        raise CheckpointError(f"{d}: missing params.f64le") from exc
    expected = 8 * sum(int(np.prod(p["shape"])) for p in manifest["params"])
    if len(blob) != expected:
        raise CheckpointError(f"{d}: params.f64le is {len(blob)} bytes, manifest declares {expected} (truncated or corrupt)")
    if hashlib.sha256(blob).hexdigest() != manifest["params_sha256"]:
        raise CheckpointError(f"{d}: parameter digest mismatch")
    arch = manifest["architecture"]
    model = _empty_model(arch)
    named = model.named_parameters()
    if [n for n, _ in named] != [p["name"] for p in manifest["params"]]:
        raise CheckpointError(f"{d}: parameter layout does not match architecture")
    flat = np.frombuffer(blob, dtype="<f8")
    offset = 0
    for (_, t), spec in zip(named, manifest["params"]):
        size = int(np.prod(spec["shape"]))
        if tuple(spec["shape"]) != t.shape:
            raise CheckpointError(f"{d}: shape mismatch for {spec['name']}")
        t.data = flat[offset : offset + size].reshape(spec["shape"]).astype(np.float64)
        offset += size
    return model, manifest


def _empty_model(arch: dict) -> CgvaeModel:
    rng = np.random.default_rng(0)
    enc = MLP.init(arch["encoder_sizes"], rng, arch["slope"])
    dec = MLP.init(arch["decoder_sizes"], rng, arch["slope"])
    n_latent = arch["decoder_sizes"][0]
    flow = DeepSigmoidFlow.init(arch["n_domains"], n_latent, arch["flow_units"])
    mask = LatentMask.init(n_latent) if arch["use_mask"] else None
    return CgvaeModel(enc, dec, flow, mask, arch["logvar_clamp"])
