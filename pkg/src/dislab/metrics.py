"""Disentanglement scores: MCC, DCI and a coordinate-descent LASSO probe."""

from __future__ import annotations

import csv
import math
import warnings
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from scipy.optimize import linear_sum_assignment
from scipy.stats import rankdata

CORR_KINDS = ("pearson", "spearman")
DEFAULT_LAMBDA = 1e-3
LASSO_TOL = 1e-6
METRICS_HEADER = (
    "run_id",
    "seed",
    "n_domains",
    "alpha",
    "beta",
    "penalty_kind",
    "mcc",
    "disentanglement",
    "completeness",
    "informativeness",
    "r2",
    "mse",
)


class DegenerateColumnWarning(RuntimeWarning):
    pass


def _as_2d(a, name: str) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    if a.ndim == 1:
        a = a[:, None]
    if a.ndim != 2:
        raise ValueError(f"{name} must be 2-D, got shape {a.shape}")
    return a


def abs_correlation(z_true, z_est, corr_kind: str = "pearson") -> np.ndarray:
    """|corr(z_true[:, i], z_est[:, j])| with constant columns mapped to 0."""
    z_true = _as_2d(z_true, "z_true")
    z_est = _as_2d(z_est, "z_est")
    if z_true.shape[0] != z_est.shape[0]:
        raise ValueError(f"row count mismatch: {z_true.shape[0]} vs {z_est.shape[0]}")
    if corr_kind not in CORR_KINDS:
        raise ValueError(f"corr_kind must be one of {CORR_KINDS}, got {corr_kind!r}")
    if corr_kind == "spearman":
        z_true = rankdata(z_true, axis=0)
        z_est = rankdata(z_est, axis=0)
    a = z_true - z_true.mean(axis=0)
    b = z_est - z_est.mean(axis=0)
    na = np.sqrt((a * a).sum(axis=0))
    nb = np.sqrt((b * b).sum(axis=0))
    # A column is constant when its spread is at round-off level of its magnitude.
    scale_a = np.abs(z_true).max(axis=0) * math.sqrt(len(a)) * 1e-12
    scale_b = np.abs(z_est).max(axis=0) * math.sqrt(len(b)) * 1e-12
    dead_a = na <= scale_a
    dead_b = nb <= scale_b
    if dead_a.any() or dead_b.any():
        warnings.warn(
            f"zero-variance columns (true: {np.flatnonzero(dead_a).tolist()}, "
            f"estimated: {np.flatnonzero(dead_b).tolist()}) get correlation 0",
            DegenerateColumnWarning,
            stacklevel=2,
        )
    na = np.where(dead_a, 1.0, na)
    nb = np.where(dead_b, 1.0, nb)
    c = np.abs((a.T @ b) / np.outer(na, nb))
    c[dead_a, :] = 0.0
    c[:, dead_b] = 0.0
    return np.clip(c, 0.0, 1.0)


def _best_total(c: np.ndarray) -> float:
    if c.size == 0:
        return 0.0
    r, k = linear_sum_assignment(c, maximize=True)
    return float(c[r, k].sum())


def assignment(c: np.ndarray) -> np.ndarray:
    """Column matched to each row under the maximum-weight assignment.

    Among optimal assignments the lexicographically smallest column sequence
    is returned: rows are fixed in order, each to the lowest column that
    still admits an optimal completion.
    """
    c = np.asarray(c, dtype=np.float64)
    n_rows, n_cols = c.shape
    if n_rows > n_cols:
        raise ValueError(f"need at least as many columns as rows, got {c.shape}")
    best = _best_total(c)
    tol = 1e-12 * max(1.0, abs(best))
    out = np.empty(n_rows, dtype=np.int64)
    rows = list(range(n_rows))
    cols = list(range(n_cols))
    acc = 0.0
    for i in range(n_rows):
        rest_rows = rows[i + 1 :]
        for j in cols:
            rest_cols = [q for q in cols if q != j]
            total = acc + c[i, j] + _best_total(c[np.ix_(rest_rows, rest_cols)])
            if total >= best - tol:
                out[i] = j
                acc += c[i, j]
                cols = rest_cols
                break
        else:  # round-off defeated every candidate; fall back to the solver
            r, k = linear_sum_assignment(c, maximize=True)
            out[r] = k
            return out
    return out


def mcc(z_true, z_est, corr_kind: str = "pearson") -> float:
    z_true = _as_2d(z_true, "z_true")
    z_est = _as_2d(z_est, "z_est")
    d = min(z_true.shape[1], z_est.shape[1])
    c = abs_correlation(z_true[:, :d], z_est[:, :d], corr_kind)
    cols = assignment(c)
    return float(np.mean(c[np.arange(d), cols]))


# ------------------------------------------------------------------- LASSO


def soft_threshold(x, lam):
    return np.sign(x) * np.maximum(np.abs(x) - lam, 0.0)


def lasso_objective(X: np.ndarray, y: np.ndarray, w: np.ndarray, lam: float) -> float:
    r = y - X @ w
    return float(0.5 * (r @ r) / len(y) + lam * np.abs(w).sum())


def lasso_cd(
    X: np.ndarray,
    y: np.ndarray,
    lam: float,
    tol: float = LASSO_TOL,
    max_sweeps: int = 10_000,
    history: list | None = None,
) -> np.ndarray:
    """Cyclic coordinate descent for ``0.5/N ||y - Xw||^2 + lam ||w||_1``.

    No intercept: callers centre X and y. Stops when the largest coordinate
    change in a sweep is below ``tol``. When ``history`` is a list, the
    objective after every sweep is appended to it.
    """
    if lam < 0:
        raise ValueError(f"LASSO penalty must be >= 0, got {lam}")
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    n, p = X.shape
    col_sq = (X * X).sum(axis=0) / n
    w = np.zeros(p)
    r = y.copy()
    for _ in range(max_sweeps):
        delta = 0.0
        for j in range(p):
            if col_sq[j] == 0.0:
                continue
            old = w[j]
            rho = X[:, j] @ r / n + col_sq[j] * old
            new = soft_threshold(rho, lam) / col_sq[j]
            if new != old:
                r -= X[:, j] * (new - old)
                w[j] = new
                delta = max(delta, abs(new - old))
        if history is not None:
            history.append(lasso_objective(X, y, w, lam))
        if delta < tol:
            break
    return w


@dataclass
class LassoFit:
    mse: float
    r2: float
    coef: np.ndarray  # [n_factors, n_latents], on standardized inputs
    rmse_per_factor: np.ndarray


def _split(n: int, test_frac: float, seed: int) -> tuple[np.ndarray, np.ndarray]:
    idx = np.random.default_rng(seed).permutation(n)
    n_test = max(1, int(round(n * test_frac)))
    return np.sort(idx[n_test:]), np.sort(idx[:n_test])


def lasso_regression(
    z_est,
    z_true,
    lam: float = DEFAULT_LAMBDA,
    *,
    train_idx: np.ndarray | None = None,
    test_idx: np.ndarray | None = None,
    seed: int = 0,
) -> LassoFit:
    """Regress each true factor on standardized estimates; score on held-out rows.

    Without explicit indices a seeded 80/20 split is used. Constant input
    columns are left unscaled and so never receive weight.
    """
    if lam < 0:
        raise ValueError(f"LASSO penalty must be >= 0, got {lam}")
    X = _as_2d(z_est, "z_est")
    Y = _as_2d(z_true, "z_true")
    if len(X) != len(Y):
        raise ValueError(f"row count mismatch: {len(X)} vs {len(Y)}")
    if train_idx is None or test_idx is None:
        train_idx, test_idx = _split(len(X), 0.2, seed)
    Xtr, Xte, Ytr, Yte = X[train_idx], X[test_idx], Y[train_idx], Y[test_idx]
    mu, sd = Xtr.mean(axis=0), Xtr.std(axis=0)
    sd = np.where(sd > 0, sd, 1.0)
    Xtr = (Xtr - mu) / sd
    Xte = (Xte - mu) / sd
    ymu = Ytr.mean(axis=0)
    coef = np.stack([lasso_cd(Xtr - Xtr.mean(axis=0), Ytr[:, i] - ymu[i], lam) for i in range(Y.shape[1])])
    pred = (Xte - Xtr.mean(axis=0)) @ coef.T + ymu
    err = Yte - pred
    mse_f = (err**2).mean(axis=0)
    var_f = ((Yte - Yte.mean(axis=0)) ** 2).mean(axis=0)
    r2_f = np.where(var_f > 0, 1.0 - mse_f / np.where(var_f > 0, var_f, 1.0), 0.0)
    return LassoFit(float(mse_f.mean()), float(r2_f.mean()), coef, np.sqrt(mse_f))


# --------------------------------------------------------------------- DCI


def _entropy(p: np.ndarray, axis: int) -> np.ndarray:
    with np.errstate(divide="ignore", invalid="ignore"):
        t = np.where(p > 0, p * np.log(p), 0.0)
    return -t.sum(axis=axis)


def disentanglement(R: np.ndarray) -> float:
    """Weighted mean over latents (columns) of 1 - H(column)/log(n_factors)."""
    R = np.asarray(R, dtype=np.float64)
    if np.any(R < 0):
        raise ValueError("importance matrix must be nonnegative")
    n_factors = R.shape[0]
    col = R.sum(axis=0)
    if col.sum() == 0 or n_factors < 2:
        return 0.0 if col.sum() == 0 else 1.0
    p = R / np.where(col > 0, col, 1.0)
    score = 1.0 - _entropy(p, axis=0) / math.log(n_factors)
    weight = col / col.sum()
    return float(np.clip((weight * score).sum(), 0.0, 1.0))


def completeness(R: np.ndarray) -> float:
    """Mean over factors (rows) of 1 - H(row)/log(n_latents); empty rows score 0."""
    R = np.asarray(R, dtype=np.float64)
    if np.any(R < 0):
        raise ValueError("importance matrix must be nonnegative")
    n_latent = R.shape[1]
    row = R.sum(axis=1)
    if n_latent < 2:
        return float(np.mean(row > 0))
    p = R / np.where(row > 0, row, 1.0)[:, None]
    score = np.where(row > 0, 1.0 - _entropy(p, axis=1) / math.log(n_latent), 0.0)
    return float(np.clip(score.mean(), 0.0, 1.0))


def dci(z_true, z_est, lam: float = DEFAULT_LAMBDA, *, seed: int = 0, fit: LassoFit | None = None) -> tuple[float, float, float]:
    z_true = _as_2d(z_true, "z_true")
    if len(z_true) < 50:
        raise ValueError(f"DCI needs at least 50 samples, got {len(z_true)}")
    if fit is None:
        fit = lasso_regression(z_est, z_true, lam, seed=seed)
    R = np.abs(fit.coef)
    return disentanglement(R), completeness(R), float(fit.rmse_per_factor.mean())


# ----------------------------------------------------------------- reports


@dataclass
class MetricReport:
    mcc: float
    disentanglement: float
    completeness: float
    informativeness: float
    r2: float
    mse: float
    seed: int = 0
    config_digest: str = ""
    lasso_lambda: float = DEFAULT_LAMBDA
    corr_kind: str = "pearson"

    def to_dict(self) -> dict:
        return asdict(self)


def evaluate(z_true, z_est, *, lam: float = DEFAULT_LAMBDA, corr_kind: str = "pearson", seed: int = 0, config_digest: str = "") -> MetricReport:
    fit = lasso_regression(z_est, z_true, lam, seed=seed)
    d, c, i = dci(z_true, z_est, lam, seed=seed, fit=fit)
    return MetricReport(
        mcc=mcc(z_true, z_est, corr_kind),
        disentanglement=d,
        completeness=c,
        informativeness=i,
        r2=fit.r2,
        mse=fit.mse,
        seed=seed,
        config_digest=config_digest,
        lasso_lambda=lam,
        corr_kind=corr_kind,
    )


def _fmt(v) -> str:
    # repr round-trips floats exactly, which keeps reruns byte-identical.
    return repr(float(v)) if isinstance(v, (float, np.floating)) else str(v)


def append_metrics_csv(path: str | Path, row: dict) -> None:
    path = Path(path)
    missing = [k for k in METRICS_HEADER if k not in row]
    if missing:
        raise KeyError(f"metrics row lacks columns {missing}")
    new = not path.exists() or path.stat().st_size == 0
    with path.open("a", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        if new:
            w.writerow(METRICS_HEADER)
        w.writerow([_fmt(row[k]) for k in METRICS_HEADER])


def read_metrics_csv(path: str | Path) -> list[dict]:
    with Path(path).open(newline="") as fh:
        return list(csv.DictReader(fh))
