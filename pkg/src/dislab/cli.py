"""Command-line experiment runner.

Layout under the output directory::

    config.json                   resolved experiment config
    data/<preset>_d<N>/           one dataset per (preset, domain count)
    runs/<run_id>/                checkpoint, losses.csv, done.json
    metrics.csv, aggregate.csv    per-cell and per-(domains, variant) scores
    jacobian.csv, sanity.csv      decoder-structure scores and oracle cells
    theory_report.json
    figures/                      CSV tables and an optional SVG chart
    failures.json                 written whenever a cell fails
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import shutil
import sys
import traceback
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import metrics as M
from . import theory as T
from .cgvae import (
    CheckpointError,
    TrainConfig,
    build_model,
    checkpoint_load,
    checkpoint_save,
    read_manifest,
    train,
)
from .synthgen import PRESET_EDGES, DatasetIntegrityError, invert, load_dataset, preset, sample_dataset, save_dataset

logger = logging.getLogger("dislab")

VARIANTS = {
    "cgvae": ("CG-VAE", {}),
    "cgvae-s": ("CG-VAE-S", {"alpha": 0.0, "alpha_zero_ablation": True}),
    "cgvae-l2": ("CG-VAE-L2", {"penalty_kind": "L2"}),
    "cgvae-fd": ("CG-VAE-FD", {"penalty_kind": "finite_diff"}),
}
METRIC_NAMES = ("mcc", "disentanglement", "completeness", "informativeness", "r2", "mse")
SEP = "__"


class ConfigError(ValueError):
    pass


# -------------------------------------------------------------------- config


@dataclass
class ExperimentConfig:
    preset: str = "A"
    n_domains: list[int] = field(default_factory=lambda: [2, 4, 6, 8])
    seeds: list[int] = field(default_factory=lambda: [0, 1, 2])
    variants: list[str] = field(default_factory=lambda: ["cgvae", "cgvae-s"])
    # Extra (variant, domain counts) cells, e.g. the L1-vs-L2 comparison at 2 domains.
    extra_cells: list[dict] = field(default_factory=list)
    n_per_domain: int = 1000
    # When set, every dataset has this many rows split evenly over domains.
    total_samples: int | None = None
    data_seed: int = 0
    lasso_lambda: float = M.DEFAULT_LAMBDA
    train: dict = field(default_factory=dict)
    out: str = "runs/experiment"
    svg: bool = True

    def __post_init__(self):
        if self.preset not in PRESET_EDGES:
            raise ConfigError(f"unknown preset {self.preset!r}; choose from {sorted(PRESET_EDGES)}")
        if not self.seeds:
            raise ConfigError("seeds must be nonempty")
        if not self.n_domains or min(self.n_domains) < 1:
            raise ConfigError(f"n_domains must be nonempty positive counts, got {self.n_domains}")
        for v in self.all_variants():
            if v not in VARIANTS:
                raise ConfigError(f"unknown variant {v!r}; choose from {sorted(VARIANTS)}")
        TrainConfig.from_dict(self.train)  # validates override names and values

    def all_variants(self) -> list[str]:
        return list(dict.fromkeys(self.variants + [c["variant"] for c in self.extra_cells]))

    def rows_per_domain(self, n_domains: int) -> int:
        return self.total_samples // n_domains if self.total_samples else self.n_per_domain

    def cells(self) -> list[tuple[int, str, int]]:
        out = [(d, v, s) for d in self.n_domains for v in self.variants for s in self.seeds]
        for extra in self.extra_cells:
            for d in extra.get("n_domains", self.n_domains):
                out += [(d, extra["variant"], s) for s in self.seeds]
        return sorted(dict.fromkeys(out), key=lambda c: (c[0], self.all_variants().index(c[1]), c[2]))

    def train_config(self, variant: str, seed: int) -> TrainConfig:
        return TrainConfig.from_dict({**self.train, **VARIANTS[variant][1], "seed": seed})

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> ExperimentConfig:
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown config fields: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def load(cls, path: str | Path) -> ExperimentConfig:
        try:
            return cls.from_dict(json.loads(Path(path).read_text()))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from exc


def dataset_name(preset_name: str, n_domains: int) -> str:
    return f"{preset_name}_d{n_domains}"


def run_id(preset_name: str, n_domains: int, variant: str, seed: int) -> str:
    return SEP.join([preset_name, f"d{n_domains}", variant, f"s{seed}"])


def parse_run_id(rid: str) -> dict:
    p, d, v, s = rid.split(SEP)
    return {"preset": p, "n_domains": int(d[1:]), "variant": v, "seed": int(s[1:])}


# ------------------------------------------------------------------ failures


@dataclass
class Failure:
    cell: str
    stage: str
    error: str


def write_failures(out: Path, failures: list[Failure]) -> None:
    path = out / "failures.json"
    if failures:
        path.write_text(json.dumps([asdict(f) for f in failures], indent=1) + "\n")
    elif path.exists():
        path.unlink()


# ------------------------------------------------------------------ gen-data


def _nonempty(d: Path) -> bool:
    return d.exists() and any(d.iterdir())


def cmd_gen_data(cfg: ExperimentConfig, force: bool = False) -> list[Path]:
    root = Path(cfg.out) / "data"
    if _nonempty(root):
        if not force:
            raise FileExistsError(f"{root} is not empty; pass --force to regenerate")
        shutil.rmtree(root)
    dirs = []
    for n in cfg.n_domains:
        spec, prior = preset(cfg.preset, n, cfg.data_seed)
        bundle = sample_dataset(spec, prior, cfg.rows_per_domain(n), cfg.data_seed)
        bundle.meta.update({"preset": cfg.preset, "stand_in": True})
        d = save_dataset(bundle, root / dataset_name(cfg.preset, n))
        logger.info("dataset %s digest %s", d.name, bundle.digest())
        dirs.append(d)
    return dirs


# --------------------------------------------------------------------- train


def _cell_done(run_dir: Path) -> bool:
    """A cell is complete when done.json agrees with the checkpoint on disk."""
    try:
        done = json.loads((run_dir / "done.json").read_text())
        return read_manifest(run_dir)["params_sha256"] == done["params_sha256"]
    except (OSError, ValueError, KeyError, CheckpointError):
        return False


def _write_losses(path: Path, history) -> None:
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "L_r", "L_KL", "L_s", "L_m", "total"])
        for i, b in enumerate(history):
            w.writerow([i, *(repr(float(v)) for v in (b.L_r, b.L_KL, b.L_s, b.L_m, b.total))])


def train_cell(out: str, preset_name: str, n_domains: int, variant: str, seed: int, train_cfg: dict) -> str:
    data_dir = Path(out) / "data" / dataset_name(preset_name, n_domains)
    run_dir = Path(out) / "runs" / run_id(preset_name, n_domains, variant, seed)
    bundle = load_dataset(data_dir)
    tcfg = TrainConfig.from_dict(train_cfg)
    model = build_model(bundle.x.shape[1], bundle.z.shape[1], bundle.n_domains, tcfg)
    result = train(model, bundle, tcfg)
    if run_dir.exists():
        shutil.rmtree(run_dir)
    checkpoint_save(model, run_dir, tcfg, bundle.digest())
    _write_losses(run_dir / "losses.csv", result.history)
    sha = read_manifest(run_dir)["params_sha256"]
    (run_dir / "done.json").write_text(json.dumps({"params_sha256": sha, "steps": result.steps}, sort_keys=True) + "\n")
    return run_dir.name


def _run_cell(args) -> tuple[str, str | None]:
    rid = run_id(args[1], args[2], args[3], args[4])
    try:
        train_cell(*args)
        return rid, None
    except Exception as exc:  # one bad cell must not void the sweep
        return rid, f"{type(exc).__name__}: {exc}\n{traceback.format_exc(limit=3)}"


def cmd_train(cfg: ExperimentConfig, force: bool = False, jobs: int = 1) -> list[Failure]:
    out = Path(cfg.out)
    todo = []
    for n, variant, seed in cfg.cells():
        run_dir = out / "runs" / run_id(cfg.preset, n, variant, seed)
        if not force and _cell_done(run_dir):
            logger.info("skip %s (complete)", run_dir.name)
            continue
        todo.append((str(out), cfg.preset, n, variant, seed, cfg.train_config(variant, seed).to_dict()))
    failures = []
    if jobs > 1 and len(todo) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_run_cell, todo))
    else:
        results = [_run_cell(t) for t in todo]
    for rid, err in results:
        if err is None:
            logger.info("trained %s", rid)
        else:
            logger.error("cell %s failed: %s", rid, err.splitlines()[0])
            failures.append(Failure(rid, "train", err))
    return failures


# ---------------------------------------------------------------------- eval


def evaluate_cell(out: Path, preset_name: str, n_domains: int, variant: str, seed: int, lam: float = M.DEFAULT_LAMBDA):
    bundle = load_dataset(out / "data" / dataset_name(preset_name, n_domains))
    rid = run_id(preset_name, n_domains, variant, seed)
    model, manifest = checkpoint_load(out / "runs" / rid)
    tcfg = TrainConfig.from_dict(manifest["config"])
    x_te, z_te, _ = bundle.test()
    z_hat = model.posterior_mean(x_te)
    rep = M.evaluate(z_te, z_hat, lam=lam, seed=seed, config_digest=manifest["params_sha256"][:16])
    row = {
        "run_id": rid,
        "seed": seed,
        "n_domains": n_domains,
        "alpha": tcfg.effective_alpha,
        "beta": tcfg.beta,
        "penalty_kind": tcfg.penalty_kind,
        **{k: getattr(rep, k) for k in METRIC_NAMES},
    }
    J = T.estimate_h_jacobian(bundle.spec, model, z_hat)
    blocks = T.check_subspace_blocks(J, bundle.spec, model, points=z_hat)
    jac = {
        "run_id": rid,
        "off_support_mass": T.off_support_mass(model, z_hat, bundle.spec, z_te),
        "block_pairs": len(blocks),
        "block_failures": sum(not b.passed for b in blocks),
    }
    return row, jac, [asdict(b) for b in blocks]


def sanity_row(bundle, name: str) -> dict:
    """Metrics for an encoder replaced by the exact inverse mixer."""
    x_te, z_te, _ = bundle.test()
    rep = M.evaluate(z_te, invert(bundle.spec, x_te))
    return {"dataset": name, **{k: getattr(rep, k) for k in METRIC_NAMES}}


def _write_rows(path: Path, header, rows) -> None:
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([M._fmt(r[k]) for k in header])


def sample_std(values) -> float:
    """Standard deviation with the n - 1 denominator (0 for a single value)."""
    v = np.asarray(values, dtype=np.float64)
    return float(v.std(ddof=1)) if len(v) > 1 else 0.0


def aggregate(rows: list[dict]) -> list[dict]:
    groups: dict[tuple[int, str], list[dict]] = {}
    for r in rows:
        info = parse_run_id(r["run_id"])
        groups.setdefault((info["n_domains"], info["variant"]), []).append(r)
    out = []
    for (n, variant), rs in sorted(groups.items(), key=lambda kv: (kv[0][0], list(VARIANTS).index(kv[0][1]))):
        agg = {"n_domains": n, "variant": variant, "n": len(rs)}
        for m in METRIC_NAMES:
            vals = [float(r[m]) for r in rs]
            agg[f"{m}_mean"] = float(np.mean(vals))
            agg[f"{m}_std"] = sample_std(vals)
        out.append(agg)
    return out


AGG_HEADER = ["n_domains", "variant", "n"] + [f"{m}_{s}" for m in METRIC_NAMES for s in ("mean", "std")]
JAC_HEADER = ["run_id", "off_support_mass", "block_pairs", "block_failures"]


def cmd_eval(cfg: ExperimentConfig) -> list[Failure]:
    out = Path(cfg.out)
    rows, jac, blocks, failures = [], [], {}, []
    for n, variant, seed in cfg.cells():
        rid = run_id(cfg.preset, n, variant, seed)
        if not _cell_done(out / "runs" / rid):
            failures.append(Failure(rid, "eval", "missing or incomplete checkpoint"))
            continue
        try:
            row, j, b = evaluate_cell(out, cfg.preset, n, variant, seed, cfg.lasso_lambda)
        except Exception as exc:
            failures.append(Failure(rid, "eval", f"{type(exc).__name__}: {exc}"))
            continue
        rows.append(row)
        jac.append(j)
        blocks[rid] = b
    _write_rows(out / "metrics.csv", M.METRICS_HEADER, rows)
    _write_rows(out / "aggregate.csv", AGG_HEADER, aggregate(rows))
    _write_rows(out / "jacobian.csv", JAC_HEADER, jac)
    (out / "blocks.json").write_text(json.dumps(blocks, indent=1, sort_keys=True) + "\n")
    sanity = []
    for n in cfg.n_domains:
        name = dataset_name(cfg.preset, n)
        try:
            sanity.append(sanity_row(load_dataset(out / "data" / name), name))
        except Exception as exc:
            failures.append(Failure(name, "eval", f"{type(exc).__name__}: {exc}"))
    _write_rows(out / "sanity.csv", ["dataset", *METRIC_NAMES], sanity)
    return failures


# -------------------------------------------------------------- check-theory


def cmd_check_theory(cfg: ExperimentConfig) -> dict:
    out = Path(cfg.out)
    report = {"preset": cfg.preset, "datasets": {}}
    blocks_path = out / "blocks.json"
    blocks = json.loads(blocks_path.read_text()) if blocks_path.exists() else {}
    for n in cfg.n_domains:
        name = dataset_name(cfg.preset, n)
        bundle = load_dataset(out / "data" / name)
        trained = {rid: b for rid, b in blocks.items() if parse_run_id(rid)["n_domains"] == n}
        rep = T.theory_report(bundle.spec, bundle.prior, seed=cfg.data_seed, blocks=trained)
        report["datasets"][name] = rep
    T.write_theory_report(report, out / "theory_report.json")
    return report


# -------------------------------------------------------------------- report


def _label(variant: str) -> str:
    return VARIANTS[variant][0]


def mcc_rows(agg: list[dict]) -> list[dict]:
    return [{"n_domains": a["n_domains"], "variant": _label(a["variant"]), "n": a["n"], "mcc_mean": a["mcc_mean"], "mcc_std": a["mcc_std"]} for a in agg]


def _cell_text(a: dict, m: str) -> str:
    return f"{a[f'{m}_mean']:.4f} ({a[f'{m}_std']:.4f})"


def metric_table(agg: list[dict], n_domains: int) -> tuple[list[str], list[dict]]:
    present = [a for a in agg if a["n_domains"] == n_domains]
    header = ["metric"] + [_label(a["variant"]) for a in present]
    rows = [{"metric": m, **{_label(a["variant"]): _cell_text(a, m) for a in present}} for m in METRIC_NAMES]
    return header, rows


def l1_l2_rows(agg: list[dict], jac: list[dict]) -> list[dict]:
    mass: dict[tuple[int, str], list[float]] = {}
    for j in jac:
        info = parse_run_id(j["run_id"])
        mass.setdefault((info["n_domains"], info["variant"]), []).append(float(j["off_support_mass"]))
    by = {(a["n_domains"], a["variant"]): a for a in agg}
    rows = []
    for n in sorted({k[0] for k in by}):
        if (n, "cgvae") in by and (n, "cgvae-l2") in by:
            for v, name in (("cgvae", "L1"), ("cgvae-l2", "L2")):
                a = by[(n, v)]
                m = mass.get((n, v), [float("nan")])
                rows.append({"n_domains": n, "penalty": name, "mcc_mean": a["mcc_mean"], "mcc_std": a["mcc_std"], "off_support_mass_mean": float(np.mean(m))})
    return rows


def svg_chart(rows: list[dict], width: int = 480, height: int = 320) -> str:
    """Bare line chart of mean MCC against domain count, one polyline per variant."""
    pad = 40
    xs = sorted({r["n_domains"] for r in rows})
    lo, hi = min(xs), max(xs)
    sx = (lambda v: pad + (v - lo) / (hi - lo) * (width - 2 * pad)) if hi > lo else (lambda v: width / 2)
    sy = lambda v: height - pad - v * (height - 2 * pad)
    colours = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd"]
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}">',
        f'<line x1="{pad}" y1="{height - pad}" x2="{width - pad}" y2="{height - pad}" stroke="black"/>',
        f'<line x1="{pad}" y1="{pad}" x2="{pad}" y2="{height - pad}" stroke="black"/>',
        f'<text x="{width / 2}" y="{height - 8}" text-anchor="middle" font-size="12">domains</text>',
        f'<text x="12" y="{height / 2}" font-size="12" transform="rotate(-90 12 {height / 2})">MCC</text>',
    ]
    for x in xs:
        parts.append(f'<text x="{sx(x):.1f}" y="{height - pad + 14}" text-anchor="middle" font-size="10">{x}</text>')
    for t in (0.0, 0.5, 1.0):
        parts.append(f'<text x="{pad - 4}" y="{sy(t) + 3:.1f}" text-anchor="end" font-size="10">{t:.1f}</text>')
    for i, variant in enumerate(dict.fromkeys(r["variant"] for r in rows)):
        pts = sorted((r["n_domains"], r["mcc_mean"]) for r in rows if r["variant"] == variant)
        colour = colours[i % len(colours)]
        path = " ".join(f"{sx(x):.1f},{sy(y):.1f}" for x, y in pts)
        parts.append(f'<polyline fill="none" stroke="{colour}" stroke-width="2" points="{path}"/>')
        parts.append(f'<text x="{width - pad}" y="{pad + 14 * i}" text-anchor="end" font-size="11" fill="{colour}">{variant}</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def cmd_report(cfg: ExperimentConfig) -> list[Path]:
    out = Path(cfg.out)
    rows = M.read_metrics_csv(out / "metrics.csv")
    agg = aggregate(rows)
    jac_path = out / "jacobian.csv"
    jac = list(csv.DictReader(jac_path.read_text().splitlines())) if jac_path.exists() else []
    fig = out / "figures"
    fig.mkdir(exist_ok=True)
    written = []
    curve = mcc_rows(agg)
    _write_rows(fig / "mcc_vs_domains.csv", ["n_domains", "variant", "n", "mcc_mean", "mcc_std"], curve)
    written.append(fig / "mcc_vs_domains.csv")
    for n in sorted({a["n_domains"] for a in agg}):
        header, trows = metric_table(agg, n)
        p = fig / f"table_d{n}.csv"
        _write_rows(p, header, trows)
        written.append(p)
    l12 = l1_l2_rows(agg, jac)
    if l12:
        p = fig / "l1_vs_l2.csv"
        _write_rows(p, ["n_domains", "penalty", "mcc_mean", "mcc_std", "off_support_mass_mean"], l12)
        written.append(p)
    if cfg.svg and curve:
        p = fig / "mcc_vs_domains.svg"
        p.write_text(svg_chart(curve))
        written.append(p)
    return written


# ----------------------------------------------------------------------- main


def resolve_config(args) -> ExperimentConfig:
    d = json.loads(Path(args.config).read_text()) if args.config else {}
    if args.out:
        d["out"] = args.out
    if args.seeds:
        d["seeds"] = [int(s) for s in args.seeds.split(",")]
    if args.variant:
        d["variants"] = [args.variant]
        d["extra_cells"] = []
    env_seed = os.environ.get("DISLAB_SEED")
    if env_seed is not None:
        d["seeds"] = [int(env_seed)]
    return ExperimentConfig.from_dict(d)


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dislab", description="Sparse-mixing identifiability experiments.")
    sub = p.add_subparsers(dest="command", required=True)
    for name in ("gen-data", "train", "eval", "check-theory", "report", "all"):
        s = sub.add_parser(name)
        s.add_argument("--config", help="experiment config JSON")
        s.add_argument("--out", help="output directory (overrides config)")
        s.add_argument("--force", action="store_true", help="overwrite existing data / retrain finished cells")
        s.add_argument("--variant", choices=sorted(VARIANTS), help="restrict to one variant")
        s.add_argument("--seeds", help="comma-separated seeds (overrides config)")
        s.add_argument("--jobs", type=int, default=1, help="parallel training cells")
        s.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        cfg = resolve_config(args)
    except (ConfigError, ValueError, OSError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(json.dumps(cfg.to_dict(), indent=1, sort_keys=True) + "\n")
    failures: list[Failure] = []
    try:
        # "all" reuses existing datasets unless --force is given.
        if args.command == "gen-data" or (args.command == "all" and (args.force or not _nonempty(out / "data"))):
            for d in cmd_gen_data(cfg, force=args.force):
                print(d)
        if args.command in ("train", "all"):
            failures += cmd_train(cfg, force=args.force, jobs=args.jobs)
        if args.command in ("eval", "all"):
            failures += cmd_eval(cfg)
            print(out / "metrics.csv")
        if args.command in ("check-theory", "all"):
            cmd_check_theory(cfg)
            print(out / "theory_report.json")
        if args.command in ("report", "all"):
            for p in cmd_report(cfg):
                print(p)
    except (FileExistsError, FileNotFoundError, DatasetIntegrityError, CheckpointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    write_failures(out, failures)
    if failures:
        print(f"{len(failures)} cell(s) failed; see {out / 'failures.json'}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
