"""Experiment plumbing: cached backbones and datasets, single runs, sweeps, reports."""

from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import os
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import checkpoint
from .backbone import BackboneBundle, pretrain_backbone
from .config import BACKBONE_KEYS, DATA_KEYS, KINDS, VARIANTS, ConfigError, ExperimentConfig
from .metrics import METRIC_NAMES
from .missing_data import (
    Dataset,
    apply_pattern,
    generate_pattern,
    load_dataset,
    save_dataset,
    synth_dataset,
    synth_pretrain_corpus,
)
from .prompts import SyPModel
from .training import FeatureCache, TrainPlan, evaluate, train_prompts

log = logging.getLogger(__name__)

CACHE_ENV = "SYP_CACHE_DIR"
METRICS_COLUMNS = ("epoch", "train_loss", "val_metric", "lr")
SWEEP_COLUMNS = ("axis", "cell", "variant", "kind", "eta_train", "eta_test", "reduction_ratio",
                 "use_adapter", "metric", "mean", "std", "n_seeds", "values")
AXES = ("variant", "eta", "r", "adapter", "robustness")


def cache_dir() -> Path:
    return Path(os.environ.get(CACHE_ENV) or Path.home() / ".cache" / "synprompt")


# ---------------------------------------------------------------------------
# atomic file output


def write_text(path, text: str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + f".tmp{os.getpid()}")
    tmp.write_text(text)
    tmp.replace(path)


def write_csv(path, columns, rows) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for row in rows:
        w.writerow([_fmt(row[c]) for c in columns])
    write_text(path, buf.getvalue())


def _fmt(v):
    if isinstance(v, float):
        return repr(v)
    return v


def file_sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


# ---------------------------------------------------------------------------
# shared artefacts


@dataclass
class Artifacts:
    backbone: BackboneBundle
    backbone_checksum: str
    backbone_path: Path
    train: Dataset
    val: Dataset
    test: Dataset
    data_checksums: dict
    notes: list


_memo: dict = {}


def prepare(cfg: ExperimentConfig, root: Path | None = None) -> Artifacts:
    """Load (or build and cache) the frozen backbone and the complete-modality splits."""
    root = Path(root) if root is not None else cache_dir()
    bkey = cfg.fingerprint(BACKBONE_KEYS)
    dkey = cfg.fingerprint(DATA_KEYS)
    memo_key = (str(root), bkey, dkey)
    if memo_key in _memo:
        return _memo[memo_key]
    notes = []
    root.mkdir(parents=True, exist_ok=True)

    bpath = root / f"backbone-{bkey}.ckpt"
    if bpath.exists():
        backbone = BackboneBundle.load(bpath, cfg)
    else:
        notes.append(f"backbone cache miss: pretrained {bpath.name}")
        t0 = time.perf_counter()
        backbone = pretrain_backbone(cfg, synth_pretrain_corpus(cfg, cfg.data_seed))
        log.info("pretrained backbone in %.1fs", time.perf_counter() - t0)
        backbone.save(bpath)

    ddir = root / f"data-{dkey}"
    splits = {}
    sums = {}
    fresh = None
    for name in ("train", "val", "test"):
        p = ddir / f"{name}.jsonl"
        if not p.exists():
            if fresh is None:
                notes.append(f"dataset cache miss: synthesised {ddir.name}")
                ddir.mkdir(parents=True, exist_ok=True)
                fresh = dict(zip(("train", "val", "test"), synth_dataset(cfg, cfg.data_seed)))
            save_dataset(fresh[name], p)
        splits[name] = load_dataset(p)
        sums[name] = file_sha256(p)
    art = Artifacts(backbone, backbone.checksum(), bpath, splits["train"], splits["val"],
                    splits["test"], sums, notes)
    _memo[memo_key] = art
    return art


def pattern_seed(seed: int, split: str) -> int:
    return seed * 100 + {"train": 1, "val": 2, "test": 3}[split]


def masked_splits(cfg: ExperimentConfig, art: Artifacts, seed: int):
    train = apply_pattern(art.train, generate_pattern(len(art.train), cfg.eta_train, cfg.kind_train,
                                                      pattern_seed(seed, "train")))
    val = apply_pattern(art.val, generate_pattern(len(art.val), cfg.eta_train, cfg.kind_train,
                                                  pattern_seed(seed, "val")))
    test = apply_pattern(art.test, generate_pattern(len(art.test), cfg.eta_test, cfg.kind_test,
                                                    pattern_seed(seed, "test")))
    return train, val, test


# ---------------------------------------------------------------------------
# one training run


@dataclass
class CellResult:
    seed: int
    test_metric: float
    log: list
    best_epoch: int
    model: SyPModel


def run_cell(cfg: ExperimentConfig, seed: int, art: Artifacts | None = None) -> CellResult:
    cfg.validate()
    art = art or prepare(cfg)
    train, val, test = masked_splits(cfg, art, seed)
    model = SyPModel(cfg, art.backbone, seed)
    plan = TrainPlan.for_model(model, len(train), cfg, seed)
    res = train_prompts(plan, model, train, val)
    metric = evaluate(model, test, cfg.task, cfg.threshold, cfg.eval_batch, FeatureCache(model, test))
    return CellResult(seed, metric, res.log, res.best_epoch, model)


def run(cfg: ExperimentConfig, out_dir) -> dict:
    """Full pipeline for ``cfg.seed``; returns the manifest."""
    cfg.validate()
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    t0 = time.perf_counter()
    art = prepare(cfg)
    before = art.backbone.checksum()
    cell = run_cell(cfg, cfg.seed, art)
    if art.backbone.checksum() != before:
        raise RuntimeError("backbone weights changed during prompt tuning")
    write_text(out / "config.yaml", cfg.to_yaml())
    write_csv(out / "metrics.csv", METRICS_COLUMNS, cell.log)
    prompt_sum = checkpoint.save(
        out / "prompts.ckpt",
        {"prompts": cell.model.prompts.arrays(), "head": {k: v.data for k, v in cell.model.head.params.items()}},
        meta={"seed": cfg.seed, "variant": cfg.variant, "best_epoch": cell.best_epoch},
    )
    manifest = {
        "seed": cfg.seed,
        "backbone_seed": cfg.backbone_seed,
        "data_seed": cfg.data_seed,
        "pattern_seeds": {s: pattern_seed(cfg.seed, s) for s in ("train", "val", "test")},
        "backbone_checkpoint": str(art.backbone_path),
        "backbone_checksum": art.backbone_checksum,
        "prompt_checksum": prompt_sum,
        "data_checksums": art.data_checksums,
        "metrics_csv_sha256": file_sha256(out / "metrics.csv"),
        "metric": METRIC_NAMES[cfg.task],
        "test_metric": cell.test_metric,
        "best_epoch": cell.best_epoch,
        "notes": art.notes,
        "elapsed_s": round(time.perf_counter() - t0, 3),
    }
    write_text(out / "manifest.json", json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest


def eval_run(run_dir, cfg: ExperimentConfig | None = None) -> dict:
    """Re-evaluate a finished run, optionally under a different test pattern."""
    run_dir = Path(run_dir)
    base = ExperimentConfig.load(run_dir / "config.yaml")
    if cfg is not None:
        overrides = {k: getattr(cfg, k) for k in ("eta_test", "kind_test")}
        base = base.replace(**overrides)
    base.validate()
    art = prepare(base)
    sections, header = checkpoint.load(run_dir / "prompts.ckpt")
    model = SyPModel(base, art.backbone, base.seed)
    model.prompts.load_arrays(sections["prompts"])
    for k, v in model.head.params.items():
        v.data = sections["head"][k]
    _, _, test = masked_splits(base, art, base.seed)
    metric = evaluate(model, test, base.task, base.threshold, base.eval_batch)
    return {"metric": METRIC_NAMES[base.task], "value": metric, "eta_test": base.eta_test,
            "kind_test": base.kind_test}


# ---------------------------------------------------------------------------
# sweeps


def sweep_cells(cfg: ExperimentConfig, axis: str, values) -> list[tuple[str, ExperimentConfig]]:
    """Expand an axis into named cell configs."""
    cells = []
    if axis == "variant":
        values = values or ["no-prompt", "static-only", "dynamic-only", "synergistic"]
        for v in values:
            if v not in VARIANTS:
                raise ConfigError([f"values: unknown variant {v!r}"])
            cells.append((v, cfg.replace(variant=v)))
    elif axis == "r":
        values = values or [5, 10, 16]
        for v in values:
            cells.append((f"r={float(v):g}", cfg.replace(reduction_ratio=float(v))))
    elif axis == "adapter":
        for v in values or ["true", "false"]:
            flag = str(v).lower() in ("1", "true", "yes", "on")
            cells.append((f"adapter={'on' if flag else 'off'}", cfg.replace(use_adapter=flag)))
    elif axis == "eta":
        etas = [float(v) for v in (values or [0.5, 0.7, 0.9])]
        for kind in KINDS:
            for et in etas:
                for ev in etas:
                    cells.append((f"{kind}:{et:g}->{ev:g}",
                                  cfg.replace(kind_train=kind, kind_test=kind, eta_train=et, eta_test=ev)))
    elif axis == "robustness":
        etas = [float(v) for v in (values or [0.5, 0.7, 0.9])]
        for kind in KINDS:
            for e in etas:
                for variant in ("no-prompt", cfg.variant if cfg.variant != "no-prompt" else "synergistic"):
                    cells.append((f"{kind}:{e:g}:{variant}",
                                  cfg.replace(kind_train=kind, kind_test=kind, eta_train=e, eta_test=e,
                                              variant=variant)))
    else:
        raise ConfigError([f"axis: must be one of {AXES}"])
    for _, c in cells:
        c.validate()
    return cells


def sweep(cfg: ExperimentConfig, axis: str, values, out_dir, seeds=None) -> list[dict]:
    """Run every cell over every seed; write results.csv, per-cell JSON and plots."""
    cfg.validate()
    out = Path(out_dir)
    cells = sweep_cells(cfg, axis, values)
    seeds = list(seeds or cfg.eval_seeds)
    rows = []
    for name, ccfg in cells:
        art = prepare(ccfg)
        values_ = []
        for seed in seeds:
            key = ccfg.replace(seed=seed, out_dir="").fingerprint()
            cell_file = out / "cells" / f"{key}.json"
            if cell_file.exists():
                values_.append(json.loads(cell_file.read_text())["test_metric"])
                continue
            t0 = time.perf_counter()
            res = run_cell(ccfg, seed, art)
            values_.append(res.test_metric)
            rec = {"cell": name, "seed": seed, "test_metric": res.test_metric, "best_epoch": res.best_epoch,
                   "backbone_checksum": art.backbone_checksum, "data_checksums": art.data_checksums,
                   "config": ccfg.replace(seed=seed).to_dict(), "log": res.log,
                   "elapsed_s": round(time.perf_counter() - t0, 3)}
            write_text(cell_file, json.dumps(rec, indent=1, sort_keys=True) + "\n")
            log.info("%s seed %d: %.4f", name, seed, res.test_metric)
        arr = np.asarray(values_, dtype=np.float64)
        rows.append({
            "axis": axis, "cell": name, "variant": ccfg.variant, "kind": ccfg.kind_train,
            "eta_train": ccfg.eta_train, "eta_test": ccfg.eta_test,
            "reduction_ratio": ccfg.reduction_ratio, "use_adapter": ccfg.use_adapter,
            "metric": METRIC_NAMES[ccfg.task], "mean": float(arr.mean()),
            "std": float(arr.std(ddof=1)) if len(arr) > 1 else 0.0, "n_seeds": len(arr),
            "values": " ".join(repr(float(v)) for v in arr),
        })
    write_csv(out / "results.csv", SWEEP_COLUMNS, rows)
    write_text(out / "sweep.json", json.dumps({"axis": axis, "values": values, "seeds": seeds,
                                               "config": cfg.to_dict()}, indent=2) + "\n")
    render_plots(rows, out)
    return rows


# ---------------------------------------------------------------------------
# reports


def read_results(path) -> list[dict]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    for r in rows:
        for k in ("eta_train", "eta_test", "reduction_ratio", "mean", "std"):
            r[k] = float(r[k])
        r["n_seeds"] = int(r["n_seeds"])
    return rows


def markdown_table(rows) -> str:
    lines = ["| cell | metric | mean | std | seeds |", "|---|---|---|---|---|"]
    for r in rows:
        lines.append(f"| {r['cell']} | {r['metric']} | {r['mean']:.4f} | {r['std']:.4f} | {r['n_seeds']} |")
    return "\n".join(lines) + "\n"


def render_plots(rows, out_dir) -> list[Path]:
    """Line plots (metric vs eta) and train-eta by test-eta heat maps, as PNG files."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    out_dir = Path(out_dir)
    made = []
    if not rows:
        return made
    axis = rows[0]["axis"]

    def save(fig, name):
        p = out_dir / name
        tmp = out_dir / f".{name}.tmp.png"
        fig.savefig(tmp, dpi=100)
        plt.close(fig)
        tmp.replace(p)
        made.append(p)

    if axis in ("eta", "robustness"):
        for kind in KINDS:
            sub = [r for r in rows if r["kind"] == kind]
            if not sub:
                continue
            fig, ax = plt.subplots(figsize=(5, 3.5))
            if axis == "eta":
                for et in sorted({r["eta_train"] for r in sub}):
                    pts = sorted((r["eta_test"], r["mean"], r["std"]) for r in sub if r["eta_train"] == et)
                    x, y, e = zip(*pts)
                    ax.errorbar(x, y, yerr=e, marker="o", capsize=3, label=f"train eta={et:g}")
                ax.set_xlabel("test missing rate")
            else:
                for variant in sorted({r["variant"] for r in sub}):
                    pts = sorted((r["eta_test"], r["mean"], r["std"]) for r in sub if r["variant"] == variant)
                    x, y, e = zip(*pts)
                    ax.errorbar(x, y, yerr=e, marker="o", capsize=3, label=variant)
                ax.set_xlabel("missing rate")
            ax.set_ylabel(sub[0]["metric"])
            ax.set_title(f"{kind} missing")
            ax.legend()
            fig.tight_layout()
            save(fig, f"lines_{kind}.png")
            if axis == "eta":
                trs = sorted({r["eta_train"] for r in sub})
                tes = sorted({r["eta_test"] for r in sub})
                grid = np.full((len(trs), len(tes)), np.nan)
                for r in sub:
                    grid[trs.index(r["eta_train"]), tes.index(r["eta_test"])] = r["mean"]
                fig, ax = plt.subplots(figsize=(4, 3.5))
                im = ax.imshow(grid, cmap="viridis")
                ax.set_xticks(range(len(tes)), [f"{v:g}" for v in tes])
                ax.set_yticks(range(len(trs)), [f"{v:g}" for v in trs])
                ax.set_xlabel("test eta")
                ax.set_ylabel("train eta")
                for i in range(len(trs)):
                    for j in range(len(tes)):
                        ax.text(j, i, f"{grid[i, j]:.3f}", ha="center", va="center", color="w", fontsize=8)
                fig.colorbar(im, ax=ax)
                ax.set_title(f"{kind} missing")
                fig.tight_layout()
                save(fig, f"heatmap_{kind}.png")
    else:
        fig, ax = plt.subplots(figsize=(5, 3.5))
        names = [r["cell"] for r in rows]
        ax.bar(range(len(rows)), [r["mean"] for r in rows], yerr=[r["std"] for r in rows], capsize=3)
        ax.set_xticks(range(len(rows)), names, rotation=20)
        ax.set_ylabel(rows[0]["metric"])
        lo = min(r["mean"] - r["std"] for r in rows)
        ax.set_ylim(max(0.0, lo - 0.05), None)
        fig.tight_layout()
        save(fig, f"bars_{axis}.png")
    return made


def report(sweep_dir) -> str:
    sweep_dir = Path(sweep_dir)
    rows = read_results(sweep_dir / "results.csv")
    text = markdown_table(rows)
    write_text(sweep_dir / "report.md", text)
    render_plots(rows, sweep_dir)
    return text


# ---------------------------------------------------------------------------
# linear probe on frozen features


def frozen_features(data: Dataset, backbone: BackboneBundle, batch: int = 256) -> np.ndarray:
    from .backbone import Batch, class_features

    out = []
    for start in range(0, len(data), batch):
        idx = np.arange(start, min(len(data), start + batch))
        fi, ft = class_features(Batch.from_dataset(data, idx), backbone)
        out.append(np.concatenate([fi.data, ft.data], axis=1))
    return np.concatenate(out)


def probe_accuracy(backbone: BackboneBundle, train: Dataset, test: Dataset,
                   use: str = "both", l2: float = 1e-3) -> float:
    """Top-1 test accuracy of a softmax-regression probe on frozen class features.

    ``use`` selects the image half, the text half, or both halves of the
    concatenated feature.
    """
    from scipy.optimize import minimize
    from scipy.special import log_softmax

    d = backbone.image.params["cls"].shape[-1]
    cols = {"image": slice(0, d), "text": slice(d, 2 * d), "both": slice(0, 2 * d)}[use]
    xtr = frozen_features(train, backbone)[:, cols]
    xte = frozen_features(test, backbone)[:, cols]
    mu, sd = xtr.mean(0), xtr.std(0) + 1e-8
    xtr, xte = (xtr - mu) / sd, (xte - mu) / sd
    ytr = train.labels.argmax(1)
    n, f = xtr.shape
    c = train.labels.shape[1]
    onehot = np.eye(c)[ytr]

    def objective(theta):
        w = theta[: f * c].reshape(f, c)
        b = theta[f * c:]
        logp = log_softmax(xtr @ w + b, axis=1)
        loss = -(onehot * logp).sum() / n + 0.5 * l2 * (w * w).sum()
        g = (np.exp(logp) - onehot) / n
        return loss, np.concatenate([(xtr.T @ g + l2 * w).ravel(), g.sum(0)])

    res = minimize(objective, np.zeros(f * c + c), jac=True, method="L-BFGS-B",
                   options={"maxiter": 500})
    w, b = res.x[: f * c].reshape(f, c), res.x[f * c:]
    return float(((xte @ w + b).argmax(1) == test.labels.argmax(1)).mean())
