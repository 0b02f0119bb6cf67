"""Experiment orchestration behind the ``advrec`` CLI.

A run directory holds::

    data/       canonical split archive and characteristics.json
    models/     bpr_mf.bin, bpr_mf.epoch<E>.bin, amf.bin, *.loss.csv
    deltas/     one perturbation file per (model, strategy) at the configured budget
    reports/    attack_iterations.csv, attack_epsilon.csv, kcore_study.csv, kcore_fits.csv
    series/     merged.csv and per-figure series written by ``report``
    manifest.json
"""
from __future__ import annotations

import csv
import dataclasses
import hashlib
import io
import json
import logging
import time
from pathlib import Path

import numpy as np

from advrec import __version__
from advrec.adversarial import (
    PerturbationConfig,
    apply_delta,
    apr_train,
    fgsm_delta,
    iterate_deltas,
    save_delta,
)
from advrec.config import ExperimentConfig
from advrec.dataset import (
    binarize,
    characteristics,
    k_core,
    leave_one_out_split,
    load_interactions,
    load_split,
    save_split,
    synthetic_log,
)
from advrec.errors import AdvrecError, DomainError, ReportError
from advrec.metrics import (
    CSV_FIELDS,
    evaluate,
    evaluate_random,
    fit_line,
    normalized_auc,
    rho,
)
from advrec.mf import TrainConfig, load_params, save_params, train_bpr

logger = logging.getLogger(__name__)

KCORE_FIELDS = ("dataset", "model", "strategy", "epsilon", "alpha", "iterations", "seed",
                "k_core", "num_users", "num_items", "num_interactions", "density", "size",
                "shape", "ndcg_init", "ndcg_after", "rho")
FIT_FIELDS = ("model", "strategy", "characteristic", "slope", "intercept", "endpoint_slope",
              "points")
KEY_FIELDS = ("dataset", "model", "strategy", "epsilon", "alpha", "iterations", "seed", "k")
METRIC_FIELDS = ("pr", "re", "ndcg", "efd", "se", "icov")
_STRATEGY_ORDER = {"none": 0, "FGSM": 1, "BIM": 2, "PGD": 3}


class UsageProblem(AdvrecError):
    """A command was invoked in a state it cannot run from (exit code 2)."""


# --- small helpers -----------------------------------------------------------

def _fmt(value):
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    if isinstance(value, (np.integer,)):
        return str(int(value))
    return str(value)


def _row_key(row):
    return (row["dataset"], row["model"], _STRATEGY_ORDER.get(row["strategy"], 9),
            row["strategy"], float(row["epsilon"]), float(row["alpha"]),
            int(row["iterations"]), int(row["seed"]), int(row.get("k", row.get("k_core", 0))))


def write_rows(path, fields, rows, sort_key=_row_key):
    """Write rows sorted by provenance so output order never depends on execution order."""
    rows = sorted(rows, key=sort_key) if sort_key else list(rows)
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=list(fields), lineterminator="\n")
    writer.writeheader()
    for row in rows:
        writer.writerow({k: _fmt(row[k]) for k in fields})
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(buf.getvalue(), encoding="utf-8")
    return Path(path)


def read_rows(path):
    with open(path, encoding="utf-8", newline="") as fh:
        return list(csv.DictReader(fh))


def sha256_file(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def update_manifest(cfg: ExperimentConfig, step, paths, seconds):
    out = cfg.output
    mpath = out / "manifest.json"
    manifest = json.loads(mpath.read_text()) if mpath.exists() else {}
    manifest["library_version"] = __version__
    manifest["config_hash"] = cfg.config_hash()
    artifacts = manifest.setdefault("artifacts", {})
    for p in paths:
        artifacts[Path(p).relative_to(out).as_posix()] = sha256_file(p)
    manifest.setdefault("timings", {})[step] = round(seconds, 3)
    mpath.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return manifest


def verify_manifest(run_dir):
    """Return a list of problems; empty when every artifact exists and matches."""
    run_dir = Path(run_dir)
    mpath = run_dir / "manifest.json"
    if not mpath.exists():
        return ["manifest.json missing"]
    problems = []
    for rel, digest in json.loads(mpath.read_text()).get("artifacts", {}).items():
        p = run_dir / rel
        if not p.exists():
            problems.append(f"{rel}: missing")
        elif sha256_file(p) != digest:
            problems.append(f"{rel}: checksum mismatch")
    return problems


def load_base_dataset(cfg: ExperimentConfig):
    if cfg.dataset_path is None:
        log = synthetic_log(seed=cfg.seed, **cfg.synthetic)
    else:
        log = load_interactions(cfg.dataset_path, cfg.tsv)
        if log.malformed:
            logger.warning("%s: %d malformed lines skipped", cfg.dataset_path, log.malformed)
    return binarize(log, meta={"name": cfg.dataset_name})


def _split_mode(cfg, ds):
    if cfg.split_mode == "last" and ds.timestamps is None:
        raise DomainError("split mode 'last' needs timestamps; use split.mode=random")
    return cfg.split_mode


def _require_split(cfg):
    data = cfg.output / "data"
    if not (data / "train.tsv").exists():
        raise UsageProblem(f"no prepared split in {data}; run 'advrec prepare' first")
    return load_split(data)


# --- prepare / train -----------------------------------------------------------

def cmd_prepare(cfg: ExperimentConfig):
    t0 = time.perf_counter()
    ds = load_base_dataset(cfg)
    split = leave_one_out_split(ds, _split_mode(cfg, ds), cfg.split_seed)
    out = cfg.output
    out.mkdir(parents=True, exist_ok=True)
    paths = save_split(split, out / "data", extra={
        "dataset": cfg.dataset_name,
        "full": characteristics(ds).to_dict(),
    })
    cfg.dump(out / "config.resolved.yaml")
    paths.append(out / "config.resolved.yaml")
    update_manifest(cfg, "prepare", paths, time.perf_counter() - t0)
    logger.info("prepared %s: %d users, %d items, %d interactions, %d test users",
                cfg.dataset_name, ds.num_users, ds.num_items, ds.num_interactions, len(split.test))
    return split


def _write_losses(path, losses, first_epoch=1):
    rows = [{"epoch": first_epoch + n, "loss": v} for n, v in enumerate(losses)]
    return write_rows(path, ("epoch", "loss"), rows, sort_key=None)


def cmd_train(cfg: ExperimentConfig):
    t0 = time.perf_counter()
    split = _require_split(cfg)
    train = split.train
    ckpts = set(cfg.train.checkpoint_epochs)
    if cfg.apr is not None:
        ckpts.add(cfg.apr.warm_start_epoch)
    tcfg = dataclasses.replace(cfg.train, checkpoint_epochs=tuple(ckpts))
    res = train_bpr(train, tcfg)
    models = cfg.output / "models"
    models.mkdir(parents=True, exist_ok=True)
    paths = []
    save_params(res.params, models / "bpr_mf.bin")
    paths.append(models / "bpr_mf.bin")
    for epoch, params in sorted(res.checkpoints.items()):
        p = models / f"bpr_mf.epoch{epoch}.bin"
        save_params(params, p)
        paths.append(p)
    paths.append(_write_losses(models / "bpr_mf.loss.csv", res.epoch_losses))
    if cfg.apr is not None:
        warm = res.checkpoints[cfg.apr.warm_start_epoch]
        amf = apr_train(train, warm, cfg.apr, tcfg)
        save_params(amf.params, models / "amf.bin")
        paths.append(models / "amf.bin")
        paths.append(_write_losses(models / "amf.loss.csv", amf.epoch_losses,
                                   cfg.apr.warm_start_epoch + 1))
    update_manifest(cfg, "train", paths, time.perf_counter() - t0)
    return paths


# --- attacks -----------------------------------------------------------------------

def _check_budget(delta):
    if delta.strategy in ("BIM", "PGD") and delta.max_abs() > delta.epsilon + 1e-6:
        raise DomainError(f"{delta.strategy} perturbation exceeds its budget")


def _eval_row(cfg, params_or_slates, split, prov, init_ndcg=None):
    rep = evaluate(params_or_slates, split.train, split.test, cfg.k, prov)
    if init_ndcg is not None and init_ndcg > 0:
        rep.rho = rho(init_ndcg, rep.ndcg)
    return rep.csv_row()


def _prov(cfg, model, strategy="none", epsilon=0.0, alpha=0.0, iterations=0, seed=None):
    return {"dataset": cfg.dataset_name, "model": model, "strategy": strategy,
            "epsilon": float(epsilon), "alpha": float(alpha), "iterations": int(iterations),
            "seed": cfg.seed if seed is None else int(seed)}


def attack_model(cfg, split, name, params, pconf: PerturbationConfig, record, init_ndcg):
    """Evaluate one attack at every iteration count in ``record``; returns (rows, final delta)."""
    rows = []
    if pconf.strategy == "FGSM":
        delta = fgsm_delta(params, split.train, pconf.epsilon, pconf.loss_batch, seed=pconf.seed,
                           targets=pconf.targets, normalization=pconf.normalization)
        prov = _prov(cfg, name, "FGSM", pconf.epsilon, pconf.epsilon, 1, pconf.seed)
        rows.append(_eval_row(cfg, apply_delta(params, delta), split, prov, init_ndcg))
        return rows, delta
    record = sorted(set(record))
    run_cfg = dataclasses.replace(pconf, iterations=max(record))
    delta = None
    for delta in iterate_deltas(params, split.train, run_cfg):
        if delta.iterations_run in record:
            _check_budget(delta)
            prov = _prov(cfg, name, pconf.strategy, pconf.epsilon, pconf.alpha,
                         delta.iterations_run, pconf.seed)
            rows.append(_eval_row(cfg, apply_delta(params, delta), split, prov, init_ndcg))
    return rows, delta


def _trained_models(cfg, model_paths=None):
    models = {}
    if model_paths:
        for p in model_paths:
            models[Path(p).stem] = load_params(p)
        return models
    mdir = cfg.output / "models"
    for name in ("bpr_mf", "amf"):
        p = mdir / f"{name}.bin"
        if p.exists():
            models[name] = load_params(p)
    if not models:
        raise UsageProblem(f"no trained models in {mdir}; run 'advrec train' first")
    return models


def _baseline_rows(cfg, split, models):
    rows, init = [], {}
    for name, params in models.items():
        row = _eval_row(cfg, params, split, _prov(cfg, name))
        row["rho"] = 0.0
        init[name] = row["ndcg"]
        rows.append(row)
    rand = evaluate_random(split.train, split.test, cfg.k, cfg.seed, _prov(cfg, "random"))
    rows.append(rand.csv_row())
    return rows, init


def cmd_attack(cfg: ExperimentConfig, model_paths=None):
    t0 = time.perf_counter()
    if not cfg.perturbations:
        raise UsageProblem("no perturbations configured")
    split = _require_split(cfg)
    models = _trained_models(cfg, model_paths)
    reports = cfg.output / "reports"
    deltas_dir = cfg.output / "deltas"
    deltas_dir.mkdir(parents=True, exist_ok=True)
    baseline, init = _baseline_rows(cfg, split, models)
    paths = []

    rows = list(baseline)
    for name, params in models.items():
        for pconf in cfg.perturbations:
            record = cfg.sweep_iterations or [pconf.iterations]
            got, delta = attack_model(cfg, split, name, params, pconf, record, init[name])
            rows.extend(got)
            if pconf.strategy != "FGSM" and delta.iterations_run != pconf.iterations:
                delta = _final_delta(params, split, pconf)
            p = deltas_dir / f"{name}_{pconf.strategy}_eps{pconf.epsilon:g}_L{pconf.iterations}.bin"
            save_delta(delta, p)
            paths.append(p)
    paths.append(write_rows(reports / "attack_iterations.csv", CSV_FIELDS, rows))

    if cfg.sweep_epsilon:
        rows = list(baseline)
        for name, params in models.items():
            for pconf in cfg.perturbations:
                ratio = pconf.alpha / pconf.epsilon
                for eps in cfg.sweep_epsilon:
                    iters = 1 if pconf.strategy == "FGSM" else cfg.epsilon_iterations
                    swept = dataclasses.replace(pconf, epsilon=eps, alpha=eps * ratio,
                                                iterations=iters)
                    got, _ = attack_model(cfg, split, name, params, swept, [iters], init[name])
                    rows.extend(got)
        paths.append(write_rows(reports / "attack_epsilon.csv", CSV_FIELDS, rows))
    update_manifest(cfg, "attack", paths, time.perf_counter() - t0)
    return paths


def _final_delta(params, split, pconf):
    delta = None
    for delta in iterate_deltas(params, split.train, pconf):
        pass
    _check_budget(delta)
    return delta


# --- k-core study ------------------------------------------------------------------

def kcore_rows(cfg: ExperimentConfig, base=None):
    """Subsample, re-split, retrain and attack at each k; returns (rows, skipped, chars)."""
    base = load_base_dataset(cfg) if base is None else base
    rows, skipped, chars = [], [], []
    for k in sorted(set(cfg.sweep_kcore)):
        sub = k_core(base, k)
        if sub.meta.get("empty") or sub.num_items <= cfg.k or np.sum(sub.user_degrees >= 2) < 2:
            reason = "empty" if sub.meta.get("empty") else "too small for evaluation"
            skipped.append({"k_core": k, "reason": reason})
            logger.warning("k-core %d skipped: %s", k, reason)
            continue
        ch = characteristics(sub)
        chars.append(ch)
        split = leave_one_out_split(sub, _split_mode(cfg, sub), cfg.split_seed)
        half = max(1, cfg.kcore_epochs // 2)
        tcfg = dataclasses.replace(cfg.train, epochs=cfg.kcore_epochs, checkpoint_epochs=(half,))
        res = train_bpr(split.train, tcfg)
        models = {"bpr_mf": res.params}
        if cfg.apr is not None:
            apr = dataclasses.replace(cfg.apr, epochs=cfg.kcore_epochs - half,
                                      warm_start_epoch=half) if cfg.kcore_epochs > 1 else cfg.apr
            models["amf"] = apr_train(split.train, res.checkpoints[half], apr, tcfg).params
        for name, params in models.items():
            n0 = evaluate(params, split.train, split.test, cfg.k).ndcg
            for pconf in cfg.perturbations:
                got, _ = attack_model(cfg, split, name, params, pconf, [pconf.iterations], None)
                after = float(got[-1]["ndcg"])
                rows.append({
                    "dataset": cfg.dataset_name, "model": name, "strategy": pconf.strategy,
                    "epsilon": pconf.epsilon,
                    "alpha": pconf.epsilon if pconf.strategy == "FGSM" else pconf.alpha,
                    "iterations": pconf.iterations, "seed": pconf.seed, "k_core": k,
                    "num_users": ch.num_users, "num_items": ch.num_items,
                    "num_interactions": ch.num_interactions, "density": ch.density,
                    "size": ch.size, "shape": ch.shape, "ndcg_init": n0, "ndcg_after": after,
                    "rho": rho(n0, after) if n0 > 0 else "",
                })
    return rows, skipped, chars


def kcore_fits(rows):
    fits = []
    groups = {}
    for r in rows:
        if r["rho"] != "":
            groups.setdefault((r["model"], r["strategy"]), []).append(r)
    for (model, strategy), grp in sorted(groups.items(), key=lambda kv: (kv[0][0], _STRATEGY_ORDER.get(kv[0][1], 9))):
        for charac in ("density", "size", "shape"):
            pts = [(float(r[charac]), float(r["rho"])) for r in grp]
            if len({x for x, _ in pts}) < 2:
                continue
            fl = fit_line(pts)
            fits.append({"model": model, "strategy": strategy, "characteristic": charac,
                         "slope": fl.slope, "intercept": fl.intercept,
                         "endpoint_slope": fl.endpoint_slope, "points": fl.points})
    return fits


def cmd_kcore_study(cfg: ExperimentConfig):
    t0 = time.perf_counter()
    if not cfg.sweep_kcore:
        raise UsageProblem("sweeps.kcore is empty")
    if not cfg.perturbations:
        raise UsageProblem("no perturbations configured")
    rows, skipped, chars = kcore_rows(cfg)
    densities = [c.density for c in chars]
    monotone = all(b >= a for a, b in zip(densities, densities[1:]))
    if not monotone:
        logger.warning("density is not nondecreasing across k-core levels: %s", densities)
    reports = cfg.output / "reports"
    krow_key = lambda r: (r["model"], _STRATEGY_ORDER.get(r["strategy"], 9), int(r["k_core"]))  # noqa: E731
    paths = [write_rows(reports / "kcore_study.csv", KCORE_FIELDS, rows, sort_key=krow_key)]
    paths.append(write_rows(reports / "kcore_fits.csv", FIT_FIELDS, kcore_fits(rows), sort_key=None))
    summary = {"density_nondecreasing": monotone, "skipped": skipped,
               "densities": densities}
    spath = reports / "kcore_summary.json"
    spath.write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    paths.append(spath)
    cfg.output.mkdir(parents=True, exist_ok=True)
    update_manifest(cfg, "kcore-study", paths, time.perf_counter() - t0)
    return paths


# --- report ----------------------------------------------------------------------------

def merge_eval_rows(csv_paths):
    """Merge evaluation CSVs, collapsing identical provenance keys.

    Rows sharing a key but differing in any metric raise ReportError.
    """
    merged, conflicts = {}, []
    for path in csv_paths:
        for row in read_rows(path):
            key = tuple(row[f] for f in KEY_FIELDS)
            if key in merged:
                if merged[key] != row:
                    conflicts.append(key)
            else:
                merged[key] = row
    if conflicts:
        raise ReportError("conflicting rows for keys: " + "; ".join(",".join(k) for k in conflicts))
    return list(merged.values())


def auc_table(rows):
    """Normalised area under each BIM/PGD iteration curve, per metric."""
    curves = {}
    for r in rows:
        if r["strategy"] in ("BIM", "PGD"):
            key = (r["dataset"], r["model"], r["strategy"], r["epsilon"], r["alpha"], r["seed"], r["k"])
            curves.setdefault(key, []).append(r)
    out = []
    for key, grp in curves.items():
        grp.sort(key=lambda r: int(r["iterations"]))
        its = [int(r["iterations"]) for r in grp]
        entry = dict(zip(("dataset", "model", "strategy", "epsilon", "alpha", "seed", "k"), key))
        entry["iterations"] = f"{its[0]}-{its[-1]}"
        for m in METRIC_FIELDS:
            entry[m] = normalized_auc(its, [float(r[m]) for r in grp])
        out.append(entry)
    return out


def cmd_report(run_dir):
    run_dir = Path(run_dir)
    reports = run_dir / "reports"
    sources = {name: reports / f"{name}.csv" for name in ("attack_iterations", "attack_epsilon")}
    sources = {n: p for n, p in sources.items() if p.exists()}
    kcore = reports / "kcore_study.csv"
    if not sources and not kcore.exists():
        raise UsageProblem(f"no evaluation CSVs in {reports}")
    series = run_dir / "series"
    paths = []
    if sources:
        merged = merge_eval_rows(sources.values())
        paths.append(write_rows(series / "merged.csv", CSV_FIELDS, merged))
        figures = {"attack_iterations": "fig1_iterations.csv", "attack_epsilon": "fig2_epsilon.csv"}
        for name, path in sources.items():
            paths.append(write_rows(series / figures[name], CSV_FIELDS, read_rows(path)))
        if "attack_iterations" in sources:
            table = auc_table(read_rows(sources["attack_iterations"]))
            fields = ("dataset", "model", "strategy", "epsilon", "alpha", "seed", "k",
                      "iterations") + METRIC_FIELDS
            paths.append(write_rows(series / "table_auc.csv", fields, table,
                                    sort_key=lambda r: (r["model"], r["strategy"], float(r["epsilon"]))))
    if kcore.exists():
        fields = ("model", "strategy", "k_core", "density", "size", "shape", "rho")
        rows = [{f: r[f] for f in fields} for r in read_rows(kcore)]
        paths.append(write_rows(series / "fig3_characteristics.csv", fields, rows, sort_key=None))
    return paths
