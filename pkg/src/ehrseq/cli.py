"""Command-line entry point: ``ehrseq <subcommand> [options]``.

Settings resolve in three layers: built-in defaults, then a ``key = value``
file given with ``--config``, then flags given on the command line.
Exit codes: 0 success, 2 usage/configuration error, 3 data error, 4 numeric failure.
"""

import argparse
import math
import sys
from dataclasses import dataclass, fields, replace
from pathlib import Path

import numpy as np

from . import __version__
from ._io import DataError, atomic_write, file_sha256, progress, require_file
from .evaluate import (
    CARRY_FORWARD, OBSERVED, UndefinedMetric, bootstrap_ci, calibration_curve, dynamic_auroc, final_scores,
    format_rank_table, pooled_bootstrap_ci, read_probability_table, report_case, roc_curve, write_json, write_table,
    write_probability_table,
)
from .ingest import ColumnMap, StayColumns, ingest, read_cohort, write_cohort, write_diagnostics
from .model import forward, load_checkpoint, predict, save_checkpoint
from .optim import LMError, NonFiniteGradient, fit_curve, fit_logistic, severity_to_probability
from .synth import GeneratorConfig, generate_cohort, write_cohort_tables
from .tokenizer import (
    build_vocab, encode_stay, fit_all_bins, load_bins, load_vocab, read_encoded, record_tokens,
    save_bins, save_vocab, write_encoded,
)
from .train import (
    AccessLog, ConfigError, SplitPlan, TrainConfig, TrainingDiverged, run_protocol, shuffle_labels, split_data,
)

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4


PAPER_GRID = "embed_dim=16,32,48; hidden_units=32,64,128,256; dropout=0.0,0.2,0.4"


class UsageError(Exception):
    pass


@dataclass(frozen=True)
class RunConfig:
    bins: int = 20
    horizon: int = 48
    cap: int = 10_000
    folds: int = 10
    test_fraction: float = 0.10
    val_size: int = 0              # 0: min(1000, development stays // 10)
    patience: int = 5
    max_epochs: int = 100
    lr: float = 0.0005
    batch_size: int = 128
    embed_dim: int = 32
    hidden_units: int = 64
    dropout: float = 0.0
    grid: str = PAPER_GRID         # "none" trains the single embed_dim/hidden_units/dropout config
    bootstrap: int = 10_000
    level: float = 0.95
    censoring: str = CARRY_FORWARD
    calibration_bins: int = 10
    seed: int = 0
    threads: int = 1
    # synth
    n_stays: int = 2000
    base_rate: float = 0.132
    signal_scale: float = 1.0
    tautology: bool = False
    noise_only: bool = False

    def train_config(self):
        return TrainConfig(self.embed_dim, self.hidden_units, self.dropout, self.lr, self.batch_size,
                           self.patience, self.max_epochs, self.horizon, self.seed)


def parse_grid(text):
    """``"embed_dim=16,32; dropout=0,0.2"`` -> {"embed_dim": [16, 32], "dropout": [0.0, 0.2]}."""
    grid = {}
    if text.strip().lower() == "none":
        return grid
    types = {f.name: f.type for f in fields(TrainConfig)}
    for part in filter(None, (p.strip() for p in text.split(";"))):
        if "=" not in part:
            raise UsageError(f"grid entry {part!r} is not name=v1,v2,...")
        name, vals = (x.strip() for x in part.split("=", 1))
        if name not in ("embed_dim", "hidden_units", "dropout"):
            raise UsageError(f"grid over {name!r} is not supported")
        cast = float if types[name] in (float, "float") else int
        grid[name] = [cast(v) for v in vals.split(",") if v.strip()]
    return grid


def validate_config(cfg):
    """Every violated constraint, each prefixed with its field name; empty when valid."""
    errs = []
    if cfg.bins < 2:
        errs.append(f"bins: bin count must be >= 2 (got {cfg.bins})")
    for name in ("horizon", "cap", "folds", "max_epochs", "batch_size", "embed_dim", "hidden_units",
                 "threads", "n_stays"):
        if getattr(cfg, name) < 1:
            errs.append(f"{name}: must be >= 1 (got {getattr(cfg, name)})")
    if cfg.patience < 0:
        errs.append(f"patience: must be >= 0 (got {cfg.patience})")
    if cfg.val_size < 0:
        errs.append(f"val_size: must be >= 0 (got {cfg.val_size})")
    if cfg.bootstrap < 0:
        errs.append(f"bootstrap: must be >= 0 (got {cfg.bootstrap})")
    if not 0.0 < cfg.test_fraction < 1.0:
        errs.append(f"test_fraction: must be in (0, 1) (got {cfg.test_fraction})")
    if not cfg.lr > 0.0:
        errs.append(f"lr: must be positive (got {cfg.lr})")
    if not 0.0 <= cfg.dropout < 1.0:
        errs.append(f"dropout: must be in [0, 1) (got {cfg.dropout})")
    if not 0.0 < cfg.level < 1.0:
        errs.append(f"level: must be in (0, 1) (got {cfg.level})")
    if not 0.0 < cfg.base_rate < 1.0:
        errs.append(f"base_rate: must be in (0, 1) (got {cfg.base_rate})")
    if cfg.signal_scale < 0.0:
        errs.append(f"signal_scale: must be >= 0 (got {cfg.signal_scale})")
    if cfg.censoring not in (CARRY_FORWARD, OBSERVED):
        errs.append(f"censoring: must be {CARRY_FORWARD!r} or {OBSERVED!r} (got {cfg.censoring!r})")
    if cfg.calibration_bins < 2:
        errs.append(f"calibration_bins: must be >= 2 (got {cfg.calibration_bins})")
    try:
        grid = parse_grid(cfg.grid)
        if cfg.grid.strip().lower() not in ("", "none") and not grid:
            errs.append("grid: no entries")
        for name, vals in grid.items():
            if not vals:
                errs.append(f"grid: {name} has no values")
    except (UsageError, ValueError) as exc:
        errs.append(f"grid: {exc}")
    return errs


def _coerce(name, text):
    ftype = {f.name: f.type for f in fields(RunConfig)}[name]
    if ftype in (bool, "bool"):
        low = text.strip().lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise UsageError(f"{name}: expected a boolean, got {text!r}")
    if ftype in (int, "int"):
        return int(text)
    if ftype in (float, "float"):
        return float(text)
    return text.strip()


def read_config_file(path):
    """``key = value`` lines; ``#`` starts a comment; keys may use dashes or underscores."""
    known = {f.name for f in fields(RunConfig)}
    out = {}
    with open(require_file(path), encoding="utf-8") as f:
        for n, line in enumerate(f, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise UsageError(f"{path}:{n}: expected key = value")
            key, val = (x.strip() for x in line.split("=", 1))
            key = key.replace("-", "_")
            if key not in known:
                raise UsageError(f"{path}:{n}: unknown setting {key!r}")
            try:
                out[key] = _coerce(key, val)
            except ValueError as exc:
                raise UsageError(f"{path}:{n}: {key}: {exc}") from None
    return out


def resolve_config(args):
    cfg = RunConfig()
    if getattr(args, "config", None):
        cfg = replace(cfg, **read_config_file(args.config))
    flags = {f.name: getattr(args, f.name) for f in fields(RunConfig)
             if getattr(args, f.name, None) is not None}
    return replace(cfg, **flags)


# -- subcommands -----------------------------------------------------------

def cmd_synth(args, cfg):
    gcfg = GeneratorConfig(n_stays=cfg.n_stays, horizon=cfg.horizon, base_rate=cfg.base_rate, seed=cfg.seed,
                           signal_scale=cfg.signal_scale, tautology=cfg.tautology)
    if cfg.noise_only:
        gcfg = gcfg.noise_only()
    cohort = generate_cohort(gcfg)
    out = write_cohort_tables(cohort, args.out)
    n_events = sum(len(s.events) for s in cohort.stays)
    progress("synth", stays=len(cohort.stays), events=n_events, deaths=int(cohort.labels.sum()), out=out)


def cmd_ingest(args, cfg):
    cmap = ColumnMap(args.col_stay, args.col_label, args.col_value, args.col_time)
    records, diag = ingest(args.events, args.stays, cfg.horizon, cfg.cap, cmap, StayColumns(), args.delimiter)
    write_cohort(args.out, records)
    diag_path = args.diagnostics or str(args.out) + ".diagnostics.txt"
    write_diagnostics(diag_path, diag)
    if not diag.is_conserved():
        raise DataError("ingest diagnostics do not balance; see " + diag_path)
    progress("ingest", stays=len(records), rows=diag.counts["rows_read"], bucketed=diag.counts["bucketed"])


def cmd_fit_bins(args, cfg):
    records = list(read_cohort(args.cohort))
    plan = split_data([(r["stay_id"], r["mortality"]) for r in records], cfg.test_fraction, cfg.folds,
                      cfg.val_size or None, cfg.seed)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    plan.save(out / "split.json")
    log = AccessLog(plan.test)
    dev = set(plan.development)
    bins = fit_all_bins(log.guard((r for r in records if r["stay_id"] in dev), lambda r: r["stay_id"]), cfg.bins)
    save_bins(out / "bins.tsv", bins, cfg.bins)
    progress("fit-bins", labels=len(bins), development=len(dev), test=len(plan.test),
             test_reads_during_fit=log.test_reads_during_fit)


def cmd_build_vocab(args, cfg):
    plan = SplitPlan.load(require_file(args.split))
    bins, _ = load_bins(args.bins_path)
    dev = set(plan.development)
    log = AccessLog(plan.test)
    records = (r for r in read_cohort(args.cohort) if r["stay_id"] in dev)
    vocab = build_vocab(record_tokens(log.guard(records, lambda r: r["stay_id"]), bins))
    n_bins = next(iter(bins.values())).n_bins if bins else cfg.bins
    save_vocab(args.out, vocab, n_bins)
    progress("build-vocab", size=len(vocab), test_reads_during_fit=log.test_reads_during_fit)


def cmd_encode(args, cfg):
    bins, _ = load_bins(args.bins_path)
    vocab = load_vocab(args.vocab)
    stays = [encode_stay(r, vocab, bins) for r in read_cohort(args.cohort)]
    write_encoded(args.out, stays)
    n_unknown = sum(tok == 1 for s in stays for h in s.hours for tok in h)
    progress("encode", stays=len(stays), unknown_tokens=n_unknown)


def cmd_train(args, cfg):
    plan = SplitPlan.load(require_file(args.split))
    stays = {s.stay_id: s for s in read_encoded(args.encoded)}
    vocab = load_vocab(args.vocab)
    missing = [sid for sid in plan.test + plan.development if sid not in stays]
    if missing:
        raise DataError(f"{len(missing)} split stays absent from {args.encoded}, e.g. {missing[0]}")
    if args.shuffle_labels:
        stays = shuffle_labels(stays, plan.development, cfg.seed)
    grid = parse_grid(cfg.grid) or None
    res = run_protocol(stays, plan, len(vocab), cfg.train_config(), args.out_dir, cfg.threads, grid,
                       file_sha256(args.vocab), verbose=True)
    for f in res["folds"]:
        progress("train", fold=f["fold"], best_epoch=f["record"].best_epoch,
                 best_val_auroc=f["record"].best_val_auroc, stopped=f["record"].stopped)
    progress("train", done=1, test_reads_during_fit=res["manifest"]["test_reads_during_fit"])


def _fold_dirs(run_dir):
    dirs = sorted(Path(run_dir).glob("fold_*"), key=lambda p: int(p.name.split("_")[1]))
    if not dirs:
        raise DataError(f"no fold_* directories under {run_dir}")
    return dirs


def _baselines(records, plan, cfg):
    """Severity-score baselines calibrated on development stays, scored on the test set."""
    dev, test = set(plan.development), plan.test
    by_id = {r["stay_id"]: r for r in records}
    out = {}
    for name, kind in (("oasis", "logistic_linear"), ("sapsii", "saps_curve")):
        def pairs(ids):
            s = [by_id[i]["scores"].get(name, math.nan) for i in ids if i in by_id]
            y = [by_id[i]["mortality"] for i in ids if i in by_id]
            s, y = np.asarray(s, dtype=np.float64), np.asarray(y)
            ok = np.isfinite(s)
            return s[ok], y[ok]
        s_dev, y_dev = pairs(sorted(dev))
        s_test, y_test = pairs(test)
        if s_dev.size < 10 or s_test.size < 2 or y_test.min() == y_test.max():
            continue
        if kind == "logistic_linear":
            calib = fit_logistic(s_dev, y_dev)
        else:
            calib, _ = fit_curve(np.maximum(s_dev, 0.0), y_dev, kind="saps_curve")
        p = severity_to_probability(np.maximum(s_test, 0.0) if kind == "saps_curve" else s_test, calib)
        iv = bootstrap_ci(s_test, y_test, cfg.bootstrap, cfg.level, cfg.seed) if cfg.bootstrap else None
        est = iv.estimate if iv else float(roc_curve(s_test, y_test).auroc)
        out[name] = {
            "kind": kind, "coef": list(calib.coef), "n_test": int(s_test.size), "auroc": est,
            "lo": iv.lo if iv else est, "hi": iv.hi if iv else est,
            "calibration": calibration_curve(p, y_test, cfg.calibration_bins),
        }
    return out


def cmd_evaluate(args, cfg):
    plan = SplitPlan.load(require_file(args.split))
    labels_by_id = {s.stay_id: s.mortality for s in read_encoded(args.encoded)}
    test_ids = plan.test
    y = np.array([labels_by_id[i] for i in test_ids])
    fold_trajs = []
    for d in _fold_dirs(args.run_dir):
        probs = read_probability_table(require_file(d / "test_probs.tsv"))
        fold_trajs.append([probs[i] for i in test_ids])
    horizon = min(cfg.horizon, max(len(t) for t in fold_trajs[0]))
    finals = [final_scores(t) for t in fold_trajs]
    per_fold = []
    for k, s in enumerate(finals):
        if cfg.bootstrap:
            iv = bootstrap_ci(s, y, cfg.bootstrap, cfg.level, cfg.seed)
            per_fold.append({"fold": k, "auroc": iv.estimate, "lo": iv.lo, "hi": iv.hi, "redraws": iv.redraws})
        else:
            a = roc_curve(s, y).auroc
            per_fold.append({"fold": k, "auroc": a, "lo": a, "hi": a, "redraws": 0})
    if cfg.bootstrap:
        pooled = pooled_bootstrap_ci(finals, y, cfg.bootstrap, cfg.level, cfg.seed)
        pooled_d = {"auroc": pooled.estimate, "lo": pooled.lo, "hi": pooled.hi, "redraws": pooled.redraws}
    else:
        a = float(np.mean([p["auroc"] for p in per_fold]))
        pooled_d = {"auroc": a, "lo": a, "hi": a, "redraws": 0}
    diag = {}
    dyn = dynamic_auroc(fold_trajs, y, horizon, cfg.censoring, cfg.bootstrap, cfg.level, cfg.seed, diag)
    rocs = [roc_curve(s, y) for s in finals]
    mean_final = np.mean(finals, axis=0)
    calib = calibration_curve(mean_final, y, cfg.calibration_bins)
    baselines = {}
    if args.cohort:
        baselines = _baselines(list(read_cohort(args.cohort)), plan, cfg)

    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_table(out / "dynamic_auroc.tsv", ("hour", "n_stays", "auroc", "lo", "hi"),
                ((m.hour, m.n_stays, m.auroc, m.lo, m.hi) for m in dyn))
    write_table(out / "roc.tsv", ("fold", "fpr", "tpr"),
                ((k, float(f), float(t)) for k, r in enumerate(rocs) for f, t in zip(r.fpr, r.tpr)))
    calib_rows = [("model", c.mean_predicted, c.observed_rate, c.count) for c in calib]
    for name, b in baselines.items():
        calib_rows += [(name, c.mean_predicted, c.observed_rate, c.count) for c in b["calibration"]]
    write_table(out / "calibration.tsv", ("source", "mean_predicted", "observed_rate", "count"), calib_rows)
    metrics = {
        "n_test": int(y.size), "n_deaths": int(y.sum()), "n_folds": len(fold_trajs), "horizon": horizon,
        "censoring": cfg.censoring, "bootstrap": cfg.bootstrap, "level": cfg.level, "seed": cfg.seed,
        "final_auroc": pooled_d, "per_fold": per_fold, "omitted_hours": diag.get("omitted_hours", []),
        "baselines": {k: {kk: vv for kk, vv in v.items() if kk != "calibration"} for k, v in baselines.items()},
    }
    write_json(out / "metrics.json", metrics)

    cases = []
    if args.cases and args.cohort and args.bins_path:
        cases = _case_tables(args, cfg, test_ids, mean_final, y)
    _write_report(out / "eval_report.txt", metrics, dyn, calib, baselines, cases)
    progress("evaluate", final_auroc=pooled_d["auroc"], lo=pooled_d["lo"], hi=pooled_d["hi"], hours=len(dyn))


def _case_tables(args, cfg, test_ids, scores, y):
    """Rank tables from fold 0 for the highest-risk dying and surviving test stays."""
    params, _, _ = load_checkpoint(require_file(_fold_dirs(args.run_dir)[0] / "checkpoint.bin"))
    bins, _ = load_bins(args.bins_path)
    encoded = {s.stay_id: s for s in read_encoded(args.encoded)}
    order = np.argsort(-scores, kind="mergesort")
    picks = [test_ids[i] for i in order if y[i] == 1][: args.cases]
    picks += [test_ids[i] for i in order if y[i] == 0][: max(1, args.cases // 2)]
    wanted = set(picks)
    records = {r["stay_id"]: r for r in read_cohort(args.cohort) if r["stay_id"] in wanted}
    out = []
    for sid in picks:
        reps = report_case(records[sid], encoded[sid], params, bins)
        out.append((sid, encoded[sid].mortality, format_rank_table(reps, top=3)))
    return out


def _write_report(path, metrics, dyn, calib, baselines, cases):
    fa = metrics["final_auroc"]
    with atomic_write(path) as f:
        f.write("[summary]\n")
        for k in ("n_test", "n_deaths", "n_folds", "horizon", "censoring", "bootstrap", "level", "seed"):
            f.write(f"{k} = {metrics[k]}\n")
        f.write(f"final_auroc = {fa['auroc']:.4f}\nfinal_auroc_lo = {fa['lo']:.4f}\nfinal_auroc_hi = {fa['hi']:.4f}\n")
        if metrics["omitted_hours"]:
            f.write("omitted_hours = " + " ".join(map(str, metrics["omitted_hours"])) + "\n")
        for pf in metrics["per_fold"]:
            f.write(f"\n[fold {pf['fold']}]\nauroc = {pf['auroc']:.4f}\nlo = {pf['lo']:.4f}\nhi = {pf['hi']:.4f}\n")
        f.write("\n[dynamic_auroc]\nhour\tn_stays\tauroc\tlo\thi\n")
        for m in dyn:
            f.write(f"{m.hour}\t{m.n_stays}\t{m.auroc:.4f}\t{m.lo:.4f}\t{m.hi:.4f}\n")
        f.write("\n[calibration model]\nmean_predicted\tobserved_rate\tcount\n")
        for c in calib:
            f.write(f"{c.mean_predicted:.4f}\t{c.observed_rate:.4f}\t{c.count}\n")
        for name, b in baselines.items():
            f.write(f"\n[baseline {name}]\nkind = {b['kind']}\ncoef = " + " ".join(f"{c:.6g}" for c in b["coef"]))
            f.write(f"\nauroc = {b['auroc']:.4f}\nlo = {b['lo']:.4f}\nhi = {b['hi']:.4f}\n")
            f.write("mean_predicted\tobserved_rate\tcount\n")
            for c in b["calibration"]:
                f.write(f"{c.mean_predicted:.4f}\t{c.observed_rate:.4f}\t{c.count}\n")
        for sid, label, table in cases:
            f.write(f"\n[case {sid}]\nmortality = {label}\n{table}")


def _find_stay(path, stay_id):
    for s in read_encoded(path):
        if s.stay_id == stay_id:
            return s
    raise DataError(f"stay {stay_id} not found in {path}")


def cmd_predict(args, cfg):
    params, mcfg, _ = load_checkpoint(require_file(args.checkpoint))
    if args.stay:
        stay = _find_stay(args.encoded, args.stay)
        upto = min(args.upto_hour or mcfg.horizon, mcfg.horizon)
        probs = forward(stay.truncated(upto), params).probs
        sys.stdout.write("hour\tprobability\n")
        for t, p in enumerate(probs, 1):
            sys.stdout.write(f"{t}\t{float(p)!r}\n")
        return
    if not args.out:
        raise UsageError("predict needs --stay or --out")
    stays = [s.truncated(min(args.upto_hour or mcfg.horizon, mcfg.horizon)) for s in read_encoded(args.encoded)]
    write_probability_table(args.out, [s.stay_id for s in stays], predict(stays, params))
    progress("predict", stays=len(stays), out=args.out)


def _rank_tables(args, stay_ids):
    params, mcfg, _ = load_checkpoint(require_file(args.checkpoint))
    bins, _ = load_bins(args.bins_path)
    wanted = set(stay_ids)
    encoded = {s.stay_id: s for s in read_encoded(args.encoded) if s.stay_id in wanted}
    records = {r["stay_id"]: r for r in read_cohort(args.cohort) if r["stay_id"] in wanted}
    for sid in stay_ids:
        if sid not in encoded or sid not in records:
            raise DataError(f"stay {sid} not found in {args.encoded} / {args.cohort}")
        stay = encoded[sid].truncated(mcfg.horizon)
        yield sid, stay, report_case(records[sid], stay, params, bins)


def cmd_rank(args, cfg):
    top = args.top if args.top > 0 else None
    for sid, stay, reps in _rank_tables(args, [args.stay]):
        if args.hour is not None:
            if not 1 <= args.hour <= len(reps):
                raise UsageError(f"--hour must be in 1..{len(reps)} for stay {sid}")
            reps = [reps[args.hour - 1]]
        sys.stdout.write(format_rank_table(reps, top=top))


def cmd_report(args, cfg):
    top = args.top if args.top > 0 else None
    if args.stays:
        ids = args.stays
    else:
        plan = SplitPlan.load(require_file(args.split))
        ids = plan.test
    with atomic_write(args.out) as f:
        for sid, stay, reps in _rank_tables(args, ids):
            f.write(f"[stay {sid}]\nmortality = {stay.mortality}\n")
            f.write(format_rank_table(reps, top=top))
            f.write("\n")
    progress("report", stays=len(ids), out=args.out)


# -- argument parsing ------------------------------------------------------

def _add_settings(p, names):
    """Flags for RunConfig fields; default None so unset flags fall through to file/defaults."""
    types = {f.name: f.type for f in fields(RunConfig)}
    for name in names:
        flag = "--" + name.replace("_", "-")
        t = types[name]
        if t in (bool, "bool"):
            p.add_argument(flag, dest=name, action="store_const", const=True, default=None)
        else:
            cast = {"int": int, "float": float, "str": str}.get(t if isinstance(t, str) else t.__name__, str)
            p.add_argument(flag, dest=name, type=cast, default=None, metavar=name.upper())


def build_parser():
    parser = argparse.ArgumentParser(prog="ehrseq", description="Hourly ICU mortality prediction from raw event streams.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("--config", help="key = value settings file (flags override it)")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="write a synthetic cohort (events.csv, stays.csv, truth.tsv)")
    p.add_argument("--out", required=True)
    _add_settings(p, ["n_stays", "horizon", "base_rate", "seed", "signal_scale", "tautology", "noise_only"])

    p = sub.add_parser("ingest", help="link events to stays and bucket them by hour")
    p.add_argument("--events", nargs="+", required=True)
    p.add_argument("--stays", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--diagnostics")
    p.add_argument("--delimiter", default=",")
    p.add_argument("--col-stay", default="ICUSTAY_ID")
    p.add_argument("--col-label", default="LABEL")
    p.add_argument("--col-value", default="VALUE")
    p.add_argument("--col-time", default="CHARTTIME")
    _add_settings(p, ["horizon", "cap"])

    p = sub.add_parser("fit-bins", help="split the cohort and fit percentile bins on development stays")
    p.add_argument("--cohort", required=True)
    p.add_argument("--out-dir", required=True)
    _add_settings(p, ["bins", "folds", "test_fraction", "val_size", "seed"])

    p = sub.add_parser("build-vocab", help="token vocabulary from development stays")
    p.add_argument("--cohort", required=True)
    p.add_argument("--split", required=True)
    p.add_argument("--bins", dest="bins_path", required=True, metavar="PATH")
    p.add_argument("--out", required=True)

    p = sub.add_parser("encode", help="map every event to its token index")
    p.add_argument("--cohort", required=True)
    p.add_argument("--bins", dest="bins_path", required=True, metavar="PATH")
    p.add_argument("--vocab", required=True)
    p.add_argument("--out", required=True)

    p = sub.add_parser("train", help="cross-validated training with early stopping")
    p.add_argument("--encoded", required=True)
    p.add_argument("--split", required=True)
    p.add_argument("--vocab", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--shuffle-labels", action="store_true", help="permute development outcomes (null control)")
    _add_settings(p, ["horizon", "patience", "max_epochs", "lr", "batch_size", "embed_dim", "hidden_units",
                      "dropout", "grid", "seed", "threads"])

    p = sub.add_parser("evaluate", help="AUROC with bootstrap intervals, hourly AUROC, calibration")
    p.add_argument("--run-dir", required=True)
    p.add_argument("--encoded", required=True)
    p.add_argument("--split", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--cohort", help="cohort records: enables severity-score baselines and case tables")
    p.add_argument("--bins", dest="bins_path", metavar="PATH", help="bins file: enables case tables")
    p.add_argument("--cases", type=int, default=3)
    _add_settings(p, ["horizon", "bootstrap", "level", "censoring", "calibration_bins", "seed"])

    p = sub.add_parser("predict", help="hourly probabilities from a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--encoded", required=True)
    p.add_argument("--stay")
    p.add_argument("--upto-hour", type=int)
    p.add_argument("--out")

    for name, helptext in (("rank", "ranked events per hour for one stay"),
                           ("report", "ranked-event tables for many stays")):
        p = sub.add_parser(name, help=helptext)
        p.add_argument("--checkpoint", required=True)
        p.add_argument("--cohort", required=True)
        p.add_argument("--encoded", required=True)
        p.add_argument("--bins", dest="bins_path", required=True, metavar="PATH")
        p.add_argument("--top", type=int, default=3, help="events per hour (0 = all)")
        if name == "rank":
            p.add_argument("--stay", required=True)
            p.add_argument("--hour", type=int, help="1-based hour (default: all hours)")
        else:
            p.add_argument("--stays", nargs="*", help="stay ids (default: the test set of --split)")
            p.add_argument("--split")
            p.add_argument("--out", required=True)
    for p in sub.choices.values():
        p.add_argument("--config", default=argparse.SUPPRESS, help="key = value settings file")
    return parser


COMMANDS = {
    "synth": cmd_synth, "ingest": cmd_ingest, "fit-bins": cmd_fit_bins, "build-vocab": cmd_build_vocab,
    "encode": cmd_encode, "train": cmd_train, "evaluate": cmd_evaluate, "predict": cmd_predict,
    "rank": cmd_rank, "report": cmd_report,
}


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else EXIT_USAGE
    try:
        cfg = resolve_config(args)
        errs = validate_config(cfg)
        if errs:
            for e in errs:
                print(f"ehrseq: config error: {e}", file=sys.stderr)
            return EXIT_USAGE
        if args.command == "report" and not args.stays and not args.split:
            raise UsageError("report needs --stays or --split")
        COMMANDS[args.command](args, cfg)
    except (UsageError, ConfigError) as exc:
        print(f"ehrseq: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, FileNotFoundError, KeyError, ValueError) as exc:
        if isinstance(exc, UndefinedMetric):
            print(f"ehrseq: numeric failure: {exc}", file=sys.stderr)
            return EXIT_NUMERIC
        print(f"ehrseq: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except TrainingDiverged as exc:
        if getattr(args, "out_dir", None):
            d = Path(args.out_dir)
            d.mkdir(parents=True, exist_ok=True)
            vocab = load_vocab(args.vocab)
            save_checkpoint(d / "last_good.bin", exc.params, cfg.train_config().model_config(len(vocab)))
            write_json(d / "diverged.json", exc.record.metrics())
        print(f"ehrseq: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (NonFiniteGradient, LMError, FloatingPointError) as exc:
        print(f"ehrseq: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
