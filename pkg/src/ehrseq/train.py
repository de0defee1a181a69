"""Stratified splits, early-stopped training, grid search and the cross-validation protocol."""

import hashlib
import itertools
import json
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from ._io import atomic_write, progress
from .evaluate import auroc, final_scores, write_json, write_probability_table
from .model import ModelConfig, backward, copy_params, init_params, make_batch, predict, save_checkpoint
from .optim import ADAM_LR, AdamState, NonFiniteGradient, adam_step
from .tokenizer import build_vocab, fit_all_bins, record_tokens


class ConfigError(ValueError):
    pass


class TrainingDiverged(FloatingPointError):
    """Non-finite loss or gradient; carries the partial record and the last good parameters."""

    def __init__(self, message, record, params):
        super().__init__(message)
        self.record = record
        self.params = params


# -- splitting -------------------------------------------------------------

@dataclass
class SplitPlan:
    seed: int
    test: list
    folds: list  # [(train ids, validation ids), ...]

    @property
    def development(self):
        test = set(self.test)
        ids = set()
        for train, val in self.folds:
            ids.update(train)
            ids.update(val)
        return sorted(ids - test)

    def to_json(self):
        return {"seed": self.seed, "test": self.test,
                "folds": [{"train": tr, "validation": va} for tr, va in self.folds]}

    @classmethod
    def from_json(cls, d):
        return cls(d["seed"], list(d["test"]), [(list(f["train"]), list(f["validation"])) for f in d["folds"]])

    def save(self, path):
        with atomic_write(path) as f:
            json.dump(self.to_json(), f, sort_keys=True)
            f.write("\n")

    @classmethod
    def load(cls, path):
        with open(path, encoding="utf-8") as f:
            return cls.from_json(json.load(f))


def _take_stratified(pos, neg, n, rate):
    """Pop about n * rate positives and the rest negatives from the front of each list."""
    n_pos = int(round(n * rate))
    n_pos = min(max(n_pos, 0), len(pos))
    n_neg = n - n_pos
    if n_neg > len(neg):
        raise ConfigError("not enough stays to fill a stratified subset")
    return pos[:n_pos] + neg[:n_neg], pos[n_pos:], neg[n_neg:]


def split_data(stays, test_fraction=0.10, n_folds=10, val_size=None, seed=0):
    """Stratified test split plus `n_folds` disjoint stratified validation sets.

    `stays` is an iterable of (stay_id, mortality) pairs or objects with those
    attributes.  Every fold trains on the development stays outside its
    validation set.  The default validation size is min(1000, n_dev // 10).
    """
    pairs = []
    for s in stays:
        sid, y = (s.stay_id, s.mortality) if hasattr(s, "stay_id") else s
        pairs.append((str(sid), int(y)))
    pairs.sort()
    if len({sid for sid, _ in pairs}) != len(pairs):
        raise ConfigError("duplicate stay ids")
    n = len(pairs)
    pos = [sid for sid, y in pairs if y == 1]
    neg = [sid for sid, y in pairs if y == 0]
    if not pos or not neg:
        raise ConfigError("cohort needs both outcomes to split")
    if not 0.0 < test_fraction < 1.0:
        raise ConfigError("test fraction must be in (0, 1)")
    if n_folds < 1:
        raise ConfigError("need at least one fold")
    rng = np.random.default_rng(seed)
    pos = [pos[i] for i in rng.permutation(len(pos))]
    neg = [neg[i] for i in rng.permutation(len(neg))]
    rate = len(pos) / n

    test, pos, neg = _take_stratified(pos, neg, int(round(n * test_fraction)), rate)
    n_dev = len(pos) + len(neg)
    if val_size is None:
        val_size = min(1000, n_dev // 10)
    if val_size < 1:
        raise ConfigError("validation size must be positive")
    if n < 10 * val_size:
        raise ConfigError(f"cohort of {n} stays is smaller than 10 x validation size {val_size}")
    if n_folds * val_size > n_dev:
        raise ConfigError(f"{n_folds} disjoint validation sets of {val_size} exceed {n_dev} development stays")
    dev = sorted(pos + neg)
    vals = []
    for _ in range(n_folds):
        val, pos, neg = _take_stratified(pos, neg, val_size, rate)
        vals.append(sorted(val))
    folds = []
    for val in vals:
        vs = set(val)
        folds.append(([sid for sid in dev if sid not in vs], val))
    return SplitPlan(seed, sorted(test), folds)


def ids_digest(ids):
    return hashlib.sha256("\n".join(sorted(ids)).encode()).hexdigest()


# -- leakage instrumentation -----------------------------------------------

class AccessLog:
    """Counts how many test-set stays reach a fitting routine."""

    def __init__(self, test_ids):
        self.test_ids = frozenset(test_ids)
        self.test_reads_during_fit = 0

    def guard(self, items, key):
        for item in items:
            if key(item) in self.test_ids:
                self.test_reads_during_fit += 1
            yield item


def shuffle_labels(stays, ids, seed):
    """Permute outcomes among `ids` (null control); other stays are untouched.

    `stays` maps stay_id to TokenizedStay; returns a new mapping.
    """
    ids = sorted(ids)
    perm = np.random.default_rng([seed, 7919]).permutation(len(ids))
    labels = [stays[i].mortality for i in ids]
    out = dict(stays)
    for sid, j in zip(ids, perm):
        out[sid] = replace(stays[sid], mortality=labels[j])
    return out


def fit_on_development(records, plan, n_bins, access_log=None):
    """Bins and vocabulary from development stays only.  Returns (bins, vocab, access log)."""
    log = access_log or AccessLog(plan.test)
    dev = set(plan.development)
    dev_records = [r for r in records if r["stay_id"] in dev]
    bins = fit_all_bins(log.guard(dev_records, lambda r: r["stay_id"]), n_bins)
    vocab = build_vocab(record_tokens(log.guard(dev_records, lambda r: r["stay_id"]), bins))
    return bins, vocab, log


# -- training --------------------------------------------------------------

@dataclass(frozen=True)
class TrainConfig:
    embed_dim: int = 32
    hidden_units: int = 64
    dropout: float = 0.0
    lr: float = ADAM_LR
    batch_size: int = 128
    patience: int = 5
    max_epochs: int = 100
    horizon: int = 48
    seed: int = 0

    def model_config(self, vocab_size):
        return ModelConfig(vocab_size, self.embed_dim, self.hidden_units, self.dropout, self.horizon)

    def errors(self):
        errs = []
        if self.lr <= 0:
            errs.append("learning rate must be positive")
        if self.batch_size < 1:
            errs.append("batch size must be positive")
        if self.patience < 0:
            errs.append("patience must be >= 0")
        if self.max_epochs < 1:
            errs.append("max_epochs must be positive")
        if self.horizon < 1:
            errs.append("horizon must be positive")
        if self.embed_dim < 1 or self.hidden_units < 1:
            errs.append("model sizes must be positive")
        if not 0.0 <= self.dropout < 1.0:
            errs.append("dropout must be in [0, 1)")
        return errs


@dataclass
class EpochStat:
    epoch: int
    train_loss: float
    val_auroc: float


@dataclass
class TrainRunRecord:
    config: dict
    n_params: int
    epochs: list = field(default_factory=list)
    best_epoch: int = 0
    best_val_auroc: float = float("nan")
    stopped: str = ""
    checkpoint: str | None = None
    wall_clock: float = 0.0

    def metrics(self):
        """Everything except timing; reproducible bit-for-bit under a fixed seed."""
        d = asdict(self)
        d.pop("wall_clock")
        return d


def train_fold(train, validation, vocab_size, config=TrainConfig(), fold=0, verbose=False):
    """Adam on mean BCE with early stopping on validation AUROC of the final observed hour.

    Stops once the best epoch is more than `patience` epochs old.  Returns
    (record, best params).  Raises TrainingDiverged on a non-finite loss.
    """
    errs = config.errors()
    if errs:
        raise ConfigError("; ".join(errs))
    if not train or not validation:
        raise ConfigError("training and validation sets must be non-empty")
    mcfg = config.model_config(vocab_size)
    t0 = time.perf_counter()
    params = init_params(mcfg, [config.seed, fold])
    state = AdamState(lr=config.lr)
    record = TrainRunRecord(asdict(config), mcfg.n_params())
    best = copy_params(params)
    val_y = np.array([s.mortality for s in validation])
    train = [s.truncated(config.horizon) for s in train]
    validation = [s.truncated(config.horizon) for s in validation]
    for epoch in range(1, config.max_epochs + 1):
        order = np.random.default_rng([config.seed, fold, epoch]).permutation(len(train))
        total, count = 0.0, 0
        for step, start in enumerate(range(0, len(train), config.batch_size)):
            batch = make_batch([train[i] for i in order[start:start + config.batch_size]], config.horizon)
            loss, grads = backward(batch, params, seed=[config.seed, fold, epoch, step], dropout=config.dropout)
            if not math.isfinite(loss):
                record.stopped = f"non-finite loss at epoch {epoch} step {step}"
                record.wall_clock = time.perf_counter() - t0
                raise TrainingDiverged(record.stopped, record, best)
            try:
                adam_step(params, grads, state)
            except NonFiniteGradient as exc:
                record.stopped = f"non-finite gradient in {exc} at epoch {epoch} step {step}"
                record.wall_clock = time.perf_counter() - t0
                raise TrainingDiverged(record.stopped, record, best) from exc
            n_terms = batch.mask.sum()
            total += loss * n_terms
            count += n_terms
        val_auc = auroc(final_scores(predict(validation, params)), val_y)
        record.epochs.append(EpochStat(epoch, total / count, val_auc))
        if verbose:
            progress("train", fold=fold, epoch=epoch, train_loss=total / count, val_auroc=val_auc)
        if not record.epochs[:-1] or val_auc > record.best_val_auroc:
            record.best_epoch, record.best_val_auroc = epoch, val_auc
            best = copy_params(params)
        elif epoch - record.best_epoch > config.patience:
            record.stopped = "patience"
            break
    else:
        record.stopped = "max_epochs"
    record.wall_clock = time.perf_counter() - t0
    return record, best


def grid_search(train, validation, vocab_size, grid, base=TrainConfig(), fold=0, verbose=False):
    """Train every combination of grid values; best by validation AUROC, ties to fewer parameters.

    `grid` maps TrainConfig field names (e.g. embed_dim, hidden_units,
    dropout) to lists of values.  Returns (best config, best params, records).
    """
    if not grid or any(len(v) == 0 for v in grid.values()):
        raise ConfigError("grid must be non-empty")
    names = sorted(grid)
    runs = []
    for values in itertools.product(*(grid[k] for k in names)):
        cfg = replace(base, **dict(zip(names, values)))
        rec, params = train_fold(train, validation, vocab_size, cfg, fold, verbose)
        runs.append((cfg, rec, params))
    cfg, rec, params = max(runs, key=lambda r: (r[1].best_val_auroc, -r[1].n_params))
    return cfg, params, [r[1] for r in runs]


# -- protocol --------------------------------------------------------------

def _run_fold(args):
    k, train, validation, test, vocab_size, config, grid, verbose = args
    if grid:
        cfg, params, records = grid_search(train, validation, vocab_size, grid, config, k, verbose)
        record = max(records, key=lambda r: (r.best_val_auroc, -r.n_params))
    else:
        cfg = config
        record, params = train_fold(train, validation, vocab_size, config, k, verbose)
        records = [record]
    probs = predict([s.truncated(cfg.horizon) for s in test], params)
    return k, cfg, record, records, params, probs


def run_protocol(stays, plan, vocab_size, config=TrainConfig(), out_dir=None, threads=1, grid=None,
                 vocab_digest="", verbose=False):
    """Train one model per fold and score the shared test set with each.

    `stays` maps stay_id to TokenizedStay.  With `out_dir`, writes
    fold_<k>/{checkpoint.bin, checkpoint.txt, record.json, test_probs.tsv}
    and protocol.json.  Returns a dict with per-fold records and test trajectories.
    """
    test_ids = list(plan.test)
    log = AccessLog(test_ids)
    jobs = []
    for k, (train_ids, val_ids) in enumerate(plan.folds):
        train = list(log.guard((stays[i] for i in train_ids), lambda s: s.stay_id))
        validation = list(log.guard((stays[i] for i in val_ids), lambda s: s.stay_id))
        test = [stays[i] for i in test_ids]
        jobs.append((k, train, validation, test, vocab_size, config, grid, verbose))
    if threads > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=min(threads, len(jobs))) as pool:
            results = list(pool.map(_run_fold, jobs))
    else:
        results = [_run_fold(j) for j in jobs]

    out = Path(out_dir) if out_dir is not None else None
    folds = []
    for k, cfg, record, records, params, probs in results:
        entry = {"fold": k, "config": cfg, "record": record, "records": records, "params": params,
                 "test_probs": probs}
        if out is not None:
            d = out / f"fold_{k}"
            d.mkdir(parents=True, exist_ok=True)
            mcfg = cfg.model_config(vocab_size)
            save_checkpoint(d / "checkpoint.bin", params, mcfg,
                            extra={"fold": k, "best_epoch": record.best_epoch, "seed": cfg.seed})
            record.checkpoint = str(Path(f"fold_{k}") / "checkpoint.bin")
            with atomic_write(d / "checkpoint.txt") as f:
                f.write(f"vocab_sha256 = {vocab_digest}\nseed = {cfg.seed}\nfold = {k}\n"
                        f"best_epoch = {record.best_epoch}\nbest_val_auroc = {record.best_val_auroc!r}\n")
            write_json(d / "record.json", [r.metrics() for r in records] if grid else record.metrics())
            write_json(d / "timing.json", {"wall_clock_seconds": [r.wall_clock for r in records]})
            write_probability_table(d / "test_probs.tsv", test_ids, probs)
        folds.append(entry)
    manifest = {
        "n_folds": len(plan.folds),
        "seed": plan.seed,
        "test_ids_sha256": ids_digest(test_ids),
        "fold_train_ids_sha256": [ids_digest(tr) for tr, _ in plan.folds],
        "fold_validation_ids_sha256": [ids_digest(va) for _, va in plan.folds],
        "test_reads_during_fit": log.test_reads_during_fit,
        "threads": threads,
        "vocab_sha256": vocab_digest,
        "config": asdict(config),
        "grid": grid or {},
    }
    if out is not None:
        write_json(out / "protocol.json", manifest)
    return {"folds": folds, "manifest": manifest, "test_ids": test_ids}
