"""ROC analysis, bootstrap intervals, hourly AUROC, calibration and ranked-event reports."""

import json
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.stats import rankdata

from ._io import atomic_write
from .model import forward, rank_hour
from .tokenizer import Continuous, classify_value

CARRY_FORWARD = "carry-forward"
OBSERVED = "observed"


class UndefinedMetric(ValueError):
    """AUROC needs at least one positive and one negative."""


def _as_arrays(scores, labels):
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels)
    if s.shape != y.shape or s.ndim != 1:
        raise ValueError("scores and labels must be 1-d and equally long")
    y = y.astype(bool)
    n_pos = int(y.sum())
    if n_pos == 0 or n_pos == y.size:
        raise UndefinedMetric("auroc is undefined with a single class")
    return s, y


def auroc(scores, labels):
    """Mann-Whitney AUROC: P(score_pos > score_neg) + 0.5 * P(tie); positives are deaths."""
    s, y = _as_arrays(scores, labels)
    _, inv, counts = np.unique(s, return_inverse=True, return_counts=True)
    ends = np.cumsum(counts)
    ranks = (ends - (counts - 1) / 2.0)[inv]
    n1 = int(y.sum())
    n0 = y.size - n1
    u = ranks[y].sum() - n1 * (n1 + 1) / 2.0
    return float(u / (n1 * n0))


@dataclass
class RocResult:
    fpr: np.ndarray
    tpr: np.ndarray
    auroc: float


def roc_curve(scores, labels):
    """ROC points from (0, 0) to (1, 1), one per distinct threshold; area by trapezoids."""
    s, y = _as_arrays(scores, labels)
    order = np.argsort(-s, kind="mergesort")
    s, y = s[order], y[order]
    last = np.r_[np.flatnonzero(np.diff(s)), s.size - 1]
    tp = np.cumsum(y)[last]
    fp = (last + 1) - tp
    tpr = np.r_[0.0, tp / y.sum()]
    fpr = np.r_[0.0, fp / (~y).sum()]
    area = float(np.sum(np.diff(fpr) * (tpr[1:] + tpr[:-1]) / 2.0))
    return RocResult(fpr, tpr, area)


def _rowwise_auroc(s, y):
    ranks = rankdata(s, axis=1)
    n1 = y.sum(axis=1)
    n0 = y.shape[1] - n1
    u = (ranks * y).sum(axis=1) - n1 * (n1 + 1) / 2.0
    return u / (n1 * n0)


def bootstrap_indices(labels, n_resamples, seed):
    """Resample indices (stays with replacement); resample b uses its own stream seeded by (seed, b).

    Resamples holding a single class are redrawn from the same stream.
    Returns (index matrix, number of redraws).
    """
    y = np.asarray(labels).astype(bool)
    n = y.size
    idx = np.empty((n_resamples, n), dtype=np.int64)
    redraws = 0
    for b in range(n_resamples):
        rng = np.random.default_rng([seed, b])
        while True:
            row = rng.integers(0, n, size=n)
            k = y[row].sum()
            if 0 < k < n:
                break
            redraws += 1
        idx[b] = row
    return idx, redraws


@dataclass
class Interval:
    estimate: float
    lo: float
    hi: float
    n_resamples: int
    redraws: int = 0


def _percentiles(stats, level):
    alpha = (1.0 - level) / 2.0
    lo, hi = np.quantile(stats, [alpha, 1.0 - alpha])
    return float(lo), float(hi)


def bootstrap_distribution(score_sets, labels, idx, chunk=1000):
    """AUROC of every resample, averaged over the score sets (e.g. CV folds sharing a test set)."""
    y = np.asarray(labels).astype(bool)
    out = np.zeros(idx.shape[0])
    for start in range(0, idx.shape[0], chunk):
        rows = idx[start:start + chunk]
        yy = y[rows]
        acc = np.zeros(rows.shape[0])
        for s in score_sets:
            acc += _rowwise_auroc(np.asarray(s, dtype=np.float64)[rows], yy)
        out[start:start + chunk] = acc / len(score_sets)
    return out


def bootstrap_ci(scores, labels, n_resamples=10_000, level=0.95, seed=0):
    """Percentile bootstrap interval for the AUROC; deterministic for a given seed."""
    est = auroc(scores, labels)
    idx, redraws = bootstrap_indices(labels, n_resamples, seed)
    stats = bootstrap_distribution([scores], labels, idx)
    lo, hi = _percentiles(stats, level)
    return Interval(est, lo, hi, n_resamples, redraws)


def pooled_bootstrap_ci(score_sets, labels, n_resamples=10_000, level=0.95, seed=0):
    """Interval for the mean AUROC of several models scored on the same stays."""
    est = float(np.mean([auroc(s, labels) for s in score_sets]))
    idx, redraws = bootstrap_indices(labels, n_resamples, seed)
    stats = bootstrap_distribution(score_sets, labels, idx)
    lo, hi = _percentiles(stats, level)
    return Interval(est, lo, hi, n_resamples, redraws)


def scores_at_hour(trajectories, hour, mode=CARRY_FORWARD):
    """Prediction after `hour` hours (1-based) for each stay, plus the mask of stays used.

    In carry-forward mode a stay observed for fewer hours contributes its last
    prediction; in observed mode it is left out.
    """
    vals = np.empty(len(trajectories))
    used = np.zeros(len(trajectories), dtype=bool)
    for i, traj in enumerate(trajectories):
        n = len(traj)
        if n >= hour:
            vals[i], used[i] = traj[hour - 1], True
        elif mode == CARRY_FORWARD and n > 0:
            vals[i], used[i] = traj[n - 1], True
    return vals, used


def final_scores(trajectories):
    return np.array([t[-1] for t in trajectories], dtype=np.float64)


@dataclass
class HourMetric:
    hour: int
    n_stays: int
    auroc: float
    lo: float
    hi: float


def dynamic_auroc(trajectories, labels, horizon=None, mode=CARRY_FORWARD, n_resamples=0,
                  level=0.95, seed=0, diagnostics=None):
    """AUROC of p_t for t = 1..horizon.

    `trajectories` is either one list of per-stay arrays or a list of such lists
    (one per fold, same stays); with several, the point estimate and interval
    are for the fold-averaged AUROC.  Hours with a single class are skipped
    and noted in `diagnostics`.
    """
    labels = np.asarray(labels).astype(bool)
    sets = trajectories if trajectories and isinstance(trajectories[0], (list, tuple)) else [trajectories]
    if horizon is None:
        horizon = max(len(t) for t in sets[0])
    out = []
    for hour in range(1, horizon + 1):
        cols = [scores_at_hour(t, hour, mode) for t in sets]
        used = cols[0][1]
        y = labels[used]
        if y.size == 0 or y.all() or not y.any():
            if diagnostics is not None:
                diagnostics.setdefault("omitted_hours", []).append(hour)
            continue
        score_sets = [c[0][used] for c in cols]
        if n_resamples:
            iv = pooled_bootstrap_ci(score_sets, y, n_resamples, level, seed + hour)
            out.append(HourMetric(hour, int(used.sum()), iv.estimate, iv.lo, iv.hi))
        else:
            est = float(np.mean([auroc(s, y) for s in score_sets]))
            out.append(HourMetric(hour, int(used.sum()), est, est, est))
    return out


@dataclass
class CalibrationPoint:
    mean_predicted: float
    observed_rate: float
    count: int


def calibration_curve(probabilities, labels, n_bins=10):
    """Mean prediction vs observed event rate in equal-width probability bins (empty bins omitted)."""
    if n_bins < 2:
        raise ValueError("calibration needs n_bins >= 2")
    p = np.asarray(probabilities, dtype=np.float64)
    y = np.asarray(labels, dtype=np.float64)
    if np.any((p < 0) | (p > 1)):
        raise ValueError("probabilities must lie in [0, 1]")
    b = np.minimum((p * n_bins).astype(np.int64), n_bins - 1)
    points = []
    for k in range(n_bins):
        sel = b == k
        if sel.any():
            points.append(CalibrationPoint(float(p[sel].mean()), float(y[sel].mean()), int(sel.sum())))
    return points


# -- ranked-event reports --------------------------------------------------

def percentile_band(bin_index, n_bins):
    lo = 100.0 * bin_index / n_bins
    hi = 100.0 * (bin_index + 1) / n_bins
    return f"{lo:g}-{hi:g}%"


@dataclass
class RankedEvent:
    rank: int
    out_of: int
    label: str
    value: str
    band: str | None
    token: int
    weight: float


@dataclass
class HourReport:
    hour: int  # 0-based bucket; the prediction is made at its end
    probability: float
    events: list = field(default_factory=list)


def report_case(record, stay, params, bins, trajectory=None, top=None):
    """Per-hour probability and events ranked by the model's aggregation weights.

    `record` is the cohort record (raw labels and values) and `stay` its
    encoding; continuous values get the percentile band of their bin.
    """
    if trajectory is None:
        trajectory = forward(stay, params).probs
    hours = []
    for t in range(stay.n_hours):
        raw = record["hours"][t]
        ranked = rank_hour(stay.hours[t], params)
        events = []
        for r, item in enumerate(ranked[:top] if top else ranked, start=1):
            label, value = raw[item.position]
            band = None
            cls = classify_value(value)
            if isinstance(cls, Continuous) and label in bins:
                spec = bins[label]
                band = percentile_band(spec.bin_index(cls.value), spec.n_bins)
            events.append(RankedEvent(r, len(ranked), label, value, band, item.token, item.weight))
        hours.append(HourReport(t, float(trajectory[t]), events))
    return hours


def format_rank_table(hour_reports, top=3):
    """Plain-text table with columns Hour, Rank, Event name, Value (percentile)."""
    rows = [("Hour", "Rank", "Event name", "Value (percentile)", "p(death)")]
    for rep in hour_reports:
        span = f"{rep.hour}-{rep.hour + 1}"
        evs = rep.events[:top] if top else rep.events
        if not evs:
            rows.append((span, "-", "(no events)", "", f"{rep.probability:.3f}"))
        for j, ev in enumerate(evs):
            value = f"{ev.value} ({ev.band})" if ev.band else ev.value
            rows.append((span if j == 0 else "", f"{ev.rank}/{ev.out_of}", ev.label, value,
                         f"{rep.probability:.3f}" if j == 0 else ""))
    widths = [max(len(r[c]) for r in rows) for c in range(len(rows[0]))]
    return "\n".join("  ".join(cell.ljust(w) for cell, w in zip(r, widths)).rstrip() for r in rows) + "\n"


# -- serialisation ---------------------------------------------------------

def _jsonable(obj):
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    if hasattr(obj, "__dataclass_fields__"):
        return {k: _jsonable(v) for k, v in asdict(obj).items()}
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    return obj


def write_json(path, obj):
    with atomic_write(path) as f:
        json.dump(_jsonable(obj), f, indent=2, sort_keys=True)
        f.write("\n")


def write_table(path, header, rows):
    with atomic_write(path) as f:
        f.write("\t".join(header) + "\n")
        for row in rows:
            f.write("\t".join(repr(v) if isinstance(v, float) else str(v) for v in row) + "\n")


def write_probability_table(path, stay_ids, trajectories):
    rows = ((sid, t + 1, float(p)) for sid, traj in zip(stay_ids, trajectories) for t, p in enumerate(traj))
    write_table(path, ("stay_id", "hour", "probability"), rows)


def read_probability_table(path):
    """Returns {stay_id: np.ndarray of hourly probabilities}."""
    out = {}
    with open(path, encoding="utf-8") as f:
        next(f)
        for line in f:
            sid, hour, p = line.rstrip("\n").split("\t")
            out.setdefault(sid, []).append((int(hour), float(p)))
    return {sid: np.array([p for _, p in sorted(v)]) for sid, v in out.items()}
