"""Synthetic ICU cohorts with a planted, analytically tractable mortality signal.

Each stay draws its outcome first.  Hourly event counts and label choices do
not depend on the outcome; only event *values* do (Gaussian shifts for
continuous labels, different category odds for discrete ones).  Events are
independent given the outcome, so the Bayes posterior after any hour is the
prior log-odds plus a sum of per-event log-likelihood ratios.  That posterior
is written to a ground-truth sidecar and bounds what any model can achieve.
"""

import csv
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy.special import expit

from ._io import atomic_write
from .evaluate import auroc, write_table
from .ingest import format_timestamp

_START = 4102444800  # 2100-01-01 00:00:00
_P_MIN = np.nextafter(0.0, 1.0)
_P_MAX = np.nextafter(1.0, 0.0)


@dataclass(frozen=True)
class ContinuousLabel:
    name: str
    mean: float
    sd: float
    shift: float = 0.0          # mean shift for deaths, in SDs
    decimals: int = 0
    weight: float = 1.0         # relative event frequency
    missing_rate: float = 0.0
    artifact_rate: float = 0.0  # impossible readings, same rate for both outcomes
    artifact_values: tuple = ()

    def llr(self, v, scale=1.0):
        """log p(v | died) - log p(v | survived)."""
        d = self.shift * scale
        z = (v - self.mean) / self.sd
        return d * z - 0.5 * d ** 2


@dataclass(frozen=True)
class DiscreteLabel:
    name: str
    categories: tuple
    probs_survived: tuple
    probs_died: tuple | None = None
    weight: float = 1.0
    missing_rate: float = 0.0

    def died_probs(self, scale=1.0):
        """Category odds for deaths with the log-odds ratio to survivors multiplied by `scale`."""
        ps = np.asarray(self.probs_survived, dtype=np.float64)
        ps = ps / ps.sum()
        if self.probs_died is None:
            return ps
        pd_ = np.asarray(self.probs_died, dtype=np.float64)
        q = ps * (pd_ / pd_.sum() / ps) ** scale
        return q / q.sum()

    def llr_table(self, scale=1.0):
        ps = np.asarray(self.probs_survived, dtype=np.float64)
        return np.log(self.died_probs(scale)) - np.log(ps / ps.sum())


def default_labels():
    """Label universe: a few informative vitals/labs/assessments among many uninformative ones."""
    signal = (
        ContinuousLabel("Heart Rate", 86, 16, shift=0.30, weight=5.0),
        ContinuousLabel("Respiratory Rate", 19, 5, shift=0.35, weight=4.0),
        ContinuousLabel("SpO2", 96, 2.5, shift=-0.30, weight=4.0, missing_rate=0.02),
        ContinuousLabel("NBP [Diastolic]", 62, 13, shift=-0.25, weight=2.5),
        ContinuousLabel("Lactate", 2.0, 1.2, shift=0.8, decimals=1, weight=0.3),
        ContinuousLabel("BUN", 25, 14, shift=0.6, weight=0.3),
        ContinuousLabel("PH", 7.38, 0.07, shift=-0.4, decimals=2, weight=0.4,
                        artifact_rate=0.06, artifact_values=(5.5, 6.0, 0.0)),
        DiscreteLabel("Eye Opening", ("4 Spontaneously", "3 To speech", "2 To pain", "1 No Response"),
                      (0.62, 0.22, 0.10, 0.06), (0.30, 0.24, 0.20, 0.26), weight=0.8),
        DiscreteLabel("Ectopy Type", ("None", "PVC's", "Bigeminy"),
                      (0.82, 0.14, 0.04), (0.62, 0.24, 0.14), weight=0.5),
    )
    noise = (
        ContinuousLabel("Temperature C", 37.0, 0.7, decimals=1, weight=2.0),
        ContinuousLabel("Temperature F", 98.6, 1.2, decimals=1, weight=1.0),
        ContinuousLabel("NBP [Systolic]", 118, 20, weight=2.5),
        ContinuousLabel("CVP", 10, 4, weight=1.0, missing_rate=0.05),
        ContinuousLabel("Urine Out Foley", 120, 70, weight=1.5),
        ContinuousLabel("Glucose", 135, 40, weight=0.8),
        ContinuousLabel("Sodium", 139, 4, weight=0.4),
        ContinuousLabel("Potassium", 4.1, 0.5, decimals=1, weight=0.4),
        ContinuousLabel("Hemoglobin", 10.5, 1.8, decimals=1, weight=0.4),
        ContinuousLabel("Platelets", 210, 90, weight=0.3),
        ContinuousLabel("WBC", 11, 5, decimals=1, weight=0.3),
        ContinuousLabel("Creatinine", 1.3, 0.9, decimals=1, weight=0.3),
        ContinuousLabel("FiO2", 45, 15, weight=1.0),
        DiscreteLabel("Code Status", ("Full Code",), (1.0,), weight=0.3),
        DiscreteLabel("Service", ("MICU", "SICU", "CME", "CSURG"), (0.4, 0.3, 0.15, 0.15), weight=0.2),
        DiscreteLabel("Allergy 1", ("No Known Drug Allergies", "Penicillins", "Sulfa"),
                      (0.7, 0.2, 0.1), weight=0.2),
        DiscreteLabel("Pain Management", ("[Route/Status #2] IV Gtt", "PO", "None"),
                      (0.3, 0.3, 0.4), weight=0.6),
        DiscreteLabel("Side Rails", ("2 Rails Up", "4 Rails Up", "None"), (0.5, 0.3, 0.2), weight=1.2),
        DiscreteLabel("Skin Color", ("Normal", "Pale", "Jaundiced"), (0.8, 0.15, 0.05), weight=0.8),
        DiscreteLabel("Heart Rhythm", ("SR (Sinus Rhythm)", "ST (Sinus Tachycardia)", "AF (Atrial Fibrillation)"),
                      (0.6, 0.25, 0.15), weight=2.0),
    )
    filler = tuple(
        ContinuousLabel(f"Chart Item {k:02d}", 50 + 3 * k, 5 + k % 7, decimals=k % 3, weight=0.25)
        for k in range(1, 21)
    )
    return signal + noise + filler


@dataclass(frozen=True)
class GeneratorConfig:
    n_stays: int = 2000
    horizon: int = 48
    base_rate: float = 0.132
    seed: int = 0
    # mean events per hour: rate_end + (rate_start - rate_end) * exp(-t / rate_decay_hours)
    rate_start: float = 48.0
    rate_end: float = 27.0
    rate_decay_hours: float = 10.0
    short_stay_fraction: float = 0.15
    min_stay_hours: int = 6
    labels: tuple = field(default_factory=default_labels)
    # link coefficient: multiplies every continuous shift and discrete log-odds ratio (0 = no signal)
    signal_scale: float = 1.0
    # leakage: an end-of-life order recorded mostly for stays that die
    tautology: bool = False
    tautology_label: str = "Code Status"
    tautology_value: str = "Comfort Measures Only"
    tautology_rate_died: float = 0.95
    tautology_rate_survived: float = 0.02
    # extra stays that the ingest exclusions must remove
    n_minors: int = 0
    n_undocumented: int = 0
    # severity-score baselines: class-conditional normals, clipped at 0
    oasis: tuple = (30.0, 5.0, 8.0)     # survivor mean, death shift, sd
    sapsii: tuple = (32.0, 9.5, 13.0)

    def errors(self):
        errs = []
        if self.n_stays < 1:
            errs.append("n_stays must be positive")
        if self.horizon < 1:
            errs.append("horizon must be positive")
        if not 0.0 < self.base_rate < 1.0:
            errs.append("base_rate must be in (0, 1)")
        if self.rate_start <= 0 or self.rate_end <= 0:
            errs.append("event rates must be positive")
        return errs

    def rate(self, hour):
        return self.rate_end + (self.rate_start - self.rate_end) * np.exp(-np.asarray(hour) / self.rate_decay_hours)

    def noise_only(self):
        """Same event process with every outcome dependence removed."""
        return replace(self, signal_scale=0.0, tautology=False, oasis=(self.oasis[0], 0.0, self.oasis[2]),
                       sapsii=(self.sapsii[0], 0.0, self.sapsii[2]))


@dataclass
class SynthStay:
    stay_id: str
    patient_id: str
    intime: int
    outtime: int
    age: float
    mortality: str      # "1", "0" or "" (undocumented)
    died: bool
    n_hours: int           # observed hours within the horizon
    log_odds: np.ndarray   # posterior log-odds of death after 0..horizon hours
    oasis: float
    sapsii: float
    events: list        # (label, value, time) tuples, time-ordered

    @property
    def oracle(self):
        """Posterior P(death) after 0..horizon hours, kept strictly inside (0, 1)."""
        return np.clip(expit(self.log_odds), _P_MIN, _P_MAX)

    @property
    def latent_risk(self):
        """Log-odds of death given everything generated for the stay."""
        return float(self.log_odds[-1])


@dataclass
class Cohort:
    config: GeneratorConfig
    stays: list

    @property
    def labels(self):
        return np.array([s.died for s in self.stays], dtype=bool)

    def oracle_at(self, hour):
        return np.array([s.oracle[hour] for s in self.stays])

    def log_odds_at(self, hour):
        return np.array([s.log_odds[hour] for s in self.stays])


class _LabelTable:
    """Per-label parameters as arrays so a whole stay is drawn in a few vector operations."""

    def __init__(self, labels, scale=1.0):
        n = len(labels)
        w = np.array([lb.weight for lb in labels], dtype=np.float64)
        self.weights = w / w.sum()
        self.continuous = np.array([isinstance(lb, ContinuousLabel) for lb in labels])
        self.missing = np.array([lb.missing_rate for lb in labels])
        self.mean = np.zeros(n)
        self.sd = np.ones(n)
        self.shift = np.zeros(n)
        self.artifact = np.zeros(n)
        width = max([len(lb.categories) for lb in labels if not isinstance(lb, ContinuousLabel)] or [1])
        self.cum = np.ones((2, n, width))   # [survived, died] cumulative category probabilities
        self.llr = np.zeros((n, width))
        for i, lb in enumerate(labels):
            if isinstance(lb, ContinuousLabel):
                self.mean[i], self.sd[i], self.shift[i] = lb.mean, lb.sd, lb.shift * scale
                self.artifact[i] = lb.artifact_rate
            else:
                k = len(lb.categories)
                ps = np.asarray(lb.probs_survived, dtype=np.float64)
                self.cum[0, i, :k] = np.cumsum(ps / ps.sum())
                self.cum[1, i, :k] = np.cumsum(lb.died_probs(scale))
                self.cum[:, i, k - 1:] = 1.0
                self.llr[i, :k] = lb.llr_table(scale)


def _render_values(labels, which, kind, v, cat, pick):
    out = []
    for j in range(which.size):
        lb = labels[which[j]]
        if kind[j] == 0:
            out.append("")
        elif kind[j] == 1:
            out.append(f"{v[j]:.{lb.decimals}f}")
        elif kind[j] == 2:
            out.append(f"{lb.artifact_values[pick[j]]:.{lb.decimals}f}")
        else:
            out.append(lb.categories[cat[j]])
    return out


def _generate_stay(cfg, i, render, table):
    rng = np.random.default_rng([cfg.seed, i])
    died = bool(rng.random() < cfg.base_rate)
    horizon = cfg.horizon
    if rng.random() < cfg.short_stay_fraction and horizon > cfg.min_stay_hours:
        n_hours = int(rng.integers(cfg.min_stay_hours, horizon))
        los_s = n_hours * 3600 - int(rng.integers(1, 1800))
    else:
        n_hours = horizon
        los_s = horizon * 3600 + int(rng.exponential(72 * 3600))
    intime = _START + int(rng.integers(0, 100 * 365 * 86400))
    age = float(np.clip(rng.normal(65.8, 16.0), 18.0, 99.0))

    counts = rng.poisson(cfg.rate(np.arange(n_hours)))
    hour_of = np.repeat(np.arange(n_hours), counts)
    k = hour_of.size
    lo = hour_of * 3600
    hi = np.minimum(lo + 3600, los_s)
    offsets = rng.integers(lo, hi)
    which = rng.choice(len(cfg.labels), size=k, p=table.weights)
    u_missing = rng.random(k)
    u_value = rng.random(k)
    z = rng.standard_normal(k)

    missing = u_missing < table.missing[which]
    cont = table.continuous[which] & ~missing
    artifact = cont & (u_value < table.artifact[which])
    real = cont & ~artifact
    disc = ~table.continuous[which] & ~missing
    shift = table.shift[which]
    v = table.mean[which] + table.sd[which] * (z + (shift if died else 0.0))
    llr = np.where(real, shift * z + (shift ** 2 if died else 0.0) - 0.5 * shift ** 2, 0.0)
    cat = (u_value[:, None] >= table.cum[int(died), which]).sum(axis=1)
    cat = np.minimum(cat, table.cum.shape[2] - 1)
    llr = llr + np.where(disc, table.llr[which, cat], 0.0)
    llr_hour = np.bincount(hour_of, weights=llr, minlength=horizon)[:horizon]

    events = []
    if cfg.tautology:
        q1, q0 = cfg.tautology_rate_died, cfg.tautology_rate_survived
        present = rng.random(n_hours) < (q1 if died else q0)
        when = rng.integers(np.arange(n_hours) * 3600, np.minimum(np.arange(n_hours) * 3600 + 3600, los_s))
        llr_hour[:n_hours] += np.where(present, math.log(q1 / q0), math.log((1 - q1) / (1 - q0)))
        if render:
            events = [(cfg.tautology_label, cfg.tautology_value, intime + int(t)) for t in when[present]]
    if render:
        kind = np.where(missing, 0, np.where(artifact, 2, np.where(real, 1, 3)))
        n_art = np.array([len(cfg.labels[w].artifact_values) if table.continuous[w] else 1 for w in range(len(cfg.labels))])
        rate = np.where(table.artifact[which] > 0, table.artifact[which], 1.0)
        pick = np.minimum((u_value / rate * n_art[which]).astype(np.int64), n_art[which] - 1)
        values = _render_values(cfg.labels, which, kind, v, cat, pick)
        names = [lb.name for lb in cfg.labels]
        events += [(names[w], val, intime + int(t)) for w, val, t in zip(which.tolist(), values, offsets.tolist())]
        events.sort(key=lambda e: e[2])

    prior = math.log(cfg.base_rate / (1.0 - cfg.base_rate))
    log_odds = prior + np.r_[0.0, np.cumsum(llr_hour)]
    mu, sh, sd = cfg.oasis
    oasis = float(max(0.0, round(rng.normal(mu + (sh if died else 0.0), sd))))
    mu, sh, sd = cfg.sapsii
    saps = float(max(0.0, round(rng.normal(mu + (sh if died else 0.0), sd))))
    return SynthStay(
        stay_id=str(200000 + i), patient_id=str(10000 + int(i * 0.85)),
        intime=intime, outtime=intime + los_s, age=round(age, 1),
        mortality="1" if died else "0", died=died, n_hours=n_hours, log_odds=log_odds,
        oasis=oasis, sapsii=saps, events=events,
    )


def generate_cohort(config=GeneratorConfig(), render=True):
    """Generate every stay; with ``render=False`` only outcomes and oracle scores are produced."""
    errs = config.errors()
    if errs:
        raise ValueError("; ".join(errs))
    table = _LabelTable(config.labels, config.signal_scale)
    stays = [_generate_stay(config, i, render, table) for i in range(config.n_stays)]
    extra_rng = np.random.default_rng([config.seed, 2 ** 32 - 1])
    base = config.n_stays
    for j in range(config.n_minors + config.n_undocumented):
        s = _generate_stay(config, base + j, render, table)
        if j < config.n_minors:
            s.age = float(round(extra_rng.uniform(1.0, 17.9), 1))
        else:
            s.mortality = ""
        stays.append(s)
    return Cohort(config, stays)


def bayes_auroc(cohort, at_hour, stay_ids=None):
    """AUROC of the Bayes posterior after `at_hour` hours (0 = before any event).

    `cohort` may be a Cohort or a GeneratorConfig (generated without rendering).
    """
    if isinstance(cohort, GeneratorConfig):
        cohort = generate_cohort(cohort, render=False)
    stays = [s for s in cohort.stays if s.mortality in ("0", "1")]
    if stay_ids is not None:
        wanted = set(stay_ids)
        stays = [s for s in stays if s.stay_id in wanted]
    # log-odds rank like the posterior but never saturate into ties
    scores = [s.log_odds[min(at_hour, cohort.config.horizon)] for s in stays]
    return auroc(scores, [s.died for s in stays])


def write_cohort_tables(cohort, out_dir):
    """Write events.csv, stays.csv and truth.tsv in the ingest input formats."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with atomic_write(out / "events.csv", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["ICUSTAY_ID", "LABEL", "VALUE", "CHARTTIME"])
        for s in cohort.stays:
            sid = s.stay_id
            w.writerows((sid, label, value, format_timestamp(t)) for label, value, t in s.events)
    with atomic_write(out / "stays.csv", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["ICUSTAY_ID", "SUBJECT_ID", "INTIME", "OUTTIME", "AGE", "MORTALITY", "OASIS", "SAPSII"])
        for s in cohort.stays:
            w.writerow([s.stay_id, s.patient_id, format_timestamp(s.intime), format_timestamp(s.outtime),
                        repr(s.age), s.mortality, repr(s.oasis), repr(s.sapsii)])
    rows = ((s.stay_id, int(s.died), s.latent_risk, h, float(s.log_odds[h]), float(p))
            for s in cohort.stays for h, p in enumerate(s.oracle))
    write_table(out / "truth.tsv",
                ("stay_id", "mortality", "latent_risk", "hour", "oracle_log_odds", "oracle_probability"), rows)
    return out
