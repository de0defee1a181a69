"""Stream raw event tables, link events to ICU stays and bucket them by hour.

The event table only needs four columns (stay id, event label, raw value and
timestamp); their names are configuration.  Every dropped row or event is
counted under a named reason so that totals reconcile exactly::

    rows_read = parsed + rejected_*
    parsed    = bucketed + dropped_*
"""

import csv
import json
import math
import sys
from collections import Counter
from dataclasses import dataclass, field
from datetime import datetime, timedelta
from typing import Iterator, NamedTuple

from ._io import DataError, atomic_write, require_file

_EPOCH = datetime(1970, 1, 1)
SECONDS_PER_HOUR = 3600
DEFAULT_CAP = 10_000

SURVIVED, DIED, UNDOCUMENTED = "survived", "died", "undocumented"


class RowRejected(ValueError):
    """A table row that cannot be turned into an event."""

    def __init__(self, reason, detail=""):
        super().__init__(f"{reason}: {detail}" if detail else reason)
        self.reason = reason


@dataclass(frozen=True, slots=True)
class RawEvent:
    stay_id: str
    label: str
    value: str
    time: int  # seconds since 1970-01-01, naive clock


@dataclass
class StayRecord:
    stay_id: str
    patient_id: str
    intime: int
    age: float
    mortality: str
    outtime: int | None = None
    scores: dict = field(default_factory=dict)
    events: list = field(default_factory=list)


@dataclass
class HourBucket:
    hour_index: int
    events: list


class ColumnIndex(NamedTuple):
    stay_id: int
    label: int
    value: int
    time: int


@dataclass(frozen=True)
class ColumnMap:
    """Names of the event-table columns; defaults follow CHARTEVENTS-style headers."""

    stay_id: str = "ICUSTAY_ID"
    label: str = "LABEL"
    value: str = "VALUE"
    time: str = "CHARTTIME"

    def resolve(self, header):
        names = [h.strip() for h in header]
        missing = [n for n in (self.stay_id, self.label, self.value, self.time) if n not in names]
        if missing:
            raise DataError(f"event table header lacks columns {missing}; header={names}")
        return ColumnIndex(*(names.index(n) for n in (self.stay_id, self.label, self.value, self.time)))


@dataclass(frozen=True)
class StayColumns:
    stay_id: str = "ICUSTAY_ID"
    patient_id: str = "SUBJECT_ID"
    intime: str = "INTIME"
    outtime: str = "OUTTIME"
    age: str = "AGE"
    mortality: str = "MORTALITY"
    scores: tuple = ("OASIS", "SAPSII")


DEFAULT_COLUMNS = ColumnIndex(0, 1, 2, 3)


def parse_timestamp(text):
    """Parse an ISO-like timestamp to integer seconds (fractions truncated)."""
    dt = datetime.fromisoformat(text.strip())
    if dt.tzinfo is not None:
        dt = dt.replace(tzinfo=None) - dt.utcoffset()
    return int((dt - _EPOCH).total_seconds() // 1)


def format_timestamp(seconds):
    return (_EPOCH + timedelta(seconds=seconds)).strftime("%Y-%m-%d %H:%M:%S")


def parse_event_row(row, columns=DEFAULT_COLUMNS, delimiter=","):
    """Turn one delimited record into a RawEvent.

    `row` is either the raw line or its already-split fields.  Stay id, label
    and time are stripped; the value is kept byte-for-byte.
    """
    if isinstance(row, str):
        row = next(csv.reader([row], delimiter=delimiter))
    if len(row) <= max(columns):
        raise RowRejected("short_row", f"{len(row)} fields")
    stay_id = row[columns.stay_id].strip()
    if not stay_id:
        raise RowRejected("missing_stay_id", "cannot be mapped to an ICU stay")
    label = row[columns.label].strip()
    if not label:
        raise RowRejected("missing_label")
    try:
        t = parse_timestamp(row[columns.time])
    except ValueError as exc:
        raise RowRejected("bad_timestamp", str(exc)) from None
    intern = sys.intern
    return RawEvent(intern(stay_id), intern(label), intern(row[columns.value]), t)


class Diagnostics:
    """Counters for every drop reason plus distinct-label counts per stage."""

    def __init__(self):
        self.counts = Counter()
        self.labels = {"parsed": set(), "bucketed": set()}

    def count(self, key, n=1):
        self.counts[key] += n

    def merge(self, other):
        self.counts.update(other.counts)
        for stage, labels in other.labels.items():
            self.labels.setdefault(stage, set()).update(labels)
        return self

    def dropped(self):
        return {k[len("dropped_"):]: v for k, v in self.counts.items() if k.startswith("dropped_")}

    def rejected(self):
        return {k[len("rejected_"):]: v for k, v in self.counts.items() if k.startswith("rejected_")}

    def is_conserved(self):
        c = self.counts
        return (c["parsed"] == c["bucketed"] + sum(self.dropped().values())
                and c["rows_read"] == c["parsed"] + sum(self.rejected().values()))

    def to_text(self):
        lines = [f"{k} = {self.counts[k]}" for k in sorted(self.counts)]
        lines += [f"distinct_labels_{stage} = {len(s)}" for stage, s in sorted(self.labels.items())]
        return "\n".join(lines) + "\n"


def read_events(paths, column_map=ColumnMap(), delimiter=",", diagnostics=None):
    """Yield RawEvents from one or more delimited tables, counting rejected rows."""
    diag = diagnostics if diagnostics is not None else Diagnostics()
    if isinstance(paths, (str, bytes)) or hasattr(paths, "__fspath__"):
        paths = [paths]
    for path in paths:
        path = require_file(path)
        with open(path, newline="", encoding="utf-8") as f:
            reader = csv.reader(f, delimiter=delimiter)
            header = next(reader, None)
            if header is None:
                raise DataError(f"empty event table: {path}")
            cols = column_map.resolve(header)
            for row in reader:
                diag.count("rows_read")
                try:
                    ev = parse_event_row(row, cols)
                except RowRejected as exc:
                    diag.count(f"rejected_{exc.reason}")
                    continue
                diag.count("parsed")
                diag.labels["parsed"].add(ev.label)
                yield ev


def _parse_mortality(text):
    t = text.strip().lower()
    if t in ("1", "1.0", "died", "dead", "true", "yes"):
        return DIED
    if t in ("0", "0.0", "survived", "alive", "false", "no"):
        return SURVIVED
    return UNDOCUMENTED


def _parse_float(text):
    try:
        return float(text)
    except ValueError:
        return math.nan


def read_stays(path, columns=StayColumns(), delimiter=",", diagnostics=None):
    """Read the stays table.  Rows with an unusable id or admission time are counted and skipped."""
    diag = diagnostics if diagnostics is not None else Diagnostics()
    stays = []
    with open(require_file(path), newline="", encoding="utf-8") as f:
        reader = csv.DictReader(f, delimiter=delimiter)
        fields = [h.strip() for h in (reader.fieldnames or [])]
        reader.fieldnames = fields
        for needed in (columns.stay_id, columns.patient_id, columns.intime, columns.age, columns.mortality):
            if needed not in fields:
                raise DataError(f"stays table lacks column {needed!r}; header={fields}")
        for row in reader:
            stay_id = (row[columns.stay_id] or "").strip()
            try:
                intime = parse_timestamp(row[columns.intime] or "")
            except ValueError:
                diag.count("stays_rejected_bad_intime")
                continue
            if not stay_id:
                diag.count("stays_rejected_missing_id")
                continue
            outtime = None
            if row.get(columns.outtime):
                try:
                    outtime = parse_timestamp(row[columns.outtime])
                except ValueError:
                    outtime = None
            scores = {}
            for name in columns.scores:
                if row.get(name, "").strip():
                    scores[name.lower()] = _parse_float(row[name])
            stays.append(StayRecord(
                stay_id=sys.intern(stay_id),
                patient_id=(row[columns.patient_id] or "").strip(),
                intime=intime,
                age=_parse_float(row[columns.age] or ""),
                mortality=_parse_mortality(row[columns.mortality] or ""),
                outtime=outtime,
                scores=scores,
            ))
    diag.count("stays_read", len(stays))
    return stays


def apply_exclusions(stays, diagnostics=None):
    """Keep adult stays (age >= 18) whose in-hospital mortality is documented.

    Retained records are passed through untouched.
    """
    diag = diagnostics if diagnostics is not None else Diagnostics()
    kept = []
    for s in stays:
        if not s.age >= 18:  # also rejects NaN ages
            diag.count("stays_excluded_age")
        elif s.mortality == UNDOCUMENTED:
            diag.count("stays_excluded_mortality_undocumented")
        else:
            kept.append(s)
    diag.count("stays_retained", len(kept))
    return kept


def hour_index(time, intime):
    return (time - intime) // SECONDS_PER_HOUR


def link_and_bucket(events, stays, horizon_hours, diagnostics=None, excluded_ids=()):
    """Attach events to stays and split each stay into `horizon_hours` hourly buckets.

    Events are kept in time order with ties in input order.  Drops are
    counted as ``dropped_<reason>``.
    """
    if horizon_hours < 1:
        raise ValueError("horizon_hours must be >= 1")
    diag = diagnostics if diagnostics is not None else Diagnostics()
    by_id = {s.stay_id: s for s in stays}
    excluded = set(excluded_ids)
    collected = {sid: [] for sid in by_id}
    horizon_s = horizon_hours * SECONDS_PER_HOUR
    for ev in events:
        stay = by_id.get(ev.stay_id)
        if stay is None:
            diag.count("dropped_excluded_stay" if ev.stay_id in excluded else "dropped_unknown_stay")
            continue
        dt = ev.time - stay.intime
        if dt < 0:
            diag.count("dropped_before_intime")
        elif dt >= horizon_s:
            diag.count("dropped_beyond_horizon")
        elif stay.outtime is not None and ev.time >= stay.outtime:
            diag.count("dropped_after_outtime")
        else:
            collected[ev.stay_id].append(ev)

    out = {}
    for sid, evs in collected.items():
        evs.sort(key=lambda e: e.time)  # stable: ties keep input order
        intime = by_id[sid].intime
        buckets = [HourBucket(h, []) for h in range(horizon_hours)]
        for ev in evs:
            buckets[(ev.time - intime) // SECONDS_PER_HOUR].events.append(ev)
        out[sid] = buckets
    return out


def cap_events(buckets, cap=DEFAULT_CAP, diagnostics=None):
    """Keep only the chronologically last `cap` events of a stay."""
    total = sum(len(b.events) for b in buckets)
    if total <= cap:
        return buckets
    excess = total - cap
    if diagnostics is not None:
        diagnostics.count("dropped_cap", excess)
    out = []
    for b in buckets:
        n = len(b.events)
        if excess >= n:
            out.append(HourBucket(b.hour_index, []))
            excess -= n
        else:
            out.append(HourBucket(b.hour_index, b.events[excess:]))
            excess = 0
    return out


def observed_hours(stay, buckets, horizon_hours):
    """Hours of the horizon during which the stay was in the ICU."""
    if stay.outtime is not None:
        n = math.ceil((stay.outtime - stay.intime) / SECONDS_PER_HOUR)
    else:
        n = max((b.hour_index + 1 for b in buckets if b.events), default=1)
    return int(min(max(n, 1), horizon_hours))


def cohort_record(stay, buckets, horizon_hours):
    """Tokenizer-ready record for one stay.

    Field order: stay_id, patient_id, intime, age, mortality (1 = died),
    n_hours, scores, hours (one list of [label, value] pairs per hour).
    """
    return {
        "stay_id": stay.stay_id,
        "patient_id": stay.patient_id,
        "intime": format_timestamp(stay.intime),
        "age": stay.age,
        "mortality": 1 if stay.mortality == DIED else 0,
        "n_hours": observed_hours(stay, buckets, horizon_hours),
        "scores": stay.scores,
        "hours": [[[e.label, e.value] for e in b.events] for b in buckets],
    }


def ingest(event_paths, stays_path, horizon_hours=48, cap=DEFAULT_CAP,
           column_map=ColumnMap(), stay_columns=StayColumns(), delimiter=","):
    """Run the full ingest stage; returns (cohort records, diagnostics)."""
    diag = Diagnostics()
    all_stays = read_stays(stays_path, stay_columns, delimiter, diag)
    stays = apply_exclusions(all_stays, diag)
    kept = {s.stay_id for s in stays}
    excluded = {s.stay_id for s in all_stays if s.stay_id not in kept}
    events = read_events(event_paths, column_map, delimiter, diag)
    bucketed = link_and_bucket(events, stays, horizon_hours, diag, excluded)
    records = []
    for stay in stays:
        buckets = cap_events(bucketed[stay.stay_id], cap, diag)
        n = sum(len(b.events) for b in buckets)
        diag.count("bucketed", n)
        for b in buckets:
            diag.labels["bucketed"].update(e.label for e in b.events)
        records.append(cohort_record(stay, buckets, horizon_hours))
    return records, diag


def write_cohort(path, records):
    with atomic_write(path) as f:
        for rec in records:
            f.write(json.dumps(rec, ensure_ascii=False, separators=(",", ":")))
            f.write("\n")


def read_cohort(path) -> Iterator[dict]:
    with open(require_file(path), encoding="utf-8") as f:
        for line in f:
            if line.strip():
                yield json.loads(line)


def write_diagnostics(path, diagnostics):
    with atomic_write(path) as f:
        f.write(diagnostics.to_text())
