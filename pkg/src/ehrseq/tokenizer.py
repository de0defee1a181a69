"""Percentile tokenization of heterogeneous event values.

A value that parses as a plain floating point number is continuous and is
replaced by its percentile bin (``"Heart Rate_8"``); anything else is kept
verbatim as a discrete token (``"Code Status Full Code"``).  Missing values map
to the reserved index 0, whose embedding is the zero vector.
"""

import json
import math
import re
from array import array
from bisect import bisect_right
from dataclasses import dataclass, field

import numpy as np

from ._io import DataError, atomic_write, escape_field, require_file, unescape_field

DEFAULT_BINS = 20
QUANTILE_RULE = "nearest-rank"
FORMAT_VERSION = 1

MISSING_TOKEN = "[MISSING]"
UNKNOWN_TOKEN = "[UNKNOWN]"
MISSING_INDEX = 0
UNKNOWN_INDEX = 1

# optional sign, digits with at most one decimal point, optional exponent
_FLOAT_RE = re.compile(r"[+-]?(?:[0-9]+\.?[0-9]*|\.[0-9]+)(?:[eE][+-]?[0-9]+)?\Z")


@dataclass(frozen=True)
class Continuous:
    value: float


@dataclass(frozen=True)
class Discrete:
    text: str


def classify_value(raw):
    """Continuous iff `raw` matches the strict float grammar, else Discrete."""
    if _FLOAT_RE.match(raw):
        x = float(raw)
        if math.isfinite(x):  # "1e999" overflows
            return Continuous(x)
    return Discrete(raw)


def is_missing(raw):
    return raw.strip() == ""


@dataclass(frozen=True)
class BinSpec:
    label: str
    boundaries: tuple
    n_values: int = 0

    @property
    def n_bins(self):
        return len(self.boundaries) + 1

    def bin_index(self, value):
        """Number of boundaries <= value: a value equal to a cut point lands in the upper bin."""
        return bisect_right(self.boundaries, value)


def quantile_ranks(n, n_bins):
    """0-based positions in the sorted sample of the k/P nearest-rank quantiles, k = 1..P-1."""
    k = np.arange(1, n_bins, dtype=np.int64)
    return (k * n + n_bins - 1) // n_bins - 1


def fit_bins(label, values, n_bins=DEFAULT_BINS):
    """Nearest-rank percentile cut points of `values` (training data only)."""
    if n_bins < 2:
        raise ValueError(f"bin count must be >= 2, got {n_bins}")
    vals = np.sort(np.asarray(values, dtype=np.float64))
    if vals.size == 0:
        raise ValueError(f"no values to fit bins for label {label!r}")
    cuts = vals[quantile_ranks(vals.size, n_bins)]
    return BinSpec(label, tuple(float(c) for c in cuts), int(vals.size))


def continuous_values(records):
    """Collect continuous readings per label from cohort records."""
    values = {}
    for rec in records:
        for hour in rec["hours"]:
            for label, raw in hour:
                cls = classify_value(raw)
                if isinstance(cls, Continuous):
                    buf = values.get(label)
                    if buf is None:
                        buf = values[label] = array("d")
                    buf.append(cls.value)
    return values


def fit_all_bins(records, n_bins=DEFAULT_BINS):
    """Fit one BinSpec per continuous label; labels are independent of each other."""
    if n_bins < 2:
        raise ValueError(f"bin count must be >= 2, got {n_bins}")
    values = continuous_values(records)
    return {label: fit_bins(label, values[label], n_bins) for label in sorted(values)}


def tokenize_event(label, raw, bins):
    """Token text for one (label, value) pair."""
    if is_missing(raw):
        return MISSING_TOKEN
    cls = classify_value(raw)
    if isinstance(cls, Continuous):
        spec = bins.get(label)
        if spec is None:
            return UNKNOWN_TOKEN
        return f"{label}_{spec.bin_index(cls.value)}"
    return f"{label} {raw}"


@dataclass
class Vocab:
    tokens: list = field(default_factory=lambda: [MISSING_TOKEN, UNKNOWN_TOKEN])
    index: dict = field(default_factory=lambda: {MISSING_TOKEN: MISSING_INDEX, UNKNOWN_TOKEN: UNKNOWN_INDEX})

    def __len__(self):
        return len(self.tokens)

    def add(self, token):
        idx = self.index.get(token)
        if idx is None:
            idx = self.index[token] = len(self.tokens)
            self.tokens.append(token)
        return idx

    def lookup(self, token):
        return self.index.get(token, UNKNOWN_INDEX)


def build_vocab(tokens):
    """Vocabulary in first-occurrence order over a training token stream."""
    vocab = Vocab()
    for tok in tokens:
        vocab.add(tok)
    return vocab


def record_tokens(records, bins):
    for rec in records:
        for hour in rec["hours"]:
            for label, raw in hour:
                yield tokenize_event(label, raw, bins)


@dataclass
class TokenizedStay:
    stay_id: str
    mortality: int  # 1 = died in hospital
    hours: list
    n_hours: int

    def truncated(self, n):
        return TokenizedStay(self.stay_id, self.mortality, self.hours[:n], min(self.n_hours, n))


def encode_stay(record, vocab, bins):
    """Map every event of a cohort record to its vocabulary index; unseen tokens become 1."""
    hours = []
    for hour in record["hours"]:
        hours.append([vocab.lookup(tokenize_event(label, raw, bins)) for label, raw in hour])
    return TokenizedStay(record["stay_id"], int(record["mortality"]), hours, int(record["n_hours"]))


def decode_stay(stay, vocab):
    return [[vocab.tokens[i] for i in hour] for hour in stay.hours]


# -- persistence -----------------------------------------------------------

def _header(kind, n_bins, **extra):
    parts = [f"# ehrseq-{kind}", f"version={FORMAT_VERSION}", f"bins={n_bins}", f"rule={QUANTILE_RULE}"]
    parts += [f"{k}={v}" for k, v in extra.items()]
    return "\t".join(parts) + "\n"


def _parse_header(line, kind):
    parts = line.rstrip("\n").split("\t")
    if not parts or parts[0] != f"# ehrseq-{kind}":
        raise DataError(f"not an ehrseq {kind} file")
    meta = dict(p.split("=", 1) for p in parts[1:])
    if int(meta.get("version", -1)) != FORMAT_VERSION:
        raise DataError(f"unsupported {kind} file version {meta.get('version')}")
    return meta


def save_bins(path, bins, n_bins):
    with atomic_write(path) as f:
        f.write(_header("bins", n_bins, labels=len(bins)))
        for label in sorted(bins):
            spec = bins[label]
            cells = [escape_field(label), str(spec.n_values)] + [repr(b) for b in spec.boundaries]
            f.write("\t".join(cells) + "\n")


def load_bins(path):
    """Returns (bins by label, bin count)."""
    with open(require_file(path), encoding="utf-8") as f:
        meta = _parse_header(f.readline(), "bins")
        bins = {}
        for line in f:
            cells = line.rstrip("\n").split("\t")
            label = unescape_field(cells[0])
            bins[label] = BinSpec(label, tuple(float(c) for c in cells[2:]), int(cells[1]))
    return bins, int(meta["bins"])


def save_vocab(path, vocab, n_bins):
    with atomic_write(path) as f:
        f.write(_header("vocab", n_bins, size=len(vocab)))
        for i, tok in enumerate(vocab.tokens):
            f.write(f"{i}\t{escape_field(tok)}\n")


def load_vocab(path):
    with open(require_file(path), encoding="utf-8") as f:
        _parse_header(f.readline(), "vocab")
        vocab = Vocab(tokens=[], index={})
        for line in f:
            i, tok = line.rstrip("\n").split("\t", 1)
            tok = unescape_field(tok)
            if int(i) != len(vocab.tokens):
                raise DataError(f"vocab indices out of order at {i}")
            vocab.tokens.append(tok)
            vocab.index[tok] = int(i)
    if vocab.tokens[:2] != [MISSING_TOKEN, UNKNOWN_TOKEN]:
        raise DataError("vocab file lacks reserved tokens")
    return vocab


def write_encoded(path, stays):
    with atomic_write(path) as f:
        for s in stays:
            f.write(json.dumps({"stay_id": s.stay_id, "mortality": s.mortality,
                                "n_hours": s.n_hours, "hours": s.hours}, separators=(",", ":")))
            f.write("\n")


def read_encoded(path):
    out = []
    with open(require_file(path), encoding="utf-8") as f:
        for line in f:
            if line.strip():
                d = json.loads(line)
                out.append(TokenizedStay(d["stay_id"], d["mortality"], d["hours"], d["n_hours"]))
    return out
