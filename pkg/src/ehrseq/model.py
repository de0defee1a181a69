"""Token embeddings -> weighted hourly average -> LSTM -> per-hour mortality head.

Within an hour the embeddings of the observed tokens are averaged with weights
``softmax(w[ids])``, where ``w`` holds one learnt scalar per vocabulary entry.
Index 0 (missing value / padding) has a frozen zero embedding and is left out
of the softmax entirely, so adding index-0 tokens never changes an aggregate.
The aggregate feeds a depth-one LSTM and a sigmoid head emits the probability
of in-hospital death after every hour.

All arrays are float64.  Gradients are computed by hand (backpropagation
through time) and checked against finite differences in the test-suite.
"""

import json
from dataclasses import asdict, dataclass
from typing import NamedTuple

import numpy as np
from scipy.special import expit

from ._io import atomic_write

PARAM_ORDER = ("embedding", "token_weight", "lstm_weight", "lstm_bias", "head_weight", "head_bias")
PROB_CLAMP = 1e-7
AGGREGATION = "softmax"
CHECKPOINT_MAGIC = b"EHRSEQ-CKPT\n"
CHECKPOINT_VERSION = 1

EMBED_DIMS = (16, 32, 48)
HIDDEN_UNITS = (32, 64, 128, 256)


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    embed_dim: int = 32
    hidden_units: int = 64
    dropout: float = 0.0
    horizon: int = 48

    def errors(self):
        errs = []
        for name in ("vocab_size", "embed_dim", "hidden_units", "horizon"):
            if getattr(self, name) < 1:
                errs.append(f"{name} must be positive")
        if not 0.0 <= self.dropout < 1.0:
            errs.append("dropout must be in [0, 1)")
        return errs

    def n_params(self):
        v, d, h = self.vocab_size, self.embed_dim, self.hidden_units
        return v * d + v + 4 * h * (d + h) + 4 * h + h + 1


def init_params(config, seed):
    """Deterministic initial parameters for `config`."""
    rng = np.random.default_rng(seed)
    v, d, h = config.vocab_size, config.embed_dim, config.hidden_units
    embedding = rng.normal(0.0, 0.1, size=(v, d))
    embedding[0] = 0.0
    bound = 1.0 / np.sqrt(h)
    lstm_bias = np.zeros(4 * h)
    lstm_bias[h:2 * h] = 1.0  # forget gate
    return {
        "embedding": embedding,
        "token_weight": np.zeros(v),
        "lstm_weight": rng.uniform(-bound, bound, size=(4 * h, d + h)),
        "lstm_bias": lstm_bias,
        "head_weight": rng.uniform(-bound, bound, size=h),
        "head_bias": np.zeros(1),
    }


def copy_params(params):
    return {k: v.copy() for k, v in params.items()}


# -- batching --------------------------------------------------------------

@dataclass
class Batch:
    """Flattened tokens of several stays.

    ``ids`` excludes index 0 and is sorted by (segment, id); segment
    ``b * n_steps + t`` is hour t of stay b.  ``mask[b, t]`` marks observed hours.
    """

    ids: np.ndarray
    segments: np.ndarray
    mask: np.ndarray
    targets: np.ndarray
    n_steps: int

    @property
    def n_stays(self):
        return self.mask.shape[0]


def make_batch(stays, n_steps=None):
    if n_steps is None:
        n_steps = max((s.n_hours for s in stays), default=1)
    ids, segs = [], []
    mask = np.zeros((len(stays), n_steps))
    for b, s in enumerate(stays):
        n = min(s.n_hours, n_steps)
        mask[b, :n] = 1.0
        base = b * n_steps
        for t, hour in enumerate(s.hours[:n]):
            ids.extend(hour)
            segs.extend([base + t] * len(hour))
    ids = np.asarray(ids, dtype=np.int64)
    segs = np.asarray(segs, dtype=np.int64)
    keep = ids != 0
    ids, segs = ids[keep], segs[keep]
    order = np.lexsort((ids, segs))
    targets = np.array([s.mortality for s in stays], dtype=np.float64)
    return Batch(ids[order], segs[order], mask, targets, n_steps)


def dropout_keep(n, dropout, seed):
    """Per-occurrence keep mask for embedding dropout (whole tokens are dropped)."""
    if dropout <= 0.0 or n == 0:
        return None
    return np.random.default_rng(seed).random(n) >= dropout


# -- aggregation -----------------------------------------------------------

def _aggregate(params, ids, segments, n_segments):
    emb_table = params["embedding"]
    out = np.zeros((n_segments, emb_table.shape[1]))
    if ids.size == 0:
        return out, None
    starts = np.flatnonzero(np.r_[True, segments[1:] != segments[:-1]])
    counts = np.diff(np.r_[starts, ids.size])
    useg = segments[starts]
    logit = params["token_weight"][ids]
    shift = np.repeat(np.maximum.reduceat(logit, starts), counts)
    e = np.exp(logit - shift)
    a = e / np.repeat(np.add.reduceat(e, starts), counts)
    emb = emb_table[ids]
    out[useg] = np.add.reduceat(a[:, None] * emb, starts, axis=0)
    return out, (ids, starts, counts, useg, a, emb)


def _aggregate_backward(params, cache, d_out, grads):
    if cache is None:
        return
    ids, starts, counts, useg, a, emb = cache
    d_seg = np.repeat(d_out[useg], counts, axis=0)
    np.add.at(grads["embedding"], ids, a[:, None] * d_seg)
    da = np.einsum("nd,nd->n", emb, d_seg)
    mean_da = np.repeat(np.add.reduceat(a * da, starts), counts)
    d_logit = a * (da - mean_da)
    grads["token_weight"] += np.bincount(ids, weights=d_logit, minlength=grads["token_weight"].size)


def aggregate_hour(token_ids, params, dropout_mask=None):
    """Softmax-weighted average of the embeddings of one hour's tokens.

    `dropout_mask` (booleans, True = keep) aligns with `token_ids`.  Missing
    tokens, dropped tokens and empty hours contribute nothing.
    """
    ids = np.asarray(token_ids, dtype=np.int64)
    if dropout_mask is not None:
        ids = ids[np.asarray(dropout_mask, dtype=bool)]
    ids = np.sort(ids[ids != 0], kind="stable")
    out, _ = _aggregate(params, ids, np.zeros(ids.size, dtype=np.int64), 1)
    return out[0]


# -- recurrence ------------------------------------------------------------

def _gates(z, h):
    i = expit(z[:, :h])
    f = expit(z[:, h:2 * h])
    g = np.tanh(z[:, 2 * h:3 * h])
    o = expit(z[:, 3 * h:])
    return i, f, g, o


def lstm_step(x, state, params):
    """One LSTM step for a single input vector; returns (h', c')."""
    h_prev, c_prev = state
    hn = params["lstm_bias"].size // 4
    xh = np.concatenate([x, h_prev])[None, :]
    z = xh @ params["lstm_weight"].T + params["lstm_bias"]
    i, f, g, o = _gates(z, hn)
    c = f[0] * c_prev + i[0] * g[0]
    return o[0] * np.tanh(c), c


class ForwardCache(NamedTuple):
    agg: tuple
    xh: np.ndarray
    gates: np.ndarray
    cells: np.ndarray
    hidden: np.ndarray
    probs: np.ndarray


def forward_batch(params, batch, keep=None):
    """Probabilities of shape (n_stays, n_steps) plus the cache for backward."""
    ids, segs = batch.ids, batch.segments
    if keep is not None:
        ids, segs = ids[keep], segs[keep]
    n_b, n_t = batch.mask.shape
    x, agg_cache = _aggregate(params, ids, segs, n_b * n_t)
    x = x.reshape(n_b, n_t, -1)
    d = x.shape[2]
    hn = params["lstm_bias"].size // 4
    w, bias = params["lstm_weight"], params["lstm_bias"]

    xh = np.zeros((n_b, n_t, d + hn))
    gates = np.zeros((n_b, n_t, 4 * hn))
    cells = np.zeros((n_b, n_t + 1, hn))
    hidden = np.zeros((n_b, n_t + 1, hn))
    for t in range(n_t):
        xh[:, t, :d] = x[:, t]
        xh[:, t, d:] = hidden[:, t]
        z = xh[:, t] @ w.T + bias
        i, f, g, o = _gates(z, hn)
        gates[:, t] = np.concatenate([i, f, g, o], axis=1)
        cells[:, t + 1] = f * cells[:, t] + i * g
        hidden[:, t + 1] = o * np.tanh(cells[:, t + 1])
    logits = hidden[:, 1:] @ params["head_weight"] + params["head_bias"][0]
    probs = expit(logits)
    return probs, ForwardCache(agg_cache, xh, gates, cells, hidden, probs)


def bce_terms(probs, targets):
    p = np.clip(probs, PROB_CLAMP, 1.0 - PROB_CLAMP)
    y = np.broadcast_to(np.asarray(targets, dtype=np.float64)[:, None], p.shape)
    return -(y * np.log(p) + (1.0 - y) * np.log1p(-p))


def batch_loss(probs, batch):
    """Mean binary cross-entropy over every observed (stay, hour) term."""
    terms = bce_terms(probs, batch.targets)
    return float((terms * batch.mask).sum() / batch.mask.sum())


def backward_batch(params, batch, cache):
    probs = cache.probs
    n_b, n_t = probs.shape
    hn = params["lstm_bias"].size // 4
    d = cache.xh.shape[2] - hn
    w = params["lstm_weight"]
    grads = {k: np.zeros_like(v) for k, v in params.items()}

    unclamped = (probs > PROB_CLAMP) & (probs < 1.0 - PROB_CLAMP)
    d_logit = (probs - batch.targets[:, None]) * batch.mask * unclamped / batch.mask.sum()
    h_out = cache.hidden[:, 1:]
    grads["head_weight"] = np.einsum("bt,bth->h", d_logit, h_out)
    grads["head_bias"] = np.array([d_logit.sum()])
    d_hidden = d_logit[:, :, None] * params["head_weight"]

    d_x = np.zeros((n_b, n_t, d))
    dh_next = np.zeros((n_b, hn))
    dc_next = np.zeros((n_b, hn))
    for t in reversed(range(n_t)):
        g_t = cache.gates[:, t]
        i, f, g, o = g_t[:, :hn], g_t[:, hn:2 * hn], g_t[:, 2 * hn:3 * hn], g_t[:, 3 * hn:]
        tc = np.tanh(cache.cells[:, t + 1])
        dh = d_hidden[:, t] + dh_next
        dc = dh * o * (1.0 - tc * tc) + dc_next
        dz = np.concatenate([
            dc * g * i * (1.0 - i),
            dc * cache.cells[:, t] * f * (1.0 - f),
            dc * i * (1.0 - g * g),
            dh * tc * o * (1.0 - o),
        ], axis=1)
        dc_next = dc * f
        grads["lstm_weight"] += dz.T @ cache.xh[:, t]
        grads["lstm_bias"] += dz.sum(axis=0)
        dxh = dz @ w
        d_x[:, t] = dxh[:, :d]
        dh_next = dxh[:, d:]

    _aggregate_backward(params, cache.agg, d_x.reshape(n_b * n_t, d), grads)
    grads["embedding"][0] = 0.0
    grads["token_weight"][0] = 0.0
    return grads


def backward(batch, params, seed=None, dropout=0.0):
    """Loss and exact gradients for one batch; dropout uses `seed` for its mask."""
    keep = dropout_keep(batch.ids.size, dropout, seed)
    probs, cache = forward_batch(params, batch, keep)
    return batch_loss(probs, batch), backward_batch(params, batch, cache)


# -- single-stay API -------------------------------------------------------

@dataclass
class Trajectory:
    probs: np.ndarray   # p_1..p_T, one per observed hour
    hidden: np.ndarray  # hidden state after each hour


def forward(stay, params, mode="eval", seed=None, dropout=0.0):
    """Hourly mortality probabilities for one stay (eval mode is deterministic)."""
    if mode not in ("train", "eval"):
        raise ValueError(f"unknown mode {mode!r}")
    batch = make_batch([stay])
    keep = None
    if mode == "train":
        if seed is None:
            raise ValueError("train mode needs a dropout seed")
        keep = dropout_keep(batch.ids.size, dropout, seed)
    probs, cache = forward_batch(params, batch, keep)
    n = stay.n_hours
    return Trajectory(probs[0, :n].copy(), cache.hidden[0, 1:n + 1].copy())


def predict(stays, params, batch_size=256):
    """Eval-mode probabilities for many stays, one array per stay (length n_hours)."""
    out = []
    for i in range(0, len(stays), batch_size):
        chunk = stays[i:i + batch_size]
        probs, _ = forward_batch(params, make_batch(chunk))
        out.extend(probs[b, :s.n_hours].copy() for b, s in enumerate(chunk))
    return out


def loss(trajectories, labels):
    """Mean BCE between every hourly probability and its stay's outcome (1 = death)."""
    total, n = 0.0, 0
    for traj, y in zip(trajectories, labels):
        probs = traj.probs if isinstance(traj, Trajectory) else np.asarray(traj, dtype=np.float64)
        terms = bce_terms(probs[None, :], [y])
        total += terms.sum()
        n += terms.size
    return total / n


class RankedToken(NamedTuple):
    position: int  # index of the occurrence within the hour
    token: int
    weight: float


def rank_hour(token_ids, params):
    """Occurrences of an hour ordered by descending aggregation weight (ties: token index)."""
    ids = np.asarray(token_ids, dtype=np.int64)
    pos = np.flatnonzero(ids != 0)
    if pos.size == 0:
        return []
    logit = params["token_weight"][ids[pos]]
    a = np.exp(logit - logit.max())
    a /= a.sum()
    order = sorted(range(pos.size), key=lambda j: (-a[j], ids[pos[j]], pos[j]))
    return [RankedToken(int(pos[j]), int(ids[pos[j]]), float(a[j])) for j in order]


# -- checkpoints -----------------------------------------------------------

def save_checkpoint(path, params, config, extra=None):
    """Binary checkpoint: magic line, JSON header line, then raw little-endian blocks."""
    blocks = []
    for name in PARAM_ORDER:
        arr = np.ascontiguousarray(params[name], dtype="<f8")
        blocks.append({"name": name, "shape": list(arr.shape), "dtype": "<f8"})
    header = {
        "format_version": CHECKPOINT_VERSION,
        "config": asdict(config),
        "aggregation": AGGREGATION,
        "precision": "float64",
        "blocks": blocks,
    }
    if extra:
        header["extra"] = extra
    with atomic_write(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(json.dumps(header, sort_keys=True).encode() + b"\n")
        for name in PARAM_ORDER:
            f.write(np.ascontiguousarray(params[name], dtype="<f8").tobytes(order="C"))


def load_checkpoint(path):
    """Returns (params, config, header)."""
    with open(path, "rb") as f:
        if f.readline() != CHECKPOINT_MAGIC:
            raise ValueError(f"{path} is not an ehrseq checkpoint")
        header = json.loads(f.readline())
        if header["format_version"] != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {header['format_version']}")
        params = {}
        for blk in header["blocks"]:
            n = int(np.prod(blk["shape"])) if blk["shape"] else 1
            data = np.frombuffer(f.read(8 * n), dtype=blk["dtype"]).astype(np.float64)
            params[blk["name"]] = data.reshape(blk["shape"])
    return params, ModelConfig(**header["config"]), header
