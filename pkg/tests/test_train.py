import json

import numpy as np
import pytest

from conftest import random_stay
from ehrseq import train as train_mod
from ehrseq.model import load_checkpoint
from ehrseq.tokenizer import TokenizedStay
from ehrseq.train import (
    AccessLog, ConfigError, SplitPlan, TrainConfig, TrainingDiverged, TrainRunRecord, fit_on_development,
    grid_search, run_protocol, split_data, train_fold,
)


def cohort_pairs(n, rate, seed=0):
    rng = np.random.default_rng(seed)
    return [(f"{100000 + i}", int(rng.random() < rate)) for i in range(n)]


def cue_stays(n, seed, vocab=10, hours=3, shuffle=False):
    """Deaths see token 2 every hour, survivors token 3; the rest is noise."""
    rng = np.random.default_rng(seed)
    out = []
    for i in range(n):
        y = int(rng.random() < 0.3)
        s = random_stay(rng, vocab, hours, max_tokens=3, label=y)
        cue = 2 if y else 3
        hrs = [h + [cue] for h in s.hours]
        if shuffle:
            y = int(rng.random() < 0.3)
        out.append(TokenizedStay(f"{seed}-{i}", y, hrs, hours))
    return out


class TestSplit:
    def test_disjoint_and_sized(self):
        pairs = cohort_pairs(2000, 0.132)
        plan = split_data(pairs, n_folds=10, val_size=100, seed=1)
        test = set(plan.test)
        assert len(test) == 200
        vals = [set(v) for _, v in plan.folds]
        assert all(len(v) == 100 for v in vals)
        assert all(not (a & b) for i, a in enumerate(vals) for b in vals[i + 1:])
        for train, val in plan.folds:
            assert not (set(train) & set(val)) and not (set(train) & test) and not (set(val) & test)
            assert len(train) + len(val) + len(test) == 2000

    def test_stratified(self):
        pairs = cohort_pairs(21_139, 0.132, seed=2)
        y = dict(pairs)
        rate = sum(y.values()) / len(y)
        plan = split_data(pairs, seed=3)
        for _, val in plan.folds:
            assert len(val) == 1000
            assert abs(sum(y[s] for s in val) - 1000 * rate) <= 1
            assert abs(sum(y[s] for s in val) / 1000 - rate) < 0.005
        assert abs(sum(y[s] for s in plan.test) / len(plan.test) - rate) < 0.005

    def test_deterministic(self):
        pairs = cohort_pairs(500, 0.2)
        a = split_data(pairs, n_folds=2, val_size=40, seed=5)
        assert a == split_data(list(reversed(pairs)), n_folds=2, val_size=40, seed=5)
        assert a != split_data(pairs, n_folds=2, val_size=40, seed=6)

    def test_too_small(self):
        with pytest.raises(ConfigError, match="10 x validation"):
            split_data(cohort_pairs(500, 0.2), val_size=100)

    def test_single_class(self):
        with pytest.raises(ConfigError):
            split_data([(str(i), 0) for i in range(100)])

    def test_duplicates(self):
        with pytest.raises(ConfigError):
            split_data([("a", 0), ("a", 1)] + [(str(i), i % 2) for i in range(100)])

    def test_json_roundtrip(self, tmp_path):
        plan = split_data(cohort_pairs(300, 0.3), n_folds=3, val_size=20)
        plan.save(tmp_path / "s.json")
        assert SplitPlan.load(tmp_path / "s.json") == plan


class TestLeakage:
    def test_no_test_reads(self, small_cohort):
        recs = small_cohort["records"]
        plan = split_data([(r["stay_id"], r["mortality"]) for r in recs], n_folds=2, val_size=10)
        _, vocab, log = fit_on_development(recs, plan, 20)
        assert log.test_reads_during_fit == 0 and len(vocab) > 2

    def test_counter_sees_leak(self):
        log = AccessLog(["t1"])
        list(log.guard(["a", "t1", "t1"], key=lambda x: x))
        assert log.test_reads_during_fit == 2


class TestTrainFold:
    cfg = TrainConfig(embed_dim=4, hidden_units=4, horizon=3, batch_size=16, max_epochs=40, lr=0.01)

    def test_learns_cue(self):
        rec, params = train_fold(cue_stays(300, 0), cue_stays(100, 1), 10, self.cfg)
        assert rec.best_val_auroc > 0.95
        assert rec.best_val_auroc == max(e.val_auroc for e in rec.epochs)
        assert [e.epoch for e in rec.epochs] == list(range(1, len(rec.epochs) + 1))

    def test_shuffled_labels_null(self):
        cfg = TrainConfig(embed_dim=4, hidden_units=4, horizon=3, batch_size=64, max_epochs=20)
        rec, params = train_fold(cue_stays(1000, 2, shuffle=True), cue_stays(3000, 3, shuffle=True), 10, cfg)
        final = rec.epochs[rec.best_epoch - 1].val_auroc
        assert 0.45 <= final <= 0.55

    def test_patience_zero(self):
        cfg = TrainConfig(embed_dim=2, hidden_units=2, horizon=3, batch_size=8, patience=0, max_epochs=50)
        rec, _ = train_fold(cue_stays(40, 4, shuffle=True), cue_stays(40, 5, shuffle=True), 10, cfg)
        aucs = [e.val_auroc for e in rec.epochs]
        first_drop = next(i for i in range(1, len(aucs)) if aucs[i] <= max(aucs[:i]))
        assert len(aucs) == first_drop + 1 and rec.stopped == "patience"

    def test_deterministic(self):
        cfg = TrainConfig(embed_dim=3, hidden_units=2, horizon=3, batch_size=8, max_epochs=3, dropout=0.2)
        a, pa = train_fold(cue_stays(30, 6), cue_stays(20, 7), 10, cfg)
        b, pb = train_fold(cue_stays(30, 6), cue_stays(20, 7), 10, cfg)
        assert a.metrics() == b.metrics()
        assert all(np.array_equal(pa[k], pb[k]) for k in pa)

    def test_bad_config(self):
        with pytest.raises(ConfigError):
            train_fold(cue_stays(5, 0), cue_stays(5, 1), 10, TrainConfig(lr=0))

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_diverged(self):
        cfg = TrainConfig(embed_dim=2, hidden_units=2, horizon=3, lr=float("inf"), max_epochs=2)
        with pytest.raises(TrainingDiverged) as exc:
            train_fold(cue_stays(20, 0), cue_stays(20, 1), 10, cfg)
        assert exc.value.record.stopped and exc.value.params is not None


class TestGrid:
    def test_singleton(self):
        cfg = TrainConfig(embed_dim=2, hidden_units=2, horizon=3, max_epochs=1)
        best, _, recs = grid_search(cue_stays(20, 0), cue_stays(20, 1), 10, {"embed_dim": [3]}, cfg)
        assert best.embed_dim == 3 and len(recs) == 1

    def test_run_count(self, monkeypatch):
        calls = []

        def fake(train, val, vocab_size, config, fold=0, verbose=False):
            calls.append(config)
            return TrainRunRecord({}, config.model_config(vocab_size).n_params(), best_val_auroc=0.7), {}
        monkeypatch.setattr(train_mod, "train_fold", fake)
        grid = {"embed_dim": [16, 32, 48], "hidden_units": [32, 64, 128, 256], "dropout": [0.0]}
        grid_search([], [], 10, grid)
        assert len(calls) == 12

    def test_tie_smaller_model(self, monkeypatch):
        def fake(train, val, vocab_size, config, fold=0, verbose=False):
            return TrainRunRecord({}, config.model_config(vocab_size).n_params(), best_val_auroc=0.8), {}
        monkeypatch.setattr(train_mod, "train_fold", fake)
        best, _, _ = grid_search([], [], 10, {"hidden_units": [64, 32, 128]})
        assert best.hidden_units == 32

    def test_empty(self):
        with pytest.raises(ConfigError):
            grid_search([], [], 10, {"embed_dim": []})


class TestProtocol:
    def test_two_fold_smoke(self, tmp_path):
        stays = {s.stay_id: s for s in cue_stays(120, 8)}
        plan = split_data(stays.values(), n_folds=2, val_size=12, seed=0)
        cfg = TrainConfig(embed_dim=3, hidden_units=3, horizon=3, batch_size=16, max_epochs=2)
        out = run_protocol(stays, plan, 10, cfg, tmp_path, vocab_digest="abc")
        man = json.loads((tmp_path / "protocol.json").read_text())
        assert man["test_reads_during_fit"] == 0 and man["n_folds"] == 2 and man["threads"] == 1
        p0, _, h0 = load_checkpoint(tmp_path / "fold_0" / "checkpoint.bin")
        p1, _, _ = load_checkpoint(tmp_path / "fold_1" / "checkpoint.bin")
        assert h0["extra"]["fold"] == 0
        assert not np.array_equal(p0["lstm_weight"], p1["lstm_weight"])
        for f in out["folds"]:
            assert len(f["test_probs"]) == len(plan.test)
            assert all(len(p) == 3 for p in f["test_probs"])
        t0 = (tmp_path / "fold_0" / "test_probs.tsv").read_text().splitlines()
        t1 = (tmp_path / "fold_1" / "test_probs.tsv").read_text().splitlines()
        assert [r.split("\t")[:2] for r in t0] == [r.split("\t")[:2] for r in t1]
        assert "vocab_sha256 = abc" in (tmp_path / "fold_0" / "checkpoint.txt").read_text()
