import numpy as np
import pytest

from ehrseq.ingest import ingest
from ehrseq.model import ModelConfig, init_params
from ehrseq.synth import GeneratorConfig, generate_cohort, write_cohort_tables
from ehrseq.tokenizer import TokenizedStay, build_vocab, encode_stay, fit_all_bins, record_tokens


@pytest.fixture(scope="session")
def small_cohort(tmp_path_factory):
    """120 synthetic stays over 6 hours, written to disk and ingested."""
    cfg = GeneratorConfig(n_stays=120, horizon=6, seed=11, rate_start=12.0, rate_end=6.0)
    cohort = generate_cohort(cfg)
    d = tmp_path_factory.mktemp("small")
    write_cohort_tables(cohort, d)
    records, diag = ingest([d / "events.csv"], d / "stays.csv", horizon_hours=6)
    return {"dir": d, "cohort": cohort, "records": records, "diag": diag, "config": cfg}


@pytest.fixture(scope="session")
def small_encoded(small_cohort):
    records = small_cohort["records"]
    bins = fit_all_bins(records, 20)
    vocab = build_vocab(record_tokens(records, bins))
    stays = [encode_stay(r, vocab, bins) for r in records]
    return {"bins": bins, "vocab": vocab, "stays": stays}


def random_stay(rng, vocab_size, n_hours, max_tokens=6, label=None, missing_rate=0.2):
    hours = []
    for _ in range(n_hours):
        k = int(rng.integers(0, max_tokens + 1))
        ids = rng.integers(2, vocab_size, size=k)
        ids[rng.random(k) < missing_rate] = 0
        hours.append([int(i) for i in ids])
    y = int(rng.integers(0, 2)) if label is None else label
    return TokenizedStay(f"s{int(rng.integers(1e9))}", y, hours, n_hours)


@pytest.fixture
def tiny_model():
    cfg = ModelConfig(vocab_size=20, embed_dim=4, hidden_units=3, horizon=3)
    params = init_params(cfg, 0)
    # non-trivial token weights so softmax paths are exercised
    params["token_weight"] = np.random.default_rng(1).normal(0, 0.5, size=20)
    params["token_weight"][0] = 0.0
    return cfg, params


ACCEPTANCE = []


@pytest.fixture
def acceptance():
    """Record one criterion result: acceptance(number, name, ok, detail)."""
    def record(number, name, ok, detail):
        ACCEPTANCE.append((number, name, bool(ok), detail))
        return ok
    return record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number, name, ok, detail in sorted(ACCEPTANCE):
        terminalreporter.write_line(f"[{'PASS' if ok else 'FAIL'}] {number:>2}. {name}: {detail}")
