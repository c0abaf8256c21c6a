import numpy as np
import pytest

from pathlm import tree as pt
from pathlm.datagen import Corpus, CorpusConfig, generate
from pathlm.evaluation import EvalConfig, EvalReport, chunk_targets, evaluate, fit_chunk_router
from pathlm.model import LmConfig, init_params, sequence_nll
from pathlm.optim import LrSchedule
from pathlm.trainer import TrainPlan, run_inner_task

LM = LmConfig(vocab_size=16, seq_len=48, n_blocks=2, hidden_dim=8, n_heads=2, seed=4)
PREFIX = 8


class ConstantRouter:
    def __init__(self, path, n_paths):
        self.path = path
        self.n_paths = n_paths

    def scores(self, z, doc_index=None, position=None):
        s = np.zeros(self.n_paths)
        s[self.path] = 1.0
        return s


class OracleRouter:
    """Routes with the hidden domain segments; used only as a test oracle."""

    def __init__(self, corpus, n_paths):
        self.corpus = corpus
        self.n_paths = n_paths

    def scores(self, z, doc_index=None, position=None):
        domain = 0
        for d, start in self.corpus.segments[doc_index]:
            if position is None or position >= start:
                domain = d
        s = np.zeros(self.n_paths)
        s[domain] = 1.0
        return s


@pytest.fixture(scope="module")
def switch_corpus():
    cfg = CorpusConfig(
        n_domains=2, sequences_per_domain=30, seq_len=48, vocab_size=16, seed=7,
        prefix_len=PREFIX, switch_prob=1.0,
    )
    return generate(cfg)


@pytest.fixture(scope="module")
def domain_paths(switch_corpus):
    """One small model per domain, trained on pure-domain data."""
    pure = generate(
        CorpusConfig(
            n_domains=2, sequences_per_domain=40, seq_len=48, vocab_size=16, seed=8,
            prefix_len=PREFIX, switch_prob=0.0,
        )
    )
    paths = []
    for d in (0, 1):
        docs = [s for s, label in zip(pure.sequences, pure.labels) if label == d]
        plan = TrainPlan(
            outer_steps=1, inner_steps=150, init=init_params(LM), batch_size=8,
            prefix_len=PREFIX, schedule=LrSchedule(kind="constant", peak=3e-3),
            weight_decay=0.0, seed=21,
        )
        params, _ = run_inner_task(LM, plan, pt.copy(plan.init), docs, 1, d)
        paths.append(params)
    return paths


def test_single_chunk_equals_once_per_sequence(domain_paths, switch_corpus):
    docs = switch_corpus.sequences[:6]
    router = ConstantRouter(0, 2)
    full_w = docs[0].shape[0] - PREFIX
    rep0 = evaluate(domain_paths, router, docs, LM, EvalConfig(route_every=0, prefix_len=PREFIX))
    rep1 = evaluate(domain_paths, router, docs, LM, EvalConfig(route_every=full_w, prefix_len=PREFIX))
    assert rep0.nll_sums == rep1.nll_sums
    assert rep0.token_counts == rep1.token_counts
    assert rep0.ppl == rep1.ppl


def test_single_path_ppl_equals_sequence_nll(domain_paths, switch_corpus):
    docs = switch_corpus.sequences[:5]
    router = ConstantRouter(0, 1)
    for w in (0, 16):
        rep = evaluate(domain_paths[:1], router, docs, LM, EvalConfig(route_every=w, prefix_len=PREFIX))
        total, count = 0.0, 0
        for d in docs:
            nll, n = sequence_nll(d, domain_paths[0], LM, PREFIX)
            total += nll
            count += n
        assert np.isclose(rep.ppl, np.exp(total / count))
        assert rep.route_switches == 0  # constant router never switches


def test_chunk_boundary_consistency(domain_paths, switch_corpus):
    docs = switch_corpus.sequences[:4]
    router = ConstantRouter(1, 2)
    rep0 = evaluate(domain_paths, router, docs, LM, EvalConfig(route_every=0, prefix_len=PREFIX))
    rep8 = evaluate(domain_paths, router, docs, LM, EvalConfig(route_every=8, prefix_len=PREFIX))
    assert np.allclose(rep0.nll_sums, rep8.nll_sums)  # same path, full history per chunk


def test_rejects_short_sequences(domain_paths):
    with pytest.raises(ValueError):
        evaluate(domain_paths, ConstantRouter(0, 2), [np.arange(PREFIX)], LM, EvalConfig(prefix_len=PREFIX))


def test_router_path_count_check(domain_paths):
    with pytest.raises(ValueError):
        evaluate(domain_paths, ConstantRouter(0, 5), [np.arange(12)], LM, EvalConfig(prefix_len=PREFIX))


def test_oracle_rerouting_beats_static(domain_paths, switch_corpus):
    # domain-switching sequences: re-routing every 8 tokens with the oracle
    # router must not lose to routing once from the prefix
    docs = switch_corpus.sequences[:20]
    router = OracleRouter(switch_corpus, 2)
    rep_static = evaluate(domain_paths, router, docs, LM, EvalConfig(route_every=0, prefix_len=PREFIX))
    rep_chunked = evaluate(domain_paths, router, docs, LM, EvalConfig(route_every=8, prefix_len=PREFIX))
    assert rep_chunked.ppl <= rep_static.ppl
    assert rep_chunked.route_switches > 0
    assert sum(rep_chunked.path_histogram.values()) == sum((len(d) - PREFIX + 7) // 8 for d in docs)


def test_eval_report_json_roundtrip(domain_paths, switch_corpus):
    rep = evaluate(
        domain_paths, ConstantRouter(0, 2), switch_corpus.sequences[:3], LM,
        EvalConfig(route_every=0, prefix_len=PREFIX),
    )
    import json

    blob = json.loads(rep.to_json())
    assert blob["n_sequences"] == 3
    assert np.isclose(blob["ppl"], rep.ppl)


# -- chunk router -------------------------------------------------------------


def test_chunk_targets_whole_window_is_suffix_argmax(rng):
    s = rng.normal(size=(10, 3))
    targets = chunk_targets(s, window=None)
    for j in range(10):
        assert targets[j] == s[j:].sum(axis=0).argmax()
    big = chunk_targets(s, window=100)
    assert np.array_equal(targets, big)


def test_chunk_targets_single_path():
    s = -np.abs(np.random.default_rng(0).normal(size=(12, 1)))
    assert np.array_equal(chunk_targets(s, None), np.zeros(12, dtype=int))


def test_chunk_targets_brute_force_oracle():
    rng = np.random.default_rng(3)
    for _ in range(100):
        t, p = int(rng.integers(2, 12)), int(rng.integers(1, 5))
        w = int(rng.integers(1, t + 2))
        s = rng.normal(size=(t, p))
        got = chunk_targets(s, w)
        for j in range(t):
            hi = min(t, j + w)
            assert got[j] == s[j:hi].sum(axis=0).argmax()


def test_fit_chunk_router_learns_switches(domain_paths, switch_corpus):
    router_docs = switch_corpus.sequences[40:56]
    feature_model = init_params(LM)
    router = fit_chunk_router(
        router_docs, domain_paths, LM, prefix_len=PREFIX, train_chunk=8,
        feature_params=feature_model,
    )
    assert router.n_paths == 2
    # the fitted router should be usable end to end
    rep = evaluate(
        domain_paths, router, switch_corpus.sequences[:10], LM,
        EvalConfig(route_every=8, prefix_len=PREFIX, feature_source="base", feature_params=feature_model),
    )
    assert np.isfinite(rep.ppl)


def test_fit_chunk_router_requires_features(domain_paths, switch_corpus):
    with pytest.raises(ValueError):
        fit_chunk_router(switch_corpus.sequences[:4], domain_paths, LM, prefix_len=PREFIX)
