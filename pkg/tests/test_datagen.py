import numpy as np
import pytest

from pathlm.datagen import (
    Corpus,
    CorpusConfig,
    DomainSpec,
    bayes_prefix_accuracy,
    generate,
    make_domain_specs,
)


def small_cfg(**kw):
    base = dict(n_domains=2, sequences_per_domain=20, seq_len=48, vocab_size=16, seed=11, prefix_len=16)
    base.update(kw)
    return CorpusConfig(**base)


def test_generate_deterministic():
    cfg = small_cfg()
    a, b = generate(cfg), generate(cfg)
    assert all(np.array_equal(x, y) for x, y in zip(a.sequences, b.sequences))
    assert a.labels == b.labels
    c = generate(small_cfg(seed=12))
    assert any(not np.array_equal(x, y) for x, y in zip(a.sequences, c.sequences))


def test_degenerate_transition_rejected():
    cfg = small_cfg()
    specs = make_domain_specs(cfg)
    bad = DomainSpec(0, specs[0].transition * 2.0, specs[0].prefix_dist)
    with pytest.raises(ValueError):
        generate(cfg, [bad, specs[1]])


def test_body_follows_domain_transitions():
    cfg = small_cfg(sequences_per_domain=40)
    specs = make_domain_specs(cfg)
    corpus = generate(cfg, specs)
    # empirical next-token log-likelihood should prefer the true domain
    wins = 0
    for seq, label in zip(corpus.sequences, corpus.labels):
        body = seq[cfg.prefix_len - 1 :]
        scores = []
        for s in specs:
            p = s.transition[body[:-1], body[1:]]
            scores.append(np.log(p + 1e-12).sum())
        wins += int(np.argmax(scores)) == label
    assert wins / len(corpus.sequences) >= 0.95


def test_switch_prob_one_contains_both_regimes():
    cfg = small_cfg(switch_prob=1.0)
    corpus = generate(cfg)
    assert all(len(segs) == 2 for segs in corpus.segments)
    for segs in corpus.segments:
        (d1, s1), (d2, s2) = segs
        assert d1 != d2
        assert cfg.prefix_len <= s2 < cfg.seq_len


def test_switch_prob_zero_single_segment():
    corpus = generate(small_cfg(switch_prob=0.0))
    assert all(len(segs) == 1 for segs in corpus.segments)


def test_bayes_prefix_separability():
    cfg = CorpusConfig(n_domains=4, sequences_per_domain=30, seq_len=64, vocab_size=32, seed=5)
    specs = make_domain_specs(cfg)
    corpus = generate(cfg, specs)
    assert bayes_prefix_accuracy(corpus, specs, cfg.prefix_len) >= 0.9


def test_corpus_roundtrip(tmp_path):
    cfg = small_cfg(switch_prob=0.5)
    corpus = generate(cfg)
    tp, lp = tmp_path / "tokens.txt", tmp_path / "labels.txt"
    corpus.save(tp, lp)
    loaded = Corpus.load(tp, lp)
    assert len(loaded) == len(corpus)
    assert all(np.array_equal(a, b) for a, b in zip(corpus.sequences, loaded.sequences))
    assert loaded.labels == corpus.labels
    assert loaded.segments == corpus.segments


def test_config_validation():
    with pytest.raises(ValueError):
        CorpusConfig(n_domains=8, vocab_size=8)
    with pytest.raises(ValueError):
        CorpusConfig(seq_len=32, prefix_len=32)
    with pytest.raises(ValueError):
        CorpusConfig(switch_prob=1.5)
