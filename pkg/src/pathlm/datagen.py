"""Deterministic synthetic multi-domain corpus.

Each domain owns a contiguous block of the vocabulary. Sequences begin with a
prefix drawn from a domain-biased token distribution (so domains are
separable from prefixes alone) and continue with a first-order Markov walk
under the domain's transition matrix. A sequence may switch to a different
domain partway through the body, which is what the frequent-re-routing
evaluation exercises. Hidden labels are stored next to the tokens and are
only ever read by test oracles.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np


@dataclass(frozen=True)
class DomainSpec:
    domain_id: int
    transition: np.ndarray  # [V, V], rows sum to 1
    prefix_dist: np.ndarray  # [V]

    def validate(self) -> None:
        t = self.transition
        if t.ndim != 2 or t.shape[0] != t.shape[1]:
            raise ValueError("transition matrix must be square")
        if (t < 0).any() or not np.allclose(t.sum(axis=1), 1.0, atol=1e-9):
            raise ValueError("transition rows must be stochastic")
        if (self.prefix_dist < 0).any() or not np.isclose(self.prefix_dist.sum(), 1.0):
            raise ValueError("prefix distribution must be a distribution")


@dataclass(frozen=True)
class CorpusConfig:
    n_domains: int = 4
    sequences_per_domain: int = 100
    seq_len: int = 64
    vocab_size: int = 64
    seed: int = 0
    switch_prob: float = 0.0
    prefix_len: int = 32
    prefix_bias: float = 0.9  # prefix probability mass on the domain's block
    domain_blend: float = 0.0  # mass of a shared background chain in every domain

    def __post_init__(self):
        if self.vocab_size < 2 * self.n_domains:
            raise ValueError("vocab too small for this many domains")
        if self.seq_len <= self.prefix_len:
            raise ValueError("sequences must extend past the routing prefix")
        if not 0.0 <= self.switch_prob <= 1.0:
            raise ValueError("switch_prob must be a probability")
        if not 0.0 < self.prefix_bias <= 1.0:
            raise ValueError("prefix_bias must be in (0, 1]")
        if not 0.0 <= self.domain_blend < 1.0:
            raise ValueError("domain_blend must be in [0, 1)")


@dataclass
class Corpus:
    sequences: list[np.ndarray]
    labels: list[int]  # starting domain of each sequence
    segments: list[list[tuple[int, int]]] = field(default_factory=list)  # (domain, start)

    def __len__(self) -> int:
        return len(self.sequences)

    def save(self, tokens_path: str | Path, labels_path: str | Path | None = None) -> None:
        with open(tokens_path, "w") as f:
            for seq in self.sequences:
                f.write(" ".join(str(int(t)) for t in seq) + "\n")
        if labels_path is not None:
            with open(labels_path, "w") as f:
                for label, segs in zip(self.labels, self.segments):
                    parts = [str(label)] + [f"{d}@{s}" for d, s in segs]
                    f.write(" ".join(parts) + "\n")

    @classmethod
    def load(cls, tokens_path: str | Path, labels_path: str | Path | None = None) -> "Corpus":
        sequences = []
        with open(tokens_path) as f:
            for line in f:
                line = line.strip()
                if line:
                    sequences.append(np.array([int(t) for t in line.split()], dtype=np.int64))
        labels: list[int] = []
        segments: list[list[tuple[int, int]]] = []
        if labels_path is not None and Path(labels_path).exists():
            with open(labels_path) as f:
                for line in f:
                    parts = line.split()
                    if not parts:
                        continue
                    labels.append(int(parts[0]))
                    segs = []
                    for p in parts[1:]:
                        d, s = p.split("@")
                        segs.append((int(d), int(s)))
                    segments.append(segs)
        else:
            labels = [-1] * len(sequences)
            segments = [[] for _ in sequences]
        return cls(sequences=sequences, labels=labels, segments=segments)


def make_domain_specs(cfg: CorpusConfig) -> list[DomainSpec]:
    """Domain-specific Markov chains over a shared vocabulary.

    Every domain uses the full vocabulary in its body but draws its own
    sparse transition row per context token, so the same context predicts
    conflicting next-token distributions across domains: a single model must
    pay the mixture penalty that a per-domain specialist avoids. Prefixes
    are biased toward a per-domain vocabulary block, which is what makes
    routing from the prefix possible in the first place.
    """
    rng = np.random.default_rng(cfg.seed)
    v, nd = cfg.vocab_size, cfg.n_domains
    block = v // nd
    background = np.vstack([rng.dirichlet(np.full(v, 0.5)) for _ in range(v)])
    specs = []
    for d in range(nd):
        lo, hi = d * block, (d + 1) * block if d < nd - 1 else v
        # alpha 0.05 keeps only a handful of likely successors per context,
        # which a small model can fit well while the cross-domain mixture
        # stays expensive; domain_blend > 0 mixes in a shared background so
        # scoring a sequence under the wrong domain is only mildly worse
        transition = np.vstack([rng.dirichlet(np.full(v, 0.05)) for _ in range(v)])
        if cfg.domain_blend > 0.0:
            transition = (1.0 - cfg.domain_blend) * transition + cfg.domain_blend * background
        prefix = np.full(v, (1.0 - cfg.prefix_bias) / v)
        in_block = rng.dirichlet(np.full(hi - lo, 1.0)) * cfg.prefix_bias
        prefix[lo:hi] += in_block
        prefix = prefix / prefix.sum()
        spec = DomainSpec(domain_id=d, transition=transition, prefix_dist=prefix)
        spec.validate()
        specs.append(spec)
    return specs


def _sample_markov(rng: np.random.Generator, spec: DomainSpec, start: int, n: int) -> np.ndarray:
    out = np.empty(n, dtype=np.int64)
    cur = start
    v = spec.transition.shape[0]
    for i in range(n):
        cur = rng.choice(v, p=spec.transition[cur])
        out[i] = cur
    return out


def generate(cfg: CorpusConfig, specs: list[DomainSpec] | None = None) -> Corpus:
    """Deterministic corpus; returns token sequences plus hidden domain labels."""
    specs = specs or make_domain_specs(cfg)
    if len(specs) != cfg.n_domains:
        raise ValueError("one spec per domain required")
    for s in specs:
        s.validate()
    rng = np.random.default_rng(np.random.SeedSequence((cfg.seed, 9151)))
    sequences, labels, segments = [], [], []
    body = cfg.seq_len - cfg.prefix_len
    for d in range(cfg.n_domains):
        for _ in range(cfg.sequences_per_domain):
            spec = specs[d]
            prefix = rng.choice(cfg.vocab_size, size=cfg.prefix_len, p=spec.prefix_dist)
            segs = [(d, 0)]
            if cfg.n_domains > 1 and rng.random() < cfg.switch_prob:
                # switch somewhere in the middle half of the body
                lo = cfg.prefix_len + body // 4
                hi = cfg.prefix_len + (3 * body) // 4
                switch_at = int(rng.integers(lo, max(hi, lo + 1)))
                others = [x for x in range(cfg.n_domains) if x != d]
                d2 = int(rng.choice(others))
                first = _sample_markov(rng, spec, int(prefix[-1]), switch_at - cfg.prefix_len)
                second = _sample_markov(
                    rng, specs[d2], int(first[-1]) if first.size else int(prefix[-1]), cfg.seq_len - switch_at
                )
                seq = np.concatenate([prefix, first, second])
                segs.append((d2, switch_at))
            else:
                seq = np.concatenate([prefix, _sample_markov(rng, spec, int(prefix[-1]), body)])
            sequences.append(seq)
            labels.append(d)
            segments.append(segs)
    return Corpus(sequences=sequences, labels=labels, segments=segments)


def bayes_prefix_accuracy(corpus: Corpus, specs: list[DomainSpec], prefix_len: int) -> float:
    """Accuracy of the exact Bayes classifier on prefixes; a separability oracle."""
    correct = 0
    logs = [np.log(s.prefix_dist + 1e-12) for s in specs]
    for seq, label in zip(corpus.sequences, corpus.labels):
        scores = [lg[seq[:prefix_len]].sum() for lg in logs]
        if int(np.argmax(scores)) == label:
            correct += 1
    return correct / len(corpus.sequences)
