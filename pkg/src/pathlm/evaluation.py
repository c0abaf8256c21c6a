"""Perplexity evaluation with optional per-chunk re-routing.

The first prefix_len tokens of every sequence are never scored; they only
feed the router. With route_every = 0 the path chosen from the prefix scores
the whole remainder. With route_every = W > 0 the remainder is split into
chunks of W tokens: after scoring a chunk, the mean hidden feature of that
chunk (computed under the active path by default, or under the frozen
feature model) is fed back to the router to pick the path for the next
chunk, which may well be the same one.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .model import LmConfig, hidden_features, token_logprobs
from .routing import LinearRouter, fit_multinomial, score_paths
from .tree import ParamTree


@dataclass
class EvalConfig:
    route_every: int = 0  # W; 0 means one decision per sequence
    prefix_len: int = 32
    feature_source: str = "active"  # active | base
    feature_params: ParamTree | None = None  # frozen base model for features
    use_early_stop: bool = False  # informational; caller picks the checkpoints

    def __post_init__(self):
        if self.route_every < 0:
            raise ValueError("route_every must be 0 or >= 1")
        if self.feature_source not in ("active", "base"):
            raise ValueError(f"unknown feature source {self.feature_source!r}")


@dataclass
class EvalReport:
    nll_sums: list[float] = field(default_factory=list)  # per sequence
    token_counts: list[int] = field(default_factory=list)
    path_histogram: dict[int, int] = field(default_factory=dict)  # chunks per path
    route_switches: int = 0

    @property
    def n_sequences(self) -> int:
        return len(self.nll_sums)

    @property
    def total_nll(self) -> float:
        return float(sum(self.nll_sums))

    @property
    def total_tokens(self) -> int:
        return int(sum(self.token_counts))

    @property
    def ppl(self) -> float:
        return float(np.exp(self.total_nll / self.total_tokens))

    def to_json(self) -> str:
        return json.dumps(
            {
                "n_sequences": self.n_sequences,
                "total_nll": self.total_nll,
                "total_tokens": self.total_tokens,
                "ppl": self.ppl,
                "path_histogram": {str(k): v for k, v in sorted(self.path_histogram.items())},
                "route_switches": self.route_switches,
            }
        )

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_json() + "\n")


def _chunk_bounds(t: int, prefix_len: int, w: int) -> list[tuple[int, int]]:
    if w == 0:
        return [(prefix_len, t)]
    return [(s, min(s + w, t)) for s in range(prefix_len, t, w)]


def _mean_feature(tokens: np.ndarray, lo: int, hi: int, params: ParamTree, cfg: LmConfig) -> np.ndarray:
    feats = hidden_features(tokens[:hi], params, cfg)
    return feats[lo:hi].mean(axis=0)


def evaluate(
    path_params: Sequence[ParamTree],
    router,
    dataset: Sequence[np.ndarray],
    cfg: LmConfig,
    eval_cfg: EvalConfig,
    chunk_router=None,
) -> EvalReport:
    """Score a dataset; routers must expose scores(z, doc_index=, position=).

    `router` makes the per-sequence decision from the prefix; mid-sequence
    re-routing decisions use `chunk_router` when given (falling back to
    `router`), so route_every equal to the remaining length reproduces the
    once-per-sequence report exactly whatever the chunk router says.

    Chunk NLLs always condition on the full token history, so splitting a
    sequence into chunks under a fixed path reproduces the whole-sequence
    NLL exactly.
    """
    if getattr(router, "n_paths", len(path_params)) != len(path_params):
        raise ValueError("router path count does not match the path set")
    chunk_router = chunk_router if chunk_router is not None else router
    feature_params = eval_cfg.feature_params
    if feature_params is None and eval_cfg.feature_source == "base":
        raise ValueError("feature_source='base' requires feature_params")
    report = EvalReport()
    for doc_index, tokens in enumerate(dataset):
        tokens = np.asarray(tokens)
        t = tokens.shape[0]
        if t < eval_cfg.prefix_len + 1:
            raise ValueError(
                f"sequence {doc_index} of length {t} too short for prefix {eval_cfg.prefix_len}"
            )
        # the first decision always comes from the prefix feature of the
        # frozen feature model (that is what routers are fitted on); the
        # base model falls back to path 0's parameters if none was given
        prefix_model = feature_params if feature_params is not None else path_params[0]
        z = _mean_feature(tokens, 0, eval_cfg.prefix_len, prefix_model, cfg)
        current = int(np.argmax(router.scores(z, doc_index=doc_index, position=eval_cfg.prefix_len)))
        seq_nll = 0.0
        seq_tokens = 0
        bounds = _chunk_bounds(t, eval_cfg.prefix_len, eval_cfg.route_every)
        for ci, (lo, hi) in enumerate(bounds):
            logprobs = token_logprobs(tokens[:hi], path_params[current], cfg)
            seq_nll -= float(logprobs[lo:hi].sum())
            seq_tokens += hi - lo
            report.path_histogram[current] = report.path_histogram.get(current, 0) + 1
            if ci + 1 < len(bounds):
                src = (
                    path_params[current]
                    if eval_cfg.feature_source == "active"
                    else feature_params
                )
                zc = _mean_feature(tokens, lo, hi, src, cfg)
                nxt = int(np.argmax(chunk_router.scores(zc, doc_index=doc_index, position=hi)))
                if nxt != current:
                    report.route_switches += 1
                current = nxt
        report.nll_sums.append(seq_nll)
        report.token_counts.append(seq_tokens)
    return report


# ---------------------------------------------------------------------------
# chunk router: linear classifier over chunk mean-features, trained against
# windowed suffix-score targets
# ---------------------------------------------------------------------------


def chunk_targets(token_scores: np.ndarray, window: int | None = None) -> np.ndarray:
    """Best path per position from forward-window score sums.

    token_scores[j, p] is the per-token log-likelihood; the target at j is
    argmax_p of the scores summed over positions j .. min(T-1, j+window-1).
    window=None means the window always reaches the end of the sequence.
    """
    t, _ = token_scores.shape
    suffix = np.vstack([np.cumsum(token_scores[::-1], axis=0)[::-1], np.zeros((1, token_scores.shape[1]))])
    if window is None:
        sums = suffix[:-1]
    else:
        if window < 1:
            raise ValueError("window must be >= 1")
        ends = np.minimum(np.arange(t) + window, t)
        sums = suffix[:-1] - suffix[ends]
    return sums.argmax(axis=1)


def fit_chunk_router(
    router_docs: Sequence[np.ndarray],
    path_params: Sequence[ParamTree],
    cfg: LmConfig,
    prefix_len: int = 32,
    window: int | None = None,
    train_chunk: int = 32,
    feature_params: ParamTree | None = None,
    l2: float = 1e-4,
) -> LinearRouter:
    """Fit the re-routing classifier on held-out router data.

    Training pairs: the mean hidden feature of each chunk (the prefix counts
    as the first chunk), labelled with the best path for the text that
    follows the chunk, where "best" sums per-token path scores over a
    forward window (default: to the end of the sequence).
    """
    if feature_params is None:
        raise ValueError("fit_chunk_router needs the feature model parameters")
    scores = score_paths(router_docs, path_params, cfg, prefix_len=prefix_len)
    feats: list[np.ndarray] = []
    labels: list[int] = []
    for tokens, token_scores in zip(router_docs, scores.token_scores):
        tokens = np.asarray(tokens)
        t = tokens.shape[0]
        targets = chunk_targets(token_scores, window)
        bounds = [(0, prefix_len)] + _chunk_bounds(t, prefix_len, train_chunk)
        for lo, hi in bounds:
            if hi >= t:  # nothing follows this chunk
                continue
            feats.append(_mean_feature(tokens, lo, hi, feature_params, cfg))
            labels.append(int(targets[hi]))
    if not feats:
        raise ValueError("router data produced no training chunks")
    return fit_multinomial(
        np.stack(feats), np.asarray(labels), n_classes=len(path_params), l2=l2
    )
