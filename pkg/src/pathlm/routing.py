"""Coarse document routing: prefix features, generative routers (k-means and
product k-means), the discriminative router with bias calibration, shard
construction with optional top-2 overlap, and the alternating
train/rescore/refit loop.

Routing happens offline: every document gets a feature from its token prefix,
routers score paths from that feature, and top-scoring paths define shards.
Ties always break toward the lowest index so sharding is reproducible
byte-for-byte.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .datagen import Corpus
from .model import LmConfig, hidden_features, token_logprobs
from .tree import ParamTree

log = logging.getLogger(__name__)

DEFAULT_PREFIX_LEN = 32
DEFAULT_ROUTER_DATA_FRAC = 0.005


# ---------------------------------------------------------------------------
# prefix features
# ---------------------------------------------------------------------------


def extract_prefix_feature(
    tokens: np.ndarray,
    base_params: ParamTree,
    cfg: LmConfig,
    prefix_len: int = DEFAULT_PREFIX_LEN,
    normed: bool = False,
) -> np.ndarray:
    """Mean of the last-block hidden states over the first prefix_len tokens."""
    tokens = np.asarray(tokens)
    if tokens.shape[-1] < prefix_len:
        raise ValueError(f"sequence of length {tokens.shape[-1]} shorter than prefix {prefix_len}")
    feats = hidden_features(tokens[:prefix_len], base_params, cfg, normed=normed)
    return feats.mean(axis=0)


def corpus_features(
    corpus: Corpus,
    base_params: ParamTree,
    cfg: LmConfig,
    prefix_len: int = DEFAULT_PREFIX_LEN,
    normed: bool = False,
) -> np.ndarray:
    """Prefix feature matrix [n_docs, D]."""
    return np.stack(
        [extract_prefix_feature(seq, base_params, cfg, prefix_len, normed) for seq in corpus.sequences]
    )


# ---------------------------------------------------------------------------
# k-means
# ---------------------------------------------------------------------------


@dataclass
class Centroids:
    centers: np.ndarray  # [k, D]

    @property
    def k(self) -> int:
        return self.centers.shape[0]


def _sq_dists(x: np.ndarray, centers: np.ndarray) -> np.ndarray:
    diff = x[:, None, :] - centers[None, :, :]
    return np.einsum("nkd,nkd->nk", diff, diff)


def _kmeanspp_init(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = x.shape[0]
    centers = np.empty((k, x.shape[1]))
    centers[0] = x[rng.integers(n)]
    d2 = ((x - centers[0]) ** 2).sum(axis=1)
    for i in range(1, k):
        total = d2.sum()
        if total <= 0:
            centers[i] = x[rng.integers(n)]
            continue
        centers[i] = x[rng.choice(n, p=d2 / total)]
        d2 = np.minimum(d2, ((x - centers[i]) ** 2).sum(axis=1))
    return centers


def kmeans_fit(
    features: np.ndarray,
    k: int,
    iters: int = 50,
    seed: int = 0,
    trace: list[float] | None = None,
) -> Centroids:
    """Lloyd's algorithm with k-means++ init.

    Empty clusters are repaired by reseeding the centroid to the point
    farthest from its assigned centroid (never stealing a cluster's last
    point, so repair always terminates with every cluster populated). If a
    list is passed as trace, the objective after each assignment step is
    appended to it.
    """
    x = np.asarray(features, dtype=np.float64)
    n = x.shape[0]
    if n < k:
        raise ValueError(f"{n} points cannot seed {k} clusters")
    rng = np.random.default_rng(seed)
    centers = _kmeanspp_init(x, k, rng)
    for _ in range(iters):
        d2 = _sq_dists(x, centers)
        assign = d2.argmin(axis=1)
        if trace is not None:
            trace.append(float(d2[np.arange(n), assign].sum()))
        while True:
            counts = np.bincount(assign, minlength=k)
            empties = np.flatnonzero(counts == 0)
            if empties.size == 0:
                break
            c = int(empties[0])
            cur = d2[np.arange(n), assign].copy()
            cur[counts[assign] < 2] = -1.0
            worst = int(cur.argmax())
            centers[c] = x[worst]
            d2[:, c] = ((x - centers[c]) ** 2).sum(axis=1)
            assign[worst] = c
        new_centers = np.vstack([x[assign == c].mean(axis=0) for c in range(k)])
        if np.array_equal(new_centers, centers):
            break
        centers = new_centers
    return Centroids(centers=centers)


def kmeans_objective(features: np.ndarray, centroids: Centroids) -> float:
    d2 = _sq_dists(np.asarray(features), centroids.centers)
    return float(d2.min(axis=1).sum())


def kmeans_assign(z: np.ndarray, centroids: Centroids) -> int:
    """Index of the nearest centroid; ties break to the lowest index."""
    d2 = ((centroids.centers - z) ** 2).sum(axis=1)
    return int(d2.argmin())


def product_kmeans_fit(
    features: np.ndarray, k: int, iters: int = 50, seed: int = 0
) -> tuple[Centroids, Centroids]:
    """Independent k-means on the two halves of the feature vector."""
    x = np.asarray(features)
    if x.shape[1] % 2 != 0:
        raise ValueError("feature dimension must be even for the product router")
    half = x.shape[1] // 2
    c1 = kmeans_fit(x[:, :half], k, iters, seed)
    c2 = kmeans_fit(x[:, half:], k, iters, seed + 1)
    return c1, c2


def product_kmeans_assign(
    z: np.ndarray, centroids_half1: Centroids, centroids_half2: Centroids
) -> tuple[tuple[int, int], int]:
    """Per-half assignments (i, j) plus the flat pair id i * k2 + j."""
    if z.shape[0] % 2 != 0:
        raise ValueError("feature dimension must be even for the product router")
    half = z.shape[0] // 2
    i = kmeans_assign(z[:half], centroids_half1)
    j = kmeans_assign(z[half:], centroids_half2)
    return (i, j), i * centroids_half2.k + j


# ---------------------------------------------------------------------------
# routers: anything with scores(z) -> per-path score vector (higher = better)
# ---------------------------------------------------------------------------


@dataclass
class KMeansRouter:
    centroids: Centroids

    @property
    def n_paths(self) -> int:
        return self.centroids.k

    def scores(self, z: np.ndarray, doc_index: int | None = None, position: int | None = None) -> np.ndarray:
        return -((self.centroids.centers - z) ** 2).sum(axis=1)


@dataclass
class ProductKMeansRouter:
    half1: Centroids
    half2: Centroids

    @property
    def n_paths(self) -> int:
        return self.half1.k * self.half2.k

    def scores(self, z: np.ndarray, doc_index: int | None = None, position: int | None = None) -> np.ndarray:
        half = z.shape[0] // 2
        d1 = ((self.half1.centers - z[:half]) ** 2).sum(axis=1)
        d2 = ((self.half2.centers - z[half:]) ** 2).sum(axis=1)
        return -(d1[:, None] + d2[None, :]).reshape(-1)


@dataclass
class ConstantRouter:
    """Always picks the same path; the dense/single-path degenerate router."""

    path: int = 0
    n_paths: int = 1

    def scores(self, z: np.ndarray, doc_index: int | None = None, position: int | None = None) -> np.ndarray:
        s = np.zeros(self.n_paths)
        s[self.path] = 1.0
        return s


@dataclass
class LinearRouter:
    weight: np.ndarray  # [P, D]
    bias: np.ndarray  # [P]

    def __post_init__(self):
        if self.weight.shape[0] != self.bias.shape[0]:
            raise ValueError("weight and bias disagree on path count")

    @property
    def n_paths(self) -> int:
        return self.weight.shape[0]

    def scores(self, z: np.ndarray, doc_index: int | None = None, position: int | None = None) -> np.ndarray:
        return self.weight @ z + self.bias

    def logits_batch(self, features: np.ndarray) -> np.ndarray:
        return features @ self.weight.T + self.bias


def top_n_paths(scores: np.ndarray, n: int) -> list[int]:
    """Indices of the n best scores; ties break to the lowest index."""
    order = np.lexsort((np.arange(scores.shape[0]), -scores))
    return [int(i) for i in order[:n]]


# ---------------------------------------------------------------------------
# path scoring
# ---------------------------------------------------------------------------


@dataclass
class ScoreMatrix:
    """Per-document, per-token, per-path log-likelihoods.

    token_scores[i][j, p] = log p_path_p(token_j | tokens_<j); row 0 is zero.
    doc_sums applies the standard training mask, i.e. sums rows from
    prefix_len on, so doc_sums = -(scored token count) * lm_loss.
    """

    token_scores: list[np.ndarray]
    prefix_len: int

    @property
    def n_docs(self) -> int:
        return len(self.token_scores)

    @property
    def n_paths(self) -> int:
        return self.token_scores[0].shape[1] if self.token_scores else 0

    @property
    def doc_sums(self) -> np.ndarray:
        return np.stack([s[self.prefix_len :].sum(axis=0) for s in self.token_scores])

    def labels(self) -> np.ndarray:
        """Argmax path per document; ties break to the lowest index."""
        return self.doc_sums.argmax(axis=1)


def score_paths(
    documents: Sequence[np.ndarray],
    path_params: Sequence[ParamTree],
    cfg: LmConfig,
    prefix_len: int = DEFAULT_PREFIX_LEN,
) -> ScoreMatrix:
    """Score every document under every path (deterministic merge order:
    documents outer, paths inner)."""
    token_scores = []
    for seq in documents:
        per_path = np.zeros((len(seq), len(path_params)))
        for p, params in enumerate(path_params):
            per_path[:, p] = token_logprobs(seq, params, cfg)
        token_scores.append(per_path)
    return ScoreMatrix(token_scores=token_scores, prefix_len=prefix_len)


# ---------------------------------------------------------------------------
# discriminative router
# ---------------------------------------------------------------------------


def _softmax_rows(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def fit_multinomial(
    features: np.ndarray,
    labels: np.ndarray,
    n_classes: int,
    l2: float = 1e-4,
    tol: float = 1e-6,
    max_iter: int = 5000,
) -> LinearRouter:
    """Multinomial logistic regression by full-batch gradient descent.

    Features are standardized internally (the scaling is folded back into
    the returned weights, so the router consumes raw features); the step
    size is 1/L for the standard smoothness bound of the softmax loss, and
    iteration stops when the gradient norm falls under tol.
    """
    x_raw = np.asarray(features, dtype=np.float64)
    y = np.asarray(labels, dtype=np.int64)
    n, d = x_raw.shape
    mu = x_raw.mean(axis=0)
    sd = x_raw.std(axis=0)
    sd = np.where(sd < 1e-8, 1.0, sd)
    x = (x_raw - mu) / sd
    onehot = np.zeros((n, n_classes))
    onehot[np.arange(n), y] = 1.0
    w = np.zeros((n_classes, d))
    b = np.zeros(n_classes)
    smax = np.linalg.norm(x, 2)
    lip = 0.5 * (smax**2 + n) / n + l2  # +n accounts for the bias column
    lr = 1.0 / lip
    for _ in range(max_iter):
        p = _softmax_rows(x @ w.T + b)
        err = (p - onehot) / n
        gw = err.T @ x + l2 * w
        gb = err.sum(axis=0)
        gnorm = np.sqrt((gw**2).sum() + (gb**2).sum())
        if gnorm < tol:
            break
        w -= lr * gw
        b -= lr * gb
    w_raw = w / sd
    b_raw = b - w_raw @ mu
    return LinearRouter(weight=w_raw, bias=b_raw)


def total_variation(p: np.ndarray, q: np.ndarray) -> float:
    return 0.5 * float(np.abs(p - q).sum())


def predicted_marginal(router: LinearRouter, features: np.ndarray) -> np.ndarray:
    """Mean softmax probability per path over the given features."""
    return _softmax_rows(router.logits_batch(features)).mean(axis=0)


def calibrate_bias(
    router: LinearRouter,
    features: np.ndarray,
    target_dist: np.ndarray,
    tol: float = 1e-3,
    max_iter: int = 200,
) -> LinearRouter:
    """Bias-only iterative proportional adjustment until the predicted
    marginal matches the target within tol total variation."""
    bias = router.bias.copy()
    target = np.asarray(target_dist, dtype=np.float64)
    target = target / target.sum()
    for _ in range(max_iter):
        marginal = _softmax_rows(features @ router.weight.T + bias).mean(axis=0)
        if total_variation(marginal, target) < tol:
            break
        bias = bias + np.log(target + 1e-12) - np.log(marginal + 1e-12)
    return LinearRouter(weight=router.weight.copy(), bias=bias)


def fit_discriminative(
    features: np.ndarray,
    score_matrix: ScoreMatrix | np.ndarray,
    target_dist: np.ndarray | None = None,
    l2: float = 1e-4,
    tol: float = 1e-6,
    max_iter: int = 5000,
    calibrate: bool = True,
) -> LinearRouter:
    """Fit the discriminative router on router-data features.

    Labels are the top-scoring path per document (ties to the lowest index).
    A bias-only calibration pass then matches the predicted marginal to
    target_dist (default: the empirical label distribution).
    """
    doc_sums = score_matrix.doc_sums if isinstance(score_matrix, ScoreMatrix) else np.asarray(score_matrix)
    if doc_sums.shape[0] != np.asarray(features).shape[0]:
        raise ValueError("features and scores must cover the same documents")
    n_classes = doc_sums.shape[1]
    labels = doc_sums.argmax(axis=1)
    counts = np.bincount(labels, minlength=n_classes)
    empty = np.flatnonzero(counts == 0)
    if empty.size:
        log.warning("paths %s received no top-score labels", empty.tolist())
    router = fit_multinomial(features, labels, n_classes, l2=l2, tol=tol, max_iter=max_iter)
    if calibrate:
        if target_dist is None:
            target_dist = np.maximum(counts, 1e-12) / max(counts.sum(), 1)
        router = calibrate_bias(router, features, target_dist)
    return router


# ---------------------------------------------------------------------------
# shards
# ---------------------------------------------------------------------------


@dataclass
class ShardSet:
    n_paths: int
    overlap: int
    train: list[list[int]]  # doc ids per path
    val: list[list[int]]  # doc ids per path
    router_data: list[int]  # global holdout, never trained on

    def shard_sizes(self) -> list[int]:
        return [len(t) for t in self.train]

    def all_train_ids(self) -> set[int]:
        return {i for shard in self.train for i in shard}

    def validate(self, n_docs: int) -> None:
        rd = set(self.router_data)
        if rd & self.all_train_ids():
            raise ValueError("router data leaked into a training shard")
        assigned = sum(len(t) + len(v) for t, v in zip(self.train, self.val))
        routable = n_docs - len(rd)
        if assigned != self.overlap * routable:
            raise ValueError("shard assignment does not cover the corpus overlap times")

    def save(self, path: str | Path) -> None:
        """Newline-delimited records: doc id, split tag, path id(s)."""
        with open(path, "w") as f:
            f.write(f"# paths={self.n_paths} overlap={self.overlap}\n")
            for i in self.router_data:
                f.write(f"{i}\trouter\t-\n")
            for p in range(self.n_paths):
                for i in self.train[p]:
                    f.write(f"{i}\ttrain\t{p}\n")
                for i in self.val[p]:
                    f.write(f"{i}\tval\t{p}\n")

    @classmethod
    def load(cls, path: str | Path) -> "ShardSet":
        with open(path) as f:
            header = f.readline().strip()
            if not header.startswith("# paths="):
                raise ValueError("not a shard file")
            meta = dict(kv.split("=") for kv in header[2:].split())
            n_paths, overlap = int(meta["paths"]), int(meta["overlap"])
            out = cls(
                n_paths=n_paths,
                overlap=overlap,
                train=[[] for _ in range(n_paths)],
                val=[[] for _ in range(n_paths)],
                router_data=[],
            )
            for line in f:
                doc, tag, pid = line.split()
                if tag == "router":
                    out.router_data.append(int(doc))
                elif tag == "train":
                    out.train[int(pid)].append(int(doc))
                elif tag == "val":
                    out.val[int(pid)].append(int(doc))
                else:
                    raise ValueError(f"unknown split tag {tag!r}")
        return out


def pick_router_data(n_docs: int, frac: float, seed: int) -> list[int]:
    rng = np.random.default_rng(np.random.SeedSequence((seed, 733)))
    n_router = int(round(frac * n_docs))
    perm = rng.permutation(n_docs)
    return sorted(int(i) for i in perm[:n_router])


def shard_dataset(
    score_fn: Callable[[int, np.ndarray], np.ndarray],
    corpus: Corpus,
    overlap_n: int = 1,
    router_data_frac: float = DEFAULT_ROUTER_DATA_FRAC,
    val_frac: float = 0.1,
    seed: int = 0,
    router_data: list[int] | None = None,
) -> ShardSet:
    """Assign each document to its top-overlap_n paths and carve per-shard
    validation splits.

    score_fn(doc_index, tokens) returns per-path scores, higher better: the
    negated distance for generative routers, logits for the discriminative
    one. Router data is reserved before assignment and never trained on.
    """
    if overlap_n < 1:
        raise ValueError("overlap must be at least 1")
    n_docs = len(corpus.sequences)
    if router_data is None:
        router_data = pick_router_data(n_docs, router_data_frac, seed)
    router_set = set(router_data)
    n_paths: int | None = None
    assigned: list[list[int]] = []
    for i, seq in enumerate(corpus.sequences):
        if i in router_set:
            continue
        scores = np.asarray(score_fn(i, seq), dtype=np.float64)
        if n_paths is None:
            n_paths = scores.shape[0]
            assigned = [[] for _ in range(n_paths)]
        for p in top_n_paths(scores, overlap_n):
            assigned[p].append(i)
    if n_paths is None:
        raise ValueError("corpus has no routable documents")
    train: list[list[int]] = []
    val: list[list[int]] = []
    for p in range(n_paths):
        ids = assigned[p]
        rng = np.random.default_rng(np.random.SeedSequence((seed, 547, p)))
        n_val = int(round(val_frac * len(ids))) if len(ids) > 1 else 0
        perm = rng.permutation(len(ids))
        val_ids = sorted(ids[k] for k in perm[:n_val])
        val_set = set(val_ids)
        train.append([i for i in ids if i not in val_set])
        val.append(val_ids)
    shard_set = ShardSet(
        n_paths=n_paths, overlap=overlap_n, train=train, val=val, router_data=sorted(router_set)
    )
    shard_set.validate(n_docs)
    return shard_set


def router_score_fn(
    router, features: np.ndarray
) -> Callable[[int, np.ndarray], np.ndarray]:
    """Adapt a router plus a precomputed feature matrix to shard_dataset."""

    def fn(doc_index: int, tokens: np.ndarray) -> np.ndarray:
        return router.scores(features[doc_index], doc_index=doc_index)

    return fn


# ---------------------------------------------------------------------------
# router persistence
# ---------------------------------------------------------------------------


def save_router(router, path: str | Path) -> None:
    import json

    if isinstance(router, KMeansRouter):
        obj = {"kind": "kmeans", "centers": router.centroids.centers.tolist()}
    elif isinstance(router, ProductKMeansRouter):
        obj = {
            "kind": "product",
            "half1": router.half1.centers.tolist(),
            "half2": router.half2.centers.tolist(),
        }
    elif isinstance(router, LinearRouter):
        obj = {"kind": "linear", "weight": router.weight.tolist(), "bias": router.bias.tolist()}
    else:
        raise ValueError(f"cannot serialize router of type {type(router).__name__}")
    Path(path).write_text(json.dumps(obj))


def load_router(path: str | Path):
    import json

    obj = json.loads(Path(path).read_text())
    kind = obj["kind"]
    if kind == "kmeans":
        return KMeansRouter(Centroids(np.asarray(obj["centers"], dtype=np.float64)))
    if kind == "product":
        return ProductKMeansRouter(
            Centroids(np.asarray(obj["half1"], dtype=np.float64)),
            Centroids(np.asarray(obj["half2"], dtype=np.float64)),
        )
    if kind == "linear":
        return LinearRouter(
            weight=np.asarray(obj["weight"], dtype=np.float64),
            bias=np.asarray(obj["bias"], dtype=np.float64),
        )
    raise ValueError(f"unknown router kind {kind!r}")


# ---------------------------------------------------------------------------
# alternating discriminative phases
# ---------------------------------------------------------------------------


def alternate_discriminative(
    corpus: Corpus,
    features: np.ndarray,
    initial_router,
    train_fn: Callable[[ShardSet, int], list[ParamTree]],
    cfg: LmConfig,
    rounds: int = 1,
    overlap_n: int = 1,
    router_data_frac: float = DEFAULT_ROUTER_DATA_FRAC,
    val_frac: float = 0.1,
    seed: int = 0,
    prefix_len: int = DEFAULT_PREFIX_LEN,
    target_dist: np.ndarray | None = None,
) -> tuple[list, list[ShardSet]]:
    """EM-style alternation: train paths on the current shards, rescore the
    router data, refit the router, reshard.

    train_fn(shard_set, round_index) returns one trained ParamTree per path.
    Returns the router sequence (generative router first) and the shard sets
    it produced; with rounds=0 the generative sharding is returned untouched.
    """
    router_data = pick_router_data(len(corpus.sequences), router_data_frac, seed)
    routers = [initial_router]
    shards = [
        shard_dataset(
            router_score_fn(initial_router, features),
            corpus,
            overlap_n=overlap_n,
            val_frac=val_frac,
            seed=seed,
            router_data=router_data,
        )
    ]
    for r in range(rounds):
        path_params = train_fn(shards[-1], r)
        router_docs = [corpus.sequences[i] for i in router_data]
        scores = score_paths(router_docs, path_params, cfg, prefix_len=prefix_len)
        router = fit_discriminative(features[router_data], scores, target_dist=target_dist)
        routers.append(router)
        shards.append(
            shard_dataset(
                router_score_fn(router, features),
                corpus,
                overlap_n=overlap_n,
                val_frac=val_frac,
                seed=seed,
                router_data=router_data,
            )
        )
    return routers, shards
