"""End-to-end experiment plumbing shared by the CLI and the acceptance suite.

A run directory is self-describing: the resolved config, the corpus, the
pretrained base model, shard assignments, the router, a content-addressed
checkpoint store, the per-path manifest and the metrics stream all live in
it, so every later command (eval, report, resume) needs nothing else.
"""

from __future__ import annotations

import json
import logging
from pathlib import Path

import numpy as np

from . import tree as pt
from .config import corpus_config, lm_config, schedule_for, train_plan
from .datagen import Corpus, generate
from .evaluation import EvalConfig, EvalReport, evaluate, fit_chunk_router
from .harness.store import CheckpointStore, pack_tree, unpack_tree
from .metrics import append_records
from .model import LmConfig, init_params
from .modular import ModularConfig, ModuleKey, ModuleStore, split_levels
from .optim import NesterovState
from .routing import (
    ConstantRouter,
    KMeansRouter,
    LinearRouter,
    ProductKMeansRouter,
    ShardSet,
    corpus_features,
    fit_discriminative,
    kmeans_fit,
    load_router,
    pick_router_data,
    product_kmeans_fit,
    router_score_fn,
    save_router,
    score_paths,
    shard_dataset,
)
from .trainer import TrainPlan, TrainResult, early_stop_select, train_dense, train_dipaco
from .tree import ParamTree

log = logging.getLogger(__name__)

CORPUS_FILE = "corpus.txt"
LABELS_FILE = "labels.txt"
BASE_FILE = "base.ckpt"
SHARDS_FILE = "shards.txt"
ROUTER_FILE = "router.json"
PATHS_FILE = "paths.json"
METRICS_FILE = "metrics.txt"
STATE_FILE = "state.json"
STORE_DIR = "checkpoints"


def save_tree(tree: ParamTree, path: Path) -> None:
    path.write_bytes(pack_tree(tree))


def load_tree(path: Path) -> ParamTree:
    return unpack_tree(path.read_bytes())


# -- stages -------------------------------------------------------------------


def make_data(cfg: dict, out: Path) -> Corpus:
    out.mkdir(parents=True, exist_ok=True)
    corpus = generate(corpus_config(cfg))
    corpus.save(out / CORPUS_FILE, out / LABELS_FILE)
    return corpus


def load_data(out: Path) -> Corpus:
    tokens = out / CORPUS_FILE
    if not tokens.exists():
        raise FileNotFoundError(f"no corpus in {out}; run make-data first")
    return Corpus.load(tokens, out / LABELS_FILE)


def pretrain(cfg: dict, corpus: Corpus, out: Path) -> tuple[ParamTree, TrainResult]:
    """Dense base model used for router features and as path init."""
    out.mkdir(parents=True, exist_ok=True)
    lm = lm_config(cfg)
    p = cfg["pretrain"]
    n_val = max(1, int(round(p["val_frac"] * len(corpus.sequences))))
    val_docs = corpus.sequences[-n_val:]
    train_docs = corpus.sequences[:-n_val]
    plan = TrainPlan(
        outer_steps=max(1, p["steps"] // 50),
        inner_steps=min(50, p["steps"]),
        init=init_params(lm),
        batch_size=p["batch_size"],
        prefix_len=cfg["data"]["prefix_len"],
        schedule=schedule_for(p, p["steps"]),
        weight_decay=cfg["plan"]["weight_decay"],
        seed=cfg["plan"]["seed"] + 77,
    )
    params, result = train_dense(lm, train_docs, val_docs, plan)
    save_tree(params, out / BASE_FILE)
    append_records(out / METRICS_FILE, result.records)
    return params, result


def load_base(out: Path) -> ParamTree:
    base = out / BASE_FILE
    if not base.exists():
        raise FileNotFoundError(f"no base model in {out}; run pretrain first")
    return load_tree(base)


def modular_for_mode(cfg: dict, lm: LmConfig, mode: str, n_paths: int) -> ModularConfig:
    m = cfg["modular"]
    if mode == "dipaco":
        return split_levels(lm, [int(k) for k in m["levels"]],
                            tuple(int(l) for l in m["path_specific"]), m["embed_level"])
    if mode == "flat":
        return split_levels(lm, [n_paths])
    if mode in ("diloco", "dense"):
        return split_levels(lm, [1])
    raise ValueError(f"unknown mode {mode!r}")


def configured_path_count(cfg: dict) -> int:
    m = cfg["modular"]
    p = 1
    for l, k in enumerate(m["levels"], start=1):
        if l not in set(m["path_specific"]):
            p *= int(k)
    return p


def build_router(cfg: dict, corpus: Corpus, base: ParamTree, features: np.ndarray, out: Path):
    """Fit the configured document router (and shards, for discriminative)."""
    r = cfg["routing"]
    lm = lm_config(cfg)
    n_paths = configured_path_count(cfg)
    kind = r["router"]
    if kind == "kmeans":
        return KMeansRouter(kmeans_fit(features, n_paths, iters=r["kmeans_iters"], seed=r["seed"]))
    if kind == "product":
        levels = [int(k) for k in cfg["modular"]["levels"]]
        if len(levels) != 2 or levels[0] != levels[1]:
            raise ValueError("the product router needs a two-level config with equal counts")
        c1, c2 = product_kmeans_fit(features, levels[0], iters=r["kmeans_iters"], seed=r["seed"])
        return ProductKMeansRouter(c1, c2)
    if kind == "discriminative":
        # bootstrap: generative shards, a short training run, then refit
        gen = KMeansRouter(kmeans_fit(features, n_paths, iters=r["kmeans_iters"], seed=r["seed"]))
        shards = build_shards(cfg, gen, features, corpus)
        boot_plan = train_plan(cfg, pt.copy(base))
        boot_plan.outer_steps = int(cfg["routing"]["bootstrap_outer_steps"])
        boot_plan.reshard_at = None
        modular = modular_for_mode(cfg, lm, "dipaco", n_paths)
        store, _ = train_dipaco(lm, modular, corpus, shards, boot_plan)
        paths = [store.materialize(j) for j in range(n_paths)]
        router_docs = [corpus.sequences[i] for i in shards.router_data]
        scores = score_paths(router_docs, paths, lm, prefix_len=cfg["data"]["prefix_len"])
        return fit_discriminative(features[shards.router_data], scores)
    raise ValueError(f"unknown router kind {kind!r}")


def build_shards(cfg: dict, router, features: np.ndarray, corpus: Corpus) -> ShardSet:
    r = cfg["routing"]
    return shard_dataset(
        router_score_fn(router, features),
        corpus,
        overlap_n=r["overlap"],
        router_data_frac=r["router_data_frac"],
        val_frac=r["val_frac"],
        seed=r["seed"],
    )


class DiscriminativeResharder:
    """Reshard callback: score the router data under the current paths,
    refit the linear router, reshard with the same holdout. Keeps the last
    fitted router so the run can persist it for evaluation."""

    def __init__(self, cfg: dict, corpus: Corpus, features: np.ndarray, shards: ShardSet):
        self.lm = lm_config(cfg)
        self.routing_cfg = cfg["routing"]
        self.prefix_len = cfg["data"]["prefix_len"]
        self.features = np.asarray(features)
        self.corpus = corpus
        self.router_data = list(shards.router_data)
        self.router = None

    def __call__(self, store: ModuleStore, current: ShardSet, phase: int) -> ShardSet:
        router_docs = [self.corpus.sequences[i] for i in self.router_data]
        paths = [store.materialize(j) for j in range(store.cfg.n_paths)]
        scores = score_paths(router_docs, paths, self.lm, prefix_len=self.prefix_len)
        self.router = fit_discriminative(self.features[self.router_data], scores)
        return shard_dataset(
            router_score_fn(self.router, self.features),
            self.corpus,
            overlap_n=self.routing_cfg["overlap"],
            val_frac=self.routing_cfg["val_frac"],
            seed=self.routing_cfg["seed"],
            router_data=self.router_data,
        )


def make_resharder(cfg: dict, corpus: Corpus, features: np.ndarray, shards: ShardSet) -> DiscriminativeResharder:
    return DiscriminativeResharder(cfg, corpus, features, shards)


# -- run directory manifest ----------------------------------------------------


def save_run(
    out: Path,
    mode: str,
    store_paths: dict[int, ParamTree],
    best_paths: dict[int, ParamTree],
    best_phases: dict[int, int],
) -> None:
    ckpt = CheckpointStore(out / STORE_DIR)
    manifest = {"mode": mode, "n_paths": len(store_paths), "paths": []}
    for j in sorted(store_paths):
        entry = {"id": j, "final": ckpt.put(store_paths[j])}
        if j in best_paths:
            entry["best"] = ckpt.put(best_paths[j])
            entry["best_phase"] = best_phases.get(j)
        manifest["paths"].append(entry)
    (out / PATHS_FILE).write_text(json.dumps(manifest, indent=1))


def load_run(out: Path, early_stop: bool = False) -> tuple[str, list[ParamTree]]:
    manifest = json.loads((out / PATHS_FILE).read_text())
    ckpt = CheckpointStore(out / STORE_DIR)
    paths = []
    for entry in manifest["paths"]:
        ref = entry.get("best") if early_stop and "best" in entry else entry["final"]
        paths.append(ckpt.get(ref))
    return manifest["mode"], paths


def run_training(cfg: dict, out: Path, mode: str, resume: bool = False) -> TrainResult:
    """The train command: shards must exist (built here if missing)."""
    corpus = load_data(out)
    base = load_base(out)
    lm = lm_config(cfg)
    shards_path = out / SHARDS_FILE
    if shards_path.exists():
        shards = ShardSet.load(shards_path)
    else:
        features = corpus_features(corpus, base, lm, cfg["data"]["prefix_len"])
        router = build_router(cfg, corpus, base, features, out)
        shards = build_shards(cfg, router, features, corpus)
        shards.save(shards_path)
        save_router(router, out / ROUTER_FILE)

    if mode == "dense":
        plan = train_plan(cfg, pt.copy(base))
        train_docs = [corpus.sequences[i] for shard in shards.train for i in shard]
        val_docs = [corpus.sequences[i] for shard in shards.val for i in shard]
        params, result = train_dense(lm, train_docs, val_docs, plan)
        best_phases = {m.path_id: m.phase for m in early_stop_select(result.metas).values()}
        save_run(out, mode, {0: params}, result.best_params, best_phases)
        append_records(out / METRICS_FILE, result.records)
        return result

    modular = modular_for_mode(cfg, lm, mode, shards.n_paths)
    extra = {}
    if mode == "diloco":
        extra["shard_to_path"] = [0] * shards.n_paths
    plan = train_plan(cfg, pt.copy(base), **extra)
    resharder = None
    if plan.reshard_at is not None:
        features = corpus_features(corpus, base, lm, cfg["data"]["prefix_len"])
        resharder = make_resharder(cfg, corpus, features, shards)

    ckpt = CheckpointStore(out / STORE_DIR)
    start_phase, initial_store = 1, None
    state_path = out / STATE_FILE
    if resume and state_path.exists():
        state = json.loads(state_path.read_text())
        start_phase = state["next_phase"]
        initial_store = ModuleStore(modular, plan.outer_lr, plan.outer_momentum)
        for key_s, ref in state["modules"].items():
            key = ModuleKey.parse(key_s)
            blob = ckpt.get(ref)
            theta = {n[6:]: a for n, a in blob.items() if n.startswith("theta/")}
            vel = {n[2:]: a for n, a in blob.items() if n.startswith("v/")}
            initial_store.params[key] = {n: theta[n] for n in modular.names_of_level(key.level)}
            initial_store.opt[key] = NesterovState(
                {n: vel[n] for n in modular.names_of_level(key.level)},
                plan.outer_lr, plan.outer_momentum,
            )
        if state.get("shards") and (out / state["shards"]).exists():
            shards = ShardSet.load(out / state["shards"])
        log.info("resuming at phase %d", start_phase)

    def phase_hook(t: int, store: ModuleStore, current: ShardSet) -> None:
        modules = {}
        for key in modular.module_keys():
            blob = {f"theta/{n}": a for n, a in store.params[key].items()}
            blob.update({f"v/{n}": a for n, a in store.opt[key].velocity.items()})
            modules[str(key)] = ckpt.put(blob)
        shard_file = SHARDS_FILE
        if current is not shards and plan.reshard_at is not None:
            shard_file = f"shards_phase{plan.reshard_at}.txt"
            if not (out / shard_file).exists():
                current.save(out / shard_file)
        state_path.write_text(
            json.dumps({"next_phase": t + 1, "modules": modules, "shards": shard_file})
        )

    store, result = train_dipaco(
        lm, modular, corpus, shards, plan, resharder=resharder,
        start_phase=start_phase, initial_store=initial_store, phase_hook=phase_hook,
    )
    if resharder is not None and resharder.router is not None:
        save_router(resharder.router, out / ROUTER_FILE)  # eval follows the reshard
    finals = {j: store.materialize(j) for j in range(modular.n_paths)}
    if mode == "diloco":
        finals = {0: store.materialize(0)}
    best_phases = {m.path_id: m.phase for m in early_stop_select(result.metas).values()}
    save_run(out, mode, finals, result.best_params, best_phases)
    append_records(out / METRICS_FILE, result.records)
    return result


def run_eval(
    cfg: dict, out: Path, route_every: int, early_stop: bool, report_path: Path | None = None
) -> EvalReport:
    """The eval command: held-out corpus, saved router, optional chunk router."""
    mode, paths = load_run(out, early_stop=early_stop)
    lm = lm_config(cfg)
    base = load_base(out)
    eval_corpus = generate(corpus_config(cfg, eval_corpus=True))
    if mode in ("dense", "diloco") or len(paths) == 1:
        router = ConstantRouter(0, len(paths))
    else:
        router = load_router(out / ROUTER_FILE)
    chunk_router = None
    if route_every > 0 and len(paths) > 1:
        shards = ShardSet.load(out / SHARDS_FILE)
        corpus = load_data(out)
        router_docs = [corpus.sequences[i] for i in shards.router_data]
        if router_docs:
            chunk_router = fit_chunk_router(
                router_docs, paths, lm,
                prefix_len=cfg["data"]["prefix_len"],
                window=cfg["eval"]["chunk_window"],
                train_chunk=cfg["eval"]["train_chunk"],
                feature_params=base,
            )
    eval_cfg = EvalConfig(
        route_every=route_every,
        prefix_len=cfg["data"]["prefix_len"],
        feature_source=cfg["eval"]["feature_source"],
        feature_params=base,
        use_early_stop=early_stop,
    )
    report = evaluate(paths, router, eval_corpus.sequences, lm, eval_cfg, chunk_router=chunk_router)
    if report_path is not None:
        report.save(report_path)
    return report
