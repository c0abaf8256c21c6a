"""Inner/outer training over a modular parameter store.

Each outer step (phase) runs tau inner optimizer steps per shard on a
materialized path, turns the per-module parameter movements into outer
deltas (optionally reweighed by shard size and rescaled by the square root
of the contributor count), and applies a Nesterov outer update per module.
Degenerate configurations recover plain SGD, a reference synchronized-shards
loop, and a fully independent flat mixture; those equivalences are the main
correctness oracles.

Everything is deterministic given the plan seed: per-task RNGs are keyed by
(seed, phase, shard), and module reductions run in ascending shard order, so
the same numbers come out no matter who computes them where or when. The
simulation harness reuses run_inner_task/finalize_outer to inherit that
guarantee.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from . import tree as pt
from .datagen import Corpus
from .metrics import MetricRecord
from .model import LmConfig, batch_loss, sequence_nll
from .modular import ModularConfig, ModuleKey, ModuleStore, decode_path, path_modules
from .optim import AdamWState, LrSchedule, NesterovState, adamw_step, nesterov_outer_step, sgd_step
from .routing import ShardSet
from .tree import ParamTree
from . import autodiff as ad

log = logging.getLogger(__name__)

_PHASE_NS = 101  # rng namespace for inner tasks
_SAMPLE_NS = 17  # rng namespace for per-phase path subsampling


def rng_for(*key: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(tuple(int(k) for k in key)))


@dataclass
class TrainPlan:
    outer_steps: int
    inner_steps: int
    init: ParamTree
    batch_size: int = 8
    prefix_len: int = 32
    inner_optimizer: str = "adamw"  # adamw | sgd
    schedule: LrSchedule = field(default_factory=LrSchedule)
    beta1: float = 0.9
    beta2: float = 0.99
    eps: float = 1e-8
    weight_decay: float = 0.1
    outer_lr: float = 0.7
    outer_momentum: float = 0.9
    reweigh: bool = False
    rescale: bool = False
    early_stop: bool = False
    reshard_at: int | None = None
    path_sample_frac: float = 1.0
    active_shards: list[int] | None = None  # fixed subset; overrides sampling
    shard_to_path: list[int] | None = None  # defaults to identity
    seed: int = 0

    def __post_init__(self):
        if self.outer_steps < 1 or self.inner_steps < 1:
            raise ValueError("outer_steps and inner_steps must be >= 1")
        if self.inner_optimizer not in ("adamw", "sgd"):
            raise ValueError(f"unknown inner optimizer {self.inner_optimizer!r}")
        if not 0.0 < self.path_sample_frac <= 1.0:
            raise ValueError("path_sample_frac must be in (0, 1]")


@dataclass
class SgdOpt:
    schedule: LrSchedule
    step: int = 0


@dataclass
class OuterDelta:
    key: ModuleKey
    delta: ParamTree
    contributors: int
    shard_sizes: list[int]


@dataclass(frozen=True)
class PathCheckpointMeta:
    path_id: int
    phase: int
    val_loss: float


@dataclass
class TrainResult:
    records: list[MetricRecord]
    metas: list[PathCheckpointMeta]
    best_params: dict[int, ParamTree]  # shard id -> early-stop candidate
    final_params: dict[int, ParamTree]  # shard id -> last inner-phase output
    shard_set: ShardSet | None = None

    def selected_params(self, early_stop: bool) -> dict[int, ParamTree]:
        return self.best_params if early_stop else self.final_params


def make_inner_state(plan: TrainPlan, params: ParamTree) -> AdamWState | SgdOpt:
    if plan.inner_optimizer == "adamw":
        return AdamWState.init(
            params,
            plan.schedule,
            beta1=plan.beta1,
            beta2=plan.beta2,
            eps=plan.eps,
            weight_decay=plan.weight_decay,
        )
    return SgdOpt(schedule=plan.schedule)


def _apply_inner(params, grads, state, step_offset):
    if isinstance(state, AdamWState):
        return adamw_step(params, grads, state, step_offset)
    lr = state.schedule.value(step_offset + state.step)
    return sgd_step(params, grads, lr), replace(state, step=state.step + 1)


def inner_phase(
    path_params: ParamTree,
    shard_docs: Sequence[np.ndarray],
    tau: int,
    state: AdamWState | SgdOpt,
    rng: np.random.Generator,
    cfg: LmConfig,
    batch_size: int,
    prefix_len: int,
    step_offset: int = 0,
) -> tuple[ParamTree, AdamWState | SgdOpt, list[float]]:
    """tau optimizer steps on batches sampled (with replacement) from the
    shard. Deterministic given the rng state."""
    if tau < 1:
        raise ValueError("tau must be >= 1")
    if len(shard_docs) == 0:
        raise ValueError("empty shard")
    params = path_params
    trace: list[float] = []
    for _ in range(tau):
        idx = rng.integers(0, len(shard_docs), size=batch_size)
        batch = np.stack([shard_docs[i] for i in idx])
        ptensors = ad.wrap_params(params)
        loss = batch_loss(batch, ptensors, cfg, prefix_len)
        grads = ad.param_grads(loss, ptensors)
        params, state = _apply_inner(params, grads, state, step_offset)
        trace.append(loss.item())
    return params, state, trace


def run_inner_task(
    lm_cfg: LmConfig,
    plan: TrainPlan,
    path_params: ParamTree,
    shard_docs: Sequence[np.ndarray],
    phase: int,
    shard_id: int,
) -> tuple[ParamTree, list[float]]:
    """The canonical inner task: same seeds and step offsets everywhere, so a
    retried or re-hosted task reproduces identical bits."""
    rng = rng_for(plan.seed, _PHASE_NS, phase, shard_id)
    state = make_inner_state(plan, path_params)
    offset = (phase - 1) * plan.inner_steps
    params, _, trace = inner_phase(
        path_params, shard_docs, plan.inner_steps, state, rng, lm_cfg,
        plan.batch_size, plan.prefix_len, step_offset=offset,
    )
    return params, trace


def compute_outer_delta(
    key: ModuleKey,
    theta_prev_module: ParamTree,
    worker_module_params: Sequence[ParamTree],
    shard_sizes: Sequence[int],
    plan: TrainPlan,
) -> OuterDelta:
    """Weighted sum of (theta_prev - theta_worker) over this module's
    contributors, which the caller supplies in ascending shard order.

    reweigh=True weights by shard size; otherwise every contributor gets
    1/contributors. rescale=True multiplies the result by
    sqrt(contributors).
    """
    n = len(worker_module_params)
    if n == 0:
        raise ValueError(f"no contributors for module {key}")
    if len(shard_sizes) != n:
        raise ValueError("one shard size per contributor required")
    for w in worker_module_params:
        pt.check_congruent(theta_prev_module, w, f"module {key} contribution")
    total = float(sum(shard_sizes))
    acc = pt.zeros_like(theta_prev_module)
    for i, worker in enumerate(worker_module_params):
        alpha = shard_sizes[i] / total if plan.reweigh else 1.0 / n
        for name in acc:
            acc[name] += alpha * (theta_prev_module[name] - worker[name])
    if plan.rescale:
        factor = float(np.sqrt(n))
        for name in acc:
            acc[name] *= factor
    return OuterDelta(key=key, delta=acc, contributors=n, shard_sizes=list(shard_sizes))


def finalize_outer(
    theta_prev: ParamTree,
    opt: NesterovState,
    key: ModuleKey,
    contribs: list[tuple[int, ParamTree, int]],  # (shard id, module slice, shard size)
    plan: TrainPlan,
) -> tuple[ParamTree, NesterovState, OuterDelta]:
    """Sort contributors, reduce, and apply the outer update for one module."""
    ordered = sorted(contribs, key=lambda c: c[0])
    delta = compute_outer_delta(
        key, theta_prev, [c[1] for c in ordered], [c[2] for c in ordered], plan
    )
    new_params, new_opt = nesterov_outer_step(theta_prev, delta.delta, opt)
    return new_params, new_opt, delta


def outer_phase(store: ModuleStore, deltas: Sequence[OuterDelta]) -> ModuleStore:
    """Independent Nesterov updates per module; modules without a delta keep
    both parameters and momentum untouched."""
    for d in deltas:
        new_params, new_opt = nesterov_outer_step(store.params[d.key], d.delta, store.opt[d.key])
        store.update(d.key, new_params, new_opt)
    return store


def shard_val_nll(params: ParamTree, docs: Sequence[np.ndarray], cfg: LmConfig, prefix_len: int) -> float:
    """Mean per-token NLL over the documents (prefix excluded)."""
    total, count = 0.0, 0
    for doc in docs:
        nll, n = sequence_nll(doc, params, cfg, prefix_len)
        total += nll
        count += n
    if count == 0:
        raise ValueError("no validation tokens")
    return total / count


def selected_shards(plan: TrainPlan, n_shards: int, phase: int) -> list[int]:
    if plan.active_shards is not None:
        return sorted(set(plan.active_shards))
    if plan.path_sample_frac >= 1.0:
        return list(range(n_shards))
    n_pick = max(1, int(round(plan.path_sample_frac * n_shards)))
    rng = rng_for(plan.seed, _SAMPLE_NS, phase)
    return sorted(int(i) for i in rng.choice(n_shards, size=n_pick, replace=False))


def early_stop_select(metas: Sequence[PathCheckpointMeta]) -> dict[int, PathCheckpointMeta]:
    """Lowest validation loss per path; ties go to the earliest outer step."""
    best: dict[int, PathCheckpointMeta] = {}
    for meta in sorted(metas, key=lambda m: (m.path_id, m.val_loss, m.phase)):
        best.setdefault(meta.path_id, meta)
    return best


Resharder = Callable[[ModuleStore, ShardSet, int], ShardSet]


def train_dipaco(
    lm_cfg: LmConfig,
    modular_cfg: ModularConfig,
    corpus: Corpus,
    shard_set: ShardSet,
    plan: TrainPlan,
    resharder: Resharder | None = None,
    start_phase: int = 1,
    initial_store: ModuleStore | None = None,
    phase_hook: Callable[[int, ModuleStore, ShardSet], None] | None = None,
) -> tuple[ModuleStore, TrainResult]:
    """The full training loop, driven directly (no simulated infrastructure).

    One worker per shard; shard i trains path shard_to_path[i] (identity by
    default, which requires shard count == path count). The full set of paths
    is never assembled anywhere; workers only ever hold one materialized
    path.

    start_phase/initial_store resume an interrupted run: task seeds key off
    the absolute phase number, so a resumed run is bit-identical to an
    uninterrupted one.
    """
    n_shards = shard_set.n_paths
    mapping = plan.shard_to_path or list(range(n_shards))
    if len(mapping) != n_shards:
        raise ValueError("shard_to_path must map every shard")
    if plan.shard_to_path is None and n_shards != modular_cfg.n_paths:
        raise ValueError(
            f"path count {modular_cfg.n_paths} != shard count {n_shards}; "
            "provide an explicit shard_to_path mapping"
        )
    for p in mapping:
        if not 0 <= p < modular_cfg.n_paths:
            raise ValueError(f"mapped path {p} out of range")

    if initial_store is not None:
        store = initial_store
    else:
        store = ModuleStore.from_init(plan.init, modular_cfg, plan.outer_lr, plan.outer_momentum)
    shards = shard_set
    records: list[MetricRecord] = []
    metas: list[PathCheckpointMeta] = []
    best: dict[int, tuple[float, int, ParamTree]] = {}
    final_params: dict[int, ParamTree] = {}

    for t in range(start_phase, plan.outer_steps + 1):
        if resharder is not None and plan.reshard_at == t:
            shards = resharder(store, shards, t)
            log.info("resharded at phase %d; sizes %s", t, shards.shard_sizes())
        active = selected_shards(plan, n_shards, t)
        contributions: dict[ModuleKey, list[tuple[int, ParamTree, int]]] = {}
        for sid in active:
            docs = [corpus.sequences[i] for i in shards.train[sid]]
            path = mapping[sid]
            params, trace = run_inner_task(lm_cfg, plan, store.materialize(path), docs, t, sid)
            final_params[sid] = params
            records.append(MetricRecord(t, sid, "train", "loss", float(np.mean(trace))))
            val_docs = [corpus.sequences[i] for i in shards.val[sid]]
            if val_docs:
                val = shard_val_nll(params, val_docs, lm_cfg, plan.prefix_len)
                records.append(MetricRecord(t, sid, "val", "loss", val))
                records.append(MetricRecord(t, sid, "val", "ppl", float(np.exp(val))))
                metas.append(PathCheckpointMeta(path_id=sid, phase=t, val_loss=val))
                if sid not in best or val < best[sid][0]:
                    best[sid] = (val, t, params)
            size = len(shards.train[sid])
            for key in path_modules(path, modular_cfg):
                contributions.setdefault(key, []).append((sid, store.slice_for(key, params), size))
        for key in modular_cfg.module_keys():
            if key not in contributions:
                continue
            new_params, new_opt, _ = finalize_outer(
                store.params[key], store.opt[key], key, contributions[key], plan
            )
            store.update(key, new_params, new_opt)
        if phase_hook is not None:
            phase_hook(t, store, shards)

    result = TrainResult(
        records=records,
        metas=metas,
        best_params={sid: params for sid, (_, _, params) in best.items()},
        final_params=final_params,
        shard_set=shards,
    )
    return store, result


def train_dense(
    lm_cfg: LmConfig,
    train_docs: Sequence[np.ndarray],
    val_docs: Sequence[np.ndarray],
    plan: TrainPlan,
    eval_every: int | None = None,
) -> tuple[ParamTree, TrainResult]:
    """Single dense model on the unsharded corpus; the non-modular baseline.

    Runs outer_steps * inner_steps optimizer steps in chunks of inner_steps
    so its metric cadence matches the modular runs.
    """
    params = pt.copy(plan.init)
    records: list[MetricRecord] = []
    metas: list[PathCheckpointMeta] = []
    best: tuple[float, int, ParamTree] | None = None
    for t in range(1, plan.outer_steps + 1):
        params, trace = run_inner_task(lm_cfg, plan, params, train_docs, t, 0)
        records.append(MetricRecord(t, 0, "train", "loss", float(np.mean(trace))))
        if val_docs and (eval_every is None or t % eval_every == 0 or t == plan.outer_steps):
            val = shard_val_nll(params, val_docs, lm_cfg, plan.prefix_len)
            records.append(MetricRecord(t, 0, "val", "loss", val))
            records.append(MetricRecord(t, 0, "val", "ppl", float(np.exp(val))))
            metas.append(PathCheckpointMeta(0, t, val))
            if best is None or val < best[0]:
                best = (val, t, params)
    result = TrainResult(
        records=records,
        metas=metas,
        best_params={0: best[2]} if best else {},
        final_params={0: params},
    )
    return params, result


def reference_diloco(
    lm_cfg: LmConfig,
    corpus: Corpus,
    shard_set: ShardSet,
    plan: TrainPlan,
) -> ParamTree:
    """Plain synchronized-shards loop over a single dense parameter vector.

    Written without the modular machinery on purpose: it is the equivalence
    oracle for the all-shared configuration.
    """
    theta = pt.copy(plan.init)
    opt = NesterovState.init(theta, plan.outer_lr, plan.outer_momentum)
    n = shard_set.n_paths
    for t in range(1, plan.outer_steps + 1):
        workers = []
        for sid in range(n):
            docs = [corpus.sequences[i] for i in shard_set.train[sid]]
            params, _ = run_inner_task(lm_cfg, plan, pt.copy(theta), docs, t, sid)
            workers.append(params)
        acc = pt.zeros_like(theta)
        for sid in range(n):  # ascending shard order, matching the executor
            for name in acc:
                acc[name] += (1.0 / n) * (theta[name] - workers[sid][name])
        theta, opt = nesterov_outer_step(theta, acc, opt)
    return theta
