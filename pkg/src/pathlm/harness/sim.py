"""Deterministic discrete-event simulation of the training fabric.

Workers, executors, the phase controller and the health monitor run as
cooperative actors on a virtual clock; every interaction is an event on a
heap ordered by (tick, insertion sequence), so a given config and fault
plan replays identically. The numerical work inside tasks reuses the
trainer's run_inner_task/finalize_outer, whose seeds depend only on
(plan seed, phase, shard), which is why the final parameters match a direct
trainer run bit for bit no matter how many workers run, how fast they are,
or which of them get preempted.

Flow per phase: the controller enqueues one train task per (sampled) shard;
a task becomes available as soon as all modules its path needs have
published their previous-phase checkpoints. Workers lease tasks, run the
inner phase, write one content-addressed checkpoint per module slice, and
register them. Executors own disjoint sets of modules; once a module has
every expected contribution they reduce in ascending shard order, apply the
Nesterov outer update (velocity rides along inside the module checkpoint),
and publish. Eval tasks piggyback on the same queue and only produce
registry rows.
"""

from __future__ import annotations

import heapq
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .. import tree as pt
from ..datagen import Corpus
from ..metrics import MetricRecord
from ..model import LmConfig
from ..modular import ModularConfig, ModuleKey, ModuleStore, path_modules
from ..optim import NesterovState
from ..routing import ShardSet
from ..trainer import (
    PathCheckpointMeta,
    TrainPlan,
    Resharder,
    finalize_outer,
    run_inner_task,
    selected_shards,
    shard_val_nll,
)
from ..tree import ParamTree
from .queue import Task, TaskQueue
from .registry import KIND_CONTRIB, KIND_EVAL, KIND_MODULE, Registry, RegistryEntry
from .store import CheckpointStore

log = logging.getLogger(__name__)


class DeadlockError(RuntimeError):
    """The event heap drained before the run completed."""


@dataclass(frozen=True)
class FaultEvent:
    """Preempt or crash an actor, at a tick or on a phase's first lease."""

    target: str  # actor id, e.g. "worker0" or "exec1"
    action: str  # preempt | crash
    at_tick: int | None = None
    on_phase_lease: int | None = None

    def __post_init__(self):
        if self.action not in ("preempt", "crash"):
            raise ValueError(f"unknown fault action {self.action!r}")
        if (self.at_tick is None) == (self.on_phase_lease is None):
            raise ValueError("exactly one of at_tick / on_phase_lease required")


@dataclass
class FaultPlan:
    events: list[FaultEvent] = field(default_factory=list)
    speeds: dict[str, float] = field(default_factory=dict)  # worker id -> multiplier

    @classmethod
    def preempt_every_worker_once_per_phase(cls, n_workers: int, phases: int) -> "FaultPlan":
        events = [
            FaultEvent(target=f"worker{w}", action="preempt", on_phase_lease=t)
            for w in range(n_workers)
            for t in range(1, phases + 1)
        ]
        return cls(events=events)


@dataclass
class SimConfig:
    n_workers: int = 2
    n_executors: int = 1
    step_ticks: int = 10  # virtual cost of one inner step at speed 1
    eval_ticks: int = 5
    finalize_ticks: int = 2
    poll_ticks: int = 3
    resume_ticks: int = 4
    monitor_ticks: int = 50
    lease_ticks: int = 1_000
    snapshot_every: int | None = None
    queue_restart_at: int | None = None  # snapshot+restore the queue at this tick
    max_events: int = 2_000_000
    transfer_ticks: int = 0  # simulated checkpoint-locality transfer latency


@dataclass
class SimResult:
    store: ModuleStore
    records: list[MetricRecord]
    metas: list[PathCheckpointMeta]
    events: "EventLog"
    registry: Registry
    queue: TaskQueue


class EventLog:
    def __init__(self):
        self.entries: list[tuple[int, str, str, str]] = []

    def log(self, tick: int, actor: str, event: str, detail: str = "") -> None:
        self.entries.append((tick, actor, event, detail))

    def count(self, event: str) -> int:
        return sum(1 for e in self.entries if e[2] == event)

    def save(self, path: str | Path) -> None:
        with open(path, "w") as f:
            for tick, actor, event, detail in self.entries:
                f.write(f"{tick}|{actor}|{event}|{detail}\n")


class Sim:
    """Virtual-clock event loop; ties break by insertion order."""

    def __init__(self, max_events: int):
        self.now = 0
        self._heap: list[tuple[int, int, Callable[[], None]]] = []
        self._seq = 0
        self._max_events = max_events

    def at(self, delay: int, fn: Callable[[], None]) -> None:
        heapq.heappush(self._heap, (self.now + max(0, int(delay)), self._seq, fn))
        self._seq += 1

    def run(self) -> None:
        processed = 0
        while self._heap:
            tick, _, fn = heapq.heappop(self._heap)
            self.now = tick
            fn()
            processed += 1
            if processed > self._max_events:
                raise DeadlockError("event budget exhausted; simulation is not converging")


class Context:
    """Shared wiring for all actors."""

    def __init__(self, lm_cfg, modular_cfg, corpus, plan, sim_cfg, store, registry, events):
        self.lm_cfg: LmConfig = lm_cfg
        self.modular_cfg: ModularConfig = modular_cfg
        self.corpus: Corpus = corpus
        self.plan: TrainPlan = plan
        self.sim_cfg: SimConfig = sim_cfg
        self.store: CheckpointStore = store
        self.registry: Registry = registry
        self.events: EventLog = events
        self.queue: TaskQueue = TaskQueue()
        self.sim = Sim(sim_cfg.max_events)
        self.controller: Controller | None = None
        self.records: list[MetricRecord] = []
        self.metas: list[PathCheckpointMeta] = []
        self.faults: FaultPlan = FaultPlan()

    def module_blob(self, params: ParamTree, velocity: ParamTree) -> ParamTree:
        blob: ParamTree = {}
        for name, arr in params.items():
            blob[f"theta/{name}"] = arr
        for name, arr in velocity.items():
            blob[f"v/{name}"] = arr
        return blob

    def split_module_blob(self, blob: ParamTree) -> tuple[ParamTree, ParamTree]:
        theta = {n[len("theta/"):]: a for n, a in blob.items() if n.startswith("theta/")}
        vel = {n[len("v/"):]: a for n, a in blob.items() if n.startswith("v/")}
        return theta, vel


class Controller:
    """Owns phase lifecycle, shard bookkeeping and task publication."""

    def __init__(self, ctx: Context, shard_set: ShardSet, resharder: Resharder | None):
        self.ctx = ctx
        self.resharder = resharder
        self.n_shards = shard_set.n_paths
        if ctx.plan.shard_to_path is not None:
            raise ValueError("the simulation requires the identity shard-to-path mapping")
        if self.n_shards != ctx.modular_cfg.n_paths:
            raise ValueError("path count != shard count")
        self.phase_shards: dict[int, ShardSet] = {0: shard_set}
        self.phase_selection: dict[int, list[int]] = {}
        self.enqueued: set[tuple[int, int]] = set()
        self.training_done = False
        self._ready_memo: dict[tuple[int, ModuleKey], str] = {}
        ctx.registry.listeners.append(self.on_registry_append)

    # -- shard / selection bookkeeping --------------------------------------

    def shards_for(self, phase: int) -> ShardSet:
        last = max(p for p in self.phase_shards if p <= phase)
        return self.phase_shards[last]

    def selection(self, phase: int) -> list[int]:
        if phase not in self.phase_selection:
            self.phase_selection[phase] = selected_shards(self.ctx.plan, self.n_shards, phase)
        return self.phase_selection[phase]

    def expected_contributors(self, phase: int, key: ModuleKey) -> list[int]:
        return [
            sid
            for sid in self.selection(phase)
            if key in path_modules(sid, self.ctx.modular_cfg)
        ]

    # -- module state resolution ---------------------------------------------

    def module_state_ref(self, phase: int, key: ModuleKey) -> str | None:
        """Checkpoint ref holding module state as of the end of `phase`.

        A module untouched in a phase keeps its previous checkpoint; a
        touched one must have published. None means not yet determined.
        """
        if phase == 0:
            return self.ctx.registry.module_ref(0, key)
        memo_key = (phase, key)
        if memo_key in self._ready_memo:
            return self._ready_memo[memo_key]
        if self.expected_contributors(phase, key):
            ref = self.ctx.registry.module_ref(phase, key)
        else:
            ref = self.module_state_ref(phase - 1, key)
        if ref is not None:
            self._ready_memo[memo_key] = ref
        return ref

    # -- lifecycle ------------------------------------------------------------

    def start(self) -> None:
        init_store = ModuleStore.from_init(
            self.ctx.plan.init, self.ctx.modular_cfg, self.ctx.plan.outer_lr, self.ctx.plan.outer_momentum
        )
        for key in self.ctx.modular_cfg.module_keys():
            blob = self.ctx.module_blob(init_store.params[key], init_store.opt[key].velocity)
            ref = self.ctx.store.put(blob)
            self.ctx.registry.append(
                RegistryEntry(phase=0, kind=KIND_MODULE, module=key, ref=ref)
            )
        self.ctx.events.log(self.ctx.sim.now, "controller", "phase_begin", "1")
        self._try_enqueue_phase(1)

    def _reshard_if_needed(self, phase: int) -> bool:
        """Reshard at the boundary; returns False while upstream modules are
        still missing (the caller retries when they publish)."""
        plan = self.ctx.plan
        if self.resharder is None or plan.reshard_at != phase or phase in self.phase_shards:
            return True
        refs = {}
        for key in self.ctx.modular_cfg.module_keys():
            ref = self.module_state_ref(phase - 1, key)
            if ref is None:
                return False
            refs[key] = ref
        snapshot = ModuleStore(self.ctx.modular_cfg, plan.outer_lr, plan.outer_momentum)
        for key, ref in refs.items():
            theta, vel = self.ctx.split_module_blob(self.ctx.store.get(ref))
            snapshot.params[key] = theta
            snapshot.opt[key] = NesterovState(vel, plan.outer_lr, plan.outer_momentum)
        new_shards = self.resharder(snapshot, self.shards_for(phase - 1), phase)
        self.phase_shards[phase] = new_shards
        self.ctx.events.log(self.ctx.sim.now, "controller", "reshard", f"phase {phase}")
        return True

    def _try_enqueue_phase(self, phase: int) -> None:
        if phase > self.ctx.plan.outer_steps:
            self.training_done = True
            return
        if not self._reshard_if_needed(phase):
            return
        for sid in self.selection(phase):
            if (phase, sid) in self.enqueued:
                continue
            keys = path_modules(sid, self.ctx.modular_cfg)
            refs = []
            ready = True
            for key in keys:
                ref = self.module_state_ref(phase - 1, key)
                if ref is None:
                    ready = False
                    break
                refs.append((str(key), ref))
            if not ready:
                continue
            task = Task(
                kind="train", phase=phase, path_id=sid, tau=self.ctx.plan.inner_steps,
                input_refs=tuple(refs),
            )
            if self.ctx.queue.push(task):
                self.enqueued.add((phase, sid))
                self.ctx.events.log(self.ctx.sim.now, "controller", "enqueue", str(task.task_id))

    def on_registry_append(self, entry: RegistryEntry) -> None:
        if entry.kind != KIND_MODULE or entry.phase == 0:
            return
        phase = entry.phase
        if self._phase_fully_published(phase):
            self.ctx.events.log(self.ctx.sim.now, "controller", "phase_complete", str(phase))
            if phase == self.ctx.plan.outer_steps:
                self.training_done = True
                return
            self.ctx.events.log(self.ctx.sim.now, "controller", "phase_begin", str(phase + 1))
        # a new module checkpoint may unblock next-phase tasks even before
        # the whole phase finishes
        self._try_enqueue_phase(phase + 1)

    def _phase_fully_published(self, phase: int) -> bool:
        for key in self.ctx.modular_cfg.module_keys():
            if self.expected_contributors(phase, key) and self.ctx.registry.module_ref(phase, key) is None:
                return False
        return True

    def all_done(self) -> bool:
        return self.training_done and self.ctx.queue.all_done()


class Worker:
    """Training/eval worker: lease, compute, checkpoint, register, repeat.

    Results are computed at completion time, so a preempted task leaves no
    trace beyond its expired lease.
    """

    def __init__(self, ctx: Context, wid: int):
        self.ctx = ctx
        self.id = f"worker{wid}"
        self.speed = ctx.faults.speeds.get(self.id, 1.0)
        self.alive = True
        self.epoch = 0
        self.current: Task | None = None
        self._leases_by_phase: dict[int, int] = {}
        self._fired: set[int] = set()

    def wake(self) -> None:
        if not self.alive:
            return
        ctrl = self.ctx.controller
        if ctrl.all_done():
            return
        task = self.ctx.queue.lease(self.id, self.ctx.sim.now, self.ctx.sim_cfg.lease_ticks)
        if task is None:
            self.ctx.sim.at(self.ctx.sim_cfg.poll_ticks, self.wake)
            return
        self.current = task
        self.epoch += 1
        epoch = self.epoch
        self.ctx.events.log(self.ctx.sim.now, self.id, "lease", str(task.task_id))
        self._leases_by_phase[task.phase] = self._leases_by_phase.get(task.phase, 0) + 1
        duration = self._duration(task)
        self._maybe_arm_phase_fault(task, duration)
        self.ctx.sim.at(duration, lambda: self._complete(task, epoch))

    def _duration(self, task: Task) -> int:
        cfg = self.ctx.sim_cfg
        base = cfg.eval_ticks if task.kind == "eval" else task.tau * cfg.step_ticks
        base += cfg.transfer_ticks * len(task.input_refs)
        return max(1, int(round(base / self.speed)))

    def _maybe_arm_phase_fault(self, task: Task, duration: int) -> None:
        for i, ev in enumerate(self.ctx.faults.events):
            if (
                ev.target == self.id
                and ev.on_phase_lease == task.phase
                and i not in self._fired
                and self._leases_by_phase[task.phase] == 1
            ):
                self._fired.add(i)
                self.ctx.sim.at(max(1, duration // 2), lambda ev=ev: self.apply_fault(ev.action))

    def apply_fault(self, action: str) -> None:
        if not self.alive:
            return
        self.epoch += 1  # cancels any scheduled completion
        interrupted = self.current.task_id if self.current else None
        self.current = None
        self.ctx.events.log(self.ctx.sim.now, self.id, action, str(interrupted))
        if action == "crash":
            self.alive = False
        else:
            self.ctx.sim.at(self.ctx.sim_cfg.resume_ticks, self.wake)

    def restart(self) -> None:
        if self.alive:
            return
        self.alive = True
        self.epoch += 1
        self.current = None
        self.ctx.events.log(self.ctx.sim.now, self.id, "restart")
        self.ctx.sim.at(0, self.wake)

    # -- task execution -------------------------------------------------------

    def _complete(self, task: Task, epoch: int) -> None:
        if not self.alive or epoch != self.epoch:
            return  # preempted or crashed mid-task: no writes happen
        if task.kind == "train":
            self._run_train(task)
        else:
            self._run_eval(task)
        self.current = None
        self.ctx.queue.complete(task.task_id)
        self.ctx.events.log(self.ctx.sim.now, self.id, "complete", str(task.task_id))
        self.ctx.sim.at(1, self.wake)

    def _materialize(self, task: Task, module_blobs: bool) -> ParamTree:
        merged: dict[str, np.ndarray] = {}
        for key_s, ref in task.input_refs:
            blob = self.ctx.store.get(ref)
            if module_blobs:
                blob, _ = self.ctx.split_module_blob(blob)
            merged.update(blob)
        missing = [n for n in self.ctx.modular_cfg.canonical_order if n not in merged]
        if missing:
            raise RuntimeError(
                f"{self.id}: input checkpoints missing parameters {missing[:3]}; phase sequencing bug"
            )
        return {n: merged[n] for n in self.ctx.modular_cfg.canonical_order}

    def _run_train(self, task: Task) -> None:
        ctrl = self.ctx.controller
        shards = ctrl.shards_for(task.phase)
        docs = [self.ctx.corpus.sequences[i] for i in shards.train[task.path_id]]
        params0 = self._materialize(task, module_blobs=True)
        params, trace = run_inner_task(
            self.ctx.lm_cfg, self.ctx.plan, params0, docs, task.phase, task.path_id
        )
        slice_refs = []
        fresh = False
        for key in path_modules(task.path_id, self.ctx.modular_cfg):
            slice_tree = {
                n: params[n] for n in self.ctx.modular_cfg.names_of_level(key.level)
            }
            ref = self.ctx.store.put(slice_tree)
            slice_refs.append((str(key), ref))
            appended = self.ctx.registry.append(
                RegistryEntry(
                    phase=task.phase, kind=KIND_CONTRIB, path_id=task.path_id, module=key, ref=ref
                )
            )
            fresh = fresh or appended
        if fresh:  # a retried task that lost the race records nothing
            self.ctx.records.append(
                MetricRecord(task.phase, task.path_id, "train", "loss", float(np.mean(trace)))
            )
        if shards.val[task.path_id]:
            self.ctx.queue.push(
                Task(
                    kind="eval", phase=task.phase, path_id=task.path_id, tau=0,
                    input_refs=tuple(slice_refs),
                )
            )

    def _run_eval(self, task: Task) -> None:
        ctrl = self.ctx.controller
        shards = ctrl.shards_for(task.phase)
        params = self._materialize(task, module_blobs=False)
        docs = [self.ctx.corpus.sequences[i] for i in shards.val[task.path_id]]
        val = shard_val_nll(params, docs, self.ctx.lm_cfg, self.ctx.plan.prefix_len)
        appended = self.ctx.registry.append(
            RegistryEntry(phase=task.phase, kind=KIND_EVAL, path_id=task.path_id, val_loss=val)
        )
        if appended:
            self.ctx.records.append(MetricRecord(task.phase, task.path_id, "val", "loss", val))
            self.ctx.records.append(
                MetricRecord(task.phase, task.path_id, "val", "ppl", float(np.exp(val)))
            )
            self.ctx.metas.append(PathCheckpointMeta(task.path_id, task.phase, val))


class Executor:
    """Sharded outer-optimization executor for a fixed set of modules.

    Contributor checkpoints are kept as refs (not running sums) and reduced
    in ascending shard order only once the expected set is complete; crash
    recovery is a registry rescan because nothing lives only in memory.
    """

    def __init__(self, ctx: Context, eid: int, owned: list[ModuleKey]):
        self.ctx = ctx
        self.id = f"exec{eid}"
        self.owned = set(owned)
        self.alive = True
        ctx.registry.listeners.append(self.on_registry_append)

    def on_registry_append(self, entry: RegistryEntry) -> None:
        if not self.alive or entry.kind != KIND_CONTRIB or entry.module not in self.owned:
            return
        phase, key = entry.phase, entry.module
        self.ctx.sim.at(self.ctx.sim_cfg.finalize_ticks, lambda: self.maybe_finalize(phase, key))

    def maybe_finalize(self, phase: int, key: ModuleKey) -> None:
        if not self.alive:
            return
        ctrl = self.ctx.controller
        if self.ctx.registry.module_ref(phase, key) is not None:
            return
        expected = ctrl.expected_contributors(phase, key)
        contribs = self.ctx.registry.contributions(phase, key)
        if len(contribs) < len(expected):
            return
        prev_ref = ctrl.module_state_ref(phase - 1, key)
        theta_prev, velocity = self.ctx.split_module_blob(self.ctx.store.get(prev_ref))
        opt = NesterovState(velocity, self.ctx.plan.outer_lr, self.ctx.plan.outer_momentum)
        shards = ctrl.shards_for(phase)
        loaded = [
            (sid, self.ctx.store.get(ref), len(shards.train[sid])) for sid, ref in contribs
        ]
        new_params, new_opt, _ = finalize_outer(theta_prev, opt, key, loaded, self.ctx.plan)
        ref = self.ctx.store.put(self.ctx.module_blob(new_params, new_opt.velocity))
        appended = self.ctx.registry.append(
            RegistryEntry(phase=phase, kind=KIND_MODULE, module=key, ref=ref)
        )
        if appended:
            self.ctx.events.log(self.ctx.sim.now, self.id, "module_update", f"{key}@{phase}")

    def crash(self) -> None:
        if self.alive:
            self.alive = False
            self.ctx.events.log(self.ctx.sim.now, self.id, "crash")

    def restart(self) -> None:
        if self.alive:
            return
        self.alive = True
        self.ctx.events.log(self.ctx.sim.now, self.id, "restart")
        # recover from durable state: rescan every owned module/phase pair
        for phase in range(1, self.ctx.plan.outer_steps + 1):
            for key in sorted(self.owned):
                self.ctx.sim.at(
                    self.ctx.sim_cfg.finalize_ticks,
                    lambda phase=phase, key=key: self.maybe_finalize(phase, key),
                )


class Monitor:
    """Periodically restarts crashed actors and snapshots the queue."""

    def __init__(self, ctx: Context, workers: list[Worker], executors: list[Executor]):
        self.ctx = ctx
        self.workers = workers
        self.executors = executors
        self._restarted_queue = False

    def wake(self) -> None:
        ctrl = self.ctx.controller
        if ctrl.all_done():
            return
        cfg = self.ctx.sim_cfg
        now = self.ctx.sim.now
        self.ctx.queue.expire(now)
        for w in self.workers:
            if not w.alive:
                w.restart()
        for e in self.executors:
            if not e.alive:
                e.restart()
        if cfg.queue_restart_at is not None and not self._restarted_queue and now >= cfg.queue_restart_at:
            self._restarted_queue = True
            restored = TaskQueue.restore(self.ctx.queue.snapshot())
            self.ctx.queue.replace_from(restored)
            self.ctx.events.log(now, "monitor", "queue_restart", f"{len(restored.pending)} pending")
        self.ctx.events.log(now, "monitor", "health_check")
        self.ctx.sim.at(cfg.monitor_ticks, self.wake)


def run_simulation(
    lm_cfg: LmConfig,
    modular_cfg: ModularConfig,
    corpus: Corpus,
    shard_set: ShardSet,
    plan: TrainPlan,
    store_root: str | Path,
    sim_cfg: SimConfig | None = None,
    fault_plan: FaultPlan | None = None,
    resharder: Resharder | None = None,
) -> SimResult:
    """Drive all phases to completion under the fault plan.

    The returned store is assembled from the final registry state and is
    bit-identical to what a direct train_dipaco call produces with the same
    plan and seeds.
    """
    sim_cfg = sim_cfg or SimConfig()
    ctx = Context(
        lm_cfg, modular_cfg, corpus, plan, sim_cfg,
        CheckpointStore(store_root), Registry(), EventLog(),
    )
    ctx.faults = fault_plan or FaultPlan()
    controller = Controller(ctx, shard_set, resharder)
    ctx.controller = controller

    keys = sorted(modular_cfg.module_keys())
    executors = [
        Executor(ctx, e, [k for i, k in enumerate(keys) if i % sim_cfg.n_executors == e])
        for e in range(sim_cfg.n_executors)
    ]
    workers = [Worker(ctx, w) for w in range(sim_cfg.n_workers)]
    monitor = Monitor(ctx, workers, executors)

    for ev in ctx.faults.events:
        if ev.at_tick is not None:
            target = ev.target
            def fire(ev=ev):
                for w in workers:
                    if w.id == ev.target:
                        w.apply_fault(ev.action)
                        return
                for e in executors:
                    if e.id == ev.target and ev.action == "crash":
                        e.crash()
                        return
            ctx.sim.at(ev.at_tick, fire)

    controller.start()
    for w in workers:
        ctx.sim.at(0, w.wake)
    ctx.sim.at(sim_cfg.monitor_ticks, monitor.wake)
    ctx.sim.run()

    if not controller.all_done():
        dump = {
            "pending": [t.task_id for t in ctx.queue.pending],
            "in_flight": list(ctx.queue.in_flight),
            "training_done": controller.training_done,
            "tick": ctx.sim.now,
        }
        raise DeadlockError(f"simulation stalled: {dump}")

    final = ModuleStore(modular_cfg, plan.outer_lr, plan.outer_momentum)
    for key in modular_cfg.module_keys():
        ref = controller.module_state_ref(plan.outer_steps, key)
        theta, vel = ctx.split_module_blob(ctx.store.get(ref))
        ordered = {n: theta[n] for n in modular_cfg.names_of_level(key.level)}
        final.params[key] = ordered
        final.opt[key] = NesterovState(
            {n: vel[n] for n in modular_cfg.names_of_level(key.level)},
            plan.outer_lr, plan.outer_momentum,
        )

    ctx.records.sort(key=lambda r: (r.step, r.path_id, r.split, r.kind))
    ctx.metas.sort(key=lambda m: (m.phase, m.path_id))
    return SimResult(
        store=final,
        records=ctx.records,
        metas=ctx.metas,
        events=ctx.events,
        registry=ctx.registry,
        queue=ctx.queue,
    )
