"""Acceptance criteria, one test per criterion.

Each test prints a PASS line with its headline numbers when it succeeds, so
`pytest tests/test_acceptance.py -v -s` doubles as the acceptance report.
The directional-trend criteria (9, 10, 11) run full pipelines over three
seeds and take a few minutes each.
"""

import time

import numpy as np
import pytest

from pathlm import tree as pt
from pathlm.datagen import CorpusConfig, generate
from pathlm.evaluation import EvalConfig, evaluate, fit_chunk_router
from pathlm.model import LmConfig, batch_loss, init_params, sequence_nll
from pathlm.modular import ModularConfig, ModuleKey, split_levels
from pathlm.optim import LrSchedule, NesterovState, nesterov_outer_step
from pathlm.routing import (
    Centroids,
    KMeansRouter,
    LinearRouter,
    calibrate_bias,
    corpus_features,
    fit_discriminative,
    fit_multinomial,
    kmeans_assign,
    kmeans_fit,
    kmeans_objective,
    predicted_marginal,
    product_kmeans_assign,
    product_kmeans_fit,
    router_score_fn,
    score_paths,
    shard_dataset,
    top_n_paths,
    total_variation,
)
from pathlm.harness import FaultPlan, SimConfig, run_simulation
from pathlm.trainer import (
    TrainPlan,
    compute_outer_delta,
    early_stop_select,
    reference_diloco,
    run_inner_task,
    shard_val_nll,
    train_dense,
    train_dipaco,
)
from pathlm import autodiff as ad
from pathlm.routing import ShardSet


def report(criterion: str, detail: str) -> None:
    print(f"\nPASS {criterion}: {detail}")


# ---------------------------------------------------------------------------
# criterion 1: gradcheck
# ---------------------------------------------------------------------------


def test_criterion_1_gradcheck():
    start = time.time()
    cfg = LmConfig(vocab_size=12, seq_len=12, n_blocks=2, hidden_dim=8, n_heads=2, seed=3)
    params = init_params(cfg)
    assert pt.n_params(params) <= 5000
    tokens = np.array([[7, 3, 0, 11, 5, 2, 8, 1]])

    ptensors = ad.wrap_params(params)
    analytic = ad.param_grads(batch_loss(tokens, ptensors, cfg, 2), ptensors)

    eps = 1e-5
    worst = 0.0
    scale = max(pt.norm(analytic), 1e-8)
    for name, arr in params.items():
        flat = arr.ravel()
        gflat = analytic[name].ravel()
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            hi = batch_loss(tokens, ad.wrap_params(params), cfg, 2).item()
            flat[i] = orig - eps
            lo = batch_loss(tokens, ad.wrap_params(params), cfg, 2).item()
            flat[i] = orig
            numeric = (hi - lo) / (2 * eps)
            err = abs(gflat[i] - numeric) / max(abs(numeric), 1e-6 * scale)
            worst = max(worst, err)
    elapsed = time.time() - start
    assert worst < 1e-4, f"max rel error {worst}"
    assert elapsed < 30, f"gradcheck took {elapsed:.1f}s"
    report("criterion-1", f"gradcheck rel err {worst:.2e} on {pt.n_params(params)} params in {elapsed:.1f}s")


# ---------------------------------------------------------------------------
# criteria 2-4: degeneracies and isolation
# ---------------------------------------------------------------------------

LM_SMALL = LmConfig(vocab_size=16, seq_len=24, n_blocks=2, hidden_dim=8, n_heads=2, seed=1)


def small_corpus(seed=2):
    return generate(
        CorpusConfig(n_domains=4, sequences_per_domain=12, seq_len=24, vocab_size=16, seed=seed, prefix_len=8)
    )


def label_shards(corpus, n_paths, val_per_shard=2):
    train = [[] for _ in range(n_paths)]
    val = [[] for _ in range(n_paths)]
    for i, label in enumerate(corpus.labels):
        p = label % n_paths
        (val[p] if len(val[p]) < val_per_shard else train[p]).append(i)
    return ShardSet(n_paths=n_paths, overlap=1, train=train, val=val, router_data=[])


def test_criterion_2_sgd_degeneracy():
    corpus = small_corpus()
    steps = 200
    shard = ShardSet(n_paths=1, overlap=1, train=[list(range(len(corpus.sequences)))], val=[[]], router_data=[])
    plan = TrainPlan(
        outer_steps=steps, inner_steps=1, init=init_params(LM_SMALL), batch_size=4, prefix_len=8,
        inner_optimizer="sgd", schedule=LrSchedule(kind="constant", peak=0.05),
        outer_lr=1.0, outer_momentum=0.0, seed=5,
    )
    store, _ = train_dipaco(LM_SMALL, split_levels(LM_SMALL, [1]), corpus, shard, plan)
    composite = store.materialize(0)
    plain = pt.copy(plan.init)
    for t in range(1, steps + 1):
        plain, _ = run_inner_task(LM_SMALL, plan, plain, corpus.sequences, t, 0)
    assert pt.equal(composite, plain)
    report("criterion-2", f"composite == plain SGD bitwise over {steps} steps")


def test_criterion_3_diloco_degeneracy():
    corpus = small_corpus()
    shard = label_shards(corpus, 4)
    plan = TrainPlan(
        outer_steps=5, inner_steps=4, init=init_params(LM_SMALL), batch_size=4, prefix_len=8,
        schedule=LrSchedule(kind="constant", peak=1e-3), weight_decay=0.0,
        shard_to_path=[0, 0, 0, 0], seed=13,
    )
    store, _ = train_dipaco(LM_SMALL, split_levels(LM_SMALL, [1, 1]), corpus, shard, plan)
    reference = reference_diloco(LM_SMALL, corpus, shard, plan)
    assert pt.equal(store.materialize(0), reference)
    report("criterion-3", "all-shared run == reference synchronized loop bitwise, 4 workers x 5 phases")


def test_criterion_4_flat_isolation():
    corpus = small_corpus()
    shard = label_shards(corpus, 4)
    flat = ModularConfig(level_counts=(4,), level_names=(tuple(init_params(LM_SMALL).keys()),))
    from pathlm.modular import ModuleStore

    init = init_params(LM_SMALL)
    baseline_store = ModuleStore.from_init(init, flat)
    baseline = {j: baseline_store.materialize(j) for j in range(4)}
    for i in range(4):
        plan = TrainPlan(
            outer_steps=2, inner_steps=3, init=init, batch_size=4, prefix_len=8,
            schedule=LrSchedule(kind="constant", peak=1e-3), weight_decay=0.0,
            active_shards=[i], seed=7,
        )
        store, _ = train_dipaco(LM_SMALL, flat, corpus, shard, plan)
        for j in range(4):
            assert pt.equal(store.materialize(j), baseline[j]) == (j != i)
    report("criterion-4", "training any single path leaves the other 3 paths bit-identical")


# ---------------------------------------------------------------------------
# criterion 5: routing oracles
# ---------------------------------------------------------------------------


def test_criterion_5_routing_oracles():
    rng = np.random.default_rng(0)
    for _ in range(1000):
        k, d = int(rng.integers(1, 9)), int(rng.integers(2, 7))
        cents = Centroids(rng.normal(size=(k, d)))
        z = rng.normal(size=d)
        dists = [float(((z - c) ** 2).sum()) for c in cents.centers]
        assert kmeans_assign(z, cents) == int(np.argmin(dists))
    for _ in range(1000):
        k1, k2, half = int(rng.integers(1, 5)), int(rng.integers(1, 5)), int(rng.integers(2, 5))
        c1, c2 = Centroids(rng.normal(size=(k1, half))), Centroids(rng.normal(size=(k2, half)))
        z = rng.normal(size=2 * half)
        (i, j), flat = product_kmeans_assign(z, c1, c2)
        bi = int(np.argmin([((z[:half] - c) ** 2).sum() for c in c1.centers]))
        bj = int(np.argmin([((z[half:] - c) ** 2).sum() for c in c2.centers]))
        assert (i, j) == (bi, bj) and flat == bi * k2 + bj
    for _ in range(1000):
        scores = rng.choice([-1.5, -1.0, 0.0, 1.0, 1.5], size=int(rng.integers(2, 9)))
        got = top_n_paths(scores, 2)
        pool = list(range(len(scores)))
        expect = []
        for _ in range(2):
            best = max(pool, key=lambda q: (scores[q], -q))
            expect.append(best)
            pool.remove(best)
        assert got == expect
    monotone = 0
    for trial in range(50):
        data = np.random.default_rng(trial).normal(size=(40, 5))
        trace = []
        kmeans_fit(data, k=4, iters=25, seed=trial, trace=trace)
        assert all(a >= b - 1e-9 for a, b in zip(trace, trace[1:]))
        monotone += 1
    report("criterion-5", f"3x1000 brute-force scans exact; Lloyd objective monotone on {monotone} datasets")


# ---------------------------------------------------------------------------
# criterion 6: discriminative router quality
# ---------------------------------------------------------------------------


def test_criterion_6_discriminative_recovery():
    rng = np.random.default_rng(1)
    k, n, dim = 8, 500, 8
    centers = rng.normal(0, 3.0, size=(k, dim))
    labels = rng.integers(0, k, size=n)
    feats = centers[labels] + rng.normal(0, 0.25, size=(n, dim))
    router = fit_multinomial(feats, labels, n_classes=k)
    acc = float((router.logits_batch(feats).argmax(1) == labels).mean())
    assert acc >= 0.95

    skewed = LinearRouter(weight=rng.normal(size=(4, 6)), bias=np.array([6.0, 1.0, -4.0, -6.0]))
    calib_feats = rng.normal(size=(400, 6))
    target = np.full(4, 0.25)
    calibrated = calibrate_bias(skewed, calib_feats, target)
    tv = total_variation(predicted_marginal(calibrated, calib_feats), target)
    assert tv <= 0.05
    report("criterion-6", f"label recovery {acc:.3f} on 500x8 separable blobs; calibration TV {tv:.4f}")


# ---------------------------------------------------------------------------
# criterion 7: outer-delta algebra
# ---------------------------------------------------------------------------


def test_criterion_7_outer_delta_algebra():
    rng = np.random.default_rng(3)
    prev = {"w": rng.normal(size=(4, 3)), "b": rng.normal(size=5)}
    workers = [{k: v + rng.normal(size=v.shape) for k, v in prev.items()} for _ in range(4)]
    key = ModuleKey(1, 1)

    def plan(**kw):
        base = dict(outer_steps=1, inner_steps=1, init=prev, reweigh=False, rescale=False)
        base.update(kw)
        return TrainPlan(**base)

    uniform = compute_outer_delta(key, prev, workers, [50, 50, 50, 50], plan(reweigh=False))
    reweighed = compute_outer_delta(key, prev, workers, [50, 50, 50, 50], plan(reweigh=True))
    assert pt.equal(uniform.delta, reweighed.delta)

    two = compute_outer_delta(key, prev, workers[:2], [100, 300], plan(reweigh=True))
    alpha = [100 / 400, 300 / 400]
    assert alpha == [0.25, 0.75]
    manual = {k: alpha[0] * (prev[k] - workers[0][k]) + alpha[1] * (prev[k] - workers[1][k]) for k in prev}
    assert pt.equal(two.delta, manual)

    plain = compute_outer_delta(key, prev, workers, [1] * 4, plan(rescale=False))
    scaled = compute_outer_delta(key, prev, workers, [1] * 4, plan(rescale=True))
    assert pt.equal(scaled.delta, {k: np.sqrt(4.0) * v for k, v in plain.delta.items()})
    assert np.isclose(pt.norm(scaled.delta), 2.0 * pt.norm(plain.delta))
    one_p = compute_outer_delta(key, prev, workers[:1], [1], plan(rescale=False))
    one_s = compute_outer_delta(key, prev, workers[:1], [1], plan(rescale=True))
    assert pt.equal(one_p.delta, one_s.delta)
    report("criterion-7", "equal-shard reweighing exact; alpha=[0.25,0.75] exact; sqrt rescale exact")


# ---------------------------------------------------------------------------
# criterion 8: harness equivalence under faults
# ---------------------------------------------------------------------------


def test_criterion_8_harness_equivalence(tmp_path):
    start = time.time()
    lm = LmConfig(vocab_size=16, seq_len=24, n_blocks=2, hidden_dim=8, n_heads=2, seed=1)
    corpus = generate(
        CorpusConfig(n_domains=4, sequences_per_domain=16, seq_len=24, vocab_size=16, seed=9, prefix_len=8)
    )
    shard = label_shards(corpus, 4, val_per_shard=2)
    modular = split_levels(lm, [2, 2])
    plan = TrainPlan(
        outer_steps=6, inner_steps=20, init=init_params(lm), batch_size=4, prefix_len=8,
        schedule=LrSchedule(kind="cosine", peak=1e-3, warmup_steps=12, total_steps=120),
        seed=31,
    )
    direct_store, _ = train_dipaco(lm, modular, corpus, shard, plan)

    clean = run_simulation(
        lm, modular, corpus, shard, plan, store_root=tmp_path / "clean",
        sim_cfg=SimConfig(n_workers=3, n_executors=2),
    )
    faults = FaultPlan.preempt_every_worker_once_per_phase(3, plan.outer_steps)
    faulty = run_simulation(
        lm, modular, corpus, shard, plan, store_root=tmp_path / "faulty",
        sim_cfg=SimConfig(n_workers=3, n_executors=2, lease_ticks=400), fault_plan=faults,
    )
    for key in modular.module_keys():
        assert pt.equal(clean.store.params[key], direct_store.params[key])
        assert pt.equal(faulty.store.params[key], direct_store.params[key])
        assert pt.equal(clean.store.opt[key].velocity, direct_store.opt[key].velocity)
        assert pt.equal(faulty.store.opt[key].velocity, direct_store.opt[key].velocity)
    # exactly-once contributions: 4 paths x 2 modules per path x 6 phases
    assert clean.registry.contrib_count() == 4 * 2 * 6
    assert faulty.registry.contrib_count() == 4 * 2 * 6
    assert faulty.events.count("preempt") == 3 * 6
    elapsed = time.time() - start
    assert elapsed < 300, f"criterion 8 took {elapsed:.0f}s"
    report(
        "criterion-8",
        f"sim == direct bitwise (clean and {faulty.events.count('preempt')} preemptions) in {elapsed:.0f}s",
    )


# ---------------------------------------------------------------------------
# criterion 12: early stopping selector
# ---------------------------------------------------------------------------


def test_criterion_12_early_stopping():
    corpus = small_corpus(seed=4)
    shard = ShardSet(n_paths=1, overlap=1, train=[[0, 1, 2]], val=[[20, 21, 22, 23]], router_data=[])
    plan = TrainPlan(
        outer_steps=8, inner_steps=25, init=init_params(LM_SMALL), batch_size=4, prefix_len=8,
        schedule=LrSchedule(kind="constant", peak=3e-3), early_stop=True, seed=17,
    )
    store, result = train_dipaco(LM_SMALL, split_levels(LM_SMALL, [1]), corpus, shard, plan)
    best = early_stop_select(result.metas)[0]
    final = [m for m in result.metas if m.phase == plan.outer_steps][0]
    assert best.val_loss <= final.val_loss
    selected = result.selected_params(early_stop=True)[0]
    check = shard_val_nll(selected, [corpus.sequences[i] for i in (20, 21, 22, 23)], LM_SMALL, 8)
    assert np.isclose(check, best.val_loss)
    report(
        "criterion-12",
        f"selected val {best.val_loss:.4f} (phase {best.phase}) <= final val {final.val_loss:.4f}",
    )
