"""Acceptance suite: one test per criterion, one PASS/FAIL line each.

The meta-training experiments run at desk scale (10 training tasks, 20
held-out tasks, 3 seeds) and are shared between criteria through
module-scoped fixtures. Runs are deterministic, so the printed numbers are
reproducible.
"""

import json

import numpy as np
import pytest

from gmpslab import diffcore
from gmpslab.envs import Nav2dFamily
from gmpslab.experts import collect_demos, scripted_expert
from gmpslab.innerloop import adapt, adapt_iw, compute_ratios
from gmpslab.metatrain import (
    MetaConfig,
    MetaStepGraph,
    gmps_meta_step,
    gmps_train,
    init_meta_state,
    maml_train,
    meta_test,
    multitask_imitation,
)
from gmpslab.policy import GaussianMlpPolicy, MlpArch
from gmpslab.rng import stream
from gmpslab.sampling import collect_nav
from gmpslab.verify import (
    TabularGmpsResult,
    check_bound,
    divergence_chain,
    expert_probs_for,
    sample_verification_family,
    verify_bound_on_random_family,
)

from helpers import assert_close_rel, central_diff, random_smooth_graph

SEEDS = (0, 1, 2)
RETURN_THRESHOLD = 3.0
ARCH = MlpArch(obs_dim=2, act_dim=2, hidden=(32, 32), bias_transform_dim=2)

GMPS_DENSE = MetaConfig(
    inner_lr=0.1, learn_inner_lr=True, outer_lr=0.02,
    rollouts_per_task=10, bc_steps=100, iterations=15,
    aggregation=True, aggregate_rollouts=5, demo_rollouts=20,
)
MAML_DENSE = MetaConfig(
    inner_lr=0.1, learn_inner_lr=True, outer_lr=0.05,
    rollouts_per_task=10, bc_steps=0, iterations=80, aggregation=False,
)
GMPS_SPARSE = MetaConfig(
    inner_lr=0.1, learn_inner_lr=True, outer_lr=0.02,
    rollouts_per_task=10, bc_steps=100, iterations=22,
    aggregation=True, aggregate_rollouts=5, demo_rollouts=20,
)
IMITATION_DENSE = MetaConfig(
    inner_lr=0.1, learn_inner_lr=False, outer_lr=0.02,
    bc_steps=100, iterations=15, aggregation=False,
)


def _family(reward):
    return Nav2dFamily(horizon=50, reward_variant=reward)


def _tasks(family, n, label, offset=0):
    return family.sample_tasks(n, stream(0, label), id_offset=offset)


def _steps_to_threshold(records, budget):
    for r in records:
        if r["post_return"] >= RETURN_THRESHOLD:
            return r["env_steps"]
    return budget


@pytest.fixture(scope="module")
def dense_runs():
    family = _family("dense")
    train = _tasks(family, 10, "train-tasks")
    experts = [scripted_expert(t) for t in train]
    gmps = {
        seed: gmps_train(family, train, GMPS_DENSE, seed, ARCH, experts=experts)
        for seed in SEEDS
    }
    maml = {seed: maml_train(family, train, MAML_DENSE, seed, ARCH) for seed in SEEDS}
    return {"family": family, "train": train, "experts": experts,
            "gmps": gmps, "maml": maml}


@pytest.fixture(scope="module")
def sparse_runs():
    family = _family("sparse")
    train = _tasks(family, 10, "train-tasks")
    experts = [scripted_expert(t) for t in train]
    gmps = {
        seed: gmps_train(family, train, GMPS_SPARSE, seed, ARCH, experts=experts)
        for seed in SEEDS
    }
    budget = int(np.mean([gmps[s].state.env_steps for s in SEEDS]))
    maml_iters = max(1, budget // (2 * 10 * 49 * 10))
    maml_cfg = MetaConfig(
        inner_lr=0.1, learn_inner_lr=True, outer_lr=0.05,
        rollouts_per_task=10, iterations=int(maml_iters), aggregation=False,
    )
    maml = {seed: maml_train(family, train, maml_cfg, seed, ARCH) for seed in SEEDS}
    return {"family": family, "train": train, "gmps": gmps, "maml": maml,
            "budget": budget}


def test_criterion_1_sample_efficiency_ordering(dense_runs):
    """Guided training reaches the return threshold in half the samples."""
    maml_budget = max(
        dense_runs["maml"][s].records[-1]["env_steps"] for s in SEEDS
    )
    gmps_steps = [
        _steps_to_threshold(dense_runs["gmps"][s].records, maml_budget) for s in SEEDS
    ]
    maml_steps = [
        _steps_to_threshold(dense_runs["maml"][s].records, maml_budget) for s in SEEDS
    ]
    mean_gmps = float(np.mean(gmps_steps))
    mean_maml = float(np.mean(maml_steps))
    ok = mean_gmps <= 0.5 * mean_maml
    print(
        f"\nACCEPTANCE 1 (sample efficiency): {'PASS' if ok else 'FAIL'} - "
        f"guided {mean_gmps:.0f} steps vs policy-gradient meta-learning "
        f"{mean_maml:.0f} steps to reach {RETURN_THRESHOLD} "
        f"(ratio {mean_maml / mean_gmps:.1f}x, need >= 2x)"
    )
    assert ok


def test_criterion_2_sparse_reward_separation(sparse_runs):
    """Sparse rewards: guided adaptation succeeds, from-scratch stays flat."""
    family = sparse_runs["family"]
    held_out = _tasks(family, 20, "test-tasks", offset=10_000)
    gmps_succ, maml_succ = [], []
    for seed in SEEDS:
        g_state = sparse_runs["gmps"][seed].state
        mt = meta_test(
            family, g_state.policy(), held_out, 1, 20,
            g_state.inner_lr(GMPS_SPARSE), seed=seed,
        )
        gmps_succ.append(mt.mean_successes()[-1])
        m_state = sparse_runs["maml"][seed].state
        mt2 = meta_test(
            family, m_state.policy(), held_out, 1, 20,
            m_state.inner_lr(GMPS_SPARSE), seed=seed,
        )
        maml_succ.append(mt2.mean_successes()[-1])
    g, m = float(np.mean(gmps_succ)), float(np.mean(maml_succ))
    ok = g >= 0.8 and m <= 0.3
    print(
        f"\nACCEPTANCE 2 (sparse separation): {'PASS' if ok else 'FAIL'} - "
        f"guided success {g:.3f} (need >= 0.8), from-scratch {m:.3f} "
        f"(need <= 0.3), budget {sparse_runs['budget']} steps"
    )
    assert ok


def test_criterion_3_adaptation_gain_over_imitation(dense_runs):
    """Guided fast adaptation beats fine-tuned multi-task imitation."""
    family = dense_runs["family"]
    train = dense_runs["train"]
    held_out = _tasks(family, 20, "test-tasks", offset=10_000)
    results = {}
    for steps in (1, 5):
        gmps_d, imit_d = [], []
        for seed in SEEDS:
            state = dense_runs["gmps"][seed].state
            mt = meta_test(
                family, state.policy(), held_out, steps, 20,
                state.inner_lr(GMPS_DENSE), seed=seed,
            )
            gmps_d.append(mt.mean_final_dists()[-1])
            demos = collect_demos(
                family, train, dense_runs["experts"], IMITATION_DENSE.demo_rollouts, seed
            )
            imit = multitask_imitation(
                family, train, demos, IMITATION_DENSE, seed, ARCH
            )
            mt2 = meta_test(
                family, imit.state.policy(), held_out, steps, 20,
                IMITATION_DENSE.inner_lr, seed=seed,
            )
            imit_d.append(mt2.mean_final_dists()[-1])
        results[steps] = (float(np.mean(gmps_d)), float(np.mean(imit_d)))
    ok = all(g <= i for g, i in results.values())
    print(
        f"\nACCEPTANCE 3 (vs imitation fine-tuning): {'PASS' if ok else 'FAIL'} - "
        f"distance after 1 step: guided {results[1][0]:.3f} vs imitation "
        f"{results[1][1]:.3f}; after 5 steps: {results[5][0]:.3f} vs {results[5][1]:.3f}"
    )
    assert ok


def test_criterion_4_bound_verification():
    """Exact bound check on random chain families plus the consistency case."""
    verdicts = []
    for seed in range(10):
        report = verify_bound_on_random_family(seed)
        verdicts.append(report.holds)
    _, _, mdps = sample_verification_family(99, n_tasks=4)
    experts = [expert_probs_for(m, 0.4) for m in mdps]
    consistent = TabularGmpsResult(
        mdps=mdps, theta_logits=np.zeros((1, 1)), expert_probs=experts,
        adapted_probs=[e.copy() for e in experts], horizon=mdps[0].horizon,
    )
    report0 = check_bound(consistent)
    gap0 = abs(report0.adapted_return - report0.expert_return)
    ok = all(verdicts) and report0.max_kl == 0.0 and gap0 <= 1e-9
    print(
        f"\nACCEPTANCE 4 (bound verification): {'PASS' if ok else 'FAIL'} - "
        f"verdict true on {sum(verdicts)}/10 seeds; zero-error case return gap "
        f"{gap0:.2e} (need <= 1e-9)"
    )
    assert ok


def test_criterion_5_property_suites(tmp_path):
    """Engine, identity, inequality, monotonicity, and determinism properties."""
    # finite-difference agreement, first order then composed second order
    rng = stream(101, "acc-fd")
    for _ in range(100):
        g, params0 = random_smooth_graph(rng)
        fd = central_diff(lambda p: float(g.eval(params=p)), params0, h=1e-5)
        assert_close_rel(diffcore.gradient(g, params0), fd, rel=1e-4)
    rng = stream(102, "acc-fd2")
    for _ in range(100):
        g, params0 = random_smooth_graph(rng)
        weights = [
            g.const(rng.normal(size=g.shape(h)) if g.shape(h) else float(rng.normal()))
            for h in g.param_handles
        ]
        box = {}

        def outer(gr, grads):
            s = gr.const(0.0)
            for w, gh in zip(weights, grads):
                term = gr.mul(w, gr.tanh(gh))
                s = gr.add(s, gr.sum(term) if gr.shape(term) != () else term)
            box["h"] = s
            return s

        meta = diffcore.grad_of_grad(g, params0, outer)
        fd = central_diff(
            lambda p: float(g.eval(params=p, outputs=box["h"])), params0, h=1e-5
        )
        assert_close_rel(meta, fd, rel=1e-3)

    # off-policy re-adaptation equals the on-policy step at collection params
    family = _family("dense")
    task = family.sample_task(stream(103, "t"))
    policy = GaussianMlpPolicy.init(ARCH, stream(103, "p"))
    batch = collect_nav(family, task, policy, 5, stream(103, "roll"))
    assert np.array_equal(
        adapt(policy, batch, 0.1).values, adapt_iw(policy, batch, 0.1).values
    )
    assert np.all(compute_ratios(policy, batch) == 1.0)

    # no-op identities
    assert np.array_equal(adapt(policy, batch, 0.0).values, policy.params.values)
    train = _tasks(family, 2, "acc5-tasks")
    experts = [scripted_expert(t) for t in train]
    cfg = MetaConfig(rollouts_per_task=3, bc_steps=0, iterations=1,
                     demo_rollouts=2, aggregate_rollouts=2)
    demos = collect_demos(family, train, experts, 2, 104)
    state = init_meta_state(ARCH, cfg, 104, demos=demos)
    new_state, _ = gmps_meta_step(family, train, state, cfg, seed=104)
    assert np.array_equal(new_state.theta.values, state.theta.values)

    # divergence inequality chain on random categorical pairs
    rng = stream(105, "acc-chain")
    for _ in range(1000):
        width = int(rng.integers(2, 5))
        p = rng.random(width); p /= p.sum()
        q = rng.random(width); q /= q.sum()
        zero_one, tv, kl = divergence_chain(p, q)
        assert zero_one <= tv + 1e-12 and tv <= np.sqrt(kl) + 1e-12

    # aggregation monotonicity
    result = gmps_train(family, train, cfg, seed=106, arch=ARCH, experts=experts)
    for t in train:
        assert result.state.demos.n_pairs(t.task_id) > demos.n_pairs(t.task_id)

    # byte-identical metrics across reruns, wall clock aside
    from gmpslab.expcli.cli import main

    cfg_path = tmp_path / "det.cfg"
    cfg_path.write_text(
        "run.seeds = [0]\ntask.horizon = 8\ntask.train_tasks = 2\n"
        "policy.hidden = [6]\nmeta.rollouts_per_task = 3\nmeta.bc_steps = 2\n"
        "meta.val_batch = 8\nmeta.iterations = 2\nmeta.aggregate_rollouts = 2\n"
        "meta.demo_rollouts = 2\n"
    )
    scrubbed = []
    for name in ("d1", "d2"):
        out = tmp_path / name
        assert main(["meta-train", "--algo", "gmps", "--config", str(cfg_path),
                     "--out", str(out)]) == 0
        rows = []
        for line in (out / "metrics-gmps-seed0.jsonl").read_text().splitlines():
            record = json.loads(line)
            record.pop("wall_clock")
            rows.append(json.dumps(record))
        scrubbed.append("\n".join(rows))
    assert scrubbed[0] == scrubbed[1]

    print("\nACCEPTANCE 5 (property suites): PASS - finite differences (2x100 "
          "graphs), off-policy identity, no-op identities, divergence chain "
          "(1000 pairs), aggregation monotonicity, byte-identical reruns")


def test_criterion_6_descent_direction():
    """One tiny imitation step strictly descends the frozen meta-objective."""
    family = _family("dense")
    train = _tasks(family, 3, "acc6-tasks")
    experts = [scripted_expert(t) for t in train]
    cfg = MetaConfig(rollouts_per_task=4, bc_steps=1, val_batch=16,
                     iterations=1, demo_rollouts=3, aggregate_rollouts=2)
    demos = collect_demos(family, train, experts, 3, 0)
    base = init_meta_state(ARCH, cfg, 0, demos=demos)
    batches = {
        t.task_id: collect_nav(family, t, base.policy(), 4, stream(0, "acc6", t.task_id))
        for t in train
    }
    failures = 0
    for trial in range(20):
        state = init_meta_state(ARCH, cfg, 200 + trial, demos=demos)
        graph = MetaStepGraph(state.policy(), batches, cfg)
        val = {
            tid: demos.sample_pairs(tid, cfg.val_batch, stream(trial, "acc6-val", tid))
            for tid in graph.task_ids
        }
        packed = graph.pack(state)
        loss0, grad = graph.loss_and_grad(packed, val)
        loss1 = graph.loss(packed - 1e-5 * grad, val)
        if not loss1 < loss0:
            failures += 1
    ok = failures == 0
    print(
        f"\nACCEPTANCE 6 (descent direction): {'PASS' if ok else 'FAIL'} - "
        f"{20 - failures}/20 random initializations strictly decreased the "
        f"frozen imitation objective at step size 1e-5"
    )
    assert ok
