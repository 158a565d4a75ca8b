"""Meta-training: imitation-guided meta-learning and its baselines.

The guided trainer alternates two phases per meta-iteration. First it
collects a batch of on-policy rollouts per task at the current
initialization, then takes many off-policy imitation steps: each step
re-adapts the initialization on the frozen rollouts through clipped
importance ratios, scores the adapted policy's behavior-cloning loss on a
fresh batch of expert-labeled pairs, and descends the meta-gradient.
Second (with aggregation on) it adapts the updated initialization per task,
rolls the adapted policies out, labels the visited states with the experts,
and appends the labels to the per-task datasets.

Baselines: policy-gradient meta-learning with an on-policy outer objective,
a single multi-task policy, and multi-task imitation; all share the
meta-test protocol, which adapts with rewards only.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from .diffcore import Graph, ParamVector, gradient
from .envs import Nav2dFamily, StepCounter, Task
from .experts import DemoSet, collect_demos
from .innerloop import advantages, adapt, build_adapted_handles, build_surrogate, stack_steps
from .policy import GaussianMlpPolicy, MlpArch, build_gaussian_logprob, build_mlp_mean
from .rng import stream
from .sampling import collect_nav, nav_batch_stats, task_map


class MetaTrainError(ValueError):
    pass


@dataclass(frozen=True)
class MetaConfig:
    inner_lr: float = 0.1
    learn_inner_lr: bool = True
    outer_lr: float = 0.02
    rollouts_per_task: int = 20
    bc_steps: int = 200
    val_batch: int = 64
    iterations: int = 30
    aggregation: bool = True
    aggregate_rollouts: int = 5
    demo_rollouts: int = 20
    discount: float = 0.99
    grad_clip: float = 10.0
    adapt_scope: str = "all"
    adapt_logstd: bool = True
    task_batch: int = 0  # 0 means every task each meta-iteration

    def __post_init__(self):
        if self.inner_lr < 0 or self.outer_lr <= 0:
            raise MetaTrainError("step sizes must be positive")
        if self.rollouts_per_task < 1 or self.bc_steps < 0:
            raise MetaTrainError("rollouts_per_task >= 1 and bc_steps >= 0 required")
        if self.learn_inner_lr and self.inner_lr <= 0:
            raise MetaTrainError("meta-learned inner step size needs a positive init")


@dataclass(frozen=True)
class MetaState:
    """Trainer state. ``demos`` is shared and append-only across iterations."""

    arch: MlpArch
    theta: ParamVector
    log_inner_lr: float | None  # None when the inner step size is fixed
    demos: DemoSet
    env_steps: int
    iteration: int

    def policy(self) -> GaussianMlpPolicy:
        return GaussianMlpPolicy(arch=self.arch, params=self.theta)

    def inner_lr(self, config: MetaConfig) -> float:
        if self.log_inner_lr is None:
            return config.inner_lr
        return math.exp(self.log_inner_lr)


@dataclass
class TrainResult:
    state: MetaState
    records: list[dict]
    counter: StepCounter  # independent transition count from the collectors


def init_meta_state(
    arch: MlpArch, config: MetaConfig, seed: int, demos: DemoSet | None = None
) -> MetaState:
    policy = GaussianMlpPolicy.init(arch, stream(seed, "meta-init"))
    mask = policy.adaptation_mask(config.adapt_scope, adapt_logstd=config.adapt_logstd)
    return MetaState(
        arch=arch,
        theta=policy.params.with_mask(mask),
        log_inner_lr=math.log(config.inner_lr) if config.learn_inner_lr else None,
        demos=demos if demos is not None else DemoSet(),
        env_steps=0,
        iteration=0,
    )


# ---------------------------------------------------------------------------
# Behavior cloning loss


def build_bc_loss(g: Graph, handles, arch: MlpArch, obs_h: int, act_h: int) -> int:
    """Mean negative log-likelihood of labeled actions."""
    mean = build_mlp_mean(g, handles, obs_h, arch)
    lp = build_gaussian_logprob(g, handles, mean, act_h, arch)
    return g.neg(g.mean(lp))


def bc_loss(policy: GaussianMlpPolicy, labeled_pairs) -> Graph:
    """Standalone scalar graph of the imitation loss at the policy's params."""
    states, actions = labeled_pairs
    if len(states) == 0:
        raise MetaTrainError("no labeled pairs")
    g = Graph()
    handles = g.params_like(policy.params.layout)
    out = build_bc_loss(
        g,
        handles,
        policy.arch,
        g.const(np.atleast_2d(np.asarray(states, dtype=np.float64))),
        g.const(np.atleast_2d(np.asarray(actions, dtype=np.float64))),
    )
    g.set_output(out)
    return g


# ---------------------------------------------------------------------------
# The per-iteration meta-step graph


class MetaStepGraph:
    """One meta-iteration's objective, built once and re-evaluated per step.

    Parameters are the policy vector plus (optionally) the log inner step
    size; validation batches bind to input leaves so every imitation step
    draws fresh pairs without rebuilding the graph.
    """

    def __init__(self, policy: GaussianMlpPolicy, batches: dict, config: MetaConfig):
        if not batches:
            raise MetaTrainError("no task batches")
        self.config = config
        self.task_ids = sorted(batches)
        g = Graph()
        handles = g.params_like(policy.params.layout)
        if config.learn_inner_lr:
            lr_h = g.exp(g.param("log_inner_lr", ()))
        else:
            lr_h = g.const(float(config.inner_lr))
        mask = policy.params.mask
        arch = policy.arch
        total = g.const(0.0)
        for tid in self.task_ids:
            trajs = batches[tid]
            adv = advantages(trajs, config.discount)
            phi = build_adapted_handles(
                g, handles, policy, trajs, adv, lr_h, mask, off_policy=True
            )
            obs_in = g.input(f"val_obs_{tid}", (None, arch.obs_dim + arch.context_dim))
            act_in = g.input(f"val_act_{tid}", (None, arch.act_dim))
            total = g.add(total, build_bc_loss(g, phi, arch, obs_in, act_in))
        total = g.div(total, g.const(float(len(self.task_ids))))
        g.set_output(total)
        self.graph = g
        self.loss_handle = total
        self.grad_handles = g.grad(total, g.param_handles)

    def pack(self, state: MetaState) -> np.ndarray:
        if self.config.learn_inner_lr:
            return np.concatenate([state.theta.values, [state.log_inner_lr]])
        return state.theta.values.copy()

    def unpack(self, packed: np.ndarray, state: MetaState) -> MetaState:
        if self.config.learn_inner_lr:
            return replace(
                state,
                theta=state.theta.with_values(packed[:-1]),
                log_inner_lr=float(packed[-1]),
            )
        return replace(state, theta=state.theta.with_values(packed))

    def _inputs(self, val_batches: dict) -> dict:
        bound = {}
        for tid in self.task_ids:
            obs, act = val_batches[tid]
            bound[f"val_obs_{tid}"] = obs
            bound[f"val_act_{tid}"] = act
        return bound

    def loss(self, packed: np.ndarray, val_batches: dict) -> float:
        return float(self.graph.eval(params=packed, inputs=self._inputs(val_batches)))

    def loss_and_grad(self, packed: np.ndarray, val_batches: dict):
        out = self.graph.eval(
            params=packed,
            inputs=self._inputs(val_batches),
            outputs=[self.loss_handle, *self.grad_handles],
        )
        return float(out[0]), np.concatenate([p.ravel() for p in out[1:]])


def _clipped(grad: np.ndarray, bound: float) -> np.ndarray:
    norm = float(np.linalg.norm(grad))
    if norm > bound:
        return grad * (bound / norm)
    return grad


def _select_tasks(tasks: list[Task], config: MetaConfig, seed: int, iteration: int):
    if config.task_batch and config.task_batch < len(tasks):
        rng = stream(seed, "task-minibatch", iteration)
        idx = rng.choice(len(tasks), size=config.task_batch, replace=False)
        return [tasks[i] for i in sorted(idx)]
    return list(tasks)


def _pack_values(state: MetaState, config: MetaConfig) -> np.ndarray:
    if config.learn_inner_lr:
        return np.concatenate([state.theta.values, [state.log_inner_lr]])
    return state.theta.values.copy()


def _unpack_values(packed: np.ndarray, state: MetaState, config: MetaConfig) -> MetaState:
    if config.learn_inner_lr:
        return replace(
            state,
            theta=state.theta.with_values(packed[:-1]),
            log_inner_lr=float(packed[-1]),
        )
    return replace(state, theta=state.theta.with_values(packed))


# ---------------------------------------------------------------------------
# GMPS


def gmps_meta_step(
    family: Nav2dFamily,
    tasks: list[Task],
    state: MetaState,
    config: MetaConfig,
    seed: int,
    counter: StepCounter | None = None,
):
    """Sample per-task rollouts at theta, then take bc_steps imitation steps.

    The environment count grows by exactly rollouts_per_task * (horizon - 1)
    per task in the minibatch; imitation steps cost no environment samples.
    Returns (new_state, info) with the rollout batches kept for inspection.
    """
    batch_tasks = _select_tasks(tasks, config, seed, state.iteration)
    for task in batch_tasks:
        if state.demos.n_pairs(task.task_id) == 0:
            raise MetaTrainError(f"no expert data for task {task.task_id}")
    policy = state.policy()
    batches = dict(
        zip(
            [t.task_id for t in batch_tasks],
            task_map(
                lambda task: collect_nav(
                    family,
                    task,
                    policy,
                    config.rollouts_per_task,
                    stream(seed, "gmps-rollout", state.iteration, task.task_id),
                    counter=counter,
                ),
                batch_tasks,
            ),
        )
    )
    pre_stats = {
        task.task_id: nav_batch_stats(family, task, batches[task.task_id])
        for task in batch_tasks
    }

    step_graph = MetaStepGraph(policy, batches, config)
    packed = step_graph.pack(state)
    losses = []
    for n in range(config.bc_steps):
        val_batches = {
            tid: state.demos.sample_pairs(
                tid, config.val_batch, stream(seed, "dval", state.iteration, tid, n)
            )
            for tid in step_graph.task_ids
        }
        loss, grad = step_graph.loss_and_grad(packed, val_batches)
        losses.append(loss)
        packed = packed - config.outer_lr * _clipped(grad, config.grad_clip)

    new_state = step_graph.unpack(packed, state)
    new_state = replace(
        new_state,
        env_steps=state.env_steps
        + config.rollouts_per_task * (family.horizon - 1) * len(batch_tasks),
        iteration=state.iteration + 1,
    )
    info = {
        "bc_loss": float(np.mean(losses)) if losses else float("nan"),
        "pre_returns": {tid: s["return"] for tid, s in pre_stats.items()},
        "batches": batches,
        "theta_init": state.theta,
    }
    return new_state, info


def gmps_train(
    family: Nav2dFamily,
    tasks: list[Task],
    config: MetaConfig,
    seed: int,
    arch: MlpArch,
    experts: list | None = None,
    demos: DemoSet | None = None,
    initial_env_steps: int = 0,
) -> TrainResult:
    """Full guided meta-training loop.

    Either per-task experts (queried during aggregation) or a pre-collected
    demo set must be supplied; with experts and no demos the demo set is
    seeded here and its rollout cost counted. With aggregation off the loop
    runs purely off the fixed expert data.
    """
    if experts is None and demos is None:
        raise MetaTrainError("need experts or a demo set")
    if config.aggregation and experts is None:
        raise MetaTrainError("aggregation requires queryable experts")
    counter = StepCounter()
    if demos is None:
        demos = collect_demos(
            family, tasks, experts, config.demo_rollouts, seed, counter=counter
        )
    state = init_meta_state(arch, config, seed, demos=demos)
    state = replace(state, env_steps=initial_env_steps + counter.count)

    experts_by_task = (
        {t.task_id: e for t, e in zip(tasks, experts)} if experts is not None else {}
    )
    records: list[dict] = []
    for _ in range(config.iterations):
        state, info = gmps_meta_step(family, tasks, state, config, seed, counter=counter)

        # adaptation pass at the updated initialization: measures post-update
        # behavior and (with aggregation on) grows the expert-labeled datasets
        post_stats = {}
        for task in tasks:
            tr_batch = collect_nav(
                family, task, state.policy(), config.rollouts_per_task,
                stream(seed, "agg-rollout", state.iteration, task.task_id),
                counter=counter,
            )
            phi = adapt(
                state.policy(), tr_batch, state.inner_lr(config),
                mask=state.theta.mask, discount=config.discount,
            )
            adapted = state.policy().with_params(phi)
            eval_batch = collect_nav(
                family, task, adapted, config.aggregate_rollouts,
                stream(seed, "post-rollout", state.iteration, task.task_id),
                counter=counter,
            )
            post_stats[task.task_id] = nav_batch_stats(family, task, eval_batch)
            if config.aggregation:
                expert = experts_by_task[task.task_id]
                for traj in eval_batch:
                    visited = traj.states[:-1]
                    state.demos.add_pairs(
                        task.task_id,
                        zip(visited, expert.mean_action(visited)),
                        context=task.context,
                    )
        extra = (config.rollouts_per_task + config.aggregate_rollouts) * (
            family.horizon - 1
        ) * len(tasks)
        state = replace(state, env_steps=state.env_steps + extra)

        per_task = [post_stats[t.task_id]["return"] for t in tasks]
        records.append(
            {
                "iteration": state.iteration,
                "env_steps": state.env_steps,
                "pre_return": float(np.mean(list(info["pre_returns"].values()))),
                "post_return": float(np.mean(per_task)),
                "post_success": float(
                    np.mean([post_stats[t.task_id]["success"] for t in tasks])
                ),
                "bc_loss": info["bc_loss"],
                "per_task_returns": per_task,
            }
        )
    return TrainResult(state=state, records=records, counter=counter)


# ---------------------------------------------------------------------------
# Baselines


def maml_train(
    family: Nav2dFamily,
    tasks: list[Task],
    config: MetaConfig,
    seed: int,
    arch: MlpArch,
    initial_env_steps: int = 0,
) -> TrainResult:
    """Policy-gradient meta-learning with an on-policy outer objective.

    The outer optimizer is plain gradient descent with norm clipping; both
    the adaptation rollouts and the post-update rollouts count.
    """
    counter = StepCounter()
    state = replace(
        init_meta_state(arch, config, seed), env_steps=initial_env_steps
    )
    records: list[dict] = []
    for iteration in range(config.iterations):
        batch_tasks = _select_tasks(tasks, config, seed, iteration)
        policy = state.policy()
        g = Graph()
        handles = g.params_like(policy.params.layout)
        if config.learn_inner_lr:
            lr_h = g.exp(g.param("log_inner_lr", ()))
        else:
            lr_h = g.const(float(config.inner_lr))
        packed = _pack_values(state, config)
        total = g.const(0.0)
        pre_returns, post_returns, post_succ = [], [], []
        for task in batch_tasks:
            tr_batch = collect_nav(
                family, task, policy, config.rollouts_per_task,
                stream(seed, "maml-train-rollout", iteration, task.task_id),
                counter=counter,
            )
            pre_returns.append(nav_batch_stats(family, task, tr_batch)["return"])
            adv = advantages(tr_batch, config.discount)
            phi = build_adapted_handles(
                g, handles, policy, tr_batch, adv, lr_h, state.theta.mask,
                off_policy=False,
            )
            names = [n for n, _ in policy.params.layout]
            phi_vals = g.eval(params=packed, outputs=[phi[n] for n in names])
            adapted = policy.with_params(
                policy.params.with_values(np.concatenate([p.ravel() for p in phi_vals]))
            )
            val_batch = collect_nav(
                family, task, adapted, config.rollouts_per_task,
                stream(seed, "maml-val-rollout", iteration, task.task_id),
                counter=counter,
            )
            stats = nav_batch_stats(family, task, val_batch)
            post_returns.append(stats["return"])
            post_succ.append(stats["success"])
            val_adv = advantages(val_batch, config.discount)
            obs_all, act_all = stack_steps(val_batch)
            total = g.add(
                total, build_surrogate(g, phi, policy, obs_all, act_all, val_adv.flat())
            )
        total = g.div(total, g.const(float(len(batch_tasks))))
        g.set_output(total)
        pieces = g.eval(params=packed, outputs=g.grad(total, g.param_handles))
        grad = np.concatenate([p.ravel() for p in pieces])
        packed = packed - config.outer_lr * _clipped(grad, config.grad_clip)
        state = _unpack_values(packed, state, config)
        state = replace(
            state,
            env_steps=state.env_steps
            + 2 * config.rollouts_per_task * (family.horizon - 1) * len(batch_tasks),
            iteration=iteration + 1,
        )
        records.append(
            {
                "iteration": state.iteration,
                "env_steps": state.env_steps,
                "pre_return": float(np.mean(pre_returns)),
                "post_return": float(np.mean(post_returns)),
                "post_success": float(np.mean(post_succ)),
                "bc_loss": float("nan"),
                "per_task_returns": post_returns,
            }
        )
    return TrainResult(state=state, records=records, counter=counter)


def multitask_train(
    family: Nav2dFamily,
    tasks: list[Task],
    config: MetaConfig,
    seed: int,
    arch: MlpArch,
) -> TrainResult:
    """One non-adaptive policy trained by policy gradient across all tasks.

    Pre- and post-update returns coincide since nothing adapts.
    """
    counter = StepCounter()
    state = init_meta_state(arch, config, seed)
    records: list[dict] = []
    for iteration in range(config.iterations):
        policy = state.policy()
        grad = np.zeros(policy.params.size)
        returns = []
        for task in tasks:
            batch = collect_nav(
                family, task, policy, config.rollouts_per_task,
                stream(seed, "multitask-rollout", iteration, task.task_id),
                counter=counter,
            )
            returns.append(nav_batch_stats(family, task, batch)["return"])
            adv = advantages(batch, config.discount)
            g = Graph()
            handles = g.params_like(policy.params.layout)
            obs_all, act_all = stack_steps(batch)
            g.set_output(
                build_surrogate(g, handles, policy, obs_all, act_all, adv.flat())
            )
            grad += gradient(g, policy.params)
        grad /= len(tasks)
        new_values = policy.params.values - config.outer_lr * _clipped(
            grad, config.grad_clip
        )
        state = replace(
            state,
            theta=state.theta.with_values(new_values),
            env_steps=state.env_steps
            + config.rollouts_per_task * (family.horizon - 1) * len(tasks),
            iteration=iteration + 1,
        )
        records.append(
            {
                "iteration": state.iteration,
                "env_steps": state.env_steps,
                "pre_return": float(np.mean(returns)),
                "post_return": float(np.mean(returns)),
                "post_success": float("nan"),
                "bc_loss": float("nan"),
                "per_task_returns": returns,
            }
        )
    return TrainResult(state=state, records=records, counter=counter)


def multitask_imitation(
    family: Nav2dFamily,
    tasks: list[Task],
    demos: DemoSet,
    config: MetaConfig,
    seed: int,
    arch: MlpArch,
    initial_env_steps: int = 0,
) -> TrainResult:
    """Plain behavior cloning across all tasks' demo pairs; no adaptation."""
    counter = StepCounter()
    state = replace(
        init_meta_state(arch, config, seed, demos=demos),
        env_steps=initial_env_steps,
    )
    records: list[dict] = []
    policy = state.policy()
    task_ids = [t.task_id for t in tasks]
    for iteration in range(config.iterations):
        losses = []
        for n in range(config.bc_steps):
            obs_parts, act_parts = [], []
            for tid in task_ids:
                obs, act = demos.sample_pairs(
                    tid, config.val_batch, stream(seed, "mt-bc", iteration, tid, n)
                )
                obs_parts.append(obs)
                act_parts.append(act)
            pairs = (np.concatenate(obs_parts), np.concatenate(act_parts))
            graph = bc_loss(policy, pairs)
            losses.append(float(graph.eval(params=policy.params)))
            grad = gradient(graph, policy.params)
            new_values = policy.params.values - config.outer_lr * _clipped(
                grad, config.grad_clip
            )
            policy = policy.with_params(policy.params.with_values(new_values))
        state = replace(state, theta=policy.params, iteration=iteration + 1)
        records.append(
            {
                "iteration": state.iteration,
                "env_steps": state.env_steps,
                "pre_return": float("nan"),
                "post_return": float("nan"),
                "post_success": float("nan"),
                "bc_loss": float(np.mean(losses)) if losses else float("nan"),
                "per_task_returns": [],
            }
        )
    return TrainResult(state=state, records=records, counter=counter)


# ---------------------------------------------------------------------------
# Meta-test


@dataclass
class MetaTestCurve:
    task_id: int
    returns: list[float]
    successes: list[float]
    final_dists: list[float]


@dataclass
class MetaTestResult:
    curves: list[MetaTestCurve]
    env_steps: int

    def mean_returns(self) -> np.ndarray:
        return np.mean([c.returns for c in self.curves], axis=0)

    def mean_successes(self) -> np.ndarray:
        return np.mean([c.successes for c in self.curves], axis=0)

    def mean_final_dists(self) -> np.ndarray:
        return np.mean([c.final_dists for c in self.curves], axis=0)


def meta_test(
    family: Nav2dFamily,
    policy: GaussianMlpPolicy,
    held_out_tasks: list[Task],
    n_grad_steps: int,
    rollouts_per_step: int,
    inner_lr: float,
    seed: int,
    discount: float = 0.99,
    counter: StepCounter | None = None,
) -> MetaTestResult:
    """Reward-only adaptation on held-out tasks.

    Reports rollout statistics before adaptation and after each gradient
    step; the rollouts that measure a stage also feed the next adaptation.
    No expert or task-context access.
    """
    counter = counter if counter is not None else StepCounter()
    curves = []
    for task in held_out_tasks:
        current = policy
        returns, succ, dists = [], [], []
        batch = collect_nav(
            family, task, current, rollouts_per_step,
            stream(seed, "metatest", task.task_id, 0), counter=counter,
        )
        stats = nav_batch_stats(family, task, batch)
        returns.append(stats["return"])
        succ.append(stats["success"])
        dists.append(stats["final_dist"])
        for step in range(1, n_grad_steps + 1):
            phi = adapt(
                current, batch, inner_lr, mask=current.params.mask, discount=discount
            )
            current = current.with_params(phi)
            batch = collect_nav(
                family, task, current, rollouts_per_step,
                stream(seed, "metatest", task.task_id, step), counter=counter,
            )
            stats = nav_batch_stats(family, task, batch)
            returns.append(stats["return"])
            succ.append(stats["success"])
            dists.append(stats["final_dist"])
        curves.append(
            MetaTestCurve(
                task_id=task.task_id, returns=returns, successes=succ, final_dists=dists
            )
        )
    return MetaTestResult(curves=curves, env_steps=counter.count)
