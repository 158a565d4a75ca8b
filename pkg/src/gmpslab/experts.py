"""Per-task experts, supervision datasets, and demonstration file I/O.

Two expert acquisition modes: an analytic proportional controller per
navigation task, and a single task-conditioned policy trained across all
tasks with on-policy policy gradient. Both expose a queryable mean action,
which is what labeling uses; demonstrations and aggregated labels are
collected into an append-only per-task dataset.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .diffcore import Graph, gradient
from .envs import Nav2dFamily, StepCounter, Task
from .innerloop import Trajectory, advantages, stack_steps, build_surrogate
from .policy import ContextualPolicy, GaussianMlpPolicy, MlpArch
from .rng import stream
from .sampling import collect_nav, task_map

DEMO_SCHEMA_VERSION = 1


class DemoFormatError(ValueError):
    pass


class ExpertError(ValueError):
    pass


# ---------------------------------------------------------------------------
# Experts


@dataclass(frozen=True)
class ScriptedExpert:
    """Deterministic proportional controller toward the bound task's goal."""

    task: Task
    gain: float = 5.0
    a_max: float = 1.0

    def mean_action(self, states: np.ndarray) -> np.ndarray:
        states = np.atleast_2d(np.asarray(states, dtype=np.float64))
        raw = self.gain * (self.task.goal - states)
        return np.clip(raw, -self.a_max, self.a_max)

    def act(self, obs: np.ndarray, rng: np.random.Generator):
        return self.mean_action(obs), None


@dataclass(frozen=True)
class TrainedExpert:
    """A contextual policy bound to one task's context."""

    policy: ContextualPolicy
    task: Task

    def mean_action(self, states: np.ndarray) -> np.ndarray:
        return self.policy.mean_action(np.atleast_2d(states), self.task.context)

    def act(self, obs: np.ndarray, rng: np.random.Generator):
        actions, _ = self.policy.act(obs, self.task.context, rng)
        return actions, None


def scripted_expert(task: Task, gain: float = 5.0, a_max: float = 1.0) -> ScriptedExpert:
    if task.kind != "nav2d":
        raise ExpertError("scripted controller only supports navigation tasks")
    return ScriptedExpert(task=task, gain=gain, a_max=a_max)


def label_states(expert, states) -> list[tuple[np.ndarray, np.ndarray]]:
    """One (state, expert mean action) pair per input state."""
    states = np.atleast_2d(np.asarray(states, dtype=np.float64))
    if states.shape[0] == 0:
        raise ExpertError("no states to label")
    actions = expert.mean_action(states)
    return [(states[i].copy(), actions[i].copy()) for i in range(states.shape[0])]


# ---------------------------------------------------------------------------
# Contextual expert training (on-policy policy gradient across tasks)


@dataclass
class ExpertTrainResult:
    policy: ContextualPolicy
    per_task_returns: dict[int, float]
    env_steps: int


def train_contextual_expert(
    family: Nav2dFamily,
    tasks: list[Task],
    budget: int,
    rng_seed: int,
    hidden: tuple[int, ...] = (32, 32),
    rollouts_per_task: int = 10,
    lr: float = 0.1,
    grad_clip: float = 10.0,
    discount: float = 0.99,
) -> ExpertTrainResult:
    """Train one goal-conditioned policy on all tasks within a step budget."""
    arch = MlpArch(
        obs_dim=family.obs_dim,
        act_dim=family.act_dim,
        hidden=tuple(hidden),
        context_dim=family.context_dim,
        bias_transform_dim=0,
    )
    policy = ContextualPolicy(GaussianMlpPolicy.init(arch, stream(rng_seed, "expert-init")))
    steps_per_iter = len(tasks) * rollouts_per_task * (family.horizon - 1)
    used = 0
    iteration = 0
    returns: dict[int, float] = {t.task_id: float("nan") for t in tasks}
    while used + steps_per_iter <= budget:
        batches = task_map(
            lambda task: collect_nav(
                family,
                task,
                policy,
                rollouts_per_task,
                stream(rng_seed, "expert-rollout", iteration, task.task_id),
                context=family.context(task),
            ),
            tasks,
        )
        used += steps_per_iter
        grad = np.zeros(policy.base.params.size)
        for task, trajs in zip(tasks, batches):
            returns[task.task_id] = float(np.mean([t.rewards.mean() for t in trajs]))
            adv = advantages(trajs, discount)
            g = Graph()
            handles = g.params_like(policy.base.params.layout)
            obs_all, act_all = stack_steps(trajs)
            ctx = np.broadcast_to(
                family.context(task), (obs_all.shape[0], family.context_dim)
            )
            obs_aug = np.concatenate([obs_all, ctx], axis=1)
            loss = build_surrogate(g, handles, policy.base, obs_aug, act_all, adv.flat())
            g.set_output(loss)
            grad += gradient(g, policy.base.params)
        grad /= len(tasks)
        norm = np.linalg.norm(grad)
        if norm > grad_clip:
            grad *= grad_clip / norm
        new_values = policy.base.params.values - lr * grad
        policy = policy.with_params(policy.base.params.with_values(new_values))
        iteration += 1
    return ExpertTrainResult(policy=policy, per_task_returns=returns, env_steps=used)


def trained_experts(result: ExpertTrainResult, tasks: list[Task]) -> list[TrainedExpert]:
    return [TrainedExpert(policy=result.policy, task=t) for t in tasks]


# ---------------------------------------------------------------------------
# Demonstration datasets


@dataclass
class _TaskDemos:
    context: np.ndarray | None
    pair_states: list[np.ndarray] = field(default_factory=list)
    pair_actions: list[np.ndarray] = field(default_factory=list)
    trajectories: list[Trajectory] = field(default_factory=list)


class DemoSet:
    """Per-task expert-labeled (state, action) pairs plus source rollouts.

    Pairs are append-only; aggregation during meta-training only ever adds.
    """

    def __init__(self):
        self._tasks: dict[int, _TaskDemos] = {}

    def task_ids(self) -> list[int]:
        return sorted(self._tasks)

    def _bucket(self, task_id: int, context=None) -> _TaskDemos:
        if task_id not in self._tasks:
            self._tasks[task_id] = _TaskDemos(context=context)
        return self._tasks[task_id]

    def add_pairs(self, task_id: int, pairs, context=None):
        bucket = self._bucket(task_id, context)
        for state, action in pairs:
            state = np.asarray(state, dtype=np.float64)
            action = np.asarray(action, dtype=np.float64)
            if not (np.all(np.isfinite(state)) and np.all(np.isfinite(action))):
                raise DemoFormatError("non-finite demo pair")
            bucket.pair_states.append(state)
            bucket.pair_actions.append(action)

    def add_trajectory(self, task_id: int, trajectory: Trajectory, context=None):
        self._bucket(task_id, context).trajectories.append(trajectory)

    def n_pairs(self, task_id: int) -> int:
        if task_id not in self._tasks:
            return 0
        return len(self._tasks[task_id].pair_states)

    def pairs(self, task_id: int):
        bucket = self._tasks[task_id]
        return np.stack(bucket.pair_states), np.stack(bucket.pair_actions)

    def trajectories(self, task_id: int) -> list[Trajectory]:
        return list(self._tasks[task_id].trajectories)

    def context(self, task_id: int):
        return self._tasks[task_id].context

    def sample_pairs(self, task_id: int, n: int, rng: np.random.Generator):
        """Uniform draw without replacement; all pairs if fewer than n."""
        states, actions = self.pairs(task_id)
        total = states.shape[0]
        if total == 0:
            raise ExpertError(f"no demo pairs for task {task_id}")
        if total <= n:
            return states, actions
        idx = rng.choice(total, size=n, replace=False)
        return states[idx], actions[idx]

    def __eq__(self, other):
        if not isinstance(other, DemoSet) or self.task_ids() != other.task_ids():
            return NotImplemented if not isinstance(other, DemoSet) else False
        for tid in self.task_ids():
            a, b = self._tasks[tid], other._tasks[tid]
            if len(a.pair_states) != len(b.pair_states):
                return False
            if not all(
                np.array_equal(x, y) for x, y in zip(a.pair_states, b.pair_states)
            ):
                return False
            if not all(
                np.array_equal(x, y) for x, y in zip(a.pair_actions, b.pair_actions)
            ):
                return False
            if len(a.trajectories) != len(b.trajectories):
                return False
            for ta, tb in zip(a.trajectories, b.trajectories):
                if not (
                    np.array_equal(ta.states, tb.states)
                    and np.array_equal(ta.actions, tb.actions)
                    and np.array_equal(ta.rewards, tb.rewards)
                ):
                    return False
        return True


def collect_demos(
    family: Nav2dFamily,
    tasks: list[Task],
    experts: list,
    rollouts_per_task: int,
    rng_seed: int,
    counter: StepCounter | None = None,
    exploration_scale: float = 0.3,
) -> DemoSet:
    """Seed a DemoSet with expert rollouts.

    Scripted experts are deterministic, so rollout actions are jittered for
    state coverage; recorded actions are always the expert's mean action at
    the visited state, never the jittered execution.
    """
    from .rng import stream

    demos = DemoSet()
    for task, expert in zip(tasks, experts):
        rng = stream(rng_seed, "demos", task.task_id)
        noisy = _NoisyActor(expert, exploration_scale)
        trajs = collect_nav(
            family, task, noisy, rollouts_per_task, rng,
            counter=counter, attach_logprobs=False,
        )
        for traj in trajs:
            visited = traj.states[:-1]
            labels = expert.mean_action(visited)
            labeled = Trajectory(
                states=traj.states,
                actions=labels,
                rewards=traj.rewards,
                behavior_logprobs=None,
                task_id=task.task_id,
            )
            demos.add_trajectory(task.task_id, labeled, context=task.context)
            demos.add_pairs(
                task.task_id,
                zip(visited, labels),
                context=task.context,
            )
    return demos


@dataclass(frozen=True)
class _NoisyActor:
    expert: object
    scale: float

    def act(self, obs, rng):
        mean, _ = self.expert.act(obs, rng)
        return mean + self.scale * rng.standard_normal(mean.shape), None


# ---------------------------------------------------------------------------
# Demonstration files: one JSON record per line


def write_demos(path, demos: DemoSet):
    with open(path, "w", encoding="utf-8") as fh:
        for task_id in demos.task_ids():
            context = demos.context(task_id)
            for traj in demos.trajectories(task_id):
                record = {
                    "schema_version": DEMO_SCHEMA_VERSION,
                    "task_id": task_id,
                    "context": None if context is None else context.tolist(),
                    "states": traj.states.tolist(),
                    "actions": traj.actions.tolist(),
                    "rewards": traj.rewards.tolist(),
                }
                try:
                    fh.write(json.dumps(record, allow_nan=False) + "\n")
                except ValueError as exc:
                    raise DemoFormatError(f"non-finite value in task {task_id}") from exc


def read_demos(path) -> DemoSet:
    demos = DemoSet()
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DemoFormatError(f"line {lineno}: unparseable record") from exc
            if record.get("schema_version") != DEMO_SCHEMA_VERSION:
                raise DemoFormatError(
                    f"line {lineno}: unknown schema version {record.get('schema_version')!r}"
                )
            states = np.asarray(record["states"], dtype=np.float64)
            actions = np.asarray(record["actions"], dtype=np.float64)
            rewards = np.asarray(record["rewards"], dtype=np.float64)
            if not (
                np.all(np.isfinite(states))
                and np.all(np.isfinite(actions))
                and np.all(np.isfinite(rewards))
            ):
                raise DemoFormatError(f"line {lineno}: non-finite value")
            if len(states) != len(actions) + 1 or len(rewards) != len(actions):
                raise DemoFormatError(f"line {lineno}: length mismatch")
            context = record.get("context")
            context = None if context is None else np.asarray(context, dtype=np.float64)
            task_id = int(record["task_id"])
            traj = Trajectory(
                states=states,
                actions=actions,
                rewards=rewards,
                behavior_logprobs=None,
                task_id=task_id,
            )
            demos.add_trajectory(task_id, traj, context=context)
            demos.add_pairs(task_id, zip(states[:-1], actions), context=context)
    return demos
