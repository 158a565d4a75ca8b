"""Task-distribution environments.

Two families: a 2D point-navigation distribution whose goals sit on the first
quadrant of a radius-2 circle (dense and sparse reward variants), and small
chain MDPs with per-task reward tables that can be solved exactly by backward
dynamic programming for bound verification.

Navigation observations are the agent position only; the goal must be
inferred from reward. The task context (the goal, or a one-hot task index)
is reachable only through an explicit accessor meant for expert training.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class EnvError(ValueError):
    pass


@dataclass(frozen=True)
class Task:
    """One draw from a task distribution."""

    task_id: int
    kind: str  # "nav2d" | "chain"
    reward_variant: str = "dense"
    goal: np.ndarray | None = None
    start: np.ndarray | None = None
    reward_table: np.ndarray | None = None
    context: np.ndarray | None = None


@dataclass(frozen=True)
class EnvState:
    """Navigation state: position plus the 1-based step index."""

    position: np.ndarray
    t: int
    init_l1: float  # initial L1 distance to goal, fixed per episode

    def __post_init__(self):
        if not np.all(np.isfinite(self.position)):
            raise EnvError("non-finite position")


class StepCounter:
    """Counts simulated environment transitions, one per executed action."""

    def __init__(self):
        self.count = 0

    def add(self, n: int):
        self.count += int(n)


# ---------------------------------------------------------------------------
# Rewards (navigation)

GOAL_RADIUS = 2.0
SUCCESS_RADIUS = 0.8
REWARD_OFFSET = 4.0


def goal_from_angle(angle: float) -> np.ndarray:
    return GOAL_RADIUS * np.array([np.cos(angle), np.sin(angle)])


def reward_dense(x: np.ndarray, goal: np.ndarray) -> float:
    return float(-np.sum(np.abs(np.asarray(x) - np.asarray(goal))) + REWARD_OFFSET)


def reward_sparse(x: np.ndarray, goal: np.ndarray, init_l1: float) -> float:
    """Dense value inside the success disc, flat penalty outside."""
    if init_l1 < 0:
        raise EnvError("init_l1 must be nonnegative")
    if np.linalg.norm(np.asarray(x) - np.asarray(goal)) <= SUCCESS_RADIUS:
        return reward_dense(x, goal)
    return float(-init_l1 + REWARD_OFFSET)


# ---------------------------------------------------------------------------
# 2D navigation family


@dataclass(frozen=True)
class Nav2dFamily:
    """Point mass on the plane, goals on a quarter circle of radius 2 m.

    Dynamics: x' = x + dt * clip(a, -a_max, a_max), fixed start at the
    origin, episode length ``horizon`` states (horizon - 1 actions).
    """

    horizon: int = 50
    reward_variant: str = "dense"
    dt: float = 0.1
    a_max: float = 1.0
    obs_dim: int = 2
    act_dim: int = 2
    context_dim: int = 2

    def sample_task(self, rng: np.random.Generator, task_id: int = 0) -> Task:
        angle = rng.uniform(0.0, np.pi / 2.0)
        goal = goal_from_angle(angle)
        return Task(
            task_id=task_id,
            kind="nav2d",
            reward_variant=self.reward_variant,
            goal=goal,
            start=np.zeros(2),
            context=goal.copy(),
        )

    def sample_tasks(self, n: int, rng: np.random.Generator, id_offset: int = 0):
        return [self.sample_task(rng, task_id=id_offset + i) for i in range(n)]

    def reset(self, task: Task) -> EnvState:
        init_l1 = float(np.sum(np.abs(task.start - task.goal)))
        return EnvState(position=task.start.copy(), t=1, init_l1=init_l1)

    def step(self, task: Task, state: EnvState, action: np.ndarray):
        """Advance one transition; returns (state, reward, done)."""
        if state.t >= self.horizon:
            raise EnvError(f"episode already done at t={state.t}")
        positions, rewards = self.step_batch(
            task,
            state.position[None, :],
            np.asarray(action, dtype=np.float64)[None, :],
            np.array([state.init_l1]),
        )
        nxt = EnvState(position=positions[0], t=state.t + 1, init_l1=state.init_l1)
        return nxt, float(rewards[0]), nxt.t == self.horizon

    def step_batch(self, task: Task, positions, actions, init_l1):
        """Vectorized transition for a batch of parallel episodes of one task."""
        a = np.clip(np.asarray(actions, dtype=np.float64), -self.a_max, self.a_max)
        new_positions = positions + self.dt * a
        dense = -np.sum(np.abs(new_positions - task.goal), axis=1) + REWARD_OFFSET
        if task.reward_variant == "sparse":
            dist = np.linalg.norm(new_positions - task.goal, axis=1)
            rewards = np.where(dist <= SUCCESS_RADIUS, dense, -init_l1 + REWARD_OFFSET)
        else:
            rewards = dense
        return new_positions, rewards

    def reward(self, position: np.ndarray, task: Task, init_l1: float) -> float:
        if task.reward_variant == "sparse":
            return reward_sparse(position, task.goal, init_l1)
        return reward_dense(position, task.goal)

    def observe(self, state: EnvState) -> np.ndarray:
        return state.position.copy()

    def context(self, task: Task) -> np.ndarray:
        """Task side information; only expert training may use this."""
        return task.context.copy()

    def success(self, state: EnvState, task: Task) -> bool:
        return bool(
            np.linalg.norm(state.position - task.goal) <= SUCCESS_RADIUS
        )


# ---------------------------------------------------------------------------
# Chain MDPs


@dataclass(frozen=True)
class ChainMdp:
    """Finite-horizon tabular MDP; ``horizon`` counts decisions (rewards)."""

    transitions: np.ndarray  # (S, A, S)
    rewards: np.ndarray  # (S, A), normalized to [0, 1]
    horizon: int
    init_state: int = 0

    def __post_init__(self):
        p = np.asarray(self.transitions, dtype=np.float64)
        r = np.asarray(self.rewards, dtype=np.float64)
        if p.ndim != 3 or r.ndim != 2 or p.shape[:2] != r.shape:
            raise EnvError("transition/reward table shapes disagree")
        sums = p.sum(axis=2)
        if np.max(np.abs(sums - 1.0)) > 1e-12:
            raise EnvError("transition rows must sum to 1")
        if r.min() < 0.0 or r.max() > 1.0:
            raise EnvError("rewards must lie in [0, 1]")
        object.__setattr__(self, "transitions", p)
        object.__setattr__(self, "rewards", r)

    @property
    def n_states(self) -> int:
        return self.rewards.shape[0]

    @property
    def n_actions(self) -> int:
        return self.rewards.shape[1]


def solve_exact(mdp: ChainMdp, policy_probs: np.ndarray):
    """Backward dynamic programming under a fixed tabular policy.

    Returns (V, Q): V has shape (H+1, S) with V[H] = 0, Q has shape
    (H, S, A); index t is the 0-based decision step.
    """
    probs = np.asarray(policy_probs, dtype=np.float64)
    if probs.shape != (mdp.n_states, mdp.n_actions):
        raise EnvError("policy table shape mismatch")
    if np.max(np.abs(probs.sum(axis=1) - 1.0)) > 1e-9:
        raise EnvError("policy rows must sum to 1")
    H = mdp.horizon
    V = np.zeros((H + 1, mdp.n_states))
    Q = np.zeros((H, mdp.n_states, mdp.n_actions))
    for t in range(H - 1, -1, -1):
        Q[t] = mdp.rewards + mdp.transitions @ V[t + 1]
        V[t] = np.sum(probs * Q[t], axis=1)
    return V, Q


def occupancy(mdp: ChainMdp, policy_probs: np.ndarray) -> np.ndarray:
    """Exact state distribution d[t, s] at each decision step."""
    probs = np.asarray(policy_probs, dtype=np.float64)
    H = mdp.horizon
    d = np.zeros((H, mdp.n_states))
    d[0, mdp.init_state] = 1.0
    for t in range(H - 1):
        flow = d[t][:, None] * probs  # (S, A) mass taking each action
        d[t + 1] = np.einsum("sa,sak->k", flow, mdp.transitions)
    return d


@dataclass(frozen=True)
class ChainFamily:
    """Shared chain dynamics with i.i.d. per-task reward tables."""

    transitions: np.ndarray
    horizon: int
    init_state: int = 0
    context_dim: int = field(default=0)

    @classmethod
    def sample(
        cls,
        rng: np.random.Generator,
        n_states: int = 4,
        n_actions: int = 2,
        horizon: int = 8,
        stochastic: bool = True,
    ) -> "ChainFamily":
        """Left/right/stay moves along a chain, optionally with slip noise."""
        p = np.zeros((n_states, n_actions, n_states))
        for s in range(n_states):
            for a in range(n_actions):
                if a == 0:
                    target = max(s - 1, 0)
                elif a == 1:
                    target = min(s + 1, n_states - 1)
                else:
                    target = s
                p[s, a, target] = 1.0
        if stochastic:
            slip = rng.uniform(0.05, 0.2, size=(n_states, n_actions, 1))
            uniform = np.full((n_states, n_actions, n_states), 1.0 / n_states)
            p = (1.0 - slip) * p + slip * uniform
        p = p / p.sum(axis=2, keepdims=True)
        return cls(transitions=p, horizon=horizon, context_dim=0)

    def sample_task(self, rng: np.random.Generator, task_id: int = 0) -> Task:
        rewards = rng.random((self.transitions.shape[0], self.transitions.shape[1]))
        return Task(
            task_id=task_id,
            kind="chain",
            reward_variant="dense",
            reward_table=rewards,
            context=None,
        )

    def sample_tasks(self, n: int, rng: np.random.Generator):
        tasks = [self.sample_task(rng, task_id=i) for i in range(n)]
        # contexts are one-hot task indices, sized by the batch
        return [
            Task(
                task_id=t.task_id,
                kind=t.kind,
                reward_variant=t.reward_variant,
                reward_table=t.reward_table,
                context=np.eye(n)[i],
            )
            for i, t in enumerate(tasks)
        ]

    def mdp(self, task: Task) -> ChainMdp:
        return ChainMdp(
            transitions=self.transitions,
            rewards=task.reward_table,
            horizon=self.horizon,
            init_state=self.init_state,
        )
