"""Rollout collection and batch evaluation helpers.

Collectors batch the policy forward pass across parallel episodes of one
task, step the environments individually, and re-attach behavior log-probs
in the canonical stacked layout. Worker parallelism across tasks is capped
by the GMPSLAB_THREADS environment variable; results are reduced in input
order so scheduling cannot change them.
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor

import numpy as np

from .envs import SUCCESS_RADIUS, ChainMdp, Nav2dFamily, StepCounter, Task
from .innerloop import Trajectory, attach_behavior_logprobs
from .policy import ContextualPolicy


def task_map(fn, items):
    """Map over tasks, optionally with a thread pool; output order is fixed."""
    workers = int(os.environ.get("GMPSLAB_THREADS", "1") or "1")
    items = list(items)
    if workers <= 1 or len(items) <= 1:
        return [fn(item) for item in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


def collect_nav(
    family: Nav2dFamily,
    task: Task,
    policy,
    n_rollouts: int,
    rng: np.random.Generator,
    counter: StepCounter | None = None,
    context: np.ndarray | None = None,
    attach_logprobs: bool = True,
) -> list[Trajectory]:
    """Roll out ``n_rollouts`` episodes of one navigation task.

    ``attach_logprobs=False`` skips behavior log-prob recording for actors
    without a tractable density (scripted controllers).
    """
    H = family.horizon
    K = n_rollouts
    first = family.reset(task)
    positions = np.tile(first.position, (K, 1))
    init_l1 = np.full(K, first.init_l1)
    pos = np.zeros((K, H, 2))
    acts = np.zeros((K, H - 1, 2))
    rews = np.zeros((K, H - 1))
    for t in range(H - 1):
        pos[:, t] = positions
        if hasattr(policy, "sample_actions"):
            if context is None:
                batch_actions = policy.sample_actions(positions, rng)
            else:
                batch_actions = policy.sample_actions(positions, context, rng)
        else:
            batch_actions, _ = policy.act(positions, rng)
        acts[:, t] = batch_actions
        positions, rews[:, t] = family.step_batch(task, positions, batch_actions, init_l1)
    pos[:, H - 1] = positions
    trajectories = [
        Trajectory(
            states=pos[k],
            actions=acts[k],
            rewards=rews[k],
            behavior_logprobs=None,
            task_id=task.task_id,
        )
        for k in range(K)
    ]
    if attach_logprobs:
        lp_policy = policy.base if isinstance(policy, ContextualPolicy) else policy
        trajectories = attach_behavior_logprobs(trajectories, lp_policy, context=context)
    if counter is not None:
        counter.add(K * (H - 1))
    return trajectories


def collect_chain(
    mdp: ChainMdp,
    policy,
    n_rollouts: int,
    rng: np.random.Generator,
    counter: StepCounter | None = None,
    task_id: int = 0,
) -> list[Trajectory]:
    """Vectorized tabular rollouts; one decision per step over the horizon."""
    K, H = n_rollouts, mdp.horizon
    probs = policy.probs()
    action_cdf = np.cumsum(probs, axis=1)
    trans_cdf = np.cumsum(mdp.transitions, axis=2)
    s_buf = np.zeros((K, H + 1), dtype=np.intp)
    a_buf = np.zeros((K, H), dtype=np.intp)
    r_buf = np.zeros((K, H))
    s_buf[:, 0] = mdp.init_state
    state = s_buf[:, 0].copy()
    for t in range(H):
        u = rng.random(K)
        action = (u[:, None] > action_cdf[state]).sum(axis=1)
        a_buf[:, t] = action
        r_buf[:, t] = mdp.rewards[state, action]
        u2 = rng.random(K)
        state = (u2[:, None] > trans_cdf[state, action]).sum(axis=1)
        s_buf[:, t + 1] = state
    trajectories = [
        Trajectory(
            states=s_buf[k],
            actions=a_buf[k],
            rewards=r_buf[k],
            behavior_logprobs=None,
            task_id=task_id,
        )
        for k in range(K)
    ]
    trajectories = attach_behavior_logprobs(trajectories, policy)
    if counter is not None:
        counter.add(K * H)
    return trajectories


def nav_batch_stats(family: Nav2dFamily, task: Task, trajectories) -> dict:
    """Per-step mean return, success flag, and final goal distance of a batch."""
    per_step = np.array([t.rewards.mean() for t in trajectories])
    finals = np.stack([t.states[-1] for t in trajectories])
    dists = np.linalg.norm(finals - task.goal, axis=1)
    return {
        "return": float(per_step.mean()),
        "success": float(np.mean(dists <= SUCCESS_RADIUS)),
        "final_dist": float(dists.mean()),
    }
