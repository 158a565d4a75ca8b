"""Policy-gradient adaptation: the fast inner step and its off-policy replay.

The adaptation step is one masked gradient step on a likelihood-ratio
surrogate whose gradient is the advantage-weighted score-function estimator.
Re-adaptation on frozen rollouts weights the surrogate by per-step
probability ratios against the recorded behavior log-probs; at unchanged
parameters the ratios are exactly 1 and the two updates coincide
bit-for-bit.

All builders append to a caller-supplied graph so trainers can compose the
adapted parameters into larger objectives and differentiate through them.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .diffcore import Graph, ParamVector, gradient
from .policy import (
    GaussianMlpPolicy,
    TabularSoftmaxPolicy,
    build_gaussian_logprob,
    build_mlp_mean,
    build_tabular_logprob,
)

RATIO_CLIP = (0.1, 10.0)
# log-ratios are pre-clipped so exp never overflows; bounds far outside
# log(RATIO_CLIP) so they never bind first
_LOG_RATIO_BOUND = 50.0


class InnerLoopError(ValueError):
    pass


@dataclass(frozen=True)
class Trajectory:
    """One episode: states s_1..s_H, actions/rewards/log-probs for H-1 steps.

    ``behavior_logprobs`` are recorded under the data-collecting policy and
    feed the importance ratios; expert demonstration records may omit them.
    """

    states: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    behavior_logprobs: np.ndarray | None
    task_id: int = 0

    def __post_init__(self):
        n_steps = len(self.actions)
        if len(self.states) != n_steps + 1 or len(self.rewards) != n_steps:
            raise InnerLoopError("trajectory arrays are misaligned")
        if self.behavior_logprobs is not None and len(self.behavior_logprobs) != n_steps:
            raise InnerLoopError("behavior log-probs misaligned")

    @property
    def n_steps(self) -> int:
        return len(self.actions)


@dataclass(frozen=True)
class AdvantageEstimate:
    """Per-timestep advantages, zero-mean across the batch at every step."""

    values: np.ndarray  # (n_trajectories, n_steps)
    discount: float

    def flat(self) -> np.ndarray:
        return self.values.ravel()


def advantages(trajectories, discount: float = 0.99) -> AdvantageEstimate:
    """Discounted return-to-go minus the per-timestep batch mean baseline."""
    if not trajectories:
        raise InnerLoopError("empty trajectory batch")
    rewards = np.stack([t.rewards for t in trajectories])
    n, steps = rewards.shape
    togo = np.zeros_like(rewards)
    togo[:, -1] = rewards[:, -1]
    for t in range(steps - 2, -1, -1):
        togo[:, t] = rewards[:, t] + discount * togo[:, t + 1]
    # mean baseline, computed relative to the first row so that a batch of
    # identical trajectories cancels to exactly zero
    centered = togo - togo[0]
    values = centered - centered.mean(axis=0)
    return AdvantageEstimate(values=values, discount=discount)


def stack_steps(trajectories):
    """Concatenate per-step (observation, action) rows, trajectory-major.

    Every consumer of batched steps uses this order, including the behavior
    log-prob recording, so off-policy recomputation sees identical arrays.
    """
    obs = np.concatenate([t.states[:-1] for t in trajectories])
    act = np.concatenate([t.actions for t in trajectories])
    return obs, act


def attach_behavior_logprobs(trajectories, policy, context: np.ndarray | None = None):
    """Recompute and attach log-probs in the batched layout trainers use."""
    obs, act = stack_steps(trajectories)
    if isinstance(policy, TabularSoftmaxPolicy):
        lp = policy.log_prob(obs, act)
    else:
        if context is not None:
            ctx = np.broadcast_to(context, (obs.shape[0], context.size))
            obs = np.concatenate([obs, ctx], axis=1)
        lp = policy.log_prob(obs, act)
    out = []
    offset = 0
    for t in trajectories:
        chunk = lp[offset : offset + t.n_steps]
        offset += t.n_steps
        out.append(
            Trajectory(
                states=t.states,
                actions=t.actions,
                rewards=t.rewards,
                behavior_logprobs=chunk,
                task_id=t.task_id,
            )
        )
    return out


# ---------------------------------------------------------------------------
# Graph builders


def build_logprob_handle(g: Graph, handles, policy, obs_all, act_all) -> int:
    """Per-step log pi(a|s) for stacked constants, shape (n*T,)."""
    if isinstance(policy, TabularSoftmaxPolicy):
        return build_tabular_logprob(
            g, handles["logits"], obs_all, act_all, policy.n_states
        )
    mean = build_mlp_mean(g, handles, g.const(obs_all), policy.arch)
    return build_gaussian_logprob(g, handles, mean, g.const(act_all), policy.arch)


def build_surrogate(
    g: Graph,
    handles,
    policy,
    obs_all,
    act_all,
    adv_flat: np.ndarray,
    weights=None,
) -> int:
    """Scalar -(1/|D|) sum_t w_t * log pi(a_t|s_t) * A_t.

    ``weights`` may be a constant array (None means all-ones) or a graph
    handle for differentiable weighting.
    """
    lp = build_logprob_handle(g, handles, policy, obs_all, act_all)
    weighted = g.mul(lp, g.const(np.asarray(adv_flat, dtype=np.float64)))
    if weights is not None:
        w = weights if isinstance(weights, (int, np.integer)) else g.const(weights)
        weighted = g.mul(weighted, w)
    return g.neg(g.mean(weighted))


def build_ratio_handle(
    g: Graph,
    handles,
    policy,
    obs_all,
    act_all,
    behavior_lp: np.ndarray,
    ratio_clip=RATIO_CLIP,
) -> int:
    """Clipped per-step ratio pi_theta(a|s) / pi_behavior(a|s), differentiable."""
    lp = build_logprob_handle(g, handles, policy, obs_all, act_all)
    diff = g.sub(lp, g.const(np.asarray(behavior_lp, dtype=np.float64)))
    bounded = g.clip(diff, -_LOG_RATIO_BOUND, _LOG_RATIO_BOUND)
    return g.clip(g.exp(bounded), ratio_clip[0], ratio_clip[1])


def build_iw_surrogate(
    g, handles, policy, obs_all, act_all, adv_flat, behavior_lp, ratio_clip=RATIO_CLIP
) -> int:
    """Scalar -(1/|D|) sum_t ratio_t * A_t.

    The gradient is the ratio-weighted score-function estimator (the ratio
    differentiates to ratio * grad log pi), which reduces to the on-policy
    surrogate gradient when the ratios equal one.
    """
    ratio = build_ratio_handle(g, handles, policy, obs_all, act_all, behavior_lp, ratio_clip)
    weighted = g.mul(ratio, g.const(np.asarray(adv_flat, dtype=np.float64)))
    return g.neg(g.mean(weighted))


def build_adapted_handles(
    g: Graph,
    handles: dict[str, int],
    policy,
    trajectories,
    advantage: AdvantageEstimate,
    lr_handle: int,
    mask: np.ndarray,
    off_policy: bool = False,
    ratio_clip=RATIO_CLIP,
) -> dict[str, int]:
    """One masked gradient step; returns post-update parameter handles."""
    obs_all, act_all = stack_steps(trajectories)
    adv_flat = advantage.flat()
    if off_policy:
        if any(t.behavior_logprobs is None for t in trajectories):
            raise InnerLoopError("off-policy re-adaptation needs behavior log-probs")
        behavior = np.concatenate([t.behavior_logprobs for t in trajectories])
        loss = build_iw_surrogate(
            g, handles, policy, obs_all, act_all, adv_flat, behavior, ratio_clip
        )
    else:
        loss = build_surrogate(g, handles, policy, obs_all, act_all, adv_flat)
    names = list(handles.keys())
    grads = g.grad(loss, [handles[n] for n in names])
    params = policy.params
    adapted = {}
    for name, grad_h in zip(names, grads):
        m = mask[params.slot(name)].astype(np.float64)
        shape = dict(params.layout)[name]
        step = g.mul(lr_handle, g.mul(g.const(m.reshape(shape)), grad_h))
        adapted[name] = g.sub(handles[name], step)
    return adapted


# ---------------------------------------------------------------------------
# Eager operations


def surrogate_loss(policy, trajectories, advantage: AdvantageEstimate, weights=None) -> Graph:
    """Standalone scalar graph for the advantage-weighted surrogate."""
    g = Graph()
    handles = g.params_like(policy.params.layout)
    obs_all, act_all = stack_steps(trajectories)
    out = build_surrogate(
        g, handles, policy, obs_all, act_all, advantage.flat(), weights=weights
    )
    g.set_output(out)
    return g


def _one_step(policy, trajectories, inner_lr, mask, discount, off_policy, ratio_clip):
    if mask is None:
        mask = policy.params.mask
    adv = advantages(trajectories, discount)
    g = Graph()
    handles = g.params_like(policy.params.layout)
    adapted = build_adapted_handles(
        g,
        handles,
        policy,
        trajectories,
        adv,
        g.const(float(inner_lr)),
        mask,
        off_policy=off_policy,
        ratio_clip=ratio_clip,
    )
    pieces = g.eval(params=policy.params, outputs=[adapted[n] for n, _ in policy.params.layout])
    flat = np.concatenate([p.ravel() for p in pieces])
    return policy.params.with_values(flat)


def adapt(policy, trajectories, inner_lr: float, mask=None, discount: float = 0.99) -> ParamVector:
    """phi = theta - lr * mask * grad(surrogate) on on-policy rollouts."""
    return _one_step(policy, trajectories, inner_lr, mask, discount, False, RATIO_CLIP)


def adapt_iw(
    policy,
    trajectories,
    inner_lr: float,
    mask=None,
    discount: float = 0.99,
    ratio_clip=RATIO_CLIP,
) -> ParamVector:
    """Re-adaptation on frozen rollouts via clipped per-step ratios.

    The denominator is the recorded behavior log-prob (the parameters that
    collected the data), so at those parameters every ratio is exactly 1 and
    the result equals :func:`adapt` bit-for-bit.
    """
    return _one_step(policy, trajectories, inner_lr, mask, discount, True, ratio_clip)


def compute_ratios(policy, trajectories, ratio_clip=RATIO_CLIP) -> np.ndarray:
    """Clipped ratios as evaluated by the off-policy surrogate, flattened."""
    if any(t.behavior_logprobs is None for t in trajectories):
        raise InnerLoopError("trajectories carry no behavior log-probs")
    g = Graph()
    handles = g.params_like(policy.params.layout)
    obs_all, act_all = stack_steps(trajectories)
    behavior = np.concatenate([t.behavior_logprobs for t in trajectories])
    ratio = build_ratio_handle(g, handles, policy, obs_all, act_all, behavior, ratio_clip)
    return g.eval(params=policy.params, outputs=ratio)


def surrogate_gradient(policy, trajectories, advantage, weights=None) -> np.ndarray:
    """Flat gradient of the on-policy surrogate at the policy's parameters."""
    graph = surrogate_loss(policy, trajectories, advantage, weights=weights)
    return gradient(graph, policy.params)
