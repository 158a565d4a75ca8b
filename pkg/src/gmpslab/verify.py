"""Numerical verification of the imitation-error return bound.

Everything here is exact: chain-MDP returns come from backward dynamic
programming, inner adaptation uses the exact expected policy gradient built
as a differentiable graph (no sampling noise), and the two measured
quantities are

* the imitation error: the max over tasks of the adapted-policy-occupancy-
  weighted mean KL from the adapted policy to the task's expert, and
* the cost gap: the worst, over tasks / decision steps / states reachable
  under the adapted policy, excess expected cost-to-go of playing the
  adapted policy for one step before reverting to the expert.

The checked inequality is
    adapted return >= expert return - cost_gap * horizon * sqrt(imitation error)
with returns averaged over tasks and costs normalized to [0, 1].
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .diffcore import Graph
from .envs import ChainFamily, ChainMdp, Task, occupancy, solve_exact
from .policy import categorical_kl
from .rng import stream


class VerifyError(ValueError):
    pass


@dataclass(frozen=True)
class MixtureSchedule:
    """Per-iteration expert/adapted mixing weights for data collection.

    weight j applies at outer iteration j; iterations beyond the schedule
    use 0 (pure adapted-policy data, the default throughout).
    """

    weights: tuple[float, ...] = ()

    def __post_init__(self):
        if any(not (0.0 <= w <= 1.0) for w in self.weights):
            raise VerifyError("mixture weights must lie in [0, 1]")

    def weight(self, iteration: int) -> float:
        if iteration < len(self.weights):
            return self.weights[iteration]
        return 0.0


@dataclass
class BoundReport:
    per_task_kl: list[float]
    max_kl: float
    cost_gap: float
    horizon: int
    expert_return: float
    adapted_return: float
    slack: float
    holds: bool

    def to_record(self) -> dict:
        return {
            "kind": "bound_report",
            "per_task_kl": self.per_task_kl,
            "max_kl": self.max_kl,
            "cost_gap": self.cost_gap,
            "horizon": self.horizon,
            "expert_return": self.expert_return,
            "adapted_return": self.adapted_return,
            "slack": self.slack,
            "verdict": bool(self.holds),
        }


# ---------------------------------------------------------------------------
# Exact quantities


def exact_return(mdp: ChainMdp, policy_probs: np.ndarray) -> float:
    """Exact finite-horizon expected return from the initial state."""
    V, _ = solve_exact(mdp, policy_probs)
    return float(V[0, mdp.init_state])


def divergence_chain(p_row: np.ndarray, q_row: np.ndarray):
    """(zero-one disagreement, total variation, KL) for one state's rows.

    The zero-one loss is the minimal disagreement probability over couplings,
    1 - sum(min(p, q)), which total variation upper-bounds.
    """
    p = np.asarray(p_row, dtype=np.float64)
    q = np.asarray(q_row, dtype=np.float64)
    zero_one = 1.0 - np.minimum(p, q).sum()
    tv = 0.5 * np.abs(p - q).sum()
    kl = float(categorical_kl(p, q))
    return float(zero_one), float(tv), kl


def measure_epsilon(mdps, adapted_probs, expert_probs):
    """Occupancy-weighted mean KL(adapted || expert) per task, and the max."""
    per_task = []
    for mdp, adapted, expert in zip(mdps, adapted_probs, expert_probs):
        d = occupancy(mdp, adapted)
        kl_rows = categorical_kl(adapted, expert)  # (S,)
        per_task.append(float(np.sum(d @ kl_rows) / mdp.horizon))
    return per_task, float(max(per_task))


def measure_delta(mdps, adapted_probs, expert_probs) -> float:
    """Worst cost-to-go gap of one adapted step against the expert.

    Computed from the expert's exact Q tables in cost units (costs = 1 - r),
    over states reachable under the adapted policy; never negative.
    """
    worst = 0.0
    for mdp, adapted, expert in zip(mdps, adapted_probs, expert_probs):
        _, Q = solve_exact(mdp, expert)  # reward units
        d = occupancy(mdp, adapted)
        # cost gap = E_expert[Q_r] - E_adapted[Q_r]; the (H - t) offsets cancel
        gap = np.einsum("sa,tsa->ts", expert - adapted, Q)
        reachable = d > 1e-12
        if np.any(reachable):
            worst = max(worst, float(np.max(gap[reachable])))
    return worst


def optimal_q(mdp: ChainMdp) -> np.ndarray:
    """Backward induction with maximizing action choice; returns Q[t, s, a]."""
    H = mdp.horizon
    V = np.zeros(mdp.n_states)
    Q = np.zeros((H, mdp.n_states, mdp.n_actions))
    for t in range(H - 1, -1, -1):
        Q[t] = mdp.rewards + mdp.transitions @ V
        V = Q[t].max(axis=1)
    return Q


def expert_probs_for(mdp: ChainMdp, temperature: float) -> np.ndarray:
    """Stationary near-optimal expert: softmax of the step-0 optimal values."""
    q0 = optimal_q(mdp)[0]
    z = (q0 - q0.max(axis=1, keepdims=True)) / temperature
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


# ---------------------------------------------------------------------------
# Exact guided meta-training on tabular tasks


@dataclass(frozen=True)
class VerifyConfig:
    iterations: int = 150
    inner_lr: float = 2.0
    outer_lr: float = 2.0
    temperature: float = 0.4
    grad_clip: float = 10.0
    n_tasks: int = 10


@dataclass
class TabularGmpsResult:
    mdps: list[ChainMdp]
    theta_logits: np.ndarray
    expert_probs: list[np.ndarray]
    adapted_probs: list[np.ndarray]
    horizon: int
    kl_history: list[float] = field(default_factory=list)


def _build_log_softmax(g: Graph, logits_h: int):
    row_max = g.rowmax(logits_h)
    shifted = g.sub(logits_h, g.broadcast_cols(row_max, logits_h))
    e = g.exp(shifted)
    sums = g.sum_axis1(e)
    log_probs = g.sub(shifted, g.broadcast_cols(g.log(sums), logits_h))
    probs = g.div(e, g.broadcast_cols(sums, e))
    return log_probs, probs


def _build_exact_return(g: Graph, probs_h: int, mdp: ChainMdp) -> int:
    """Differentiable backward DP: J(policy) from the initial state."""
    S, A = mdp.n_states, mdp.n_actions
    flat_p = g.const(mdp.transitions.reshape(S * A, S))
    rewards = g.const(mdp.rewards)
    value = g.const(np.zeros(S))
    for _ in range(mdp.horizon):
        q = g.add(rewards, g.reshape(g.matmul(flat_p, value), (S, A)))
        value = g.sum_axis1(g.mul(probs_h, q))
    init = np.zeros(mdp.n_states)
    init[mdp.init_state] = 1.0
    return g.matmul(g.const(init), value)


class _TabularMetaGraph:
    """Shared-theta graph: exact inner step per task plus weighted imitation."""

    def __init__(self, mdps, expert_probs, config: VerifyConfig):
        S, A = mdps[0].n_states, mdps[0].n_actions
        g = Graph()
        theta = g.param("logits", (S, A))
        _, probs_theta = _build_log_softmax(g, theta)
        self.phi_prob_handles = []
        total = g.const(0.0)
        for i, mdp in enumerate(mdps):
            ret = _build_exact_return(g, probs_theta, mdp)
            inner_loss = g.neg(ret)
            (grad_h,) = g.grad(inner_loss, [theta])
            phi = g.sub(theta, g.mul(g.const(config.inner_lr), grad_h))
            log_phi, probs_phi = _build_log_softmax(g, phi)
            self.phi_prob_handles.append(probs_phi)
            w_in = g.input(f"w_{i}", (S,))
            coeff = g.mul(g.broadcast_cols(w_in, log_phi), g.const(expert_probs[i]))
            total = g.add(total, g.neg(g.sum(g.mul(coeff, log_phi))))
        total = g.div(total, g.const(float(len(mdps))))
        g.set_output(total)
        self.graph = g
        self.loss_handle = total
        self.grad_handles = g.grad(total, [theta])

    def adapted_probs(self, theta_flat: np.ndarray):
        return self.graph.eval(params=theta_flat, outputs=self.phi_prob_handles)

    def loss_and_grad(self, theta_flat: np.ndarray, weights: list[np.ndarray]):
        inputs = {f"w_{i}": w for i, w in enumerate(weights)}
        out = self.graph.eval(
            params=theta_flat, inputs=inputs,
            outputs=[self.loss_handle, *self.grad_handles],
        )
        return float(out[0]), out[1].ravel()


def train_tabular_gmps(
    mdps: list[ChainMdp],
    config: VerifyConfig = VerifyConfig(),
    mixture: MixtureSchedule = MixtureSchedule(),
) -> TabularGmpsResult:
    """Guided meta-training with exact expected gradients throughout."""
    if not mdps:
        raise VerifyError("no tasks")
    expert_probs = [expert_probs_for(m, config.temperature) for m in mdps]
    meta = _TabularMetaGraph(mdps, expert_probs, config)
    S, A = mdps[0].n_states, mdps[0].n_actions
    theta = np.zeros(S * A)
    kl_history = []
    for iteration in range(config.iterations):
        adapted = meta.adapted_probs(theta)
        beta = mixture.weight(iteration)
        weights = []
        for mdp, probs_phi, expert in zip(mdps, adapted, expert_probs):
            collect = beta * expert + (1.0 - beta) * probs_phi
            d = occupancy(mdp, collect)
            weights.append(d.mean(axis=0))
        _, grad = meta.loss_and_grad(theta, weights)
        norm = np.linalg.norm(grad)
        if norm > config.grad_clip:
            grad = grad * (config.grad_clip / norm)
        theta = theta - config.outer_lr * grad
        _, max_kl = measure_epsilon(mdps, meta.adapted_probs(theta), expert_probs)
        kl_history.append(max_kl)
    adapted = [np.asarray(p) for p in meta.adapted_probs(theta)]
    return TabularGmpsResult(
        mdps=mdps,
        theta_logits=theta.reshape(S, A),
        expert_probs=expert_probs,
        adapted_probs=adapted,
        horizon=mdps[0].horizon,
        kl_history=kl_history,
    )


def check_bound(result: TabularGmpsResult) -> BoundReport:
    """Evaluate the return bound on a trained tabular state."""
    per_task, max_kl = measure_epsilon(
        result.mdps, result.adapted_probs, result.expert_probs
    )
    gap = measure_delta(result.mdps, result.adapted_probs, result.expert_probs)
    j_exp = float(
        np.mean([exact_return(m, e) for m, e in zip(result.mdps, result.expert_probs)])
    )
    j_ad = float(
        np.mean([exact_return(m, a) for m, a in zip(result.mdps, result.adapted_probs)])
    )
    slack = j_ad - (j_exp - gap * result.horizon * math.sqrt(max_kl))
    return BoundReport(
        per_task_kl=per_task,
        max_kl=max_kl,
        cost_gap=gap,
        horizon=result.horizon,
        expert_return=j_exp,
        adapted_return=j_ad,
        slack=slack,
        holds=bool(slack >= -1e-9),
    )


# ---------------------------------------------------------------------------
# End-to-end verification entry point


def sample_verification_family(
    seed: int, n_tasks: int = 10
) -> tuple[ChainFamily, list[Task], list[ChainMdp]]:
    """Random chain family: <= 6 states, <= 3 actions, horizon <= 10."""
    rng = stream(seed, "verify-family")
    n_states = int(rng.integers(3, 7))
    n_actions = int(rng.integers(2, 4))
    horizon = int(rng.integers(5, 11))
    family = ChainFamily.sample(
        rng, n_states=n_states, n_actions=n_actions, horizon=horizon, stochastic=True
    )
    tasks = family.sample_tasks(n_tasks, rng)
    mdps = [family.mdp(t) for t in tasks]
    return family, tasks, mdps


def verify_bound_on_random_family(
    seed: int, config: VerifyConfig = VerifyConfig(), mixture: MixtureSchedule = MixtureSchedule()
) -> BoundReport:
    _, _, mdps = sample_verification_family(seed, config.n_tasks)
    result = train_tabular_gmps(mdps, config, mixture)
    return check_bound(result)
