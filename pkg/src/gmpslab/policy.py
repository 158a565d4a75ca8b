"""Stochastic policies.

Gaussian MLPs for continuous control (with optional task-context input and a
learned bias-transform vector appended to the observation), plus tabular
softmax policies for the exact verification setting.

The forward pass and log-density are defined once as graph builders and the
eager methods evaluate those same graphs. Recorded behavior log-probabilities
are therefore bit-identical to what a training graph recomputes at the same
parameters, which the off-policy re-adaptation path relies on.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from functools import lru_cache

import numpy as np

from .diffcore import Graph, ParamVector


class PolicyError(ValueError):
    pass


LOG_2PI = math.log(2.0 * math.pi)


# ---------------------------------------------------------------------------
# Architecture


@dataclass(frozen=True)
class MlpArch:
    obs_dim: int
    act_dim: int
    hidden: tuple[int, ...] = (32, 32)
    nonlinearity: str = "tanh"
    bias_transform_dim: int = 2
    context_dim: int = 0
    logstd_init: float = 0.0

    @property
    def input_dim(self) -> int:
        return self.obs_dim + self.context_dim + self.bias_transform_dim

    def layer_sizes(self) -> list[tuple[int, int]]:
        dims = [self.input_dim, *self.hidden, self.act_dim]
        return [(dims[i], dims[i + 1]) for i in range(len(dims) - 1)]

    def layout(self) -> tuple[tuple[str, tuple[int, ...]], ...]:
        entries: list[tuple[str, tuple[int, ...]]] = []
        for i, (fan_in, fan_out) in enumerate(self.layer_sizes()):
            entries.append((f"w{i}", (fan_in, fan_out)))
            entries.append((f"b{i}", (fan_out,)))
        entries.append(("logstd", (self.act_dim,)))
        if self.bias_transform_dim:
            entries.append(("bias_transform", (self.bias_transform_dim,)))
        return tuple(entries)


# ---------------------------------------------------------------------------
# Graph builders (shared by eager policy methods and the trainers)


def build_mlp_mean(g: Graph, handles: dict[str, int], obs_h: int, arch: MlpArch) -> int:
    """Mean action head; obs_h carries observation plus any context columns."""
    x = obs_h
    if arch.bias_transform_dim:
        x = g.concat_cols(x, g.broadcast_rows(handles["bias_transform"], x))
    n_layers = len(arch.layer_sizes())
    for i in range(n_layers):
        x = g.add(g.matmul(x, handles[f"w{i}"]), handles[f"b{i}"])
        if i < n_layers - 1:
            x = g.tanh(x) if arch.nonlinearity == "tanh" else g.relu(x)
    return x


def build_gaussian_logprob(
    g: Graph, handles: dict[str, int], mean_h: int, act_h: int, arch: MlpArch
) -> int:
    """Per-row diagonal-Gaussian log density, shape (rows,)."""
    logstd = handles["logstd"]
    inv_std = g.exp(g.neg(logstd))
    z = g.mul(g.sub(act_h, mean_h), inv_std)
    quad = g.mul(g.const(0.5), g.sum_axis1(g.mul(z, z)))
    log_norm = g.add(g.sum(logstd), g.const(0.5 * arch.act_dim * LOG_2PI))
    return g.neg(g.add(quad, log_norm))


def build_tabular_logprob(
    g: Graph, logits_h: int, states: np.ndarray, actions: np.ndarray, n_states: int
) -> int:
    """log pi(a_i | s_i) for constant index arrays, shape (rows,)."""
    states = np.asarray(states, dtype=np.intp)
    actions = np.asarray(actions, dtype=np.intp)
    picked = g.gather_pairs(logits_h, states, actions)
    row_max = g.rowmax(logits_h)
    shifted = g.sub(logits_h, g.broadcast_cols(row_max, logits_h))
    lse = g.add(row_max, g.log(g.sum_axis1(g.exp(shifted))))
    onehot = np.zeros((states.size, n_states))
    onehot[np.arange(states.size), states] = 1.0
    denom = g.matmul(g.const(onehot), lse)
    return g.sub(picked, denom)


@lru_cache(maxsize=None)
def _mean_graph(arch: MlpArch):
    g = Graph()
    handles = g.params_like(arch.layout())
    obs = g.input("obs", (None, arch.obs_dim + arch.context_dim))
    mean = build_mlp_mean(g, handles, obs, arch)
    return g, mean


@lru_cache(maxsize=None)
def _logprob_graph(arch: MlpArch):
    g = Graph()
    handles = g.params_like(arch.layout())
    obs = g.input("obs", (None, arch.obs_dim + arch.context_dim))
    act = g.input("act", (None, arch.act_dim))
    mean = build_mlp_mean(g, handles, obs, arch)
    lp = build_gaussian_logprob(g, handles, mean, act, arch)
    return g, lp


# ---------------------------------------------------------------------------
# Gaussian MLP policy


@dataclass(frozen=True)
class GaussianMlpPolicy:
    """Diagonal Gaussian over actions with a state-independent learned log-std."""

    arch: MlpArch
    params: ParamVector

    @classmethod
    def init(cls, arch: MlpArch, rng: np.random.Generator) -> "GaussianMlpPolicy":
        named = []
        for i, (fan_in, fan_out) in enumerate(arch.layer_sizes()):
            named.append((f"w{i}", rng.normal(size=(fan_in, fan_out)) / np.sqrt(fan_in)))
            named.append((f"b{i}", np.zeros(fan_out)))
        named.append(("logstd", np.full(arch.act_dim, arch.logstd_init)))
        if arch.bias_transform_dim:
            named.append(("bias_transform", np.zeros(arch.bias_transform_dim)))
        return cls(arch=arch, params=ParamVector.packed(named))

    def with_params(self, params: ParamVector) -> "GaussianMlpPolicy":
        return replace(self, params=params)

    def logstd(self) -> np.ndarray:
        return self.params.view("logstd")

    def mean_action(self, obs: np.ndarray) -> np.ndarray:
        obs = _as_matrix(obs, self.arch.obs_dim + self.arch.context_dim)
        g, mean = _mean_graph(self.arch)
        return g.eval(params=self.params, inputs={"obs": obs}, outputs=mean)

    def sample_actions(self, obs: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        """Sample actions only; log-probs are attached later in batch."""
        mean = self.mean_action(obs)
        noise = rng.standard_normal(mean.shape)
        return mean + np.exp(self.logstd()) * noise

    def act(self, obs: np.ndarray, rng: np.random.Generator):
        """Sample actions; returns (actions, log-probs) for a batch of rows."""
        obs = _as_matrix(obs, self.arch.obs_dim + self.arch.context_dim)
        actions = self.sample_actions(obs, rng)
        return actions, self.log_prob(obs, actions)

    def log_prob(self, obs: np.ndarray, actions: np.ndarray) -> np.ndarray:
        obs = _as_matrix(obs, self.arch.obs_dim + self.arch.context_dim)
        actions = _as_matrix(actions, self.arch.act_dim)
        if obs.shape[0] != actions.shape[0]:
            raise PolicyError("observation/action batch sizes differ")
        g, lp = _logprob_graph(self.arch)
        return g.eval(params=self.params, inputs={"obs": obs, "act": actions}, outputs=lp)

    def adaptation_mask(self, scope: str = "all", adapt_logstd: bool = True) -> np.ndarray:
        """Boolean mask over the flat parameters (True = adapts in the inner loop)."""
        mask = np.zeros(self.params.size, dtype=bool)
        if scope == "all":
            mask[:] = True
        elif scope == "freeze_first_layer":
            mask[:] = True
            mask[self.params.slot("w0")] = False
            mask[self.params.slot("b0")] = False
        elif scope == "bias_transform_only":
            if not self.arch.bias_transform_dim:
                raise PolicyError("architecture has no bias-transform block")
            mask[self.params.slot("bias_transform")] = True
        else:
            raise PolicyError(f"unknown adaptation scope {scope!r}")
        if not adapt_logstd:
            mask[self.params.slot("logstd")] = False
        return mask


def _as_matrix(arr: np.ndarray, width: int) -> np.ndarray:
    arr = np.asarray(arr, dtype=np.float64)
    if arr.ndim == 1:
        arr = arr[None, :]
    if arr.ndim != 2 or arr.shape[1] != width:
        raise PolicyError(f"expected rows of width {width}, got shape {arr.shape}")
    return arr


# ---------------------------------------------------------------------------
# Contextual wrapper


@dataclass(frozen=True)
class ContextualPolicy:
    """Base policy fed (observation ++ task context) rows."""

    base: GaussianMlpPolicy

    def __post_init__(self):
        if self.base.arch.context_dim <= 0:
            raise PolicyError("contextual policy needs context_dim > 0")

    def _join(self, obs: np.ndarray, context: np.ndarray) -> np.ndarray:
        obs = _as_matrix(obs, self.base.arch.obs_dim)
        context = np.asarray(context, dtype=np.float64)
        if context.ndim == 1:
            context = np.broadcast_to(context, (obs.shape[0], context.size))
        return np.concatenate([obs, context], axis=1)

    def act(self, obs, context, rng):
        return self.base.act(self._join(obs, context), rng)

    def sample_actions(self, obs, context, rng) -> np.ndarray:
        return self.base.sample_actions(self._join(obs, context), rng)

    def mean_action(self, obs, context) -> np.ndarray:
        return self.base.mean_action(self._join(obs, context))

    def with_params(self, params: ParamVector) -> "ContextualPolicy":
        return replace(self, base=self.base.with_params(params))


# ---------------------------------------------------------------------------
# Tabular softmax policy


@lru_cache(maxsize=None)
def _tabular_prob_graph(n_states: int, n_actions: int):
    g = Graph()
    logits = g.param("logits", (n_states, n_actions))
    row_max = g.rowmax(logits)
    shifted = g.sub(logits, g.broadcast_cols(row_max, logits))
    e = g.exp(shifted)
    probs = g.div(e, g.broadcast_cols(g.sum_axis1(e), e))
    return g, probs


@dataclass(frozen=True)
class TabularSoftmaxPolicy:
    n_states: int
    n_actions: int
    params: ParamVector

    @classmethod
    def from_logits(cls, logits: np.ndarray) -> "TabularSoftmaxPolicy":
        logits = np.asarray(logits, dtype=np.float64)
        return cls(
            n_states=logits.shape[0],
            n_actions=logits.shape[1],
            params=ParamVector.packed([("logits", logits)]),
        )

    def logits(self) -> np.ndarray:
        return self.params.view("logits")

    def probs(self) -> np.ndarray:
        g, probs = _tabular_prob_graph(self.n_states, self.n_actions)
        return g.eval(params=self.params, outputs=probs)

    def with_params(self, params: ParamVector) -> "TabularSoftmaxPolicy":
        return replace(self, params=params)

    def act(self, states: np.ndarray, rng: np.random.Generator):
        states = np.asarray(states, dtype=np.intp)
        probs = self.probs()
        cdf = np.cumsum(probs, axis=1)
        u = rng.random(states.size)
        actions = (u[:, None] > cdf[states]).sum(axis=1)
        return actions, self.log_prob(states, actions)

    def log_prob(self, states: np.ndarray, actions: np.ndarray) -> np.ndarray:
        g = Graph()
        logits = g.param("logits", (self.n_states, self.n_actions))
        lp = build_tabular_logprob(g, logits, states, actions, self.n_states)
        return g.eval(params=self.params, outputs=lp)


# ---------------------------------------------------------------------------
# Divergence on a set of states


def kl_on_states(p, q, states) -> float:
    """Mean over states of KL(p(.|s) || q(.|s)), in closed form."""
    states = np.asarray(states)
    if states.size == 0:
        raise PolicyError("empty state set")
    if isinstance(p, TabularSoftmaxPolicy) and isinstance(q, TabularSoftmaxPolicy):
        idx = states.astype(np.intp).ravel()
        return float(np.mean(categorical_kl(p.probs()[idx], q.probs()[idx])))
    if isinstance(p, GaussianMlpPolicy) and isinstance(q, GaussianMlpPolicy):
        mu_p = p.mean_action(states)
        mu_q = q.mean_action(states)
        var_p = np.exp(2.0 * p.logstd())
        var_q = np.exp(2.0 * q.logstd())
        per_dim = (
            0.5 * (np.log(var_q) - np.log(var_p))
            + (var_p + (mu_p - mu_q) ** 2) / (2.0 * var_q)
            - 0.5
        )
        return float(np.mean(np.sum(per_dim, axis=1)))
    raise PolicyError(f"unsupported policy pair {type(p).__name__}/{type(q).__name__}")


def categorical_kl(p_rows: np.ndarray, q_rows: np.ndarray) -> np.ndarray:
    """Row-wise KL between probability tables; 0 log 0 treated as 0."""
    p_rows = np.asarray(p_rows, dtype=np.float64)
    q_rows = np.asarray(q_rows, dtype=np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p_rows > 0, p_rows * (np.log(p_rows) - np.log(q_rows)), 0.0)
    return terms.sum(axis=-1)
