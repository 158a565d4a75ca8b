"""Experiment configuration files.

Plain-text, one dotted key per line:

    # comment
    run.seeds = [0, 1, 2]
    task.family = nav2d
    meta.inner_lr = 0.1

Values are ints, floats, booleans (true/false), bare strings, or bracketed
comma lists. Unknown keys are rejected by name and every numeric is
range-checked at parse time. The full grammar and key table live in
docs/config.md.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field

from ..envs import ChainFamily, Nav2dFamily
from ..metatrain import MetaConfig, MetaTrainError
from ..policy import MlpArch
from ..rng import stream
from ..verify import VerifyConfig


class ConfigError(ValueError):
    pass


def _positive(x):
    return x > 0


def _nonnegative(x):
    return x >= 0


def _unit(x):
    return 0 < x <= 1


# key -> (python type, default, validator or allowed-strings)
_SCHEMA: dict[str, tuple] = {
    "run.id": (str, "run", None),
    "run.seeds": (list, [0], None),
    "run.out": (str, "runs/out", None),
    "task.family": (str, "nav2d", ("nav2d", "chain")),
    "task.reward": (str, "dense", ("dense", "sparse")),
    "task.horizon": (int, 50, lambda x: x >= 2),
    "task.train_tasks": (int, 10, _positive),
    "task.test_tasks": (int, 20, _nonnegative),
    "task.seed": (int, 0, _nonnegative),
    "policy.hidden": (list, [32, 32], None),
    "policy.nonlinearity": (str, "tanh", ("tanh", "relu")),
    "policy.bias_transform_dim": (int, 2, _nonnegative),
    "policy.logstd_init": (float, 0.0, None),
    "meta.inner_lr": (float, 0.1, _positive),
    "meta.learn_inner_lr": (bool, True, None),
    "meta.outer_lr": (float, 0.02, _positive),
    "meta.rollouts_per_task": (int, 20, _positive),
    "meta.bc_steps": (int, 200, _nonnegative),
    "meta.val_batch": (int, 64, _positive),
    "meta.iterations": (int, 30, _positive),
    "meta.aggregation": (bool, True, None),
    "meta.aggregate_rollouts": (int, 5, _positive),
    "meta.demo_rollouts": (int, 20, _positive),
    "meta.discount": (float, 0.99, _unit),
    "meta.grad_clip": (float, 10.0, _positive),
    "meta.adapt_scope": (
        str,
        "all",
        ("all", "freeze_first_layer", "bias_transform_only"),
    ),
    "meta.adapt_logstd": (bool, True, None),
    "meta.task_batch": (int, 0, _nonnegative),
    "expert.kind": (str, "scripted", ("scripted", "contextual")),
    "expert.budget": (int, 300_000, _nonnegative),
    "expert.lr": (float, 0.08, _positive),
    "expert.rollouts_per_task": (int, 10, _positive),
    "expert.hidden": (list, [32, 32], None),
    "expert.demo_file": (str, "", None),
    "test.grad_steps": (int, 1, _nonnegative),
    "test.rollouts": (int, 20, _positive),
    "verify.tasks": (int, 10, _positive),
    "verify.iterations": (int, 150, _positive),
    "verify.inner_lr": (float, 2.0, _positive),
    "verify.outer_lr": (float, 2.0, _positive),
    "verify.temperature": (float, 0.4, _positive),
}

_KEY_RE = re.compile(r"^[a-z][a-z0-9_]*(\.[a-z][a-z0-9_]*)+$")


def _parse_scalar(token: str):
    token = token.strip()
    if token.lower() in ("true", "false"):
        return token.lower() == "true"
    try:
        return int(token)
    except ValueError:
        pass
    try:
        return float(token)
    except ValueError:
        pass
    if token.startswith('"') and token.endswith('"') and len(token) >= 2:
        return token[1:-1]
    return token


def _parse_value(raw: str):
    raw = raw.strip()
    if raw.startswith("[") and raw.endswith("]"):
        inner = raw[1:-1].strip()
        if not inner:
            return []
        return [_parse_scalar(tok) for tok in inner.split(",")]
    return _parse_scalar(raw)


def _coerce(key: str, value):
    want_type, _, validator = _SCHEMA[key]
    if want_type is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{key}: expected true/false, got {value!r}")
    elif want_type is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{key}: expected an integer, got {value!r}")
    elif want_type is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{key}: expected a number, got {value!r}")
        value = float(value)
    elif want_type is str:
        if not isinstance(value, str):
            raise ConfigError(f"{key}: expected a string, got {value!r}")
    elif want_type is list:
        if not isinstance(value, list):
            raise ConfigError(f"{key}: expected a [..] list, got {value!r}")
    if isinstance(validator, tuple):
        if value not in validator:
            raise ConfigError(f"{key}: {value!r} not one of {validator}")
    elif validator is not None and not validator(value):
        raise ConfigError(f"{key}: value {value!r} out of range")
    return value


@dataclass
class ExperimentConfig:
    values: dict = field(default_factory=dict)

    def __getitem__(self, key: str):
        if key in self.values:
            return self.values[key]
        return _SCHEMA[key][1]

    def seeds(self) -> list[int]:
        return [int(s) for s in self["run.seeds"]]

    def family(self):
        if self["task.family"] == "nav2d":
            return Nav2dFamily(
                horizon=self["task.horizon"], reward_variant=self["task.reward"]
            )
        rng = stream(self["task.seed"], "chain-family")
        return ChainFamily.sample(rng, horizon=self["task.horizon"])

    def train_tasks(self, family):
        return family.sample_tasks(
            self["task.train_tasks"], stream(self["task.seed"], "train-tasks")
        )

    def test_tasks(self, family):
        return family.sample_tasks(
            self["task.test_tasks"],
            stream(self["task.seed"], "test-tasks"),
            id_offset=10_000,
        )

    def arch(self) -> MlpArch:
        return MlpArch(
            obs_dim=2,
            act_dim=2,
            hidden=tuple(int(h) for h in self["policy.hidden"]),
            nonlinearity=self["policy.nonlinearity"],
            bias_transform_dim=self["policy.bias_transform_dim"],
            logstd_init=self["policy.logstd_init"],
        )

    def meta_config(self) -> MetaConfig:
        try:
            return MetaConfig(
                inner_lr=self["meta.inner_lr"],
                learn_inner_lr=self["meta.learn_inner_lr"],
                outer_lr=self["meta.outer_lr"],
                rollouts_per_task=self["meta.rollouts_per_task"],
                bc_steps=self["meta.bc_steps"],
                val_batch=self["meta.val_batch"],
                iterations=self["meta.iterations"],
                aggregation=self["meta.aggregation"],
                aggregate_rollouts=self["meta.aggregate_rollouts"],
                demo_rollouts=self["meta.demo_rollouts"],
                discount=self["meta.discount"],
                grad_clip=self["meta.grad_clip"],
                adapt_scope=self["meta.adapt_scope"],
                adapt_logstd=self["meta.adapt_logstd"],
                task_batch=self["meta.task_batch"],
            )
        except MetaTrainError as exc:
            raise ConfigError(str(exc)) from exc

    def verify_config(self) -> VerifyConfig:
        return VerifyConfig(
            iterations=self["verify.iterations"],
            inner_lr=self["verify.inner_lr"],
            outer_lr=self["verify.outer_lr"],
            temperature=self["verify.temperature"],
            n_tasks=self["verify.tasks"],
        )


def parse_config(text: str) -> ExperimentConfig:
    values: dict = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        key, _, rhs = line.partition("=")
        key = key.strip()
        if not _KEY_RE.match(key):
            raise ConfigError(f"line {lineno}: malformed key {key!r}")
        if key not in _SCHEMA:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        if key in values:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        values[key] = _coerce(key, _parse_value(rhs))
    return ExperimentConfig(values=values)


def load_config(path) -> ExperimentConfig:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            return parse_config(fh.read())
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
