"""Command-line entry points.

Subcommands: train-experts, collect-demos, meta-train, meta-test,
verify-theorem, plot. Every run writes line-delimited metrics plus any
policy/demo artifacts under the output directory; plot renders an SVG next
to the metrics it reads.
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from pathlib import Path

import numpy as np

from ..diffcore import ParamVector
from ..envs import StepCounter
from ..experts import (
    DemoFormatError,
    ExpertError,
    TrainedExpert,
    collect_demos,
    read_demos,
    scripted_expert,
    train_contextual_expert,
    write_demos,
)
from ..metatrain import (
    MetaState,
    MetaTrainError,
    gmps_train,
    maml_train,
    meta_test,
    multitask_imitation,
    multitask_train,
)
from ..policy import ContextualPolicy, GaussianMlpPolicy, MlpArch
from ..verify import verify_bound_on_random_family
from .config import ConfigError, load_config
from .metrics import MetricsError, MetricsWriter, read_metrics
from .plotting import emit_plot

ALGOS = ("gmps", "maml", "multitask", "multitask-imitation")


class CliError(ValueError):
    pass


# ---------------------------------------------------------------------------
# Artifact (de)serialization


def _arch_as_dict(arch: MlpArch) -> dict:
    return {
        "obs_dim": arch.obs_dim,
        "act_dim": arch.act_dim,
        "hidden": list(arch.hidden),
        "nonlinearity": arch.nonlinearity,
        "bias_transform_dim": arch.bias_transform_dim,
        "context_dim": arch.context_dim,
        "logstd_init": arch.logstd_init,
    }


def _arch_from_dict(d: dict) -> MlpArch:
    return MlpArch(
        obs_dim=int(d["obs_dim"]),
        act_dim=int(d["act_dim"]),
        hidden=tuple(int(h) for h in d["hidden"]),
        nonlinearity=d["nonlinearity"],
        bias_transform_dim=int(d["bias_transform_dim"]),
        context_dim=int(d["context_dim"]),
        logstd_init=float(d["logstd_init"]),
    )


def save_policy(path, state: MetaState):
    payload = {
        "arch": _arch_as_dict(state.arch),
        "values": state.theta.values.tolist(),
        "mask": state.theta.mask.astype(int).tolist(),
        "log_inner_lr": state.log_inner_lr,
        "env_steps": state.env_steps,
    }
    Path(path).write_text(json.dumps(payload), encoding="utf-8")


def load_policy(path):
    try:
        payload = json.loads(Path(path).read_text(encoding="utf-8"))
    except OSError as exc:
        raise CliError(f"cannot read policy file {path}: {exc}") from exc
    arch = _arch_from_dict(payload["arch"])
    template = GaussianMlpPolicy.init(arch, np.random.default_rng(0))
    params = ParamVector(
        values=np.array(payload["values"], dtype=np.float64),
        layout=template.params.layout,
        mask=np.array(payload["mask"], dtype=bool),
    )
    policy = GaussianMlpPolicy(arch=arch, params=params)
    log_lr = payload.get("log_inner_lr")
    return policy, (None if log_lr is None else float(log_lr)), int(payload["env_steps"])


def _demo_file_steps(demos) -> int:
    total = 0
    for tid in demos.task_ids():
        for traj in demos.trajectories(tid):
            total += traj.n_steps
    return total


# ---------------------------------------------------------------------------
# Expert plumbing


def _expert_file(out: Path) -> Path:
    return out / "expert.json"


def _make_experts(cfg, family, tasks, out: Path):
    """Per-task experts plus the environment steps their training cost."""
    if cfg["expert.kind"] == "scripted":
        return [scripted_expert(t) for t in tasks], 0
    path = _expert_file(out)
    if not path.exists():
        raise CliError(
            f"missing expert policy {path}; run `gmpslab train-experts` first"
        )
    payload = json.loads(path.read_text(encoding="utf-8"))
    arch = _arch_from_dict(payload["arch"])
    template = GaussianMlpPolicy.init(arch, np.random.default_rng(0))
    params = template.params.with_values(np.array(payload["values"], dtype=np.float64))
    policy = ContextualPolicy(GaussianMlpPolicy(arch=arch, params=params))
    experts = [TrainedExpert(policy=policy, task=t) for t in tasks]
    return experts, int(payload["env_steps"])


# ---------------------------------------------------------------------------
# Subcommand handlers


def _cmd_train_experts(args) -> int:
    cfg = load_config(args.config)
    out = _out_dir(args, cfg)
    family = cfg.family()
    tasks = cfg.train_tasks(family)
    if cfg["expert.kind"] == "scripted":
        counter = StepCounter()
        returns = {}
        for task in tasks:
            expert = scripted_expert(task)
            state = family.reset(task)
            total, done = 0.0, False
            while not done:
                state, r, done = family.step(
                    task, state, expert.mean_action(state.position)[0]
                )
                total += r
            counter.add(family.horizon - 1)
            returns[task.task_id] = total / (family.horizon - 1)
        payload = {
            "kind": "scripted",
            "per_task_returns": returns,
            "env_steps": counter.count,
        }
    else:
        result = train_contextual_expert(
            family,
            tasks,
            budget=cfg["expert.budget"],
            rng_seed=cfg["task.seed"],
            hidden=tuple(int(h) for h in cfg["expert.hidden"]),
            rollouts_per_task=cfg["expert.rollouts_per_task"],
            lr=cfg["expert.lr"],
        )
        payload = {
            "kind": "contextual",
            "arch": _arch_as_dict(result.policy.base.arch),
            "values": result.policy.base.params.values.tolist(),
            "per_task_returns": result.per_task_returns,
            "env_steps": result.env_steps,
        }
    _expert_file(out).write_text(json.dumps(payload), encoding="utf-8")
    print(f"wrote {_expert_file(out)}")
    return 0


def _cmd_collect_demos(args) -> int:
    cfg = load_config(args.config)
    out = _out_dir(args, cfg)
    family = cfg.family()
    tasks = cfg.train_tasks(family)
    experts, _ = _make_experts(cfg, family, tasks, out)
    counter = StepCounter()
    demos = collect_demos(
        family, tasks, experts, cfg["meta.demo_rollouts"], cfg["task.seed"],
        counter=counter,
    )
    path = out / "demos.jsonl"
    write_demos(path, demos)
    print(f"wrote {path} ({counter.count} environment steps)")
    return 0


def _resolve_demos(cfg, out: Path):
    """Demo set named by the config, or None for internal collection."""
    name = cfg["expert.demo_file"]
    if not name:
        return None, 0
    path = Path(name)
    if not path.is_absolute():
        path = out / path
    if not path.exists():
        raise CliError(f"missing demo file {path}")
    demos = read_demos(path)
    return demos, _demo_file_steps(demos)


def _cmd_meta_train(args) -> int:
    cfg = load_config(args.config)
    out = _out_dir(args, cfg)
    family = cfg.family()
    tasks = cfg.train_tasks(family)
    arch = cfg.arch()
    meta_cfg = cfg.meta_config()
    seeds = [args.seed] if args.seed is not None else cfg.seeds()
    for seed in seeds:
        start = time.time()
        if args.algo == "gmps":
            experts, expert_steps = _make_experts(cfg, family, tasks, out)
            demos, demo_steps = _resolve_demos(cfg, out)
            result = gmps_train(
                family, tasks, meta_cfg, seed, arch,
                experts=experts, demos=demos,
                initial_env_steps=expert_steps + demo_steps,
            )
        elif args.algo == "maml":
            result = maml_train(family, tasks, meta_cfg, seed, arch)
        elif args.algo == "multitask":
            result = multitask_train(family, tasks, meta_cfg, seed, arch)
        elif args.algo == "multitask-imitation":
            demos, demo_steps = _resolve_demos(cfg, out)
            if demos is None:
                raise CliError(
                    "multitask-imitation needs expert.demo_file; "
                    "run `gmpslab collect-demos` and set the key"
                )
            result = multitask_imitation(
                family, tasks, demos, meta_cfg, seed, arch,
                initial_env_steps=demo_steps,
            )
        else:
            raise CliError(f"unknown algorithm {args.algo!r}")

        metrics_path = out / f"metrics-{args.algo}-seed{seed}.jsonl"
        with MetricsWriter(metrics_path, run_id=cfg["run.id"], seed=seed) as writer:
            for record in result.records:
                writer.write({**record, "wall_clock": time.time() - start})
        save_policy(out / f"theta-{args.algo}-seed{seed}.json", result.state)
        print(f"seed {seed}: wrote {metrics_path}")
    return 0


def _cmd_meta_test(args) -> int:
    cfg = load_config(args.config)
    out = _out_dir(args, cfg)
    family = cfg.family()
    held_out = cfg.test_tasks(family)
    seeds = [args.seed] if args.seed is not None else cfg.seeds()
    for seed in seeds:
        theta_path = out / f"theta-{args.algo}-seed{seed}.json"
        if not theta_path.exists():
            raise CliError(f"missing trained policy {theta_path}")
        policy, log_lr, _ = load_policy(theta_path)
        inner_lr = float(np.exp(log_lr)) if log_lr is not None else cfg["meta.inner_lr"]
        result = meta_test(
            family, policy, held_out,
            n_grad_steps=cfg["test.grad_steps"],
            rollouts_per_step=cfg["test.rollouts"],
            inner_lr=inner_lr,
            seed=seed,
            discount=cfg["meta.discount"],
        )
        path = out / f"metatest-{args.algo}-seed{seed}.jsonl"
        with MetricsWriter(path, run_id=cfg["run.id"], seed=seed) as writer:
            for curve in result.curves:
                writer.write(
                    {
                        "kind": "meta_test",
                        "task_id": curve.task_id,
                        "returns": curve.returns,
                        "successes": curve.successes,
                        "final_dists": curve.final_dists,
                    }
                )
            writer.write(
                {
                    "kind": "meta_test_summary",
                    "mean_returns": result.mean_returns().tolist(),
                    "mean_successes": result.mean_successes().tolist(),
                    "mean_final_dists": result.mean_final_dists().tolist(),
                    "env_steps": result.env_steps,
                }
            )
        print(f"seed {seed}: wrote {path}")
    return 0


def _cmd_verify_theorem(args) -> int:
    cfg = load_config(args.config)
    out = _out_dir(args, cfg)
    verify_cfg = cfg.verify_config()
    path = out / "verify.jsonl"
    all_hold = True
    seeds = [args.seed] if args.seed is not None else cfg.seeds()
    with MetricsWriter(path, run_id=cfg["run.id"], seed=-1) as writer:
        for seed in seeds:
            report = verify_bound_on_random_family(seed, verify_cfg)
            writer.write({**report.to_record(), "family_seed": seed})
            all_hold &= report.holds
            print(
                f"seed {seed}: imitation_error={report.max_kl:.5f} "
                f"cost_gap={report.cost_gap:.4f} slack={report.slack:+.5f} "
                f"verdict={'holds' if report.holds else 'VIOLATED'}"
            )
    print(f"wrote {path}")
    return 0 if all_hold else 1


def _cmd_plot(args) -> int:
    out = Path(args.out) if args.out else Path(".")
    out.mkdir(parents=True, exist_ok=True)
    target = out / "learning_curves.svg"
    emit_plot(args.metrics, target)
    print(f"wrote {target}")
    return 0


def _out_dir(args, cfg) -> Path:
    out = Path(args.out) if args.out else Path(cfg["run.out"])
    out.mkdir(parents=True, exist_ok=True)
    return out


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="gmpslab",
        description="Meta-RL lab: imitation-guided meta-training, baselines, "
        "and an exact bound checker.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, algo=False):
        p.add_argument("--config", required=True, help="experiment config path")
        p.add_argument("--seed", type=int, default=None, help="run only this seed")
        p.add_argument("--out", default=None, help="output directory override")
        if algo:
            p.add_argument("--algo", choices=ALGOS, required=True)

    common(sub.add_parser("train-experts", help="train or validate per-task experts"))
    common(sub.add_parser("collect-demos", help="write expert demonstrations"))
    common(
        sub.add_parser("meta-train", help="run a meta-training algorithm"), algo=True
    )
    common(sub.add_parser("meta-test", help="held-out adaptation evaluation"), algo=True)
    common(sub.add_parser("verify-theorem", help="check the return bound exactly"))

    plot = sub.add_parser("plot", help="render learning curves from metrics files")
    plot.add_argument("metrics", nargs="+", help="metrics files to plot")
    plot.add_argument("--out", default=None, help="output directory")
    return parser


_HANDLERS = {
    "train-experts": _cmd_train_experts,
    "collect-demos": _cmd_collect_demos,
    "meta-train": _cmd_meta_train,
    "meta-test": _cmd_meta_test,
    "verify-theorem": _cmd_verify_theorem,
    "plot": _cmd_plot,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return _HANDLERS[args.command](args)
    except (
        CliError,
        ConfigError,
        MetricsError,
        DemoFormatError,
        ExpertError,
        MetaTrainError,
    ) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
