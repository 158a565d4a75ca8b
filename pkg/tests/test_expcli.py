import json

import numpy as np
import pytest

from gmpslab.expcli.cli import main
from gmpslab.expcli.config import ConfigError, load_config, parse_config
from gmpslab.expcli.metrics import MetricsError, MetricsWriter, read_metrics
from gmpslab.expcli.plotting import emit_plot


TINY = """
run.id = tiny
run.seeds = [0]
task.horizon = 8
task.train_tasks = 2
task.test_tasks = 2
policy.hidden = [6]
meta.rollouts_per_task = 3
meta.bc_steps = 2
meta.val_batch = 8
meta.iterations = 2
meta.aggregate_rollouts = 2
meta.demo_rollouts = 2
test.rollouts = 2
verify.tasks = 2
verify.iterations = 5
"""


def _write_config(tmp_path, text=TINY, name="exp.cfg"):
    path = tmp_path / name
    path.write_text(text)
    return path


# ---------------------------------------------------------------------------
# config parsing


def test_defaults_and_overrides():
    cfg = parse_config(TINY)
    assert cfg["run.id"] == "tiny"
    assert cfg["meta.iterations"] == 2
    assert cfg["meta.outer_lr"] == 0.02  # default
    assert cfg.seeds() == [0]
    assert cfg["policy.hidden"] == [6]


def test_unknown_key_is_named_in_the_error():
    with pytest.raises(ConfigError, match="leraning_rate"):
        parse_config("meta.leraning_rate = 0.1\n")


def test_malformed_line_and_duplicates_rejected():
    with pytest.raises(ConfigError, match="line 1"):
        parse_config("meta.inner_lr 0.1\n")
    with pytest.raises(ConfigError, match="duplicate"):
        parse_config("meta.inner_lr = 0.1\nmeta.inner_lr = 0.2\n")


def test_value_validation():
    with pytest.raises(ConfigError, match="out of range"):
        parse_config("meta.inner_lr = -0.5\n")
    with pytest.raises(ConfigError, match="not one of"):
        parse_config("task.reward = shaped\n")
    with pytest.raises(ConfigError, match="expected an integer"):
        parse_config("meta.iterations = 2.5\n")
    with pytest.raises(ConfigError, match="expected true/false"):
        parse_config("meta.aggregation = 1\n")


def test_comments_and_blank_lines_ignored():
    cfg = parse_config("# a comment\n\nmeta.bc_steps = 7  # trailing\n")
    assert cfg["meta.bc_steps"] == 7


def test_unreadable_config_errors(tmp_path):
    with pytest.raises(ConfigError, match="cannot read"):
        load_config(tmp_path / "nope.cfg")


# ---------------------------------------------------------------------------
# metrics files


def test_metrics_roundtrip(tmp_path):
    path = tmp_path / "m.jsonl"
    with MetricsWriter(path, run_id="r", seed=3) as writer:
        writer.write({"iteration": 1, "env_steps": 10, "post_return": 1.25})
        writer.write({"iteration": 2, "env_steps": 20, "post_return": 2.5})
    result = read_metrics(path)
    assert result.truncated_line is None
    assert [r["iteration"] for r in result.records] == [1, 2]
    assert all(r["schema"] == 1 and r["run_id"] == "r" for r in result.records)


def test_truncated_final_line_reported_earlier_records_readable(tmp_path):
    path = tmp_path / "m.jsonl"
    with MetricsWriter(path, run_id="r", seed=0) as writer:
        writer.write({"iteration": 1})
        writer.write({"iteration": 2})
    content = path.read_text()
    path.write_text(content[:-20])  # tear the last record
    result = read_metrics(path)
    assert result.truncated_line == 2
    assert [r["iteration"] for r in result.records] == [1]


def test_malformed_middle_line_is_fatal(tmp_path):
    path = tmp_path / "m.jsonl"
    path.write_text('{"schema": 1, "iteration": 1}\nnot json\n{"schema": 1}\n')
    with pytest.raises(MetricsError, match="line 2"):
        read_metrics(path)


def test_wrong_schema_rejected(tmp_path):
    path = tmp_path / "m.jsonl"
    path.write_text('{"schema": 99, "iteration": 1}\n')
    with pytest.raises(MetricsError, match="schema"):
        read_metrics(path)


# ---------------------------------------------------------------------------
# CLI end to end


def test_meta_train_writes_one_record_per_iteration(tmp_path):
    cfg = _write_config(tmp_path)
    out = tmp_path / "out"
    assert main(["meta-train", "--algo", "gmps", "--config", str(cfg), "--out", str(out)]) == 0
    result = read_metrics(out / "metrics-gmps-seed0.jsonl")
    curve = [r for r in result.records if "iteration" in r]
    assert len(curve) == 2
    assert (out / "theta-gmps-seed0.json").exists()


def test_seed_determinism_byte_identical_modulo_wall_clock(tmp_path):
    cfg = _write_config(tmp_path)
    outs = []
    for name in ("a", "b"):
        out = tmp_path / name
        assert main(
            ["meta-train", "--algo", "gmps", "--config", str(cfg), "--out", str(out)]
        ) == 0
        lines = (out / "metrics-gmps-seed0.jsonl").read_text().splitlines()
        scrubbed = []
        for line in lines:
            record = json.loads(line)
            record.pop("wall_clock")
            scrubbed.append(json.dumps(record, sort_keys=False))
        outs.append("\n".join(scrubbed))
    assert outs[0] == outs[1]


def test_thread_cap_does_not_change_results(tmp_path, monkeypatch):
    cfg = _write_config(tmp_path)
    texts = []
    for threads in ("1", "4"):
        monkeypatch.setenv("GMPSLAB_THREADS", threads)
        out = tmp_path / f"t{threads}"
        assert main(
            ["meta-train", "--algo", "gmps", "--config", str(cfg), "--out", str(out)]
        ) == 0
        payload = json.loads((out / "theta-gmps-seed0.json").read_text())
        texts.append(payload["values"])
    assert texts[0] == texts[1]


def test_meta_test_requires_trained_policy(tmp_path, capsys):
    cfg = _write_config(tmp_path)
    out = tmp_path / "out"
    out.mkdir()
    rc = main(["meta-test", "--algo", "gmps", "--config", str(cfg), "--out", str(out)])
    assert rc == 2
    assert "missing trained policy" in capsys.readouterr().err


def test_meta_train_then_meta_test(tmp_path):
    cfg = _write_config(tmp_path)
    out = tmp_path / "out"
    assert main(["meta-train", "--algo", "maml", "--config", str(cfg), "--out", str(out)]) == 0
    assert main(["meta-test", "--algo", "maml", "--config", str(cfg), "--out", str(out)]) == 0
    result = read_metrics(out / "metatest-maml-seed0.jsonl")
    summary = [r for r in result.records if r.get("kind") == "meta_test_summary"]
    assert len(summary) == 1
    assert len(summary[0]["mean_returns"]) == 2  # pre + one gradient step


def test_multitask_imitation_requires_demo_file(tmp_path, capsys):
    cfg = _write_config(tmp_path, TINY + "expert.demo_file = demos.jsonl\n", "imit.cfg")
    out = tmp_path / "out"
    out.mkdir()
    rc = main(
        ["meta-train", "--algo", "multitask-imitation", "--config", str(cfg), "--out", str(out)]
    )
    assert rc == 2
    assert "missing demo file" in capsys.readouterr().err


def test_collect_demos_then_imitation(tmp_path):
    cfg = _write_config(tmp_path, TINY + "expert.demo_file = demos.jsonl\n", "imit.cfg")
    out = tmp_path / "out"
    assert main(["collect-demos", "--config", str(cfg), "--out", str(out)]) == 0
    assert main(
        ["meta-train", "--algo", "multitask-imitation", "--config", str(cfg), "--out", str(out)]
    ) == 0
    result = read_metrics(out / "metrics-multitask-imitation-seed0.jsonl")
    assert len([r for r in result.records if "iteration" in r]) == 2


def test_verify_theorem_emits_bound_record(tmp_path):
    cfg = _write_config(tmp_path)
    out = tmp_path / "out"
    assert main(["verify-theorem", "--config", str(cfg), "--out", str(out)]) == 0
    result = read_metrics(out / "verify.jsonl")
    bound = [r for r in result.records if r.get("kind") == "bound_report"]
    assert len(bound) == 1
    assert "verdict" in bound[0] and isinstance(bound[0]["verdict"], bool)


def test_unknown_flags_and_subcommands_fail(tmp_path):
    with pytest.raises(SystemExit) as exc:
        main(["frobnicate"])
    assert exc.value.code != 0
    with pytest.raises(SystemExit) as exc:
        main(["meta-train", "--algo", "sac", "--config", "x"])
    assert exc.value.code != 0


def test_train_experts_scripted_writes_report(tmp_path):
    cfg = _write_config(tmp_path)
    out = tmp_path / "out"
    assert main(["train-experts", "--config", str(cfg), "--out", str(out)]) == 0
    payload = json.loads((out / "expert.json").read_text())
    assert payload["kind"] == "scripted"
    assert len(payload["per_task_returns"]) == 2


# ---------------------------------------------------------------------------
# plotting


def _metrics_file(tmp_path, name, run_id, rows_by_seed):
    path = tmp_path / name
    with open(path, "w") as fh:
        for seed, rows in rows_by_seed.items():
            for i, (steps, value) in enumerate(rows, start=1):
                fh.write(
                    json.dumps(
                        {
                            "schema": 1,
                            "run_id": run_id,
                            "seed": seed,
                            "iteration": i,
                            "env_steps": steps,
                            "post_return": value,
                        }
                    )
                    + "\n"
                )
    return path


def test_plot_single_record_single_point(tmp_path):
    path = _metrics_file(tmp_path, "one.jsonl", "one", {0: [(100, 1.5)]})
    table = emit_plot([path], tmp_path / "fig.svg")
    assert len(table) == 1
    assert table[0]["env_steps"] == [100.0]
    assert (tmp_path / "fig.svg").read_text().lstrip().startswith("<?xml")


def test_plot_two_runs_two_legend_entries(tmp_path):
    a = _metrics_file(tmp_path, "a.jsonl", "alpha", {0: [(10, 1.0), (20, 2.0)]})
    b = _metrics_file(tmp_path, "b.jsonl", "beta", {0: [(10, 0.5), (20, 0.7)]})
    out = tmp_path / "fig.svg"
    table = emit_plot([a, b], out)
    assert [t["label"] for t in table] == ["alpha", "beta"]
    svg = out.read_text()
    assert "alpha" in svg and "beta" in svg


def test_plot_band_is_standard_error_across_seeds(tmp_path):
    values = {0: [(10, 1.0), (20, 2.0)], 1: [(10, 1.4), (20, 2.6)], 2: [(10, 0.6), (20, 1.7)]}
    path = _metrics_file(tmp_path, "three.jsonl", "trio", values)
    table = emit_plot([path], tmp_path / "fig.svg")
    ys = np.array([[v for _, v in rows] for rows in values.values()])
    want_se = ys.std(axis=0, ddof=1) / np.sqrt(3)
    assert np.allclose(table[0]["stderr"], want_se, atol=1e-12)
    assert np.allclose(table[0]["mean"], ys.mean(axis=0), atol=1e-12)


def test_plot_embeds_data_table_comment(tmp_path):
    path = _metrics_file(tmp_path, "d.jsonl", "run", {0: [(10, 1.0)]})
    out = tmp_path / "fig.svg"
    emit_plot([path], out)
    text = out.read_text()
    start = text.index("<!-- gmpslab-data")
    payload = text[start:].split("\n")[1]
    table = json.loads(payload)
    assert table[0]["mean"] == [1.0]


def test_plot_rejects_empty_metrics(tmp_path):
    empty = tmp_path / "empty.jsonl"
    empty.write_text("")
    with pytest.raises(MetricsError, match="empty"):
        emit_plot([empty], tmp_path / "fig.svg")
