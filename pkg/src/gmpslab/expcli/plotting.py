"""Learning-curve rendering: post-update return against environment steps.

One series per metrics file, averaged across the seeds found inside, with a
band of plus/minus one standard error. Output is an SVG with the plotted
table embedded in a trailing XML comment so the figure is auditable.
"""

from __future__ import annotations

import json
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

from .metrics import MetricsError, read_metrics


def _series_from_records(records: list[dict], label: str):
    rows = [r for r in records if "iteration" in r and "post_return" in r]
    if not rows:
        raise MetricsError(f"{label}: no learning-curve records")
    by_seed: dict[int, list[dict]] = {}
    for r in rows:
        by_seed.setdefault(int(r.get("seed", 0)), []).append(r)
    seeds = sorted(by_seed)
    lengths = {len(by_seed[s]) for s in seeds}
    n = min(lengths)
    xs = np.array([by_seed[seeds[0]][i]["env_steps"] for i in range(n)], dtype=float)
    for s in seeds[1:]:
        other = np.array([by_seed[s][i]["env_steps"] for i in range(n)], dtype=float)
        if not np.array_equal(xs, other):
            raise MetricsError(f"{label}: seeds disagree on the env-step axis")
    ys = np.array(
        [[by_seed[s][i]["post_return"] for i in range(n)] for s in seeds], dtype=float
    )
    mean = ys.mean(axis=0)
    if len(seeds) > 1:
        se = ys.std(axis=0, ddof=1) / np.sqrt(len(seeds))
    else:
        se = np.zeros(n)
    return {"label": label, "env_steps": xs, "mean": mean, "stderr": se, "seeds": seeds}


def emit_plot(metrics_paths, output_path) -> list[dict]:
    """Render the learning-curve chart; returns the plotted series tables."""
    paths = [Path(p) for p in metrics_paths]
    if not paths:
        raise MetricsError("no metrics files given")
    series = []
    for path in paths:
        result = read_metrics(path)
        if not result.records:
            raise MetricsError(f"{path}: empty metrics file")
        label = result.records[0].get("run_id", path.stem)
        series.append(_series_from_records(result.records, str(label)))

    fig, ax = plt.subplots(figsize=(7, 4.5))
    for s in series:
        (line,) = ax.plot(s["env_steps"], s["mean"], marker="o", markersize=3, label=s["label"])
        ax.fill_between(
            s["env_steps"],
            s["mean"] - s["stderr"],
            s["mean"] + s["stderr"],
            alpha=0.25,
            color=line.get_color(),
        )
    ax.set_xlabel("cumulative environment steps")
    ax.set_ylabel("mean post-update return")
    ax.legend()
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(output_path, format="svg")
    plt.close(fig)

    table = [
        {
            "label": s["label"],
            "seeds": list(map(int, s["seeds"])),
            "env_steps": s["env_steps"].tolist(),
            "mean": s["mean"].tolist(),
            "stderr": s["stderr"].tolist(),
        }
        for s in series
    ]
    with open(output_path, "a", encoding="utf-8") as fh:
        fh.write("\n<!-- gmpslab-data\n")
        fh.write(json.dumps(table))
        fh.write("\n-->\n")
    return table
