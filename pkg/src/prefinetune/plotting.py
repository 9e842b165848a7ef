"""Plot-ready tables and SVG figures from fine-tuning metrics."""

from __future__ import annotations

from collections import defaultdict
from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .metrics import MetricsRecord, write_table  # noqa: E402

PLOT_KINDS = ("scale", "batching", "lowres")
_SVG_SALT = "prefinetune"


class MissingCellError(ValueError):
    pass


def _score_records(records: Sequence[MetricsRecord], prefix: str) -> list[MetricsRecord]:
    return [r for r in records if r.run_id.startswith(prefix) and r.phase == "finetune" and r.step > 0
            and r.metric in ("accuracy", "rouge-proxy")]


def _mean_table(records, row_key, col_key):
    cells = defaultdict(list)
    for r in records:
        cells[(row_key(r), col_key(r))].append(r.value)
    rows = sorted({k[0] for k in cells})
    cols = sorted({k[1] for k in cells})
    missing = [(a, b) for a in rows for b in cols if (a, b) not in cells]
    if missing:
        raise MissingCellError("missing grid cells: " + ", ".join(f"({a}, {b})" for a, b in missing))
    return rows, cols, {k: float(np.mean(v)) for k, v in cells.items()}


def _save_svg(fig, path: Path) -> Path:
    with matplotlib.rc_context({"svg.hashsalt": _SVG_SALT}):
        fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)
    return path


def _scale(records, out: Path) -> list[Path]:
    rows, tasks, mean = _mean_table(records, lambda r: r.n_prefinetune_tasks, lambda r: r.task_id)
    csv = write_table(([n, t, mean[(n, t)]] for n in rows for t in tasks), ("n_tasks", "task", "accuracy"),
                      out / "scale.csv")
    fig, ax = plt.subplots(figsize=(6, 4))
    for t in tasks:
        ax.plot(rows, [mean[(n, t)] for n in rows], marker="o", label=t)
    ax.set_xlabel("pre-finetuning tasks")
    ax.set_ylabel("fine-tune accuracy")
    ax.legend(fontsize="small")
    return [csv, _save_svg(fig, out / "scale.svg")]


def _batching(records, out: Path) -> list[Path]:
    strategy = lambda r: r.run_id.split(":", 1)[1]  # noqa: E731
    strategies, tasks, mean = _mean_table(records, strategy, lambda r: r.task_id)
    csv = write_table(([s, t, mean[(s, t)]] for s in strategies for t in tasks), ("strategy", "task", "accuracy"),
                      out / "batching.csv")
    fig, ax = plt.subplots(figsize=(7, 4))
    width = 0.8 / len(strategies)
    x = np.arange(len(tasks))
    for i, s in enumerate(strategies):
        ax.bar(x + i * width, [mean[(s, t)] for t in tasks], width, label=s)
    ax.set_xticks(x + width * (len(strategies) - 1) / 2, tasks)
    ax.set_ylabel("fine-tune accuracy")
    ax.legend(fontsize="small")
    return [csv, _save_svg(fig, out / "batching.svg")]


def _lowres(records, out: Path) -> list[Path]:
    rows, fracs, mean = _mean_table(records, lambda r: r.n_prefinetune_tasks, lambda r: r.split_fraction)
    per_task = defaultdict(set)
    for r in records:
        per_task[r.task_id].add((r.n_prefinetune_tasks, r.split_fraction))
    for task, seen in sorted(per_task.items()):
        gaps = [(n, f) for n in rows for f in fracs if (n, f) not in seen]
        if gaps:
            raise MissingCellError(f"task {task}: missing grid cells " + ", ".join(f"(n_tasks={n}, fraction={f})" for n, f in gaps))
    header = ["n_tasks"] + [repr(f) for f in fracs]
    csv = write_table(([n] + [mean[(n, f)] for f in fracs] for n in rows), header, out / "lowres.csv")
    grid = np.array([[mean[(n, f)] for f in fracs] for n in rows])
    fig, ax = plt.subplots(figsize=(7, 4))
    im = ax.imshow(grid, aspect="auto", cmap="viridis", origin="upper")
    ax.set_xticks(range(len(fracs)), [f"{f:.2f}" for f in fracs])
    ax.set_yticks(range(len(rows)), [str(n) for n in rows])
    ax.set_xlabel("fine-tuning data fraction")
    ax.set_ylabel("pre-finetuning tasks")
    fig.colorbar(im, ax=ax)
    return [csv, _save_svg(fig, out / "lowres.svg")]


def export_plot_data(records: Sequence[MetricsRecord], kind: str, out_dir) -> list[Path]:
    """Write ``<kind>.csv`` and ``<kind>.svg`` into ``out_dir``.

    scale: one series per probe task over subset sizes. batching: grouped bars
    per strategy. lowres: a (checkpoint x fraction) heatmap, complete for every
    probe task.
    """
    if kind not in PLOT_KINDS:
        raise ValueError(f"unknown plot kind {kind!r}; expected one of {PLOT_KINDS}")
    scored = _score_records(records, {"scale": "scale", "batching": "batching:", "lowres": "lowres"}[kind])
    if not scored:
        raise MissingCellError(f"no fine-tune scores for plot kind {kind!r}")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return {"scale": _scale, "batching": _batching, "lowres": _lowres}[kind](scored, out)
