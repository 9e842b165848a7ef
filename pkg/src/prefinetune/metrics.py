"""Metric records, evaluation and RFC-4180 CSV output."""

from __future__ import annotations

import csv
import io
from dataclasses import astuple, dataclass, fields
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .autodiff import ParamView, Tape
from .losses import family_loss
from .model import Model, greedy_decode, head_key_for, task_outputs, encode
from .taskdata import BOS, EOS, Dataset, Tokenizer, collate

PHASES = ("prefinetune", "finetune")
METRICS = ("accuracy", "f1", "rouge-proxy", "loss")


@dataclass(frozen=True)
class MetricsRecord:
    run_id: str
    phase: str
    task_id: str
    step: int
    metric: str
    value: float
    split_fraction: float = 1.0
    n_prefinetune_tasks: int = 0
    seed: int = 0

    def __post_init__(self):
        if self.phase not in PHASES:
            raise ValueError(f"unknown phase {self.phase!r}")
        if self.metric not in METRICS:
            raise ValueError(f"unknown metric {self.metric!r}")


HEADER = tuple(f.name for f in fields(MetricsRecord))


def _fmt(v) -> str:
    return repr(float(v)) if isinstance(v, (float, np.floating)) else str(v)


def write_table(rows: Iterable[Sequence], header: Sequence[str], path) -> Path:
    """CSV with CRLF line endings and minimal quoting; floats in shortest repr."""
    buf = io.StringIO(newline="")
    w = csv.writer(buf, lineterminator="\r\n")
    w.writerow(header)
    for row in rows:
        w.writerow([_fmt(v) for v in row])
    path = Path(path)
    path.write_bytes(buf.getvalue().encode("utf-8"))
    return path


def write_metrics_csv(records: Iterable[MetricsRecord], path) -> Path:
    records = list(records)
    seen = set()
    for r in records:
        key = (r.run_id, r.task_id, r.step, r.metric, r.split_fraction, r.n_prefinetune_tasks, r.seed)
        if key in seen:
            raise ValueError(f"duplicate metrics record {key}")
        seen.add(key)
    return write_table((astuple(r) for r in records), HEADER, path)


def read_table(path) -> list[dict]:
    with Path(path).open(newline="", encoding="utf-8") as f:
        return list(csv.DictReader(f))


def read_metrics_csv(path) -> list[MetricsRecord]:
    out = []
    for row in read_table(path):
        out.append(MetricsRecord(
            row["run_id"], row["phase"], row["task_id"], int(row["step"]), row["metric"], float(row["value"]),
            float(row["split_fraction"]), int(row["n_prefinetune_tasks"]), int(row["seed"]),
        ))
    return out


def token_f1(pred: Sequence[int], gold: Sequence[int]) -> float:
    """Bag-of-tokens overlap F1, used as the summarization quality proxy."""
    if not pred or not gold:
        return float(len(pred) == len(gold))
    common = 0
    counts: dict[int, int] = {}
    for t in gold:
        counts[t] = counts.get(t, 0) + 1
    for t in pred:
        if counts.get(t, 0) > 0:
            common += 1
            counts[t] -= 1
    if common == 0:
        return 0.0
    p, r = common / len(pred), common / len(gold)
    return 2 * p * r / (p + r)


def evaluate(model: Model, family: str, task_id: str, dataset: Dataset, limit: int = 0, batch_size: int = 64) -> dict[str, float]:
    """Scaled loss and task metrics on (a prefix of) ``dataset``."""
    items = dataset.encoded(Tokenizer(model.config.vocab_size))
    if limit:
        items = items[:limit]
    head = head_key_for(family, task_id)
    loss_sum, correct, f1_sum, n = 0.0, 0, 0.0, 0
    for start in range(0, len(items), batch_size):
        chunk = items[start:start + batch_size]
        batch = collate(family, chunk, model.config.max_positions)
        view = ParamView(Tape(), model.params, trainable=False)
        outs = task_outputs(family, head, batch, model.config, model.heads, view)
        lv = family_loss(family, outs, batch, task_id, model.config.label_smoothing_epsilon)
        loss_sum += float(lv.scaled) * len(chunk)
        n += len(chunk)
        if family == "classification":
            correct += int((outs[0].data.argmax(-1) == batch["labels"]).sum())
        elif family == "commonsense":
            correct += int((outs[0].data.argmax(-1) == batch["gold"]).sum())
        elif family == "mrc":
            ps, pe = outs[0].data.argmax(-1), outs[1].data.argmax(-1)
            correct += int(((ps == batch["start"]) & (pe == batch["end"])).sum())
            for i in range(len(chunk)):
                pred = range(ps[i], max(ps[i], pe[i]) + 1)
                gold = range(batch["start"][i], batch["end"][i] + 1)
                f1_sum += token_f1(list(pred), list(gold))
        else:
            states = encode(batch["ids"], model.config, view, pad_mask=batch["pad"])
            max_len = batch["dec_out"].shape[1]
            pred = greedy_decode(states, model.config, view, BOS, EOS, max_len, enc_pad=batch["pad"])
            for i, it in enumerate(chunk):
                p = [int(t) for t in pred[i] if t != EOS]
                f1_sum += token_f1(p, [int(t) for t in it["tgt"]])
    out = {"loss": loss_sum / n}
    if family == "summarization":
        out["rouge-proxy"] = f1_sum / n
    else:
        out["accuracy"] = correct / n
    if family == "mrc":
        out["f1"] = f1_sum / n
    return out


def primary_metric(family: str) -> str:
    return "rouge-proxy" if family == "summarization" else "accuracy"
