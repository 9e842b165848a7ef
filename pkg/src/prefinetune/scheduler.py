"""Batching strategies, simulated multi-worker gradient accumulation and Adam.

One optimizer update always consumes ``worker_count`` task-homogeneous
sub-batches. The strategies differ only in which tasks those sub-batches come
from:

* ``dataset_homogeneous`` -- every batch of dataset A, then every batch of B, ...
* ``batch_homogeneous``   -- single-task batches in a globally shuffled order
* ``batch_heterogeneous`` -- each worker samples its own task by train size
"""

from __future__ import annotations

import math
from concurrent.futures import Executor
from dataclasses import dataclass, field
from typing import Iterator, Mapping, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Gradient, ParamView, Tape
from .losses import LossValue, R3FConfig, family_loss, r3f_penalty
from .model import Model, embed, head_key_for, task_outputs
from .taskdata import Registry, TaskSpec, Tokenizer, collate

STRATEGIES = ("dataset_homogeneous", "batch_homogeneous", "batch_heterogeneous")


@dataclass(frozen=True)
class SubBatch:
    task_id: str
    indices: tuple[int, ...]


@dataclass(frozen=True)
class HeterogeneousBatch:
    sub_batches: tuple[SubBatch, ...]

    @property
    def task_ids(self) -> tuple[str, ...]:
        return tuple(s.task_id for s in self.sub_batches)

    def __len__(self) -> int:
        return len(self.sub_batches)


# --- batch streams ------------------------------------------------------------


def _chunk(perm: np.ndarray, batch_size: int, worker_count: int) -> list[tuple[tuple[int, ...], ...]]:
    """Split a permutation into updates of ``worker_count`` sub-batches."""
    per_update = batch_size * worker_count
    out = []
    for start in range(0, len(perm), per_update):
        block = perm[start:start + per_update]
        out.append(tuple(tuple(int(i) for i in block[k:k + batch_size]) for k in range(0, len(block), batch_size)))
    return out


def _task_batches(task: TaskSpec, rng, batch_size: int, worker_count: int) -> list[HeterogeneousBatch]:
    return [
        HeterogeneousBatch(tuple(SubBatch(task.task_id, sb) for sb in subs))
        for subs in _chunk(rng.permutation(task.train_size), batch_size, worker_count)
    ]


def _dataset_homogeneous(registry, batch_size, worker_count, rng) -> Iterator[HeterogeneousBatch]:
    while True:
        for task in registry:
            yield from _task_batches(task, rng, batch_size, worker_count)


def _batch_homogeneous(registry, batch_size, worker_count, rng) -> Iterator[HeterogeneousBatch]:
    while True:
        epoch = [b for task in registry for b in _task_batches(task, rng, batch_size, worker_count)]
        for i in rng.permutation(len(epoch)):
            yield epoch[i]


def _batch_heterogeneous(registry, batch_size, worker_count, rng) -> Iterator[HeterogeneousBatch]:
    tasks = registry.tasks
    weights = registry.weights
    perms = [rng.permutation(t.train_size) for t in tasks]
    cursors = [0] * len(tasks)
    while True:
        subs = []
        for k in rng.choice(len(tasks), size=worker_count, p=weights):
            n = tasks[k].train_size
            take = min(batch_size, n)
            if cursors[k] + take > n:
                perms[k] = rng.permutation(n)
                cursors[k] = 0
            idx = perms[k][cursors[k]:cursors[k] + take]
            cursors[k] += take
            subs.append(SubBatch(tasks[k].task_id, tuple(int(i) for i in idx)))
        yield HeterogeneousBatch(tuple(subs))


def build_batch_stream(strategy: str, registry: Registry, batch_size: int, worker_count: int, seed: int) -> Iterator[HeterogeneousBatch]:
    """Infinite, seed-determined stream of updates under one batching strategy."""
    if strategy not in STRATEGIES:
        raise ValueError(f"unknown batching strategy {strategy!r}; expected one of {STRATEGIES}")
    if worker_count < 1 or batch_size < 1:
        raise ValueError("worker_count and batch_size must be >= 1")
    if not len(registry):
        raise ValueError("empty registry")
    rng = np.random.default_rng([seed, STRATEGIES.index(strategy)])
    gen = {"dataset_homogeneous": _dataset_homogeneous, "batch_homogeneous": _batch_homogeneous,
           "batch_heterogeneous": _batch_heterogeneous}[strategy]
    return gen(registry, batch_size, worker_count, rng)


# --- gradients -------------------------------------------------------------------


class NonFiniteLoss(FloatingPointError):
    def __init__(self, task_id: str, indices: Sequence[int]):
        super().__init__(f"non-finite loss in sub-batch of task {task_id!r} (record indices {list(indices)})")
        self.task_id = task_id
        self.indices = tuple(indices)


def sub_seed(seed: int, *keys: int) -> int:
    return int(np.random.SeedSequence([seed, *keys]).generate_state(1)[0])


def subbatch_loss(model: Model, task: TaskSpec, view: ParamView, indices: Sequence[int], seed: int,
                  r3f: R3FConfig | None = None, dataset=None):
    """Scaled loss (plus optional R3F penalty) for one task-homogeneous sub-batch.

    Returns ``(total_tensor, LossValue)``; ``view`` must be bound to a fresh tape.
    """
    data = task.train if dataset is None else dataset
    if data is None:
        raise ValueError(f"task {task.task_id!r} has no training data")
    items = data.encoded(Tokenizer(model.config.vocab_size))
    batch = collate(task.family, [items[i] for i in indices], model.config.max_positions)
    head = head_key_for(task.family, task.task_id)
    drop = sub_seed(seed, 0) if model.config.dropout > 0 else None
    emb = embed(batch["ids"], model.config, view)

    def forward(e):
        return task_outputs(task.family, head, batch, model.config, model.heads, view, drop, embeddings=e)

    outs = forward(emb)
    lv = family_loss(task.family, outs, batch, task.task_id, model.config.label_smoothing_epsilon)
    total = lv.scaled
    if r3f is not None:
        total = total + r3f_penalty(forward, emb, r3f, sub_seed(seed, 1), clean_outputs=outs)
    return total, lv


def subbatch_gradient(model: Model, task: TaskSpec, indices: Sequence[int], seed: int,
                      r3f: R3FConfig | None = None) -> tuple[Gradient, LossValue]:
    """Gradient of one sub-batch's scaled loss in an isolated tape."""
    tape = Tape()
    total, lv = subbatch_loss(model, task, ParamView(tape, model.params), indices, seed, r3f)
    if not math.isfinite(float(total)):
        raise NonFiniteLoss(task.task_id, indices)
    return ad.backward(tape, total), lv


def reduce_deterministic(sub_gradients: Sequence[tuple[str, int, Gradient]]) -> Gradient:
    """Sum ``(task_id, worker_index, gradient)`` triples in (task_id, worker) order.

    Keys missing from a gradient count as zero. The result does not depend on
    the order in which workers finished.
    """
    ordered = sorted(sub_gradients, key=lambda x: (x[0], x[1]))
    out: Gradient = {}
    for task_id, worker, g in ordered:
        for key, val in g.items():
            prev = out.get(key)
            if prev is None:
                out[key] = np.array(val, dtype=np.float64, copy=True)
            elif prev.shape != val.shape:
                raise ValueError(f"shape mismatch under {key!r}: {prev.shape} vs {val.shape} (task {task_id}, worker {worker})")
            else:
                out[key] = prev + val
    return out


def accumulate_heterogeneous(
    model: Model,
    batch: HeterogeneousBatch,
    registry: Registry,
    seed: int,
    r3f: R3FConfig | None = None,
    weight_by_examples: bool = False,
    executor: Executor | None = None,
) -> tuple[Gradient, list[LossValue]]:
    """Average the per-worker scaled-loss gradients of one update.

    Worker ``k`` uses ``sub_seed(seed, k)`` for dropout and noise, so an
    isolated recomputation of any sub-batch reproduces it exactly. With
    ``weight_by_examples`` each worker is weighted by its sub-batch size
    instead of uniformly.
    """
    K = len(batch)
    jobs = [(k, sb, registry.get(sb.task_id)) for k, sb in enumerate(batch.sub_batches)]

    def run(job):
        k, sb, task = job
        g, lv = subbatch_gradient(model, task, sb.indices, sub_seed(seed, k), r3f)
        return k, sb, g, lv

    results = list(executor.map(run, jobs)) if executor is not None else [run(j) for j in jobs]
    total_examples = sum(len(sb.indices) for sb in batch.sub_batches)
    parts = []
    for k, sb, g, _ in results:
        w = len(sb.indices) * K / total_examples if weight_by_examples else 1.0
        parts.append((sb.task_id, k, g if w == 1.0 else {n: v * w for n, v in g.items()}))
    summed = reduce_deterministic(parts)
    grad = {n: v / K for n, v in summed.items()}
    losses = [lv for _, _, _, lv in sorted(results, key=lambda r: r[0])]
    return grad, losses


# --- optimizer ------------------------------------------------------------------------


@dataclass
class OptimizerState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    @classmethod
    def for_params(cls, params: Mapping[str, np.ndarray], **hyper) -> "OptimizerState":
        return cls(m={k: np.zeros_like(p) for k, p in params.items()}, v={k: np.zeros_like(p) for k, p in params.items()}, **hyper)


def optimizer_step(params: Mapping[str, np.ndarray], gradient: Gradient, state: OptimizerState,
                   lr: float | None = None) -> tuple[dict, OptimizerState]:
    """Adam with bias correction. Parameters absent from ``gradient`` are left as is."""
    unknown = set(gradient) - set(params)
    if unknown:
        raise KeyError(f"gradient keys without parameters: {sorted(unknown)}")
    for k, g in gradient.items():
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient for {k!r}; step refused")
    lr = state.lr if lr is None else lr
    t = state.step + 1
    b1, b2 = state.beta1, state.beta2
    c1, c2 = 1.0 - b1**t, 1.0 - b2**t
    new_params, m, v = dict(params), dict(state.m), dict(state.v)
    for k in sorted(gradient):
        g = gradient[k]
        mk = b1 * m.get(k, np.zeros_like(g)) + (1.0 - b1) * g
        vk = b2 * v.get(k, np.zeros_like(g)) + (1.0 - b2) * g * g
        m[k], v[k] = mk, vk
        new_params[k] = params[k] - lr * (mk / c1) / (np.sqrt(vk / c2) + state.eps)
    return new_params, OptimizerState(state.lr, b1, b2, state.eps, t, m, v)


def linear_schedule(step: int, total_steps: int, warmup_steps: int, peak_lr: float) -> float:
    """Linear warmup to ``peak_lr`` then linear decay to zero at ``total_steps``."""
    if warmup_steps > 0 and step < warmup_steps:
        return peak_lr * (step + 1) / warmup_steps
    span = max(1, total_steps - warmup_steps)
    return peak_lr * max(0.0, (total_steps - step) / span)
