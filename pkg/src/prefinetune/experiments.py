"""Pre-finetuning and fine-tuning drivers plus the three ablations."""

from __future__ import annotations

import hashlib
import math
import zlib
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .checkpoint import Checkpoint
from .config import RunConfig, SuiteConfig
from .metrics import MetricsRecord, evaluate, primary_metric
from .model import HeadTable, Model, head_key_for, init_head, init_params
from .scheduler import (
    NonFiniteLoss,
    OptimizerState,
    accumulate_heterogeneous,
    build_batch_stream,
    linear_schedule,
    optimizer_step,
    sub_seed,
    subbatch_gradient,
)
from .taskdata import (
    Registry,
    TaskSpec,
    default_fractions,
    load_jsonl,
    low_resource_splits,
    nested_task_subsets,
    synth_task,
)

FAMILY_PREFIX = {"classification": "cls", "mrc": "mrc", "commonsense": "cs", "summarization": "sum"}


class DivergenceError(RuntimeError):
    def __init__(self, step: int, loss: float):
        super().__init__(f"pre-finetuning diverged at step {step} (mean scaled loss {loss!r})")
        self.step = step
        self.loss = loss


# --- suite ---------------------------------------------------------------------


def build_suite(suite: SuiteConfig, vocab_size: int) -> Registry:
    """Synthetic tasks (deterministic in ``latent_seed``) followed by JSONL tasks."""
    rng = np.random.default_rng([suite.latent_seed, 101])
    tasks: list[TaskSpec] = []
    counts = [("classification", suite.n_classification), ("mrc", suite.n_mrc),
              ("commonsense", suite.n_commonsense), ("summarization", suite.n_summarization)]
    for family, count in counts:
        for i in range(count):
            size = int(rng.integers(suite.train_min, suite.train_max + 1))
            difficulty = int(rng.integers(2**31))
            tasks.append(synth_task(f"{FAMILY_PREFIX[family]}_{i:02d}", family, size, suite.eval_size, difficulty,
                                    suite.latent_seed, vocab_size, suite.n_groups))
    for jt in suite.jsonl:
        train = load_jsonl(jt.train, jt.family, jt.num_labels or None)
        ev = load_jsonl(jt.eval, jt.family, train.num_labels)
        tasks.append(TaskSpec(jt.task_id, jt.family, train.n_predictions(vocab_size), len(train), len(ev),
                              f"jsonl:{jt.train}", train, ev))
    return Registry(tuple(tasks))


def probe_tasks(config: RunConfig, registry: Registry) -> tuple[str, ...]:
    """Configured probes, else the first ``n_probes`` tasks of the registry."""
    if config.suite.probes:
        for p in config.suite.probes:
            registry.get(p)
        return tuple(config.suite.probes)
    return registry.task_ids[: config.ablation.n_probes]


# --- pre-finetuning ------------------------------------------------------------


def initial_model(config: RunConfig, registry: Registry) -> Model:
    return Model.initialise(config.model, HeadTable.for_tasks(registry), config.seed)


def params_digest(params: dict) -> str:
    h = hashlib.sha256()
    for k in sorted(params):
        h.update(k.encode())
        h.update(np.ascontiguousarray(params[k], dtype="<f8").tobytes())
    return h.hexdigest()


def _eval_records(model: Model, registry: Registry, config: RunConfig, run_id: str, step: int, phase: str,
                  n_tasks: int) -> list[MetricsRecord]:
    out = []
    for task in registry:
        if task.eval is None or not len(task.eval):
            continue
        res = evaluate(model, task.family, task.task_id, task.eval, config.eval_limit)
        for metric in sorted(res):
            out.append(MetricsRecord(run_id, phase, task.task_id, step, metric, res[metric], 1.0, n_tasks, config.seed))
    return out


def run_prefinetune(config: RunConfig, registry: Registry, run_id: str = "prefinetune",
                    initial: Model | None = None, evaluate_tasks: bool = True) -> tuple[Checkpoint, list[MetricsRecord]]:
    """Multi-task training for a fixed step budget.

    Evaluates every task at step 0, every ``eval_every`` steps and at the end.
    Raises :class:`DivergenceError` when the mean scaled loss of an update
    exceeds ``divergence_threshold`` or is not finite.
    """
    model = initial.copy() if initial is not None else initial_model(config, registry)
    for task in registry:
        key = head_key_for(task.family, task.task_id)
        if key is not None and key not in model.heads:
            raise ValueError(f"initial model lacks head {key!r}")
        if task.family == "summarization" and config.model.architecture == "encoder_only":
            raise ValueError(f"task {task.task_id!r} needs an encoder-decoder model")
    opt = OptimizerState.for_params(model.params, lr=config.lr, beta1=config.adam_beta1,
                                    beta2=config.adam_beta2, eps=config.adam_eps)
    stream = build_batch_stream(config.strategy, registry, config.batch_size, config.worker_count, config.seed)
    r3f = config.r3f if config.r3f_enabled else None
    n_tasks = len(registry)
    records = _eval_records(model, registry, config, run_id, 0, "prefinetune", n_tasks) if evaluate_tasks else []
    for step in range(config.steps):
        batch = next(stream)
        try:
            grad, losses = accumulate_heterogeneous(model, batch, registry, sub_seed(config.seed, step), r3f,
                                                    config.weight_by_examples)
        except NonFiniteLoss:
            raise DivergenceError(step, float("nan")) from None
        mean_loss = float(np.mean([float(lv.scaled) for lv in losses]))
        if not math.isfinite(mean_loss) or mean_loss > config.divergence_threshold:
            raise DivergenceError(step, mean_loss)
        lr = linear_schedule(step, config.steps, config.warmup_steps, config.lr)
        model.params, opt = optimizer_step(model.params, grad, opt, lr)
        done = step + 1
        if evaluate_tasks and (done == config.steps or (config.eval_every and done % config.eval_every == 0)):
            records += _eval_records(model, registry, config, run_id, done, "prefinetune", n_tasks)
    ckpt = Checkpoint(model.config, model.heads, model.params, opt, config.steps, [config.seed])
    return ckpt, records


# --- fine-tuning ---------------------------------------------------------------


@dataclass
class FinetuneResult:
    task_id: str
    step0: dict
    best: dict
    best_lr: float
    best_dropout: float
    records: list = field(default_factory=list)


def finetune_model(base: Model, task: TaskSpec, reuse_head: bool, seed: int) -> Model:
    """Backbone of ``base`` plus a single head for ``task``.

    With ``reuse_head`` the pre-finetuned head is kept when ``base`` has one of
    the right shape; otherwise the head is freshly initialised.
    """
    key = head_key_for(task.family, task.task_id)
    heads = HeadTable()
    heads.register(task.family, task.task_id, task.n_predictions)
    params = {k: v.copy() for k, v in base.params.items() if not k.startswith("head.")}
    if key is not None:
        if reuse_head and key in base.heads and base.heads.entries[key] == heads.entries[key]:
            for name in heads.param_names(key):
                params[name] = base.params[name].copy()
        else:
            params.update(init_head(base.config, heads, key, seed))
    return Model(base.config, heads, params)


def _train_single(model: Model, task: TaskSpec, steps: int, batch_size: int, warmup: int, lr: float,
                  seed: int) -> Model:
    model = model.copy()
    single = Registry((task,))
    stream = build_batch_stream("batch_homogeneous", single, min(batch_size, task.train_size), 1, seed)
    opt = OptimizerState.for_params(model.params, lr=lr)
    for step in range(steps):
        sb = next(stream).sub_batches[0]
        grad, _ = subbatch_gradient(model, task, sb.indices, sub_seed(seed, step))
        model.params, opt = optimizer_step(model.params, grad, opt, linear_schedule(step, steps, warmup, lr))
    return model


def run_finetune(checkpoint: Checkpoint | Model, task: TaskSpec, config: RunConfig, reuse_head: bool,
                 seed: int | None = None, run_id: str = "finetune", split_fraction: float = 1.0,
                 n_prefinetune_tasks: int = 0) -> FinetuneResult:
    """Fine-tune every parameter on one task over the (lr x dropout) grid.

    The data order and fresh-head initialisation depend only on ``seed`` and
    the task id, so every checkpoint and every low-resource split of a task
    sees the same randomness. The best final eval score is reported.
    """
    base = checkpoint if isinstance(checkpoint, Model) else Model(checkpoint.config, checkpoint.heads, checkpoint.params)
    if task.family == "summarization" and base.config.architecture == "encoder_only":
        raise ValueError(f"task {task.task_id!r} (summarization) cannot be fine-tuned on an encoder-only checkpoint")
    if task.eval is None or not len(task.eval):
        raise ValueError(f"task {task.task_id!r} has no eval split")
    ft = config.finetune
    seed = config.seed if seed is None else seed
    task_seed = sub_seed(seed, zlib.crc32(task.task_id.encode()))
    start = finetune_model(base, task, reuse_head, task_seed)
    metric = primary_metric(task.family)
    step0 = evaluate(start, task.family, task.task_id, task.eval, ft.eval_limit)
    best, best_cfg = None, None
    for lr in ft.lrs:
        for dropout in ft.dropouts:
            m = Model(replace(start.config, dropout=dropout), start.heads, start.params)
            trained = _train_single(m, task, ft.steps, ft.batch_size, ft.warmup_steps, lr, task_seed)
            res = evaluate(trained, task.family, task.task_id, task.eval, ft.eval_limit)
            if best is None or res[metric] > best[metric]:
                best, best_cfg = res, (lr, dropout)
    records = []
    for step, res in ((0, step0), (ft.steps, best)):
        for name in sorted(res):
            records.append(MetricsRecord(run_id, "finetune", task.task_id, step, name, res[name], split_fraction,
                                         n_prefinetune_tasks, seed))
    return FinetuneResult(task.task_id, step0, best, best_cfg[0], best_cfg[1], records)


def raw_model(config: RunConfig, seed: int) -> Model:
    """The no-pre-finetuning control: the raw initialisation with no heads."""
    return Model(config.model, HeadTable(), init_params(config.model, HeadTable(), seed))


# --- ablations -----------------------------------------------------------------


@dataclass
class ScaleAblation:
    records: list[MetricsRecord]
    checkpoints: dict  # (seed, n_tasks) -> Model
    subsets: dict  # (seed, n_tasks) -> tuple of task ids


def _accuracy_records(res: FinetuneResult, metric: str) -> list[MetricsRecord]:
    return [r for r in res.records if r.step > 0 and r.metric == metric]


def ablate_scale(config: RunConfig, registry: Registry, probes: Sequence[str] | None = None) -> ScaleAblation:
    """Pre-finetune on nested task subsets, then fine-tune every probe task.

    Size 0 is always included and means fine-tuning from the raw init.
    Emits one record per (seed, subset size, probe) of the probe's primary metric.
    """
    probes = tuple(probes) if probes is not None else probe_tasks(config, registry)
    sizes = sorted(set(config.ablation.scale_sizes) | {0})
    records, ckpts, subsets = [], {}, {}
    for seed in config.ablation.seeds:
        cfg = config.with_seed(seed)
        for n, ids in zip(sizes, nested_task_subsets(registry.task_ids, sizes, probes, seed)):
            if n == 0:
                model = raw_model(cfg, seed)
            else:
                ckpt, _ = run_prefinetune(cfg, registry.subset(ids), run_id="scale", evaluate_tasks=False)
                model = Model(ckpt.config, ckpt.heads, ckpt.params)
            ckpts[(seed, n)], subsets[(seed, n)] = model, ids
            for p in probes:
                task = registry.get(p)
                res = run_finetune(model, task, cfg, cfg.finetune.reuse_head, seed, "scale", 1.0, n)
                records += _accuracy_records(res, primary_metric(task.family))
    return ScaleAblation(records, ckpts, subsets)


@dataclass
class BatchingAblation:
    records: list[MetricsRecord]
    init_digests: dict  # (seed, strategy) -> sha256 of initial parameters


def ablate_batching(config: RunConfig, registry: Registry, probes: Sequence[str] | None = None,
                    strategies: Sequence[str] = ("dataset_homogeneous", "batch_homogeneous", "batch_heterogeneous")) -> BatchingAblation:
    """Pre-finetune under each batching strategy from one shared init, then
    fine-tune the probes. The task order is shuffled once per seed and shared
    by every arm."""
    probes = tuple(probes) if probes is not None else probe_tasks(config, registry)
    records, digests = [], {}
    for seed in config.ablation.seeds:
        cfg = config.with_seed(seed)
        order = np.random.default_rng([seed, 53]).permutation(len(registry))
        reg = Registry(tuple(registry.tasks[i] for i in order))
        init = initial_model(cfg, reg)
        for strategy in strategies:
            digests[(seed, strategy)] = params_digest(init.params)
            ckpt, _ = run_prefinetune(replace(cfg, strategy=strategy), reg, initial=init, evaluate_tasks=False)
            model = Model(ckpt.config, ckpt.heads, ckpt.params)
            for p in probes:
                task = registry.get(p)
                res = run_finetune(model, task, cfg, cfg.finetune.reuse_head, seed, f"batching:{strategy}", 1.0, len(reg))
                records += _accuracy_records(res, primary_metric(task.family))
    return BatchingAblation(records, digests)


def lowres_grid(config: RunConfig, registry: Registry, scale: ScaleAblation,
                probes: Sequence[str] | None = None) -> list[MetricsRecord]:
    """Fine-tune every low-resource split of each probe from every scale-ablation
    checkpoint (row 0 included)."""
    probes = tuple(probes) if probes is not None else probe_tasks(config, registry)
    fractions = list(config.ablation.fractions) or [float(f) for f in default_fractions()]
    records = []
    for (seed, n), model in sorted(scale.checkpoints.items()):
        cfg = config.with_seed(seed)
        for p in probes:
            task = registry.get(p)
            for frac, split in zip(fractions, low_resource_splits(task.train, fractions, seed)):
                if len(split) < 1:
                    raise ValueError(f"fraction {frac} leaves task {p!r} without training data")
                res = run_finetune(model, task.with_train(split), cfg, cfg.finetune.reuse_head, seed, "lowres", frac, n)
                records += _accuracy_records(res, primary_metric(task.family))
    return records


def fraction_to_target(records: Sequence[MetricsRecord], seed: int, n_tasks: int, target: float) -> float:
    """Smallest split fraction whose probe-mean score reaches ``target``; inf if none."""
    by_frac: dict[float, list[float]] = {}
    for r in records:
        if r.seed == seed and r.n_prefinetune_tasks == n_tasks:
            by_frac.setdefault(r.split_fraction, []).append(r.value)
    for frac in sorted(by_frac):
        if np.mean(by_frac[frac]) >= target:
            return frac
    return math.inf


def code_digest() -> str:
    """sha256 over this package's source files, in name order."""
    h = hashlib.sha256()
    for path in sorted(Path(__file__).parent.glob("*.py")):
        h.update(path.name.encode())
        h.update(path.read_bytes())
    return h.hexdigest()
