"""Small shared fixtures for the test modules."""

from prefinetune.model import HeadTable, Model, ModelConfig
from prefinetune.taskdata import Dataset, Registry, TaskSpec, synth_task

TINY = ModelConfig(vocab_size=32, max_positions=32, d_model=8, n_heads=2, n_layers=1, ffn_dim=16, dropout=0.1)


def tiny_registry(families=("classification", "classification", "mrc", "commonsense"), size=24, seed=0) -> Registry:
    tasks = []
    for i, fam in enumerate(families):
        tasks.append(synth_task(f"{fam[:3]}_{i}", fam, size + 3 * i, 8, difficulty_seed=seed * 100 + i, vocab_size=32))
    return Registry(tuple(tasks))


def tiny_model(registry: Registry, config: ModelConfig = TINY, seed: int = 0) -> Model:
    return Model.initialise(config, HeadTable.for_tasks(registry), seed)


def wide_label_task(task_id: str, n_labels: int, size: int = 16) -> TaskSpec:
    """A classification task whose label space has ``n_labels`` classes."""
    base = synth_task(task_id, "classification", size, 4, difficulty_seed=7, vocab_size=32)
    records = tuple({"text": r["text"], "label": (r["label"] * 37 + i) % n_labels} for i, r in enumerate(base.train.records))
    train = Dataset("classification", records, n_labels)
    return TaskSpec(task_id, "classification", n_labels, size, 4, "wide", train, base.eval)


# criterion number -> one-line verdict, printed in the pytest summary
ACCEPTANCE_LINES: dict[int, str] = {}


def smoke_config(**overrides):
    """Seconds-scale run configuration."""
    from dataclasses import replace

    from prefinetune.config import AblationConfig, FinetuneConfig, RunConfig, SuiteConfig

    cfg = RunConfig(
        model=ModelConfig(vocab_size=64, max_positions=32, d_model=16, n_heads=2, n_layers=1, ffn_dim=32, dropout=0.1),
        suite=SuiteConfig(n_classification=4, n_mrc=1, n_commonsense=1, train_min=30, train_max=50, eval_size=20),
        finetune=FinetuneConfig(steps=5, batch_size=8, warmup_steps=1, lrs=(3e-3,), dropouts=(0.0, 0.1), eval_limit=20),
        ablation=AblationConfig(seeds=(0, 1), scale_sizes=(2, 4), n_probes=2),
        worker_count=2, batch_size=4, steps=10, warmup_steps=2, eval_limit=20,
    )
    return replace(cfg, **overrides)
