from dataclasses import replace

import numpy as np
import pytest

from prefinetune.config import SuiteConfig
from prefinetune.experiments import (
    DivergenceError,
    ablate_batching,
    ablate_scale,
    build_suite,
    finetune_model,
    fraction_to_target,
    initial_model,
    lowres_grid,
    params_digest,
    raw_model,
    run_finetune,
    run_prefinetune,
)
from prefinetune.metrics import MetricsRecord, evaluate, write_metrics_csv
from prefinetune.model import Model
from prefinetune.plotting import MissingCellError, export_plot_data
from prefinetune.scheduler import (
    OptimizerState,
    build_batch_stream,
    linear_schedule,
    optimizer_step,
    sub_seed,
    subbatch_gradient,
)
from prefinetune.taskdata import Registry, synth_task

from helpers import smoke_config


@pytest.fixture(scope="module")
def ten_task_run():
    cfg = smoke_config(
        suite=SuiteConfig(n_classification=6, n_mrc=2, n_commonsense=2, train_min=60, train_max=100, eval_size=40),
        worker_count=4, batch_size=8, steps=500, warmup_steps=50, eval_limit=40,
    )
    reg = build_suite(cfg.suite, cfg.model.vocab_size)
    ckpt, records = run_prefinetune(cfg, reg)
    return cfg, reg, ckpt, records


def test_prefinetune_lowers_every_eval_loss(ten_task_run):
    _, reg, _, records = ten_task_run
    loss = {(r.task_id, r.step): r.value for r in records if r.metric == "loss"}
    for t in reg.task_ids:
        assert np.isfinite(loss[(t, 500)])
        assert loss[(t, 500)] < loss[(t, 0)], t


def _binary_probe(reg):
    return next(t for t in reg if t.family == "classification" and t.n_predictions == 2)


def test_reused_head_beats_chance_at_step_zero(ten_task_run):
    cfg, reg, ckpt, _ = ten_task_run
    task = _binary_probe(reg)
    res = run_finetune(ckpt, task, replace(cfg, finetune=replace(cfg.finetune, steps=1)), reuse_head=True)
    assert res.step0["accuracy"] > 1 / task.n_predictions


def test_fresh_head_is_near_chance_at_step_zero(ten_task_run):
    cfg, reg, ckpt, _ = ten_task_run
    task = _binary_probe(reg)
    base = Model(ckpt.config, ckpt.heads, ckpt.params)
    accs = [evaluate(finetune_model(base, task, False, seed), task.family, task.task_id, task.eval)["accuracy"]
            for seed in range(20)]
    n = 20 * len(task.eval)
    half_width = 3 * np.sqrt(0.25 / n)
    assert abs(np.mean(accs) - 0.5) < half_width


def test_single_task_run_is_plain_scaled_training():
    cfg = smoke_config(worker_count=1, steps=8, r3f_enabled=False)
    task = synth_task("solo", "classification", 40, 10, difficulty_seed=1, vocab_size=64)
    reg = Registry((task,))
    ckpt, _ = run_prefinetune(cfg, reg, evaluate_tasks=False)
    model = initial_model(cfg, reg)
    params = model.params
    opt = OptimizerState.for_params(params, lr=cfg.lr)
    stream = build_batch_stream(cfg.strategy, reg, cfg.batch_size, 1, cfg.seed)
    for step in range(cfg.steps):
        sb = next(stream).sub_batches[0]
        g, _ = subbatch_gradient(Model(model.config, model.heads, params), task, sb.indices, sub_seed(sub_seed(cfg.seed, step), 0))
        params, opt = optimizer_step(params, g, opt, linear_schedule(step, cfg.steps, cfg.warmup_steps, cfg.lr))
    assert all(ckpt.params[k].tobytes() == params[k].tobytes() for k in params)


def test_same_seed_gives_identical_metrics_files(tmp_path):
    cfg = smoke_config()
    reg = build_suite(cfg.suite, cfg.model.vocab_size)
    a = write_metrics_csv(run_prefinetune(cfg, reg)[1], tmp_path / "a.csv")
    b = write_metrics_csv(run_prefinetune(cfg, reg)[1], tmp_path / "b.csv")
    assert a.read_bytes() == b.read_bytes()


def test_divergence_aborts_with_step():
    cfg = smoke_config(divergence_threshold=0.5)
    reg = build_suite(cfg.suite, cfg.model.vocab_size)
    with pytest.raises(DivergenceError) as info:
        run_prefinetune(cfg, reg, evaluate_tasks=False)
    assert info.value.step == 0


def test_summarization_rejected_on_encoder_only():
    cfg = smoke_config()
    task = synth_task("s", "summarization", 10, 4, difficulty_seed=0, vocab_size=64)
    with pytest.raises(ValueError, match="encoder-only"):
        run_finetune(raw_model(cfg, 0), task, cfg, reuse_head=False)
    with pytest.raises(ValueError, match="encoder-decoder"):
        run_prefinetune(cfg, Registry((task,)))


def test_summarization_finetune_on_encoder_decoder():
    cfg = smoke_config()
    cfg = replace(cfg, model=replace(cfg.model, architecture="encoder_decoder"))
    task = synth_task("s", "summarization", 10, 4, difficulty_seed=0, vocab_size=64)
    res = run_finetune(raw_model(cfg, 0), task, cfg, reuse_head=True)
    assert {"loss", "rouge-proxy"} <= set(res.best)


def test_finetune_grid_reports_best():
    cfg = smoke_config()
    reg = build_suite(cfg.suite, cfg.model.vocab_size)
    res = run_finetune(raw_model(cfg, 0), reg.get("cls_00"), cfg, reuse_head=False)
    assert res.best_lr in cfg.finetune.lrs and res.best_dropout in cfg.finetune.dropouts
    assert {(r.step, r.metric) for r in res.records} == {(0, "accuracy"), (0, "loss"), (5, "accuracy"), (5, "loss")}


@pytest.fixture(scope="module")
def scale_run():
    cfg = smoke_config()
    reg = build_suite(cfg.suite, cfg.model.vocab_size)
    before = [(t, t.train, t.eval) for t in reg]
    scale = ablate_scale(cfg, reg)
    assert [(t, t.train, t.eval) for t in reg] == before
    return cfg, reg, scale


def test_scale_rows_cardinality_and_zero_row(scale_run):
    cfg, _, scale = scale_run
    sizes = {0, 2, 4}
    for seed in cfg.ablation.seeds:
        rows = [r for r in scale.records if r.seed == seed]
        assert len(rows) == len(sizes) * cfg.ablation.n_probes
        assert {r.n_prefinetune_tasks for r in rows} == sizes
    assert scale.subsets[(0, 0)] == ()


def test_scale_subsets_are_nested_with_probes_first(scale_run):
    _, _, scale = scale_run
    assert scale.subsets[(0, 2)] == ("cls_00", "cls_01")
    assert set(scale.subsets[(0, 2)]) <= set(scale.subsets[(0, 4)])


def test_lowres_grid_cardinality_and_full_fraction_column(scale_run):
    cfg, reg, scale = scale_run
    cfg = replace(cfg, ablation=replace(cfg.ablation, fractions=()))
    grid = lowres_grid(cfg, reg, scale)
    probes = ("cls_00", "cls_01")
    for p in probes:
        assert len([r for r in grid if r.task_id == p]) == len(scale.checkpoints) * 9
    full = {(r.seed, r.n_prefinetune_tasks, r.task_id): r.value for r in grid if r.split_fraction == 1.0}
    ref = {(r.seed, r.n_prefinetune_tasks, r.task_id): r.value for r in scale.records}
    assert full == ref


def test_fraction_to_target():
    recs = [MetricsRecord("lowres", "finetune", t, 5, "accuracy", v, f, 3, 0)
            for t, f, v in [("a", 0.1, 0.5), ("b", 0.1, 0.7), ("a", 0.5, 0.8), ("b", 0.5, 0.9)]]
    assert fraction_to_target(recs, 0, 3, 0.8) == 0.5
    assert fraction_to_target(recs, 0, 3, 0.95) == float("inf")


def test_batching_arms_share_initialisation():
    cfg = smoke_config(ablation=replace(smoke_config().ablation, seeds=(0,)))
    reg = build_suite(cfg.suite, cfg.model.vocab_size)
    result = ablate_batching(cfg, reg)
    assert len({d for (_, _), d in result.init_digests.items()}) == 1
    assert {r.run_id for r in result.records} == {
        "batching:dataset_homogeneous", "batching:batch_homogeneous", "batching:batch_heterogeneous"}
    assert len(result.records) == 3 * cfg.ablation.n_probes


def test_params_digest_sensitive_to_values():
    cfg = smoke_config()
    a = raw_model(cfg, 0).params
    b = {k: v.copy() for k, v in a.items()}
    assert params_digest(a) == params_digest(b)
    b["tok_emb"][0, 0] += 1e-12
    assert params_digest(a) != params_digest(b)


def test_scale_export_has_one_series_per_probe(scale_run, tmp_path):
    _, _, scale = scale_run
    csv, svg = export_plot_data(scale.records, "scale", tmp_path)
    lines = csv.read_text().splitlines()
    assert lines[0] == "n_tasks,task,accuracy"
    assert {line.split(",")[1] for line in lines[1:]} == {"cls_00", "cls_01"}
    assert svg.read_text().count('id="line2d_') >= 2


def test_heatmap_export_has_nine_fraction_columns(scale_run, tmp_path):
    cfg, reg, scale = scale_run
    grid = lowres_grid(replace(cfg, ablation=replace(cfg.ablation, fractions=())), reg, scale)
    csv, _ = export_plot_data(grid, "lowres", tmp_path / "one")
    rows = csv.read_text().splitlines()
    assert len(rows[0].split(",")) == 1 + 9
    assert len(rows) == 1 + 3
    again, svg2 = export_plot_data(grid, "lowres", tmp_path / "two")
    assert again.read_bytes() == csv.read_bytes()
    assert svg2.read_bytes() == (tmp_path / "one" / "lowres.svg").read_bytes()
    with pytest.raises(MissingCellError, match="fraction=1.0"):
        export_plot_data([r for r in grid if not (r.task_id == "cls_01" and r.split_fraction == 1.0
                                                   and r.n_prefinetune_tasks == 4)], "lowres", tmp_path / "x")
