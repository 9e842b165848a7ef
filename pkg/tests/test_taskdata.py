import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy.stats import chi2_contingency

from prefinetune.model import FAMILIES, HeadTable, Model, ModelConfig
from prefinetune.experiments import _train_single, finetune_model
from prefinetune.metrics import evaluate
from prefinetune.taskdata import (
    MIXTURE_FAMILIES,
    Dataset,
    Registry,
    SchemaError,
    TaskSpec,
    Tokenizer,
    collate,
    default_fractions,
    load_jsonl,
    low_resource_splits,
    nested_task_subsets,
    register_task,
    sample_tasks,
    split_indices,
    synth_generate,
    synth_task,
    mixture_registry,
    write_jsonl,
)


def test_mixture_registry_family_counts():
    reg = mixture_registry()
    assert reg.family_counts() == {"classification": 26, "summarization": 4, "mrc": 6, "commonsense": 10}
    assert len(reg) == 46


def test_mixture_registry_total_train():
    reg = mixture_registry()
    assert round(reg.total_train() / 1e6, 1) == 4.8
    for fam, row in MIXTURE_FAMILIES.items():
        assert reg.family_train_sizes()[fam] == row["train"]


def test_single_task_has_weight_one():
    reg = register_task(TaskSpec("a", "classification", 2, 10), Registry())
    np.testing.assert_array_equal(reg.weights, [1.0])


def test_duplicate_task_rejected():
    reg = register_task(TaskSpec("a", "classification", 2, 10), Registry())
    with pytest.raises(ValueError, match="already"):
        register_task(TaskSpec("a", "mrc", 5, 10), reg)


@given(st.lists(st.integers(1, 10**6), min_size=1, max_size=30))
def test_weights_proportional_to_train_sizes(sizes):
    reg = Registry(tuple(TaskSpec(f"t{i}", "classification", 2, s) for i, s in enumerate(sizes)))
    w = reg.weights
    assert w.sum() == pytest.approx(1.0, abs=1e-12)
    np.testing.assert_allclose(w * sum(sizes), sizes, rtol=1e-9)


def test_sampling_api_has_no_reweighting_knob():
    import inspect

    assert list(inspect.signature(sample_tasks).parameters) == ["registry", "n", "rng"]


def _write(tmp_path, lines):
    p = tmp_path / "d.jsonl"
    p.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return p


def test_load_classification_two_labels(tmp_path):
    p = _write(tmp_path, [json.dumps({"text": "a b", "label": 1}), json.dumps({"text": "c", "label": 0})])
    ds = load_jsonl(p, "classification")
    assert ds.n_predictions(100) == 2


def test_load_rejects_span_past_passage(tmp_path):
    rec = {"passage": "x y z", "question": "q", "answer_start": 1, "answer_end": 3}
    p = _write(tmp_path, [json.dumps({**rec, "answer_end": 2}), json.dumps(rec)])
    with pytest.raises(SchemaError, match="line 2.*answer_end"):
        load_jsonl(p, "mrc")


def test_load_reports_malformed_line(tmp_path):
    p = _write(tmp_path, [json.dumps({"text": "a", "label": 0}), "{not json"])
    with pytest.raises(SchemaError, match="line 2"):
        load_jsonl(p, "classification")


def test_load_names_missing_field(tmp_path):
    p = _write(tmp_path, [json.dumps({"context": "c", "gold": 0})])
    with pytest.raises(SchemaError, match="candidates"):
        load_jsonl(p, "commonsense")


def test_load_names_mistyped_field(tmp_path):
    p = _write(tmp_path, [json.dumps({"text": "a", "label": "1"})])
    with pytest.raises(SchemaError, match="label"):
        load_jsonl(p, "classification")


@pytest.mark.parametrize("family", FAMILIES)
def test_jsonl_round_trip(tmp_path, family):
    ds = synth_generate(family, 30, difficulty_seed=4)
    write_jsonl(ds, tmp_path / "x.jsonl")
    back = load_jsonl(tmp_path / "x.jsonl", family, ds.num_labels)
    assert back.records == ds.records


@pytest.mark.parametrize("family", FAMILIES)
def test_synth_is_deterministic(family):
    a = synth_generate(family, 100, difficulty_seed=9)
    b = synth_generate(family, 100, difficulty_seed=9)
    assert json.dumps(a.records, sort_keys=True) == json.dumps(b.records, sort_keys=True)


def test_synth_rejects_empty():
    with pytest.raises(ValueError):
        synth_generate("mrc", 0, 1)


@pytest.mark.parametrize("family", FAMILIES)
def test_every_record_validates_and_collates(family):
    task = synth_task("t", family, 20, 5, difficulty_seed=2)
    items = task.train.encoded(Tokenizer(64))
    batch = collate(family, items)
    assert batch["ids"].max() < 64
    from prefinetune.taskdata import validate_record

    for r in task.train.records:
        validate_record(family, r, num_labels=task.train.num_labels)


def test_n_predictions_consistent_with_family():
    assert synth_task("c", "classification", 10, 2, 1).n_predictions == synth_task("c", "classification", 10, 2, 1).train.num_labels
    assert synth_task("s", "summarization", 10, 2, 1, vocab_size=64).n_predictions == 64
    mrc = synth_task("m", "mrc", 10, 2, 1)
    assert mrc.n_predictions == max(len(r["passage"].split()) for r in mrc.train.records)
    cs = synth_task("k", "commonsense", 10, 2, 1)
    assert cs.n_predictions == len(cs.train.records[0]["candidates"])


def test_classification_task_is_learnable():
    cfg = ModelConfig(vocab_size=64, max_positions=32, d_model=32, n_heads=2, n_layers=2, ffn_dim=64, dropout=0.0)
    task = synth_task("c", "classification", 150, 10, difficulty_seed=0)
    model = finetune_model(Model.initialise(cfg, HeadTable(), 0), task, False, 0)
    model = _train_single(model, task, 200, 16, 20, 3e-3, 0)
    assert evaluate(model, "classification", "c", task.train)["accuracy"] >= 0.95


def _unigrams(family, ds, tok):
    field = {"classification": "text", "mrc": "passage", "commonsense": "context", "summarization": "source"}[family]
    counts = np.zeros(tok.vocab_size)
    for r in ds.records:
        np.add.at(counts, tok.encode(r[field]), 1)
    return counts


@pytest.mark.parametrize("other", ["mrc", "commonsense", "summarization"])
def test_families_share_unigram_statistics(other):
    tok = Tokenizer(64)
    a = _unigrams("classification", synth_generate("classification", 500, 11, latent_seed=3), tok)
    b = _unigrams(other, synth_generate(other, 500, 12, latent_seed=3), tok)
    keep = (a + b) > 0
    assert chi2_contingency(np.stack([a[keep], b[keep]]))[1] > 0.01


def test_default_split_sizes_on_1000():
    sizes = [len(ix) for ix in split_indices(1000)]
    assert sizes == [100, 212, 325, 437, 550, 662, 775, 887, 1000]


def test_full_fraction_is_whole_dataset_in_order():
    ds = synth_generate("classification", 40, 1)
    full = low_resource_splits(ds, [1.0])[0]
    assert full.records == ds.records


def test_splits_deterministic_per_seed():
    a = split_indices(500, seed=3)
    b = split_indices(500, seed=3)
    c = split_indices(500, seed=4)
    assert all(np.array_equal(x, y) for x, y in zip(a, b))
    assert not np.array_equal(a[0], c[0])


@pytest.mark.parametrize("frac", [0.0, -0.2, 1.5])
def test_split_rejects_bad_fraction(frac):
    with pytest.raises(ValueError):
        split_indices(100, [frac])


@given(st.integers(1, 3000), st.integers(0, 100))
def test_split_sizes_are_floors_without_replacement(n, seed):
    fr = default_fractions()
    for f, ix in zip(fr, split_indices(n, fr, seed)):
        assert len(ix) == int(np.floor(f * n + 1e-9))
        assert len(set(ix.tolist())) == len(ix)
        assert ix.min(initial=0) >= 0 and ix.max(initial=0) < n


@given(st.integers(5, 40), st.integers(0, 1000))
def test_nested_subsets_contain_smaller_ones_and_probes_first(n, seed):
    ids = [f"t{i}" for i in range(n)]
    probes = ids[-5:]
    sizes = sorted({0, 2, 5, min(10, n), n})
    subs = nested_task_subsets(ids, sizes, probes, seed)
    for small, big in zip(subs, subs[1:]):
        assert set(small) <= set(big)
    for s in subs:
        k = min(len(s), 5)
        assert list(s[:k]) == probes[:k]
