import json
import struct

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from prefinetune.checkpoint import MAGIC, Checkpoint, CheckpointError
from prefinetune.config import RunConfig, config_from_dict, dump_config, load_config, output_root
from prefinetune.metrics import MetricsRecord, read_metrics_csv, read_table, token_f1, write_metrics_csv
from prefinetune.model import ModelConfig
from prefinetune.scheduler import OptimizerState, optimizer_step

from helpers import TINY, tiny_model, tiny_registry


def _checkpoint(seed=0, with_opt=True):
    model = tiny_model(tiny_registry(), seed=seed)
    opt = None
    if with_opt:
        opt = OptimizerState.for_params(model.params, lr=3e-3)
        grad = {k: np.full_like(v, 0.1) for k, v in model.params.items()}
        _, opt = optimizer_step(model.params, grad, opt)
    return Checkpoint(model.config, model.heads, model.params, opt, step=7, seed_lineage=[seed, 3])


def test_save_load_save_is_byte_identical(tmp_path):
    ck = _checkpoint()
    p1 = ck.save(tmp_path / "a.bin")
    p2 = Checkpoint.load(p1).save(tmp_path / "b.bin")
    assert p1.read_bytes() == p2.read_bytes()


def test_round_trip_is_bitwise(tmp_path):
    ck = _checkpoint()
    back = Checkpoint.load(ck.save(tmp_path / "c.bin"), expected_config=TINY)
    assert back.config == ck.config and back.heads == ck.heads
    assert back.step == 7 and back.seed_lineage == [0, 3]
    for k in ck.params:
        assert back.params[k].tobytes() == ck.params[k].tobytes()
        assert back.optimizer.m[k].tobytes() == ck.optimizer.m[k].tobytes()
        assert back.optimizer.v[k].tobytes() == ck.optimizer.v[k].tobytes()
    assert back.optimizer.step == ck.optimizer.step == 1


def test_checkpoint_without_optimizer(tmp_path):
    ck = _checkpoint(with_opt=False)
    back = Checkpoint.load(ck.save(tmp_path / "d.bin"))
    assert back.optimizer is None


def test_layout_header_and_blocks(tmp_path):
    ck = _checkpoint()
    blob = ck.to_bytes()
    assert blob[:8] == MAGIC
    (hlen,) = struct.unpack("<Q", blob[8:16])
    header = json.loads(blob[16:16 + hlen])
    assert header["format_version"] == 1
    assert header["config_digest"] == TINY.digest()
    first = header["tensors"][0]
    raw = blob[16 + hlen + first["offset"]:16 + hlen + first["offset"] + first["nbytes"]]
    name = first["name"].split("/", 1)[1]
    np.testing.assert_array_equal(np.frombuffer(raw, "<f8").reshape(first["shape"]), ck.params[name])
    assert sum(t["nbytes"] for t in header["tensors"]) == len(blob) - 16 - hlen


def test_digest_mismatch_is_an_error(tmp_path):
    path = _checkpoint().save(tmp_path / "e.bin")
    other = ModelConfig(vocab_size=32, max_positions=32, d_model=8, n_heads=2, n_layers=2, ffn_dim=16)
    with pytest.raises(CheckpointError, match="digest"):
        Checkpoint.load(path, expected_config=other)


def test_tampered_config_is_an_error(tmp_path):
    blob = bytearray(_checkpoint().to_bytes())
    i = blob.find(b'"d_model":8')
    blob[i:i + 11] = b'"d_model":4'
    with pytest.raises(CheckpointError):
        Checkpoint.from_bytes(bytes(blob))


def test_bad_magic_rejected():
    with pytest.raises(CheckpointError, match="magic"):
        Checkpoint.from_bytes(b"NOTACKPT" + bytes(16))


def _rec(**kw):
    base = dict(run_id="r", phase="finetune", task_id="t", step=1, metric="accuracy", value=0.5)
    base.update(kw)
    return MetricsRecord(**base)


def test_metrics_csv_round_trip_with_exact_floats(tmp_path):
    recs = [_rec(value=0.1 + 0.2), _rec(step=2, value=1 / 3, seed=4, split_fraction=0.2125), _rec(task_id='a,"b"', value=-0.0)]
    path = write_metrics_csv(recs, tmp_path / "m.csv")
    assert read_metrics_csv(path) == recs
    text = path.read_bytes()
    assert b"\r\n" in text and b'"a,""b"""' in text


def test_metrics_reject_duplicates_and_unknown_names(tmp_path):
    with pytest.raises(ValueError, match="duplicate"):
        write_metrics_csv([_rec(), _rec(value=0.7)], tmp_path / "x.csv")
    with pytest.raises(ValueError):
        _rec(phase="pretrain")
    with pytest.raises(ValueError):
        _rec(metric="bleu")


def test_metrics_header_includes_seed(tmp_path):
    write_metrics_csv([_rec(seed=9)], tmp_path / "s.csv")
    assert read_table(tmp_path / "s.csv")[0]["seed"] == "9"


@given(st.lists(st.integers(0, 5), max_size=8), st.lists(st.integers(0, 5), max_size=8))
def test_token_f1_bounds_and_identity(a, b):
    f = token_f1(a, b)
    assert 0.0 <= f <= 1.0
    assert token_f1(b, b) == 1.0
    assert token_f1(a, b) == pytest.approx(token_f1(b, a))


def test_token_f1_value():
    # overlap 2, precision 2/3, recall 2/4
    assert token_f1([1, 2, 9], [1, 2, 3, 4]) == pytest.approx(2 * (2 / 3) * 0.5 / (2 / 3 + 0.5))


def test_config_toml_round_trip(tmp_path):
    cfg = config_from_dict({"steps": 5, "model": {"d_model": 16, "n_heads": 2}, "finetune": {"lrs": [0.1, 0.2]}})
    (tmp_path / "c.toml").write_text(dump_config(cfg))
    back = load_config(tmp_path / "c.toml")
    assert back == cfg and back.digest() == cfg.digest()


def test_config_rejects_unknown_keys_and_zero_steps():
    with pytest.raises(ValueError, match="unknown"):
        config_from_dict({"stepz": 3})
    with pytest.raises(ValueError, match="unknown"):
        config_from_dict({"model": {"depth": 3}})
    with pytest.raises(ValueError):
        RunConfig(steps=0)


def test_output_root_from_environment(monkeypatch, tmp_path):
    monkeypatch.setenv("PREFINETUNE_OUTPUT_ROOT", str(tmp_path))
    assert output_root() == tmp_path
    assert output_root(RunConfig(output_dir="elsewhere")).name == "elsewhere"
