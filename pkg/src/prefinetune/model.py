"""Toy transformer encoder / encoder-decoder with per-family task heads.

Parameters live in a flat ``dict[str, np.ndarray]``; forward functions take a
:class:`~prefinetune.autodiff.ParamView` (or a plain dict, which is bound to a
fresh tape) and return tape tensors.
"""

from __future__ import annotations

import hashlib
import json
import math
import zlib
from dataclasses import asdict, dataclass
from typing import Iterable, Mapping

import numpy as np

from . import autodiff as ad
from .autodiff import ParamView, Tape, Tensor

FAMILIES = ("classification", "summarization", "mrc", "commonsense")
ARCHITECTURES = ("encoder_only", "encoder_decoder")
NEG_INF = -1e9


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int = 512
    max_positions: int = 128
    d_model: int = 64
    n_heads: int = 4
    n_layers: int = 2
    ffn_dim: int = 128
    architecture: str = "encoder_only"
    dropout: float = 0.1
    label_smoothing_epsilon: float = 0.1

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise ValueError(f"d_model={self.d_model} is not divisible by n_heads={self.n_heads}")
        if not 0 <= self.dropout < 1:
            raise ValueError(f"dropout must lie in [0, 1), got {self.dropout}")
        if not 0 <= self.label_smoothing_epsilon < 1:
            raise ValueError(f"label_smoothing_epsilon must lie in [0, 1), got {self.label_smoothing_epsilon}")
        if self.architecture not in ARCHITECTURES:
            raise ValueError(f"unknown architecture {self.architecture!r}")
        for name in ("vocab_size", "max_positions", "d_model", "n_heads", "ffn_dim"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.n_layers < 0:
            raise ValueError("n_layers must be non-negative")

    def to_dict(self) -> dict:
        return asdict(self)

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":")).encode()
        return hashlib.sha256(blob).hexdigest()


# --- head policy ----------------------------------------------------------


def head_key_for(family: str, task_id: str) -> str | None:
    """Head key under the sharing policy.

    Sentence-level classification gets one head per dataset, commonsense and
    MRC share one head per family, summarization reuses the decoder output
    projection and has no head.
    """
    if family == "classification":
        return f"cls:{task_id}"
    if family in ("mrc", "commonsense"):
        return family
    if family == "summarization":
        return None
    raise ValueError(f"unknown task family {family!r}")


class HeadTable:
    """head key -> (family, output width)."""

    def __init__(self, entries: Mapping[str, tuple[str, int]] | None = None):
        self.entries: dict[str, tuple[str, int]] = dict(entries or {})

    @classmethod
    def for_tasks(cls, tasks: Iterable) -> "HeadTable":
        table = cls()
        for t in tasks:
            table.register(t.family, t.task_id, t.n_predictions)
        return table

    def register(self, family: str, task_id: str, n_predictions: int) -> str | None:
        key = head_key_for(family, task_id)
        if key is None:
            return None
        n_out = {"classification": n_predictions, "mrc": 2, "commonsense": 1}[family]
        prev = self.entries.get(key)
        if prev is not None and prev != (family, n_out):
            raise ValueError(f"head {key!r} already registered as {prev}, cannot re-register as {(family, n_out)}")
        self.entries[key] = (family, n_out)
        return key

    def __contains__(self, key) -> bool:
        return key in self.entries

    def __len__(self) -> int:
        return len(self.entries)

    def keys(self):
        return self.entries.keys()

    def param_names(self, key: str) -> tuple[str, str]:
        return f"head.{key}.w", f"head.{key}.b"

    def param_shapes(self, key: str, d_model: int) -> dict[str, tuple[int, ...]]:
        _, n_out = self.entries[key]
        w, b = self.param_names(key)
        return {w: (d_model, n_out), b: (n_out,)}

    def merged(self, other: "HeadTable") -> "HeadTable":
        out = HeadTable(self.entries)
        for key, val in other.entries.items():
            if key in out.entries and out.entries[key] != val:
                raise ValueError(f"head {key!r} conflicts: {out.entries[key]} vs {val}")
            out.entries[key] = val
        return out

    def to_dict(self) -> dict:
        return {k: [fam, n] for k, (fam, n) in sorted(self.entries.items())}

    @classmethod
    def from_dict(cls, d: Mapping) -> "HeadTable":
        return cls({k: (v[0], int(v[1])) for k, v in d.items()})

    def __eq__(self, other) -> bool:
        return isinstance(other, HeadTable) and self.entries == other.entries


# --- parameters -----------------------------------------------------------


def _block_shapes(prefix: str, d: int, f: int, cross: bool) -> dict[str, tuple[int, ...]]:
    s = {
        f"{prefix}.ln1.g": (d,), f"{prefix}.ln1.b": (d,),
        f"{prefix}.attn.wqkv": (d, 3 * d), f"{prefix}.attn.bqkv": (3 * d,),
        f"{prefix}.attn.wo": (d, d), f"{prefix}.attn.bo": (d,),
        f"{prefix}.ln2.g": (d,), f"{prefix}.ln2.b": (d,),
        f"{prefix}.ffn.w1": (d, f), f"{prefix}.ffn.b1": (f,),
        f"{prefix}.ffn.w2": (f, d), f"{prefix}.ffn.b2": (d,),
    }
    if cross:
        s.update({
            f"{prefix}.lnx.g": (d,), f"{prefix}.lnx.b": (d,),
            f"{prefix}.xattn.wq": (d, d), f"{prefix}.xattn.bq": (d,),
            f"{prefix}.xattn.wkv": (d, 2 * d), f"{prefix}.xattn.bkv": (2 * d,),
            f"{prefix}.xattn.wo": (d, d), f"{prefix}.xattn.bo": (d,),
        })
    return s


def backbone_shapes(config: ModelConfig) -> dict[str, tuple[int, ...]]:
    d, f = config.d_model, config.ffn_dim
    shapes = {"tok_emb": (config.vocab_size, d), "pos_emb": (config.max_positions, d)}
    for i in range(config.n_layers):
        shapes.update(_block_shapes(f"enc.{i}", d, f, cross=False))
    shapes.update({"enc.ln_f.g": (d,), "enc.ln_f.b": (d,)})
    if config.architecture == "encoder_decoder":
        for i in range(config.n_layers):
            shapes.update(_block_shapes(f"dec.{i}", d, f, cross=True))
        shapes.update({"dec.ln_f.g": (d,), "dec.ln_f.b": (d,)})
    return shapes


def parameter_shapes(config: ModelConfig, heads: HeadTable) -> dict[str, tuple[int, ...]]:
    shapes = backbone_shapes(config)
    for key in sorted(heads.keys()):
        shapes.update(heads.param_shapes(key, config.d_model))
    return shapes


def parameter_count(config: ModelConfig, heads: HeadTable) -> dict[str, int]:
    """Parameter counts split into backbone and one entry per head key."""
    report = {"backbone": sum(math.prod(s) for s in backbone_shapes(config).values())}
    for key in sorted(heads.keys()):
        report[f"head:{key}"] = sum(math.prod(s) for s in heads.param_shapes(key, config.d_model).values())
    report["total"] = sum(report.values())
    return report


def _init_array(name: str, shape: tuple[int, ...], rng: np.random.Generator) -> np.ndarray:
    leaf = name.rsplit(".", 1)[-1]
    if leaf == "g":
        return np.ones(shape)
    if leaf.startswith("b"):
        return np.zeros(shape)
    if name in ("tok_emb", "pos_emb"):
        return rng.normal(0.0, 0.5, size=shape)
    std = 1.0 / math.sqrt(shape[0])
    if leaf in ("wo", "w2"):
        std *= 0.5
    return rng.normal(0.0, std, size=shape)


def _name_rng(seed: int, name: str) -> np.random.Generator:
    return np.random.default_rng([seed, zlib.crc32(name.encode())])


def init_params(config: ModelConfig, heads: HeadTable, seed: int) -> dict[str, np.ndarray]:
    """Each tensor draws from its own stream keyed by (seed, name), so the
    backbone init does not depend on which heads are registered."""
    return {name: _init_array(name, shape, _name_rng(seed, name)) for name, shape in parameter_shapes(config, heads).items()}


def init_head(config: ModelConfig, heads: HeadTable, key: str, seed: int) -> dict[str, np.ndarray]:
    return {name: _init_array(name, shape, _name_rng(seed, name)) for name, shape in heads.param_shapes(key, config.d_model).items()}


# --- forward building blocks ---------------------------------------------


def _bind(params, tape: Tape | None = None) -> ParamView:
    """Wrap a raw parameter dict, joining ``tape`` when given so that tensors
    produced by an earlier call can be combined with this one."""
    if isinstance(params, ParamView):
        return params
    return ParamView(tape if tape is not None else Tape(), params)


def _dropout(x: Tensor, p: float, rng: np.random.Generator | None) -> Tensor:
    if rng is None or p <= 0:
        return x
    keep = (rng.random(x.shape) >= p) / (1.0 - p)
    return x * keep


def _linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    return ad.add(ad.matmul(x, w), b)


def _split_heads(x: Tensor, n_heads: int) -> Tensor:
    B, T, d = x.shape
    return ad.transpose(ad.reshape(x, (B, T, n_heads, d // n_heads)), (0, 2, 1, 3))


def _merge_heads(x: Tensor) -> Tensor:
    B, H, T, dh = x.shape
    return ad.reshape(ad.transpose(x, (0, 2, 1, 3)), (B, T, H * dh))


def _attend(q: Tensor, k: Tensor, v: Tensor, mask: np.ndarray | None) -> Tensor:
    dh = q.shape[-1]
    scores = ad.matmul(q, ad.transpose(k, (0, 1, 3, 2))) * (1.0 / math.sqrt(dh))
    if mask is not None:
        scores = scores + mask
    return ad.matmul(ad.softmax(scores, axis=-1), v)


def _self_attention(p, prefix: str, x: Tensor, mask, n_heads: int) -> Tensor:
    B, T, d = x.shape
    qkv = _linear(x, p[f"{prefix}.wqkv"], p[f"{prefix}.bqkv"])
    qkv = ad.transpose(ad.reshape(qkv, (B, T, 3, n_heads, d // n_heads)), (2, 0, 3, 1, 4))
    ctx = _attend(qkv[0], qkv[1], qkv[2], mask)
    return _linear(_merge_heads(ctx), p[f"{prefix}.wo"], p[f"{prefix}.bo"])


def _cross_attention(p, prefix: str, x: Tensor, mem: Tensor, mask, n_heads: int) -> Tensor:
    B, S, d = mem.shape
    q = _split_heads(_linear(x, p[f"{prefix}.wq"], p[f"{prefix}.bq"]), n_heads)
    kv = _linear(mem, p[f"{prefix}.wkv"], p[f"{prefix}.bkv"])
    kv = ad.transpose(ad.reshape(kv, (B, S, 2, n_heads, d // n_heads)), (2, 0, 3, 1, 4))
    ctx = _attend(q, kv[0], kv[1], mask)
    return _linear(_merge_heads(ctx), p[f"{prefix}.wo"], p[f"{prefix}.bo"])


def _ffn(p, prefix: str, x: Tensor) -> Tensor:
    h = ad.gelu(_linear(x, p[f"{prefix}.w1"], p[f"{prefix}.b1"]))
    return _linear(h, p[f"{prefix}.w2"], p[f"{prefix}.b2"])


def _ln(p, prefix: str, x: Tensor) -> Tensor:
    return ad.layer_norm(x, p[f"{prefix}.g"], p[f"{prefix}.b"])


def _key_mask(pad: np.ndarray | None) -> np.ndarray | None:
    if pad is None or not pad.any():
        return None
    return np.where(pad, NEG_INF, 0.0)[:, None, None, :]


def _check_ids(ids: np.ndarray, config: ModelConfig):
    if ids.size and (ids.min() < 0 or ids.max() >= config.vocab_size):
        raise ValueError(f"token id {int(ids.max())} outside vocabulary of size {config.vocab_size}")
    if ids.shape[-1] > config.max_positions:
        raise ValueError(f"sequence length {ids.shape[-1]} exceeds max_positions={config.max_positions}")


def embed(token_ids, config: ModelConfig, params, positions=None) -> Tensor:
    """Token plus learned position embeddings, shape (B, T, d)."""
    p = _bind(params)
    ids = np.atleast_2d(np.asarray(token_ids, dtype=np.int64))
    _check_ids(ids, config)
    T = ids.shape[1]
    pos = np.arange(T) if positions is None else np.asarray(positions, dtype=np.int64)
    return ad.add(ad.embedding_lookup(p["tok_emb"], ids), ad.embedding_lookup(p["pos_emb"], pos))


def encode_embeddings(emb: Tensor, config: ModelConfig, params, pad_mask=None, rng=None) -> Tensor:
    p = _bind(params, emb.tape)
    mask = _key_mask(pad_mask)
    x = _dropout(emb, config.dropout, rng)
    for i in range(config.n_layers):
        pre = f"enc.{i}"
        x = x + _dropout(_self_attention(p, f"{pre}.attn", _ln(p, f"{pre}.ln1", x), mask, config.n_heads), config.dropout, rng)
        x = x + _dropout(_ffn(p, f"{pre}.ffn", _ln(p, f"{pre}.ln2", x)), config.dropout, rng)
    return _ln(p, "enc.ln_f", x)


def encode(token_ids, config: ModelConfig, params, pad_mask=None, dropout_seed: int | None = None, positions=None) -> Tensor:
    """Hidden states (T, d) for a 1-D id sequence or (B, T, d) for a batch.

    Dropout is active only when ``dropout_seed`` is given, which makes the
    forward pass a pure function of (ids, params, seed).
    """
    p = _bind(params)
    ids = np.asarray(token_ids, dtype=np.int64)
    rng = None if dropout_seed is None else np.random.default_rng(dropout_seed)
    out = encode_embeddings(embed(ids, config, p, positions), config, p, pad_mask, rng)
    if ids.ndim == 1:
        out = ad.reshape(out, out.shape[1:])
    return out


def _causal_mask(T: int) -> np.ndarray:
    return np.triu(np.full((T, T), NEG_INF), k=1)[None, None]


def decoder_logits(encoder_states: Tensor, dec_ids, config: ModelConfig, params, enc_pad=None, rng=None) -> Tensor:
    """Teacher-forced next-token logits (B, T, vocab) through the tied output projection."""
    if config.architecture != "encoder_decoder":
        raise ValueError("decoder requires architecture='encoder_decoder'")
    p = _bind(params, encoder_states.tape)
    x = _dropout(embed(dec_ids, config, p), config.dropout, rng)
    causal = _causal_mask(x.shape[1])
    xmask = _key_mask(enc_pad)
    for i in range(config.n_layers):
        pre = f"dec.{i}"
        x = x + _dropout(_self_attention(p, f"{pre}.attn", _ln(p, f"{pre}.ln1", x), causal, config.n_heads), config.dropout, rng)
        x = x + _dropout(_cross_attention(p, f"{pre}.xattn", _ln(p, f"{pre}.lnx", x), encoder_states, xmask, config.n_heads), config.dropout, rng)
        x = x + _dropout(_ffn(p, f"{pre}.ffn", _ln(p, f"{pre}.ln2", x)), config.dropout, rng)
    h = _ln(p, "dec.ln_f", x)
    return ad.matmul(h, ad.transpose(p["tok_emb"], (1, 0)))


def decode_step(encoder_states: Tensor, prefix_ids, config: ModelConfig, params, enc_pad=None) -> Tensor:
    """Logits (vocab,) for the token following ``prefix_ids`` (batched: (B, vocab))."""
    if config.architecture != "encoder_decoder":
        raise ValueError("decode_step requires architecture='encoder_decoder'")
    ids = np.asarray(prefix_ids, dtype=np.int64)
    batched = ids.ndim == 2
    states = encoder_states if encoder_states.ndim == 3 else ad.reshape(encoder_states, (1,) + encoder_states.shape)
    logits = decoder_logits(states, np.atleast_2d(ids), config, params, enc_pad)
    last = logits[:, -1, :]
    return last if batched else ad.reshape(last, (config.vocab_size,))


def greedy_decode(encoder_states: Tensor, config: ModelConfig, params, bos: int, eos: int, max_len: int, enc_pad=None) -> np.ndarray:
    """Greedy decoding for a batch; returns (B, max_len) ids, padded with ``eos``."""
    B = encoder_states.shape[0]
    prefix = np.full((B, 1), bos, dtype=np.int64)
    done = np.zeros(B, dtype=bool)
    out = np.full((B, max_len), eos, dtype=np.int64)
    for t in range(max_len):
        nxt = decode_step(encoder_states, prefix, config, params, enc_pad).data.argmax(axis=-1)
        nxt = np.where(done, eos, nxt)
        out[:, t] = nxt
        done |= nxt == eos
        if done.all():
            break
        prefix = np.concatenate([prefix, nxt[:, None]], axis=1)
    return out


def apply_head(head_key: str, states: Tensor, heads: HeadTable, params) -> Tensor:
    """Task logits from pooled (B, d) or per-token (B, T, d) states.

    classification -> (B, classes); mrc -> (B, T, 2) start/end columns;
    commonsense -> (B, 1) candidate score.
    """
    if head_key not in heads:
        raise KeyError(f"head {head_key!r} is not registered")
    p = _bind(params, states.tape)
    w, b = heads.param_names(head_key)
    return _linear(states, p[w], p[b])


def pool_first(states: Tensor) -> Tensor:
    return states[:, 0, :]


# --- task forwards ---------------------------------------------------------


def task_embeddings(family: str, batch: Mapping, config: ModelConfig, params) -> Tensor:
    return embed(batch["ids"], config, params)


def task_outputs(
    family: str,
    head_key: str | None,
    batch: Mapping,
    config: ModelConfig,
    heads: HeadTable,
    params,
    dropout_seed: int | None = None,
    embeddings: Tensor | None = None,
) -> list[Tensor]:
    """Distribution logits for one collated sub-batch.

    Every returned tensor normalises over its last axis, which is what both the
    family losses and the embedding-noise penalty consume.
    """
    p = _bind(params)
    rng = None if dropout_seed is None else np.random.default_rng(dropout_seed)
    emb = task_embeddings(family, batch, config, p) if embeddings is None else embeddings
    states = encode_embeddings(emb, config, p, batch.get("pad"), rng)
    if family == "classification":
        return [apply_head(head_key, pool_first(states), heads, p)]
    if family == "commonsense":
        scores = apply_head(head_key, pool_first(states), heads, p)
        B, M = batch["cand_mask"].shape
        scores = ad.reshape(scores, (B, M))
        if not batch["cand_mask"].all():
            scores = scores + np.where(batch["cand_mask"], 0.0, NEG_INF)
        return [scores]
    if family == "mrc":
        tok = apply_head(head_key, states, heads, p)
        rows, cols, valid = batch["passage_index"]
        start = tok[rows, cols, 0]
        end = tok[rows, cols, 1]
        if not valid.all():
            neg = np.where(valid, 0.0, NEG_INF)
            start, end = start + neg, end + neg
        return [start, end]
    if family == "summarization":
        return [decoder_logits(states, batch["dec_in"], config, p, batch.get("pad"), rng)]
    raise ValueError(f"unknown task family {family!r}")


@dataclass
class Model:
    """Parameters together with the config and head table that shape them."""

    config: ModelConfig
    heads: HeadTable
    params: dict

    @classmethod
    def initialise(cls, config: ModelConfig, heads: HeadTable, seed: int) -> "Model":
        return cls(config, heads, init_params(config, heads, seed))

    def copy(self) -> "Model":
        return Model(self.config, HeadTable(self.heads.entries), {k: v.copy() for k, v in self.params.items()})
