"""Task-family losses, log-normalised loss scaling and the embedding-noise
consistency penalty (R3F).

Every loss returns a :class:`LossValue` whose ``scaled`` field divides the raw
nats by ``ln n`` per data point, ``n`` being the number of predictions the loss
operates over. A uniform predictor therefore scores exactly 1.0 in every family.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

NEG_INF = -1e9


@dataclass(frozen=True)
class LossValue:
    raw: Tensor
    scaled: Tensor
    task_id: str | None
    n_predictions: int | tuple[int, ...]

    def __post_init__(self):
        ns = self.n_predictions if isinstance(self.n_predictions, tuple) else (self.n_predictions,)
        if min(ns) < 2:
            raise ValueError(f"n_predictions must be >= 2, got {self.n_predictions}")


@dataclass(frozen=True)
class R3FConfig:
    noise_kind: str = "uniform"
    noise_scale: float = 1e-5
    penalty_weight: float = 1.0

    def __post_init__(self):
        if self.noise_kind not in ("uniform", "normal"):
            raise ValueError(f"noise_kind must be 'uniform' or 'normal', got {self.noise_kind!r}")
        if not self.noise_scale > 0:
            raise ValueError("noise_scale must be > 0")
        if self.penalty_weight < 0:
            raise ValueError("penalty_weight must be >= 0")


def scale_loss(raw, n_predictions: int):
    """``raw / ln(n_predictions)``; works on floats and tensors alike."""
    if n_predictions < 2:
        raise ValueError(f"n_predictions must be >= 2 (ln {n_predictions} would divide by <= 0)")
    if not isinstance(raw, Tensor) and not math.isfinite(raw):
        raise ValueError("raw loss must be finite")
    return raw / math.log(n_predictions)


def _as_logits(x, tape=None) -> Tensor:
    return x if isinstance(x, Tensor) else ad.as_tensor(np.asarray(x, dtype=np.float64), tape)


def _onehot(gold: np.ndarray, n: int) -> np.ndarray:
    out = np.zeros(gold.shape + (n,))
    np.put_along_axis(out, gold[..., None], 1.0, axis=-1)
    return out


def _per_example_nll(logits: Tensor, gold: np.ndarray) -> Tensor:
    """-log softmax(logits)[gold] per row, shape (B,)."""
    lsm = ad.log_softmax(logits, axis=-1)
    return -ad.reduce_sum(lsm * _onehot(gold, logits.shape[-1]), axis=-1)


def _pad_mask(n_valid: np.ndarray, width: int) -> np.ndarray:
    return np.arange(width)[None, :] < n_valid[:, None]


def _finish(per_example: Tensor, n_per_example: np.ndarray, task_id) -> LossValue:
    raw = ad.reduce_mean(per_example)
    uniq = np.unique(n_per_example)
    if uniq.size == 1:
        n = int(uniq[0])
        return LossValue(raw, scale_loss(raw, n), task_id, n)
    if uniq.min() < 2:
        raise ValueError(f"n_predictions must be >= 2, got {int(uniq.min())}")
    scaled = ad.reduce_mean(per_example * (1.0 / np.log(n_per_example)))
    return LossValue(raw, scaled, task_id, tuple(int(n) for n in n_per_example))


def classification_ce(logits, gold, task_id: str | None = None) -> LossValue:
    """Cross entropy; ``logits`` is (C,) or (B, C)."""
    logits = _as_logits(logits)
    C = logits.shape[-1]
    if C < 2:
        raise ValueError(f"classification needs at least 2 classes, got {C}")
    gold = np.atleast_1d(np.asarray(gold, dtype=np.int64))
    if logits.ndim == 1:
        logits = ad.reshape(logits, (1, C))
    if gold.shape != logits.shape[:1]:
        raise ValueError(f"gold shape {gold.shape} does not match logits batch {logits.shape[:1]}")
    if gold.min() < 0 or gold.max() >= C:
        raise ValueError(f"gold class {int(gold.max())} outside [0, {C})")
    per = _per_example_nll(logits, gold)
    return LossValue(ad.reduce_mean(per), scale_loss(ad.reduce_mean(per), C), task_id, C)


def label_smoothed_ce(logits, gold_tokens, epsilon: float, mask=None, task_id: str | None = None) -> LossValue:
    """Token-averaged cross entropy against ``(1-eps)*onehot + eps/V``.

    ``logits`` is (T, V) or (B, T, V); ``mask`` marks real (non-pad) targets.
    """
    if not 0 <= epsilon < 1:
        raise ValueError(f"epsilon must lie in [0, 1), got {epsilon}")
    logits = _as_logits(logits)
    V = logits.shape[-1]
    gold = np.asarray(gold_tokens, dtype=np.int64)
    if gold.size == 0:
        raise ValueError("empty target sequence")
    if logits.ndim == 2:
        logits = ad.reshape(logits, (1,) + logits.shape)
        gold = gold[None]
    if gold.shape != logits.shape[:2]:
        raise ValueError(f"gold shape {gold.shape} does not match logits {logits.shape[:2]}")
    m = np.ones(gold.shape) if mask is None else np.asarray(mask, dtype=np.float64).reshape(gold.shape)
    if m.sum() == 0:
        raise ValueError("empty target sequence")
    lsm = ad.log_softmax(logits, axis=-1)
    target = (1.0 - epsilon) * _onehot(gold, V) + epsilon / V
    per_tok = -ad.reduce_sum(lsm * target, axis=-1)
    raw = ad.reduce_sum(per_tok * m) * (1.0 / m.sum())
    return LossValue(raw, scale_loss(raw, V), task_id, V)


def span_prediction_loss(start_logits, end_logits, gold_start, gold_end, lengths=None, task_id: str | None = None) -> LossValue:
    """Mean of start and end cross entropy over passage positions.

    Rows may be padded; ``lengths`` gives each passage's true length, which is
    also its ``n`` for scaling.
    """
    start = _as_logits(start_logits, end_logits.tape if isinstance(end_logits, Tensor) else None)
    end = _as_logits(end_logits, start.tape)
    if start.ndim == 1:
        start = ad.reshape(start, (1,) + start.shape)
        end = ad.reshape(end, (1,) + end.shape)
    B, L = start.shape
    gs = np.atleast_1d(np.asarray(gold_start, dtype=np.int64))
    ge = np.atleast_1d(np.asarray(gold_end, dtype=np.int64))
    lens = np.full(B, L) if lengths is None else np.atleast_1d(np.asarray(lengths, dtype=np.int64))
    bad = (gs < 0) | (gs > ge) | (ge >= lens)
    if bad.any():
        i = int(np.argmax(bad))
        raise ValueError(f"gold span ({int(gs[i])}, {int(ge[i])}) outside passage of length {int(lens[i])} (row {i})")
    if (lens < L).any():
        neg = np.where(_pad_mask(lens, L), 0.0, NEG_INF)
        start, end = start + neg, end + neg
    per = (_per_example_nll(start, gs) + _per_example_nll(end, ge)) * 0.5
    return _finish(per, lens, task_id)


def sentence_ranking_loss(candidate_scores, gold_index, n_candidates=None, task_id: str | None = None) -> LossValue:
    """Cross entropy over candidate scores (M,) or (B, M)."""
    scores = _as_logits(candidate_scores)
    if scores.ndim == 1:
        scores = ad.reshape(scores, (1,) + scores.shape)
    B, M = scores.shape
    gold = np.atleast_1d(np.asarray(gold_index, dtype=np.int64))
    counts = np.full(B, M) if n_candidates is None else np.atleast_1d(np.asarray(n_candidates, dtype=np.int64))
    if counts.min() < 2:
        raise ValueError("sentence ranking needs at least 2 candidates")
    if (gold < 0).any() or (gold >= counts).any():
        raise ValueError(f"gold index outside candidate range: {gold.tolist()}")
    if (counts < M).any():
        scores = scores + np.where(_pad_mask(counts, M), 0.0, NEG_INF)
    return _finish(_per_example_nll(scores, gold), counts, task_id)


def symmetric_kl(p_logits: Tensor, q_logits: Tensor) -> Tensor:
    """Mean over rows of KL(p||q) + KL(q||p) = sum (p - q)(log p - log q)."""
    lp = ad.log_softmax(p_logits, axis=-1)
    lq = ad.log_softmax(q_logits, axis=-1)
    p, q = ad.exp(lp), ad.exp(lq)
    per_row = ad.reduce_sum((p - q) * (lp - lq), axis=-1)
    return ad.reduce_mean(per_row)


def draw_noise(shape, config: R3FConfig, seed: int) -> np.ndarray:
    rng = np.random.default_rng(seed)
    if config.noise_kind == "uniform":
        return rng.uniform(-config.noise_scale, config.noise_scale, size=shape)
    return rng.normal(0.0, config.noise_scale, size=shape)


def r3f_penalty(
    model_forward: Callable[[Tensor], Sequence[Tensor]],
    clean_embeddings: Tensor,
    config: R3FConfig,
    seed: int,
    clean_outputs: Sequence[Tensor] | None = None,
) -> Tensor:
    """``weight * symKL(f(e), f(e + noise))`` summed over output distributions.

    ``model_forward`` maps input embeddings to a list of logit tensors; pass
    ``clean_outputs`` to reuse an existing clean forward pass.
    """
    tape = clean_embeddings.tape
    if config.penalty_weight == 0:
        return tape.const(0.0)
    noise = draw_noise(clean_embeddings.shape, config, seed)
    clean = list(model_forward(clean_embeddings) if clean_outputs is None else clean_outputs)
    noised = list(model_forward(clean_embeddings + noise))
    total = None
    for c, n in zip(clean, noised):
        if not (np.all(np.isfinite(c.data)) and np.all(np.isfinite(n.data))):
            raise FloatingPointError("non-finite output distribution in R3F penalty")
        kl = symmetric_kl(c, n)
        total = kl if total is None else total + kl
    return total * config.penalty_weight


def family_loss(family: str, outputs: Sequence[Tensor], batch, task_id: str | None = None, epsilon: float = 0.0) -> LossValue:
    """Dispatch one collated sub-batch to the loss of its task family."""
    if family == "classification":
        return classification_ce(outputs[0], batch["labels"], task_id)
    if family == "mrc":
        return span_prediction_loss(outputs[0], outputs[1], batch["start"], batch["end"], batch["n"], task_id)
    if family == "commonsense":
        return sentence_ranking_loss(outputs[0], batch["gold"], batch["n"], task_id)
    if family == "summarization":
        return label_smoothed_ce(outputs[0], batch["dec_out"], epsilon, batch["tgt_mask"], task_id)
    raise ValueError(f"unknown task family {family!r}")
