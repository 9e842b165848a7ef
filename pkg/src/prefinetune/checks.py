"""Finite-difference gradient checks over every primitive and loss family."""

from __future__ import annotations

from typing import Callable

import numpy as np

from . import autodiff as ad
from .losses import (
    R3FConfig,
    classification_ce,
    label_smoothed_ce,
    r3f_penalty,
    sentence_ranking_loss,
    span_prediction_loss,
)


def _project(out: ad.Tensor, rng) -> ad.Tensor:
    """Reduce a tensor to a scalar through a fixed random weighting."""
    return ad.reduce_sum(out * rng.normal(size=out.shape))


def check_cases(seed: int = 0) -> dict[str, tuple[Callable, dict]]:
    """name -> (loss_fn, point); dimensions stay at or below 8."""
    rng = np.random.default_rng(seed)
    r = lambda *s: rng.normal(size=s)  # noqa: E731
    w_rng = lambda: np.random.default_rng([seed, 99])  # noqa: E731
    pos = np.abs(r(3, 4)) + 0.5
    ids = rng.integers(0, 6, size=(2, 3))
    cases: dict[str, tuple[Callable, dict]] = {
        "add": (lambda p: _project(p["a"] + p["b"], w_rng()), {"a": r(3, 4), "b": r(4)}),
        "sub": (lambda p: _project(p["a"] - p["b"], w_rng()), {"a": r(3, 4), "b": r(3, 1)}),
        "mul": (lambda p: _project(p["a"] * p["b"], w_rng()), {"a": r(3, 4), "b": r(3, 4)}),
        "relu": (lambda p: _project(ad.relu(p["x"]), w_rng()), {"x": r(3, 4) + 0.05}),
        "gelu": (lambda p: _project(ad.gelu(p["x"]), w_rng()), {"x": r(3, 4)}),
        "tanh": (lambda p: _project(ad.tanh(p["x"]), w_rng()), {"x": r(3, 4)}),
        "exp": (lambda p: _project(ad.exp(p["x"]), w_rng()), {"x": r(3, 4)}),
        "log": (lambda p: _project(ad.log(p["x"]), w_rng()), {"x": pos}),
        "reduce_sum": (lambda p: _project(ad.reduce_sum(p["x"], axis=1), w_rng()), {"x": r(3, 4)}),
        "reduce_mean": (lambda p: _project(ad.reduce_mean(p["x"], axis=0, keepdims=True), w_rng()), {"x": r(3, 4)}),
        "softmax": (lambda p: _project(ad.softmax(p["x"]), w_rng()), {"x": r(3, 5)}),
        "log_softmax": (lambda p: _project(ad.log_softmax(p["x"]), w_rng()), {"x": r(3, 5)}),
        "layer_norm": (lambda p: _project(ad.layer_norm(p["x"], p["g"], p["b"]), w_rng()),
                       {"x": r(3, 6), "g": r(6), "b": r(6)}),
        "matmul": (lambda p: _project(p["a"] @ p["b"], w_rng()), {"a": r(2, 3, 4), "b": r(4, 5)}),
        "reshape": (lambda p: _project(ad.reshape(p["x"], (4, 3)), w_rng()), {"x": r(3, 4)}),
        "transpose": (lambda p: _project(ad.transpose(p["x"], (1, 0, 2)), w_rng()), {"x": r(2, 3, 4)}),
        "getitem": (lambda p: _project(p["x"][np.array([0, 2, 2]), np.array([1, 0, 3])], w_rng()), {"x": r(3, 4)}),
        "embedding_lookup": (lambda p: _project(ad.embedding_lookup(p["e"], ids), w_rng()), {"e": r(6, 4)}),
        "concat": (lambda p: _project(ad.concat([p["a"], p["b"]], axis=1), w_rng()), {"a": r(3, 2), "b": r(3, 4)}),
    }
    gold = rng.integers(0, 4, size=5)
    cases["classification_ce"] = (lambda p: classification_ce(p["z"], gold).scaled, {"z": r(5, 4)})
    toks = rng.integers(0, 8, size=(2, 4))
    mask = np.array([[1, 1, 1, 0], [1, 1, 1, 1]])
    cases["label_smoothed_ce"] = (lambda p: label_smoothed_ce(p["z"], toks, 0.1, mask).scaled, {"z": r(2, 4, 8)})
    gs, ge, lens = np.array([0, 2, 1]), np.array([1, 4, 1]), np.array([6, 8, 3])
    cases["span_prediction_loss"] = (lambda p: span_prediction_loss(p["s"], p["e"], gs, ge, lens).scaled,
                                     {"s": r(3, 8), "e": r(3, 8)})
    cg, cn = np.array([0, 2, 1]), np.array([4, 3, 4])
    cases["sentence_ranking_loss"] = (lambda p: sentence_ranking_loss(p["z"], cg, cn).scaled, {"z": r(3, 4)})
    x = r(2, 3)
    r3f = R3FConfig(noise_kind="normal", noise_scale=0.3)
    cases["r3f_penalty"] = (
        lambda p: r3f_penalty(lambda e: [e @ p["w"]], p["w"].tape.const(x), r3f, seed),
        {"w": r(3, 4)},
    )
    return cases


def run_gradient_checks(seed: int = 0, eps: float = 1e-4) -> dict[str, float]:
    return {name: ad.grad_check(fn, point, eps=eps) for name, (fn, point) in check_cases(seed).items()}
