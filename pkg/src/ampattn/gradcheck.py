"""Finite-difference verification of every differentiable op and a tiny end-to-end model."""

from __future__ import annotations

from typing import Callable

import numpy as np

from . import tensor as tn
from .attention import (AttentionConfig, Variant, calibrate_heads, focal_bias, focal_params,
                        init_attention_params, mhsa_forward, scaled_dot_attention)
from .model import ModelConfig, init_params, model_forward
from .tensor import Tensor

EPS = 1e-5

TINY_MODEL = dict(n_mfcc=8, seg_len=6, conv_channels=2, lstm_hidden=4, heads=2, fc_hidden=5,
                  n_classes=3, variant="faca")


def _away_from_zero(rng: np.random.Generator, shape, margin: float = 0.1) -> np.ndarray:
    x = rng.uniform(margin, 1.0, size=shape)
    return x * rng.choice([-1.0, 1.0], size=shape)


def _check(fn: Callable[..., Tensor], inputs: list[np.ndarray], rng: np.random.Generator) -> float:
    """Check ``sum(fn(*inputs) * R)`` for a fixed random weighting ``R``."""
    params = [tn.parameter(x.copy()) for x in inputs]
    out_shape = fn(*params).shape
    R = rng.normal(size=out_shape)

    def loss():
        return tn.sum(tn.mul(fn(*params), R))

    return tn.grad_check_params(loss, params, EPS)


def _items(rng: np.random.Generator) -> list[tuple[str, Callable, list[np.ndarray]]]:
    n = rng.normal
    pos = lambda *s: rng.uniform(0.5, 2.0, size=s)  # noqa: E731
    distinct = rng.permutation(24).reshape(2, 3, 4) * 0.1 + n(size=(2, 3, 4)) * 0.01
    mask_rows = np.ones((2, 1, 5, 1))
    mask_rows[1, :, 3:] = 0.0
    items = [
        ("add", tn.add, [n(size=(3, 4)), n(size=(4,))]),
        ("sub", tn.sub, [n(size=(3, 4)), n(size=(3, 1))]),
        ("mul", tn.mul, [n(size=(3, 4)), n(size=(3, 4))]),
        ("div", tn.div, [n(size=(3, 4)), pos(3, 4)]),
        ("scale", lambda x: tn.scale(x, -1.7), [n(size=(3, 4))]),
        ("neg", tn.neg, [n(size=(3, 4))]),
        ("square", tn.square, [n(size=(3, 4))]),
        ("sqrt", tn.sqrt, [pos(3, 4)]),
        ("tanh", tn.tanh, [n(size=(3, 4))]),
        ("sigmoid", tn.sigmoid, [n(size=(3, 4))]),
        ("relu", tn.relu, [_away_from_zero(rng, (3, 4))]),
        ("exp", tn.exp, [n(size=(3, 4))]),
        ("log", tn.log, [pos(3, 4)]),
        ("clamp_min", lambda x: tn.clamp_min(x, 0.0), [_away_from_zero(rng, (3, 4))]),
        ("matmul", tn.matmul, [n(size=(2, 3, 4)), n(size=(4, 5))]),
        ("matmul_batched", tn.matmul, [n(size=(2, 1, 3, 4)), n(size=(3, 4, 2))]),
        ("reshape", lambda x: tn.reshape(x, (4, 3)), [n(size=(3, 4))]),
        ("transpose", lambda x: tn.transpose(x, (2, 0, 1)), [n(size=(2, 3, 4))]),
        ("getitem", lambda x: x[:, [0, 2, 2]], [n(size=(3, 4))]),
        ("flip", lambda x: tn.flip(x, 1), [n(size=(2, 3, 4))]),
        ("concat", lambda a, b: tn.concat([a, b], axis=-1), [n(size=(3, 2)), n(size=(3, 4))]),
        ("stack", lambda a, b: tn.stack([a, b], axis=1), [n(size=(3, 4)), n(size=(3, 4))]),
        ("sum", lambda x: tn.sum(x, axis=(0, 2)), [n(size=(2, 3, 4))]),
        ("mean", lambda x: tn.mean(x, axis=1, keepdims=True), [n(size=(2, 3, 4))]),
        ("max", lambda x: tn.max(x, axis=(-2, -1)), [distinct]),
        ("softmax_rows", tn.softmax_rows, [n(size=(3, 5)) * 3]),
        ("log_softmax", tn.log_softmax, [n(size=(3, 5)) * 3]),
        ("conv_feature", tn.conv_feature, [n(size=(2, 2, 6, 3)), n(size=(3, 2, 3, 1))]),
        ("conv_feature_bias", tn.conv_feature, [n(size=(2, 2, 6, 3)), n(size=(3, 2, 3, 1)), n(size=(3,))]),
        ("maxpool_feature", tn.maxpool_feature,
         [rng.permutation(48).reshape(2, 2, 4, 3) * 0.1 + n(size=(2, 2, 4, 3)) * 0.01]),
        ("lstm", tn.lstm, [n(size=(2, 4, 3)), n(size=(3, 8)) * 0.5, n(size=(2, 8)) * 0.5, n(size=(8,)) * 0.1]),
        ("lstm_reverse", lambda x, a, b, c: tn.lstm(x, a, b, c, reverse=True),
         [n(size=(2, 4, 3)), n(size=(3, 8)) * 0.5, n(size=(2, 8)) * 0.5, n(size=(8,)) * 0.1]),
        ("scaled_dot_attention", lambda q, k, v: scaled_dot_attention(q, k, v)[0],
         [n(size=(2, 5, 3)), n(size=(2, 5, 3)), n(size=(2, 5, 4))]),
        ("focal_params", lambda *a: tn.concat(list(focal_params(*a)), axis=-1),
         [n(size=(2, 5, 4)), n(size=(4, 4)) * 0.5, n(size=(4, 4)) * 0.5, n(size=(4,)), n(size=(4,))]),
        ("focal_params_heads", lambda *a: tn.concat(list(focal_params(*a)), axis=-1),
         [n(size=(2, 5, 4)), n(size=(3, 4, 4)) * 0.5, n(size=(3, 4, 4)) * 0.5, n(size=(3, 4)), n(size=(3, 4))]),
        ("focal_bias", focal_bias, [rng.uniform(0, 5, size=(2, 5)), rng.uniform(0.5, 5, size=(2, 5))]),
        ("calibrate_heads", lambda H, W, b: tn.concat(
            [tn.reshape(t, (2, -1)) for t in calibrate_heads(H, W, b)], axis=-1),
         [tn.softmax_rows(Tensor(n(size=(2, 3, 5, 5)) * 2)).data, n(size=(3, 3)), n(size=(3,))]),
        ("calibrate_heads_masked", lambda H, W, b: tn.concat(
            [tn.reshape(t, (2, -1)) for t in calibrate_heads(H, W, b, query_mask=mask_rows)], axis=-1),
         [tn.softmax_rows(Tensor(n(size=(2, 1, 5, 5)) * 2)).data, n(size=(1, 1)), n(size=(1,))]),
        ("cross_entropy", lambda z: _ce(z), [n(size=(4, 3))]),
    ]
    return items


def _ce(z: Tensor) -> Tensor:
    from .training import cross_entropy

    return cross_entropy(z, np.array([0, 2, 1, 2]))


def _mhsa_item(variant: Variant, rng: np.random.Generator) -> float:
    cfg = AttentionConfig(d_m=4, h=2, variant=variant)
    params = init_attention_params(cfg, rng)
    X = tn.parameter(rng.normal(size=(2, 5, 4)))
    valid = np.array([5, 3])
    R = rng.normal(size=(2, 5, 4))

    def loss():
        Y, _ = mhsa_forward(X, cfg, params, valid_len=valid)
        return tn.sum(tn.mul(Y, R))

    return tn.grad_check_params(loss, [X, *params.values()], EPS)


def _tiny_model_item(seed: int, rng: np.random.Generator) -> float:
    cfg = ModelConfig(**TINY_MODEL, seed=seed)
    mp = init_params(cfg, seed)
    x = rng.normal(size=(3, cfg.seg_len, cfg.n_mfcc))
    R = rng.normal(size=(3, cfg.n_classes))

    def loss():
        logits, _ = model_forward(x, mp, "train")
        return tn.sum(tn.mul(logits, R))

    return tn.grad_check_params(loss, mp.trainable(), EPS)


def run_gradcheck(scale: str = "tiny", seed: int = 0) -> list[tuple[str, float]]:
    """``(item, max relative error)`` rows; deterministic in ``seed``."""
    if scale != "tiny":
        raise ValueError(f"unsupported gradcheck scale {scale!r}")
    rng = np.random.default_rng(seed)
    rows = [(name, _check(fn, inputs, rng)) for name, fn, inputs in _items(rng)]
    for v in Variant:
        rows.append((f"mhsa_{v.value}", _mhsa_item(v, rng)))
    rows.append(("model_faca_tiny", _tiny_model_item(seed, rng)))
    return rows
