"""Multi-head self-attention with optional focal bias and head calibration.

Three variants share one code path:

* ``bmhsa``: scaled dot-product attention per head, heads concatenated and
  projected.
* ``fa``: each head adds a Gaussian-shaped focal bias to its pre-softmax
  scores.  Per query step the bias has a learned centre and scope in
  ``(0, m)``, predicted from the query vector and the sequence mean.
* ``faca``: additionally each head's post-softmax map is scaled by a gate in
  ``(0, 1)`` computed from the global max of every head's map.  Rows are not
  re-normalised after gating.

Row-vector convention throughout: a projection of ``x`` by ``W`` is ``x @ W``.
All functions accept arbitrary leading batch axes.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Optional

import numpy as np

from . import tensor as tn
from .tensor import DimensionError, Tensor

MASK_BIAS = -1e9


class Variant(str, Enum):
    BMHSA = "bmhsa"
    MHSA_FA = "fa"
    MHSA_FACA = "faca"

    @classmethod
    def parse(cls, name) -> "Variant":
        if isinstance(name, cls):
            return name
        key = str(name).strip().lower().replace("-", "_")
        aliases = {"bmhsa": cls.BMHSA, "fa": cls.MHSA_FA, "mhsa_fa": cls.MHSA_FA,
                   "faca": cls.MHSA_FACA, "mhsa_faca": cls.MHSA_FACA}
        try:
            return aliases[key]
        except KeyError:
            raise ValueError(f"unknown attention variant {name!r}; expected bmhsa, fa or faca") from None

    @property
    def focal(self) -> bool:
        return self is not Variant.BMHSA

    @property
    def calibrated(self) -> bool:
        return self is Variant.MHSA_FACA


@dataclass
class AttentionConfig:
    d_m: int
    h: int
    variant: Variant = Variant.MHSA_FACA
    sigma_floor: float = 0.1
    scale_dm_literal: bool = False
    # test switches: skip the focal bias / calibration gate without touching params
    disable_focal: bool = False
    force_unit_calibration: bool = False

    def __post_init__(self):
        self.variant = Variant.parse(self.variant)
        if self.h < 1 or self.d_m % self.h:
            raise ValueError(f"d_m={self.d_m} is not divisible by h={self.h}")
        if self.sigma_floor <= 0:
            raise ValueError("sigma_floor must be positive")

    @property
    def d_h(self) -> int:
        return self.d_m // self.h

    @property
    def score_scale(self) -> float:
        return 1.0 / math.sqrt(self.d_m if self.scale_dm_literal else self.d_h)


@dataclass
class AttentionTrace:
    """Numpy snapshots of one forward pass; head axis sits just before ``m x m``."""

    scores: np.ndarray
    H_o: np.ndarray
    H_s: Optional[np.ndarray] = None
    focal_bias: Optional[np.ndarray] = None
    mu_tilde: Optional[np.ndarray] = None
    sigma_tilde: Optional[np.ndarray] = None
    s: Optional[np.ndarray] = None
    variant: Variant = Variant.BMHSA
    extras: dict = field(default_factory=dict)

    @property
    def maps(self) -> np.ndarray:
        """The map that multiplies ``V``: gated for ``faca``, plain otherwise."""
        return self.H_s if self.H_s is not None else self.H_o


def glorot(rng: np.random.Generator, shape, fan_in: int, fan_out: int) -> np.ndarray:
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape)


def init_attention_params(cfg: AttentionConfig, rng: np.random.Generator,
                          prefix: str = "attn") -> dict[str, Tensor]:
    """Per-head projections, per-head focal parameters, output projection, gate layer.

    Focal and gate parameters exist for every variant so checkpoints share one
    layout; ``bmhsa`` simply never reads them.
    """
    d_m, d_h, h = cfg.d_m, cfg.d_h, cfg.h
    params: dict[str, Tensor] = {}
    for i in range(h):
        base = f"{prefix}.head{i}"
        for name in ("W_q", "W_k", "W_v"):
            params[f"{base}.{name}"] = tn.parameter(glorot(rng, (d_m, d_h), d_m, d_h))
        params[f"{base}.W_p"] = tn.parameter(glorot(rng, (d_m, d_m), d_m, d_m))
        params[f"{base}.W_g"] = tn.parameter(glorot(rng, (d_m, d_m), d_m, d_m))
        params[f"{base}.U_c"] = tn.parameter(glorot(rng, (d_m,), d_m, 1))
        params[f"{base}.U_d"] = tn.parameter(glorot(rng, (d_m,), d_m, 1))
    params[f"{prefix}.W_o"] = tn.parameter(glorot(rng, (h * d_h, d_m), h * d_h, d_m))
    params[f"{prefix}.W_s"] = tn.parameter(glorot(rng, (h, h), h, h))
    params[f"{prefix}.b_s"] = tn.parameter(np.zeros(h))
    for name, p in params.items():
        p.name = name
    return params


def _head_stack(params: dict[str, Tensor], prefix: str, name: str, h: int) -> Tensor:
    return tn.stack([params[f"{prefix}.head{i}.{name}"] for i in range(h)], axis=0)


def _with_head_axis(x: Tensor) -> Tensor:
    return tn.reshape(x, x.shape[:-2] + (1,) + x.shape[-2:])


# ---------------------------------------------------------------------------
# Building blocks
# ---------------------------------------------------------------------------


def scaled_dot_attention(Q: Tensor, K: Tensor, V: Tensor, bias: Optional[Tensor] = None,
                         scale: Optional[float] = None) -> tuple[Tensor, Tensor]:
    """``softmax(Q K^T * scale + bias) V``; ``scale`` defaults to ``1/sqrt(d)``."""
    if Q.shape[-1] != K.shape[-1] or K.shape[-2] != V.shape[-2]:
        raise DimensionError(f"attention: Q {Q.shape}, K {K.shape}, V {V.shape} inconsistent")
    if Q.shape[-1] < 1:
        raise DimensionError("attention: feature dimension must be positive")
    scale = 1.0 / math.sqrt(Q.shape[-1]) if scale is None else scale
    scores = tn.scale(tn.matmul(Q, tn.transpose(K)), scale)
    if bias is not None:
        scores = tn.add(scores, bias)
    attn = tn.softmax_rows(scores)
    return tn.matmul(attn, V), attn


def focal_params(Q: Tensor, W_p: Tensor, W_g: Tensor, U_c: Tensor, U_d: Tensor,
                 step_mask: Optional[np.ndarray] = None) -> tuple[Tensor, Tensor]:
    """Centre and scope of the focal window for every query step.

    ``Q`` is ``[..., m, d_m]``.  With single-head weights (``W_p`` of shape
    ``[d_m, d_m]``) the result is ``[..., m]``; with stacked heads
    (``[h, d_m, d_m]``, ``U_c`` of shape ``[h, d_m]``) it is ``[..., h, m]``.
    The tanh hidden vector is computed once and read by both projections.
    ``step_mask`` (``[..., m]``, 1 for real steps) restricts the mean ``G``.
    """
    m = Q.shape[-2]
    if step_mask is None:
        G = tn.mean(Q, axis=-2, keepdims=True)
    else:
        w = step_mask / np.maximum(step_mask.sum(axis=-1, keepdims=True), 1.0)
        G = tn.sum(tn.mul(Q, Tensor(w[..., None])), axis=-2, keepdims=True)
    if W_p.ndim == 3:
        Q, G = _with_head_axis(Q), _with_head_axis(G)
    hidden = tn.tanh(tn.add(tn.matmul(Q, W_p), tn.matmul(G, W_g)))
    U = tn.stack([U_c, U_d], axis=-1)  # [..., d_m, 2]
    raw = tn.matmul(hidden, U)
    mu_tilde = tn.scale(tn.sigmoid(raw[..., 0]), float(m))
    sigma_tilde = tn.scale(tn.sigmoid(raw[..., 1]), float(m))
    return mu_tilde, sigma_tilde


def focal_bias(mu_tilde: Tensor, sigma_tilde: Tensor, positions: Optional[np.ndarray] = None,
               sigma_floor: float = 0.1) -> Tensor:
    """``f[i, j] = -(P_j - mu_i)^2 / (sigma_i^2 / 2)`` with ``sigma`` floored first."""
    mu_tilde, sigma_tilde = tn.as_tensor(mu_tilde), tn.as_tensor(sigma_tilde)
    m = mu_tilde.shape[-1]
    P = np.arange(m, dtype=np.float64) if positions is None else np.asarray(positions, np.float64)
    col = mu_tilde.shape + (1,)
    diff = tn.sub(Tensor(P.reshape(1, -1)), tn.reshape(mu_tilde, col))
    sig = tn.reshape(tn.clamp_min(sigma_tilde, sigma_floor), col)
    return tn.scale(tn.div(tn.square(diff), tn.square(sig)), -2.0)


def calibrate_heads(H_o: Tensor, W_s: Tensor, b_s: Tensor,
                    query_mask: Optional[np.ndarray] = None) -> tuple[Tensor, Tensor]:
    """Gate each head's map by ``sigmoid(W_s g + b_s)`` where ``g`` is the map's global max.

    ``H_o`` is ``[..., h, m, m]``.  ``query_mask`` (broadcastable to ``H_o``,
    1 for real query rows) keeps padded rows out of the max.
    """
    h = H_o.shape[-3]
    if W_s.shape != (h, h) or b_s.shape != (h,):
        raise DimensionError(f"calibration: W_s {W_s.shape} / b_s {b_s.shape} vs {h} heads")
    pooled = H_o if query_mask is None else tn.mul(H_o, Tensor(query_mask))
    g = tn.max(pooled, axis=(-2, -1))  # [..., h]
    g_row = tn.reshape(g, g.shape[:-1] + (1, h))
    s = tn.sigmoid(tn.add(tn.matmul(g_row, tn.transpose(W_s)), b_s))
    s = tn.reshape(s, g.shape)
    H_s = tn.mul(H_o, tn.reshape(s, s.shape + (1, 1)))
    return H_s, s


# ---------------------------------------------------------------------------
# Full layer
# ---------------------------------------------------------------------------


def mhsa_forward(X: Tensor, cfg: AttentionConfig, params: dict[str, Tensor],
                 valid_len: Optional[np.ndarray] = None, capture: bool = False,
                 prefix: str = "attn") -> tuple[Tensor, Optional[AttentionTrace]]:
    """Self-attention over ``X`` of shape ``[..., m, d_m]``.

    ``valid_len`` (shape ``X.shape[:-2]``) marks trailing padded frames: padded
    keys get a large negative bias and padded queries are ignored by the gate.
    """
    if X.shape[-1] != cfg.d_m:
        raise DimensionError(f"attention input has width {X.shape[-1]}, expected d_m={cfg.d_m}")
    m = X.shape[-2]
    lead = X.shape[:-2]
    h, d_h = cfg.h, cfg.d_h
    Xe = _with_head_axis(X)  # [..., 1, m, d_m]
    Q = tn.matmul(Xe, _head_stack(params, prefix, "W_q", h))  # [..., h, m, d_h]
    K = tn.matmul(Xe, _head_stack(params, prefix, "W_k", h))
    V = tn.matmul(Xe, _head_stack(params, prefix, "W_v", h))
    scores = tn.scale(tn.matmul(Q, tn.transpose(K)), cfg.score_scale)
    raw_scores = scores

    query_mask = step_mask = None
    if valid_len is not None:
        valid = np.arange(m) < np.asarray(valid_len)[..., None]  # lead + (m,)
        key_bias = np.where(valid, 0.0, MASK_BIAS)[..., None, None, :]
        scores = tn.add(scores, Tensor(key_bias))
        step_mask = valid.astype(np.float64)
        query_mask = step_mask[..., None, :, None]

    f = mu_t = sigma_t = None
    if cfg.variant.focal and not cfg.disable_focal:
        mu_t, sigma_t = focal_params(
            X,
            _head_stack(params, prefix, "W_p", h),
            _head_stack(params, prefix, "W_g", h),
            _head_stack(params, prefix, "U_c", h),
            _head_stack(params, prefix, "U_d", h),
            step_mask,
        )
        f = focal_bias(mu_t, sigma_t, sigma_floor=cfg.sigma_floor)
        scores = tn.add(scores, f)

    H_o = tn.softmax_rows(scores)
    H = H_o
    s = None
    if cfg.variant.calibrated and not cfg.force_unit_calibration:
        H, s = calibrate_heads(H_o, params[f"{prefix}.W_s"], params[f"{prefix}.b_s"], query_mask)

    heads = tn.matmul(H, V)  # [..., h, m, d_h]
    nl = len(lead)
    perm = list(range(nl)) + [nl + 1, nl, nl + 2]
    concat = tn.reshape(tn.transpose(heads, perm), lead + (m, h * d_h))
    Y = tn.matmul(concat, params[f"{prefix}.W_o"])

    trace = None
    if capture:
        trace = AttentionTrace(
            scores=raw_scores.data.copy(),
            H_o=H_o.data.copy(),
            H_s=H.data.copy() if s is not None else None,
            focal_bias=f.data.copy() if f is not None else None,
            mu_tilde=mu_t.data.copy() if mu_t is not None else None,
            sigma_tilde=sigma_t.data.copy() if sigma_t is not None else None,
            s=s.data.copy() if s is not None else None,
            variant=cfg.variant,
        )
    return Y, trace
