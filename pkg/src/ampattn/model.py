"""CLDNN: two feature-axis conv blocks, two BiLSTM layers, self-attention, two FC layers.

The convolutions are 2-D over (feature, time) with a ``(3, 1)`` kernel and a
``(2, 1)`` max pool, so only the feature axis shrinks (40 -> 20 -> 10) and
the attention sees exactly ``m`` time steps.  Reading the layers as true 1-D
convolutions over time would shorten the sequence and could not produce
``m x m`` attention maps.
"""

from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Union

import numpy as np

from . import tensor as tn
from .attention import AttentionConfig, AttentionTrace, Variant, glorot, init_attention_params, mhsa_forward
from .tensor import DimensionError, Tensor

PathLike = Union[str, Path]


@dataclass
class ModelConfig:
    n_mfcc: int = 40
    seg_len: int = 50
    conv_channels: int = 64
    conv_kernel: int = 3
    pool: int = 2
    lstm_hidden: int = 256
    heads: int = 8
    fc_hidden: int = 256
    n_classes: int = 4
    variant: Variant = Variant.MHSA_FACA
    sigma_floor: float = 0.1
    scale_dm_literal: bool = False
    bn_momentum: float = 0.1
    bn_eps: float = 1e-5
    seed: int = 0

    def __post_init__(self):
        self.variant = Variant.parse(self.variant)
        if self.n_mfcc < self.pool * self.pool:
            raise ValueError(f"n_mfcc={self.n_mfcc} cannot survive two pooling halvings")
        if self.n_classes < 2:
            raise ValueError("n_classes must be >= 2")
        if self.conv_kernel % 2 == 0:
            raise ValueError("conv_kernel must be odd to preserve the feature axis")
        if (2 * self.lstm_hidden) % self.heads:
            raise ValueError(f"2*lstm_hidden={2 * self.lstm_hidden} not divisible by heads={self.heads}")

    @property
    def d_m(self) -> int:
        return 2 * self.lstm_hidden

    @property
    def conv_out_features(self) -> int:
        return self.conv_channels * ((self.n_mfcc // self.pool) // self.pool)

    def attention(self, **overrides) -> AttentionConfig:
        base = dict(variant=self.variant, sigma_floor=self.sigma_floor, scale_dm_literal=self.scale_dm_literal)
        return AttentionConfig(self.d_m, self.heads, **{**base, **overrides})

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["variant"] = self.variant.value
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


@dataclass
class ModelParams:
    config: ModelConfig
    params: dict[str, Tensor]
    buffers: dict[str, np.ndarray] = field(default_factory=dict)

    def trainable(self) -> list[Tensor]:
        return list(self.params.values())

    def copy(self) -> "ModelParams":
        return ModelParams(
            self.config,
            {k: tn.parameter(v.data.copy(), name=k) for k, v in self.params.items()},
            {k: v.copy() for k, v in self.buffers.items()},
        )

    def arrays(self) -> dict[str, np.ndarray]:
        out = {k: v.data for k, v in self.params.items()}
        out.update(self.buffers)
        return out


def orthogonal(rng: np.random.Generator, n: int) -> np.ndarray:
    q, r = np.linalg.qr(rng.normal(size=(n, n)))
    return q * np.sign(np.diag(r))[None, :]


def conv_bound(c_in: int, c_out: int, k: int) -> float:
    return math.sqrt(6.0 / (c_in * k + c_out * k))


def init_params(cfg: ModelConfig, seed: Optional[int] = None) -> ModelParams:
    rng = np.random.default_rng(cfg.seed if seed is None else seed)
    p: dict[str, np.ndarray] = {}
    buffers: dict[str, np.ndarray] = {}
    c, k = cfg.conv_channels, cfg.conv_kernel
    for name, c_in in (("conv1", 1), ("conv2", c)):
        bound = conv_bound(c_in, c, k)
        p[f"{name}.kernel"] = rng.uniform(-bound, bound, size=(c, c_in, k, 1))
        p[f"{name}.bn.gamma"] = np.ones(c)
        p[f"{name}.bn.beta"] = np.zeros(c)
        buffers[f"{name}.bn.running_mean"] = np.zeros(c)
        buffers[f"{name}.bn.running_var"] = np.ones(c)
    hid = cfg.lstm_hidden
    for layer, d_in in (("lstm1", cfg.conv_out_features), ("lstm2", 2 * hid)):
        for direction in ("fwd", "bwd"):
            base = f"{layer}.{direction}"
            p[f"{base}.W_ih"] = glorot(rng, (d_in, 4 * hid), d_in, hid)
            p[f"{base}.W_hh"] = np.concatenate([orthogonal(rng, hid) for _ in range(4)], axis=1)
            bias = np.zeros(4 * hid)
            bias[hid: 2 * hid] = 1.0
            p[f"{base}.b"] = bias
    params = {name: tn.parameter(arr, name=name) for name, arr in p.items()}
    params.update(init_attention_params(cfg.attention(), rng))
    params["fc1.W"] = tn.parameter(glorot(rng, (cfg.d_m, cfg.fc_hidden), cfg.d_m, cfg.fc_hidden), "fc1.W")
    params["fc1.b"] = tn.parameter(np.zeros(cfg.fc_hidden), "fc1.b")
    params["fc2.W"] = tn.parameter(
        glorot(rng, (cfg.fc_hidden, cfg.n_classes), cfg.fc_hidden, cfg.n_classes), "fc2.W")
    params["fc2.b"] = tn.parameter(np.zeros(cfg.n_classes), "fc2.b")
    return ModelParams(cfg, params, buffers)


# ---------------------------------------------------------------------------
# Layers
# ---------------------------------------------------------------------------


def batch_norm(x: Tensor, mp: ModelParams, name: str, train: bool) -> Tensor:
    """Per-channel batch norm on ``[B, C, F, T]``; updates running stats in train mode."""
    cfg = mp.config
    gamma = tn.reshape(mp.params[f"{name}.gamma"], (1, -1, 1, 1))
    beta = tn.reshape(mp.params[f"{name}.beta"], (1, -1, 1, 1))
    rm_key, rv_key = f"{name}.running_mean", f"{name}.running_var"
    if train:
        mu = tn.mean(x, axis=(0, 2, 3), keepdims=True)
        centred = tn.sub(x, mu)
        var = tn.mean(tn.square(centred), axis=(0, 2, 3), keepdims=True)
        n = x.size // x.shape[1]
        unbiased = var.data.reshape(-1) * (n / (n - 1) if n > 1 else 1.0)
        mom = cfg.bn_momentum
        mp.buffers[rm_key] = (1 - mom) * mp.buffers[rm_key] + mom * mu.data.reshape(-1)
        mp.buffers[rv_key] = (1 - mom) * mp.buffers[rv_key] + mom * unbiased
        xhat = tn.div(centred, tn.sqrt(tn.add(var, cfg.bn_eps)))
    else:
        rm = mp.buffers[rm_key].reshape(1, -1, 1, 1)
        rv = mp.buffers[rv_key].reshape(1, -1, 1, 1)
        xhat = tn.mul(tn.sub(x, rm), 1.0 / np.sqrt(rv + cfg.bn_eps))
    return tn.add(tn.mul(xhat, gamma), beta)


def conv_block(x: Tensor, mp: ModelParams, name: str, train: bool) -> Tensor:
    """Feature-axis conv, batch norm, ReLU, ``(pool, 1)`` max pool.  Time is untouched."""
    if x.shape[2] < mp.config.conv_kernel:
        raise DimensionError(f"{name}: feature axis {x.shape[2]} shorter than kernel")
    # no conv bias: the batch-norm shift absorbs it
    y = tn.conv_feature(x, mp.params[f"{name}.kernel"])
    y = batch_norm(y, mp, f"{name}.bn", train)
    y = tn.relu(y)
    return tn.maxpool_feature(y, mp.config.pool)


def bilstm(x: Tensor, mp: ModelParams, name: str) -> Tensor:
    """``[B, m, d_in] -> [B, m, 2 * hidden]``: forward and time-reversed pass concatenated."""
    p = mp.params
    fwd = tn.lstm(x, p[f"{name}.fwd.W_ih"], p[f"{name}.fwd.W_hh"], p[f"{name}.fwd.b"])
    bwd = tn.lstm(x, p[f"{name}.bwd.W_ih"], p[f"{name}.bwd.W_hh"], p[f"{name}.bwd.b"], reverse=True)
    return tn.concat([fwd, bwd], axis=-1)


def model_forward(x, mp: ModelParams, mode: str = "eval", valid_len=None, capture: bool = False,
                  attention_overrides: Optional[dict] = None
                  ) -> tuple[Tensor, Optional[AttentionTrace]]:
    """Logits for one segment ``[m, n_mfcc]`` or a batch ``[B, m, n_mfcc]``."""
    cfg = mp.config
    train = mode == "train"
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    x = tn.as_tensor(x)
    single = x.ndim == 2
    if single:
        x = tn.reshape(x, (1,) + x.shape)
        if valid_len is not None:
            valid_len = np.atleast_1d(valid_len)
    if x.ndim != 3 or x.shape[2] != cfg.n_mfcc:
        raise DimensionError(f"input: expected [B, m, {cfg.n_mfcc}], got {x.shape}")
    bsz, m, _ = x.shape

    h = tn.reshape(tn.transpose(x, (0, 2, 1)), (bsz, 1, cfg.n_mfcc, m))
    h = conv_block(h, mp, "conv1", train)
    h = conv_block(h, mp, "conv2", train)
    if h.shape[3] != m:
        raise DimensionError(f"conv: time axis changed from {m} to {h.shape[3]}")
    h = tn.reshape(tn.transpose(h, (0, 3, 1, 2)), (bsz, m, -1))
    if h.shape[2] != cfg.conv_out_features:
        raise DimensionError(f"conv: flattened width {h.shape[2]} != {cfg.conv_out_features}")
    h = bilstm(h, mp, "lstm1")
    h = bilstm(h, mp, "lstm2")

    att_cfg = cfg.attention(**(attention_overrides or {}))
    y, trace = mhsa_forward(h, att_cfg, mp.params, valid_len=valid_len, capture=capture)

    if valid_len is None:
        pooled = tn.mean(y, axis=1)
    else:
        mask = (np.arange(m)[None, :] < np.asarray(valid_len)[:, None]).astype(np.float64)
        summed = tn.sum(tn.mul(y, mask[:, :, None]), axis=1)
        pooled = tn.mul(summed, 1.0 / np.maximum(mask.sum(axis=1), 1.0)[:, None])
    p = mp.params
    z = tn.relu(tn.add(tn.matmul(pooled, p["fc1.W"]), p["fc1.b"]))
    logits = tn.add(tn.matmul(z, p["fc2.W"]), p["fc2.b"])
    if single:
        logits = tn.reshape(logits, (cfg.n_classes,))
        if trace is not None:
            trace = _squeeze_trace(trace)
    return logits, trace


def _squeeze_trace(trace: AttentionTrace) -> AttentionTrace:
    def sq(a):
        return None if a is None else a[0]

    return AttentionTrace(sq(trace.scores), sq(trace.H_o), sq(trace.H_s), sq(trace.focal_bias),
                          sq(trace.mu_tilde), sq(trace.sigma_tilde), sq(trace.s), trace.variant)


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------


def save_checkpoint(path: PathLike, mp: ModelParams, meta: Optional[dict] = None) -> Path:
    """Write ``manifest.json`` plus one AMPTNSR1 blob per named tensor."""
    root = Path(path)
    (root / "tensors").mkdir(parents=True, exist_ok=True)
    arrays = mp.arrays()
    for name, arr in arrays.items():
        tn.save(arr, root / "tensors" / f"{name}.bin")
    manifest = {
        "format": "ampattn-checkpoint/1",
        "config": mp.config.to_dict(),
        "params": sorted(mp.params),
        "buffers": sorted(mp.buffers),
        **(meta or {}),
    }
    (root / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return root


def load_checkpoint(path: PathLike) -> tuple[ModelParams, dict]:
    root = Path(path)
    manifest = json.loads((root / "manifest.json").read_text())
    cfg = ModelConfig.from_dict(manifest["config"])
    params = {n: tn.parameter(tn.load(root / "tensors" / f"{n}.bin"), name=n) for n in manifest["params"]}
    buffers = {n: tn.load(root / "tensors" / f"{n}.bin") for n in manifest["buffers"]}
    return ModelParams(cfg, params, buffers), manifest
