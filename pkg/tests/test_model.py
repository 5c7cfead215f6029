import math

import numpy as np
import pytest

from ampattn import tensor as tn
from ampattn.model import (ModelConfig, bilstm, conv_block, conv_bound, init_params, load_checkpoint,
                           model_forward, save_checkpoint)
from ampattn.tensor import DimensionError, Tensor

TINY = dict(n_mfcc=8, seg_len=6, conv_channels=2, lstm_hidden=4, heads=2, fc_hidden=5, n_classes=3)


def test_init_deterministic_and_seeded():
    cfg = ModelConfig(**TINY)
    a, b, c = init_params(cfg, 3), init_params(cfg, 3), init_params(cfg, 4)
    assert all(np.array_equal(a.params[k].data, b.params[k].data) for k in a.params)
    assert any(not np.array_equal(a.params[k].data, c.params[k].data) for k in a.params)


def test_init_bounds_and_structure():
    cfg = ModelConfig()
    mp = init_params(cfg, 0)
    k = mp.params["conv1.kernel"].data
    bound = math.sqrt(6 / (3 + 64 * 3))
    assert k.shape == (64, 1, 3, 1) and conv_bound(1, 64, 3) == bound and np.abs(k).max() <= bound
    whh = mp.params["lstm1.fwd.W_hh"].data
    for g in range(4):
        block = whh[:, g * 256:(g + 1) * 256]
        assert np.allclose(block.T @ block, np.eye(256), atol=1e-10)
    b = mp.params["lstm2.bwd.b"].data
    assert np.all(b[256:512] == 1.0) and np.all(b[:256] == 0) and np.all(b[512:] == 0)
    assert np.all(mp.buffers["conv2.bn.running_var"] > 0)
    for name in ("conv1.kernel", "lstm1.fwd.W_ih", "attn.head3.U_c", "attn.W_s", "fc2.b"):
        assert name in mp.params


def test_config_invariants():
    with pytest.raises(ValueError):
        ModelConfig(n_mfcc=3)
    with pytest.raises(ValueError):
        ModelConfig(n_classes=1)
    cfg = ModelConfig(**TINY)
    assert ModelConfig.from_dict(cfg.to_dict()) == cfg


def test_full_size_shapes(rng):
    cfg = ModelConfig(conv_channels=64, lstm_hidden=256, heads=8)
    mp = init_params(cfg, 0)
    x = Tensor(rng.normal(size=(1, 1, 40, 50)))
    h1 = conv_block(x, mp, "conv1", False)
    h2 = conv_block(h1, mp, "conv2", False)
    assert h1.shape == (1, 64, 20, 50) and h2.shape == (1, 64, 10, 50)
    logits, trace = model_forward(rng.normal(size=(50, 40)), mp, "eval", capture=True)
    assert logits.shape == (4,) and trace.H_o.shape == (8, 50, 50) and cfg.d_m == 512


def test_zero_input_conv_block_is_zero():
    cfg = ModelConfig(**TINY)
    mp = init_params(cfg, 0)
    out = conv_block(Tensor(np.zeros((1, 1, 8, 6))), mp, "conv1", False)
    assert not out.data.any()


def test_maxpool_hand_example():
    x = Tensor(np.array([1.0, 3.0, 2.0, 0.0]).reshape(1, 1, 4, 1))
    assert tn.maxpool_feature(x, 2).data.reshape(-1).tolist() == [3.0, 2.0]


def test_narrow_feature_axis_rejected():
    cfg = ModelConfig(**TINY)
    with pytest.raises(DimensionError):
        conv_block(Tensor(np.zeros((1, 1, 2, 6))), init_params(cfg, 0), "conv1", False)


def test_bilstm_zero_weights_stay_zero(rng):
    cfg = ModelConfig(**TINY)
    mp = init_params(cfg, 0)
    for k, p in mp.params.items():
        if k.startswith("lstm1"):
            p.data = np.zeros_like(p.data)
            if k.endswith(".b"):
                p.data[cfg.lstm_hidden: 2 * cfg.lstm_hidden] = 1.0
    out = bilstm(Tensor(rng.normal(size=(2, 6, cfg.conv_out_features))), mp, "lstm1")
    assert out.shape == (2, 6, 8) and not out.data.any()


def test_bilstm_length_one_is_two_single_steps(rng):
    cfg = ModelConfig(**TINY)
    mp = init_params(cfg, 1)
    x = rng.normal(size=(1, 1, cfg.conv_out_features))
    out = bilstm(Tensor(x), mp, "lstm1").data
    for half, d in ((slice(0, 4), "fwd"), (slice(4, 8), "bwd")):
        p = {k: mp.params[f"lstm1.{d}.{k}"].data for k in ("W_ih", "b")}
        z = x[0, 0] @ p["W_ih"] + p["b"]
        i, g, o = 1 / (1 + np.exp(-z[:4])), np.tanh(z[8:12]), 1 / (1 + np.exp(-z[12:]))
        assert np.allclose(out[0, 0, half], o * np.tanh(i * g), atol=1e-12)


def test_bilstm_gradients(rng):
    cfg = ModelConfig(**TINY)
    mp = init_params(cfg, 2)
    x = tn.parameter(rng.normal(size=(2, 6, cfg.conv_out_features)))
    R = rng.normal(size=(2, 6, 8))
    params = [x] + [p for k, p in mp.params.items() if k.startswith("lstm1")]
    assert tn.grad_check_params(lambda: tn.sum(tn.mul(bilstm(x, mp, "lstm1"), R)), params) <= 1e-4


@pytest.mark.parametrize("variant", ["bmhsa", "fa", "faca"])
def test_tiny_model_gradients(variant, rng):
    cfg = ModelConfig(**TINY, variant=variant)
    mp = init_params(cfg, 1)
    x = rng.normal(size=(3, 6, 8))
    R = rng.normal(size=(3, 3))
    err = tn.grad_check_params(lambda: tn.sum(tn.mul(model_forward(x, mp, "train")[0], R)), mp.trainable())
    assert err <= 1e-4


def test_eval_is_pure(rng):
    mp = init_params(ModelConfig(**TINY), 0)
    x = rng.normal(size=(6, 8))
    before = {k: v.copy() for k, v in mp.buffers.items()}
    a = model_forward(x, mp, "eval")[0].data
    b = model_forward(x.copy(), mp, "eval")[0].data
    assert np.array_equal(a, b)
    assert all(np.array_equal(before[k], mp.buffers[k]) for k in before)


def test_bad_input_names_stage(rng):
    mp = init_params(ModelConfig(**TINY), 0)
    with pytest.raises(DimensionError, match="input"):
        model_forward(rng.normal(size=(6, 7)), mp)
    with pytest.raises(ValueError):
        model_forward(rng.normal(size=(6, 8)), mp, mode="test")


def test_batch_norm_train_eval_agree_after_convergence(rng):
    mp = init_params(ModelConfig(**TINY), 0)
    x = rng.normal(size=(16, 6, 8))
    for _ in range(300):
        model_forward(x, mp, "train")
    train = model_forward(x, mp, "train")[0].data
    evald = model_forward(x, mp, "eval")[0].data
    assert np.max(np.abs(train - evald)) <= 1e-3


def test_logit_translation(rng):
    mp = init_params(ModelConfig(**TINY), 0)
    x = rng.normal(size=(4, 6, 8))
    base = model_forward(x, mp)[0].data
    mp.params["fc2.b"].data = mp.params["fc2.b"].data + 2.5
    shifted = model_forward(x, mp)[0].data
    assert np.allclose(shifted - base, 2.5, atol=1e-12)
    sm = lambda z: np.exp(z - z.max(-1, keepdims=True)) / np.exp(z - z.max(-1, keepdims=True)).sum(-1, keepdims=True)  # noqa: E731
    assert np.allclose(sm(shifted), sm(base), atol=1e-12)
    assert np.array_equal(shifted.argmax(-1), base.argmax(-1))


def test_padding_does_not_leak_into_keys(rng):
    mp = init_params(ModelConfig(**TINY, variant="faca"), 0)
    x = rng.normal(size=(1, 6, 8))
    x[0, 4:] = 0
    _, tr = model_forward(x, mp, "eval", valid_len=np.array([4]), capture=True)
    assert np.all(tr.H_o[0, :, :, 4:] < 1e-300)


def test_checkpoint_roundtrip(tmp_path, rng):
    mp = init_params(ModelConfig(**TINY, variant="fa"), 5)
    mp.buffers["input.mean"] = rng.normal(size=8)
    save_checkpoint(tmp_path / "ck", mp, {"epoch": 7})
    back, meta = load_checkpoint(tmp_path / "ck")
    assert meta["epoch"] == 7 and back.config == mp.config
    assert (tmp_path / "ck" / "tensors" / "attn.head1.U_c.bin").is_file()
    for k in mp.arrays():
        assert np.array_equal(back.arrays()[k], mp.arrays()[k])
    x = rng.normal(size=(6, 8))
    assert np.array_equal(model_forward(x, back)[0].data, model_forward(x, mp)[0].data)
