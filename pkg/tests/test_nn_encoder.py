import numpy as np
import pytest
import torch

from ctcreorder.errors import ConfigError, DataError
from ctcreorder.nn_encoder import (
    CTCEncoder, ModelConfig, batch_loss, checkpoint_bytes, collate, copy_encoder, forward, grad_wrt_activations,
    load_checkpoint, log_prob_from_layer, loss_and_grad, parameter_arrays, parse_checkpoint,
    reinit_st_head, save_checkpoint,
)


def toy_config(**kw):
    base = dict(num_layers=2, attention_dim=8, num_heads=2, ffn_dim=16, st_vocab_size=6,
                feat_dim=4, dropout=0.0, seed=0)
    base.update(kw)
    return ModelConfig(**base)


def feats(frames=32, dim=4, seed=0):
    return np.random.default_rng(seed).normal(size=(frames, dim))


def rel_err(a, b, floor=1e-6):
    return float(np.max(np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)))


def test_config_validation():
    with pytest.raises(ConfigError):
        toy_config(attention_dim=9)
    with pytest.raises(ConfigError):
        toy_config(asr_layer=3, asr_vocab_size=5)
    with pytest.raises(ConfigError):
        toy_config(asr_layer=1)
    assert toy_config().downsample == 4


def test_forward_shapes():
    m = CTCEncoder(toy_config(asr_layer=1, asr_vocab_size=5))
    st, asr, acts = forward(m, feats(32), retain_activations=True)
    assert st.shape == (8, 6) and asr.shape == (8, 5)
    assert len(acts) == 3 and all(a.shape == (8, 8) for a in acts)
    np.testing.assert_allclose(np.logaddexp.reduce(st, axis=1), 0.0, atol=1e-12)
    st2, _, none = forward(m, feats(33))
    assert st2.shape == (9, 6) and none is None


def test_retain_flag_does_not_change_lattice():
    m = CTCEncoder(toy_config())
    a, _, _ = forward(m, feats(), retain_activations=True)
    b, _, _ = forward(m, feats(), retain_activations=False)
    assert np.array_equal(a, b)


def test_seeded_determinism():
    a, _, _ = forward(CTCEncoder(toy_config(seed=3)), feats())
    b, _, _ = forward(CTCEncoder(toy_config(seed=3)), feats())
    c, _, _ = forward(CTCEncoder(toy_config(seed=4)), feats())
    assert np.array_equal(a, b)
    assert not np.array_equal(a, c)


def test_construction_leaves_global_rng_alone():
    torch.manual_seed(123)
    expected = torch.rand(3)
    torch.manual_seed(123)
    CTCEncoder(toy_config())
    assert torch.equal(torch.rand(3), expected)


def test_input_validation():
    m = CTCEncoder(toy_config())
    with pytest.raises(DataError):
        forward(m, feats(dim=5))
    with pytest.raises(DataError):
        forward(m, feats(frames=3))


def test_batched_forward_matches_single():
    m = CTCEncoder(toy_config()).eval()
    fs = [feats(n, seed=n) for n in (17, 40, 29)]
    x, lengths = collate(fs)
    with torch.no_grad():
        out = m(x, lengths)
    for i, f in enumerate(fs):
        single, _, _ = forward(m, f)
        np.testing.assert_allclose(out.st_log_probs[i, : len(single)].numpy(), single, atol=1e-12)


def test_lambda_zero_equals_single_task():
    mt = CTCEncoder(toy_config(asr_layer=1, asr_vocab_size=5, seed=1))
    single = CTCEncoder(toy_config(seed=1))
    state = {k: v for k, v in mt.state_dict().items() if not k.startswith("asr_head")}
    single.load_state_dict(state)
    f = feats(seed=2)
    loss_mt, g_mt = loss_and_grad(mt, f, [1, 2, 3], [1, 4], lam=0.0)
    loss_st, g_st = loss_and_grad(single, f, [1, 2, 3])
    assert loss_mt == pytest.approx(loss_st, abs=1e-12)
    for name, g in g_st.items():
        np.testing.assert_allclose(g_mt[name], g, atol=1e-12)
    assert np.all(g_mt["asr_head.weight"] == 0)


def test_lambda_one_ignores_st_head():
    mt = CTCEncoder(toy_config(asr_layer=1, asr_vocab_size=5))
    _, g = loss_and_grad(mt, feats(), [1, 2, 3], [1, 4], lam=1.0)
    assert np.all(g["st_head.weight"] == 0) and np.all(g["st_head.bias"] == 0)
    assert np.any(g["asr_head.weight"] != 0)


def test_asr_target_required_iff_multitask():
    with pytest.raises(ConfigError):
        loss_and_grad(CTCEncoder(toy_config()), feats(), [1], [1])
    with pytest.raises(ConfigError):
        loss_and_grad(CTCEncoder(toy_config(asr_layer=1, asr_vocab_size=5)), feats(), [1])


def test_infeasible_target_reports_ids():
    m = CTCEncoder(toy_config())
    with pytest.raises(DataError, match="utt-7"):
        batch_loss(m, [feats(8)], [[1, 2, 3]], ids=["utt-7"])


def fd_param_check(model, f, st_target, asr_target, lam, per_tensor=4, h=1e-6, seed=0):
    _, grads = loss_and_grad(model, f, st_target, asr_target, lam)
    rng = np.random.default_rng(seed)
    worst = 0.0
    params = dict(model.named_parameters())
    for name, p in params.items():
        flat = p.data.view(-1)
        for idx in rng.choice(flat.numel(), size=min(per_tensor, flat.numel()), replace=False):
            old = float(flat[idx])
            flat[idx] = old + h
            up, _ = loss_and_grad(model, f, st_target, asr_target, lam)
            flat[idx] = old - h
            down, _ = loss_and_grad(model, f, st_target, asr_target, lam)
            flat[idx] = old
            num = (up - down) / (2 * h)
            worst = max(worst, rel_err(np.array(grads[name].reshape(-1)[idx]), np.array(num)))
    return worst


def test_full_model_gradient_finite_differences():
    rng = np.random.default_rng(0)
    for i in range(5):
        m = CTCEncoder(toy_config(asr_layer=1, asr_vocab_size=5, seed=i))
        f = rng.normal(size=(int(rng.integers(24, 40)), 4))
        st_t = [int(v) for v in rng.integers(1, 6, size=3)]
        asr_t = [int(v) for v in rng.integers(1, 5, size=2)]
        assert fd_param_check(m, f, st_t, asr_t, lam=0.3, seed=i) <= 1e-3


def test_activation_grad_shape_and_locality():
    m = CTCEncoder(toy_config(num_layers=0))
    f = feats(40)
    g = grad_wrt_activations(m, f, frame=4, layer=0)
    assert g.shape == (10, 8)
    nonzero = np.nonzero(np.abs(g).sum(axis=1))[0]
    assert list(nonzero) == [4]
    m2 = CTCEncoder(toy_config())
    for layer in range(3):
        assert grad_wrt_activations(m2, f, frame=1, layer=layer).shape == (10, 8)
    with pytest.raises(DataError):
        grad_wrt_activations(m2, f, frame=10, layer=0)
    with pytest.raises(DataError):
        grad_wrt_activations(m2, f, frame=0, layer=3)


def test_activation_grad_finite_differences():
    m = CTCEncoder(toy_config(attention_dim=4, num_heads=2, ffn_dim=8, seed=5))
    f = feats(24, seed=6)
    _, _, acts = forward(m, f, retain_activations=True)
    h = 1e-6
    for layer in range(3):
        frame, token = 2, 3
        g = grad_wrt_activations(m, f, frame, layer, token=token)
        num = np.zeros_like(g)
        for t in range(g.shape[0]):
            for k in range(g.shape[1]):
                up, down = acts[layer].copy(), acts[layer].copy()
                up[t, k] += h
                down[t, k] -= h
                num[t, k] = (log_prob_from_layer(m, f, layer, up, frame, token)
                             - log_prob_from_layer(m, f, layer, down, frame, token)) / (2 * h)
        assert rel_err(g, num, floor=1e-6) <= 1e-3


def test_checkpoint_roundtrip(tmp_path):
    m = CTCEncoder(toy_config(asr_layer=2, asr_vocab_size=5, seed=9))
    p = tmp_path / "m.bin"
    save_checkpoint(p, m)
    raw = p.read_bytes()
    assert raw[:4] == b"NARC"
    back = load_checkpoint(p)
    assert back.config == m.config
    for k, v in parameter_arrays(m).items():
        assert np.array_equal(v, parameter_arrays(back)[k])
    assert checkpoint_bytes(back.config, parameter_arrays(back)) == raw


def test_checkpoint_corruption_detected(tmp_path):
    m = CTCEncoder(toy_config())
    raw = checkpoint_bytes(m.config, parameter_arrays(m))
    with pytest.raises(DataError):
        parse_checkpoint(b"XXXX" + raw[4:])
    with pytest.raises(DataError):
        parse_checkpoint(raw[:-3])


def test_reinit_st_head_keeps_encoder():
    m = CTCEncoder(toy_config())
    before = parameter_arrays(m)
    reinit_st_head(m, seed=1)
    after = parameter_arrays(m)
    assert not np.array_equal(before["st_head.weight"], after["st_head.weight"])
    assert np.array_equal(before["layers.0.qkv.weight"], after["layers.0.qkv.weight"])


def test_copy_encoder_transfers_body_only():
    src = CTCEncoder(toy_config(st_vocab_size=9, seed=1))
    dst = CTCEncoder(toy_config(asr_layer=1, asr_vocab_size=5, seed=2))
    heads = {k: v for k, v in parameter_arrays(dst).items() if "head" in k}
    copy_encoder(src, dst)
    s, d = parameter_arrays(src), parameter_arrays(dst)
    for k, v in d.items():
        if "head" in k:
            assert np.array_equal(v, heads[k])
        else:
            assert np.array_equal(v, s[k])
    with pytest.raises(ConfigError):
        copy_encoder(CTCEncoder(toy_config(num_layers=1)), dst)
