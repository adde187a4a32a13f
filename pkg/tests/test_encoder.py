import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from urlalign.encoder import (EncoderConfig, build_encoder, collate, content_mask, encode, load_checkpoint,
                              parameter_gradients, pool_cls, pool_mean, represent_batch, save_checkpoint)
from urlalign.errors import FormatError, TrainingError, ValidationError
from urlalign.tokenizer import CLS_ID, FSEP_ID, PAD_ID, SEP_ID, Segment, TokenSequence


def seq(ids, segs=None):
    ids = np.array(ids, dtype=np.int64)
    if segs is None:
        segs = [Segment.SPECIAL if i in (CLS_ID, SEP_ID, FSEP_ID, PAD_ID) else Segment.DESC for i in ids]
    return TokenSequence(ids, np.array(segs, dtype=np.int8))


def tiny_config(**kw):
    base = dict(vocab_size=12, layers=1, heads=2, model_dim=8, ffn_dim=16, dropout=0.0, pooler_dim=4, seed=3)
    base.update(kw)
    return EncoderConfig(**base)


def test_config_validation():
    with pytest.raises(ValidationError):
        EncoderConfig(vocab_size=10, model_dim=10, heads=4)
    with pytest.raises(ValidationError):
        EncoderConfig(vocab_size=10, max_positions=100)


def test_default_sizes():
    model = build_encoder(EncoderConfig(vocab_size=100))
    assert len(model.layers) == 4
    assert model.pooler.weight.shape == (128, 128)
    assert model.config.max_positions == 160


def test_pad_tail_does_not_change_states():
    model = build_encoder(EncoderConfig(vocab_size=30, layers=2, seed=1))
    s = seq([CLS_ID, 7, 8, 9, FSEP_ID, 10, SEP_ID])
    a = encode(model, s)
    b = encode(model, s.padded(15))
    assert torch.allclose(a, b[:len(s)], atol=1e-6)
    ids, pad = collate([s, s.padded(15)], model.config)
    with torch.no_grad():
        pooled = model.represent(ids, pad)
        mean = pool_mean(model(ids, pad), content_mask([s, s.padded(15)], ids.shape[1]))
    assert torch.allclose(pooled[0], pooled[1], atol=1e-6)
    assert torch.allclose(mean[0], mean[1], atol=1e-6)


def test_permuting_tokens_changes_states():
    model = build_encoder(EncoderConfig(vocab_size=30, layers=1, seed=2))
    a = encode(model, seq([CLS_ID, 7, 8, SEP_ID]))
    b = encode(model, seq([CLS_ID, 8, 7, SEP_ID]))
    assert not torch.allclose(a[1:3], b[1:3], atol=1e-4)


def test_encode_validates_input():
    model = build_encoder(EncoderConfig(vocab_size=10))
    with pytest.raises(ValidationError):
        encode(model, seq([CLS_ID, 10, SEP_ID]))
    with pytest.raises(ValidationError):
        encode(model, seq([CLS_ID] + [5] * 160 + [SEP_ID]))


# -- dense numpy oracle for one layer -------------------------------------------------

def _layer_norm(x, w, b, eps):
    mu = x.mean(-1, keepdims=True)
    var = ((x - mu) ** 2).mean(-1, keepdims=True)
    return (x - mu) / np.sqrt(var + eps) * w + b


def _gelu(x):
    return 0.5 * x * (1 + np.vectorize(math.erf)(x / math.sqrt(2)))


def brute_force_forward(state, ids, cfg):
    p = {k: v.double().numpy() for k, v in state.items()}
    x = p["token_embedding.weight"][ids] + p["position_embedding.weight"][np.arange(len(ids))]
    x = _layer_norm(x, p["embedding_norm.weight"], p["embedding_norm.bias"], cfg.layer_norm_eps)
    pre = "layers.0."
    q = x @ p[pre + "attention.query.weight"].T + p[pre + "attention.query.bias"]
    k = x @ p[pre + "attention.key.weight"].T + p[pre + "attention.key.bias"]
    v = x @ p[pre + "attention.value.weight"].T + p[pre + "attention.value.bias"]
    n = len(ids)
    out = np.zeros_like(x)
    for i in range(n):
        s = np.array([q[i] @ k[j] for j in range(n)]) / math.sqrt(cfg.model_dim)
        s = np.where(ids == PAD_ID, -np.inf, s)
        a = np.exp(s - s.max())
        a /= a.sum()
        out[i] = sum(a[j] * v[j] for j in range(n))
    attn = out @ p[pre + "attention.out.weight"].T + p[pre + "attention.out.bias"]
    x = _layer_norm(x + attn, p[pre + "attn_norm.weight"], p[pre + "attn_norm.bias"], cfg.layer_norm_eps)
    h = _gelu(x @ p[pre + "ffn_in.weight"].T + p[pre + "ffn_in.bias"])
    h = h @ p[pre + "ffn_out.weight"].T + p[pre + "ffn_out.bias"]
    return _layer_norm(x + h, p[pre + "ffn_norm.weight"], p[pre + "ffn_norm.bias"], cfg.layer_norm_eps)


def test_single_head_layer_matches_dense_oracle():
    cfg = EncoderConfig(vocab_size=6, layers=1, heads=1, model_dim=4, ffn_dim=6, dropout=0.0, pooler_dim=4)
    model = build_encoder(cfg).double()
    rng = np.random.default_rng(42)
    with torch.no_grad():
        for name, param in model.named_parameters():
            param.copy_(torch.from_numpy(np.round(rng.uniform(-1, 1, size=param.shape), 2)))
    ids = np.array([CLS_ID, 5, SEP_ID])
    expected = brute_force_forward(model.state_dict(), ids, cfg)
    with torch.no_grad():
        got = model(torch.from_numpy(ids)[None])[0].numpy()
    np.testing.assert_allclose(got, expected, rtol=1e-10, atol=1e-10)
    # with a PAD key present the oracle masks it too
    ids = np.array([CLS_ID, 5, SEP_ID, PAD_ID])
    with torch.no_grad():
        got = model(torch.from_numpy(ids)[None])[0].numpy()
    np.testing.assert_allclose(got[:3], brute_force_forward(model.state_dict(), ids, cfg)[:3], rtol=1e-10, atol=1e-10)


# -- pooling -------------------------------------------------------------------------

def test_pool_cls_zero_state_zero_bias():
    model = build_encoder(tiny_config())
    with torch.no_grad():
        model.pooler.bias.zero_()
    out = pool_cls(model, torch.zeros(3, 8))
    assert torch.equal(out, torch.zeros(4))


def test_pool_cls_identity_pooler():
    model = build_encoder(EncoderConfig(vocab_size=5, layers=0, heads=1, model_dim=2, ffn_dim=2, pooler_dim=2))
    with torch.no_grad():
        model.pooler.weight.copy_(torch.eye(2))
        model.pooler.bias.zero_()
    out = pool_cls(model, torch.tensor([[1.0, -1.0], [5.0, 5.0]]))
    assert out.tolist() == pytest.approx([math.tanh(1.0), math.tanh(-1.0)])
    assert out[0].item() == pytest.approx(0.7616, abs=1e-4)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.lists(st.integers(5, 29), min_size=1, max_size=20))
def test_pool_cls_range_property(seed, body):
    cfg = EncoderConfig(vocab_size=30, layers=1, heads=2, model_dim=16, ffn_dim=32, pooler_dim=16,
                        init_std=1.0, seed=seed)
    model = build_encoder(cfg)
    out = pool_cls(model, encode(model, seq([CLS_ID, *body, SEP_ID])))
    # float32 tanh saturates to exactly 1 for large inputs
    assert torch.all(out.abs() <= 1)


def test_pool_mean_cases():
    v = torch.tensor([1.0, 2.0, 3.0])
    h = torch.stack([torch.full((3,), 9.0), v, v, v, torch.full((3,), -9.0)])
    assert torch.equal(pool_mean(h, [False, True, True, True, False]), v)
    h = torch.stack([torch.zeros(3), v, -v, torch.zeros(3)])
    assert torch.equal(pool_mean(h, [False, True, True, False]), torch.zeros(3))
    a, b, c = np.array([1.0, 0.0]), np.array([2.0, 4.0]), np.array([-0.5, 1.0])
    h = torch.tensor(np.stack([np.zeros(2), a, b, c, np.zeros(2)]))
    assert pool_mean(h, [0, 1, 1, 1, 0]).tolist() == pytest.approx(((a + b + c) / 3).tolist())
    with pytest.raises(ValidationError):
        pool_mean(h, [0, 0, 0, 0, 0])


def test_content_mask_excludes_specials_and_pad():
    s = seq([CLS_ID, 7, FSEP_ID, 8, FSEP_ID, SEP_ID],
            [Segment.SPECIAL, Segment.URL, Segment.SPECIAL, Segment.TITLE, Segment.SPECIAL, Segment.SPECIAL])
    assert content_mask([s.padded(8)]).tolist() == [[False, True, False, True, False, False, False, False]]


# -- gradients -----------------------------------------------------------------------

def _loss_closure(ids, pad, probe):
    def loss(model):
        hidden = model(ids, pad)
        pooled = model.pool(hidden)
        mean = pool_mean(hidden, ~pad & (ids != CLS_ID) & (ids != SEP_ID))
        return (pooled * probe[0]).sum() + (mean * probe[1][: mean.shape[1]]).sum() ** 2
    return loss


def max_relative_error(analytic, numeric, floor=1e-6):
    analytic, numeric = np.asarray(analytic), np.asarray(numeric)
    return float(np.max(np.abs(analytic - numeric) / np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)))


def finite_difference(model, loss_fn, param, eps=1e-6):
    grad = torch.zeros_like(param)
    flat = param.data.view(-1)
    with torch.no_grad():
        for i in range(flat.numel()):
            old = flat[i].item()
            flat[i] = old + eps
            up = loss_fn(model).item()
            flat[i] = old - eps
            down = loss_fn(model).item()
            flat[i] = old
            grad.view(-1)[i] = (up - down) / (2 * eps)
    return grad


@pytest.fixture(scope="module")
def tiny_model():
    model = build_encoder(tiny_config(init_std=0.5)).double()
    assert sum(p.numel() for p in model.parameters()) <= 5000
    ids = torch.tensor([[CLS_ID, 5, 6, FSEP_ID, 7, 8, SEP_ID], [CLS_ID, 9, 10, 11, SEP_ID, PAD_ID, PAD_ID]])
    rng = torch.Generator().manual_seed(0)
    probe = (torch.randn(4, generator=rng, dtype=torch.float64), torch.randn(8, generator=rng, dtype=torch.float64))
    return model, _loss_closure(ids, ids == PAD_ID, probe)


LAYER_PARAMS = ["token_embedding.weight", "embedding_norm.weight", "embedding_norm.bias",
                "layers.0.attention.query.weight", "layers.0.attention.key.weight", "layers.0.attention.value.weight",
                "layers.0.attention.out.weight", "layers.0.attn_norm.weight", "layers.0.ffn_in.weight",
                "layers.0.ffn_out.bias", "layers.0.ffn_norm.bias", "pooler.weight", "pooler.bias"]


@pytest.mark.parametrize("name", LAYER_PARAMS)
def test_gradients_match_finite_differences(tiny_model, name):
    model, loss_fn = tiny_model
    grads = parameter_gradients(model, loss_fn)
    param = dict(model.named_parameters())[name]
    numeric = finite_difference(model, loss_fn, param)
    assert max_relative_error(grads[name].numpy(), numeric.numpy()) < 1e-4


def test_key_bias_gradient_vanishes(tiny_model):
    # adding a constant to every key shifts each softmax row uniformly
    model, loss_fn = tiny_model
    grads = parameter_gradients(model, loss_fn)
    assert torch.all(grads["layers.0.attention.key.bias"].abs() < 1e-12)
    numeric = finite_difference(model, loss_fn, model.layers[0].attention.key.bias)
    assert torch.all(numeric.abs() < 1e-7)


def test_position_embedding_gradient_rows(tiny_model):
    model, loss_fn = tiny_model
    grads = parameter_gradients(model, loss_fn)["position_embedding.weight"]
    # only the first seven positions are used
    assert torch.count_nonzero(grads[7:]) == 0
    param = model.position_embedding.weight
    saved = param.data.clone()
    used = param.data[:7]
    numeric = torch.zeros_like(used)
    with torch.no_grad():
        for i in range(used.numel()):
            r, c = divmod(i, used.shape[1])
            old = param.data[r, c].item()
            param.data[r, c] = old + 1e-6
            up = loss_fn(model).item()
            param.data[r, c] = old - 1e-6
            down = loss_fn(model).item()
            param.data[r, c] = old
            numeric[r, c] = (up - down) / 2e-6
    assert torch.equal(param.data, saved)
    assert max_relative_error(grads[:7].numpy(), numeric.numpy()) < 1e-4


def test_constant_loss_gives_zero_gradients(tiny_model):
    model, _ = tiny_model
    grads = parameter_gradients(model, lambda m: torch.tensor(3.0, dtype=torch.float64) + 0 * m.pooler.bias.sum())
    assert all(torch.count_nonzero(g) == 0 for g in grads.values())


def test_gradients_are_linear_in_loss(tiny_model):
    model, loss_fn = tiny_model
    g1 = parameter_gradients(model, loss_fn)
    g2 = parameter_gradients(model, lambda m: 2 * loss_fn(m))
    for name in g1:
        assert torch.allclose(g2[name], 2 * g1[name], rtol=1e-12, atol=1e-15)


def test_non_finite_gradient_names_parameter(tiny_model):
    model, _ = tiny_model
    with pytest.raises(TrainingError, match="pooler.bias"):
        parameter_gradients(model, lambda m: (m.pooler.bias * float("inf")).sum())


# -- determinism and persistence -----------------------------------------------------

def test_eval_determinism_across_runs_and_threads():
    model = build_encoder(EncoderConfig(vocab_size=40, layers=2, seed=5))
    seqs = [seq([CLS_ID, *range(5, 5 + n), SEP_ID]) for n in (3, 10, 30)]
    threads = torch.get_num_threads()
    try:
        torch.set_num_threads(1)
        a = represent_batch(model, seqs)
        b = represent_batch(model, seqs)
        torch.set_num_threads(4)
        c = represent_batch(model, seqs)
    finally:
        torch.set_num_threads(threads)
    assert np.array_equal(a, b)
    assert np.array_equal(a, c)


def test_same_seed_same_weights():
    a = build_encoder(EncoderConfig(vocab_size=20, seed=4))
    b = build_encoder(EncoderConfig(vocab_size=20, seed=4))
    assert all(torch.equal(x, y) for x, y in zip(a.state_dict().values(), b.state_dict().values()))


def test_checkpoint_round_trip(tmp_path):
    model = build_encoder(tiny_config())
    save_checkpoint(model, tmp_path / "enc.ckpt")
    back = load_checkpoint(tmp_path / "enc.ckpt")
    assert back.config == model.config
    for (n1, t1), (n2, t2) in zip(model.state_dict().items(), back.state_dict().items()):
        assert n1 == n2 and torch.equal(t1, t2)


def test_checkpoint_rejects_corruption(tmp_path):
    path = tmp_path / "enc.ckpt"
    save_checkpoint(build_encoder(tiny_config()), path)
    raw = path.read_bytes()
    path.write_bytes(raw[:-10])
    with pytest.raises(FormatError):
        load_checkpoint(path)
    path.write_bytes(raw.replace(b'"model_dim": 8', b'"model_dim": 4'))
    with pytest.raises(FormatError):
        load_checkpoint(path)
    path.write_bytes(b"junk" + raw)
    with pytest.raises(FormatError):
        load_checkpoint(path)
