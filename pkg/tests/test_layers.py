import math

import pytest
import torch

from factarg.grounder import Biaffine, VariableReducer
from factarg.layers import MultiHeadAttention, SelectiveAttention, TransformerEncoder, masked_mean
from factarg.training import (ModelStateError, TrainSettings, Vocab, fit, global_grad_norm, load_checkpoint,
                              load_pretrained, save_checkpoint)
from oracles import central_difference_check

TOL = 1e-4


def _weights(shape, seed=3):
    g = torch.Generator().manual_seed(seed)
    return torch.randn(shape, generator=g, dtype=torch.float64)


def test_biaffine_gradients():
    torch.manual_seed(0)
    layer = Biaffine(8, 3).double()
    with torch.no_grad():
        layer.bias.normal_()
    u_v = torch.randn(2, 3, 8, dtype=torch.float64, requires_grad=True)
    u_t = torch.randn(2, 5, 8, dtype=torch.float64, requires_grad=True)
    w = _weights((2, 3, 5, 3))
    err = central_difference_check(lambda: (layer(u_v, u_t) * w).sum(), [*layer.parameters(), u_v, u_t])
    assert err < TOL


def test_biaffine_zero_weights_are_uniform():
    layer = Biaffine(4, 3)
    with torch.no_grad():
        for p in layer.parameters():
            p.zero_()
    logits = layer(torch.randn(1, 3, 4), torch.randn(1, 5, 4))
    assert logits.shape == (1, 3, 5, 3)
    assert torch.allclose(torch.softmax(logits, -1), torch.full_like(logits, 1 / 3))
    with pytest.raises(ValueError):
        layer(torch.randn(1, 3, 5), torch.randn(1, 5, 4))


def test_biaffine_matches_definition():
    torch.manual_seed(1)
    layer = Biaffine(4, 3).double()
    with torch.no_grad():
        layer.bias.normal_()
    u_v, u_t = torch.randn(1, 2, 4, dtype=torch.float64), torch.randn(1, 3, 4, dtype=torch.float64)
    with torch.no_grad():
        out = layer(u_v, u_t)
    for v in range(2):
        for t in range(3):
            for k in range(3):
                ref = (u_v[0, v] @ layer.weight[k].detach() @ u_t[0, t]
                       + layer.linear.weight[k].detach() @ torch.cat([u_v[0, v], u_t[0, t]]) + layer.bias[k].detach())
                assert abs(float(out[0, v, t, k] - ref)) < 1e-12


def test_reducer_gradients_and_shape():
    torch.manual_seed(0)
    red = VariableReducer(8, 4).double()
    x = torch.randn(3, 8, dtype=torch.float64, requires_grad=True)
    w = _weights((3, 4))
    assert central_difference_check(lambda: (red(x) * w).sum(), [*red.parameters(), x]) < TOL
    assert VariableReducer(64, 32)(torch.randn(2, 64)).shape == (2, 32)
    with pytest.raises(ValueError):
        red(torch.randn(2, 7, dtype=torch.float64))
    with torch.no_grad():
        red.bias.zero_()
    assert torch.count_nonzero(red(torch.zeros(1, 8, dtype=torch.float64))) == 0


def test_masked_attention_gradients():
    torch.manual_seed(0)
    attn = MultiHeadAttention(8, 2).double()
    x = torch.randn(2, 5, 8, dtype=torch.float64, requires_grad=True)
    mask = torch.tensor([[1, 1, 1, 0, 1], [1, 0, 1, 1, 1]], dtype=torch.bool)
    w = _weights((2, 5, 8))
    assert central_difference_check(lambda: (attn(x, key_mask=mask) * w).sum(), [*attn.parameters(), x]) < TOL


def test_selective_attention_gradients():
    torch.manual_seed(0)
    sel = SelectiveAttention(8, layers=2, heads=4).double()
    x = torch.randn(2, 6, 8, dtype=torch.float64, requires_grad=True)
    part = torch.tensor([[1, 1, 0, 0, 1, 1], [1, 0, 1, 1, 0, 1]], dtype=torch.bool)
    w = _weights((2, 6, 8))
    assert central_difference_check(lambda: (sel(x, part) * w).sum(), [*sel.parameters(), x]) < TOL


def test_masked_keys_do_not_leak():
    torch.manual_seed(0)
    attn = MultiHeadAttention(8, 2)
    x = torch.randn(1, 4, 8)
    mask = torch.tensor([[1, 1, 0, 1]], dtype=torch.bool)
    y = x.clone()
    y[0, 2] = torch.randn(8) * 100
    assert torch.allclose(attn(x, key_mask=mask)[0, [0, 1, 3]], attn(y, key_mask=mask)[0, [0, 1, 3]], atol=1e-6)


def test_causal_attention():
    torch.manual_seed(0)
    attn = MultiHeadAttention(8, 2)
    x = torch.randn(1, 5, 8)
    y = x.clone()
    y[0, 4] += 1.0
    a, b = attn(x, causal=True), attn(y, causal=True)
    assert torch.allclose(a[0, :4], b[0, :4], atol=1e-6)
    assert not torch.allclose(a[0, 4], b[0, 4])


def test_fully_masked_rows_are_finite():
    attn = MultiHeadAttention(8, 2)
    out = attn(torch.randn(1, 3, 8), key_mask=torch.zeros(1, 3, dtype=torch.bool))
    assert torch.isfinite(out).all()


def test_masked_mean_of_identical_vectors():
    v = torch.randn(8)
    x = v.expand(1, 5, 8)
    assert torch.allclose(masked_mean(x, torch.ones(1, 5, dtype=torch.bool)), v[None])


def test_encoder_is_deterministic():
    torch.manual_seed(5)
    enc = TransformerEncoder(20, 16, 2, 4)
    ids = torch.randint(0, 20, (2, 7))
    mask = torch.ones(2, 7, dtype=torch.bool)
    assert torch.equal(enc(ids, mask), enc(ids, mask))


def test_vocab_round_trip():
    v = Vocab(["b", "a", "b"])
    assert v.decode(v.encode(["a", "zzz"])) == ["a", "<unk>"]
    assert Vocab.from_json(v.to_json()).itos == v.itos


class _Quadratic(torch.nn.Module):
    def __init__(self):
        super().__init__()
        self.w = torch.nn.Parameter(torch.full((4,), 50.0))


def test_fit_clips_and_logs():
    model = _Quadratic()
    log = fit(model, 10, lambda idx: (model.w ** 2).sum() * len(idx),
              TrainSettings(learning_rate=0.1, batch_size=4, max_steps=30, eval_every=5, early_stop_patience=100))
    assert len(log.steps) == 30
    for s in log.steps:
        assert s["clipped_norm"] <= 1.0 + 1e-6
        assert s["grad_norm"] > 1.0
    assert log.losses[-1] < log.losses[0]
    assert "max_steps" in log.stopped


def test_fit_early_stops():
    model = _Quadratic()
    log = fit(model, 4, lambda idx: (model.w ** 2).sum(),
              TrainSettings(learning_rate=0.1, batch_size=4, max_steps=100, eval_every=1, early_stop_patience=3),
              val_loss=lambda: 1.0)
    assert len(log.steps) == 4 and "early stop" in log.stopped


def test_fit_rejects_empty():
    with pytest.raises(ValueError):
        fit(_Quadratic(), 0, lambda idx: None, TrainSettings())


def test_global_grad_norm():
    m = _Quadratic()
    (m.w.sum() * 2).backward()
    assert math.isclose(global_grad_norm(m.parameters()), 4.0)


def test_checkpoint_round_trip(tmp_path):
    m = _Quadratic()
    save_checkpoint(tmp_path / "m.safetensors", m, "quad", {"a": 1}, vocab=["x"])
    state, cfg, extra = load_checkpoint(tmp_path / "m.safetensors", "quad")
    assert torch.equal(state["w"], m.w.data) and cfg == {"a": 1} and extra == {"vocab": ["x"]}
    with pytest.raises(ModelStateError):
        load_checkpoint(tmp_path / "m.safetensors", "other")
    fresh = _Quadratic()
    with torch.no_grad():
        fresh.w.zero_()
    assert load_pretrained(fresh, tmp_path / "m.safetensors") == ["w"]
    assert torch.equal(fresh.w.data, m.w.data)
