import math

import pytest
import torch

from factarg.corpus import OTHERS, BioTag, tokenize
from factarg.grounder import (ArgSpan, GrounderConfig, batch_loss, biaffine_score, build_text_vocab, encode_pair,
                              evaluate_grounder, ground, load_grounder, new_grounder, reduce_variable,
                              resolve_channels, save_grounder, train_grounder)
from factarg.training import ModelStateError
from oracles import central_difference_check

TINY = GrounderConfig(layers=1, hidden=8, heads=2, reduced_dim=4, max_positions=64)


def tiny_model(examples, kb, config=TINY):
    return new_grounder(build_text_vocab(examples, kb), config)


def zero_scorer(model):
    with torch.no_grad():
        for p in model.biaffine.parameters():
            p.zero_()


def test_output_shapes(small_corpus):
    exs, kb = small_corpus
    model = tiny_model(exs, kb)
    ex = exs[0]
    pred = ground(model, ex.argument, [kb[v] for v in ex.variables])
    assert pred.logits.shape == (len(ex.variables) + 1, len(ex.argument), 3)
    assert pred.channels[-1] == OTHERS
    tokens, bos = encode_pair(model, ex.argument, [kb[v] for v in ex.variables])
    assert tokens.shape == (len(ex.argument), 8) and bos.shape == (len(ex.variables), 8)
    red = reduce_variable(model, bos)
    assert red.shape == (len(ex.variables), 4)
    assert biaffine_score(model, tokens, red).shape == pred.logits.shape


def test_batched_equals_single(small_corpus):
    exs, kb = small_corpus
    model = tiny_model(exs, kb).eval()
    batch = model.make_batch([e.argument for e in exs[:3]], [[kb[v].text for v in e.variables] for e in exs[:3]])
    with torch.no_grad():
        batched = model.logits(batch)
    for b, ex in enumerate(exs[:3]):
        single = ground(model, ex.argument, [kb[v] for v in ex.variables]).logits
        nv, n = len(ex.variables), len(ex.argument)
        assert torch.allclose(batched[b, :nv, :n], single[:nv], atol=1e-5)
        assert torch.allclose(batched[b, -1, :n], single[-1], atol=1e-5)


def test_variable_order_permutes_channels(small_corpus):
    exs, kb = small_corpus
    model = tiny_model(exs, kb)
    ex = exs[0]
    vs = [kb[v] for v in ex.variables]
    a = ground(model, ex.argument, vs).logits
    b = ground(model, ex.argument, vs[::-1]).logits
    # positions are reset per variable, so each channel depends only on its own text
    assert torch.allclose(a[0], b[1], atol=1e-5) and torch.allclose(a[1], b[0], atol=1e-5)


def test_deterministic_construction(small_corpus):
    exs, kb = small_corpus
    a, b = tiny_model(exs, kb), tiny_model(exs, kb)
    for (n, p), (_, q) in zip(a.state_dict().items(), b.state_dict().items()):
        assert torch.equal(p, q), n
    with pytest.raises(ModelStateError):
        new_grounder(build_text_vocab(exs, kb), GrounderConfig(seed=None))
    with pytest.raises(ModelStateError):
        ground(None, exs[0].argument, [])


def test_zero_scorer_gives_ln3_loss(small_corpus):
    exs, kb = small_corpus
    model = tiny_model(exs, kb)
    zero_scorer(model)
    assert batch_loss(model, exs, kb).item() == pytest.approx(math.log(3), abs=1e-6)
    pred = ground(model, exs[0].argument, [kb[v] for v in exs[0].variables])
    probs = torch.softmax(pred.logits, -1)
    assert torch.allclose(probs, torch.full_like(probs, 1 / 3))


def test_input_validation(small_corpus):
    exs, kb = small_corpus
    model = tiny_model(exs, kb)
    with pytest.raises(ValueError):
        model.make_batch([tokenize("")], [["x"]])
    with pytest.raises(ValueError):
        model.make_batch([exs[0].argument], [["a"] * 6])
    with pytest.raises(ValueError):
        train_grounder([], kb, TINY)
    with pytest.raises(ValueError):
        GrounderConfig(reduced_dim=0)


def test_resolve_channels_conflict():
    O, B, I = BioTag.O, BioTag.B, BioTag.I
    logits = torch.full((2, 3, 3), -5.0)
    # channel 0 claims tokens 0-1, channel 1 claims 1-2 more strongly at token 1
    logits[0, 0, B] = logits[0, 1, I] = 1.0
    logits[0, 2, O] = 1.0
    logits[1, 0, O] = 1.0
    logits[1, 1, B] = 2.0
    logits[1, 2, I] = 1.0
    lab = resolve_channels(logits, ["v", OTHERS])
    assert [(s.start, s.end, s.grounding) for s in lab] == [(0, 1, "v"), (1, 3, OTHERS)]


def test_full_loss_gradients(small_corpus):
    exs, kb = small_corpus
    model = tiny_model(exs, kb).double()
    params = [p for p in model.parameters()]
    err = central_difference_check(lambda: batch_loss(model, exs[:2], kb), params, max_coords=6)
    assert err < 1e-4


def test_clipped_training_and_round_trip(small_corpus, tmp_path):
    exs, kb = small_corpus
    cfg = GrounderConfig(layers=1, hidden=16, heads=2, reduced_dim=8, learning_rate=1e-3, batch_size=4,
                         max_steps=20, eval_every=10)
    model, log = train_grounder(exs, kb, cfg)
    assert all(s["clipped_norm"] <= 1.0 + 1e-6 for s in log.steps)
    assert log.losses[-1] < log.losses[0]
    report = evaluate_grounder(model, exs, kb)
    assert set(report) >= {"partial", "full", "overall", "grounding_accuracy", "exact_match"}
    save_grounder(model, tmp_path / "g.safetensors")
    back = load_grounder(tmp_path / "g.safetensors")
    assert isinstance(back, ArgSpan)
    vs = [kb[v] for v in exs[0].variables]
    assert torch.equal(ground(model, exs[0].argument, vs).logits, ground(back, exs[0].argument, vs).logits)
    with pytest.raises(ModelStateError):
        from factarg.tagger import load_tagger
        load_tagger(tmp_path / "g.safetensors")
