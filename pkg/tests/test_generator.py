import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from factarg.corpus import CONTROL_SCHEMES, ArgumentScheme, Span, SpanLabeling, Stance, tokenize
from factarg.fixtures import control_fixture
from factarg.generator import (ARGUMENT, EOS, PATTERN, SPECIAL_TOKENS, EncoderInput, GenerationRecord,
                               GeneratorConfig, TemplateError, beam_search, build_control_prefix,
                               build_encoder_input, build_row, decode_dual, eligible, gen_tokens, generate,
                               generator_vocab, load_generator, new_generator, repeated_trigram, rows_loss,
                               save_generator, substitute_template, template_flags, template_from_example,
                               train_generator, uniform_loss)
from factarg.training import ModelStateError
from oracles import central_difference_check, exhaustive_best, greedy_decode, has_repeat_trigram

S = ArgumentScheme


@pytest.fixture(scope="module")
def ctl():
    return control_fixture()


def tiny_config(**kw):
    base = dict(encoder_layers=1, decoder_layers=1, hidden=8, heads=2, max_positions=96)
    base.update(kw)
    return GeneratorConfig(**base)


# -- token table ---------------------------------------------------------


def test_special_token_table():
    assert len(SPECIAL_TOKENS) == 13 == len(set(SPECIAL_TOKENS))
    assert {"<pro>", "<con>", "<pattern>", "<argument>"} <= set(SPECIAL_TOKENS)
    assert {f"<VAR_{i}>" for i in range(4)} <= set(SPECIAL_TOKENS)
    for tok in SPECIAL_TOKENS:
        assert gen_tokens(f"a {tok} b") == ["a", tok, "b"]


def test_specials_disjoint_from_words(ctl):
    exs, kb = ctl
    vocab = generator_vocab(exs, kb)
    words = vocab.itos[len(vocab.specials):] if hasattr(vocab, "specials") else vocab.itos
    for tok in SPECIAL_TOKENS:
        assert vocab.itos.count(tok) == 1
    assert gen_tokens("Gun LAWS <VAR_1>") == ["gun", "laws", "<VAR_1>"]
    assert len(set(words)) == len(words)


# -- inputs --------------------------------------------------------------


def test_encoder_input_examples():
    enc = build_encoder_input("gun control", ["more guns", "less crime"], permutation=[1, 0])
    assert enc.text == "gun control <VAR_0> less crime <VAR_1> more guns"
    assert enc.tokens()[:3] == ["gun", "control", "<VAR_0>"]
    a = build_encoder_input("t", ["x", "y", "z"], seed=7)
    b = build_encoder_input("t", ["x", "y", "z"], seed=7)
    assert a == b
    assert sorted(a.variables) == ["x", "y", "z"]
    with pytest.raises(ValueError):
        build_encoder_input("t", [])
    with pytest.raises(ValueError):
        build_encoder_input("t", list("abcde"))
    with pytest.raises(ValueError):
        build_encoder_input("t", ["a", "b"], permutation=[0, 0])


def test_prefix_examples():
    assert build_control_prefix("dual", Stance.PRO, S.FROM_CONSEQUENCE) == ["<pro>", "<from_consequence>", PATTERN]
    assert build_control_prefix("mono", Stance.CON, S.RULE_OR_PRINCIPLE) == ["<con>", "<rule_or_principle>",
                                                                             ARGUMENT]
    assert build_control_prefix("stance", Stance.PRO) == ["<pro>", ARGUMENT]
    assert build_control_prefix("scheme", scheme=S.FROM_SOURCE_AUTHORITY) == ["<from_source_authority>", ARGUMENT]
    assert build_control_prefix("dual", phase=2, template=["<VAR_0>", "is", "bad"]) == [
        "<VAR_0>", "is", "bad", ARGUMENT]
    with pytest.raises(ValueError):
        build_control_prefix("dual", Stance.PRO, S.OTHERS)
    with pytest.raises(ValueError):
        build_control_prefix("mono", Stance.PRO)
    with pytest.raises(ValueError):
        build_control_prefix("mono", phase=2, template=["x"])
    with pytest.raises(ValueError):
        build_control_prefix("dual", phase=2)


def test_substitute_template():
    enc = EncoderInput("t", ("the death penalty", "crime"), (0, 1))
    assert substitute_template("<VAR_0> deters <VAR_1> .", enc) == "the death penalty deters crime ."
    assert substitute_template(["<VAR_1>", "<VAR_1>"], enc) == "crime crime"
    with pytest.raises(TemplateError):
        substitute_template("<VAR_2> is bad", enc)


def test_template_from_example(ctl):
    exs, kb = ctl
    ex = exs[0]
    enc = build_encoder_input("t", [kb[v].text for v in ex.variables], permutation=[1, 0])
    tpl = template_from_example(ex, enc, kb)
    assert set(t for t in tpl if t.startswith("<VAR_")) == {"<VAR_0>", "<VAR_1>"}
    assert substitute_template(tpl, enc) == " ".join(t.lower() for t in ex.argument.tokens)
    bare = ex.replace(spans=SpanLabeling())
    with pytest.raises(TemplateError):
        template_from_example(bare, enc, kb)


def test_template_flags():
    assert template_flags(["<VAR_0>", "and", "<VAR_1>"], 2) == []
    assert template_flags(["<VAR_0>"], 2) == ["template-missing-variable"]
    assert template_flags(["<VAR_3>", "<VAR_0>"], 1) == ["template-unknown-placeholder"]


def test_eligibility(ctl):
    exs, _ = ctl
    ex = exs[0]
    assert eligible(ex, "dual")
    others_only = ex.replace(schemes=frozenset({S.OTHERS}))
    assert not eligible(others_only, "dual") and eligible(others_only, "stance")
    assert not eligible(ex.replace(variables=()), "stance")


# -- beam search ---------------------------------------------------------


def _random_lm(vocab, seed):
    table = {}
    rng = np.random.default_rng(seed)

    def logp(seq):
        key = tuple(seq)
        if key not in table:
            z = rng.normal(size=vocab) * 2
            table[key] = z - np.logaddexp.reduce(z)
        return table[key]

    return logp


def _batched(logp):
    return lambda prefixes: np.stack([logp(p) for p in prefixes])


def test_beam_one_is_greedy():
    for seed in range(30):
        lm = _random_lm(5, seed)
        res = beam_search(_batched(lm), 0, beam_width=1, max_len=6)
        score, seq = greedy_decode(lm, 5, 0, 6)
        assert res.tokens == seq and res.score == pytest.approx(score)


def test_wide_beam_is_exhaustive():
    for seed in range(30):
        lm = _random_lm(4, seed)
        res = beam_search(_batched(lm), 0, beam_width=300, max_len=4)
        score, seq = exhaustive_best(lm, 4, 0, 4)
        assert res.tokens == seq and res.score == pytest.approx(score, abs=1e-12)


@settings(max_examples=40, deadline=None, derandomize=True)
@given(st.integers(0, 10_000), st.integers(1, 6))
def test_beam_score_is_path_score(seed, width):
    lm = _random_lm(4, seed)
    res = beam_search(_batched(lm), 0, beam_width=width, max_len=10)
    path = sum(lm(res.tokens[:i])[t] for i, t in enumerate(res.tokens))
    if res.stop is not None:
        path += lm(res.tokens)[res.stop]
    assert res.score == pytest.approx(path, abs=1e-12)
    assert not has_repeat_trigram(res.tokens) and len(res.tokens) <= 10
    assert res.stop is not None or len(res.tokens) == 10


def test_trigram_block_is_hard():
    # a model that always wants token 1 then EOS far behind
    def lm(prefixes):
        row = np.log(np.array([1e-6, 0.9, 0.1 - 1e-6]))
        return np.stack([row] * len(prefixes))

    # four 1s would repeat (1, 1, 1); equal-score alternatives tie-break lexicographically
    assert beam_search(lm, 0, beam_width=3, max_len=4).tokens == [1, 1, 1, 2]
    # two symbols cannot fill 12 positions without a repeated trigram, so stopping at once wins
    res = beam_search(lm, 0, beam_width=3, max_len=12)
    assert res.tokens == [] and res.stop == 0
    assert beam_search(lm, 0, beam_width=3, max_len=5, block_repeated_trigrams=False).tokens == [1] * 5
    with pytest.raises(ValueError):
        beam_search(lm, 0, beam_width=0)


def test_several_stop_tokens():
    def lm(prefixes):
        return np.stack([np.log(np.array([0.1, 0.6, 0.3]))] * len(prefixes))

    res = beam_search(lm, [0, 1], beam_width=2, max_len=5)
    assert res.tokens == [] and res.stop == 1


# -- model ---------------------------------------------------------------


def test_zero_head_loss_is_log_vocab(ctl):
    exs, kb = ctl
    vocab = generator_vocab(exs, kb)
    model = new_generator(vocab, tiny_config())
    with torch.no_grad():
        model.lm_head.weight.zero_()
        model.lm_head.bias.zero_()
    rows = [build_row(ex, kb, "dual", 0) for ex in exs[:4]]
    assert rows_loss(model, rows).item() == pytest.approx(uniform_loss(len(vocab)), abs=1e-5)
    assert uniform_loss(len(vocab)) == math.log(len(vocab))


def test_rows_supervise_after_prefix(ctl):
    exs, kb = ctl
    row = build_row(exs[0], kb, "dual", 0)
    assert row.decoder_tokens[:3] == build_control_prefix("dual", exs[0].stance, next(iter(exs[0].schemes)))
    assert row.loss_from == 3 and row.decoder_tokens[-1] == EOS
    assert ARGUMENT in row.decoder_tokens
    mono = build_row(exs[0], kb, "mono", 0)
    assert mono.decoder_tokens == mono.decoder_tokens[:3] + mono.target + [EOS]


def test_full_loss_gradients(ctl):
    exs, kb = ctl
    model = new_generator(generator_vocab(exs, kb), tiny_config()).double()
    rows = [build_row(ex, kb, "dual", 0) for ex in exs[:2]]
    err = central_difference_check(lambda: rows_loss(model, rows), list(model.parameters()), max_coords=6)
    assert err < 1e-4


def test_embedding_is_shared(ctl):
    exs, kb = ctl
    model = new_generator(generator_vocab(exs, kb), tiny_config())
    assert model.encoder.embed is model.embed


def test_generation_contract_untrained(ctl):
    exs, kb = ctl
    model = new_generator(generator_vocab(exs, kb), tiny_config(max_length=12))
    rec = generate(model, "death penalty", [kb[v].text for v in exs[0].variables], Stance.PRO,
                   S.FROM_CONSEQUENCE)
    if rec.template_tokens:
        assert rec.phase2_context == rec.template_tokens + [ARGUMENT]
    assert len(rec.argument_tokens) <= 12 and not repeated_trigram(rec.argument_tokens)
    assert GenerationRecord.from_record(rec.to_record()) == rec
    with pytest.raises(ModelStateError):
        generate(None, "t", ["x"], Stance.PRO, S.FROM_CONSEQUENCE)


def test_empty_template_is_an_error(ctl):
    exs, kb = ctl
    model = new_generator(generator_vocab(exs, kb), tiny_config())
    with torch.no_grad():
        model.lm_head.bias[model.vocab.id(ARGUMENT)] = 100.0
    enc = build_encoder_input("t", ["a"])
    with pytest.raises(TemplateError):
        decode_dual(model, enc, build_control_prefix("dual", Stance.PRO, S.FROM_CONSEQUENCE))


def test_dual_training_needs_spans(ctl):
    exs, kb = ctl
    bare = [ex.replace(spans=SpanLabeling()) for ex in exs[:4]]
    with pytest.raises(TemplateError):
        train_generator(bare, kb, tiny_config(max_steps=1))
    others = [ex.replace(schemes=frozenset({S.OTHERS})) for ex in exs[:4]]
    with pytest.raises(ValueError):
        train_generator(others, kb, tiny_config(max_steps=1))


def test_short_training_and_round_trip(ctl, tmp_path):
    exs, kb = ctl
    cfg = tiny_config(hidden=16, learning_rate=1e-3, batch_size=8, max_steps=10, max_length=10, beam_width=2)
    model, log = train_generator(exs[:8], kb, cfg)
    assert all(s["clipped_norm"] <= 1.0 + 1e-6 for s in log.steps)
    save_generator(model, tmp_path / "g.safetensors")
    back = load_generator(tmp_path / "g.safetensors")
    args = ("death penalty", [kb[v].text for v in exs[0].variables], Stance.CON, CONTROL_SCHEMES[1])
    assert generate(model, *args) == generate(back, *args)


def test_stance_variant_needs_no_scheme(ctl):
    exs, kb = ctl
    model = new_generator(generator_vocab(exs, kb), tiny_config(variant="stance", max_length=6))
    rec = generate(model, "t", ["a b"], Stance.PRO, None)
    assert rec.control_codes == ["<pro>", ARGUMENT] and rec.template is None


def test_argument_only_corpus():
    # a bare argument string with a single grounded span still yields a template
    arg = tokenize("Executions deter crime")
    from factarg.corpus import AnnotatedExample, FactVariable, KnowledgeBase
    kb = KnowledgeBase([FactVariable("v", "crime", "t")])
    ex = AnnotatedExample("x", "t", arg, Stance.PRO, frozenset({S.FROM_CONSEQUENCE}),
                          spans=SpanLabeling((Span(2, 3, "v"),)), variables=("v",))
    enc = build_encoder_input("t", ["crime"])
    assert template_from_example(ex, enc, kb) == ["executions", "deter", "<VAR_0>"]
