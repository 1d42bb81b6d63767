import random

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import random_labeling
from factarg.corpus import SCHEMES, ArgumentScheme, Span, SpanLabeling
from factarg.metrics import (corpus_grounding_accuracy, corpus_span_f1, f1_from_counts, grounding_accuracy,
                             match_spans, scheme_f1, span_f1, subset_accuracy)
from oracles import grounding_accuracy_oracle, scheme_f1_oracle, span_f1_oracle


def triples(lab):
    return [(s.start, s.end, s.grounding) for s in lab]


def test_identity_scores_one():
    lab = SpanLabeling.of((0, 2, "a"), (4, 7, "b"))
    for mode in ("partial", "full", "overall"):
        assert span_f1(lab, lab, mode, 8) == 1.0


def test_partial_versus_full_example():
    # predicted tokens 3..8, gold 5..10: overlap 4 of 6 predicted tokens
    pred, gold = SpanLabeling.of((3, 9)), SpanLabeling.of((5, 11))
    assert match_spans(pred, gold, "partial") == [(0, 0)]
    assert span_f1(pred, gold, "partial", 12) == 1.0
    assert span_f1(pred, gold, "full", 12) == 0.0


def test_half_overlap_boundary():
    # exactly half of the prediction overlaps -> counts
    assert span_f1(SpanLabeling.of((0, 4)), SpanLabeling.of((2, 6)), "partial", 6) == 1.0
    assert span_f1(SpanLabeling.of((0, 5)), SpanLabeling.of((3, 6)), "partial", 6) == 0.0


def test_empty_prediction():
    assert span_f1(SpanLabeling(), SpanLabeling.of((0, 2)), "partial", 3) == 0.0
    assert span_f1(SpanLabeling(), SpanLabeling(), "full", 3) == 1.0
    assert f1_from_counts(0, 0, 0) == 1.0


def test_token_count_mismatch():
    with pytest.raises(ValueError):
        span_f1(SpanLabeling(), SpanLabeling(), "overall", (4, 5))
    with pytest.raises(ValueError):
        span_f1(SpanLabeling(), SpanLabeling(), "fuzzy", 3)


def test_each_gold_used_once():
    pred = SpanLabeling.of((0, 2), (2, 4))
    gold = SpanLabeling.of((0, 4))
    assert len(match_spans(pred, gold, "partial")) == 1
    assert span_f1(pred, gold, "partial", 4) == pytest.approx(2 * 0.5 * 1 / 1.5)


def test_grounding_accuracy_examples():
    gold = SpanLabeling.of((0, 2, "a"), (3, 5, "b"))
    assert grounding_accuracy(gold, gold) == 1.0
    assert grounding_accuracy(SpanLabeling.of((0, 2, "a"), (3, 5, "c")), gold) == 0.5
    assert grounding_accuracy(SpanLabeling(), gold) == 0.0


@pytest.mark.parametrize("mode", ["partial", "full", "overall"])
def test_span_f1_matches_oracle(mode):
    rng = random.Random(7)
    for _ in range(300):
        n = rng.randint(1, 12)
        p = random_labeling(rng, n, ("a", "b"))
        g = random_labeling(rng, n, ("a", "b"))
        assert abs(span_f1(p, g, mode, n) - span_f1_oracle(triples(p), triples(g), mode, n)) < 1e-12


def test_grounding_accuracy_matches_oracle():
    rng = random.Random(8)
    preds, golds = [], []
    for _ in range(300):
        n = rng.randint(1, 12)
        p = random_labeling(rng, n, ("a", "b", "c"))
        g = random_labeling(rng, n, ("a", "b", "c"))
        preds.append(p)
        golds.append(g)
        assert abs(grounding_accuracy(p, g) - grounding_accuracy_oracle(triples(p), triples(g))) < 1e-12
    assert 0.0 <= corpus_grounding_accuracy(preds, golds) <= 1.0


def test_corpus_span_f1_micro():
    preds = [SpanLabeling.of((0, 2)), SpanLabeling()]
    golds = [SpanLabeling.of((0, 2)), SpanLabeling.of((1, 3))]
    assert corpus_span_f1(preds, golds, [4, 4], "full") == pytest.approx(f1_from_counts(1, 1, 2))


def test_scheme_f1_examples():
    golds = [{ArgumentScheme.FROM_CONSEQUENCE}, {ArgumentScheme.OTHERS, ArgumentScheme.RULE_OR_PRINCIPLE}]
    perfect = scheme_f1(golds, golds)
    assert all(v == 1.0 for v in perfect.values())
    assert scheme_f1([set(), set()], golds)["overall"] == 0.0
    with pytest.raises(ValueError):
        scheme_f1([set()], golds)
    assert subset_accuracy(golds, [golds[0], set()]) == 0.5


def test_scheme_f1_matches_recount():
    rng = random.Random(9)
    for _ in range(200):
        k = rng.randint(1, 6)
        preds = [set(rng.sample(SCHEMES, rng.randint(0, 3))) for _ in range(k)]
        golds = [set(rng.sample(SCHEMES, rng.randint(0, 3))) for _ in range(k)]
        got = scheme_f1(preds, golds)
        ref = scheme_f1_oracle([{s.snake for s in p} for p in preds], [{s.snake for s in g} for g in golds],
                               [s.snake for s in SCHEMES])
        assert got.keys() == ref.keys()
        for key in got:
            assert abs(got[key] - ref[key]) < 1e-12


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 10_000))
def test_span_f1_symmetric_under_span_order(seed):
    rng = random.Random(seed)
    n = rng.randint(1, 10)
    p = random_labeling(rng, n, ("a",))
    g = random_labeling(rng, n, ("a",))
    shuffled = list(p.spans)
    rng.shuffle(shuffled)
    for mode in ("partial", "full", "overall"):
        assert span_f1(SpanLabeling(tuple(shuffled)), g, mode, n) == span_f1(p, g, mode, n)
    # full-mode F1 is 1 exactly when the labelings coincide
    assert (span_f1(p, g, "full", n) == 1.0) == (p.erase_groundings() == g.erase_groundings())


def test_overall_counts_tags():
    pred = SpanLabeling((Span(0, 3),))
    gold = SpanLabeling((Span(1, 3),))
    # pred B I I, gold O B I: only the last token agrees
    assert span_f1(pred, gold, "overall", 3) == pytest.approx(f1_from_counts(1, 3, 2))
