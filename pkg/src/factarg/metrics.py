"""Span detection, grounding and multi-label scheme metrics."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Sequence

from .corpus import SCHEMES, ArgumentScheme, BioTag, Span, SpanLabeling, encode_bio

MODES = ("partial", "full", "overall")


def f1_from_counts(tp: float, n_pred: float, n_gold: float) -> float:
    if n_pred == 0 and n_gold == 0:
        return 1.0
    p = tp / n_pred if n_pred else 0.0
    r = tp / n_gold if n_gold else 0.0
    return 0.0 if p + r == 0 else 2 * p * r / (p + r)


def _qualifies(p: Span, g: Span, overlap: int, mode: str) -> bool:
    if mode == "partial":
        return overlap * 2 >= (p.end - p.start)
    # full: every token of the prediction and of the gold span coincide
    return p.start == g.start and p.end == g.end


def match_spans(pred: SpanLabeling, gold: SpanLabeling, mode: str = "partial") -> list[tuple[int, int]]:
    """Greedy one-to-one matching, largest overlap first.

    Only pairs meeting the mode's overlap criterion are eligible.  Returns
    (pred index, gold index) pairs.
    """
    if mode not in ("partial", "full"):
        raise ValueError(f"span matching mode must be partial or full, got {mode!r}")
    cands = []
    for i, p in enumerate(pred.spans):
        for j, g in enumerate(gold.spans):
            ov = min(p.end, g.end) - max(p.start, g.start)
            if ov > 0 and _qualifies(p, g, ov, mode):
                cands.append((-ov, i, j))
    cands.sort()
    used_p, used_g, pairs = set(), set(), []
    for _, i, j in cands:
        if i in used_p or j in used_g:
            continue
        used_p.add(i)
        used_g.add(j)
        pairs.append((i, j))
    return sorted(pairs)


@dataclass(frozen=True)
class SpanCounts:
    tp: int
    n_pred: int
    n_gold: int

    def __add__(self, other: "SpanCounts") -> "SpanCounts":
        return SpanCounts(self.tp + other.tp, self.n_pred + other.n_pred, self.n_gold + other.n_gold)

    @property
    def f1(self) -> float:
        return f1_from_counts(self.tp, self.n_pred, self.n_gold)


def span_counts(pred: SpanLabeling, gold: SpanLabeling, mode: str, token_count: int) -> SpanCounts:
    if mode == "overall":
        pt = encode_bio(pred, token_count)
        gt = encode_bio(gold, token_count)
        tp = sum(1 for a, b in zip(pt, gt) if a == b and b != BioTag.O)
        return SpanCounts(tp, sum(t != BioTag.O for t in pt), sum(t != BioTag.O for t in gt))
    return SpanCounts(len(match_spans(pred, gold, mode)), len(pred), len(gold))


def span_f1(pred: SpanLabeling, gold: SpanLabeling, mode: str = "partial",
            token_count: int | tuple[int, int] | None = None) -> float:
    """Span F1 in one of three modes.

    ``partial``: a prediction counts if at least half its tokens fall in its
    matched gold span. ``full``: boundaries must coincide. ``overall``:
    token-level F1 over non-O BIO labels.  ``token_count`` may be given as a
    (pred, gold) pair, which must agree.
    """
    if isinstance(token_count, tuple):
        if token_count[0] != token_count[1]:
            raise ValueError(f"token count mismatch: pred {token_count[0]} vs gold {token_count[1]}")
        token_count = token_count[0]
    if mode not in MODES:
        raise ValueError(f"unknown span F1 mode {mode!r}")
    if token_count is None:
        token_count = max([s.end for s in (*pred.spans, *gold.spans)], default=0)
    pred.check_range(token_count)
    gold.check_range(token_count)
    return span_counts(pred, gold, mode, token_count).f1


def corpus_span_f1(preds: Sequence[SpanLabeling], golds: Sequence[SpanLabeling],
                   token_counts: Sequence[int], mode: str) -> float:
    """Micro-averaged span F1 over a corpus."""
    if not (len(preds) == len(golds) == len(token_counts)):
        raise ValueError("predictions, golds and token counts differ in length")
    total = SpanCounts(0, 0, 0)
    for p, g, n in zip(preds, golds, token_counts):
        p.check_range(n)
        g.check_range(n)
        total = total + span_counts(p, g, mode, n)
    return total.f1


def grounding_counts(pred: SpanLabeling, gold: SpanLabeling) -> tuple[int, int]:
    """(agreeing, matched) over partially matched span pairs."""
    pairs = match_spans(pred, gold, "partial")
    agree = sum(pred.spans[i].grounding == gold.spans[j].grounding for i, j in pairs)
    return agree, len(pairs)


def grounding_accuracy(pred: SpanLabeling, gold: SpanLabeling) -> float:
    agree, matched = grounding_counts(pred, gold)
    return agree / matched if matched else 0.0


def corpus_grounding_accuracy(preds: Iterable[SpanLabeling], golds: Iterable[SpanLabeling]) -> float:
    agree = matched = 0
    for p, g in zip(preds, golds):
        a, m = grounding_counts(p, g)
        agree += a
        matched += m
    return agree / matched if matched else 0.0


def scheme_f1(preds: Sequence[Iterable[ArgumentScheme]], golds: Sequence[Iterable[ArgumentScheme]]) -> dict[str, float]:
    """Per-scheme F1 over binary decisions plus micro-averaged ``overall``.

    A label never predicted and never gold scores 1.0.
    """
    if len(preds) != len(golds):
        raise ValueError(f"{len(preds)} predictions vs {len(golds)} golds")
    out = {}
    tot = [0, 0, 0]
    for s in SCHEMES:
        tp = fp = fn = 0
        for p, g in zip(preds, golds):
            inp, ing = s in set(p), s in set(g)
            tp += inp and ing
            fp += inp and not ing
            fn += ing and not inp
        out[s.snake] = f1_from_counts(tp, tp + fp, tp + fn)
        tot[0] += tp
        tot[1] += tp + fp
        tot[2] += tp + fn
    out["overall"] = f1_from_counts(*tot)
    return out


def subset_accuracy(preds: Sequence[Iterable[ArgumentScheme]], golds: Sequence[Iterable[ArgumentScheme]]) -> float:
    if len(preds) != len(golds):
        raise ValueError(f"{len(preds)} predictions vs {len(golds)} golds")
    if not preds:
        return 0.0
    return sum(set(p) == set(g) for p, g in zip(preds, golds)) / len(preds)
