"""Automatic metrics for generated arguments: BLEU, Rouge-L, fact
faithfulness and NLI entail/contradict rates."""

from __future__ import annotations

import json
import math
import re
from collections import Counter
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Protocol, Sequence

from .normalize import EmbeddingProvider, embed_all

BLEU_EPSILON = 1e-9
NLI_LABELS = ("entail", "contradict", "neutral")


def _toks(x: str | Sequence[str]) -> list[str]:
    return x.split() if isinstance(x, str) else list(x)


def ngrams(tokens: Sequence[str], n: int) -> Counter:
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def corpus_bleu(candidates: Sequence, references: Sequence, max_order: int = 4,
                epsilon: float = BLEU_EPSILON) -> float:
    """Corpus-level BLEU with one reference per candidate.

    Clipped n-gram counts are pooled over the corpus.  A bucket with candidate
    n-grams but no matches gets ``epsilon`` matches; orders for which no
    candidate is long enough are left out of the geometric mean.  A corpus
    without a single matching unigram scores 0.
    """
    if len(candidates) != len(references):
        raise ValueError(f"{len(candidates)} candidates vs {len(references)} references")
    if not candidates:
        raise ValueError("empty corpus")
    matches = [0] * max_order
    totals = [0] * max_order
    cand_len = ref_len = 0
    for c, r in zip(candidates, references):
        c, r = _toks(c), _toks(r)
        cand_len += len(c)
        ref_len += len(r)
        for n in range(1, max_order + 1):
            cn, rn = ngrams(c, n), ngrams(r, n)
            matches[n - 1] += sum(min(k, rn[g]) for g, k in cn.items())
            totals[n - 1] += sum(cn.values())
    if matches[0] == 0:
        return 0.0
    logs = [math.log((m or epsilon) / t) for m, t in zip(matches, totals) if t > 0]
    bp = 1.0 if cand_len > ref_len else math.exp(1 - ref_len / cand_len)
    return bp * math.exp(sum(logs) / len(logs))


def lcs_length(a: Sequence, b: Sequence) -> int:
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b):
            cur.append(prev[j] + 1 if x == y else max(prev[j + 1], cur[j]))
        prev = cur
    return prev[-1]


def rouge_l(candidate, reference) -> float:
    c, r = _toks(candidate), _toks(reference)
    if not c or not r:
        raise ValueError("Rouge-L needs non-empty candidate and reference")
    lcs = lcs_length(c, r)
    if lcs == 0:
        return 0.0
    p, rec = lcs / len(c), lcs / len(r)
    return 2 * p * rec / (p + rec)


def fact_faithfulness(variables: Sequence[str], generated: str, provider: EmbeddingProvider) -> float:
    """Mean cosine between each input variable and the generated text."""
    if not variables:
        raise ValueError("need at least one variable")
    if not generated.strip():
        raise ValueError("generated text is empty")
    vecs = embed_all([*variables, generated], provider)
    g = vecs[-1]
    return math.fsum(float(v @ g) for v in vecs[:-1]) / len(variables)


class NliProvider(Protocol):
    threshold: float

    def judge(self, premise: str, hypothesis: str) -> tuple[float, float, float]:
        """Probabilities for (entail, contradict, neutral)."""


_NEGATIONS = frozenset({"not", "no", "never", "n't", "cannot", "without", "nor"})
DEFAULT_ANTONYMS = (
    ("favourable", "unfavourable"), ("good", "bad"), ("increase", "decrease"), ("increases", "decreases"),
    ("raise", "lower"), ("raises", "lowers"), ("support", "oppose"), ("supports", "opposes"),
    ("benefit", "harm"), ("benefits", "harms"), ("safe", "dangerous"), ("more", "less"),
    ("follows", "suffers"), ("right", "wrong"), ("justified", "unjustified"),
)


@dataclass
class RuleNli:
    """Deterministic lexical stand-in for an NLI model.

    Scores overlap between premise and hypothesis, then reads a polarity
    mismatch (odd number of negations or antonym swaps) as contradiction.
    """

    threshold: float = 0.8
    antonyms: Sequence[tuple[str, str]] = DEFAULT_ANTONYMS

    def _words(self, text: str) -> list[str]:
        return re.findall(r"n't|\w+", text.lower())

    def judge(self, premise: str, hypothesis: str) -> tuple[float, float, float]:
        p, h = self._words(premise), self._words(hypothesis)
        pc = [w for w in p if w not in _NEGATIONS]
        hc = [w for w in h if w not in _NEGATIONS]
        flips = (sum(w in _NEGATIONS for w in p) + sum(w in _NEGATIONS for w in h)) % 2
        ps, hs = set(pc), set(hc)
        for a, b in self.antonyms:
            if (a in ps and b in hs and b not in ps) or (b in ps and a in hs and a not in ps):
                flips ^= 1
        if not hc:
            return (0.0, 0.0, 1.0)
        # antonym swaps share no token, so count them as overlapping for coverage
        pairs = {a: b for a, b in self.antonyms} | {b: a for a, b in self.antonyms}
        covered = sum(w in ps or pairs.get(w) in ps for w in hc) / len(hc)
        support = covered ** 2
        if flips:
            return (0.0, support, 1.0 - support)
        return (support, 0.0, 1.0 - support)


def entail_contra(original: str, generated: str, nli: NliProvider) -> dict:
    probs = nli.judge(original, generated)
    if abs(sum(probs) - 1.0) > 1e-6:
        raise ValueError(f"NLI probabilities {probs} do not sum to 1")
    return {"entails": probs[0] >= nli.threshold, "contradicts": probs[1] >= nli.threshold,
            "probs": dict(zip(NLI_LABELS, map(float, probs)))}


@dataclass
class EvalReport:
    bleu: float
    rouge_l: float
    fact: float
    entail_rate: float
    contra_rate: float
    n: int
    rows: list[dict] = field(default_factory=list)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "EvalReport":
        return cls(**json.loads(text))

    def table(self, name: str = "model") -> str:
        head = f"{'Model':<12}{'BLEU':>8}{'RougeL':>8}{'Fact':>8}{'Entail':>8}{'Contra':>8}"
        row = (f"{name:<12}{self.bleu:>8.3f}{self.rouge_l:>8.3f}{self.fact:>8.3f}"
               f"{self.entail_rate:>8.3f}{self.contra_rate:>8.3f}")
        return f"{head}\n{row}\n"

    def write(self, directory: str | Path, name: str = "model") -> None:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        (d / "report.json").write_text(self.to_json())
        (d / "report.txt").write_text(self.table(name))


def evaluate(generated: Sequence[str], references: Sequence[str], variables: Sequence[Sequence[str]],
             provider: EmbeddingProvider, nli: NliProvider | None = None,
             ids: Sequence[str] | None = None) -> EvalReport:
    """Score generated arguments against the original arguments they were produced for."""
    if not (len(generated) == len(references) == len(variables)):
        raise ValueError("generated, references and variables must align")
    if not generated:
        raise ValueError("nothing to evaluate")
    nli = nli or RuleNli()
    ids = list(ids) if ids is not None else [str(i) for i in range(len(generated))]
    rows = []
    for i, g, r, v in zip(ids, generated, references, variables):
        # an empty generation scores zero rather than aborting the whole report
        fact = fact_faithfulness(v, g, provider) if any(ch.isalnum() for ch in g) else 0.0
        rl = rouge_l(g, r) if g.strip() else 0.0
        ec = entail_contra(r, g, nli)
        rows.append({"id": i, "generated": g, "reference": r, "rouge_l": rl, "fact": fact,
                     "entails": ec["entails"], "contradicts": ec["contradicts"]})
    n = len(rows)
    return EvalReport(
        bleu=corpus_bleu(list(generated), list(references)),
        rouge_l=math.fsum(r["rouge_l"] for r in rows) / n,
        fact=math.fsum(r["fact"] for r in rows) / n,
        entail_rate=sum(r["entails"] for r in rows) / n,
        contra_rate=sum(r["contradicts"] for r in rows) / n,
        n=n,
        rows=rows,
    )
