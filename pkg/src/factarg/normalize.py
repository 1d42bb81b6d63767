"""Corpus expansion: scheme-probability filter, fact normalisation, quality filters, KB expansion.

Order of application is fixed: probability filter, then normalisation
(direct mapping, clustering, indirect mapping), then the per-example quality
rules, with unmapped spans of examples that clear the unnormalised-fraction
rule added to the KB as new variables.
"""

from __future__ import annotations

import hashlib
import re
from collections import Counter
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Protocol, Sequence

import numpy as np
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import connected_components

from .corpus import (OTHERS, SCHEMES, AnnotatedExample, ArgumentScheme, FactVariable, KnowledgeBase, Span,
                     SpanLabeling, tokenize)

# -- embedding providers -------------------------------------------------


class EmbeddingProvider(Protocol):
    name: str
    width: int

    def embed(self, text: str) -> np.ndarray: ...


def _unit(v: np.ndarray, text: str) -> np.ndarray:
    n = np.linalg.norm(v)
    if n == 0:
        raise ValueError(f"cannot embed {text!r}: no features")
    # leave already-unit vectors bit-exact so hand-built cosines stay exact
    return v if abs(n - 1.0) < 1e-12 else v / n


class HashingEmbedding:
    """Feature-hashed bag of lower-cased reference tokens, L2-normalised."""

    def __init__(self, width: int = 256):
        self.width = width
        self.name = f"hashing-bow-{width}"

    def bucket(self, token: str) -> int:
        digest = hashlib.blake2b(token.encode("utf-8"), digest_size=8).digest()
        return int.from_bytes(digest, "big") % self.width

    def embed(self, text: str) -> np.ndarray:
        v = np.zeros(self.width)
        for tok in tokenize(text).tokens:
            if any(ch.isalnum() for ch in tok):
                v[self.bucket(tok.lower())] += 1.0
        return _unit(v, text)


class LookupEmbedding:
    """Fixed text -> vector table; unknown texts raise KeyError."""

    def __init__(self, table: Mapping[str, Sequence[float]], name: str = "lookup"):
        self.table = {k: _unit(np.asarray(v, dtype=float), k) for k, v in table.items()}
        self.width = len(next(iter(self.table.values())))
        self.name = name

    def embed(self, text: str) -> np.ndarray:
        return self.table[text]


class SentenceTransformerEmbedding:  # pragma: no cover - needs downloaded weights
    def __init__(self, model_name: str = "all-MiniLM-L6-v2"):
        from sentence_transformers import SentenceTransformer

        self.model = SentenceTransformer(model_name)
        self.name = model_name
        self.width = self.model.get_sentence_embedding_dimension()

    def embed(self, text: str) -> np.ndarray:
        return _unit(np.asarray(self.model.encode(text), dtype=float), text)


def embed_all(texts: Sequence[str], provider: EmbeddingProvider) -> np.ndarray:
    cache: dict[str, np.ndarray] = {}
    rows = []
    for t in texts:
        if t not in cache:
            cache[t] = provider.embed(t)
        rows.append(cache[t])
    return np.vstack(rows) if rows else np.zeros((0, provider.width))


# -- mapping ------------------------------------------------------------


@dataclass
class FilterConfig:
    direct_threshold: float = 0.85
    scheme_prob_factor: float = 0.20
    max_unnormalized_fraction: float = 0.30
    max_words: int = 150
    variables_per_example: tuple[int, int] = (1, 4)
    occurrences_per_variable: tuple[int, int] = (2, 4)
    community_threshold: float = 0.75
    min_community_size: int = 2

    def __post_init__(self):
        self.variables_per_example = tuple(self.variables_per_example)
        self.occurrences_per_variable = tuple(self.occurrences_per_variable)
        for name in ("direct_threshold", "scheme_prob_factor", "max_unnormalized_fraction", "community_threshold"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must be in [0, 1]")
        for name in ("variables_per_example", "occurrences_per_variable"):
            lo, hi = getattr(self, name)
            if not 0 <= lo <= hi:
                raise ValueError(f"{name} must be an ordered (low, high) pair")
        if self.max_words < 1 or self.min_community_size < 1:
            raise ValueError("max_words and min_community_size must be positive")


def has_content(text: str) -> bool:
    return any(ch.isalnum() for ch in text)


def direct_map(span_text: str, kb: KnowledgeBase, provider: EmbeddingProvider,
               threshold: float = 0.85, kb_matrix: tuple[list[str], np.ndarray] | None = None):
    """(variable id, cosine) of the most similar KB variable, or None below ``threshold``.

    Ties go to the lexicographically smallest id.
    """
    if not span_text.strip():
        raise ValueError("empty span text")
    if len(kb) == 0:
        raise ValueError("knowledge base is empty")
    ids, mat = kb_matrix if kb_matrix is not None else kb_embeddings(kb, provider)
    sims = mat @ provider.embed(span_text)
    best = None
    for i in sorted(range(len(ids)), key=ids.__getitem__):
        if best is None or sims[i] > sims[best]:
            best = i
    if sims[best] >= threshold:
        return ids[best], float(sims[best])
    return None


def kb_embeddings(kb: KnowledgeBase, provider: EmbeddingProvider) -> tuple[list[str], np.ndarray]:
    ids = kb.ids
    return ids, embed_all([kb[i].text for i in ids], provider)


def cluster_spans(span_texts: Sequence[str], provider: EmbeddingProvider | None = None, threshold: float = 0.75,
                  min_size: int = 2, embeddings: np.ndarray | None = None) -> list[list[int]]:
    """Connected components of the cosine >= ``threshold`` graph.

    Components smaller than ``min_size`` are split into singletons.  Clusters
    are lists of indices into ``span_texts``, ordered by first member.
    """
    n = len(span_texts)
    if n == 0:
        return []
    emb = embeddings if embeddings is not None else embed_all(span_texts, provider)
    adj = csr_matrix(emb @ emb.T >= threshold)
    _, labels = connected_components(adj, directed=False)
    groups: dict[int, list[int]] = {}
    for i, lab in enumerate(labels):
        groups.setdefault(int(lab), []).append(i)
    clusters = []
    for members in groups.values():
        if len(members) >= min_size:
            clusters.append(members)
        else:
            clusters.extend([m] for m in members)
    return sorted(clusters, key=lambda c: c[0])


def indirect_map(span: int, clusters: Sequence[Sequence[int]], direct_results: Mapping[int, str],
                 embeddings: np.ndarray) -> tuple[str, int] | None:
    """Inherit the variable of the most similar directly-mapped member of the span's cluster.

    Returns (variable id, neighbour index) or None.
    """
    home = next((c for c in clusters if span in c), None)
    if home is None:
        raise KeyError(f"span {span} is not in any cluster")
    mapped = [m for m in home if m != span and m in direct_results]
    if not mapped:
        return None
    sims = embeddings[mapped] @ embeddings[span]
    best = max(range(len(mapped)), key=lambda i: (sims[i], -mapped[i]))
    return direct_results[mapped[best]], mapped[best]


@dataclass(frozen=True)
class SpanOutcome:
    example_id: str
    span_index: int
    text: str
    kind: str  # direct | indirect | unmapped | preset
    variable: str | None = None
    similarity: float | None = None
    via: str | None = None  # "<example id>#<span index>" of the neighbour for indirect outcomes

    def to_record(self) -> dict:
        return {k: v for k, v in self.__dict__.items()}


@dataclass
class NormalizationResult:
    examples: list[AnnotatedExample]
    outcomes: list[SpanOutcome]
    kb: KnowledgeBase

    def outcomes_for(self, example_id: str) -> list[SpanOutcome]:
        return [o for o in self.outcomes if o.example_id == example_id]


def normalize(examples: Sequence[AnnotatedExample], kb: KnowledgeBase, provider: EmbeddingProvider,
              config: FilterConfig = FilterConfig()) -> NormalizationResult:
    """Ground OTHERS spans to the KB directly or through their cluster.

    Spans already grounded to a KB variable are kept as ``preset``; spans left
    unmapped keep the OTHERS grounding.
    """
    kb_mat = kb_embeddings(kb, provider)
    refs: list[tuple[int, int]] = []
    texts: list[str] = []
    outcomes: dict[tuple[int, int], SpanOutcome] = {}
    for e, ex in enumerate(examples):
        for s, span in enumerate(ex.spans):
            text = ex.span_text(span)
            if span.grounding != OTHERS and span.grounding in kb:
                outcomes[e, s] = SpanOutcome(ex.id, s, text, "preset", span.grounding)
            elif not has_content(text):
                # punctuation-only spans cannot be embedded; they count as unmapped
                outcomes[e, s] = SpanOutcome(ex.id, s, text, "unmapped")
            else:
                refs.append((e, s))
                texts.append(text)
    emb = embed_all(texts, provider)
    direct: dict[int, str] = {}
    for i, text in enumerate(texts):
        hit = direct_map(text, kb, provider, config.direct_threshold, kb_mat)
        e, s = refs[i]
        if hit is not None:
            direct[i] = hit[0]
            outcomes[e, s] = SpanOutcome(examples[e].id, s, text, "direct", hit[0], hit[1])
    clusters = cluster_spans(texts, threshold=config.community_threshold, min_size=config.min_community_size,
                             embeddings=emb)
    for i, text in enumerate(texts):
        if i in direct:
            continue
        e, s = refs[i]
        hit = indirect_map(i, clusters, direct, emb)
        if hit is None:
            outcomes[e, s] = SpanOutcome(examples[e].id, s, text, "unmapped")
        else:
            ne, ns = refs[hit[1]]
            sim = float(emb[i] @ emb[hit[1]])
            outcomes[e, s] = SpanOutcome(examples[e].id, s, text, "indirect", hit[0], sim,
                                         f"{examples[ne].id}#{ns}")
    updated = []
    for e, ex in enumerate(examples):
        spans = []
        for s, span in enumerate(ex.spans):
            o = outcomes[e, s]
            spans.append(Span(span.start, span.end, o.variable if o.variable else OTHERS))
        updated.append(ex.replace(spans=SpanLabeling(tuple(spans)), variables=_ordered_groundings(spans)))
    ordered = [outcomes[k] for k in sorted(outcomes)]
    return NormalizationResult(updated, ordered, kb)


def _ordered_groundings(spans: Iterable[Span]) -> tuple[str, ...]:
    seen: dict[str, None] = {}
    for s in spans:
        if s.grounding != OTHERS:
            seen.setdefault(s.grounding, None)
    return tuple(seen)


# -- filters ------------------------------------------------------------


def scheme_means(examples: Sequence[AnnotatedExample]) -> dict[ArgumentScheme, float]:
    if not examples:
        return {s: 0.0 for s in SCHEMES}
    for ex in examples:
        if ex.scheme_probs is None:
            raise ValueError(f"example {ex.id!r} has no scheme probabilities")
    return {s: sum(ex.scheme_probs.get(s, 0.0) for ex in examples) / len(examples) for s in SCHEMES}


def scheme_probability_filter(examples: Sequence[AnnotatedExample],
                              scheme_prob_factor: float = 0.20) -> list[AnnotatedExample]:
    """Keep examples whose top scheme is not Others and whose probability for it
    is at least ``scheme_prob_factor`` times that scheme's corpus mean."""
    means = scheme_means(examples)
    kept = []
    for ex in examples:
        top = ex.top_scheme()
        if top is ArgumentScheme.OTHERS:
            continue
        if ex.scheme_probs[top] >= scheme_prob_factor * means[top]:
            kept.append(ex)
    return kept


_MODALS = r"should|must|ought|shall|need|needs|cannot|can't|mustn't|shouldn't"
_EVALUATIVE = (r"favourable|favorable|unfavourable|unfavorable|good|bad|wrong|right|necessary|unnecessary|"
               r"important|harmful|beneficial|unacceptable|acceptable|effective|ineffective|essential|dangerous|"
               r"unfair|fair|unjust|just|consistent|inconsistent|immoral|moral|a violation|the answer|the solution|"
               r"a step|an important step|better|worse|vital|crucial")
_STANCE_VERBS = (r"supports?|undermines?|improves?|harms?|reduces?|increases?|prevents?|causes?|violates?|"
                 r"protects?|threatens?|benefits?|helps?|hurts?|shown|proven|proved|demonstrates?|argues?|argued|"
                 r"believes?|says?|claims?|leads? to|requires?|forbids?|demands?|deters?")

DEFAULT_CLAIM_RULES: tuple[str, ...] = (
    rf"\b(?:{_MODALS})\b",
    rf"\b(?:is|are|was|were|be|been|isn't|aren't)\s+(?:not\s+|never\s+|very\s+|more\s+|less\s+)?(?:{_EVALUATIVE})\b",
    rf"\b(?:{_STANCE_VERBS})\b",
)


class RuleClaimDetector:
    """Flags a text as containing a claim when any sentence matches a stance-bearing pattern."""

    def __init__(self, rules: Sequence[str] = DEFAULT_CLAIM_RULES):
        self.rules = [re.compile(r, re.IGNORECASE) for r in rules]

    def __call__(self, text: str) -> bool:
        for sentence in re.split(r"(?<=[.!?])\s+", text):
            if any(r.search(sentence) for r in self.rules):
                return True
        return False


ClaimDetector = Callable[[str], bool]


def claim_present(text: str, detector: ClaimDetector | None = None) -> bool:
    if not text.strip():
        return False
    return bool((detector or RuleClaimDetector())(text))


REASONS = ("unnormalized-fraction", "length", "variable-count", "variable-occurrence", "no-claim")


def unnormalized_fraction(outcomes: Sequence[SpanOutcome]) -> float:
    if not outcomes:
        return 0.0
    return sum(o.kind == "unmapped" for o in outcomes) / len(outcomes)


def quality_filter(example: AnnotatedExample, config: FilterConfig, outcomes: Sequence[SpanOutcome],
                   claim_detector: ClaimDetector | None = None) -> tuple[bool, tuple[str, ...]]:
    """(keep, failing reasons).  Variables are counted over the example's grounded
    spans; call after unmapped spans were regrounded to expanded KB entries."""
    reasons = []
    if unnormalized_fraction(outcomes) > config.max_unnormalized_fraction:
        reasons.append("unnormalized-fraction")
    words = sum(1 for t in example.argument.tokens if any(ch.isalnum() for ch in t))
    if words > config.max_words:
        reasons.append("length")
    counts = Counter(s.grounding for s in example.spans if s.grounding != OTHERS)
    lo, hi = config.variables_per_example
    if not lo <= len(counts) <= hi:
        reasons.append("variable-count")
    lo, hi = config.occurrences_per_variable
    if any(not lo <= c <= hi for c in counts.values()):
        reasons.append("variable-occurrence")
    if not claim_present(example.text, claim_detector):
        reasons.append("no-claim")
    return not reasons, tuple(reasons)


def expand_kb(kb: KnowledgeBase, spans: Iterable[tuple[str, str]], prefix: str = "exp") -> tuple[KnowledgeBase,
                                                                                              dict[str, str]]:
    """Add (text, topic) pairs as ``expanded`` variables with fresh ids.

    Texts already in the KB or repeated are added once.  Returns the new KB
    and a text -> variable id map covering every input text.
    """
    mapping: dict[str, str] = {}
    new = []
    taken = set(kb.ids)
    counter = 0
    for text, topic in spans:
        if text in mapping:
            continue
        existing = kb.find_text(text)
        if existing is not None:
            mapping[text] = existing.id
            continue
        while f"{prefix}_{counter:05d}" in taken:
            counter += 1
        vid = f"{prefix}_{counter:05d}"
        taken.add(vid)
        new.append(FactVariable(vid, text, topic, "expanded"))
        mapping[text] = vid
    return kb.with_variables(new), mapping


@dataclass
class PostprocessResult:
    kept: list[AnnotatedExample]
    kb: KnowledgeBase
    outcomes: list[SpanOutcome]
    decisions: dict[str, tuple[str, ...]] = field(default_factory=dict)  # example id -> failing reasons
    scheme_dropped: list[str] = field(default_factory=list)

    def reason_counts(self) -> dict[str, int]:
        c = Counter(r for rs in self.decisions.values() for r in rs)
        return {r: c.get(r, 0) for r in REASONS}


def apply_quality_filters(normalized: NormalizationResult, config: FilterConfig,
                          claim_detector: ClaimDetector | None = None) -> PostprocessResult:
    """Expand the KB from examples that clear the unnormalised-fraction rule, then run every rule."""
    by_example: dict[str, list[SpanOutcome]] = {}
    for o in normalized.outcomes:
        by_example.setdefault(o.example_id, []).append(o)
    to_add = []
    for ex in normalized.examples:
        outs = by_example.get(ex.id, [])
        if unnormalized_fraction(outs) <= config.max_unnormalized_fraction:
            to_add.extend((o.text, ex.topic) for o in outs if o.kind == "unmapped" and has_content(o.text))
    kb, mapping = expand_kb(normalized.kb, to_add)
    kept, decisions = [], {}
    for ex in normalized.examples:
        outs = by_example.get(ex.id, [])
        spans = []
        for o, span in zip(outs, ex.spans):
            g = mapping.get(o.text, OTHERS) if o.kind == "unmapped" else span.grounding
            spans.append(Span(span.start, span.end, g))
        regrounded = ex.replace(spans=SpanLabeling(tuple(spans)), variables=_ordered_groundings(spans))
        keep, reasons = quality_filter(regrounded, config, outs, claim_detector)
        decisions[ex.id] = reasons
        if keep:
            kept.append(regrounded)
    return PostprocessResult(kept, kb, normalized.outcomes, decisions)


def postprocess(examples: Sequence[AnnotatedExample], kb: KnowledgeBase, provider: EmbeddingProvider,
                config: FilterConfig = FilterConfig(),
                claim_detector: ClaimDetector | None = None) -> PostprocessResult:
    """Probability filter, normalisation and quality filters in that order."""
    survivors = scheme_probability_filter(examples, config.scheme_prob_factor)
    survivor_ids = {ex.id for ex in survivors}
    normalized = normalize(survivors, kb, provider, config)
    result = apply_quality_filters(normalized, config, claim_detector)
    result.scheme_dropped = [ex.id for ex in examples if ex.id not in survivor_ids]
    return result
