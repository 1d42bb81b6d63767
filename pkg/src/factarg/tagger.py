"""Joint factual-span extraction and multi-label scheme classification from text alone.

Two heads share one encoder over ``<s> tokens``:

* parallel: a linear BIO head per token and a linear scheme head on the mean
  of the token states;
* pipelined: the same BIO head, then two layers of self-attention over the
  positions *outside* factual spans (``<s>`` always included) and a linear
  scheme head on the ``<s>`` state.  Gold spans drive the mask in training,
  predicted spans at inference.
"""

from __future__ import annotations

import hashlib
import random
from dataclasses import asdict, dataclass
from typing import Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F

from .corpus import (SCHEMES, AnnotatedExample, ArgumentScheme, BioTag, SpanLabeling, TokenizedText, decode_bio,
                     encode_bio)
from .grounder import build_text_vocab, text_tokens
from .layers import SelectiveAttention, TransformerEncoder, masked_mean
from .metrics import corpus_span_f1, scheme_f1, subset_accuracy
from .training import ModelStateError, TrainingLog, TrainSettings, Vocab, fit, load_checkpoint, save_checkpoint

VARIANTS = ("parallel", "pipelined")
PIPELINE_LAYERS = 2
PIPELINE_HEADS = 4


@dataclass
class SchemeTaggerConfig:
    variant: str = "pipelined"
    layers: int = 2
    hidden: int = 64
    heads: int = 4
    pipeline_layers: int = PIPELINE_LAYERS
    pipeline_heads: int = PIPELINE_HEADS
    learning_rate: float = 1e-5
    batch_size: int = 64
    early_stop_patience: int = 5
    grad_clip_norm: float = 1.0
    max_steps: int = 2000
    eval_every: int = 0
    scheme_decision_threshold: float = 0.5
    max_positions: int = 256
    seed: int | None = 0

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.variant == "pipelined" and (self.pipeline_layers, self.pipeline_heads) != (PIPELINE_LAYERS,
                                                                                          PIPELINE_HEADS):
            raise ValueError("the pipelined head uses exactly 2 self-attention layers with 4 heads")
        if not 0.0 <= self.scheme_decision_threshold <= 1.0:
            raise ValueError("scheme_decision_threshold must be in [0, 1]")

    def settings(self) -> TrainSettings:
        return TrainSettings(self.learning_rate, self.batch_size, self.early_stop_patience,
                             self.grad_clip_norm, self.max_steps, self.eval_every, self.seed)


def selective_mask(token_count: int, spans: SpanLabeling) -> list[bool]:
    """Participation over [<s>, token 0, ..., token n-1]; span tokens sit out."""
    spans.check_range(token_count)
    keep = [True] * (token_count + 1)
    for s in spans:
        for t in range(s.start, s.end):
            keep[t + 1] = False
    return keep


@dataclass
class SchemePrediction:
    probs: dict[ArgumentScheme, float]
    labels: frozenset[ArgumentScheme]
    spans: SpanLabeling


class SchemeTagger(nn.Module):
    def __init__(self, vocab: Vocab, config: SchemeTaggerConfig):
        super().__init__()
        self.vocab, self.config = vocab, config
        c = config
        self.encoder = TransformerEncoder(len(vocab), c.hidden, c.layers, c.heads, c.max_positions)
        self.span_head = nn.Linear(c.hidden, 3)
        if c.variant == "pipelined":
            self.selective = SelectiveAttention(c.hidden, c.pipeline_layers, c.pipeline_heads)
        self.scheme_head = nn.Linear(c.hidden, len(SCHEMES))

    def make_batch(self, arguments: Sequence[TokenizedText]):
        rows = []
        for arg in arguments:
            if len(arg) == 0:
                raise ValueError("argument has no tokens")
            rows.append(self.vocab.encode(["<s>", *text_tokens(arg)]))
        L = max(map(len, rows))
        ids = torch.tensor([r + [self.vocab.pad_id] * (L - len(r)) for r in rows])
        mask = torch.tensor([[True] * len(r) + [False] * (L - len(r)) for r in rows])
        return ids, mask

    def encode(self, ids, mask):
        return self.encoder(ids, mask)

    def span_logits(self, hidden):
        """[B, T, 3] over argument tokens (the <s> position is dropped)."""
        return self.span_head(hidden[:, 1:])

    def scheme_logits_parallel(self, hidden, mask):
        return self.scheme_head(masked_mean(hidden[:, 1:], mask[:, 1:]))

    def scheme_logits_pipelined(self, hidden, participate):
        return self.scheme_head(self.selective(hidden, participate)[:, 0])

    def forward(self, ids, mask, spans: Sequence[SpanLabeling] | None = None):
        """(span logits, scheme logits).  ``spans`` drive the pipelined mask when given."""
        hidden = self.encode(ids, mask)
        span_logits = self.span_logits(hidden)
        if self.config.variant == "parallel":
            return span_logits, self.scheme_logits_parallel(hidden, mask)
        n_tok = (mask.sum(1) - 1).tolist()
        if spans is None:
            tags = span_logits.argmax(-1)
            spans = [decode_bio(tags[b, :n].tolist()) for b, n in enumerate(n_tok)]
        participate = torch.zeros_like(mask)
        for b, (n, sp) in enumerate(zip(n_tok, spans)):
            participate[b, :n + 1] = torch.tensor(selective_mask(n, sp))
        return span_logits, self.scheme_logits_pipelined(hidden, participate)


def new_tagger(vocab: Vocab, config: SchemeTaggerConfig) -> SchemeTagger:
    if config.seed is None:
        raise ModelStateError("an untrained tagger needs a seed")
    torch.manual_seed(config.seed)
    return SchemeTagger(vocab, config)


def tag(model: SchemeTagger | None, argument: TokenizedText) -> SchemePrediction:
    if model is None:
        raise ModelStateError("tagger is not initialised; train it or load a checkpoint")
    if len(argument) == 0:
        raise ValueError("empty argument")
    model.eval()
    with torch.no_grad():
        ids, mask = model.make_batch([argument])
        span_logits, scheme_logits = model(ids, mask)
    spans = decode_bio(span_logits[0].argmax(-1).tolist())
    probs = torch.sigmoid(scheme_logits[0].double()).tolist()
    prob_map = {s: p for s, p in zip(SCHEMES, probs)}
    thr = model.config.scheme_decision_threshold
    return SchemePrediction(prob_map, frozenset(s for s, p in prob_map.items() if p >= thr), spans)


def predict_spans(model: SchemeTagger, argument: TokenizedText) -> SpanLabeling:
    return tag(model, argument).spans


def predict_schemes_parallel(model: SchemeTagger, argument: TokenizedText) -> SchemePrediction:
    if model.config.variant != "parallel":
        raise ValueError("model is not the parallel variant")
    return tag(model, argument)


def predict_schemes_pipelined(model: SchemeTagger, argument: TokenizedText) -> SchemePrediction:
    if model.config.variant != "pipelined":
        raise ValueError("model is not the pipelined variant")
    return tag(model, argument)


# -- training -----------------------------------------------------------


def batch_loss(model: SchemeTagger, examples: Sequence[AnnotatedExample]) -> torch.Tensor:
    """Token BIO cross entropy plus mean per-label binary cross entropy, unweighted."""
    ids, mask = model.make_batch([ex.argument for ex in examples])
    golds = [ex.spans.erase_groundings() for ex in examples]
    span_logits, scheme_logits = model(ids, mask, spans=golds)
    T = span_logits.shape[1]
    target = torch.full((len(examples), T), -100, dtype=torch.long)
    for b, ex in enumerate(examples):
        target[b, :len(ex.argument)] = torch.tensor([int(t) for t in encode_bio(ex.spans, len(ex.argument))])
    span_loss = F.cross_entropy(span_logits.reshape(-1, 3), target.reshape(-1), ignore_index=-100)
    labels = torch.tensor([[float(s in ex.schemes) for s in SCHEMES] for ex in examples], dtype=scheme_logits.dtype)
    scheme_loss = F.binary_cross_entropy_with_logits(scheme_logits, labels)
    return span_loss + scheme_loss


def _overfit_goal(model: SchemeTagger, examples: Sequence[AnnotatedExample]) -> bool:
    preds = [tag(model, ex.argument) for ex in examples]
    return all(p.spans == ex.spans.erase_groundings() and p.labels == ex.schemes for p, ex in zip(preds, examples))


def train_scheme_tagger(examples: Sequence[AnnotatedExample], config: SchemeTaggerConfig,
                        validation: Sequence[AnnotatedExample] | None = None, vocab: Vocab | None = None,
                        stop_when_exact: bool = False, init=None) -> tuple[SchemeTagger, TrainingLog]:
    examples = list(examples)
    if not examples:
        raise ValueError("cannot train the tagger on an empty corpus")
    validation = list(validation) if validation else examples
    vocab = vocab or build_text_vocab([*examples, *validation])
    model = new_tagger(vocab, config)
    if init is not None:
        init(model)
    until = (lambda: _overfit_goal(model, examples)) if stop_when_exact else None
    trainlog = fit(model, len(examples), lambda idx: batch_loss(model, [examples[i] for i in idx]),
                   config.settings(), lambda: float(batch_loss(model, validation)), until)
    return model, trainlog


def evaluate_tagger(model: SchemeTagger, examples: Sequence[AnnotatedExample]) -> dict:
    preds = [tag(model, ex.argument) for ex in examples]
    golds = [ex.spans.erase_groundings() for ex in examples]
    counts = [len(ex.argument) for ex in examples]
    report = {f"span_{m}": corpus_span_f1([p.spans for p in preds], golds, counts, m)
              for m in ("partial", "full", "overall")}
    report["scheme_f1"] = scheme_f1([p.labels for p in preds], [ex.schemes for ex in examples])
    report["subset_accuracy"] = subset_accuracy([p.labels for p in preds], [ex.schemes for ex in examples])
    report["span_exact_match"] = sum(p.spans == g for p, g in zip(preds, golds)) / max(1, len(golds))
    return report


def annotate(model: SchemeTagger, ex: AnnotatedExample, provenance: str = "pc-auto") -> AnnotatedExample:
    """Attach predicted spans (grounded to OTHERS), scheme labels and probabilities."""
    pred = tag(model, ex.argument)
    return ex.replace(spans=pred.spans, schemes=pred.labels, scheme_probs=dict(pred.probs),
                      variables=(), provenance=provenance)


def save_tagger(model: SchemeTagger, path) -> None:
    save_checkpoint(path, model, "argspanscheme", asdict(model.config), vocab=model.vocab.to_json())


def load_tagger(path) -> SchemeTagger:
    state, config, extra = load_checkpoint(path, "argspanscheme")
    model = SchemeTagger(Vocab.from_json(extra["vocab"]), SchemeTaggerConfig(**config))
    model.load_state_dict(state)
    model.eval()
    return model


# -- topic splits -------------------------------------------------------

RATIOS = {"5:1": 1, "4:2": 2, "2:4": 4}
SPLIT_IDS = (1, 2, 3, 4, 5)
CV_VALIDATION_FRACTION = 0.07


@dataclass
class SplitManifest:
    split_id: int
    ratio: str
    train_topics: list[str]
    validation_topics: list[str]
    train_ids: list[str]
    validation_ids: list[str]

    def to_dict(self) -> dict:
        return asdict(self)


def _split_rng(ratio: str, split_id: int, seed: int) -> random.Random:
    digest = hashlib.sha256(f"{ratio}|{split_id}|{seed}".encode()).digest()
    return random.Random(int.from_bytes(digest[:8], "big"))


def topic_split(examples: Sequence[AnnotatedExample], ratio: str, split_id: int,
                seed: int = 0) -> tuple[list[AnnotatedExample], list[AnnotatedExample], SplitManifest]:
    """Train/validation split.

    ``CV``: fold ``split_id`` of a 5-fold random 93/7 example split.
    Otherwise the topics are divided train:validation per ``ratio`` with a
    topic assignment derived deterministically from ``split_id``.
    """
    if split_id not in SPLIT_IDS:
        raise ValueError(f"split_id must be one of {SPLIT_IDS}")
    examples = list(examples)
    if ratio == "CV":
        n = len(examples)
        n_val = round(n * CV_VALIDATION_FRACTION)
        order = list(range(n))
        _split_rng("CV", 0, seed).shuffle(order)
        fold = order[(split_id - 1) * n_val: split_id * n_val]
        if len(fold) < n_val:
            raise ValueError(f"corpus of {n} examples too small for 5 disjoint 7% folds")
        val_idx = set(fold)
        train = [ex for i, ex in enumerate(examples) if i not in val_idx]
        val = [ex for i, ex in enumerate(examples) if i in val_idx]
        topics = sorted({ex.topic for ex in examples})
        manifest = SplitManifest(split_id, ratio, topics, topics, [e.id for e in train], [e.id for e in val])
        return train, val, manifest
    if ratio not in RATIOS:
        raise ValueError(f"unknown ratio {ratio!r}; expected CV or one of {sorted(RATIOS)}")
    topics = sorted({ex.topic for ex in examples})
    if len(topics) < 6:
        raise ValueError(f"topic ratio {ratio} needs 6 topics, corpus has {len(topics)}")
    shuffled = topics[:]
    _split_rng(ratio, split_id, seed).shuffle(shuffled)
    val_topics = sorted(shuffled[:RATIOS[ratio]])
    train_topics = sorted(shuffled[RATIOS[ratio]:])
    train = [ex for ex in examples if ex.topic in train_topics]
    val = [ex for ex in examples if ex.topic in val_topics]
    assert not {ex.topic for ex in train} & {ex.topic for ex in val}
    manifest = SplitManifest(split_id, ratio, train_topics, val_topics, [e.id for e in train], [e.id for e in val])
    return train, val, manifest
