"""Joint factual-span detection and KB grounding with a biaffine scorer.

The argument and its candidate fact variables are encoded in one pass::

    <s> arg tokens </s> <var> var_0 tokens </var> <var> var_1 tokens </var> ...

Position ids restart inside every variable segment and variable tokens attend
only within their own segment (argument tokens see everything), so swapping
two variables only swaps their representations.  The ``<var>`` state of each segment is
reduced by a linear layer and scored against every (projected) argument
token by a biaffine layer, giving B/I/O logits per (variable, token).  One
extra learned pseudo-variable scores spans grounded to OTHERS.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F

from .corpus import (OTHERS, AnnotatedExample, BioTag, FactVariable, KnowledgeBase, Span, SpanLabeling,
                     TokenizedText, decode_bio, encode_bio)
from .layers import TransformerEncoder
from .metrics import corpus_grounding_accuracy, corpus_span_f1
from .training import (ModelStateError, TrainingLog, TrainSettings, Vocab, fit, load_checkpoint,
                       save_checkpoint)

MAX_VARIABLES = 5
TEXT_SPECIALS = ("<pad>", "<unk>", "<s>", "</s>", "<var>", "</var>")


@dataclass
class GrounderConfig:
    layers: int = 2
    hidden: int = 64
    heads: int = 4
    reduced_dim: int = 32  # 600 in the full-size model
    learning_rate: float = 1e-5
    batch_size: int = 32
    early_stop_patience: int = 5
    grad_clip_norm: float = 1.0
    max_steps: int = 2000
    eval_every: int = 0
    max_positions: int = 128
    seed: int | None = 0

    def __post_init__(self):
        if self.reduced_dim <= 0:
            raise ValueError("reduced_dim must be positive")
        if self.early_stop_patience < 1:
            raise ValueError("early_stop_patience must be >= 1")

    def settings(self) -> TrainSettings:
        return TrainSettings(self.learning_rate, self.batch_size, self.early_stop_patience,
                             self.grad_clip_norm, self.max_steps, self.eval_every, self.seed)


def text_tokens(text: TokenizedText | str) -> list[str]:
    if isinstance(text, str):
        from .corpus import tokenize

        text = tokenize(text)
    return [t.lower() for t in text.tokens]


def build_text_vocab(examples: Sequence[AnnotatedExample], kb: KnowledgeBase | None = None) -> Vocab:
    words = set()
    for ex in examples:
        words.update(text_tokens(ex.argument))
    if kb is not None:
        for v in kb:
            words.update(text_tokens(v.text))
    return Vocab(sorted(words), specials=TEXT_SPECIALS)


class Biaffine(nn.Module):
    """score_k(v, t) = u_v^T W_k u_t + w_k^T [u_v; u_t] + b_k for each of ``n_out`` tags."""

    def __init__(self, dim: int, n_out: int = 3):
        super().__init__()
        self.dim = dim
        self.weight = nn.Parameter(torch.randn(n_out, dim, dim) * dim ** -0.5)
        self.linear = nn.Linear(2 * dim, n_out, bias=False)
        self.bias = nn.Parameter(torch.zeros(n_out))

    def forward(self, var_reps, token_reps):
        """var_reps [B, C, r], token_reps [B, T, r] -> logits [B, C, T, n_out]"""
        if var_reps.shape[-1] != self.dim or token_reps.shape[-1] != self.dim:
            raise ValueError(
                f"biaffine expects width {self.dim}, got {var_reps.shape[-1]} and {token_reps.shape[-1]}")
        bilinear = torch.einsum("bcr,krs,bts->bctk", var_reps, self.weight, token_reps)
        wv, wt = self.linear.weight[:, :self.dim], self.linear.weight[:, self.dim:]
        lin = (var_reps @ wv.T)[:, :, None, :] + (token_reps @ wt.T)[:, None, :, :]
        return bilinear + lin + self.bias


class VariableReducer(nn.Linear):
    """Fully connected reduction of a variable's BOS state."""

    def forward(self, x):
        if x.shape[-1] != self.in_features:
            raise ValueError(f"expected width {self.in_features}, got {x.shape[-1]}")
        return super().forward(x)


@dataclass
class EncodedBatch:
    ids: torch.Tensor  # [B, L]
    mask: torch.Tensor  # [B, L] bool
    positions: torch.Tensor
    segments: torch.Tensor
    attn: torch.Tensor  # [B, L, L] bool
    n_tokens: list[int]
    var_pos: torch.Tensor  # [B, Vmax] index of each <var>
    var_mask: torch.Tensor  # [B, Vmax] bool


class ArgSpan(nn.Module):
    def __init__(self, vocab: Vocab, config: GrounderConfig):
        super().__init__()
        self.vocab, self.config = vocab, config
        c = config
        self.encoder = TransformerEncoder(len(vocab), c.hidden, c.layers, c.heads, c.max_positions, segments=2)
        self.token_proj = nn.Linear(c.hidden, c.reduced_dim)
        self.reduce = VariableReducer(c.hidden, c.reduced_dim)
        self.others = nn.Parameter(torch.randn(c.reduced_dim) * 0.1)
        self.biaffine = Biaffine(c.reduced_dim, 3)

    # -- input assembly ---------------------------------------------------
    def make_batch(self, arguments: Sequence[TokenizedText], variables: Sequence[Sequence[str]]) -> EncodedBatch:
        v = self.vocab
        rows, poss, segs, n_tok, vpos, groups = [], [], [], [], [], []
        for arg, var_texts in zip(arguments, variables):
            if len(arg) == 0:
                raise ValueError("argument has no tokens")
            if not 1 <= len(var_texts) <= MAX_VARIABLES:
                raise ValueError(f"need 1..{MAX_VARIABLES} variables, got {len(var_texts)}")
            toks = ["<s>", *text_tokens(arg), "</s>"]
            pos = list(range(len(toks)))
            seg = [0] * len(toks)
            group = [0] * len(toks)
            starts = []
            for k, text in enumerate(var_texts, 1):
                vt = ["<var>", *text_tokens(text), "</var>"]
                starts.append(len(toks))
                toks += vt
                pos += list(range(len(vt)))
                seg += [1] * len(vt)
                group += [k] * len(vt)
            rows.append(v.encode(toks))
            poss.append(pos)
            segs.append(seg)
            n_tok.append(len(arg))
            vpos.append(starts)
            groups.append(group)
        L = max(map(len, rows))
        V = max(map(len, vpos))
        pad = lambda seqs, n, val: torch.tensor([s + [val] * (n - len(s)) for s in seqs])  # noqa: E731
        ids = pad(rows, L, v.pad_id)
        g = pad(groups, L, -1)
        # argument tokens (group 0) see everything; variable tokens only their own segment
        attn = (g[:, :, None] == 0) | (g[:, :, None] == g[:, None, :])
        return EncodedBatch(
            ids=ids,
            mask=pad([[1] * len(r) for r in rows], L, 0).bool(),
            positions=pad(poss, L, 0),
            segments=pad(segs, L, 0),
            attn=attn,
            n_tokens=n_tok,
            var_pos=pad(vpos, V, 0),
            var_mask=pad([[1] * len(s) for s in vpos], V, 0).bool(),
        )

    # -- forward pieces ---------------------------------------------------
    def encode(self, batch: EncodedBatch):
        """Token states [B, Tmax, H] and variable BOS states [B, Vmax, H]."""
        h = self.encoder(batch.ids, batch.mask, batch.positions, batch.segments, batch.attn)
        T = max(batch.n_tokens)
        tokens = h[:, 1:1 + T]
        bos = torch.gather(h, 1, batch.var_pos[..., None].expand(-1, -1, h.shape[-1]))
        return tokens, bos

    def logits(self, batch: EncodedBatch):
        """[B, Vmax + 1, Tmax, 3]; the last channel is OTHERS."""
        tokens, bos = self.encode(batch)
        u_t = self.token_proj(tokens)
        u_v = self.reduce(bos)
        others = self.others.expand(u_v.shape[0], 1, -1)
        return self.biaffine(torch.cat([u_v, others], dim=1), u_t)

    def forward(self, batch: EncodedBatch):
        return self.logits(batch)


def check_ready(model: ArgSpan | None) -> ArgSpan:
    if model is None:
        raise ModelStateError("grounder is not initialised; train it or load a checkpoint")
    return model


def new_grounder(vocab: Vocab, config: GrounderConfig) -> ArgSpan:
    if config.seed is None:
        raise ModelStateError("an untrained grounder needs a seed")
    torch.manual_seed(config.seed)
    return ArgSpan(vocab, config)


def encode_pair(model: ArgSpan, argument: TokenizedText, variables: Sequence[FactVariable | str]):
    """(token representations [T, H], variable BOS representations [V, H])."""
    if len(argument) == 0:
        raise ValueError("empty argument")
    texts = [v.text if isinstance(v, FactVariable) else v for v in variables]
    with torch.no_grad():
        tokens, bos = model.encode(model.make_batch([argument], [texts]))
    return tokens[0], bos[0]


def reduce_variable(model: ArgSpan, bos_vector: torch.Tensor) -> torch.Tensor:
    return model.reduce(bos_vector)


def biaffine_score(model: ArgSpan, token_reps: torch.Tensor, reduced_variable_reps: torch.Tensor) -> torch.Tensor:
    """Logits [V + 1, T, 3] for one example; token reps are projected first."""
    u_t = model.token_proj(token_reps)
    u_v = torch.cat([reduced_variable_reps, model.others[None]], dim=0)
    return model.biaffine(u_v[None], u_t[None])[0]


@dataclass
class GroundingPrediction:
    logits: torch.Tensor  # [V + 1, T, 3]
    channels: list[str]
    labeling: SpanLabeling = field(default_factory=SpanLabeling)


def resolve_channels(logits: torch.Tensor, channels: Sequence[str]) -> SpanLabeling:
    """Per-channel argmax; a token claimed by several channels goes to the highest non-O logit."""
    C, T, _ = logits.shape
    tags = logits.argmax(-1)  # C, T
    claim = torch.maximum(logits[..., BioTag.B], logits[..., BioTag.I])
    claimed = tags != BioTag.O
    per_channel = [[BioTag.O] * T for _ in range(C)]
    for t in range(T):
        owners = [c for c in range(C) if claimed[c, t]]
        if not owners:
            continue
        best = max(owners, key=lambda c: (float(claim[c, t]), -c))
        per_channel[best][t] = BioTag(int(tags[best, t]))
    spans: list[Span] = []
    for c in range(C):
        spans.extend(decode_bio(per_channel[c], grounding=channels[c]).spans)
    return SpanLabeling(tuple(spans))


def ground(model: ArgSpan | None, argument: TokenizedText, variables: Sequence[FactVariable]) -> GroundingPrediction:
    model = check_ready(model)
    model.eval()
    with torch.no_grad():
        logits = model.logits(model.make_batch([argument], [[v.text for v in variables]]))[0]
    channels = [v.id for v in variables] + [OTHERS]
    return GroundingPrediction(logits, channels, resolve_channels(logits, channels))


# -- training -----------------------------------------------------------


def gold_channel_tags(ex: AnnotatedExample, kb: KnowledgeBase) -> tuple[list[FactVariable], torch.Tensor]:
    variables = [kb[v] for v in ex.variables]
    channels = [v.id for v in variables] + [OTHERS]
    tags = [encode_bio(ex.spans, len(ex.argument), c) for c in channels]
    return variables, torch.tensor([[int(t) for t in row] for row in tags])


def batch_loss(model: ArgSpan, examples: Sequence[AnnotatedExample], kb: KnowledgeBase) -> torch.Tensor:
    """Mean token-level cross entropy over every (channel, token) cell."""
    variables, golds = zip(*(gold_channel_tags(ex, kb) for ex in examples))
    batch = model.make_batch([ex.argument for ex in examples], [[v.text for v in vs] for vs in variables])
    logits = model.logits(batch)
    B, C, T, _ = logits.shape
    target = torch.full((B, C, T), -100, dtype=torch.long)
    for b, g in enumerate(golds):
        nv = g.shape[0] - 1
        target[b, :nv, :g.shape[1]] = g[:nv]
        target[b, C - 1, :g.shape[1]] = g[nv]
    return F.cross_entropy(logits.reshape(-1, 3), target.reshape(-1), ignore_index=-100)


def _check_trainable(examples: Sequence[AnnotatedExample], kb: KnowledgeBase) -> None:
    if not examples:
        raise ValueError("cannot train the grounder on an empty corpus")
    for ex in examples:
        if not ex.variables:
            raise ValueError(f"example {ex.id!r} lists no variables")
        ex.validate_against(kb)
        for s in ex.spans:
            if s.grounding != OTHERS and s.grounding not in ex.variables:
                raise ValueError(f"example {ex.id!r}: span grounded to {s.grounding!r} outside its variables")


def predict_corpus(model: ArgSpan, examples: Sequence[AnnotatedExample], kb: KnowledgeBase) -> list[SpanLabeling]:
    return [ground(model, ex.argument, [kb[v] for v in ex.variables]).labeling for ex in examples]


def exact_match_rate(model: ArgSpan, examples: Sequence[AnnotatedExample], kb: KnowledgeBase) -> float:
    preds = predict_corpus(model, examples, kb)
    return sum(p == ex.spans for p, ex in zip(preds, examples)) / len(examples)


def train_grounder(examples: Sequence[AnnotatedExample], kb: KnowledgeBase, config: GrounderConfig,
                   validation: Sequence[AnnotatedExample] | None = None, vocab: Vocab | None = None,
                   stop_when_exact: bool = False, init=None) -> tuple[ArgSpan, TrainingLog]:
    """Train from scratch.  Validation defaults to the training set itself."""
    examples = list(examples)
    _check_trainable(examples, kb)
    validation = list(validation) if validation else examples
    vocab = vocab or build_text_vocab([*examples, *validation], kb)
    model = new_grounder(vocab, config)
    if init is not None:
        init(model)

    def val_loss():
        return float(batch_loss(model, validation, kb))

    until = (lambda: exact_match_rate(model, examples, kb) == 1.0) if stop_when_exact else None
    trainlog = fit(model, len(examples), lambda idx: batch_loss(model, [examples[i] for i in idx], kb),
                   config.settings(), val_loss, until)
    return model, trainlog


def evaluate_grounder(model: ArgSpan, examples: Sequence[AnnotatedExample], kb: KnowledgeBase) -> dict:
    preds = predict_corpus(model, examples, kb)
    golds = [ex.spans for ex in examples]
    counts = [len(ex.argument) for ex in examples]
    report = {m: corpus_span_f1(preds, golds, counts, m) for m in ("partial", "full", "overall")}
    report["grounding_accuracy"] = corpus_grounding_accuracy(preds, golds)
    report["exact_match"] = sum(p == g for p, g in zip(preds, golds)) / max(1, len(golds))
    return report


def save_grounder(model: ArgSpan, path) -> None:
    save_checkpoint(path, model, "argspan", asdict(model.config), vocab=model.vocab.to_json())


def load_grounder(path) -> ArgSpan:
    state, config, extra = load_checkpoint(path, "argspan")
    model = ArgSpan(Vocab.from_json(extra["vocab"]), GrounderConfig(**config))
    model.load_state_dict(state)
    model.eval()
    return model
