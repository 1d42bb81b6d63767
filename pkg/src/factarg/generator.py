"""Control-coded encoder-decoder argument generation.

Encoder input: ``topic <VAR_0> var text <VAR_1> var text ...`` with the
variables in a seeded random order.  The decoder is primed with control
codes and a section BOS token:

* mono:   ``<pro> <from_consequence> <argument>`` -> argument
* dual:   ``<pro> <from_consequence> <pattern>`` -> template ``<argument>`` -> argument
* stance: ``<pro> <argument>``;  scheme: ``<from_consequence> <argument>``

Dual decoding runs two beam searches with the same decoder: the first stops
at ``<argument>`` and yields the template, the second continues from
``template <argument>`` and yields the argument.
"""

from __future__ import annotations

import hashlib
import math
import random
import re
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .corpus import (CONTROL_SCHEMES, OTHERS, AnnotatedExample, ArgumentScheme, KnowledgeBase, Stance, tokenize)
from .layers import DecoderLayer, TransformerEncoder
from .training import ModelStateError, TrainingLog, TrainSettings, Vocab, fit, load_checkpoint, save_checkpoint

VARIANTS = ("mono", "dual", "stance", "scheme")
MAX_VARIABLES = 4

SCHEME_TOKENS = tuple(s.control_token for s in CONTROL_SCHEMES)
STANCE_TOKENS = ("<pro>", "<con>")
VAR_TOKENS = tuple(f"<VAR_{i}>" for i in range(MAX_VARIABLES))
PATTERN, ARGUMENT = "<pattern>", "<argument>"
SPECIAL_TOKENS = (*SCHEME_TOKENS, *STANCE_TOKENS, *VAR_TOKENS, PATTERN, ARGUMENT)
BASE_SPECIALS = ("<pad>", "<unk>", "</s>")
EOS = "</s>"

_VAR_RE = re.compile(r"<VAR_(\d+)>")


class TemplateError(ValueError):
    pass


def gen_tokens(text: str) -> list[str]:
    """Reference tokens, lower-cased except for the special tokens."""
    return [t if t in SPECIAL_TOKENS or _VAR_RE.fullmatch(t) else t.lower() for t in tokenize(text).tokens]


def detokenize(tokens: Sequence[str]) -> str:
    return " ".join(tokens)


def build_vocab(texts: Sequence[str]) -> Vocab:
    words = set()
    for t in texts:
        words.update(w for w in gen_tokens(t) if w not in SPECIAL_TOKENS)
    return Vocab(sorted(words), specials=(*BASE_SPECIALS, *SPECIAL_TOKENS))


@dataclass
class GeneratorConfig:
    variant: str = "dual"
    encoder_layers: int = 2
    decoder_layers: int = 2
    hidden: int = 64
    heads: int = 4
    learning_rate: float = 1e-5
    batch_size: int = 24
    early_stop_patience: int = 5
    grad_clip_norm: float = 1.0
    max_steps: int = 2000
    eval_every: int = 0
    beam_width: int = 5
    max_length: int = 50
    block_repeated_trigrams: bool = True
    max_positions: int = 160
    seed: int | None = 0

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.beam_width < 1:
            raise ValueError("beam_width must be >= 1")

    def settings(self) -> TrainSettings:
        return TrainSettings(self.learning_rate, self.batch_size, self.early_stop_patience,
                             self.grad_clip_norm, self.max_steps, self.eval_every, self.seed)


# -- inputs -------------------------------------------------------------


@dataclass(frozen=True)
class EncoderInput:
    topic: str
    variables: tuple[str, ...]  # in encoder order; index X is <VAR_X>
    permutation: tuple[int, ...]  # encoder slot -> index into the caller's variable list

    @property
    def text(self) -> str:
        parts = [self.topic]
        for i, v in enumerate(self.variables):
            parts += [VAR_TOKENS[i], v]
        return " ".join(parts)

    def tokens(self) -> list[str]:
        return gen_tokens(self.text)


def permutation_seed(seed: int, variables: Sequence[str]) -> int:
    key = "|".join(sorted(variables)) + f"#{seed}"
    return int.from_bytes(hashlib.sha256(key.encode()).digest()[:8], "big")


def build_encoder_input(topic: str, variables: Sequence[str], seed: int | None = 0,
                        permutation: Sequence[int] | None = None) -> EncoderInput:
    """Topic followed by ``<VAR_X> text`` pairs in a seeded random order.

    The order depends only on the seed and the variable set; pass
    ``permutation`` to fix it explicitly.
    """
    n = len(variables)
    if not 1 <= n <= MAX_VARIABLES:
        raise ValueError(f"need 1..{MAX_VARIABLES} variables, got {n}")
    if permutation is None:
        permutation = list(range(n))
        if seed is not None:
            random.Random(permutation_seed(seed, variables)).shuffle(permutation)
    if sorted(permutation) != list(range(n)):
        raise ValueError(f"{permutation} is not a permutation of {n} variables")
    return EncoderInput(topic, tuple(variables[i] for i in permutation), tuple(permutation))


def build_control_prefix(variant: str, stance: Stance | None = None, scheme: ArgumentScheme | None = None,
                         phase: int = 1, template: Sequence[str] | None = None) -> list[str]:
    if variant not in VARIANTS:
        raise ValueError(f"unknown variant {variant!r}")
    if phase == 2:
        if variant != "dual":
            raise ValueError(f"variant {variant!r} has a single decoding phase")
        if template is None:
            raise ValueError("phase 2 needs the phase-1 template")
        return [*template, ARGUMENT]
    if scheme is ArgumentScheme.OTHERS:
        raise ValueError("Others is not a valid control code")
    if variant != "stance" and scheme is None:
        raise ValueError(f"variant {variant!r} needs a scheme")
    if variant != "scheme" and stance is None:
        raise ValueError(f"variant {variant!r} needs a stance")
    if phase != 1:
        raise ValueError(f"unknown phase {phase}")
    codes = []
    if variant != "scheme":
        codes.append(stance.control_token)
    if variant != "stance":
        codes.append(scheme.control_token)
    return codes + [PATTERN if variant == "dual" else ARGUMENT]


def substitute_template(template: str | Sequence[str], encoder_input: EncoderInput) -> str:
    """Replace each ``<VAR_X>`` with the text of encoder variable X."""
    toks = gen_tokens(template) if isinstance(template, str) else list(template)
    unknown = sorted({t for t in toks if _VAR_RE.fullmatch(t) and int(_VAR_RE.fullmatch(t).group(1))
                      >= len(encoder_input.variables)})
    if unknown:
        raise TemplateError(f"unknown placeholders {unknown} for {len(encoder_input.variables)} variables")
    out = []
    for t in toks:
        m = _VAR_RE.fullmatch(t)
        out.append(encoder_input.variables[int(m.group(1))] if m else t)
    return detokenize(out)


def template_from_example(ex: AnnotatedExample, encoder_input: EncoderInput, kb: KnowledgeBase) -> list[str]:
    """Argument tokens with every grounded span replaced by its ``<VAR_X>`` token."""
    slot = {}
    for i, text in enumerate(encoder_input.variables):
        for vid in ex.variables:
            if kb[vid].text == text:
                slot.setdefault(vid, i)
    grounded = [s for s in ex.spans if s.grounding != OTHERS and s.grounding in slot]
    if not grounded:
        raise TemplateError(f"example {ex.id!r} has no grounded spans to build a template from")
    toks = [t.lower() for t in ex.argument.tokens]
    out, i = [], 0
    by_start = {s.start: s for s in grounded}
    while i < len(toks):
        s = by_start.get(i)
        if s is not None:
            out.append(VAR_TOKENS[slot[s.grounding]])
            i = s.end
        else:
            out.append(toks[i])
            i += 1
    return out


# -- model --------------------------------------------------------------


class ArgU(nn.Module):
    def __init__(self, vocab: Vocab, config: GeneratorConfig):
        super().__init__()
        self.vocab, self.config = vocab, config
        c = config
        self.embed = nn.Embedding(len(vocab), c.hidden)
        self.encoder = TransformerEncoder(len(vocab), c.hidden, c.encoder_layers, c.heads, c.max_positions,
                                          embedding=self.embed)
        self.dec_pos = nn.Embedding(c.max_positions, c.hidden)
        self.decoder = nn.ModuleList(DecoderLayer(c.hidden, c.heads) for _ in range(c.decoder_layers))
        self.dec_norm = nn.LayerNorm(c.hidden)
        self.lm_head = nn.Linear(c.hidden, len(vocab))

    def encode(self, src, src_mask):
        return self.encoder(src, src_mask)

    def decode(self, memory, src_mask, tgt, tgt_mask=None):
        pos = torch.arange(tgt.shape[1]).expand_as(tgt)
        y = self.embed(tgt) + self.dec_pos(pos)
        for layer in self.decoder:
            y = layer(y, memory, memory_mask=src_mask, self_mask=tgt_mask)
        return self.lm_head(self.dec_norm(y))

    def forward(self, src, src_mask, tgt, tgt_mask=None):
        return self.decode(self.encode(src, src_mask), src_mask, tgt, tgt_mask)

    def ids(self, tokens: Sequence[str]) -> list[int]:
        return self.vocab.encode(tokens)


def new_generator(vocab: Vocab, config: GeneratorConfig) -> ArgU:
    if config.seed is None:
        raise ModelStateError("an untrained generator needs a seed")
    torch.manual_seed(config.seed)
    return ArgU(vocab, config)


# -- beam search --------------------------------------------------------


@dataclass
class BeamResult:
    tokens: list[int]  # generated tokens, stop token excluded
    score: float
    stop: int | None  # stop token id that ended the hypothesis, None if cut at max_len


def repeated_trigram(seq: Sequence) -> bool:
    grams = [tuple(seq[i:i + 3]) for i in range(len(seq) - 2)]
    return len(grams) != len(set(grams))


def beam_search(step_fn: Callable[[list[list[int]]], np.ndarray], eos_id: int | Sequence[int], beam_width: int = 5,
                max_len: int = 50, block_repeated_trigrams: bool = True, start: Sequence[int] = ()) -> BeamResult:
    """Length-bounded beam search over summed log-probabilities.

    ``step_fn`` maps a batch of token prefixes (``start`` + generated) to
    next-token log-probabilities [n, V].  A continuation that would repeat a
    trigram already in its hypothesis is blocked outright.  Hypotheses reaching
    ``max_len`` generated tokens are closed as they are.
    """
    if beam_width < 1:
        raise ValueError("beam_width must be >= 1")
    stops = {eos_id} if isinstance(eos_id, (int, np.integer)) else set(eos_id)
    start = list(start)
    live: list[tuple[float, list[int]]] = [(0.0, [])]
    finished: list[tuple[float, list[int], int | None]] = []
    for _ in range(max_len):
        logp = np.asarray(step_fn([start + h for _, h in live]), dtype=np.float64)
        cands = []
        for (score, h), row in zip(live, logp):
            row = row.copy()
            if block_repeated_trigrams and len(h) >= 2:
                seen = {tuple(h[i:i + 3]) for i in range(len(h) - 2)}
                for a, b, c in seen:
                    if (a, b) == (h[-2], h[-1]) and c not in stops:
                        row[c] = -np.inf
            k = min(len(row), beam_width + len(stops))
            top = np.argpartition(-row, k - 1)[:k]
            for c in top:
                if np.isfinite(row[c]):
                    cands.append((score + float(row[c]), h, int(c)))
        cands.sort(key=lambda x: (-x[0], x[1] + [x[2]]))
        new_live = []
        for score, h, c in cands:
            if c in stops:
                finished.append((score, h, c))
            else:
                new_live.append((score, h + [c]))
                if len(new_live) == beam_width:
                    break
        live = new_live
        if not live:
            break
        # scores only decrease, so a finished hypothesis beating every live one is final
        if finished and max(f[0] for f in finished) >= live[0][0]:
            break
    else:
        finished.extend((score, h, None) for score, h in live)
    if not finished:
        finished.extend((score, h, None) for score, h in live)
    best = min(finished, key=lambda f: (-f[0], len(f[1]), f[1]))
    return BeamResult(best[1], best[0], best[2])


# -- generation ---------------------------------------------------------


@dataclass
class GenerationRecord:
    topic: str
    variables: list[str]
    encoder_input: str
    variant: str
    stance: str | None
    scheme: str | None
    control_codes: list[str]
    argument: str
    argument_tokens: list[str]
    template: str | None = None
    template_tokens: list[str] | None = None
    phase2_context: list[str] | None = None
    beam_scores: dict = field(default_factory=dict)
    flags: list[str] = field(default_factory=list)
    reference: str | None = None
    example_id: str | None = None

    def to_record(self) -> dict:
        return asdict(self)

    @classmethod
    def from_record(cls, rec: dict) -> "GenerationRecord":
        return cls(**rec)


def _check_model(model: ArgU | None) -> ArgU:
    if model is None:
        raise ModelStateError("generator is not initialised; train it or load a checkpoint")
    return model


class _Stepper:
    """Runs the decoder for a batch of prefixes against one encoded input."""

    def __init__(self, model: ArgU, encoder_input: EncoderInput):
        self.model = model
        src = torch.tensor([model.ids(encoder_input.tokens())])
        self.src_mask = torch.ones_like(src, dtype=torch.bool)
        with torch.no_grad():
            self.memory = model.encode(src, self.src_mask)

    def __call__(self, prefixes: list[list[int]]) -> np.ndarray:
        n = len(prefixes)
        L = len(prefixes[0])  # beams share one length
        tgt = torch.tensor(prefixes).view(n, L)
        with torch.no_grad():
            logits = self.model.decode(self.memory.expand(n, -1, -1), self.src_mask.expand(n, -1), tgt)
        return F.log_softmax(logits[:, -1].double(), dim=-1).numpy()


def _beam(model: ArgU, stepper: _Stepper, start: list[str], stops: list[str]) -> BeamResult:
    c = model.config
    v = model.vocab
    return beam_search(stepper, [v.id(s) for s in stops], c.beam_width, c.max_length,
                       c.block_repeated_trigrams, start=model.ids(start))


def decode_mono(model: ArgU | None, encoder_input: EncoderInput, prefix: Sequence[str]) -> tuple[list[str], float]:
    """Argument tokens and beam score for a single-phase variant."""
    model = _check_model(model)
    model.eval()
    res = _beam(model, _Stepper(model, encoder_input), list(prefix), [EOS])
    return model.vocab.decode(res.tokens), res.score


def decode_dual(model: ArgU | None, encoder_input: EncoderInput, prefix_phase1: Sequence[str]) -> dict:
    """Template first, then the argument decoded from ``template <argument>``."""
    model = _check_model(model)
    model.eval()
    stepper = _Stepper(model, encoder_input)
    p1 = _beam(model, stepper, list(prefix_phase1), [ARGUMENT, EOS])
    template = model.vocab.decode(p1.tokens)
    if not template:
        raise TemplateError("phase 1 produced an empty template")
    context = build_control_prefix("dual", phase=2, template=template)
    p2 = _beam(model, stepper, list(prefix_phase1) + context, [EOS])
    return {
        "template": template,
        "phase2_context": context,
        "argument": model.vocab.decode(p2.tokens),
        "scores": {"template": p1.score, "argument": p2.score},
    }


def template_flags(template: Sequence[str], n_variables: int) -> list[str]:
    flags = []
    used = {int(m.group(1)) for t in template if (m := _VAR_RE.fullmatch(t))}
    if any(i >= n_variables for i in used):
        flags.append("template-unknown-placeholder")
    if any(i not in used for i in range(n_variables)):
        flags.append("template-missing-variable")
    return flags


def generate(model: ArgU | None, topic: str, variables: Sequence[str], stance: Stance | None,
             scheme: ArgumentScheme | None, seed: int | None = 0, permutation: Sequence[int] | None = None,
             reference: str | None = None, example_id: str | None = None) -> GenerationRecord:
    model = _check_model(model)
    variant = model.config.variant
    enc = build_encoder_input(topic, variables, seed, permutation)
    prefix = build_control_prefix(variant, stance, scheme)
    rec = GenerationRecord(
        topic=topic, variables=list(variables), encoder_input=enc.text, variant=variant,
        stance=stance.value if stance else None, scheme=scheme.snake if scheme else None,
        control_codes=prefix, argument="", argument_tokens=[], reference=reference, example_id=example_id,
    )
    if variant == "dual":
        out = decode_dual(model, enc, prefix)
        rec.template_tokens = out["template"]
        rec.template = detokenize(out["template"])
        rec.phase2_context = out["phase2_context"]
        rec.argument_tokens = out["argument"]
        rec.beam_scores = out["scores"]
        rec.flags = template_flags(out["template"], len(variables))
    else:
        toks, score = decode_mono(model, enc, prefix)
        rec.argument_tokens = toks
        rec.beam_scores = {"argument": score}
    rec.argument = detokenize(rec.argument_tokens)
    return rec


# -- training -----------------------------------------------------------


@dataclass
class TrainingRow:
    example_id: str
    encoder_input: EncoderInput
    decoder_tokens: list[str]  # full decoder sequence ending in </s>
    loss_from: int  # index in decoder_tokens of the first supervised token
    target: list[str]  # argument tokens


def example_variables(ex: AnnotatedExample, kb: KnowledgeBase) -> list[str]:
    return [kb[v].text for v in ex.variables]


def display_topic(topic: str) -> str:
    return topic.replace("_", " ")


def primary_scheme(ex: AnnotatedExample) -> ArgumentScheme:
    for s in CONTROL_SCHEMES:
        if s in ex.schemes:
            return s
    raise ValueError(f"example {ex.id!r} has no controllable scheme")


def control_scheme(ex: AnnotatedExample) -> ArgumentScheme | None:
    return next((s for s in CONTROL_SCHEMES if s in ex.schemes), None)


def eligible(ex: AnnotatedExample, variant: str) -> bool:
    """Whether an example can serve as a generation row for ``variant``:
    1-4 variables and, unless only the stance is controlled, a non-Others scheme."""
    if not 1 <= len(ex.variables) <= MAX_VARIABLES:
        return False
    return variant == "stance" or control_scheme(ex) is not None


def build_row(ex: AnnotatedExample, kb: KnowledgeBase, variant: str, seed: int | None,
              max_length: int = 50, stance: Stance | None = None,
              scheme: ArgumentScheme | None = None) -> TrainingRow:
    variables = example_variables(ex, kb)
    enc = build_encoder_input(display_topic(ex.topic), variables, seed)
    stance = stance or ex.stance
    if scheme is None and variant != "stance":
        scheme = primary_scheme(ex)
    target = [t.lower() for t in ex.argument.tokens][:max_length]
    prefix = build_control_prefix(variant, stance, scheme)
    if variant == "dual":
        template = template_from_example(ex, enc, kb)[:max_length]
        seq = prefix + template + [ARGUMENT] + target + [EOS]
    else:
        seq = prefix + target + [EOS]
    return TrainingRow(ex.id, enc, seq, len(prefix), target)


def rows_loss(model: ArgU, rows: Sequence[TrainingRow]) -> torch.Tensor:
    v = model.vocab
    src = [model.ids(r.encoder_input.tokens()) for r in rows]
    tgt = [model.ids(r.decoder_tokens) for r in rows]
    S, T = max(map(len, src)), max(map(len, tgt)) - 1
    src_t = torch.tensor([s + [v.pad_id] * (S - len(s)) for s in src])
    src_mask = torch.tensor([[True] * len(s) + [False] * (S - len(s)) for s in src])
    inp = torch.tensor([t[:-1] + [v.pad_id] * (T - len(t) + 1) for t in tgt])
    labels = torch.full((len(rows), T), -100, dtype=torch.long)
    for b, (r, t) in enumerate(zip(rows, tgt)):
        for j in range(r.loss_from - 1, len(t) - 1):
            labels[b, j] = t[j + 1]
    tgt_mask = torch.tensor([[True] * (len(t) - 1) + [False] * (T - len(t) + 1) for t in tgt])
    logits = model(src_t, src_mask, inp, tgt_mask)
    return F.cross_entropy(logits.reshape(-1, logits.shape[-1]), labels.reshape(-1), ignore_index=-100)


def generator_vocab(examples: Sequence[AnnotatedExample], kb: KnowledgeBase) -> Vocab:
    texts = [ex.text for ex in examples] + [v.text for v in kb] + [display_topic(ex.topic) for ex in examples]
    return build_vocab(texts)


def exact_match_rate(model: ArgU, rows: Sequence[TrainingRow], examples: Sequence[AnnotatedExample],
                     kb: KnowledgeBase) -> float:
    hits = 0
    for row, ex in zip(rows, examples):
        try:
            rec = generate(model, display_topic(ex.topic), example_variables(ex, kb), ex.stance,
                           primary_scheme(ex) if model.config.variant != "stance" else None, seed=model.config.seed)
        except TemplateError:
            # an untrained model may close phase 1 immediately; that is a miss, not a failure
            continue
        hits += rec.argument_tokens == row.target
    return hits / max(1, len(rows))


def train_generator(examples: Sequence[AnnotatedExample], kb: KnowledgeBase, config: GeneratorConfig,
                    validation: Sequence[AnnotatedExample] | None = None, vocab: Vocab | None = None,
                    stop_when_exact: float | None = None, init=None) -> tuple[ArgU, TrainingLog]:
    """Cross entropy on the argument (single-phase variants) or on template,
    ``<argument>`` and argument (dual).  ``stop_when_exact`` ends training once
    beam decoding reproduces that fraction of training targets.  Examples
    without 1-4 variables or (except for the stance variant) without a
    controllable scheme are skipped."""
    examples = [ex for ex in examples if eligible(ex, config.variant)]
    if not examples:
        raise ValueError("no example with 1-4 variables and a controllable scheme to train the generator on")
    rows = [build_row(ex, kb, config.variant, config.seed, config.max_length) for ex in examples]
    validation = [ex for ex in validation if eligible(ex, config.variant)] if validation else examples
    val_rows = rows if validation is examples else [build_row(ex, kb, config.variant, config.seed,
                                                              config.max_length) for ex in validation]
    vocab = vocab or generator_vocab([*examples, *validation], kb)
    model = new_generator(vocab, config)
    if init is not None:
        init(model)
    until = None
    if stop_when_exact is not None:
        until = lambda: exact_match_rate(model, rows, examples, kb) >= stop_when_exact  # noqa: E731
    trainlog = fit(model, len(rows), lambda idx: rows_loss(model, [rows[i] for i in idx]), config.settings(),
                   lambda: float(rows_loss(model, val_rows)), until)
    return model, trainlog


def save_generator(model: ArgU, path) -> None:
    save_checkpoint(path, model, "argu", asdict(model.config), vocab=model.vocab.to_json(),
                    special_tokens=list(SPECIAL_TOKENS))


def load_generator(path) -> ArgU:
    state, config, extra = load_checkpoint(path, "argu")
    if tuple(extra.get("special_tokens", ())) != SPECIAL_TOKENS:
        raise ModelStateError(f"{path}: special-token table differs from this build")
    model = ArgU(Vocab.from_json(extra["vocab"]), GeneratorConfig(**config))
    model.load_state_dict(state)
    model.eval()
    return model


def uniform_loss(vocab_size: int) -> float:
    return math.log(vocab_size)
