"""Shared data types, label sets, the BIO span codec and JSONL corpus I/O."""

from __future__ import annotations

import enum
import json
import re
import unicodedata
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Mapping, Sequence

OTHERS = "OTHERS"
ALL = "ALL"

TOPICS = (
    "abortion",
    "minimum_wage",
    "nuclear_energy",
    "gun_control",
    "death_penalty",
    "school_uniform",
)

PROVENANCES = ("p1-human", "p1-auto", "pc-auto", "fixture")


class CorpusError(ValueError):
    """Raised on invalid corpus data; carries the offending line and field when known."""

    def __init__(self, message: str, line: int | None = None, field_name: str | None = None):
        where = []
        if line is not None:
            where.append(f"line {line}")
        if field_name is not None:
            where.append(f"field {field_name!r}")
        prefix = f"[{', '.join(where)}] " if where else ""
        super().__init__(prefix + message)
        self.line = line
        self.field_name = field_name


class ArgumentScheme(enum.Enum):
    FROM_CONSEQUENCE = "from_consequence"
    FROM_SOURCE_AUTHORITY = "from_source_authority"
    FROM_SOURCE_KNOWLEDGE = "from_source_knowledge"
    # goal-from-means is folded into means-for-goal
    GOAL_FROM_MEANS_MEANS_FOR_GOAL = "goal_from_means/means_for_goal"
    RULE_OR_PRINCIPLE = "rule_or_principle"
    OTHERS = "others"

    @property
    def snake(self) -> str:
        return _SNAKE[self]

    @property
    def control_token(self) -> str:
        if self is ArgumentScheme.OTHERS:
            raise ValueError("Others has no generation control code")
        return f"<{self.value}>"

    @classmethod
    def parse(cls, name: str) -> "ArgumentScheme":
        key = name.strip().lower()
        if key in _BY_NAME:
            return _BY_NAME[key]
        raise ValueError(f"unknown argument scheme {name!r}")


_SNAKE = {
    ArgumentScheme.FROM_CONSEQUENCE: "from_consequence",
    ArgumentScheme.FROM_SOURCE_AUTHORITY: "from_source_authority",
    ArgumentScheme.FROM_SOURCE_KNOWLEDGE: "from_source_knowledge",
    ArgumentScheme.GOAL_FROM_MEANS_MEANS_FOR_GOAL: "goal_from_means_means_for_goal",
    ArgumentScheme.RULE_OR_PRINCIPLE: "rule_or_principle",
    ArgumentScheme.OTHERS: "others",
}
_BY_NAME = {s.snake: s for s in ArgumentScheme}
_BY_NAME.update({s.value: s for s in ArgumentScheme})
_BY_NAME.update({s.name.lower(): s for s in ArgumentScheme})

SCHEMES: tuple[ArgumentScheme, ...] = tuple(ArgumentScheme)
CONTROL_SCHEMES: tuple[ArgumentScheme, ...] = tuple(s for s in SCHEMES if s is not ArgumentScheme.OTHERS)


class Stance(enum.Enum):
    PRO = "pro"
    CON = "con"

    @property
    def control_token(self) -> str:
        return f"<{self.value}>"

    @property
    def flipped(self) -> "Stance":
        return Stance.CON if self is Stance.PRO else Stance.PRO

    @classmethod
    def parse(cls, name: str) -> "Stance":
        try:
            return cls(name.strip().lower())
        except ValueError:
            raise ValueError(f"unknown stance {name!r}") from None


class BioTag(enum.IntEnum):
    B = 0
    I = 1  # noqa: E741
    O = 2  # noqa: E741


@dataclass(frozen=True)
class FactVariable:
    id: str
    text: str
    topic: str
    origin: str = "seed-kb"

    def __post_init__(self):
        if not self.id:
            raise CorpusError("variable id must be non-empty")
        if self.id == OTHERS:
            raise CorpusError(f"{OTHERS!r} is reserved and cannot be a KB entry")
        if not self.text.strip():
            raise CorpusError(f"variable {self.id!r} has empty text")
        if self.origin not in ("seed-kb", "expanded"):
            raise CorpusError(f"variable {self.id!r} has invalid origin {self.origin!r}")

    def to_record(self) -> dict:
        return {"id": self.id, "text": self.text, "topic": self.topic, "origin": self.origin}


class KnowledgeBase:
    """Fact variables keyed by id. Expansion returns a new KB; existing entries never change."""

    def __init__(self, variables: Iterable[FactVariable] = ()):
        self._vars: dict[str, FactVariable] = {}
        for v in variables:
            if v.id in self._vars:
                raise CorpusError(f"duplicate variable id {v.id!r}")
            self._vars[v.id] = v

    def __len__(self) -> int:
        return len(self._vars)

    def __iter__(self) -> Iterator[FactVariable]:
        return iter(self._vars.values())

    def __contains__(self, var_id: object) -> bool:
        return var_id in self._vars

    def __getitem__(self, var_id: str) -> FactVariable:
        try:
            return self._vars[var_id]
        except KeyError:
            raise KeyError(f"unknown fact variable {var_id!r}") from None

    def __eq__(self, other: object) -> bool:
        return isinstance(other, KnowledgeBase) and list(self) == list(other)

    @property
    def ids(self) -> list[str]:
        return list(self._vars)

    def by_topic(self, topic: str) -> list[FactVariable]:
        return [v for v in self._vars.values() if v.topic == topic]

    def find_text(self, text: str) -> FactVariable | None:
        for v in self._vars.values():
            if v.text == text:
                return v
        return None

    def with_variables(self, new: Iterable[FactVariable]) -> "KnowledgeBase":
        return KnowledgeBase([*self._vars.values(), *new])


# -- reference tokenizer -----------------------------------------------------

_TOKEN_RE = re.compile(r"<[A-Za-z_/]+(?:_\d+)?>|\w+(?:'\w+)?|[^\w\s]", re.UNICODE)


@dataclass(frozen=True)
class TokenizedText:
    raw: str
    tokens: tuple[str, ...]
    offsets: tuple[tuple[int, int], ...]

    def __post_init__(self):
        if len(self.tokens) != len(self.offsets):
            raise CorpusError("tokens and offsets differ in length")
        prev_end = 0
        for tok, (start, end) in zip(self.tokens, self.offsets):
            if not (prev_end <= start < end <= len(self.raw)):
                raise CorpusError(f"bad token offset ({start}, {end})")
            if self.raw[start:end] != tok:
                raise CorpusError(f"offset ({start}, {end}) does not cover token {tok!r}")
            prev_end = end

    def __len__(self) -> int:
        return len(self.tokens)

    def char_to_token_span(self, start: int, end: int) -> tuple[int, int]:
        """Smallest token range covering the character range [start, end)."""
        covered = [i for i, (s, e) in enumerate(self.offsets) if s < end and e > start]
        if not covered:
            raise CorpusError(f"character span ({start}, {end}) covers no token")
        return covered[0], covered[-1] + 1

    def token_to_char_span(self, start: int, end: int) -> tuple[int, int]:
        return self.offsets[start][0], self.offsets[end - 1][1]

    def span_text(self, start: int, end: int) -> str:
        a, b = self.token_to_char_span(start, end)
        return self.raw[a:b]


def tokenize(text: str) -> TokenizedText:
    """Whitespace-plus-punctuation tokenization with character offsets.

    Angle-bracket special tokens such as ``<VAR_0>`` stay atomic.
    """
    text = unicodedata.normalize("NFC", text)
    tokens, offsets = [], []
    for m in _TOKEN_RE.finditer(text):
        tokens.append(m.group())
        offsets.append((m.start(), m.end()))
    return TokenizedText(text, tuple(tokens), tuple(offsets))


# -- span labeling and BIO codec --------------------------------------------


@dataclass(frozen=True, order=True)
class Span:
    start: int
    end: int
    grounding: str = OTHERS


@dataclass(frozen=True)
class SpanLabeling:
    spans: tuple[Span, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "spans", tuple(sorted(self.spans)))
        for a, b in zip(self.spans, self.spans[1:]):
            if b.start < a.end:
                raise CorpusError(f"overlapping spans {a} and {b}")
        for s in self.spans:
            if not (0 <= s.start < s.end):
                raise CorpusError(f"invalid span bounds {s}")

    @classmethod
    def of(cls, *triples) -> "SpanLabeling":
        return cls(tuple(Span(*t) for t in triples))

    def __len__(self) -> int:
        return len(self.spans)

    def __iter__(self) -> Iterator[Span]:
        return iter(self.spans)

    def erase_groundings(self) -> "SpanLabeling":
        return SpanLabeling(tuple(Span(s.start, s.end, OTHERS) for s in self.spans))

    def groundings(self) -> list[str]:
        return [s.grounding for s in self.spans]

    def check_range(self, token_count: int) -> None:
        for s in self.spans:
            if s.end > token_count:
                raise IndexError(f"span {s} exceeds token count {token_count}")


def encode_bio(labeling: SpanLabeling, token_count: int, channel: str = ALL) -> list[BioTag]:
    """Tag sequence for one grounding channel, or for all spans when ``channel`` is ALL."""
    labeling.check_range(token_count)
    tags = [BioTag.O] * token_count
    for s in labeling:
        if channel != ALL and s.grounding != channel:
            continue
        tags[s.start] = BioTag.B
        for i in range(s.start + 1, s.end):
            tags[i] = BioTag.I
    return tags


def encode_bio_channels(labeling: SpanLabeling, token_count: int, channels: Sequence[str]) -> list[list[BioTag]]:
    return [encode_bio(labeling, token_count, c) for c in channels]


def decode_bio(tags: Sequence[BioTag | int | str], grounding: str = OTHERS, strict: bool = False) -> SpanLabeling:
    """Turn a tag sequence back into spans.

    An orphan I (no preceding B or I) opens a new span unless ``strict`` is set,
    in which case it raises.
    """
    spans = []
    start = None
    for i, t in enumerate(tags):
        t = _as_tag(t)
        if t is BioTag.B:
            if start is not None:
                spans.append(Span(start, i, grounding))
            start = i
        elif t is BioTag.I:
            if start is None:
                if strict:
                    raise CorpusError(f"orphan I tag at position {i}")
                start = i
        else:
            if start is not None:
                spans.append(Span(start, i, grounding))
            start = None
    if start is not None:
        spans.append(Span(start, len(tags), grounding))
    return SpanLabeling(tuple(spans))


def decode_bio_channels(channel_tags: Sequence[Sequence[BioTag]], channels: Sequence[str]) -> SpanLabeling:
    spans = []
    for tags, name in zip(channel_tags, channels):
        spans.extend(decode_bio(tags, grounding=name).spans)
    return SpanLabeling(tuple(spans))


def _as_tag(t) -> BioTag:
    if isinstance(t, BioTag):
        return t
    if isinstance(t, str):
        return BioTag[t]
    return BioTag(int(t))


# -- annotated examples ------------------------------------------------------


@dataclass(frozen=True)
class AnnotatedExample:
    id: str
    topic: str
    argument: TokenizedText
    stance: Stance
    schemes: frozenset[ArgumentScheme] = frozenset()
    scheme_probs: Mapping[ArgumentScheme, float] | None = None
    spans: SpanLabeling = field(default_factory=SpanLabeling)
    variables: tuple[str, ...] = ()
    provenance: str = "fixture"

    def __post_init__(self):
        self.spans.check_range(len(self.argument))
        if len(set(self.variables)) != len(self.variables):
            raise CorpusError(f"example {self.id!r} lists duplicate variables")
        if self.provenance not in PROVENANCES:
            raise CorpusError(f"example {self.id!r} has invalid provenance {self.provenance!r}")
        if self.scheme_probs is not None:
            for s, p in self.scheme_probs.items():
                if not 0.0 <= p <= 1.0:
                    raise CorpusError(f"example {self.id!r}: probability {p} for {s.snake} outside [0, 1]")

    @property
    def text(self) -> str:
        return self.argument.raw

    def span_text(self, span: Span) -> str:
        return self.argument.span_text(span.start, span.end)

    def top_scheme(self) -> ArgumentScheme:
        if not self.scheme_probs:
            raise CorpusError(f"example {self.id!r} carries no scheme probabilities")
        # ties go to declaration order
        return max(SCHEMES, key=lambda s: (self.scheme_probs.get(s, 0.0), -SCHEMES.index(s)))

    def replace(self, **changes) -> "AnnotatedExample":
        from dataclasses import replace

        return replace(self, **changes)

    def validate_against(self, kb: KnowledgeBase) -> None:
        for s in self.spans:
            if s.grounding != OTHERS and s.grounding not in kb:
                raise CorpusError(f"example {self.id!r}: grounding {s.grounding!r} not in KB")


def example_to_record(ex: AnnotatedExample) -> dict:
    rec = {
        "id": ex.id,
        "topic": ex.topic,
        "text": ex.text,
        "stance": ex.stance.value,
        "schemes": [s.snake for s in SCHEMES if s in ex.schemes],
        "spans": [[*ex.argument.token_to_char_span(s.start, s.end), s.grounding] for s in ex.spans],
        "variables": list(ex.variables),
        "provenance": ex.provenance,
    }
    if ex.scheme_probs is not None:
        rec["scheme_probs"] = {s.snake: float(ex.scheme_probs[s]) for s in SCHEMES if s in ex.scheme_probs}
    return rec


_REQUIRED = ("id", "topic", "text", "stance", "schemes", "spans", "variables", "provenance")


def example_from_record(rec: Mapping, line: int | None = None) -> AnnotatedExample:
    for key in _REQUIRED:
        if key not in rec:
            raise CorpusError("missing field", line, key)
    unknown = set(rec) - set(_REQUIRED) - {"scheme_probs"}
    if unknown:
        raise CorpusError(f"unknown fields {sorted(unknown)}", line)
    try:
        stance = Stance.parse(rec["stance"])
    except (ValueError, AttributeError) as e:
        raise CorpusError(str(e), line, "stance") from None
    try:
        schemes = frozenset(ArgumentScheme.parse(s) for s in rec["schemes"])
    except (ValueError, AttributeError) as e:
        raise CorpusError(str(e), line, "schemes") from None
    probs = None
    if rec.get("scheme_probs") is not None:
        try:
            probs = {ArgumentScheme.parse(k): float(v) for k, v in rec["scheme_probs"].items()}
        except (ValueError, AttributeError, TypeError) as e:
            raise CorpusError(str(e), line, "scheme_probs") from None
    if not isinstance(rec["text"], str):
        raise CorpusError("text must be a string", line, "text")
    argument = tokenize(rec["text"])
    try:
        spans = []
        for item in rec["spans"]:
            a, b, g = item
            ta, tb = argument.char_to_token_span(int(a), int(b))
            spans.append(Span(ta, tb, str(g)))
        labeling = SpanLabeling(tuple(spans))
    except (CorpusError, ValueError, TypeError) as e:
        raise CorpusError(f"bad spans: {e}", line, "spans") from None
    try:
        return AnnotatedExample(
            id=str(rec["id"]),
            topic=str(rec["topic"]),
            argument=argument,
            stance=stance,
            schemes=schemes,
            scheme_probs=probs,
            spans=labeling,
            variables=tuple(str(v) for v in rec["variables"]),
            provenance=str(rec["provenance"]),
        )
    except (CorpusError, IndexError) as e:
        raise CorpusError(str(e), line) from None


def read_corpus(path: str | Path) -> Iterator[AnnotatedExample]:
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as e:
                raise CorpusError(f"malformed JSON: {e.msg}", lineno) from None
            if not isinstance(rec, dict):
                raise CorpusError("record is not an object", lineno)
            yield example_from_record(rec, lineno)


def write_corpus(examples: Iterable[AnnotatedExample], path: str | Path) -> int:
    n = 0
    with open(path, "w", encoding="utf-8") as f:
        for ex in examples:
            f.write(json.dumps(example_to_record(ex), sort_keys=True, ensure_ascii=False) + "\n")
            n += 1
    return n


def read_kb(path: str | Path) -> KnowledgeBase:
    variables = []
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                variables.append(
                    FactVariable(rec["id"], rec["text"], rec["topic"], rec.get("origin", "seed-kb"))
                )
            except json.JSONDecodeError as e:
                raise CorpusError(f"malformed JSON: {e.msg}", lineno) from None
            except KeyError as e:
                raise CorpusError("missing field", lineno, e.args[0]) from None
            except CorpusError as e:
                raise CorpusError(str(e), lineno) from None
    return KnowledgeBase(variables)


def write_kb(kb: KnowledgeBase, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for v in kb:
            f.write(json.dumps(v.to_record(), sort_keys=True, ensure_ascii=False) + "\n")
