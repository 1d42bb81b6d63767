"""Deterministic synthetic corpora standing in for the annotated argument data.

Every argument is realised from one sentence skeleton per (scheme, stance)
with two fact slots, each mentioned twice, so scheme labels are learnable
from the connective text alone and every fact variable occurs twice.
"""

from __future__ import annotations

import random
from dataclasses import dataclass

from .corpus import (CONTROL_SCHEMES, TOPICS, AnnotatedExample, ArgumentScheme, FactVariable, KnowledgeBase, Span,
                     SpanLabeling, Stance, tokenize)

S = ArgumentScheme

SKELETONS: dict[tuple[ArgumentScheme, Stance], str] = {
    (S.FROM_CONSEQUENCE, Stance.PRO): "{0} is favourable as it brings {1} , and {1} follows from {0} .",
    (S.FROM_CONSEQUENCE, Stance.CON): "{0} is not favourable as it brings {1} , and {1} suffers from {0} .",
    (S.FROM_SOURCE_AUTHORITY, Stance.PRO): "experts say {0} supports {1} , so officials back {0} for {1} .",
    (S.FROM_SOURCE_AUTHORITY, Stance.CON): "experts say {0} undermines {1} , so officials oppose {0} despite {1} .",
    (S.FROM_SOURCE_KNOWLEDGE, Stance.PRO): "studies have shown that {0} improves {1} , as data on {1} confirm {0} works .",
    (S.FROM_SOURCE_KNOWLEDGE, Stance.CON): "studies have shown that {0} harms {1} , as data on {1} reveal {0} fails .",
    (S.GOAL_FROM_MEANS_MEANS_FOR_GOAL, Stance.PRO): "we should pursue {0} to achieve {1} , because {1} requires {0} .",
    (S.GOAL_FROM_MEANS_MEANS_FOR_GOAL, Stance.CON): "we should avoid {0} to protect {1} , because {1} erodes under {0} .",
    (S.RULE_OR_PRINCIPLE, Stance.PRO): "{0} is consistent with the principle of {1} , and {1} demands {0} .",
    (S.RULE_OR_PRINCIPLE, Stance.CON): "{0} is a violation of {1} , and {1} forbids {0} .",
    (S.OTHERS, Stance.PRO): "{0} and {1} keep coming up , and people mention {0} next to {1} .",
    (S.OTHERS, Stance.CON): "{0} and {1} rarely come up , and people ignore {0} next to {1} .",
}

FACTS: dict[str, list[str]] = {
    "abortion": [
        "reproductive rights", "access to abortion", "unintended pregnancies", "maternal health",
        "birth defects", "bodily autonomy", "late term procedures", "family planning clinics",
        "adoption services", "prenatal care",
    ],
    "minimum_wage": [
        "the minimum wage", "income inequality", "youth unemployment", "small business costs",
        "worker productivity", "consumer spending", "living wage laws", "employee turnover",
        "price inflation", "poverty rates",
    ],
    "nuclear_energy": [
        "nuclear power plants", "carbon emissions", "radioactive waste", "energy security",
        "reactor accidents", "uranium mining", "renewable energy", "electricity prices",
        "grid stability", "decommissioning costs",
    ],
    "gun_control": [
        "gun laws", "gun violence", "background checks", "assault weapons",
        "self defense", "mass shootings", "concealed carry permits", "firearm ownership",
        "suicide rates", "the second amendment",
    ],
    "death_penalty": [
        "the death penalty", "human rights", "mandatory death sentence", "wrongful convictions",
        "crime deterrence", "racial bias", "life imprisonment", "victim families",
        "execution costs", "lethal injection",
    ],
    "school_uniform": [
        "school uniforms", "student discipline", "freedom of expression", "bullying incidents",
        "family clothing costs", "school safety", "academic performance", "dress codes",
        "peer pressure", "school identity",
    ],
}

# facts absent from the seed KB, used to exercise KB expansion
NOVEL_FACTS: dict[str, list[str]] = {
    "abortion": ["fetal pain research", "clinic closures"],
    "minimum_wage": ["automation of cashiers", "regional cost differences"],
    "nuclear_energy": ["thorium reactors", "cooling water use"],
    "gun_control": ["ghost guns", "red flag orders"],
    "death_penalty": ["appeal backlogs", "forensic errors"],
    "school_uniform": ["gender neutral options", "uniform vouchers"],
}

ADVERBS = ("clearly", "indeed", "arguably", "frankly", "honestly", "plainly", "surely", "truly")
PARAPHRASE_PREFIXES = ("present day", "widely debated", "so called", "long standing")


@dataclass
class FixtureSpec:
    num_topics: int = 6
    examples_per_topic: int = 16
    kb_size: int = 8  # seed facts per topic
    vocabulary: int = 4  # filler adverbs available to the noise process
    noise_rate: float = 0.1
    pc_examples_per_topic: int = 16
    seed: int = 0

    def __post_init__(self):
        if not 1 <= self.num_topics <= len(TOPICS):
            raise ValueError(f"num_topics must be in 1..{len(TOPICS)}")
        if self.examples_per_topic < 0 or self.pc_examples_per_topic < 0:
            raise ValueError("example counts must be non-negative")
        if not 2 <= self.kb_size <= len(FACTS[TOPICS[0]]):
            raise ValueError(f"kb_size must be in 2..{len(FACTS[TOPICS[0]])}")
        if not 1 <= self.vocabulary <= len(ADVERBS):
            raise ValueError(f"vocabulary must be in 1..{len(ADVERBS)}")
        if not 0.0 <= self.noise_rate <= 1.0:
            raise ValueError("noise_rate must be in [0, 1]")


def seed_kb(spec: FixtureSpec) -> KnowledgeBase:
    variables = []
    for topic in TOPICS[:spec.num_topics]:
        for k, text in enumerate(FACTS[topic][:spec.kb_size]):
            variables.append(FactVariable(f"{topic}_{k:02d}", text, topic))
    return KnowledgeBase(variables)


def realise(skeleton: str, fillers: tuple[str, str], prefix: str = "") -> tuple[str, list[tuple[int, int, int]]]:
    """Fill the skeleton; return text and (char start, char end, slot) per mention."""
    text = prefix
    mentions = []
    i = 0
    while i < len(skeleton):
        if skeleton[i] == "{":
            slot = int(skeleton[i + 1])
            start = len(text)
            text += fillers[slot]
            mentions.append((start, len(text), slot))
            i += 3
        else:
            text += skeleton[i]
            i += 1
    return text, mentions


def make_example(ex_id: str, topic: str, scheme: ArgumentScheme, stance: Stance, variables: list[FactVariable],
                 provenance: str = "fixture", prefix: str = "", surface: tuple[str, str] | None = None,
                 labelled: bool = True) -> AnnotatedExample:
    fillers = surface or (variables[0].text, variables[1].text)
    text, mentions = realise(SKELETONS[(scheme, stance)], fillers, prefix)
    tok = tokenize(text)
    spans = []
    if labelled:
        for a, b, slot in mentions:
            ta, tb = tok.char_to_token_span(a, b)
            spans.append(Span(ta, tb, variables[slot].id))
    return AnnotatedExample(
        id=ex_id, topic=topic, argument=tok, stance=stance,
        schemes=frozenset([scheme]) if labelled else frozenset(),
        spans=SpanLabeling(tuple(spans)),
        variables=tuple(v.id for v in variables) if labelled else (),
        provenance=provenance,
    )


def fixture_corpus(spec: FixtureSpec) -> tuple[list[AnnotatedExample], list[AnnotatedExample], KnowledgeBase]:
    """(human-seeded corpus with gold labels, unlabelled parallel corpus, seed KB)."""
    rng = random.Random(spec.seed)
    kb = seed_kb(spec)
    schemes = list(ArgumentScheme)
    adverbs = ADVERBS[:spec.vocabulary]
    p1, pc = [], []
    for topic in TOPICS[:spec.num_topics]:
        facts = kb.by_topic(topic)
        for i in range(spec.examples_per_topic):
            scheme = schemes[i % len(schemes)] if i < len(schemes) else rng.choice(schemes)
            stance = rng.choice([Stance.PRO, Stance.CON])
            pair = rng.sample(facts, 2)
            prefix = f"{rng.choice(adverbs)} , " if rng.random() < spec.noise_rate else ""
            p1.append(make_example(f"p1-{topic}-{i:04d}", topic, scheme, stance, pair, "fixture", prefix))
        novel = NOVEL_FACTS[topic]
        for i in range(spec.pc_examples_per_topic):
            scheme = rng.choice(schemes)
            stance = rng.choice([Stance.PRO, Stance.CON])
            pair = rng.sample(facts, 2)
            surface = []
            for fact in pair:
                r = rng.random()
                if r < 0.6:
                    surface.append(fact.text)
                elif r < 0.85:
                    surface.append(f"{rng.choice(PARAPHRASE_PREFIXES)} {fact.text}")
                else:
                    surface.append(rng.choice(novel))
            if surface[0] == surface[1]:
                surface[1] = pair[1].text
            prefix = f"{rng.choice(adverbs)} , " if rng.random() < spec.noise_rate else ""
            pc.append(make_example(f"pc-{topic}-{i:04d}", topic, scheme, stance, pair, "pc-auto", prefix,
                                   surface=tuple(surface), labelled=False))
    return p1, pc, kb


def control_fixture(n_variable_sets: int = 4, n_schemes: int = 4, seed: int = 0,
                    topic: str = "death_penalty") -> tuple[list[AnnotatedExample], KnowledgeBase]:
    """Every (variable pair, stance, scheme) combination once.

    Targets are a deterministic function of the control codes and the
    variables, and flipping either code lands on another training example.
    """
    rng = random.Random(seed)
    facts = [FactVariable(f"{topic}_{k:02d}", t, topic) for k, t in enumerate(FACTS[topic])]
    kb = KnowledgeBase(facts)
    # each variable is mentioned twice, so phrases longer than two words would
    # repeat a trigram and could never be decoded under trigram blocking
    short = [f for f in facts if len(f.text.split()) <= 2]
    pairs = []
    while len(pairs) < n_variable_sets:
        pair = tuple(rng.sample(short, 2))
        if pair not in pairs:
            pairs.append(pair)
    schemes = CONTROL_SCHEMES[:n_schemes]
    examples = []
    for p, pair in enumerate(pairs):
        for scheme in schemes:
            for stance in (Stance.PRO, Stance.CON):
                ex_id = f"ctl-{p}-{scheme.snake}-{stance.value}"
                examples.append(make_example(ex_id, topic, scheme, stance, list(pair), "fixture"))
    return examples, kb


def flip_scheme(scheme: ArgumentScheme, n_schemes: int = 4) -> ArgumentScheme:
    used = CONTROL_SCHEMES[:n_schemes]
    return used[(used.index(scheme) + 1) % len(used)]
