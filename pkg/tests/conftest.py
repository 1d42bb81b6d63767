import random
import sys
from pathlib import Path

import numpy as np
import pytest
import torch

sys.path.insert(0, str(Path(__file__).parent))

from factarg.corpus import Span, SpanLabeling  # noqa: E402
from factarg.fixtures import FixtureSpec, fixture_corpus  # noqa: E402

torch.set_num_threads(1)

# acceptance criterion results, printed in the terminal summary
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture(autouse=True)
def _seed():
    random.seed(0)
    np.random.seed(0)
    torch.manual_seed(0)


@pytest.fixture(scope="session")
def small_corpus():
    """8 labelled examples from one topic plus the KB."""
    p1, _, kb = fixture_corpus(FixtureSpec(num_topics=1, examples_per_topic=8, pc_examples_per_topic=0))
    return p1, kb


@pytest.fixture(scope="session")
def two_topic_corpus():
    return fixture_corpus(FixtureSpec(num_topics=2, examples_per_topic=16, pc_examples_per_topic=16))


def random_labeling(rng: random.Random, n: int, groundings=("OTHERS",), max_spans: int = 4) -> SpanLabeling:
    """Random valid labeling over ``n`` tokens; spans may touch."""
    spans, p = [], 0
    while p < n and len(spans) < max_spans:
        p += rng.choice([0, 0, 1, 2])
        if p >= n:
            break
        length = rng.randint(1, min(4, n - p))
        spans.append(Span(p, p + length, rng.choice(groundings)))
        p += length
    return SpanLabeling(tuple(spans))
