"""Synthetic one-to-many dialogue corpus with a known response distribution.

Every template context admits a fixed set of continuations with known
weights, so a :class:`~multiref.teacher.TemplateTeacher` built from the same
templates samples from the exact response distribution.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

from .corpus import DialogueSession, Utterance
from .teacher import TemplateTeacher

_ONSETS = "b d f g k l m n p r s t v z".split()
_VOWELS = "a e i o u".split()

OPENERS = "yes well sure oh ok hmm right no really maybe actually honestly".split()
VERBS = "like love hate want need see know miss use buy find keep".split()
OBJECTS = "it them this that one some more most".split()
OPENER_WEIGHTS = (0.7, 0.3)
BODY_WEIGHTS = (0.4, 0.3, 0.2, 0.1)


def topic_words(n: int) -> list[str]:
    words = ["".join(p) for p in itertools.product(_ONSETS, _VOWELS, _ONSETS, _VOWELS)]
    return words[:: max(1, len(words) // n)][:n]


@dataclass
class SyntheticCorpus:
    sessions: list[DialogueSession]
    templates: dict[str, list[tuple[str, float]]]

    def teacher(self, vocab=None) -> TemplateTeacher:
        return TemplateTeacher(self.templates, vocab)


def make_one_to_many_corpus(
    n_templates: int = 50,
    sessions_per_template: int = 6,
    seed: int = 0,
) -> SyntheticCorpus:
    """Build ``n_templates`` contexts with 8 weighted continuations each.

    A continuation is ``opener , i verb object topic .``: two openers and
    four verb/object bodies per template, drawn from shared word pools, with
    weights ``OPENER_WEIGHTS x BODY_WEIGHTS``. Each session pairs one context
    with one continuation sampled from that distribution.
    """
    rng = np.random.default_rng(seed)
    topics = topic_words(n_templates)
    templates: dict[str, list[tuple[str, float]]] = {}
    sessions: list[DialogueSession] = []
    for t, topic in enumerate(topics):
        context = f"what about the {topic} ?"
        openers = rng.choice(OPENERS, size=2, replace=False)
        verbs = rng.choice(VERBS, size=4, replace=False)
        objs = rng.choice(OBJECTS, size=4, replace=True)
        conts = []
        for (o, wo), (v, ob, wb) in itertools.product(
            zip(openers, OPENER_WEIGHTS), zip(verbs, objs, BODY_WEIGHTS)
        ):
            conts.append((f"{o} , i {v} {ob} {topic} .", wo * wb))
        templates[context] = conts
        probs = np.array([w for _, w in conts])
        for s in range(sessions_per_template):
            text = conts[int(rng.choice(len(conts), p=probs / probs.sum()))][0]
            sessions.append(
                DialogueSession(
                    f"syn-{t:03d}-{s}",
                    [Utterance(tuple(context.split()), "A"), Utterance(tuple(text.split()), "B")],
                )
            )
    order = rng.permutation(len(sessions))
    return SyntheticCorpus([sessions[i] for i in order], templates)
