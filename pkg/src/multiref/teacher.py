"""Teacher generators, nucleus sampling and multi-reference dataset construction."""

from __future__ import annotations

import json
import logging
import math
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Protocol, Sequence

import numpy as np

from .corpus import EOS, UNK, ContextResponsePair, Utterance, Vocabulary

logger = logging.getLogger(__name__)

DEFAULT_TOP_P = 0.95
DEFAULT_MAX_LEN = 40
DIST_TOL = 1e-6


class TeacherError(RuntimeError):
    """A teacher produced an invalid next-token distribution."""


class Teacher(Protocol):
    """Anything that can score the next token given a context and a prefix.

    ``vocab`` lists the teacher's tokens; position ``i`` of every returned
    distribution is the probability of ``vocab[i]``. ``vocab`` must contain
    the end-of-sequence token.
    """

    name: str
    vocab: Sequence[str]

    def next_token_dist(
        self, context_tokens: Sequence[Sequence[str]], prefix_tokens: Sequence[str]
    ) -> np.ndarray: ...


def check_distribution(dist: np.ndarray, size: int | None = None) -> np.ndarray:
    dist = np.asarray(dist, dtype=np.float64)
    if dist.ndim != 1 or (size is not None and dist.shape[0] != size):
        raise TeacherError(f"distribution has shape {dist.shape}, expected ({size},)")
    if not np.all(np.isfinite(dist)) or np.any(dist < 0):
        raise TeacherError("distribution has negative or non-finite entries")
    if abs(dist.sum() - 1.0) > DIST_TOL:
        raise TeacherError(f"distribution sums to {dist.sum():.8f}")
    return dist


def nucleus_filter(dist: np.ndarray, p: float) -> np.ndarray:
    """Keep the smallest top-probability token set whose mass reaches ``p``.

    Tokens are ranked by descending probability, ties by ascending id. The
    kept entries are renormalized and everything else is set to zero.
    """
    if not 0.0 < p <= 1.0:
        raise ValueError(f"top-p must be in (0, 1], got {p}")
    dist = np.asarray(dist, dtype=np.float64)
    if abs(dist.sum() - 1.0) > DIST_TOL:
        raise ValueError(f"distribution sums to {dist.sum():.8f}")
    order = np.lexsort((np.arange(dist.size), -dist))
    cum = np.cumsum(dist[order])
    n_keep = int(np.searchsorted(cum, p - 1e-12, side="left")) + 1
    n_keep = min(n_keep, dist.size)
    out = np.zeros_like(dist)
    keep = order[:n_keep]
    out[keep] = dist[keep]
    return out / out.sum()


def _draw(dist: np.ndarray, rng: np.random.Generator) -> int:
    cdf = np.cumsum(dist)
    idx = int(np.searchsorted(cdf, rng.random() * cdf[-1], side="right"))
    # guard against a draw landing on trailing zero-mass entries
    nz = np.flatnonzero(dist)
    return idx if idx < dist.size and dist[idx] > 0 else int(nz[-1])


def _rng(seed) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


def sample_response(
    teacher: Teacher,
    context: Sequence[Utterance] | Sequence[Sequence[str]],
    p: float = DEFAULT_TOP_P,
    max_len: int = DEFAULT_MAX_LEN,
    seed: int | np.random.Generator | None = None,
    floor: str | None = None,
) -> Utterance:
    """Ancestral nucleus sampling from ``teacher`` until EOS or ``max_len`` tokens."""
    rng = _rng(seed)
    ctx_tokens = [list(u.tokens) if isinstance(u, Utterance) else list(u) for u in context]
    vocab = list(teacher.vocab)
    eos = vocab.index(EOS)
    prefix: list[str] = []
    while len(prefix) < max_len:
        dist = check_distribution(teacher.next_token_dist(ctx_tokens, prefix), len(vocab))
        tok = _draw(nucleus_filter(dist, p), rng)
        if tok == eos:
            break
        prefix.append(vocab[tok])
    if floor is None:
        last = context[-1] if context else None
        floor = "B" if isinstance(last, Utterance) and last.floor == "A" else "A"
    return Utterance(tuple(prefix), floor)


# ---------------------------------------------------------------------------
# Multi-reference data


@dataclass
class Reference:
    utterance: Utterance
    weight: float
    source: str  # "ground-truth" | "hypothesis"


@dataclass
class MultiRefExample:
    pair_id: str
    context: list[Utterance]
    references: list[Reference] = field(default_factory=list)

    def as_pairs(self) -> list[ContextResponsePair]:
        """One training instance per reference (uniform weights by replication)."""
        return [
            ContextResponsePair(f"{self.pair_id}/{i}", self.context, ref.utterance)
            for i, ref in enumerate(self.references)
        ]


def pair_seed(seed: int, pair_id: str) -> np.random.SeedSequence:
    return np.random.SeedSequence([seed, zlib.crc32(pair_id.encode("utf-8"))])


def build_multiref_dataset(
    pairs: Iterable[ContextResponsePair],
    teacher: Teacher,
    n: int,
    include_gt: bool = False,
    p: float = DEFAULT_TOP_P,
    max_len: int = DEFAULT_MAX_LEN,
    seed: int = 0,
) -> list[MultiRefExample]:
    """Sample ``n`` hypotheses per pair; optionally keep the ground truth too.

    Each pair draws from its own seed stream derived from ``(seed, pair_id)``,
    so the output does not depend on iteration order. Duplicated hypotheses
    are kept. Pairs on which the teacher fails are skipped with a warning.
    """
    if n < 1:
        raise ValueError(f"need at least one hypothesis per context, got {n}")
    total = n + int(include_gt)
    out = []
    for pair in pairs:
        rng = np.random.default_rng(pair_seed(seed, pair.pair_id))
        try:
            hyps = [
                sample_response(teacher, pair.context, p, max_len, rng, floor=pair.response.floor)
                for _ in range(n)
            ]
        except TeacherError as exc:
            logger.warning("skipping %s: teacher failed (%s)", pair.pair_id, exc)
            continue
        refs = [Reference(h, 1.0 / total, "hypothesis") for h in hyps]
        if include_gt:
            refs.append(Reference(pair.response, 1.0 / total, "ground-truth"))
        out.append(MultiRefExample(pair.pair_id, list(pair.context), refs))
    return out


def token_distill_targets(
    teacher: Teacher,
    context: Sequence[Utterance],
    reference: Sequence[str],
    student_vocab: Vocabulary | Sequence[str],
) -> np.ndarray:
    """Teacher next-token distributions along ``reference`` (one row per token).

    Row ``l`` is the teacher distribution given the context and
    ``reference[:l]``. Pass the reference with its EOS token appended to
    also distill the stopping decision.
    """
    student_tokens = list(student_vocab.id2token if isinstance(student_vocab, Vocabulary) else student_vocab)
    if list(teacher.vocab) != student_tokens:
        raise ValueError("token-level distillation needs identical teacher and student vocabularies")
    ctx = [list(u.tokens) for u in context]
    rows = [
        check_distribution(teacher.next_token_dist(ctx, list(reference[:l])), len(student_tokens))
        for l in range(len(reference))
    ]
    return np.stack(rows) if rows else np.zeros((0, len(student_tokens)))


# (hypotheses per context, ground truth included) -> (max epochs, max steps)
# steps count training instances, i.e. epochs x references x 59,305 pairs
EPOCH_TABLE = {
    (0, True): (100, 5.93e6),
    (1, False): (100, 5.93e6),
    (1, True): (50, 5.93e6),
    (5, False): (20, 5.93e6),
    (5, True): (20, 7.12e6),
    (20, False): (10, 11.86e6),
    (20, True): (10, 12.45e6),
    (100, False): (2, 11.86e6),
    (100, True): (2, 11.98e6),
}
DAILYDIALOG_TRAIN_PAIRS = 59305


def epoch_budget(n: int, include_gt: bool = False, n_pairs: int = DAILYDIALOG_TRAIN_PAIRS) -> tuple[int, int]:
    """Maximum epochs and training instances for ``n`` hypotheses per context.

    Settings from the published table are returned as listed (with steps
    rescaled when ``n_pairs`` differs from the table's corpus). Other
    settings get ``round(200 / references)`` epochs, at least one.
    """
    refs = n + int(include_gt)
    if refs < 1:
        raise ValueError("need at least one reference per context")
    if (n, include_gt) in EPOCH_TABLE:
        epochs, steps = EPOCH_TABLE[(n, include_gt)]
        if n_pairs != DAILYDIALOG_TRAIN_PAIRS:
            steps = epochs * refs * n_pairs
        return epochs, int(round(steps))
    epochs = max(1, int(round(200 / refs)))
    return epochs, epochs * refs * n_pairs


# ---------------------------------------------------------------------------
# Desk-scale teachers


class UniformTeacher:
    """Uniform next-token distribution over ``vocab``."""

    name = "uniform"

    def __init__(self, vocab: Sequence[str]):
        self.vocab = list(vocab)

    def next_token_dist(self, context_tokens, prefix_tokens):
        return np.full(len(self.vocab), 1.0 / len(self.vocab))


class ScriptTeacher:
    """Deterministically emits a fixed token script, then EOS."""

    name = "script"

    def __init__(self, vocab: Sequence[str], script: Sequence[str]):
        self.vocab = list(vocab)
        self.script = list(script)
        self._index = {t: i for i, t in enumerate(self.vocab)}

    def next_token_dist(self, context_tokens, prefix_tokens):
        n = len(prefix_tokens)
        tok = self.script[n] if n < len(self.script) else EOS
        out = np.zeros(len(self.vocab))
        out[self._index[tok]] = 1.0
        return out


class TemplateTeacher:
    """Exact distribution over a finite set of continuations per context.

    ``templates`` maps the text of the last context utterance to a list of
    ``(continuation_text, weight)``. The next-token distribution is the
    weight mass of continuations consistent with the prefix.
    """

    name = "template"

    def __init__(self, templates: dict[str, list[tuple[str, float]]], vocab: Sequence[str] | None = None):
        self.templates = {
            key: [(tuple(text.split()), float(w)) for text, w in conts] for key, conts in templates.items()
        }
        if vocab is None:
            from .corpus import RESERVED_TOKENS

            toks = sorted({t for conts in self.templates.values() for c, _ in conts for t in c})
            vocab = list(RESERVED_TOKENS) + toks
        self.vocab = list(vocab)
        self._index = {t: i for i, t in enumerate(self.vocab)}
        # continuation words outside a supplied vocabulary count as UNK
        self._unk = self._index.get(UNK)

    def next_token_dist(self, context_tokens, prefix_tokens):
        if not context_tokens:
            raise TeacherError("template teacher needs a non-empty context")
        key = " ".join(context_tokens[-1])
        conts = self.templates.get(key)
        if conts is None:
            raise TeacherError(f"no template for context {key!r}")
        prefix = tuple(prefix_tokens)
        out = np.zeros(len(self.vocab))
        n = len(prefix)
        for cont, w in conts:
            if cont[:n] != prefix:
                continue
            tok = cont[n] if n < len(cont) else EOS
            idx = self._index.get(tok, self._unk)
            if idx is None:
                raise TeacherError(f"token {tok!r} is outside the teacher vocabulary")
            out[idx] += w
        total = out.sum()
        if total <= 0:
            raise TeacherError(f"prefix {prefix!r} is not a template continuation")
        return out / total

    def save(self, path: str | Path) -> None:
        data = {k: [[" ".join(c), w] for c, w in conts] for k, conts in self.templates.items()}
        Path(path).write_text(json.dumps(data, indent=1, sort_keys=True), encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path, vocab: Sequence[str] | None = None) -> "TemplateTeacher":
        data = json.loads(Path(path).read_text(encoding="utf-8"))
        return cls({k: [(t, w) for t, w in v] for k, v in data.items()}, vocab)


class ModelTeacher:
    """Uses a trained student-architecture model as the teacher.

    The model's latent (if any) is fixed at the prior mean so that the
    next-token distribution is a deterministic function of its inputs.
    """

    name = "model"

    def __init__(self, model, vocab: Vocabulary):
        self.model = model.eval()
        self.vocabulary = vocab
        self.vocab = list(vocab.id2token)

    def next_token_dist(self, context_tokens, prefix_tokens):
        from .models import context_utterances

        utts = context_utterances(context_tokens)
        probs = self.model.next_token_probs(utts, self.vocabulary.encode(prefix_tokens), self.vocabulary)
        probs = np.asarray(probs, dtype=np.float64)
        return probs / probs.sum()


def write_multiref(path: str | Path, examples: Iterable[MultiRefExample]) -> int:
    n = 0
    with open(path, "w", encoding="utf-8") as fh:
        for ex in examples:
            rec = {
                "pair_id": ex.pair_id,
                "context": [{"floor": u.floor, "text": u.text} for u in ex.context],
                "references": [
                    {"text": r.utterance.text, "floor": r.utterance.floor, "weight": r.weight, "source": r.source}
                    for r in ex.references
                ],
            }
            fh.write(json.dumps(rec, ensure_ascii=False) + "\n")
            n += 1
    return n


def read_multiref(path: str | Path) -> list[MultiRefExample]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if not line.strip():
                continue
            rec = json.loads(line)
            ctx = [Utterance(tuple(u["text"].split()), u.get("floor", "A")) for u in rec["context"]]
            refs = [
                Reference(Utterance(tuple(r["text"].split()), r.get("floor", "A")), float(r["weight"]), r["source"])
                for r in rec["references"]
            ]
            if refs and not math.isclose(sum(r.weight for r in refs), 1.0, abs_tol=1e-6):
                raise ValueError(f"{rec['pair_id']}: reference weights do not sum to 1")
            out.append(MultiRefExample(rec["pair_id"], ctx, refs))
    return out
