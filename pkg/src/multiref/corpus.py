"""Dialogue corpus ingestion: normalization, deduplication, splits, pairs, vocabulary."""

from __future__ import annotations

import hashlib
import json
import math
import re
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

PAD, UNK, BOS, EOS = "<pad>", "<unk>", "<bos>", "<eos>"
RESERVED_TOKENS = (PAD, UNK, BOS, EOS)

MAX_UTTERANCE_LEN = 40
MAX_HISTORY = 5

FLOORS = ("A", "B")


class EmptyUtteranceError(ValueError):
    """Raised when an utterance has no tokens left after normalization."""


class CorpusFormatError(ValueError):
    """Raised for records that do not follow the session schema.

    ``problems`` holds one ``(line_number, message)`` entry per bad record.
    """

    def __init__(self, problems: list[tuple[int, str]]):
        self.problems = problems
        lines = "; ".join(f"line {n}: {msg}" for n, msg in problems[:10])
        super().__init__(f"{len(problems)} malformed record(s): {lines}")


@dataclass(frozen=True)
class Utterance:
    tokens: tuple[str, ...]
    floor: str = "A"

    def __post_init__(self):
        object.__setattr__(self, "tokens", tuple(self.tokens))

    @property
    def text(self) -> str:
        return " ".join(self.tokens)

    def truncated(self, max_len: int = MAX_UTTERANCE_LEN) -> "Utterance":
        if len(self.tokens) <= max_len:
            return self
        return Utterance(self.tokens[:max_len], self.floor)

    def __len__(self) -> int:
        return len(self.tokens)


@dataclass
class DialogueSession:
    session_id: str
    utterances: list[Utterance]


@dataclass
class ContextResponsePair:
    """A response together with the utterances immediately preceding it.

    ``index`` is the response position inside its session, which lets
    callers recover the session position of every context utterance.
    """

    pair_id: str
    context: list[Utterance]
    response: Utterance
    session_id: str = ""
    index: int = 0


# ---------------------------------------------------------------------------
# Normalization

_SPACED_CLITIC = re.compile(r"(\w)\s*'\s*(m|s|re|ve|ll|d)\b")
_SPACED_NEG = re.compile(r"(\w)n\s*'\s*t\b")
_PUNCT = re.compile(r"([.,!?;:\"()\[\]])")
_CLITIC_TOKEN = re.compile(r"^(.+?)(n't|'m|'s|'re|'ve|'ll|'d)$")


def regex_tokenize(text: str) -> list[str]:
    """Whitespace tokenizer that splits off punctuation and English clitics.

    "i'm" becomes ``["i", "'m"]`` and "don't" becomes ``["do", "n't"]``.
    Bracketed special tokens such as ``[unk]`` are kept whole.
    """
    text = _SPACED_NEG.sub(r"\1 n't", text)
    text = _SPACED_CLITIC.sub(r"\1 '\2", text)
    tokens: list[str] = []
    for chunk in text.split():
        if re.fullmatch(r"\[\w+\]", chunk):
            tokens.append(chunk)
            continue
        for piece in _PUNCT.split(chunk):
            if not piece:
                continue
            m = _CLITIC_TOKEN.match(piece)
            if m and any(ch.isalnum() for ch in m.group(1)):
                tokens.extend([m.group(1), m.group(2)])
            else:
                tokens.append(piece)
    return tokens


def normalize_text(
    raw_utterance: str,
    floor: str = "A",
    tokenizer: Callable[[str], list[str]] | None = None,
) -> Utterance:
    """Lowercase, fix punctuation spacing and tokenize one raw utterance.

    Raises:
        EmptyUtteranceError: nothing is left after normalization.
    """
    tokenizer = tokenizer or regex_tokenize
    tokens = tokenizer(raw_utterance.lower().strip())
    if not tokens:
        raise EmptyUtteranceError(f"empty utterance: {raw_utterance!r}")
    return Utterance(tuple(tokens), floor)


# ---------------------------------------------------------------------------
# Session-level processing


def deduplicate_sessions(sessions: Sequence[DialogueSession]) -> list[DialogueSession]:
    """Drop sessions in which more than half of the utterances were already seen.

    Sessions are visited in order. Only utterances of kept sessions enter the
    seen set; an exact 50% overlap is kept.
    """
    seen: set[str] = set()
    kept: list[DialogueSession] = []
    for session in sessions:
        texts = [u.text for u in session.utterances]
        if not texts:
            continue
        overlap = sum(t in seen for t in texts)
        if 2 * overlap > len(texts):
            continue
        kept.append(session)
        seen.update(texts)
    return kept


def split_sessions(
    sessions: Sequence[DialogueSession],
    ratios: tuple[float, float, float] = (0.8, 0.1, 0.1),
    seed: int = 0,
) -> tuple[list[DialogueSession], list[DialogueSession], list[DialogueSession]]:
    """Seeded session-level train/valid/test split.

    Valid and test sizes are floored; the remainder goes to train. Each split
    keeps the input order of its sessions.
    """
    if len(ratios) != 3 or abs(sum(ratios) - 1.0) > 1e-9:
        raise ValueError(f"ratios must be three values summing to 1, got {ratios}")
    n = len(sessions)
    if n < 3:
        raise ValueError(f"need at least 3 sessions to split, got {n}")
    n_valid = math.floor(n * ratios[1] + 1e-9)
    n_test = math.floor(n * ratios[2] + 1e-9)
    perm = np.random.default_rng(seed).permutation(n)
    valid_idx = sorted(perm[:n_valid])
    test_idx = sorted(perm[n_valid : n_valid + n_test])
    train_idx = sorted(perm[n_valid + n_test :])
    pick = lambda idx: [sessions[i] for i in idx]  # noqa: E731
    return pick(train_idx), pick(valid_idx), pick(test_idx)


def build_pairs(
    session: DialogueSession, history: int = MAX_HISTORY, max_len: int = MAX_UTTERANCE_LEN
) -> list[ContextResponsePair]:
    if len(session.utterances) < 2:
        raise ValueError(f"session {session.session_id} has fewer than 2 utterances")
    utts = [u.truncated(max_len) for u in session.utterances]
    pairs = []
    for i in range(1, len(utts)):
        pairs.append(
            ContextResponsePair(
                pair_id=f"{session.session_id}#{i}",
                context=utts[max(0, i - history) : i],
                response=utts[i],
                session_id=session.session_id,
                index=i,
            )
        )
    return pairs


def build_all_pairs(
    sessions: Iterable[DialogueSession], history: int = MAX_HISTORY, max_len: int = MAX_UTTERANCE_LEN
) -> list[ContextResponsePair]:
    return [p for s in sessions for p in build_pairs(s, history, max_len)]


# ---------------------------------------------------------------------------
# Vocabulary


@dataclass
class Vocabulary:
    id2token: list[str]
    counts: dict[str, int] = field(default_factory=dict)

    def __post_init__(self):
        self.token2id = {t: i for i, t in enumerate(self.id2token)}
        if len(self.token2id) != len(self.id2token):
            raise ValueError("duplicate tokens in vocabulary")
        if tuple(self.id2token[: len(RESERVED_TOKENS)]) != RESERVED_TOKENS:
            raise ValueError("vocabulary must start with the reserved tokens")

    pad_id = 0
    unk_id = 1
    bos_id = 2
    eos_id = 3

    def __len__(self) -> int:
        return len(self.id2token)

    def __contains__(self, token: str) -> bool:
        return token in self.token2id

    def encode(self, tokens: Iterable[str]) -> list[int]:
        return [self.token2id.get(t, self.unk_id) for t in tokens]

    def decode(self, ids: Iterable[int], strip: bool = True) -> list[str]:
        out = []
        for i in ids:
            i = int(i)
            if strip and i == self.eos_id:
                break
            if strip and i in (self.pad_id, self.bos_id):
                continue
            out.append(self.id2token[i])
        return out

    @classmethod
    def from_tokens(cls, tokens: Iterable[str]) -> "Vocabulary":
        """Vocabulary with the reserved entries followed by ``tokens``."""
        rest = [t for t in tokens if t not in RESERVED_TOKENS]
        return cls(list(RESERVED_TOKENS) + rest)

    def to_tsv(self) -> str:
        return "".join(
            f"{tok}\t{i}\t{self.counts.get(tok, 0)}\n" for i, tok in enumerate(self.id2token)
        )

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_tsv(), encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "Vocabulary":
        rows = []
        for line in Path(path).read_text(encoding="utf-8").splitlines():
            if not line:
                continue
            tok, idx, count = line.split("\t")
            rows.append((int(idx), tok, int(count)))
        rows.sort()
        if [r[0] for r in rows] != list(range(len(rows))):
            raise ValueError(f"{path}: ids are not contiguous")
        return cls([r[1] for r in rows], {r[1]: r[2] for r in rows if r[2]})

    def digest(self) -> str:
        return hashlib.sha256("\n".join(self.id2token).encode("utf-8")).hexdigest()


def _distinct_utterances(pairs: Iterable[ContextResponsePair]) -> Iterable[Utterance]:
    # pairs from one session share context utterances; count each position once
    seen: set[tuple[str, int]] = set()
    for p in pairs:
        start = p.index - len(p.context)
        for offset, utt in enumerate([*p.context, p.response]):
            key = (p.session_id or p.pair_id, start + offset)
            if p.session_id and key in seen:
                continue
            seen.add(key)
            yield utt


def build_vocab(pairs: Sequence[ContextResponsePair], min_count: int = 1) -> Vocabulary:
    """Vocabulary over training pairs, ordered by count then lexicographically."""
    counts: Counter[str] = Counter()
    for utt in _distinct_utterances(pairs):
        counts.update(utt.tokens)
    if not counts:
        raise ValueError("cannot build a vocabulary from an empty corpus")
    kept = sorted(
        (t for t, c in counts.items() if c >= min_count and t not in RESERVED_TOKENS),
        key=lambda t: (-counts[t], t),
    )
    return Vocabulary(list(RESERVED_TOKENS) + kept, {t: counts[t] for t in kept})


# ---------------------------------------------------------------------------
# File formats


def session_to_record(session: DialogueSession) -> dict:
    return {
        "session_id": session.session_id,
        "utterances": [{"floor": u.floor, "text": u.text} for u in session.utterances],
    }


def parse_session_record(record: dict, normalize: bool = True) -> DialogueSession:
    """Build a session from one ``{session_id, utterances}`` record.

    Utterances that are empty after normalization are dropped.
    """
    if not isinstance(record, dict):
        raise ValueError("record is not an object")
    if "session_id" not in record or "utterances" not in record:
        raise ValueError("record needs 'session_id' and 'utterances'")
    utts = record["utterances"]
    if not isinstance(utts, list):
        raise ValueError("'utterances' must be a list")
    out = []
    for u in utts:
        if not isinstance(u, dict) or not isinstance(u.get("text"), str):
            raise ValueError("each utterance needs a string 'text'")
        floor = u.get("floor", "A")
        if floor not in FLOORS:
            raise ValueError(f"floor must be one of {FLOORS}, got {floor!r}")
        if normalize:
            try:
                out.append(normalize_text(u["text"], floor))
            except EmptyUtteranceError:
                continue
        else:
            out.append(Utterance(tuple(u["text"].split()), floor))
    return DialogueSession(str(record["session_id"]), out)


def read_sessions(path: str | Path, normalize: bool = True) -> list[DialogueSession]:
    """Read a newline-delimited session file.

    Raises:
        CorpusFormatError: listing every malformed record.
    """
    sessions, problems = [], []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                sessions.append(parse_session_record(json.loads(line), normalize))
            except (json.JSONDecodeError, ValueError) as exc:
                problems.append((lineno, str(exc)))
    if problems:
        raise CorpusFormatError(problems)
    return sessions


def write_sessions(path: str | Path, sessions: Iterable[DialogueSession]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for s in sessions:
            fh.write(json.dumps(session_to_record(s), ensure_ascii=False) + "\n")
