"""Automated response metrics and latent-variable analyses."""

from __future__ import annotations

import dataclasses
import json
import math
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import torch

from .corpus import ContextResponsePair, Utterance, Vocabulary
from .models import HierarchicalDialogueModel, collate, generate_batch
from .training import corpus_nll

BLEU_EPSILON = 1e-9
NORM_FLOOR = 1e-12


# ---------------------------------------------------------------------------
# Perplexity


def perplexity(model: HierarchicalDialogueModel, pairs: Sequence[ContextResponsePair], vocab: Vocabulary,
               variable: int | None = None) -> float:
    """``exp(total NLL / tokens)``; EOS counts as a token, latents use the prior mean."""
    total, tokens = corpus_nll(model, pairs, vocab, variable=variable)
    return math.exp(total / tokens)


# ---------------------------------------------------------------------------
# BLEU-2


def _ngrams(tokens: Sequence[str], n: int) -> Counter:
    return Counter(tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1))


def bleu2(hypothesis: Sequence[str], reference: Sequence[str]) -> float:
    """Sentence BLEU-2 on a 0-100 scale.

    Geometric mean of clipped 1- and 2-gram precisions times the brevity
    penalty. Zero match counts are smoothed by ``1e-9``. When neither side
    is long enough to contain a bigram, the bigram precision is 1.
    """
    hyp, ref = list(hypothesis), list(reference)
    if not hyp:
        return 0.0
    log_p = 0.0
    for n in (1, 2):
        h, r = _ngrams(hyp, n), _ngrams(ref, n)
        total = sum(h.values())
        if total == 0:
            p = 1.0 if sum(r.values()) == 0 else BLEU_EPSILON
        else:
            match = sum(min(c, r[g]) for g, c in h.items())
            p = (match if match > 0 else BLEU_EPSILON) / total
        log_p += 0.5 * math.log(p)
    bp = 1.0 if len(hyp) > len(ref) else math.exp(1 - len(ref) / len(hyp))
    return 100.0 * bp * math.exp(log_p)


def corpus_bleu2(hypotheses: Sequence[Sequence[str]], references: Sequence[Sequence[str]]) -> float:
    """Average of sentence scores."""
    if len(hypotheses) != len(references):
        raise ValueError("hypotheses and references differ in number")
    if not hypotheses:
        return 0.0
    return float(np.mean([bleu2(h, r) for h, r in zip(hypotheses, references)]))


# ---------------------------------------------------------------------------
# Embedding similarity


class WordEmbeddingTable:
    """Token -> vector lookup; tokens missing from the table are skipped."""

    def __init__(self, vectors: dict[str, np.ndarray]):
        dims = {len(v) for v in vectors.values()}
        if len(dims) > 1:
            raise ValueError(f"embedding vectors have mixed dimensions {sorted(dims)}")
        self.vectors = {t: np.asarray(v, dtype=np.float64) for t, v in vectors.items()
                        if np.linalg.norm(v) > NORM_FLOOR}
        self.dim = dims.pop() if dims else 0

    def __contains__(self, token: str) -> bool:
        return token in self.vectors

    def lookup(self, tokens: Iterable[str]) -> np.ndarray:
        rows = [self.vectors[t] for t in tokens if t in self.vectors]
        return np.stack(rows) if rows else np.zeros((0, self.dim))

    def covers(self, tokens: Iterable[str]) -> bool:
        return any(t in self.vectors for t in tokens)

    @classmethod
    def load(cls, path: str | Path) -> "WordEmbeddingTable":
        vectors = {}
        for line in Path(path).read_text(encoding="utf-8").splitlines():
            parts = line.rstrip().split(" ")
            if len(parts) < 2:
                continue
            vectors[parts[0]] = np.array([float(x) for x in parts[1:]])
        return cls(vectors)

    def save(self, path: str | Path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for tok in sorted(self.vectors):
                fh.write(tok + " " + " ".join(f"{x:.6f}" for x in self.vectors[tok]) + "\n")


def train_embedding_table(sentences: Iterable[Sequence[str]], dim: int = 50, window: int = 2,
                          min_count: int = 1) -> WordEmbeddingTable:
    """Small PPMI + truncated-SVD embedding table fitted on a corpus.

    Deterministic: the SVD is computed densely and signs are fixed so the
    largest-magnitude entry of every component is positive.
    """
    sentences = [list(s) for s in sentences]
    counts = Counter(t for s in sentences for t in s)
    words = sorted(t for t, c in counts.items() if c >= min_count)
    index = {w: i for i, w in enumerate(words)}
    co = np.zeros((len(words), len(words)))
    for s in sentences:
        ids = [index.get(t) for t in s]
        for i, a in enumerate(ids):
            if a is None:
                continue
            for j in range(max(0, i - window), min(len(ids), i + window + 1)):
                b = ids[j]
                if j != i and b is not None:
                    co[a, b] += 1.0
    total = co.sum()
    if total == 0:
        raise ValueError("corpus too small to fit embeddings")
    row, col = co.sum(1, keepdims=True), co.sum(0, keepdims=True)
    with np.errstate(divide="ignore", invalid="ignore"):
        pmi = np.log(co * total / (row * col))
    ppmi = np.where(np.isfinite(pmi) & (pmi > 0), pmi, 0.0)
    u, s, _ = np.linalg.svd(ppmi, full_matrices=False)
    k = min(dim, len(s))
    vecs = u[:, :k] * np.sqrt(s[:k])
    signs = np.sign(vecs[np.abs(vecs).argmax(0), np.arange(k)])
    vecs = vecs * np.where(signs == 0, 1.0, signs)
    if k < dim:
        vecs = np.pad(vecs, ((0, 0), (0, dim - k)))
    return WordEmbeddingTable({w: vecs[i] for w, i in index.items()})


def _cos(a: np.ndarray, b: np.ndarray) -> float:
    return float(a @ b / max(np.linalg.norm(a) * np.linalg.norm(b), NORM_FLOOR))


def embedding_similarity(hypothesis: Sequence[str], reference: Sequence[str], table: WordEmbeddingTable,
                         mode: str = "average") -> float:
    """Cosine-based sentence similarity in [-1, 1]; 0 when a side has no known words.

    ``average`` compares mean vectors, ``extrema`` compares per-dimension
    largest-magnitude values, ``greedy`` averages best-match cosines over
    both directions.
    """
    h, r = table.lookup(hypothesis), table.lookup(reference)
    if len(h) == 0 or len(r) == 0:
        return 0.0
    if mode == "average":
        return _cos(h.mean(0), r.mean(0))
    if mode == "extrema":
        def extrema(m):
            return m[np.abs(m).argmax(0), np.arange(m.shape[1])]
        return _cos(extrema(h), extrema(r))
    if mode == "greedy":
        hn = h / np.maximum(np.linalg.norm(h, axis=1, keepdims=True), NORM_FLOOR)
        rn = r / np.maximum(np.linalg.norm(r, axis=1, keepdims=True), NORM_FLOOR)
        sim = hn @ rn.T
        return float((sim.max(1).mean() + sim.max(0).mean()) / 2)
    raise ValueError(f"unknown embedding similarity mode {mode!r}")


# ---------------------------------------------------------------------------
# Diversity


def distinct_n(hypotheses: Iterable[Sequence[str]], n: int) -> int:
    """Number of distinct n-grams across all hypotheses (a raw count)."""
    if n < 1:
        raise ValueError("n must be at least 1")
    grams: set[tuple[str, ...]] = set()
    for h in hypotheses:
        h = list(h)
        grams.update(tuple(h[i : i + n]) for i in range(len(h) - n + 1))
    return len(grams)


# ---------------------------------------------------------------------------
# Reports


@dataclass
class MetricReport:
    perplexity: float
    bleu2: float
    emb_extrema: float | None = None
    emb_average: float | None = None
    emb_greedy: float | None = None
    distinct_1: int = 0
    distinct_2: int = 0
    emb_uncovered: int = 0
    reval: float | None = None
    label: str = "mix"
    avg_pi: float | None = None
    num_examples: int = 0

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def score_responses(
    hypotheses: Sequence[Sequence[str]],
    references: Sequence[Sequence[str]],
    table: WordEmbeddingTable | None = None,
) -> dict:
    out = {
        "bleu2": corpus_bleu2(hypotheses, references),
        "distinct_1": distinct_n(hypotheses, 1),
        "distinct_2": distinct_n(hypotheses, 2),
    }
    if table is not None:
        for mode in ("extrema", "average", "greedy"):
            scores = [embedding_similarity(h, r, table, mode) for h, r in zip(hypotheses, references)]
            out[f"emb_{mode}"] = 100.0 * float(np.mean(scores)) if scores else 0.0
        out["emb_uncovered"] = sum(not (table.covers(h) and table.covers(r)) for h, r in zip(hypotheses, references))
    return out


def evaluate_model(
    model: HierarchicalDialogueModel,
    pairs: Sequence[ContextResponsePair],
    vocab: Vocabulary,
    table: WordEmbeddingTable | None = None,
    mode: str = "greedy",
    seed: int = 0,
    variable: int | None = None,
    reval_scorer=None,
) -> tuple[MetricReport, list[Utterance]]:
    """Full metric suite on ``pairs``; also returns the generated responses.

    ``reval_scorer``, when given, is called as ``scorer(contexts, hypotheses)``
    and must return one appropriateness score per hypothesis.
    """
    ppl = perplexity(model, pairs, vocab, variable)
    hyps = generate_batch(model, [p.context for p in pairs], vocab, mode, seed, variable=variable)
    hyp_tokens = [list(h.tokens) for h in hyps]
    ref_tokens = [list(p.response.tokens) for p in pairs]
    scores = score_responses(hyp_tokens, ref_tokens, table)
    reval = None
    if reval_scorer is not None:
        reval = float(np.mean(reval_scorer([p.context for p in pairs], hyps)))
    report = MetricReport(perplexity=ppl, reval=reval, num_examples=len(pairs),
                          label="mix" if variable is None else str(variable), **scores)
    return report, hyps


@torch.no_grad()
def avg_selection_prob(model: HierarchicalDialogueModel, pairs: Sequence[ContextResponsePair], vocab: Vocabulary,
                       batch_size: int = 64) -> np.ndarray:
    """Prior component weights averaged over the contexts in ``pairs``."""
    if not model.variational:
        raise ValueError("average selection probability needs a latent prior")
    was_training = model.training
    model.eval()
    total = np.zeros(model.prior_spec.K)
    try:
        for start in range(0, len(pairs), batch_size):
            chunk = pairs[start : start + batch_size]
            enc = model.encode_context(collate(vocab, [p.context for p in chunk]))
            _, weights = model.prior_params(enc.c)
            total += weights.double().sum(0).numpy()
    finally:
        model.train(was_training)
    return total / len(pairs)


def per_variable_report(
    model: HierarchicalDialogueModel,
    pairs: Sequence[ContextResponsePair],
    vocab: Vocabulary,
    table: WordEmbeddingTable | None = None,
    seed: int = 0,
    mode: str = "greedy",
) -> list[MetricReport]:
    """One row per latent variable: decoding and scoring with that variable alone."""
    if not model.prior_spec.mixture:
        raise ValueError("per-variable analysis needs a GMM or LGM prior")
    pi_bar = avg_selection_prob(model, pairs, vocab)
    rows = []
    for k in range(model.prior_spec.K):
        report, _ = evaluate_model(model, pairs, vocab, table, mode, seed, variable=k)
        report.avg_pi = float(pi_bar[k])
        rows.append(report)
    return rows


_COLUMNS = [
    ("label", "k", "{}"),
    ("avg_pi", "avg prob.", "{:.2%}"),
    ("perplexity", "PPL", "{:.2f}"),
    ("bleu2", "B-2", "{:.2f}"),
    ("emb_extrema", "E", "{:.2f}"),
    ("emb_average", "A", "{:.2f}"),
    ("emb_greedy", "G", "{:.2f}"),
    ("distinct_1", "Dist-1", "{}"),
    ("distinct_2", "Dist-2", "{}"),
    ("reval", "Reval", "{:.2f}"),
]


def format_table(rows: Sequence[MetricReport]) -> str:
    header = [title for _, title, _ in _COLUMNS]
    body = []
    for row in rows:
        cells = []
        for key, _, fmt in _COLUMNS:
            value = getattr(row, key)
            cells.append("-" if value is None else fmt.format(value))
        body.append(cells)
    widths = [max(len(h), *(len(r[i]) for r in body)) for i, h in enumerate(header)]
    lines = ["  ".join(h.rjust(w) for h, w in zip(header, widths))]
    lines += ["  ".join(c.rjust(w) for c, w in zip(r, widths)) for r in body]
    return "\n".join(lines) + "\n"


def write_report(path_stem: str | Path, rows: Sequence[MetricReport], extra: dict | None = None) -> None:
    """Write ``<stem>.json`` (records) and ``<stem>.txt`` (table)."""
    stem = Path(path_stem)
    payload = {**(extra or {}), "rows": [r.to_dict() for r in rows]}
    stem.with_suffix(".json").write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    stem.with_suffix(".txt").write_text(format_table(rows), encoding="utf-8")
