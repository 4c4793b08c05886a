import json
import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import make_model
from multiref.corpus import build_all_pairs, build_vocab
from multiref.metrics import (
    MetricReport,
    WordEmbeddingTable,
    avg_selection_prob,
    bleu2,
    corpus_bleu2,
    distinct_n,
    embedding_similarity,
    evaluate_model,
    format_table,
    per_variable_report,
    perplexity,
    score_responses,
    train_embedding_table,
    write_report,
)
from multiref.models import collate, generate_with_variable
from multiref.synthetic import make_one_to_many_corpus
from multiref.training import TrainSchedule, fit, instances_from_pairs, mean_token_nll


def test_bleu_identity_and_hand_case():
    assert bleu2("a b c".split(), "a b c".split()) == pytest.approx(100.0)
    assert bleu2("a b c".split(), "a b d".split()) == pytest.approx(100 * math.sqrt(1 / 3))
    assert round(bleu2("a b c".split(), "a b d".split()), 2) == 57.74


def test_bleu_no_overlap_and_empty():
    assert bleu2("x y".split(), "a b".split()) < 1e-6
    assert bleu2([], "a b".split()) == 0.0


def test_bleu_brevity_penalty():
    # p1 = p2 = 1, BP = exp(1 - 4/2)
    assert bleu2("a b".split(), "a b c d".split()) == pytest.approx(100 * math.exp(-1))


@settings(max_examples=200, deadline=None)
@given(st.lists(st.sampled_from("abcde"), min_size=1, max_size=10))
def test_bleu_self_is_100(tokens):
    assert bleu2(tokens, tokens) == pytest.approx(100.0)


@settings(max_examples=200, deadline=None)
@given(st.lists(st.sampled_from("abcde"), min_size=1, max_size=8), st.lists(st.sampled_from("abcde"), max_size=8))
def test_bleu_range(h, r):
    assert 0.0 <= bleu2(h, r) <= 100.0 + 1e-9


def test_corpus_bleu_is_mean():
    hs, rs = ["a b c".split(), "x".split()], ["a b d".split(), "x".split()]
    assert corpus_bleu2(hs, rs) == pytest.approx((100 * math.sqrt(1 / 3) + 100) / 2)


def test_distinct_examples():
    assert distinct_n([["a", "b"], ["a", "c"]], 1) == 3
    assert distinct_n([], 1) == 0
    assert distinct_n([["a", "b"], ["b", "a"]], 2) == 2
    with pytest.raises(ValueError):
        distinct_n([["a"]], 0)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.lists(st.sampled_from("abcd"), max_size=6), max_size=6), st.integers(1, 3), st.randoms())
def test_distinct_order_invariant(hyps, n, rnd):
    shuffled = list(hyps)
    rnd.shuffle(shuffled)
    assert distinct_n(hyps, n) == distinct_n(shuffled, n)


TABLE = WordEmbeddingTable({"a": np.array([1.0, 0.0]), "b": np.array([0.0, 1.0]), "c": np.array([1.0, 1.0])})


@pytest.mark.parametrize("mode", ["average", "extrema", "greedy"])
def test_embedding_identity_and_orthogonal(mode):
    assert embedding_similarity(["a", "c"], ["a", "c"], TABLE, mode) == pytest.approx(1.0)
    assert embedding_similarity(["a"], ["b"], TABLE, mode) == pytest.approx(0.0)


def test_embedding_hand_cases():
    # greedy: a->a 1, b->a 0 gives 0.5; a->a 1 gives 1; mean 0.75
    assert embedding_similarity(["a", "b"], ["a"], TABLE, "greedy") == pytest.approx(0.75)
    # extrema of {a, b} is (1, 1), parallel to c
    assert embedding_similarity(["a", "b"], ["c"], TABLE, "extrema") == pytest.approx(1.0)
    assert embedding_similarity(["a", "b"], ["a"], TABLE, "average") == pytest.approx(1 / math.sqrt(2))


def test_embedding_extrema_picks_magnitude():
    t = WordEmbeddingTable({"p": np.array([0.5, 0.1]), "n": np.array([-2.0, 0.1]), "q": np.array([-1.0, 0.0])})
    # extrema of {p, n} is (-2, 0.1)
    assert embedding_similarity(["p", "n"], ["q"], t, "extrema") == pytest.approx(2 / math.sqrt(4.01))


def test_embedding_oov_gives_zero():
    assert embedding_similarity(["zz"], ["a"], TABLE, "average") == 0.0
    out = score_responses([["zz"]], [["a"]], TABLE)
    assert out["emb_uncovered"] == 1


def test_embedding_table_rejects_zero_and_mixed(tmp_path):
    t = WordEmbeddingTable({"a": np.zeros(2), "b": np.ones(2)})
    assert "a" not in t and "b" in t
    with pytest.raises(ValueError):
        WordEmbeddingTable({"a": np.ones(2), "b": np.ones(3)})
    t.save(tmp_path / "e.txt")
    assert (tmp_path / "e.txt").read_text() == "b 1.000000 1.000000\n"
    assert WordEmbeddingTable.load(tmp_path / "e.txt").vectors.keys() == {"b"}


def test_trained_embedding_table_is_deterministic():
    sents = [s.split() for s in ["a b c", "a b d", "c d e", "e a b"]]
    t1, t2 = train_embedding_table(sents, dim=3), train_embedding_table(sents, dim=3)
    assert t1.dim == 3
    for w in t1.vectors:
        np.testing.assert_array_equal(t1.vectors[w], t2.vectors[w])


def test_perplexity_uniform_model(vocab, pairs):
    model = make_model(vocab, "unimodal")
    with torch.no_grad():
        model.out.weight.zero_()
        model.out.bias.zero_()
    assert perplexity(model, pairs, vocab) == pytest.approx(len(vocab), rel=1e-12)


def test_perplexity_matches_training_path(vocab, pairs):
    model = make_model(vocab, "lgm2")
    assert perplexity(model, pairs, vocab) == math.exp(mean_token_nll(model, pairs, vocab))


def test_avg_selection_prob_untrained(vocab, pairs):
    for K in (1, 4):
        pi = avg_selection_prob(make_model(vocab, f"lgm{K}"), pairs, vocab)
        assert pi.sum() == pytest.approx(1.0, abs=1e-6)
        np.testing.assert_allclose(pi, np.full(K, 1 / K))
    assert avg_selection_prob(make_model(vocab, "unimodal"), pairs, vocab).tolist() == [1.0]
    with pytest.raises(ValueError):
        avg_selection_prob(make_model(vocab), pairs, vocab)


def test_report_files(tmp_path):
    rows = [MetricReport(12.5, 40.0, distinct_1=3, distinct_2=4, label="0", avg_pi=0.25),
            MetricReport(10.0, 45.0, emb_average=80.0)]
    write_report(tmp_path / "r", rows, {"seed": 1})
    data = json.loads((tmp_path / "r.json").read_text())
    assert data["seed"] == 1 and len(data["rows"]) == 2
    assert set(data["rows"][0]) == set(MetricReport.__dataclass_fields__)
    text = (tmp_path / "r.txt").read_text()
    assert text == format_table(rows)
    assert "25.00%" in text and "Dist-2" in text


def _train_lgm3(n_templates, sessions_per_template, max_steps):
    corpus = make_one_to_many_corpus(n_templates, sessions_per_template, seed=0)
    pairs = build_all_pairs(corpus.sessions)
    vocab = build_vocab(pairs)
    model = make_model(vocab, "lgm3", dtype=torch.float32, hidden_size=64, word_embedding_dim=32,
                       floor_embedding_dim=8, latent_dim=8, dropout=0.0, init_range=0.2)
    sched = TrainSchedule(batch_size=10, max_epochs=1000, max_steps=max_steps, initial_lr=0.002, kl_anneal_steps=200)
    res = fit(model, instances_from_pairs(pairs), pairs, vocab, sched, seed=0)
    return res.model, pairs, vocab


@pytest.fixture(scope="module")
def trained_lgm():
    # one session per template: each context has a single answer to memorize
    return _train_lgm3(50, 1, 500)


@pytest.fixture(scope="module")
def trained_one_to_many():
    # with one answer per context z carries nothing; eight sampled answers give the variables something to split
    return _train_lgm3(20, 8, 800)


def test_per_variable_rows(trained_lgm):
    model, pairs, vocab = trained_lgm
    rows = per_variable_report(model, pairs, vocab)
    assert [r.label for r in rows] == ["0", "1", "2"]
    assert sum(r.avg_pi for r in rows) == pytest.approx(1.0, abs=1e-6)
    mixed, _ = evaluate_model(model, pairs, vocab)
    best = max(rows, key=lambda r: r.avg_pi)
    assert best.bleu2 >= mixed.bleu2 - 1e-9


def test_variables_decode_differently(trained_one_to_many):
    model, pairs, vocab = trained_one_to_many
    ctx = pairs[0].context
    outs = [generate_with_variable(model, ctx, vocab, k).text for k in range(3)]
    assert len(set(outs)) > 1


def test_forced_variable_weights_one_hot(trained_lgm):
    model, pairs, vocab = trained_lgm
    enc = model.encode_context(collate(vocab, [p.context for p in pairs[:4]]))
    state = model.prior_latent(enc.c, variable=1)
    assert state.weights.tolist() == [[0.0, 1.0, 0.0]] * 4


def test_per_variable_rejects_unimodal(vocab, pairs):
    with pytest.raises(ValueError):
        per_variable_report(make_model(vocab, "unimodal"), pairs, vocab)


def test_evaluate_model_deterministic(vocab, pairs):
    model = make_model(vocab, "gmm2")
    a, ha = evaluate_model(model, pairs, vocab, TABLE, seed=4)
    b, hb = evaluate_model(model, pairs, vocab, TABLE, seed=4)
    assert a == b and ha == hb
    assert a.perplexity >= 1 and a.distinct_1 >= 0
    assert all(-100 <= getattr(a, f"emb_{m}") <= 100 for m in ("extrema", "average", "greedy"))


def test_reval_hook(vocab, pairs):
    model = make_model(vocab)
    report, _ = evaluate_model(model, pairs, vocab, reval_scorer=lambda ctx, hyps: [2.0] * len(hyps))
    assert report.reval == 2.0
    assert evaluate_model(model, pairs, vocab)[0].reval is None
