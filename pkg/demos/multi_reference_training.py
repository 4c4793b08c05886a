"""
Training on teacher hypotheses instead of one ground truth
==========================================================

Each synthetic context has eight valid continuations, but the corpus only
shows one per session. A teacher that knows the continuation distribution
samples N hypotheses per context, and the student is trained on all of them.
This runs one seed at desk scale (about a minute).
"""

import logging

from multiref.experiments import run_synthetic
from multiref.synthetic import make_one_to_many_corpus
from multiref.teacher import sample_response

logging.basicConfig(level=logging.WARNING)

# one template context and its weighted continuations
corpus = make_one_to_many_corpus(n_templates=3, sessions_per_template=2, seed=0)
context, continuations = next(iter(corpus.templates.items()))
print("context:", context)
for text, weight in continuations:
    print("  %.3f  %s" % (weight, text))

# the teacher samples with top-p 0.95; rare continuations may fall outside the nucleus
teacher = corpus.teacher()
print("five teacher hypotheses:")
for seed in range(5):
    print("  ", sample_response(teacher, [context.split()], seed=seed).text)

# HRED on one hypothesis per context versus five
print()
print("%-6s %8s %8s %10s" % ("N", "PPL", "BLEU-2", "Distinct-2"))
for n in (1, 5):
    res = run_synthetic(n, "none", seed=0)
    r = res.report
    print("%-6d %8.2f %8.2f %10d" % (n, r.perplexity, r.bleu2, r.distinct_2))
