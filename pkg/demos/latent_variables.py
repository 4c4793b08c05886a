"""
What do the LGM variables learn?
================================

Train a VHRED with a 5-variable LGM prior on teacher hypotheses, then decode
with each variable forced on (pi set to one-hot) and score every variable
separately. The average selection probability pi-bar shows which variables
the prior actually uses.
"""

import torch

from multiref.corpus import build_all_pairs, build_vocab, split_sessions
from multiref.experiments import SMALL_MODEL, SMALL_SCHEDULE
from multiref.latent import PriorSpec
from multiref.metrics import format_table, per_variable_report
from multiref.models import ModelConfig, build_model, generate_with_variable
from multiref.synthetic import make_one_to_many_corpus
from multiref.teacher import build_multiref_dataset
from multiref.training import TrainSchedule, fit, instances_from_multiref

torch.manual_seed(0)
corpus = make_one_to_many_corpus(n_templates=30, sessions_per_template=4, seed=0)
train_s, valid_s, test_s = split_sessions(corpus.sessions, seed=0)
train, valid, test = (build_all_pairs(s) for s in (train_s, valid_s, test_s))
vocab = build_vocab(train)

# five teacher hypotheses per training context
data = build_multiref_dataset(train, corpus.teacher(), 5, seed=0)
config = ModelConfig(vocab_size=len(vocab), prior=PriorSpec("lgm", 5), **SMALL_MODEL)
model = build_model(config, vocab)
schedule = TrainSchedule(max_epochs=20, **SMALL_SCHEDULE)
result = fit(model, instances_from_multiref(data), valid, vocab, schedule, seed=0)
print("trained %d steps, best validation loss %.3f" % (result.step, result.best_val))

# one row per variable, sorted by how often the prior picks it
rows = sorted(per_variable_report(result.model, test, vocab), key=lambda r: -r.avg_pi)
print(format_table(rows))

# the same context decoded through each variable
ctx = test[0].context
print("context:", " / ".join(u.text for u in ctx))
for k in range(5):
    print("  k=%d  %s" % (k, generate_with_variable(result.model, ctx, vocab, k).text))
