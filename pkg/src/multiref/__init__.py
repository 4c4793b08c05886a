"""Multi-referenced training for open-domain dialogue response generation.

Submodules
----------
corpus       sessions, normalization, splits, context/response pairs, vocabulary
teacher      pluggable teachers, nucleus sampling, multi-reference datasets
latent       Gaussian, GMM and linear-Gaussian (LGM) latent priors
models       hierarchical encoder-decoder with optional latent variable
training     losses, optimizer schedule, fitting loop, checkpoints
metrics      perplexity, BLEU-2, embedding similarity, distinct-n, latent analysis
synthetic    one-to-many toy corpus with a known response distribution
experiments  desk-scale experiment drivers
cli          command-line pipeline
"""

from .corpus import (
    ContextResponsePair,
    DialogueSession,
    Utterance,
    Vocabulary,
    build_all_pairs,
    build_pairs,
    build_vocab,
    deduplicate_sessions,
    normalize_text,
    split_sessions,
)
from .latent import GaussianParams, LatentState, PriorSpec, gaussian_kl, lgm_aggregate, prior_kl, sample_gmm, sample_lgm
from .metrics import (
    MetricReport,
    avg_selection_prob,
    bleu2,
    distinct_n,
    embedding_similarity,
    evaluate_model,
    per_variable_report,
    perplexity,
)
from .models import HierarchicalDialogueModel, ModelConfig, build_model, generate, generate_with_variable
from .teacher import (
    MultiRefExample,
    Reference,
    build_multiref_dataset,
    epoch_budget,
    nucleus_filter,
    sample_response,
    token_distill_targets,
)
from .training import (
    TrainSchedule,
    bow_loss,
    compute_loss,
    fit,
    kl_anneal_weight,
    lr_schedule_update,
    multi_ref_loss,
    nll_loss,
    optimizer_step,
    token_kd_loss,
)

__version__ = "0.1.0"
