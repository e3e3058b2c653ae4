"""Desk-scale laboratory for token-weighted long-context training.

The package contrasts a model's short-context predictions with its
long-context ones to score how much each token benefits from distant
information, turns those scores into per-token training weights (sparse
top-quantile or dense normalized), and trains a tiny numpy transformer
under the weighted objective. A miniature long-range benchmark and a
Markov-chain oracle make the whole loop checkable end to end on a
laptop.

Layout:

- ``corpus``: synthetic corpora (passkey, entity recurrence, Markov)
  plus the exact n-gram oracle and window planning.
- ``model``: the tiny RoPE transformer with hand-written gradients,
  checkpointing, and context extension.
- ``scoring``: score functions over paired short/long log-prob traces.
- ``weighting``: postprocessing scores into weights that sum to the
  sequence length.
- ``training``: weighted cross-entropy loss, AdamW, gradient checking.
- ``pipeline``: scorer specs, frozen score caches, the training loop.
- ``evalbench``: recall benchmark tasks, per-position perplexity, and
  oracle identity checks.
- ``cli``: the ``tokenweight`` command.
"""

from .corpus import (
    DIGIT_RANGE,
    ENT_MARK,
    ENTITY_RANGE,
    FILLER_RANGE,
    KEY_MARK,
    KEY_RANGE,
    MIN_STRUCTURED_VOCAB,
    PERIOD,
    QUERY_MARK,
    SEP,
    VAL_MARK,
    MarkovOracle,
    TokenSequence,
    WindowPlan,
    answer_positions,
    chunk_documents,
    derive_seed,
    gen_entity_recurrence_corpus,
    gen_markov_corpus,
    gen_passkey_corpus,
    load_corpus,
    plan_windows,
    recurrence_positions,
    save_corpus,
)
from .errors import (
    DominanceError,
    EnumerationBudgetError,
    StaleCacheError,
    TrainingDivergedError,
)
from .evalbench import (
    DECODE_BUDGET,
    TASK_KINDS,
    EvalReport,
    EvalTask,
    aggregate,
    cpmi_oracle_check,
    decode_greedy,
    evaluate_model,
    gen_eval_task,
    kl_ordering_check,
    load_tasks,
    perplexity_by_position,
    save_tasks,
    score_recall,
    write_report,
)
from .model import (
    LogProbTrace,
    TinyLm,
    TinyLmConfig,
    checkpoint_bytes,
    extend_context,
    forward_logprobs,
    init_model,
    load_checkpoint,
    load_traces,
    save_checkpoint,
    save_traces,
)
from .pipeline import (
    MODES,
    POSTPROCESSES,
    ScoreCache,
    ScorerSpec,
    StepRecord,
    apply_score_fn,
    load_cache,
    postprocess_scores,
    run_training,
    save_cache,
    score_frozen,
    score_unfrozen,
    scorer_fingerprint,
    write_run_log,
)
from .scoring import (
    PMI_VARIANTS,
    SCORE_FUNCTIONS,
    ScoreVector,
    abs_score,
    entropy_weight,
    pmi_variant,
    signed_score,
    write_score_dump,
)
from .training import (
    AdamW,
    TrainConfig,
    grad_check,
    loss_and_grads,
    train_step,
    weighted_nll,
)
from .weighting import (
    WeightVector,
    interpolate_uniform,
    normalize_to_length,
    sparse_count,
    sparsify_quantile,
    uniform_weights,
    write_weight_dump,
)

__version__ = "0.1.0"
