"""Shared fixtures.

The expensive trained-model fixtures are session-scoped so the slow
suites (convergence checks, the directional experiment) reuse one
training run instead of repeating it per test.
"""

from types import SimpleNamespace

import numpy as np
import pytest

from tokenweight import (
    ScorerSpec,
    TinyLmConfig,
    TokenSequence,
    TrainConfig,
    abs_score,
    answer_positions,
    derive_seed,
    evaluate_model,
    extend_context,
    gen_entity_recurrence_corpus,
    gen_markov_corpus,
    gen_passkey_corpus,
    init_model,
    recurrence_positions,
    run_training,
    score_unfrozen,
    sparsify_quantile,
)

DESK_CONFIG = TinyLmConfig(
    layers=2, d_model=64, n_heads=4, d_ff=256, vocab_size=64, max_context=64
)


def interleave(*groups: list[TokenSequence]) -> list[TokenSequence]:
    """Round-robin merge with fresh sequential seq_ids."""
    out = []
    idx = [0] * len(groups)
    while any(i < len(g) for i, g in zip(idx, groups)):
        for gi, g in enumerate(groups):
            if idx[gi] < len(g):
                s = g[idx[gi]]
                out.append(TokenSequence(seq_id=len(out), ids=s.ids, answers=s.answers))
                idx[gi] += 1
    return out


@pytest.fixture(scope="session")
def markov_setup():
    """Order-2 chain and a model trained to match it tightly.

    Each training stage draws fresh chain samples (no sequence is ever
    revisited, so the model cannot memorize a finite corpus) and the
    learning rate steps down across stages to shrink optimizer noise.
    """
    _, oracle = gen_markov_corpus(2, 8, count=1, seed=101, doc_len=64)
    cfg = TinyLmConfig(
        layers=2, d_model=64, n_heads=4, d_ff=256, vocab_size=8, max_context=64
    )
    model = init_model(cfg, seed=7)
    spec = ScorerSpec(postprocess="uniform", n=16, o=4)
    stages = [
        (2e-3, 1200, 32, 40),
        (5e-4, 500, 64, 0),
        (1e-4, 300, 64, 0),
    ]
    for si, (lr, steps, batch, warmup) in enumerate(stages, 1):
        ids = oracle.sample(steps * batch, 64, seed=derive_seed(101, "markov-stage", si))
        corpus = [
            TokenSequence(seq_id=si * 1_000_000 + i, ids=row)
            for i, row in enumerate(ids)
        ]
        tcfg = TrainConfig(
            learning_rate=lr, warmup_steps=warmup, total_steps=steps,
            batch_size=batch, seed=si + 30,
        )
        model, _ = run_training(model, corpus, spec, tcfg)
    return SimpleNamespace(oracle=oracle, model=model)


# Continual-training settings for the directional experiment. One learning
# rate serves all four weighting regimes so their comparison is fair.
DIR_SEED = 11
DIR_CT_LR = 5e-4
DIR_REPLICATES = 3
DIR_SHORT_N, DIR_SHORT_O = 32, 8


def _directional_pretrain():
    """Context-64 model covering needle distances 0..40 and short gaps."""
    groups = [
        gen_passkey_corpus(96, 64, d, derive_seed(DIR_SEED, "pre-pk", d))
        for d in range(0, 41, 4)
    ] + [
        gen_entity_recurrence_corpus(128, 64, g, derive_seed(DIR_SEED, "pre-ent", g))
        for g in (16, 24, 32)
    ]
    pre = interleave(*groups)
    model = init_model(DESK_CONFIG, seed=derive_seed(DIR_SEED, "init"))
    spec = ScorerSpec(postprocess="uniform", n=DIR_SHORT_N, o=DIR_SHORT_O)
    for si, (lr, steps, batch, warmup) in enumerate(
        [(2e-3, 1800, 16, 40), (5e-4, 600, 32, 0)], 1
    ):
        tcfg = TrainConfig(
            learning_rate=lr, warmup_steps=warmup, total_steps=steps,
            batch_size=batch, seed=derive_seed(DIR_SEED, "pre", si),
        )
        model, _ = run_training(model, pre, spec, tcfg)
    return model


def _directional_corpus():
    """Length-256 continual corpus: dependencies span the whole window."""
    groups = [
        gen_passkey_corpus(104, 256, d, derive_seed(DIR_SEED, "ct-pk", d))
        for d in (0, 50, 100, 150, 200)
    ] + [
        gen_entity_recurrence_corpus(172, 256, g, derive_seed(DIR_SEED, "ct-ent", g))
        for g in (72, 96, 128)
    ]
    return interleave(*groups)


def _concentration_sample():
    """Fresh docs whose marked positions all need context beyond n=32."""
    pairs = []
    for d in (100, 200):
        for seq in gen_passkey_corpus(32, 256, d, derive_seed(DIR_SEED, "conc-pk", d)):
            pairs.append((seq, answer_positions(seq)))
    for seq in gen_entity_recurrence_corpus(64, 256, 96, derive_seed(DIR_SEED, "conc-ent")):
        pairs.append((seq, recurrence_positions(seq.ids)))
    return pairs


def selection_concentration(model, sample, kappa=0.2, n=DIR_SHORT_N, o=DIR_SHORT_O):
    """How much sparse selection by `model` favors the marked positions.

    Returns selected-and-marked / selected divided by marked / total: the
    enrichment of the kept weight mass over uniform random placement.
    """
    sel_marked = sel_total = marked_total = pos_total = 0
    for seq, marked in sample:
        sv = abs_score(score_unfrozen(model, seq, n, o))
        wv = sparsify_quantile(sv, kappa, derive_seed(DIR_SEED, "conc", seq.seq_id))
        nz = np.flatnonzero(wv.weights)
        mset = {int(x) for x in marked}
        sel_marked += sum(1 for p in nz if int(p) in mset)
        sel_total += len(nz)
        marked_total += len(mset)
        pos_total += seq.length
    return (sel_marked / sel_total) / (marked_total / pos_total)


@pytest.fixture(scope="session")
def directional_setup():
    """Context extension plus continual training under four weight regimes.

    One shared model is pretrained at context 64, its rotary base scaled
    16x for context 256, then continually trained 500 steps per regime and
    replicate. Within a replicate every regime sees the same batch order
    and the same evaluation tasks, so regime differences are not sampling
    noise. Builds in roughly twenty minutes; session-scoped.
    """
    theta0 = _directional_pretrain()
    extended = extend_context(theta0, 256, 16.0)
    corpus = _directional_corpus()
    sample = _concentration_sample()

    def specs(r):
        return {
            "uniform": ScorerSpec(
                postprocess="uniform", n=DIR_SHORT_N, o=DIR_SHORT_O),
            "sparse_unfrozen": ScorerSpec(
                mode="unfrozen", score_fn="abs", postprocess="sparse",
                kappa=0.2, n=DIR_SHORT_N, o=DIR_SHORT_O,
                seed=derive_seed(DIR_SEED, "fill-su", r)),
            "dense_frozen": ScorerSpec(
                mode="frozen", score_fn="abs", postprocess="dense",
                lam=0.75, n=DIR_SHORT_N, o=DIR_SHORT_O, reference=theta0),
            "sparse_frozen": ScorerSpec(
                mode="frozen", score_fn="abs", postprocess="sparse",
                kappa=0.4, n=DIR_SHORT_N, o=DIR_SHORT_O, reference=theta0,
                seed=derive_seed(DIR_SEED, "fill-sf", r)),
        }

    combined = {}
    conc_ratios = []
    uniform_final = None
    sparse_records = []
    for r in range(DIR_REPLICATES):
        tcfg = TrainConfig(
            learning_rate=DIR_CT_LR, warmup_steps=50, total_steps=500,
            batch_size=8, seed=derive_seed(DIR_SEED, "ct", r),
        )
        for name, spec in specs(r).items():
            trained, records = run_training(extended, corpus, spec, tcfg)
            rep = evaluate_model(
                trained, lengths=(64, 128, 192, 256), tasks_per_cell=8,
                seed=derive_seed(DIR_SEED, "eval", r),
            )
            combined.setdefault(name, []).append(rep.combined)
            if name == "sparse_unfrozen":
                conc_ratios.append(selection_concentration(trained, sample))
                sparse_records.append(records)
            if name == "uniform" and r == 0:
                uniform_final = trained
    return SimpleNamespace(
        theta0=theta0,
        extended=extended,
        combined={k: np.array(v) for k, v in combined.items()},
        conc_ratios=np.array(conc_ratios),
        uniform_final=uniform_final,
        sparse_records=sparse_records,
    )


@pytest.fixture(scope="session")
def entity_model():
    """A model trained natively at context 128 on gap-48 recurrence data.

    The gap exceeds the short window used in scoring tests (n=32), so a
    trained model predicts recurrences from long context only.
    """
    corpus = gen_entity_recurrence_corpus(256, 128, gap=48, seed=202)
    cfg = TinyLmConfig(
        layers=2, d_model=64, n_heads=4, d_ff=256, vocab_size=64, max_context=128
    )
    model = init_model(cfg, seed=5)
    tcfg = TrainConfig(
        learning_rate=2e-3, warmup_steps=30, total_steps=500, batch_size=8, seed=9
    )
    spec = ScorerSpec(postprocess="uniform", n=32, o=8)
    trained, _ = run_training(model, corpus, spec, tcfg)
    return SimpleNamespace(model=trained, corpus=corpus)
