"""Raw per-token scores from short- vs long-context log-probabilities.

The signed score of token i is log p_short(i) - log p_long(i): positive
where the long context makes the token more predictable, negative where
it makes it less predictable. Its negation is the conditional pointwise
mutual information between the token and the faraway context given the
recent context, so the PMI rectifications (PPMI, NPMI and their shifted
forms) are derived from the same quantity. An entropy-based score over
the model's full-context distributions is provided as a baseline that
needs no second trace.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .model import LogProbTrace

__all__ = [
    "ScoreVector",
    "signed_score",
    "abs_score",
    "pmi_variant",
    "entropy_weight",
    "write_score_dump",
    "SCORE_FUNCTIONS",
    "PMI_VARIANTS",
]

PMI_VARIANTS = ("ppmi", "npmi", "sppmi", "snpmi")
SCORE_FUNCTIONS = ("signed", "abs") + PMI_VARIANTS + ("entropy",)


@dataclass(eq=False)
class ScoreVector:
    """Per-token raw scores before postprocessing.

    provenance records how the scores were produced (scoring function,
    scorer identity, context sizes) for dumps and cache fingerprints.
    """

    seq_id: int
    scores: np.ndarray
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        scores = np.ascontiguousarray(self.scores, dtype=np.float64)
        if scores.ndim != 1 or scores.size < 1:
            raise ValueError("scores must be a nonempty 1-D array")
        if not np.all(np.isfinite(scores)):
            raise ValueError("scores must be finite")
        object.__setattr__(self, "scores", scores)

    @property
    def length(self) -> int:
        return int(self.scores.size)


def _check_pair(short: LogProbTrace, long: LogProbTrace) -> None:
    if short.seq_id != long.seq_id:
        raise ValueError(
            f"trace seq_ids differ: {short.seq_id} vs {long.seq_id}"
        )
    if short.length != long.length:
        raise ValueError(
            f"trace lengths differ: {short.length} vs {long.length}"
        )
    if short.context_limit > long.context_limit:
        raise ValueError(
            "short trace must come from the smaller context limit"
        )


def signed_score(short: LogProbTrace, long: LogProbTrace) -> ScoreVector:
    """Signed contrastive score: log p_short - log p_long per token.

    Equivalently log(p_short / p_long); the negation is the pointwise
    mutual information between the token and the faraway context given
    the recent context.
    """
    _check_pair(short, long)
    scores = short.logp - long.logp
    return ScoreVector(
        seq_id=short.seq_id,
        scores=scores,
        provenance={
            "score_fn": "signed",
            "short_context": short.context_limit,
            "long_context": long.context_limit,
        },
    )


def abs_score(signed: ScoreVector) -> ScoreVector:
    """Absolute value of the signed score, entrywise."""
    prov = dict(signed.provenance)
    prov["score_fn"] = "abs"
    return ScoreVector(seq_id=signed.seq_id, scores=np.abs(signed.scores),
                       provenance=prov)


def pmi_variant(signed: ScoreVector, variant: str, k: int = 2) -> ScoreVector:
    """Rectified PMI scores from a signed ScoreVector.

    With pmi = -signed: ppmi = max(pmi, 0); npmi = max(-pmi, 0);
    sppmi = max(pmi - ln k, 0); snpmi = max(-pmi - ln k, 0).

    Args:
        signed: output of signed_score.
        variant: one of "ppmi", "npmi", "sppmi", "snpmi".
        k: integer shift, at least 2; used by the shifted variants only.
    """
    variant = variant.lower()
    if variant not in PMI_VARIANTS:
        raise ValueError(f"unknown variant {variant!r}; expected {PMI_VARIANTS}")
    pmi = -signed.scores
    if variant in ("sppmi", "snpmi"):
        if int(k) != k or k < 2:
            raise ValueError(f"shift k must be an integer >= 2, got {k!r}")
        shift = np.log(float(k))
    else:
        shift = 0.0
    raw = pmi if variant in ("ppmi", "sppmi") else -pmi
    out = np.maximum(raw - shift, 0.0)
    prov = dict(signed.provenance)
    prov["score_fn"] = variant
    if shift:
        prov["shift_k"] = int(k)
    return ScoreVector(seq_id=signed.seq_id, scores=out, provenance=prov)


def entropy_weight(distributions: np.ndarray, seq_id: int = 0) -> ScoreVector:
    """Entropy-based baseline score: max(1 - H(p_i), 0) in nats.

    Confident (low-entropy) predictions get scores near 1; entropies
    above 1 nat clamp to 0 since negative loss weights are meaningless.

    Args:
        distributions: (N, V) array, each row a normalized distribution.
        seq_id: carried into the ScoreVector.
    """
    dist = np.asarray(distributions, dtype=np.float64)
    if dist.ndim != 2:
        raise ValueError("distributions must have shape (N, V)")
    sums = dist.sum(axis=1)
    if np.max(np.abs(sums - 1.0)) > 1e-4:
        raise ValueError("each distribution must sum to 1 within 1e-4")
    with np.errstate(divide="ignore", invalid="ignore"):
        plogp = np.where(dist > 0.0, dist * np.log(dist), 0.0)
    ent = -plogp.sum(axis=1)
    return ScoreVector(
        seq_id=seq_id,
        scores=np.maximum(1.0 - ent, 0.0),
        provenance={"score_fn": "entropy"},
    )


def write_score_dump(
    path,
    ids: np.ndarray,
    long_trace: LogProbTrace,
    short_trace: LogProbTrace,
    scores: ScoreVector,
) -> None:
    """TSV dump of per-token losses and scores.

    Columns: pos, token_id, loss_long, loss_short, score. Losses are
    negative log-probabilities.
    """
    ids = np.asarray(ids)
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.write("pos\ttoken_id\tloss_long\tloss_short\tscore\n")
        for i in range(len(ids)):
            f.write(
                f"{i}\t{int(ids[i])}\t{-long_trace.logp[i]:.6f}\t"
                f"{-short_trace.logp[i]:.6f}\t{scores.scores[i]:.6f}\n"
            )
