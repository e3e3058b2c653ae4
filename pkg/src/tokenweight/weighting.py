"""Loss-weight postprocessing: sparse quantile selection and dense
normalization with uniform interpolation.

Every WeightVector sums to the sequence length N, so weighted training
keeps the effective learning rate of the uniform baseline. The sparse
path keeps the top kappa fraction of tokens at weight N/m and zeroes the
rest; the dense path rescales scores to sum to N and then mixes them
with the all-ones vector.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .corpus import derive_seed
from .model import LogProbTrace
from .scoring import ScoreVector

__all__ = [
    "WeightVector",
    "sparsify_quantile",
    "normalize_to_length",
    "interpolate_uniform",
    "uniform_weights",
    "sparse_count",
    "write_weight_dump",
]

_SUM_RTOL = 1e-9


@dataclass(eq=False)
class WeightVector:
    """Nonnegative per-token loss weights summing to the sequence length.

    postprocess tags how the weights were produced: {"kind": "sparse",
    "kappa": ..., "seed": ...}, {"kind": "dense", "lambda": ...} or
    {"kind": "uniform"}.
    """

    seq_id: int
    weights: np.ndarray
    postprocess: dict = field(default_factory=lambda: {"kind": "uniform"})

    def __post_init__(self):
        w = np.ascontiguousarray(self.weights, dtype=np.float64)
        if w.ndim != 1 or w.size < 1:
            raise ValueError("weights must be a nonempty 1-D array")
        if not np.all(np.isfinite(w)) or w.min() < 0.0:
            raise ValueError("weights must be finite and nonnegative")
        n = w.size
        if abs(w.sum() - n) > _SUM_RTOL * n:
            raise ValueError(
                f"weights must sum to the length {n}, got {w.sum()!r}"
            )
        object.__setattr__(self, "weights", w)

    @property
    def length(self) -> int:
        return int(self.weights.size)


def sparse_count(kappa: float, n: int) -> int:
    """Number of positions kept by sparse postprocessing: max(1, round(kappa*n))."""
    return max(1, int(round(kappa * n)))


def sparsify_quantile(scores: ScoreVector, kappa: float, seed: int) -> WeightVector:
    """Keep the top kappa fraction of tokens at weight N/m, zero the rest.

    Selection takes every position scoring strictly above the m-th
    largest score, then fills the remaining slots by seeded uniform
    sampling among the positions tied at the threshold (which covers the
    all-zero-score case: the fill is then uniform over zero-score
    positions). The fill RNG is derived from (seed, seq_id) so per-
    sequence results do not depend on processing order.

    Args:
        scores: nonnegative raw scores.
        kappa: fraction of tokens to keep, in (0, 1].
        seed: global postprocessing seed.
    """
    if not (0.0 < kappa <= 1.0):
        raise ValueError(f"kappa must be in (0, 1], got {kappa}")
    s = scores.scores
    if s.min() < 0.0:
        raise ValueError("sparse postprocessing expects nonnegative scores")
    n = s.size
    m = sparse_count(kappa, n)
    order = np.sort(s)[::-1]
    threshold = order[m - 1]
    above = np.flatnonzero(s > threshold)
    ties = np.flatnonzero(s == threshold)
    fill = m - above.size
    if fill == ties.size:
        chosen = ties
    else:
        rng = np.random.Generator(
            np.random.PCG64(derive_seed(seed, "sparse-fill", scores.seq_id))
        )
        chosen = rng.choice(ties, size=fill, replace=False)
    w = np.zeros(n, dtype=np.float64)
    w[above] = n / m
    w[chosen] = n / m
    return WeightVector(
        seq_id=scores.seq_id,
        weights=w,
        postprocess={"kind": "sparse", "kappa": float(kappa), "seed": int(seed)},
    )


def normalize_to_length(scores: ScoreVector) -> WeightVector:
    """Rescale nonnegative scores to sum to the sequence length.

    A (near-)zero score sum falls back to all-ones: the first short
    context window of an unfrozen run provably scores zero everywhere,
    and 0/0 weights are undefined.
    """
    s = scores.scores
    if s.min() < 0.0:
        raise ValueError("dense postprocessing expects nonnegative scores")
    n = s.size
    total = s.sum()
    if total < 1e-12 * n:
        w = np.ones(n, dtype=np.float64)
    else:
        w = s * (n / total)
    return WeightVector(
        seq_id=scores.seq_id, weights=w, postprocess={"kind": "dense-raw"}
    )


def interpolate_uniform(dense: WeightVector, lam: float) -> WeightVector:
    """Mix normalized weights with the all-ones vector: w = lam + (1-lam)*w.

    Leaves the sum at N. lam=1 recovers uniform weighting exactly; lam=0
    returns the input unchanged.
    """
    if not (0.0 <= lam <= 1.0):
        raise ValueError(f"lambda must be in [0, 1], got {lam}")
    w = lam + (1.0 - lam) * dense.weights
    return WeightVector(
        seq_id=dense.seq_id,
        weights=w,
        postprocess={"kind": "dense", "lambda": float(lam)},
    )


def uniform_weights(n: int, seq_id: int = 0) -> WeightVector:
    """All-ones weights of length n."""
    return WeightVector(
        seq_id=seq_id,
        weights=np.ones(int(n), dtype=np.float64),
        postprocess={"kind": "uniform"},
    )


def write_weight_dump(
    path,
    ids: np.ndarray,
    long_trace: LogProbTrace,
    short_trace: LogProbTrace,
    scores: ScoreVector,
    weights: WeightVector,
) -> None:
    """TSV dump of per-token losses, scores and final weights.

    Columns: pos, token_id, loss_long, loss_short, score, weight.
    """
    ids = np.asarray(ids)
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.write("pos\ttoken_id\tloss_long\tloss_short\tscore\tweight\n")
        for i in range(len(ids)):
            f.write(
                f"{i}\t{int(ids[i])}\t{-long_trace.logp[i]:.6f}\t"
                f"{-short_trace.logp[i]:.6f}\t{scores.scores[i]:.6f}\t"
                f"{weights.weights[i]:.6f}\n"
            )
