"""Scorer orchestration and the weighted training loop.

Three scorer modes cover who produces the short-context trace:

* frozen: a fixed reference model; its windowed traces (and the long
  traces of the model about to be trained) are computed once, cached,
  and reused, so weights stay constant across the run,
* unfrozen: the training model scores itself every step by contrasting
  its full-context trace with an artificially window-restricted one;
  positions inside the first window score exactly zero,
* weak_to_strong: frozen mode with a smaller reference.

Weights never receive gradients: they are recomputed constants attached
to each batch.
"""

from __future__ import annotations

import hashlib
import struct
import warnings
from dataclasses import dataclass, field

import numpy as np

from .corpus import TokenSequence, derive_seed, plan_windows
from .errors import StaleCacheError
from .model import TinyLm, _gather_logprobs, checkpoint_bytes
from .scoring import (
    PMI_VARIANTS,
    SCORE_FUNCTIONS,
    ScoreVector,
    abs_score,
    entropy_weight,
    pmi_variant,
    signed_score,
)
from .training import AdamW, TrainConfig, train_step
from .weighting import (
    WeightVector,
    interpolate_uniform,
    normalize_to_length,
    sparsify_quantile,
    uniform_weights,
)

__all__ = [
    "ScorerSpec",
    "ScoreCache",
    "StepRecord",
    "score_frozen",
    "score_unfrozen",
    "run_training",
    "save_cache",
    "load_cache",
    "scorer_fingerprint",
    "apply_score_fn",
    "postprocess_scores",
    "write_run_log",
]

_CACHE_MAGIC = b"SWC1"

MODES = ("frozen", "unfrozen", "weak_to_strong")
POSTPROCESSES = ("sparse", "dense", "uniform")


@dataclass
class ScorerSpec:
    """Static description of how token weights are produced.

    mode selects the scorer identity, score_fn the raw scoring function,
    postprocess the weight transformation. n and o are the short context
    size and window overlap. reference carries the frozen or
    weak-to-strong scorer model; it may be attached after construction
    but must be present before scoring starts.
    """

    mode: str = "unfrozen"
    score_fn: str = "abs"
    postprocess: str = "uniform"
    kappa: float = 0.2
    lam: float = 0.75
    n: int = 64
    o: int = 16
    shift_k: int = 2
    seed: int = 0
    reference: TinyLm | None = field(default=None, repr=False)

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown mode {self.mode!r}; expected {MODES}")
        if self.score_fn not in SCORE_FUNCTIONS:
            raise ValueError(
                f"unknown score_fn {self.score_fn!r}; expected {SCORE_FUNCTIONS}"
            )
        if self.postprocess not in POSTPROCESSES:
            raise ValueError(
                f"unknown postprocess {self.postprocess!r}; expected {POSTPROCESSES}"
            )
        if self.postprocess == "sparse" and not (0.0 < self.kappa <= 1.0):
            raise ValueError(f"sparse kappa must be in (0, 1], got {self.kappa}")
        if self.postprocess == "dense" and not (0.0 <= self.lam <= 1.0):
            raise ValueError(f"dense lambda must be in [0, 1], got {self.lam}")
        if not (0 < self.o < self.n):
            raise ValueError(f"need 0 < o < n, got n={self.n}, o={self.o}")
        if self.postprocess != "uniform" and self.score_fn == "signed":
            raise ValueError(
                "signed scores can be negative; apply abs or a PMI variant "
                "before sparse or dense postprocessing"
            )

    def needs_reference(self) -> bool:
        return self.mode in ("frozen", "weak_to_strong")


@dataclass(eq=False)
class ScoreCache:
    """Cached log-probability traces keyed by seq_id.

    short holds windowed reference traces; long holds the full-context
    traces of the model under training at scoring time (frozen mode
    caches both so weights stay fixed for the whole run).
    """

    fingerprint: bytes
    n: int
    o: int
    short: dict[int, np.ndarray] = field(default_factory=dict)
    long: dict[int, np.ndarray] = field(default_factory=dict)


def scorer_fingerprint(reference: TinyLm, n: int, o: int, score_fn: str) -> bytes:
    """64-bit fingerprint of (reference checkpoint bytes, n, o, score_fn)."""
    h = hashlib.blake2b(digest_size=8)
    h.update(checkpoint_bytes(reference))
    h.update(struct.pack("<2q", n, o))
    h.update(score_fn.encode())
    return h.digest()


def save_cache(path, cache: ScoreCache) -> None:
    """Write a score cache: header (magic, fingerprint, n, o) then
    per-sequence blocks (seq_id, length, short and long float64 arrays).

    A sequence with no cached long trace stores NaNs in the long slot.
    """
    with open(path, "wb") as f:
        f.write(_CACHE_MAGIC)
        f.write(cache.fingerprint)
        f.write(struct.pack("<2i", cache.n, cache.o))
        for seq_id in sorted(cache.short):
            short = np.asarray(cache.short[seq_id], dtype="<f8")
            long = cache.long.get(seq_id)
            if long is None:
                long = np.full_like(short, np.nan)
            f.write(struct.pack("<2q", seq_id, short.size))
            f.write(short.tobytes())
            f.write(np.asarray(long, dtype="<f8").tobytes())


def load_cache(path, expected_fingerprint: bytes | None = None) -> ScoreCache:
    """Read a score cache; raises StaleCacheError on fingerprint mismatch."""
    with open(path, "rb") as f:
        blob = f.read()
    if blob[:4] != _CACHE_MAGIC:
        raise ValueError(f"not a score cache: bad magic {blob[:4]!r}")
    fingerprint = blob[4:12]
    n, o = struct.unpack_from("<2i", blob, 12)
    if expected_fingerprint is not None and fingerprint != expected_fingerprint:
        raise StaleCacheError(
            f"cache fingerprint {fingerprint.hex()} does not match the active "
            f"scorer {expected_fingerprint.hex()}"
        )
    cache = ScoreCache(fingerprint=fingerprint, n=n, o=o)
    off = 20
    while off < len(blob):
        seq_id, length = struct.unpack_from("<2q", blob, off)
        off += 16
        short = np.frombuffer(blob, dtype="<f8", count=length, offset=off)
        off += 8 * length
        long = np.frombuffer(blob, dtype="<f8", count=length, offset=off)
        off += 8 * length
        cache.short[seq_id] = short.astype(np.float64)
        cache.long[seq_id] = None if np.all(np.isnan(long)) else long.astype(np.float64)
    return cache


def _short_logprobs_from_long(
    model: TinyLm, ids: np.ndarray, n: int, o: int, long: np.ndarray
) -> np.ndarray:
    """Window-restricted traces where positions < n reuse the long trace.

    This is the unfrozen shortcut: inside the first window the "short"
    model is the model itself with identical context, so the values are
    copied instead of recomputed and the scores there cancel to zero.
    """
    B, N = ids.shape
    out = long.copy()
    if N <= n:
        return out  # no context gap exists: short == long everywhere
    plan = plan_windows(N, n, o)
    for ws, we, ps, pe in plan.entries[1:]:
        # Anchored continuation windows, matching batch_logprobs: the model
        # only ever trains on inputs that start with the BOS token.
        inp = np.concatenate(
            [np.full((B, 1), model.cfg.bos_id, dtype=np.int64),
             ids[:, ws : we - 1]],
            axis=1,
        )
        logits = model.logits(inp)
        sel = slice(ps - ws, pe - ws)
        out[:, ps:pe] = _gather_logprobs(logits[:, sel], ids[:, ps:pe])
    return out


def score_frozen(
    reference: TinyLm,
    sequences: list[TokenSequence],
    n: int,
    o: int,
    score_fn: str = "abs",
    long_model: TinyLm | None = None,
) -> ScoreCache:
    """Compute and cache frozen-scorer traces for a corpus.

    The reference model produces the windowed short-context traces. When
    long_model is given (the model about to be trained, at its current
    parameters), its full-context traces are cached as the long side so
    scoring can run without touching the model again.
    """
    if reference.cfg.max_context < n:
        raise ValueError(
            f"reference context {reference.cfg.max_context} is below n={n}"
        )
    cache = ScoreCache(
        fingerprint=scorer_fingerprint(reference, n, o, score_fn), n=n, o=o
    )
    by_len: dict[int, list[TokenSequence]] = {}
    for seq in sequences:
        by_len.setdefault(seq.length, []).append(seq)
    for length, group in sorted(by_len.items()):
        ids = np.stack([s.ids for s in group])
        short = reference.batch_logprobs(ids, n, overlap=o)
        long = long_model.batch_logprobs(ids, length) if long_model is not None else None
        for row, seq in enumerate(group):
            cache.short[seq.seq_id] = short[row]
            if long is not None:
                cache.long[seq.seq_id] = long[row]
    return cache


def score_unfrozen(model: TinyLm, sequence: TokenSequence, n: int, o: int) -> ScoreVector:
    """Signed self-scores of one sequence under the unfrozen regime.

    The long trace is the model's full-context trace; short-trace values
    for positions < n are copied from it, making those scores exactly 0.
    """
    if model.cfg.max_context < sequence.length:
        raise ValueError("sequence does not fit the model context")
    ids = sequence.ids[None, :]
    long = model.batch_logprobs(ids, sequence.length)
    short = _short_logprobs_from_long(model, ids, n, o, long)
    scores = (short - long)[0]
    return ScoreVector(
        seq_id=sequence.seq_id,
        scores=scores,
        provenance={"score_fn": "signed", "mode": "unfrozen",
                    "short_context": n, "long_context": sequence.length},
    )


def apply_score_fn(spec: ScorerSpec, signed: ScoreVector) -> ScoreVector:
    """Transform a signed ScoreVector per the spec's scoring function."""
    if spec.score_fn == "signed":
        return signed
    if spec.score_fn == "abs":
        return abs_score(signed)
    if spec.score_fn in PMI_VARIANTS:
        return pmi_variant(signed, spec.score_fn, k=spec.shift_k)
    raise ValueError(f"score_fn {spec.score_fn!r} is not trace-based")


def postprocess_scores(spec: ScorerSpec, scores: ScoreVector) -> WeightVector:
    """Turn raw scores into loss weights per the spec's postprocess."""
    if spec.postprocess == "uniform":
        return uniform_weights(scores.length, scores.seq_id)
    if spec.postprocess == "sparse":
        return sparsify_quantile(scores, spec.kappa, spec.seed)
    return interpolate_uniform(normalize_to_length(scores), spec.lam)


@dataclass
class StepRecord:
    """One training step's log entry.

    The file log keeps (step, loss, w_mean, w_max, nnz_frac); the prefix
    fields support the zero-score property checks for unfrozen runs and
    stay in memory only.
    """

    step: int
    loss: float
    w_mean: float
    w_max: float
    nnz_frac: float
    prefix_max_abs_score: float | None = None
    prefix_max_weight: float | None = None


def write_run_log(path, records: list[StepRecord]) -> None:
    """Line-delimited run log with fields step, loss, w_mean, w_max, nnz_frac."""
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.write("step\tloss\tw_mean\tw_max\tnnz_frac\n")
        for r in records:
            f.write(
                f"{r.step}\t{r.loss:.6f}\t{r.w_mean:.6f}\t{r.w_max:.6f}\t"
                f"{r.nnz_frac:.6f}\n"
            )


def _batch_weights(
    spec: ScorerSpec,
    model: TinyLm,
    ids: np.ndarray,
    seq_ids: list[int],
    frozen_weights: dict[int, WeightVector] | None,
) -> tuple[np.ndarray, np.ndarray | None]:
    """Weights (B, N) for one batch, plus raw scores when they exist."""
    B, N = ids.shape
    if spec.postprocess == "uniform":
        return np.ones((B, N), dtype=np.float64), None
    if frozen_weights is not None:
        w = np.stack([frozen_weights[sid].weights for sid in seq_ids])
        return w, None
    # Unfrozen: self-score the batch with the current parameters.
    long = model.batch_logprobs(ids, N)
    if spec.score_fn == "entropy":
        dists = model.batch_distributions(ids)
        svs = [entropy_weight(dists[b], seq_id=seq_ids[b]) for b in range(B)]
        scores = np.stack([sv.scores for sv in svs])
    else:
        short = _short_logprobs_from_long(model, ids, spec.n, spec.o, long)
        scores = short - long
        svs = []
        for b in range(B):
            signed = ScoreVector(
                seq_id=seq_ids[b], scores=scores[b],
                provenance={"score_fn": "signed", "mode": "unfrozen"},
            )
            svs.append(apply_score_fn(spec, signed))
        scores = np.stack([sv.scores for sv in svs])
    w = np.stack([postprocess_scores(spec, sv).weights for sv in svs])
    return w, scores


def _frozen_weight_table(
    spec: ScorerSpec,
    model: TinyLm,
    sequences: list[TokenSequence],
    cache: ScoreCache,
) -> dict[int, WeightVector]:
    """Fixed per-sequence weights from cached frozen traces."""
    out: dict[int, WeightVector] = {}
    for seq in sequences:
        short = cache.short[seq.seq_id]
        long = cache.long.get(seq.seq_id)
        if long is None:
            long = model.batch_logprobs(seq.ids[None, :], seq.length)[0]
            cache.long[seq.seq_id] = long
        if spec.score_fn == "entropy":
            dists = spec.reference.batch_distributions(seq.ids[None, :])[0]
            sv = entropy_weight(dists, seq_id=seq.seq_id)
        else:
            signed = ScoreVector(
                seq_id=seq.seq_id, scores=short - long,
                provenance={"score_fn": "signed", "mode": spec.mode},
            )
            sv = apply_score_fn(spec, signed)
        out[seq.seq_id] = postprocess_scores(spec, sv)
    return out


def run_training(
    model: TinyLm,
    corpus: list[TokenSequence],
    spec: ScorerSpec,
    cfg: TrainConfig,
    log_path=None,
    cache_path=None,
) -> tuple[TinyLm, list[StepRecord]]:
    """Train a model under a scorer spec; returns (model, step records).

    Frozen modes compute (or load from cache_path) the reference traces
    once, derive fixed per-sequence weights, and train against them.
    The unfrozen mode rescored every batch from the parameters at step
    start. A stale cache triggers rescoring with a warning. Batch order
    is deterministic under cfg.seed and independent of the scorer.
    """
    if not corpus:
        raise ValueError("corpus is empty")
    lengths = {s.length for s in corpus}
    if len(lengths) != 1:
        raise ValueError(f"corpus sequences must share one length, got {sorted(lengths)}")
    N = lengths.pop()
    if N > model.cfg.max_context:
        raise ValueError(
            f"sequence length {N} exceeds model context {model.cfg.max_context}"
        )
    if spec.n >= model.cfg.max_context:
        raise ValueError(
            f"short context n={spec.n} must be below the model context "
            f"{model.cfg.max_context}"
        )
    if spec.needs_reference() and spec.reference is None:
        raise ValueError(f"mode {spec.mode!r} requires a reference model")

    # Train a copy; the caller's model stays at its initial parameters.
    model = model.copy()

    frozen_weights: dict[int, WeightVector] | None = None
    if spec.needs_reference() and spec.postprocess != "uniform":
        fp = scorer_fingerprint(spec.reference, spec.n, spec.o, spec.score_fn)
        cache: ScoreCache | None = None
        if cache_path is not None:
            try:
                cache = load_cache(cache_path, expected_fingerprint=fp)
            except FileNotFoundError:
                cache = None
            except StaleCacheError as e:
                warnings.warn(f"rescoring: {e}", RuntimeWarning, stacklevel=2)
                cache = None
        if cache is None:
            cache = score_frozen(
                spec.reference, corpus, spec.n, spec.o,
                score_fn=spec.score_fn, long_model=model,
            )
            if cache_path is not None:
                save_cache(cache_path, cache)
        frozen_weights = _frozen_weight_table(spec, model, corpus, cache)

    opt = AdamW(model, cfg)
    rng = np.random.Generator(np.random.PCG64(derive_seed(cfg.seed, "batch-order")))
    order = rng.permutation(len(corpus))
    cursor = 0
    records: list[StepRecord] = []
    for step in range(cfg.total_steps):
        take = []
        while len(take) < cfg.batch_size:
            if cursor >= len(order):
                order = rng.permutation(len(corpus))
                cursor = 0
            take.append(int(order[cursor]))
            cursor += 1
        seqs = [corpus[i] for i in take]
        ids = np.stack([s.ids for s in seqs])
        seq_ids = [s.seq_id for s in seqs]
        w, scores = _batch_weights(spec, model, ids, seq_ids, frozen_weights)
        loss = train_step(model, list(zip(ids, w)), cfg, opt, step)
        rec = StepRecord(
            step=step,
            loss=loss,
            w_mean=float(w.mean()),
            w_max=float(w.max()),
            nnz_frac=float(np.count_nonzero(w) / w.size),
        )
        if scores is not None:
            rec.prefix_max_abs_score = float(np.abs(scores[:, : spec.n]).max())
            rec.prefix_max_weight = float(w[:, : spec.n].max())
        records.append(rec)
    if log_path is not None:
        write_run_log(log_path, records)
    return model, records
