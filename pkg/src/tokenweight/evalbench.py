"""Miniature long-context benchmark and analytic test oracles.

Seven synthetic task kinds (four needle-in-a-haystack variants, variable
tracking, common-words and frequent-words extraction) are generated at
several context-length buckets, scored by exact token-span recall on
greedy decodes, and aggregated as mean-over-tasks then mean-over-lengths.

The module also hosts per-position perplexity curves and two executable
identities used as test oracles: the equality between the negated
contrastive score and conditional pointwise mutual information on exact
Markov data, and the KL ordering implied by pointwise dominance.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .corpus import (
    DIGIT_RANGE,
    ENT_MARK,
    FILLER_RANGE,
    KEY_MARK,
    KEY_RANGE,
    PERIOD,
    QUERY_MARK,
    SEP,
    VAL_MARK,
    MarkovOracle,
    TokenSequence,
    derive_seed,
    _filler_sentences,
)
from .errors import DominanceError, EnumerationBudgetError
from .model import TinyLm

__all__ = [
    "EvalTask",
    "EvalReport",
    "TASK_KINDS",
    "DECODE_BUDGET",
    "gen_eval_task",
    "score_recall",
    "aggregate",
    "evaluate_model",
    "decode_greedy",
    "perplexity_by_position",
    "cpmi_oracle_check",
    "kl_ordering_check",
    "write_report",
    "save_tasks",
    "load_tasks",
]

TASK_KINDS = (
    "niah_single",
    "niah_multikey",
    "niah_multivalue",
    "niah_multiquery",
    "variable_tracking",
    "common_words",
    "frequent_words",
)

# Tokens reserved at the end of each bucket for the greedy decode (the
# prompt occupies bucket_length - DECODE_BUDGET - 1, leaving room for the
# begin-of-sequence slot plus the generated answer).
DECODE_BUDGET = 20


@dataclass(eq=False)
class EvalTask:
    """One benchmark prompt with its expected answer spans."""

    kind: str
    prompt: TokenSequence
    answers: list[np.ndarray]
    length_bucket: int

    def __post_init__(self):
        if not self.answers:
            raise ValueError("a task needs at least one expected answer span")
        self.answers = [np.asarray(a, dtype=np.int64) for a in self.answers]


@dataclass
class EvalReport:
    """Recall matrix plus the aggregated scores."""

    cells: dict[tuple[str, int], float]
    per_length: dict[int, float]
    per_task: dict[str, float]
    combined: float


def _rng(*parts) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(derive_seed(*parts)))


def _filler_base(rng: np.random.Generator, length: int) -> np.ndarray:
    pattern = _filler_sentences(rng)
    reps = length // len(pattern) + 1
    return np.tile(pattern, reps)[:length].copy()


def _plant(ids: np.ndarray, spans: list[np.ndarray], rng: np.random.Generator,
           limit: int) -> list[int]:
    """Plant spans at random non-overlapping offsets within ids[:limit].

    Returns the chosen start offsets, in the order of `spans`. Rejection
    sampling handles roomy prompts; when it fragments a tight prompt the
    spans are repacked in order with random gaps, which always fits as
    long as the spans fit end to end.
    """
    total = sum(len(s) for s in spans)
    if total > limit:
        raise ValueError("could not place spans; prompt too small")
    original = ids[:limit].copy()
    occupied = np.zeros(limit, dtype=bool)
    starts = []
    for span in spans:
        L = len(span)
        placed = False
        for _ in range(100):
            p = int(rng.integers(0, limit - L + 1))
            if not occupied[p : p + L].any():
                placed = True
                break
        if not placed:
            break
        ids[p : p + L] = span
        occupied[p : p + L] = True
        starts.append(p)
    if len(starts) == len(spans):
        return starts
    # Repack: restore the filler, then lay spans in order with random gaps.
    ids[:limit] = original
    cuts = np.sort(rng.integers(0, limit - total + 1, size=len(spans)))
    starts = []
    pos = 0
    prev = 0
    for span, cut in zip(spans, cuts):
        pos += int(cut) - prev
        prev = int(cut)
        ids[pos : pos + len(span)] = span
        starts.append(pos)
        pos += len(span)
    return starts


def _distinct_rows(rng: np.random.Generator, lo: int, hi: int, count: int,
                   width: int) -> np.ndarray:
    """Sample `count` distinct token rows of the given width from [lo, hi)."""
    seen = set()
    rows = []
    for _ in range(10_000):
        row = tuple(int(x) for x in rng.integers(lo, hi, size=width))
        if row not in seen:
            seen.add(row)
            rows.append(row)
            if len(rows) == count:
                return np.asarray(rows, dtype=np.int64)
    raise ValueError(f"cannot draw {count} distinct width-{width} rows")


def gen_eval_task(
    kind: str,
    length: int,
    seed: int,
    m: int = 4,
    k: int = 5,
    n_targets: int = 3,
    target_reps: int = 6,
    distractor_reps: int = 2,
    zeta_exponent: float = 2.0,
    key_len: int = 2,
    value_len: int = 4,
) -> EvalTask:
    """Generate one benchmark task, deterministic under seed.

    The prompt occupies length - DECODE_BUDGET - 1 tokens so the decode
    fits inside the bucket. Kind-specific parameters: m is the planted
    pair count for the multikey/multivalue/multiquery needle tasks, k the
    chain length for variable tracking, and the *_reps / n_targets /
    zeta_exponent values shape the word-counting tasks.
    """
    if kind not in TASK_KINDS:
        raise ValueError(f"unknown task kind {kind!r}; expected {TASK_KINDS}")
    P = length - DECODE_BUDGET - 1
    rng = _rng(seed, kind, length)

    if kind.startswith("niah"):
        n_pairs = 1 if kind == "niah_single" else m
        n_values = m if kind == "niah_multivalue" else 1
        keys = _distinct_rows(rng, *KEY_RANGE, count=n_pairs, width=key_len)
        n_needles = n_pairs if kind != "niah_multivalue" else n_values
        values = _distinct_rows(rng, *DIGIT_RANGE, count=n_needles, width=value_len)
        if kind == "niah_multivalue":
            needles = [
                np.concatenate([[KEY_MARK], keys[0], [VAL_MARK], values[i]])
                for i in range(n_values)
            ]
        else:
            needles = [
                np.concatenate([[KEY_MARK], keys[i], [VAL_MARK], values[i]])
                for i in range(n_pairs)
            ]
        if kind == "niah_multiquery":
            q_keys = list(range(n_pairs))
            query = np.concatenate(
                [[QUERY_MARK]] + [keys[i] for i in q_keys] + [[SEP]]
            )
            answers = [values[i] for i in q_keys]
        else:
            asked = int(rng.integers(0, n_pairs))
            query = np.concatenate([[QUERY_MARK], keys[asked], [SEP]])
            answers = [values[asked]] if kind != "niah_multivalue" else list(values)
        body_len = P - len(query)
        min_body = sum(len(nd) for nd in needles)
        if body_len < min_body + 1:
            raise ValueError(
                f"length {length} too small for {kind} (needs >= "
                f"{min_body + len(query) + DECODE_BUDGET + 2})"
            )
        ids = _filler_base(rng, body_len)
        _plant(ids, needles, rng, body_len)
        prompt = np.concatenate([ids, query])

    elif kind == "variable_tracking":
        names = _distinct_rows(rng, *KEY_RANGE, count=k, width=1)[:, 0]
        value = rng.integers(*DIGIT_RANGE, size=value_len)
        stmts = [np.concatenate([[names[0]], [VAL_MARK], value, [PERIOD]])]
        for i in range(1, k):
            stmts.append(
                np.concatenate([[names[i]], [VAL_MARK], [names[i - 1]], [PERIOD]])
            )
        query = np.concatenate([[QUERY_MARK], value, [SEP]])
        body_len = P - len(query)
        total_stmt = sum(len(s) for s in stmts)
        slack = body_len - total_stmt
        if slack < 0:
            raise ValueError(f"length {length} too small for variable_tracking")
        ids = _filler_base(rng, body_len)
        # Statements stay in chain order so each reference points backward;
        # random gaps between them always fit by construction.
        cuts = np.sort(rng.integers(0, slack + 1, size=k))
        pos = 0
        prev_cut = 0
        for s, c in zip(stmts, cuts):
            pos += int(c) - prev_cut
            prev_cut = int(c)
            ids[pos : pos + len(s)] = s
            pos += len(s)
        prompt = np.concatenate([ids, query])
        answers = [np.asarray([nm]) for nm in names]

    elif kind == "common_words":
        query = np.asarray([QUERY_MARK, KEY_MARK, SEP])
        body_len = P - len(query)
        pool = np.arange(KEY_RANGE[0], FILLER_RANGE[1])
        pool = pool[(pool < KEY_RANGE[1]) | (pool >= FILLER_RANGE[0])]
        rng.shuffle(pool)
        need = n_targets * target_reps
        if body_len < need + distractor_reps:
            raise ValueError(f"length {length} too small for common_words")
        targets = pool[:n_targets]
        n_distract = (body_len - need) // distractor_reps
        if n_targets + n_distract > len(pool):
            n_distract = len(pool) - n_targets
        distractors = pool[n_targets : n_targets + n_distract]
        words = [np.repeat(targets, target_reps),
                 np.repeat(distractors, distractor_reps)]
        body = np.concatenate(words)
        pad = body_len - len(body)
        # Pad with single occurrences of leftover pool words (still rarer
        # than the targets).
        if pad > 0:
            extra = np.resize(pool[n_targets:], pad)
            body = np.concatenate([body, extra])
        rng.shuffle(body)
        prompt = np.concatenate([body, query])
        answers = [np.asarray([t]) for t in targets]

    elif kind == "frequent_words":
        query = np.asarray([QUERY_MARK, ENT_MARK, SEP])
        body_len = P - len(query)
        if body_len < 16:
            raise ValueError(f"length {length} too small for frequent_words")
        pool = np.arange(KEY_RANGE[0], FILLER_RANGE[1])
        rng.shuffle(pool)
        draws = rng.zipf(zeta_exponent, size=body_len)
        draws = np.minimum(draws, len(pool)) - 1
        body = pool[draws]
        # Force a strict count separation between rank 3 and rank 4 so the
        # expected top-3 answer is unambiguous.
        for _ in range(body_len):
            vals, counts = np.unique(body, return_counts=True)
            order = np.lexsort((vals, -counts))
            ranked = vals[order]
            if len(ranked) >= 4 and counts[order][2] == counts[order][3]:
                swap = np.flatnonzero(body == ranked[-1])[0]
                body[swap] = ranked[2]
            else:
                break
        vals, counts = np.unique(body, return_counts=True)
        order = np.lexsort((vals, -counts))
        top3 = vals[order][:3]
        rng.shuffle(body)
        prompt = np.concatenate([body, query])
        answers = [np.asarray([t]) for t in top3]

    else:  # pragma: no cover - guarded above
        raise ValueError(kind)

    return EvalTask(
        kind=kind,
        prompt=TokenSequence(seq_id=seed % (2**31), ids=prompt),
        answers=answers,
        length_bucket=length,
    )


def score_recall(output: np.ndarray, answers: list[np.ndarray]) -> float:
    """Fraction of expected spans appearing contiguously in the output."""
    output = np.asarray(output, dtype=np.int64)
    if len(answers) == 0:
        raise ValueError("answers must be nonempty")
    hits = 0
    for span in answers:
        span = np.asarray(span, dtype=np.int64)
        L = len(span)
        found = any(
            np.array_equal(output[i : i + L], span)
            for i in range(0, len(output) - L + 1)
        )
        hits += bool(found)
    return hits / len(answers)


def aggregate(cells: dict[tuple[str, int], float]) -> EvalReport:
    """Mean recall over tasks per length, then mean over lengths.

    Raises ValueError when the (kind, length) grid has holes.
    """
    if not cells:
        raise ValueError("no cells to aggregate")
    kinds = sorted({k for k, _ in cells})
    lengths = sorted({l for _, l in cells})
    missing = [(k, l) for k in kinds for l in lengths if (k, l) not in cells]
    if missing:
        raise ValueError(f"missing cells: {missing}")
    per_length = {
        l: float(np.mean([cells[(k, l)] for k in kinds])) for l in lengths
    }
    per_task = {
        k: float(np.mean([cells[(k, l)] for l in lengths])) for k in kinds
    }
    combined = float(np.mean([per_length[l] for l in lengths]))
    return EvalReport(cells=dict(cells), per_length=per_length,
                      per_task=per_task, combined=combined)


def decode_greedy(model: TinyLm, prompts: np.ndarray, max_new: int) -> np.ndarray:
    """Greedy decode: argmax continuation of each prompt row.

    Re-runs the full forward per generated token; fine at desk scale.
    """
    cur = np.asarray(prompts, dtype=np.int64)
    B, P = cur.shape
    if P + max_new + 1 > model.cfg.max_context:
        raise ValueError(
            f"prompt {P} + {max_new} new tokens exceeds context "
            f"{model.cfg.max_context}"
        )
    bos = np.full((B, 1), model.cfg.bos_id, dtype=np.int64)
    out = np.empty((B, 0), dtype=np.int64)
    for _ in range(max_new):
        logits = model.logits(np.concatenate([bos, cur], axis=1))
        nxt = logits[:, -1, :].argmax(axis=1)
        cur = np.concatenate([cur, nxt[:, None]], axis=1)
        out = np.concatenate([out, nxt[:, None]], axis=1)
    return out


def evaluate_model(
    model: TinyLm,
    lengths: tuple[int, ...] = (64, 128, 192, 256),
    kinds: tuple[str, ...] = TASK_KINDS,
    tasks_per_cell: int = 8,
    seed: int = 0,
    **task_params,
) -> EvalReport:
    """Run the benchmark grid against a model and aggregate recalls."""
    cells: dict[tuple[str, int], float] = {}
    for kind in kinds:
        for L in lengths:
            tasks = [
                gen_eval_task(kind, L, derive_seed(seed, kind, L, t), **task_params)
                for t in range(tasks_per_cell)
            ]
            prompts = np.stack([t.prompt.ids for t in tasks])
            outs = decode_greedy(model, prompts, DECODE_BUDGET)
            recalls = [
                score_recall(outs[i], tasks[i].answers) for i in range(len(tasks))
            ]
            cells[(kind, L)] = float(np.mean(recalls))
    return aggregate(cells)


def perplexity_by_position(
    model: TinyLm,
    sequences: list[TokenSequence],
    bucket_width: int,
    context_limit: int | None = None,
    overlap: int | None = None,
    batch_size: int = 256,
) -> tuple[np.ndarray, np.ndarray]:
    """Per-position-bucket perplexity curve with uniform weights.

    Returns (bucket_starts, perplexities) where bucket b covers positions
    [start, start + bucket_width) and its value is exp(mean NLL) over all
    tokens of all sequences in that range.
    """
    if bucket_width < 1:
        raise ValueError("bucket_width must be >= 1")
    if not sequences:
        raise ValueError("no sequences")
    N = sequences[0].length
    if any(s.length != N for s in sequences):
        raise ValueError("sequences must share one length")
    c = N if context_limit is None else int(context_limit)
    total = np.zeros(N, dtype=np.float64)
    count = 0
    for s in range(0, len(sequences), batch_size):
        ids = np.stack([q.ids for q in sequences[s : s + batch_size]])
        logp = model.batch_logprobs(ids, c, overlap=overlap)
        total += -logp.sum(axis=0)
        count += ids.shape[0]
    mean_nll = total / count
    starts = np.arange(0, N, bucket_width)
    ppl = np.array([
        np.exp(mean_nll[b : b + bucket_width].mean()) for b in starts
    ])
    return starts, ppl


def cpmi_oracle_check(
    oracle: MarkovOracle,
    sequence: np.ndarray,
    i: int,
    j: int,
    state_budget: int = 200_000,
) -> tuple[float, float]:
    """Both sides of the contrastive-score identity on exact chain data.

    lhs is the negated conditional pointwise mutual information between
    token y_i and the faraway prefix given the recent j tokens, computed
    from four joint probabilities by exact enumeration over the chain's
    stationary process. rhs is log(p_j(i) / p_m(i)) from marginalized
    conditionals. The identity asserts lhs == rhs.

    Args:
        oracle: the exact chain.
        sequence: sampled token array (stationary start).
        i: scored position, at least the chain order m.
        j: short-context order, 0 <= j <= m.
        state_budget: cap on the number of enumerated chain states.
    """
    seq = np.asarray(sequence, dtype=np.int64)
    m = oracle.order
    if not (0 <= j <= m <= i < len(seq)):
        raise ValueError(f"need 0 <= j <= m <= i < len(seq); got i={i}, j={j}, m={m}")
    if oracle.n_states > state_budget:
        raise EnumerationBudgetError(
            f"{oracle.n_states} states exceed the budget {state_budget}; "
            "reduce the vocabulary or the order"
        )
    if oracle.table.min() <= 0.0:
        raise ValueError("oracle probabilities must be strictly positive")

    y_r = seq[i - j : i + 1]
    r = seq[i - j : i]
    pmi = (
        oracle.gram_logprob(seq[: i + 1])  # p(y, a, r)
        + oracle.gram_logprob(r)           # p(r)
        - oracle.gram_logprob(y_r)         # p(y, r)
        - oracle.gram_logprob(seq[:i])     # p(a, r)
    )
    lhs = -pmi

    p_short = oracle.limited_conditional(r)[seq[i]]
    p_long = oracle.conditional(seq[i - m : i])[seq[i]]
    rhs = float(np.log(p_short) - np.log(p_long))
    return float(lhs), rhs


def kl_ordering_check(pi: np.ndarray, p: np.ndarray, q: np.ndarray) -> dict:
    """Check the expected-log and KL ordering implied by p >= q on supp(pi).

    Returns the four quantities {e_log_p, e_log_q, kl_p, kl_q}. Raises
    DominanceError when the dominance precondition fails (the ordering is
    vacuous then) and AssertionError if the ordering itself is violated
    beyond 1e-12, which would contradict the underlying lemma.
    """
    pi = np.asarray(pi, dtype=np.float64)
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    for name, d in (("pi", pi), ("p", p), ("q", q)):
        if d.min() < 0 or abs(d.sum() - 1.0) > 1e-9:
            raise ValueError(f"{name} is not a normalized distribution")
    supp = pi > 0.0
    if np.any(p[supp] < q[supp] - 1e-15):
        raise DominanceError("p must dominate q pointwise on the support of pi")
    with np.errstate(divide="ignore"):
        log_p = np.log(p[supp])
        log_q = np.log(q[supp])
        log_pi = np.log(pi[supp])
    w = pi[supp]
    out = {
        "e_log_p": float((w * log_p).sum()),
        "e_log_q": float((w * log_q).sum()),
        "kl_p": float((w * (log_pi - log_p)).sum()),
        "kl_q": float((w * (log_pi - log_q)).sum()),
    }
    assert out["e_log_p"] >= out["e_log_q"] - 1e-12, out
    assert out["kl_p"] <= out["kl_q"] + 1e-12, out
    return out


def write_report(path, report: EvalReport) -> None:
    """TSV matrix: task rows, length columns, mean row/column."""
    lengths = sorted(report.per_length)
    kinds = sorted(report.per_task)
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.write("task\t" + "\t".join(str(l) for l in lengths) + "\tmean\n")
        for k in kinds:
            row = [f"{report.cells[(k, l)]:.4f}" for l in lengths]
            f.write(k + "\t" + "\t".join(row) + f"\t{report.per_task[k]:.4f}\n")
        means = [f"{report.per_length[l]:.4f}" for l in lengths]
        f.write("mean\t" + "\t".join(means) + f"\t{report.combined:.4f}\n")


def save_tasks(path, tasks: list[EvalTask]) -> None:
    """Line format: seq_id, ids, answers (spans comma-separated), kind, bucket."""
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        for t in tasks:
            spans = ",".join(" ".join(map(str, a.tolist())) for a in t.answers)
            f.write(
                f"{t.prompt.seq_id}\t"
                + " ".join(map(str, t.prompt.ids.tolist()))
                + f"\t{spans}\t{t.kind}\t{t.length_bucket}\n"
            )


def load_tasks(path) -> list[EvalTask]:
    out = []
    with open(path, "r", encoding="utf-8") as f:
        for line in f:
            line = line.rstrip("\n")
            if not line:
                continue
            seq_id, ids, spans, kind, bucket = line.split("\t")
            answers = [
                np.array([int(x) for x in part.split()], dtype=np.int64)
                for part in spans.split(",")
            ]
            out.append(
                EvalTask(
                    kind=kind,
                    prompt=TokenSequence(
                        seq_id=int(seq_id),
                        ids=np.array([int(x) for x in ids.split()], dtype=np.int64),
                    ),
                    answers=answers,
                    length_bucket=int(bucket),
                )
            )
    return out
