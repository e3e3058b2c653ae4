"""Synthetic corpora with controllable long-range dependencies.

Three generators cover the spectrum of dependency structure:

* passkey documents: random filler with a planted key/value needle and a
  query suffix that restates the key, at a configurable distance,
* entity-recurrence documents: Markov-chain filler in which named-entity
  token spans reappear at a configurable gap,
* exact Markov documents: sampled from a smoothed order-m chain that is
  returned alongside the data, so exact conditional probabilities are
  available as a test oracle.

Also provides fixed-length chunking of documents into training sequences
and the window schedule used to evaluate long sequences under a short
context limit. Everything is deterministic under an integer seed.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "TokenSequence",
    "WindowPlan",
    "MarkovOracle",
    "chunk_documents",
    "plan_windows",
    "gen_passkey_corpus",
    "gen_entity_recurrence_corpus",
    "gen_markov_corpus",
    "derive_seed",
    "save_corpus",
    "load_corpus",
    "answer_positions",
    "recurrence_positions",
    "KEY_MARK",
    "VAL_MARK",
    "QUERY_MARK",
    "SEP",
    "PERIOD",
    "ENT_MARK",
    "DIGIT_RANGE",
    "KEY_RANGE",
    "ENTITY_RANGE",
    "FILLER_RANGE",
    "MIN_STRUCTURED_VOCAB",
]

# Token-id layout for the structured generators. The classes are disjoint
# id ranges so containment checks (e.g. "needle values never occur in
# filler") are exact rather than probabilistic.
DIGIT_RANGE = (0, 10)  # value tokens
KEY_MARK = 10
VAL_MARK = 11
QUERY_MARK = 12
SEP = 13
PERIOD = 14
ENT_MARK = 15
KEY_RANGE = (16, 32)  # key words and variable names
ENTITY_RANGE = (32, 48)  # entity name tokens, two per entity
FILLER_RANGE = (48, 64)  # filler words
MIN_STRUCTURED_VOCAB = 64


def derive_seed(*parts) -> int:
    """Derive a 64-bit child seed from heterogeneous parts.

    Uses blake2b over the reprs of the parts, so child streams are stable
    across processes and independent of consumption order.
    """
    h = hashlib.blake2b(digest_size=8)
    for part in parts:
        h.update(repr(part).encode())
        h.update(b"\x1f")
    return int.from_bytes(h.digest(), "little")


def _rng(*parts) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(derive_seed(*parts)))


@dataclass(eq=False)
class TokenSequence:
    """An integer token-id sequence; the unit of scoring, training, eval.

    Fields:
        seq_id: stable identifier used by caches and dumps.
        ids: 1-D int64 array of token ids, all nonnegative.
        answers: optional expected-answer token ids (retrieval corpora).
    """

    seq_id: int
    ids: np.ndarray
    answers: np.ndarray | None = None

    def __post_init__(self):
        ids = np.ascontiguousarray(self.ids, dtype=np.int64)
        if ids.ndim != 1:
            raise ValueError(f"ids must be 1-D, got shape {ids.shape}")
        if ids.size < 1:
            raise ValueError("a sequence must contain at least one token")
        if ids.min() < 0:
            raise ValueError("token ids must be nonnegative")
        ids.flags.writeable = False
        object.__setattr__(self, "ids", ids)
        if self.answers is not None:
            ans = np.ascontiguousarray(self.answers, dtype=np.int64)
            ans.flags.writeable = False
            object.__setattr__(self, "answers", ans)

    @property
    def length(self) -> int:
        return int(self.ids.size)


@dataclass(eq=False)
class WindowPlan:
    """Schedule of short-context windows over a length-N sequence.

    Each entry is (window_start, window_end, predict_start, predict_end):
    the window slice supplies the context, and positions in the predict
    slice are the ones whose log-probabilities this window produces. The
    predict slices are disjoint and cover [0, N) exactly.
    """

    n: int
    o: int
    entries: list[tuple[int, int, int, int]]


def plan_windows(N: int, n: int, o: int) -> WindowPlan:
    """Plan short-context windows covering a length-N sequence.

    The first window covers predictions [0, n) with natural context.
    Interior windows advance by a stride of n - o and predict the n - o
    new positions each, so every predicted position has at least o tokens
    of context. The final window is end-aligned (it may overlap its
    predecessor by more than o) so no position is left without context.

    Args:
        N: sequence length.
        n: short context size.
        o: overlap carried between consecutive windows.

    Returns:
        A WindowPlan whose predict ranges partition [0, N).
    """
    N, n, o = int(N), int(n), int(o)
    if not (0 < o < n):
        raise ValueError(f"need 0 < o < n, got n={n}, o={o}")
    if n > N:
        raise ValueError(f"short context n={n} exceeds sequence length N={N}")
    entries = [(0, n, 0, n)]
    stride = n - o
    pos = n
    while pos < N:
        if pos + stride >= N:
            entries.append((N - n, N, pos, N))
            break
        entries.append((pos - o, pos - o + n, pos, pos + stride))
        pos += stride
    return WindowPlan(n=n, o=o, entries=entries)


def chunk_documents(documents: list[np.ndarray], L: int) -> list[TokenSequence]:
    """Split each document into consecutive length-L sequences.

    A trailing chunk shorter than L is discarded. Documents are never
    concatenated, so no chunk crosses a document boundary. Sequence ids
    are assigned in document order, then chunk order.

    Args:
        documents: list of 1-D token-id arrays.
        L: target sequence length, at least 2.

    Returns:
        The chunks as TokenSequence objects.
    """
    if L <= 1:
        raise ValueError(f"chunk length must be >= 2, got {L}")
    out: list[TokenSequence] = []
    seq_id = 0
    for doc in documents:
        doc = np.asarray(doc, dtype=np.int64)
        for k in range(len(doc) // L):
            out.append(TokenSequence(seq_id=seq_id, ids=doc[k * L : (k + 1) * L]))
            seq_id += 1
    return out


def _filler_sentences(rng: np.random.Generator, n_sentences: int = 5,
                      words_per_sentence: int = 6) -> np.ndarray:
    """A short cyclic filler pattern: a few sentences repeated verbatim."""
    lo, hi = FILLER_RANGE
    parts = []
    for _ in range(n_sentences):
        words = rng.integers(lo, hi, size=words_per_sentence)
        parts.append(np.concatenate([words, [PERIOD]]))
    return np.concatenate(parts)


def gen_passkey_corpus(
    count: int,
    haystack_len: int,
    distance: int,
    seed: int,
    vocab_size: int = MIN_STRUCTURED_VOCAB,
    key_len: int = 2,
    value_len: int = 4,
) -> list[TokenSequence]:
    """Generate passkey-retrieval documents with planted needles.

    Each document is cyclic filler with an embedded needle
    ``KEY_MARK k... VAL_MARK v...`` whose end lies exactly ``distance``
    tokens before a query suffix ``QUERY_MARK k... SEP v...`` that
    restates the key and then the expected value. The value tokens are
    digits, which never occur in the filler class, so retrieval cannot
    succeed by accident.

    Args:
        count: number of documents.
        haystack_len: total document length.
        distance: filler tokens between needle end and query start.
        seed: corpus seed; documents use independently derived streams.
        vocab_size: must cover the structured token-class layout.
        key_len: key span length.
        value_len: value span length.

    Returns:
        Documents as TokenSequence objects, answers set to the value span.
    """
    if vocab_size < MIN_STRUCTURED_VOCAB:
        raise ValueError(
            f"vocab_size {vocab_size} cannot host disjoint digit/marker/"
            f"key/filler classes; need >= {MIN_STRUCTURED_VOCAB}"
        )
    if distance < 0:
        raise ValueError("distance must be nonnegative")
    suffix_len = 1 + key_len + 1 + value_len
    needle_len = 1 + key_len + 1 + value_len
    needle_start = haystack_len - suffix_len - distance - needle_len
    if needle_start < 0:
        raise ValueError(
            f"haystack_len {haystack_len} too small for distance {distance}"
        )
    docs = []
    for i in range(count):
        rng = _rng(seed, "passkey", i)
        pattern = _filler_sentences(rng)
        reps = haystack_len // len(pattern) + 1
        ids = np.tile(pattern, reps)[:haystack_len].copy()
        key = rng.integers(KEY_RANGE[0], KEY_RANGE[1], size=key_len)
        value = rng.integers(DIGIT_RANGE[0], DIGIT_RANGE[1], size=value_len)
        needle = np.concatenate([[KEY_MARK], key, [VAL_MARK], value])
        suffix = np.concatenate([[QUERY_MARK], key, [SEP], value])
        ids[needle_start : needle_start + needle_len] = needle
        ids[haystack_len - suffix_len :] = suffix
        docs.append(TokenSequence(seq_id=i, ids=ids, answers=value))
    return docs


def _random_chain(rng: np.random.Generator, order: int, vocab: int,
                  alpha: float = 0.1) -> np.ndarray:
    """Random smoothed transition table, shape (vocab**order, vocab)."""
    rows = rng.dirichlet(np.ones(vocab), size=vocab**order)
    rows = (rows + alpha) / (1.0 + alpha * vocab)
    return rows


@dataclass(eq=False)
class MarkovOracle:
    """An order-m Markov chain with exact conditional probabilities.

    The transition table has one row per length-m state (row index is the
    state's base-V encoding, most recent token in the lowest digit). All
    probabilities are strictly positive so every log-ratio is finite. The
    sampling process starts from the exact stationary distribution over
    states, which makes every window of the process identically
    distributed and lets k-gram marginals be read off the stationary
    vector.
    """

    order: int
    vocab_size: int
    table: np.ndarray
    _stationary: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        m, V = self.order, self.vocab_size
        if m < 1 or V < 2:
            raise ValueError(f"need order >= 1 and vocab >= 2, got {m}, {V}")
        table = np.ascontiguousarray(self.table, dtype=np.float64)
        if table.shape != (V**m, V):
            raise ValueError(
                f"table shape {table.shape} != {(V**m, V)} for order {m}"
            )
        sums = table.sum(axis=1)
        if np.max(np.abs(sums - 1.0)) > 1e-12:
            raise ValueError("each conditional row must sum to 1 within 1e-12")
        if table.min() <= 0.0:
            raise ValueError(
                "transition probabilities must be strictly positive; "
                "smooth the table before constructing the oracle"
            )
        object.__setattr__(self, "table", table)

    @property
    def n_states(self) -> int:
        return self.vocab_size**self.order

    def state_index(self, tokens: np.ndarray) -> int:
        """Base-V encoding of the last `order` tokens."""
        m, V = self.order, self.vocab_size
        tokens = np.asarray(tokens)[-m:]
        if len(tokens) != m:
            raise ValueError(f"need {m} tokens to form a state")
        idx = 0
        for t in tokens:
            idx = idx * V + int(t)
        return idx

    def stationary(self) -> np.ndarray:
        """Stationary distribution over the V**m states, by power iteration."""
        if self._stationary is not None:
            return self._stationary
        m, V = self.order, self.vocab_size
        pi = np.full(self.n_states, 1.0 / self.n_states)
        for _ in range(100_000):
            # state (t1..tm) -> (t2..tm, y): drop the oldest token,
            # append the sampled one, and regroup the mass.
            if m == 1:
                new = (pi[:, None] * self.table).sum(axis=0)
            else:
                new = (pi[:, None] * self.table).reshape(V, V ** (m - 1), V)
                new = new.sum(axis=0).reshape(-1)
            delta = np.abs(new - pi).sum()
            pi = new
            if delta < 1e-15:
                break
        pi = pi / pi.sum()
        object.__setattr__(self, "_stationary", pi)
        return pi

    def conditional(self, context: np.ndarray) -> np.ndarray:
        """Exact next-token distribution given at least `order` context tokens."""
        return self.table[self.state_index(context)]

    def limited_conditional(self, context: np.ndarray) -> np.ndarray:
        """Next-token distribution given only the last j <= order tokens.

        Marginalizes the stationary state distribution over the unseen
        older tokens: a weighted average of table rows whose states end
        with the given context.
        """
        context = np.asarray(context, dtype=np.int64)
        j = len(context)
        m, V = self.order, self.vocab_size
        if j > m:
            return self.conditional(context)
        if j == m:
            return self.table[self.state_index(context)]
        pi = self.stationary()
        suffix_idx = 0
        for t in context:
            suffix_idx = suffix_idx * V + int(t)
        # States sharing the length-j suffix sit at a fixed stride.
        idx = np.arange(self.n_states).reshape(V ** (m - j), V**j)[:, suffix_idx] \
            if j > 0 else np.arange(self.n_states)
        w = pi[idx]
        rows = self.table[idx]
        total = w.sum()
        if total <= 0:
            raise ValueError("suffix has zero stationary mass")
        return (w[:, None] * rows).sum(axis=0) / total

    def gram_logprob(self, gram: np.ndarray) -> float:
        """Log-probability that a window of the stationary process equals gram."""
        gram = np.asarray(gram, dtype=np.int64)
        m, V = self.order, self.vocab_size
        k = len(gram)
        if k == 0:
            return 0.0
        pi = self.stationary()
        if k < m:
            suffix_idx = 0
            for t in gram:
                suffix_idx = suffix_idx * V + int(t)
            idx = np.arange(self.n_states).reshape(V ** (m - k), V**k)[:, suffix_idx]
            return float(np.log(pi[idx].sum()))
        logp = float(np.log(pi[self.state_index(gram[:m])]))
        for t in range(m, k):
            logp += float(np.log(self.table[self.state_index(gram[t - m : t]), gram[t]]))
        return logp

    def sample(self, count: int, length: int, seed: int) -> np.ndarray:
        """Sample `count` sequences of `length` tokens, stationary start.

        Returns an int64 array of shape (count, length).
        """
        m, V = self.order, self.vocab_size
        if length < m:
            raise ValueError(f"length must be >= order ({m})")
        rng = _rng(seed, "markov-sample")
        pi = self.stationary()
        states = rng.choice(self.n_states, size=count, p=pi)
        out = np.empty((count, length), dtype=np.int64)
        # Decode the initial state into its m tokens.
        s = states.copy()
        for t in range(m - 1, -1, -1):
            out[:, t] = s % V
            s //= V
        mod = V ** (m - 1)
        for t in range(m, length):
            rows = self.table[states]
            cdf = np.cumsum(rows, axis=1)
            u = rng.random(count)
            y = (u[:, None] > cdf).sum(axis=1)
            out[:, t] = y
            states = (states % mod) * V + y
        return out


def gen_markov_corpus(
    order: int,
    vocab_size: int,
    count: int,
    seed: int,
    doc_len: int = 256,
    alpha: float = 0.1,
) -> tuple[list[np.ndarray], MarkovOracle]:
    """Sample documents from a random smoothed order-m chain.

    Returns both the documents and the chain itself so tests can compare
    model estimates against exact conditional probabilities.

    Args:
        order: chain order m, at least 1.
        vocab_size: vocabulary size, at least 2.
        count: number of documents.
        seed: drives both the chain construction and the sampling.
        doc_len: tokens per document.
        alpha: add-alpha smoothing weight; keeps all log-ratios finite.

    Returns:
        (documents, oracle) where documents is a list of int64 arrays.
    """
    if order < 1 or vocab_size < 2:
        raise ValueError("need order >= 1 and vocab_size >= 2")
    table = _random_chain(_rng(seed, "markov-chain"), order, vocab_size, alpha)
    oracle = MarkovOracle(order=order, vocab_size=vocab_size, table=table)
    docs = list(oracle.sample(count, doc_len, derive_seed(seed, "markov-docs")))
    return docs, oracle


def gen_entity_recurrence_corpus(
    count: int,
    doc_len: int,
    gap: int,
    seed: int,
    markov_order: int = 2,
    entity_pool: int = 8,
    entities_per_doc: int = 2,
) -> list[TokenSequence]:
    """Generate Markov filler in which entity spans recur at a fixed gap.

    Each entity is a span ``ENT_MARK e1 e2`` drawn from a pool; within a
    document the same entity reappears every ``gap`` tokens (with small
    jitter). First mentions are unpredictable; recurrences are predictable
    exactly when the previous mention is still inside the visible context.

    Args:
        count: number of documents.
        doc_len: document length.
        gap: approximate distance between consecutive mentions.
        seed: corpus seed.
        markov_order: order of the filler chain over the filler id range.
        entity_pool: number of distinct entities available (max 8).
        entities_per_doc: entities planted per document; 0 gives pure filler.

    Returns:
        Documents as TokenSequence objects (no answer field).
    """
    if gap < 1:
        raise ValueError("gap must be >= 1")
    if not (0 <= entity_pool <= (ENTITY_RANGE[1] - ENTITY_RANGE[0]) // 2):
        raise ValueError("entity_pool must be between 0 and 8")
    if entities_per_doc > entity_pool:
        raise ValueError("entities_per_doc cannot exceed entity_pool")
    lo, hi = FILLER_RANGE
    n_filler = hi - lo
    table = _random_chain(_rng(seed, "entity-filler"), markov_order, n_filler)
    chain = MarkovOracle(order=markov_order, vocab_size=n_filler, table=table)
    span_len = 3
    docs = []
    for i in range(count):
        rng = _rng(seed, "entity-doc", i)
        ids = chain.sample(1, doc_len, derive_seed(seed, "entity-fill", i))[0] + lo
        occupied = np.zeros(doc_len, dtype=bool)
        ents = rng.choice(entity_pool, size=entities_per_doc, replace=False) \
            if entities_per_doc else np.empty(0, dtype=np.int64)
        for j, ent in enumerate(ents):
            e1 = ENTITY_RANGE[0] + 2 * int(ent)
            span = np.array([ENT_MARK, e1, e1 + 1], dtype=np.int64)
            pos = int(rng.integers(0, max(1, gap // 2))) + j * (span_len + 1)
            while pos + span_len <= doc_len:
                p = pos
                # Slide forward past any span already placed there.
                while p + span_len <= doc_len and occupied[p : p + span_len].any():
                    p += 1
                if p + span_len > doc_len:
                    break
                ids[p : p + span_len] = span
                occupied[p : p + span_len] = True
                jitter = int(rng.integers(-(gap // 8), gap // 8 + 1)) if gap >= 8 else 0
                pos = p + gap + jitter
        docs.append(TokenSequence(seq_id=i, ids=ids))
    return docs


def answer_positions(seq: TokenSequence) -> np.ndarray:
    """Positions of the trailing answer span in a passkey document.

    These are the tokens after the last SEP: the positions whose correct
    prediction requires retrieving the needle.
    """
    ids = seq.ids
    sep = np.flatnonzero(ids == SEP)
    if len(sep) == 0:
        raise ValueError(f"sequence {seq.seq_id} has no SEP token")
    return np.arange(int(sep[-1]) + 1, len(ids))


def recurrence_positions(ids: np.ndarray, min_back: int = 1) -> np.ndarray:
    """Positions of entity-name tokens in second and later mentions.

    A mention is a span ``ENT_MARK e1 e2``; the two name-token positions of
    every mention whose previous mention of the same entity lies at least
    ``min_back`` tokens earlier are returned. The ENT_MARK itself is
    excluded: only the name tokens are predictable from the earlier
    mention.
    """
    ids = np.asarray(ids)
    last_seen: dict[int, int] = {}
    out = []
    for p in np.flatnonzero(ids == ENT_MARK):
        p = int(p)
        if p + 2 >= len(ids):
            continue
        e1 = int(ids[p + 1])
        prev = last_seen.get(e1)
        if prev is not None and p - prev >= min_back:
            out.extend([p + 1, p + 2])
        last_seen[e1] = p
    return np.asarray(out, dtype=np.int64)


def save_corpus(path, sequences: list[TokenSequence]) -> None:
    """Write sequences as line-delimited records.

    Each line holds tab-separated fields: seq_id, space-separated token
    ids, and (when present) space-separated answer ids.
    """
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        for seq in sequences:
            fields = [str(seq.seq_id), " ".join(map(str, seq.ids.tolist()))]
            if seq.answers is not None:
                fields.append(" ".join(map(str, seq.answers.tolist())))
            f.write("\t".join(fields) + "\n")


def load_corpus(path) -> list[TokenSequence]:
    """Read sequences written by save_corpus."""
    out = []
    with open(path, "r", encoding="utf-8") as f:
        for line in f:
            line = line.rstrip("\n")
            if not line:
                continue
            fields = line.split("\t")
            if len(fields) not in (2, 3):
                raise ValueError(f"malformed corpus line: {line[:80]!r}")
            seq_id = int(fields[0])
            ids = np.array([int(t) for t in fields[1].split()], dtype=np.int64)
            answers = None
            if len(fields) == 3 and fields[2]:
                answers = np.array([int(t) for t in fields[2].split()], dtype=np.int64)
            out.append(TokenSequence(seq_id=seq_id, ids=ids, answers=answers))
    return out
