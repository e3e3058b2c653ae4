"""Error types shared across the package.

Invalid arguments raise plain ValueError at the offending call site; the
classes here cover failure modes that callers are expected to catch and
handle (cache invalidation, training aborts, oracle resource limits).
"""

from __future__ import annotations


class StaleCacheError(RuntimeError):
    """A score cache's fingerprint does not match the active scorer.

    Raised on load so the caller can decide between rescoring and aborting.
    """


class TrainingDivergedError(RuntimeError):
    """Training produced a non-finite loss.

    Carries the step index and batch id so the failing batch can be replayed.
    """

    def __init__(self, step: int, batch_id: int, loss: float):
        self.step = int(step)
        self.batch_id = int(batch_id)
        self.loss = float(loss)
        super().__init__(
            f"non-finite loss {loss!r} at step {step}, batch {batch_id}"
        )


class EnumerationBudgetError(RuntimeError):
    """An exact-probability computation would enumerate too many states.

    Reduce the vocabulary size or the chain order.
    """


class DominanceError(ValueError):
    """The pointwise-dominance precondition of the KL ordering check failed.

    The ordering guarantee is vacuous without it, so the check refuses to
    return a verdict.
    """
