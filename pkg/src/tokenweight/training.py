"""Weighted cross-entropy training for TinyLm.

One optimizer step = forward on a batch, weighted NLL, hand-written
backward, and a decoupled-weight-decay adaptive-moment update with linear
warmup. Loss accumulation and optimizer state are kept in double
precision while activations stay in single precision; token weights are
constants as far as the gradient is concerned (nothing backpropagates
into the weighting pipeline).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import TrainingDivergedError
from .model import LogProbTrace, TinyLm, _gather_logprobs
from .weighting import WeightVector

__all__ = ["TrainConfig", "AdamW", "weighted_nll", "train_step", "grad_check"]


@dataclass
class TrainConfig:
    """Hyperparameters for one training run (desk-scale defaults)."""

    learning_rate: float = 1e-3
    warmup_steps: int = 20
    total_steps: int = 100
    batch_size: int = 8
    grad_accum: int = 1
    beta1: float = 0.9
    beta2: float = 0.95
    eps: float = 1e-8
    weight_decay: float = 0.01
    seed: int = 0

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.total_steps < 1 or self.batch_size < 1 or self.grad_accum < 1:
            raise ValueError("total_steps, batch_size, grad_accum must be >= 1")
        if self.warmup_steps < 0:
            raise ValueError("warmup_steps must be nonnegative")

    def lr_at(self, step: int) -> float:
        """Linear warmup to the base rate, then constant."""
        if self.warmup_steps > 0:
            return self.learning_rate * min(1.0, (step + 1) / self.warmup_steps)
        return self.learning_rate


class AdamW:
    """Decoupled-weight-decay Adam with float64 moment state."""

    def __init__(self, model: TinyLm, cfg: TrainConfig):
        self.cfg = cfg
        self.t = 0
        self.m = {k: np.zeros(v.shape, dtype=np.float64) for k, v in model.params.items()}
        self.v = {k: np.zeros(v.shape, dtype=np.float64) for k, v in model.params.items()}

    def step(self, model: TinyLm, grads: dict[str, np.ndarray], lr: float) -> None:
        cfg = self.cfg
        self.t += 1
        bc1 = 1.0 - cfg.beta1**self.t
        bc2 = 1.0 - cfg.beta2**self.t
        for name, p in model.params.items():
            g = np.asarray(grads[name], dtype=np.float64)
            m = self.m[name]
            v = self.v[name]
            m *= cfg.beta1
            m += (1.0 - cfg.beta1) * g
            v *= cfg.beta2
            v += (1.0 - cfg.beta2) * np.square(g)
            update = (m / bc1) / (np.sqrt(v / bc2) + cfg.eps)
            new = p.astype(np.float64)
            new -= lr * update
            new -= lr * cfg.weight_decay * p.astype(np.float64)
            model.params[name] = new.astype(p.dtype)


def weighted_nll(trace, weights) -> float:
    """Weighted negative log-likelihood: -sum_i w_i * logp_i.

    Accepts LogProbTrace / WeightVector or plain arrays; accumulates in
    double precision.
    """
    logp = trace.logp if isinstance(trace, LogProbTrace) else np.asarray(trace)
    w = weights.weights if isinstance(weights, WeightVector) else np.asarray(weights)
    logp = logp.astype(np.float64, copy=False)
    w = w.astype(np.float64, copy=False)
    if logp.shape != w.shape:
        raise ValueError(f"length mismatch: {logp.shape} vs {w.shape}")
    if w.size and w.min() < 0.0:
        raise ValueError("weights must be nonnegative")
    return float(-(w * logp).sum())


def _batch_arrays(batch) -> tuple[np.ndarray, np.ndarray]:
    """Stack a list of (sequence, weights) pairs into (B, T) arrays."""
    ids_rows = []
    w_rows = []
    for seq, wv in batch:
        ids = seq.ids if hasattr(seq, "ids") else np.asarray(seq, dtype=np.int64)
        w = wv.weights if isinstance(wv, WeightVector) else np.asarray(wv, dtype=np.float64)
        if len(ids) != len(w):
            raise ValueError("sequence and weight lengths differ")
        ids_rows.append(ids)
        w_rows.append(w)
    lengths = {len(r) for r in ids_rows}
    if len(lengths) != 1:
        raise ValueError(f"batch sequences must share one length, got {sorted(lengths)}")
    return np.stack(ids_rows), np.stack(w_rows)


def loss_and_grads(model: TinyLm, ids: np.ndarray, weights: np.ndarray,
                   denom: float | None = None):
    """Mean weighted NLL over a (B, T) batch and its parameter gradients.

    The loss is sum(w * nll) / denom with denom defaulting to the token
    count B*T, which makes uniform weights reproduce the ordinary mean
    cross entropy. Returns (loss, grads).
    """
    cfg = model.cfg
    B, T = ids.shape
    denom = float(B * T) if denom is None else float(denom)
    inp = np.concatenate(
        [np.full((B, 1), cfg.bos_id, dtype=np.int64), ids[:, :-1]], axis=1
    )
    logits, cache = model.forward_cached(inp, want_cache=True)
    logp = _gather_logprobs(logits, ids)  # float64 (B, T)
    loss = float(-(weights * logp).sum() / denom)

    z = logits - logits.max(axis=-1, keepdims=True)
    np.exp(z, out=z)
    z /= z.sum(axis=-1, keepdims=True)
    z[np.arange(B)[:, None], np.arange(T)[None, :], ids] -= 1.0
    dlogits = z * (weights / denom).astype(z.dtype)[:, :, None]
    grads = model.backward(cache, dlogits)
    return loss, grads


def train_step(
    model: TinyLm,
    batch: list,
    cfg: TrainConfig,
    opt: AdamW,
    step: int,
    batch_id: int | None = None,
) -> float:
    """One optimizer step on the mean weighted NLL of a batch.

    The batch is a list of (sequence, weights) pairs of equal length.
    With cfg.grad_accum > 1 the batch is split into that many contiguous
    micro-batches whose gradients are summed in a fixed order before the
    single update. Aborts with TrainingDivergedError on a non-finite
    loss or parameter.

    Returns the scalar loss (per-token mean of the weighted NLL).
    """
    batch_id = step if batch_id is None else batch_id
    ids, w = _batch_arrays(batch)
    B, T = ids.shape
    denom = float(B * T)
    micro = max(1, int(np.ceil(B / cfg.grad_accum)))
    total_loss = 0.0
    acc: dict[str, np.ndarray] | None = None
    for s in range(0, B, micro):
        loss_part, grads = loss_and_grads(
            model, ids[s : s + micro], w[s : s + micro], denom=denom
        )
        total_loss += loss_part
        if acc is None:
            acc = {k: g.astype(np.float64) for k, g in grads.items()}
        else:
            for k, g in grads.items():
                acc[k] += g
    if not np.isfinite(total_loss):
        raise TrainingDivergedError(step=step, batch_id=batch_id, loss=total_loss)
    opt.step(model, acc, lr=cfg.lr_at(step))
    for name, p in model.params.items():
        if not np.all(np.isfinite(p)):
            raise TrainingDivergedError(step=step, batch_id=batch_id,
                                        loss=float("nan"))
    return total_loss


def grad_check(
    model: TinyLm,
    sequence,
    weights,
    n_samples: int = 64,
    h: float = 1e-4,
    seed: int = 0,
) -> float:
    """Validate analytic gradients against central finite differences.

    Runs entirely in float64 on the weighted NLL of one sequence, using
    a five-point central stencil at step h. Samples at least n_samples
    scalar coordinates across all parameter tensors. Coordinates whose
    gradients sit below 1e-6 * max(1, |loss|) count as matching: the
    difference quotient carries rounding noise of order eps * |loss| /
    h, so ratios against gradients smaller than that floor measure the
    oracle, not the backward pass (absent-token embedding rows are the
    common case).

    Returns the max relative error over the sample.
    """
    ids = sequence.ids if hasattr(sequence, "ids") else np.asarray(sequence, dtype=np.int64)
    w = weights.weights if isinstance(weights, WeightVector) else np.asarray(weights, dtype=np.float64)
    if len(ids) != len(w):
        raise ValueError("sequence and weight lengths differ")
    m64 = model.copy(dtype=np.float64)
    ids2 = ids[None, :]
    w2 = w[None, :]

    # denom=1: the checked quantity is the raw weighted NLL.
    loss0, grads = loss_and_grads(m64, ids2, w2, denom=1.0)
    floor = 1e-6 * max(1.0, abs(loss0))

    sizes = [(name, p.size) for name, p in m64.params.items()]
    total = sum(s for _, s in sizes)
    rng = np.random.Generator(np.random.PCG64(seed))
    flat_idx = rng.choice(total, size=max(n_samples, 64), replace=False)

    def loss_only() -> float:
        loss, _ = loss_and_grads(m64, ids2, w2, denom=1.0)
        return loss

    max_rel = 0.0
    for fi in sorted(flat_idx.tolist()):
        run = fi
        for name, size in sizes:
            if run < size:
                break
            run -= size
        p = m64.params[name]
        orig = p.flat[run]
        # Five-point central stencil: truncation O(h^4) keeps the
        # difference quotient well below the 1e-5 comparison band.
        vals = []
        for delta in (2 * h, h, -h, -2 * h):
            p.flat[run] = orig + delta
            vals.append(loss_only())
        p.flat[run] = orig
        f2p, f1p, f1m, f2m = vals
        numeric = (-f2p + 8.0 * f1p - 8.0 * f1m + f2m) / (12.0 * h)
        analytic = float(grads[name].flat[run])
        scale = max(abs(numeric), abs(analytic))
        if scale < floor:
            continue
        max_rel = max(max_rel, abs(numeric - analytic) / scale)
    return max_rel
