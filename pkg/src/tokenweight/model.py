"""A tiny autoregressive transformer in pure numpy.

Decoder-only, pre-norm (RMSNorm), multi-head causal attention with rotary
position embeddings, SiLU-gated MLP, no biases, untied output head. The
backward pass is written by hand so gradients can be validated against
central finite differences in double precision.

Position 0 is predicted from a dedicated begin-of-sequence embedding row
(id = vocab_size), so the model defines log p(y_0) as well. Long
sequences can be evaluated under a restricted context limit by unfolding
them into overlapping windows (see corpus.plan_windows).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, replace

import numpy as np

from .corpus import TokenSequence, plan_windows

__all__ = [
    "TinyLmConfig",
    "TinyLm",
    "LogProbTrace",
    "init_model",
    "forward_logprobs",
    "extend_context",
    "save_checkpoint",
    "load_checkpoint",
    "checkpoint_bytes",
    "save_traces",
    "load_traces",
    "REFERENCE_EXTENSION_RECORD",
]

# Full-scale context extension mirrored by the desk-scale defaults
# (documented configuration only; nothing here runs at this size).
REFERENCE_EXTENSION_RECORD = {
    "context": (8192, 32768),
    "rope_base": (5.0e5, 1.53e7),
    "rope_base_factor": 30.6,
}

_NORM_EPS = 1e-6
_CHECKPOINT_MAGIC = b"TLM1"


@dataclass(frozen=True)
class TinyLmConfig:
    """Architecture and context settings for TinyLm."""

    layers: int = 2
    d_model: int = 64
    n_heads: int = 4
    d_ff: int = 256
    vocab_size: int = 64
    max_context: int = 64
    rope_base: float = 10_000.0

    def __post_init__(self):
        if self.d_model % self.n_heads != 0:
            raise ValueError(
                f"d_model {self.d_model} not divisible by n_heads {self.n_heads}"
            )
        if (self.d_model // self.n_heads) % 2 != 0:
            raise ValueError("head dimension must be even for rotary embedding")
        if self.rope_base <= 0:
            raise ValueError("rope_base must be positive")
        if self.max_context < 2:
            raise ValueError("max_context must be at least 2")
        if min(self.layers, self.d_ff, self.vocab_size) < 1:
            raise ValueError("layers, d_ff, vocab_size must be positive")

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads

    @property
    def bos_id(self) -> int:
        return self.vocab_size


@dataclass(eq=False)
class LogProbTrace:
    """Per-token log-probabilities of one sequence under one context regime.

    logp[i] = log p(y_i | admissible context); entry 0 comes from the
    begin-of-sequence prediction. context_limit records the regime (the
    short context n, or the model's full context).
    """

    seq_id: int
    context_limit: int
    logp: np.ndarray

    def __post_init__(self):
        logp = np.ascontiguousarray(self.logp, dtype=np.float64)
        if logp.ndim != 1 or logp.size < 1:
            raise ValueError("logp must be a nonempty 1-D array")
        if not np.all(np.isfinite(logp)) or logp.max() > 0.0:
            raise ValueError("log-probabilities must be finite and <= 0")
        object.__setattr__(self, "logp", logp)

    @property
    def length(self) -> int:
        return int(self.logp.size)


def _param_layout(cfg: TinyLmConfig) -> list[tuple[str, tuple[int, ...]]]:
    """Parameter names and shapes in declaration (checkpoint) order."""
    d, ff, V = cfg.d_model, cfg.d_ff, cfg.vocab_size
    layout: list[tuple[str, tuple[int, ...]]] = [("embed", (V + 1, d))]
    for i in range(cfg.layers):
        layout += [
            (f"attn_norm_{i}", (d,)),
            (f"wq_{i}", (d, d)),
            (f"wk_{i}", (d, d)),
            (f"wv_{i}", (d, d)),
            (f"wo_{i}", (d, d)),
            (f"mlp_norm_{i}", (d,)),
            (f"w_gate_{i}", (d, ff)),
            (f"w_up_{i}", (d, ff)),
            (f"w_down_{i}", (ff, d)),
        ]
    layout += [("final_norm", (d,)), ("head", (d, V))]
    return layout


class TinyLm:
    """Tiny rotary-embedding transformer with hand-written gradients.

    Parameters live in `params`, a name-to-array dict in declaration
    order; activations run in the parameter dtype (float32 by default,
    float64 for gradient checking).
    """

    def __init__(self, cfg: TinyLmConfig, params: dict[str, np.ndarray]):
        self.cfg = cfg
        self.params = params

    # ---------------------------------------------------------------- util

    @property
    def num_params(self) -> int:
        return int(sum(p.size for p in self.params.values()))

    def copy(self, dtype=None) -> "TinyLm":
        """Deep copy, optionally casting parameters to another dtype."""
        params = {
            k: (v.astype(dtype) if dtype is not None else v.copy())
            for k, v in self.params.items()
        }
        return TinyLm(self.cfg, params)

    def _rope_tables(self, T: int, dtype) -> tuple[np.ndarray, np.ndarray]:
        hd = self.cfg.head_dim
        inv_freq = self.cfg.rope_base ** (
            -np.arange(0, hd, 2, dtype=np.float64) / hd
        )
        angles = np.arange(T, dtype=np.float64)[:, None] * inv_freq[None, :]
        return np.cos(angles).astype(dtype), np.sin(angles).astype(dtype)

    # ------------------------------------------------------------- forward

    def forward_cached(self, ids: np.ndarray, want_cache: bool = False):
        """Run the model on a (B, T) batch of input ids.

        Input ids may include the begin-of-sequence id (= vocab_size).
        Returns (logits, cache); cache is None unless requested, and feeds
        `backward`.

        Raises ValueError when T exceeds the configured maximum context.
        """
        cfg = self.cfg
        p = self.params
        ids = np.asarray(ids, dtype=np.int64)
        if ids.ndim != 2:
            raise ValueError("ids must have shape (batch, time)")
        B, T = ids.shape
        if T > cfg.max_context:
            raise ValueError(
                f"input length {T} exceeds maximum context {cfg.max_context}"
            )
        if ids.min() < 0 or ids.max() > cfg.vocab_size:
            raise ValueError("input ids out of range (bos id = vocab_size)")
        dtype = p["embed"].dtype
        H, hd = cfg.n_heads, cfg.head_dim
        scale = dtype.type(1.0 / np.sqrt(hd))
        cos, sin = self._rope_tables(T, dtype)  # (T, hd/2)
        mask = np.triu(np.ones((T, T), dtype=bool), k=1)

        h = p["embed"][ids]  # (B, T, d)
        cache = {"ids": ids, "cos": cos, "sin": sin, "mask": mask,
                 "layers": []} if want_cache else None

        for i in range(cfg.layers):
            x_in = h
            a, a_r = _rmsnorm(h, p[f"attn_norm_{i}"])
            q = (a @ p[f"wq_{i}"]).reshape(B, T, H, hd)
            k = (a @ p[f"wk_{i}"]).reshape(B, T, H, hd)
            v = (a @ p[f"wv_{i}"]).reshape(B, T, H, hd)
            qr = _rope_apply(q, cos, sin)
            kr = _rope_apply(k, cos, sin)
            # (B,H,i,d) @ (B,H,d,j) -> (B,H,i,j); matmul dispatches to BLAS
            att = qr.transpose(0, 2, 1, 3) @ kr.transpose(0, 2, 3, 1)
            att *= scale
            att[:, :, mask] = -np.inf
            att -= att.max(axis=-1, keepdims=True)
            np.exp(att, out=att)
            att /= att.sum(axis=-1, keepdims=True)  # (B, H, T, T)
            ctx = (att @ v.transpose(0, 2, 1, 3)).transpose(0, 2, 1, 3)
            ctx_flat = ctx.reshape(B, T, cfg.d_model)
            h = h + ctx_flat @ p[f"wo_{i}"]

            m_in = h
            m, m_r = _rmsnorm(h, p[f"mlp_norm_{i}"])
            g_pre = m @ p[f"w_gate_{i}"]
            up = m @ p[f"w_up_{i}"]
            sig = 1.0 / (1.0 + np.exp(-g_pre))
            s = g_pre * sig
            z = s * up
            h = h + z @ p[f"w_down_{i}"]

            if want_cache:
                cache["layers"].append({
                    "x_in": x_in, "a": a, "a_r": a_r, "qr": qr, "kr": kr,
                    "v": v, "att": att, "ctx_flat": ctx_flat, "m_in": m_in,
                    "m": m, "m_r": m_r, "g_pre": g_pre, "up": up, "sig": sig,
                    "s": s, "z": z,
                })

        f, f_r = _rmsnorm(h, p["final_norm"])
        logits = f @ p["head"]
        if want_cache:
            cache["h_final"] = h
            cache["f"] = f
            cache["f_r"] = f_r
        return logits, cache

    def logits(self, ids: np.ndarray) -> np.ndarray:
        out, _ = self.forward_cached(ids, want_cache=False)
        return out

    # ------------------------------------------------------------ backward

    def backward(self, cache: dict, dlogits: np.ndarray) -> dict[str, np.ndarray]:
        """Reverse-mode gradients of a scalar through given dlogits.

        Returns a dict of gradients matching `params`.
        """
        cfg = self.cfg
        p = self.params
        B, T = cache["ids"].shape
        H, hd = cfg.n_heads, cfg.head_dim
        d = cfg.d_model
        dtype = p["embed"].dtype
        scale = dtype.type(1.0 / np.sqrt(hd))
        cos, sin = cache["cos"], cache["sin"]
        grads = {k: np.zeros_like(v) for k, v in self.params.items()}

        f = cache["f"]
        grads["head"] += np.tensordot(f, dlogits, axes=([0, 1], [0, 1]))
        df = dlogits @ p["head"].T
        dh = _rmsnorm_backward(
            df, cache["h_final"], cache["f_r"], p["final_norm"], grads["final_norm"]
        )

        for i in range(cfg.layers - 1, -1, -1):
            L = cache["layers"][i]
            # MLP block: h = m_in + (silu(m@Wg) * (m@Wu)) @ Wd
            dz = dh @ p[f"w_down_{i}"].T
            grads[f"w_down_{i}"] += np.tensordot(L["z"], dh, axes=([0, 1], [0, 1]))
            ds = dz * L["up"]
            dup = dz * L["s"]
            dg_pre = ds * (L["sig"] * (1.0 + L["g_pre"] * (1.0 - L["sig"])))
            dm = dg_pre @ p[f"w_gate_{i}"].T + dup @ p[f"w_up_{i}"].T
            grads[f"w_gate_{i}"] += np.tensordot(L["m"], dg_pre, axes=([0, 1], [0, 1]))
            grads[f"w_up_{i}"] += np.tensordot(L["m"], dup, axes=([0, 1], [0, 1]))
            dh = dh + _rmsnorm_backward(
                dm, L["m_in"], L["m_r"], p[f"mlp_norm_{i}"], grads[f"mlp_norm_{i}"]
            )

            # Attention block: h = x_in + (attn(rmsnorm(x_in))) @ Wo
            dctx_flat = dh @ p[f"wo_{i}"].T
            grads[f"wo_{i}"] += np.tensordot(L["ctx_flat"], dh, axes=([0, 1], [0, 1]))
            dctx_h = dctx_flat.reshape(B, T, H, hd).transpose(0, 2, 1, 3)  # (B,H,T,d)
            att = L["att"]
            v_h = L["v"].transpose(0, 2, 1, 3)
            datt = dctx_h @ v_h.swapaxes(-1, -2)  # (B,H,i,j)
            dv_h = att.swapaxes(-1, -2) @ dctx_h  # (B,H,j,d)
            dscores = att * (datt - (datt * att).sum(axis=-1, keepdims=True))
            dscores *= scale
            dqr = (dscores @ L["kr"].transpose(0, 2, 1, 3)).transpose(0, 2, 1, 3)
            dkr = (dscores.swapaxes(-1, -2) @ L["qr"].transpose(0, 2, 1, 3)).transpose(
                0, 2, 1, 3
            )
            dq = _rope_apply_transpose(dqr, cos, sin).reshape(B, T, d)
            dk = _rope_apply_transpose(dkr, cos, sin).reshape(B, T, d)
            dv = dv_h.transpose(0, 2, 1, 3).reshape(B, T, d)
            a = L["a"]
            grads[f"wq_{i}"] += np.tensordot(a, dq, axes=([0, 1], [0, 1]))
            grads[f"wk_{i}"] += np.tensordot(a, dk, axes=([0, 1], [0, 1]))
            grads[f"wv_{i}"] += np.tensordot(a, dv, axes=([0, 1], [0, 1]))
            da = dq @ p[f"wq_{i}"].T + dk @ p[f"wk_{i}"].T + dv @ p[f"wv_{i}"].T
            dh = dh + _rmsnorm_backward(
                da, L["x_in"], L["a_r"], p[f"attn_norm_{i}"], grads[f"attn_norm_{i}"]
            )

        np.add.at(
            grads["embed"], cache["ids"].reshape(-1), dh.reshape(-1, d)
        )
        return grads

    # -------------------------------------------------------------- traces

    def batch_logprobs(
        self, ids: np.ndarray, context_limit: int, overlap: int | None = None
    ) -> np.ndarray:
        """Per-token log-probabilities for a (B, N) batch of sequences.

        With context_limit >= N this is a single full-context pass. With
        context_limit < N the sequences are unfolded into overlapping
        windows; predictions inside a continuation window see at least
        `overlap` tokens of context. Every window, continuation or not,
        is fed with the begin-of-sequence anchor in front.

        Returns a (B, N) float64 array.
        """
        cfg = self.cfg
        ids = np.asarray(ids, dtype=np.int64)
        if ids.ndim != 2:
            raise ValueError("ids must have shape (batch, length)")
        B, N = ids.shape
        c = int(context_limit)
        if c > cfg.max_context:
            raise ValueError(
                f"context_limit {c} exceeds maximum context {cfg.max_context}"
            )
        out = np.empty((B, N), dtype=np.float64)
        if c >= N:
            if N > cfg.max_context:
                raise ValueError(
                    f"sequence length {N} exceeds maximum context {cfg.max_context}"
                )
            inp = np.concatenate(
                [np.full((B, 1), cfg.bos_id, dtype=np.int64), ids[:, :-1]], axis=1
            )
            logits = self.logits(inp)
            out[:] = _gather_logprobs(logits, ids)
            return out
        if overlap is None:
            raise ValueError("overlap is required when context_limit < length")
        plan = plan_windows(N, c, int(overlap))
        ws, we, ps, pe = plan.entries[0]
        inp = np.concatenate(
            [np.full((B, 1), cfg.bos_id, dtype=np.int64), ids[:, : we - 1]], axis=1
        )
        logits = self.logits(inp)
        out[:, ps:pe] = _gather_logprobs(logits, ids[:, ps:pe])
        for ws, we, ps, pe in plan.entries[1:]:
            # Continuation windows keep the begin-of-sequence anchor: the
            # model never trains on inputs that start with a raw token, and
            # feeding one collapses its predictions for the whole window.
            # Output index t predicts position ws + t.
            inp = np.concatenate(
                [np.full((B, 1), cfg.bos_id, dtype=np.int64), ids[:, ws : we - 1]],
                axis=1,
            )
            logits = self.logits(inp)
            sel = slice(ps - ws, pe - ws)
            out[:, ps:pe] = _gather_logprobs(
                logits[:, sel], ids[:, ps:pe]
            )
        return out

    def batch_distributions(self, ids: np.ndarray) -> np.ndarray:
        """Full-context per-position next-token distributions, (B, N, V) float64."""
        ids = np.asarray(ids, dtype=np.int64)
        B, N = ids.shape
        inp = np.concatenate(
            [np.full((B, 1), self.cfg.bos_id, dtype=np.int64), ids[:, :-1]], axis=1
        )
        logits = self.logits(inp).astype(np.float64)
        logits -= logits.max(axis=-1, keepdims=True)
        np.exp(logits, out=logits)
        logits /= logits.sum(axis=-1, keepdims=True)
        return logits


def _rmsnorm(x: np.ndarray, g: np.ndarray):
    """Root-mean-square norm with gain; returns (out, inverse-rms)."""
    ms = np.mean(np.square(x), axis=-1, keepdims=True)
    r = 1.0 / np.sqrt(ms + np.asarray(_NORM_EPS, dtype=x.dtype))
    r = r.astype(x.dtype)
    return (x * r) * g, r


def _rmsnorm_backward(dout, x, r, g, g_grad_out) -> np.ndarray:
    d = x.shape[-1]
    g_grad_out += (dout * (x * r)).sum(axis=(0, 1))
    dxy = dout * g
    inner = (dxy * x).sum(axis=-1, keepdims=True)
    return r * dxy - x * (r**3 / d) * inner


def _rope_apply(x: np.ndarray, cos: np.ndarray, sin: np.ndarray) -> np.ndarray:
    """Rotate half-split feature pairs by position-dependent angles.

    x has shape (B, T, H, hd); cos/sin have shape (T, hd/2) and broadcast
    over batch and heads.
    """
    half = x.shape[-1] // 2
    x1, x2 = x[..., :half], x[..., half:]
    c = cos[None, :, None, :]
    s = sin[None, :, None, :]
    return np.concatenate([x1 * c - x2 * s, x2 * c + x1 * s], axis=-1)


def _rope_apply_transpose(x, cos, sin) -> np.ndarray:
    """Transpose (= inverse) of the rotation; used in the backward pass."""
    half = x.shape[-1] // 2
    x1, x2 = x[..., :half], x[..., half:]
    c = cos[None, :, None, :]
    s = sin[None, :, None, :]
    return np.concatenate([x1 * c + x2 * s, x2 * c - x1 * s], axis=-1)


def _gather_logprobs(logits: np.ndarray, targets: np.ndarray):
    """log softmax(logits) gathered at target ids, in float64."""
    z = logits.astype(np.float64)
    zmax = z.max(axis=-1, keepdims=True)
    lse = zmax + np.log(np.exp(z - zmax).sum(axis=-1, keepdims=True))
    logp = z - lse
    B, T, _ = logp.shape
    return logp[np.arange(B)[:, None], np.arange(T)[None, :], targets]


def init_model(config: TinyLmConfig, seed: int) -> TinyLm:
    """Deterministically initialize a TinyLm.

    Projection matrices use 1/sqrt(fan_in) scaling with the residual
    projections shrunk by the usual depth factor; embeddings and head use
    a small fixed scale so a fresh model predicts near-uniformly.
    """
    rng = np.random.Generator(np.random.PCG64(seed))
    d = config.d_model
    params: dict[str, np.ndarray] = {}
    resid_scale = 1.0 / np.sqrt(2 * config.layers)
    for name, shape in _param_layout(config):
        if "norm" in name:
            params[name] = np.ones(shape, dtype=np.float32)
        elif name == "embed" or name == "head":
            params[name] = rng.normal(0.0, 0.02, size=shape).astype(np.float32)
        elif name.startswith(("wo_", "w_down_")):
            std = resid_scale / np.sqrt(shape[0])
            params[name] = rng.normal(0.0, std, size=shape).astype(np.float32)
        else:
            std = 1.0 / np.sqrt(shape[0])
            params[name] = rng.normal(0.0, std, size=shape).astype(np.float32)
    model = TinyLm(config, params)
    for k, v in model.params.items():
        if not np.all(np.isfinite(v)):
            raise AssertionError(f"non-finite init in {k}")
    return model


def forward_logprobs(
    model: TinyLm,
    sequence: TokenSequence,
    context_limit: int,
    overlap: int | None = None,
) -> LogProbTrace:
    """Log-probability trace of one sequence under a context limit.

    context_limit >= N gives the full-context trace; smaller limits use
    the overlapping-window schedule, which requires `overlap`.
    """
    logp = model.batch_logprobs(
        sequence.ids[None, :], context_limit, overlap=overlap
    )[0]
    return LogProbTrace(
        seq_id=sequence.seq_id, context_limit=int(context_limit), logp=logp
    )


def extend_context(model: TinyLm, new_context: int, rope_base_factor: float) -> TinyLm:
    """Enlarge the usable context by scaling the rotary base.

    Parameters are copied unchanged; only max_context and rope_base move.
    Requires new_context > current and rope_base_factor > 1.
    """
    cfg = model.cfg
    if new_context <= cfg.max_context:
        raise ValueError(
            f"new context {new_context} must exceed current {cfg.max_context}"
        )
    if rope_base_factor <= 1.0:
        raise ValueError("rope_base_factor must be > 1")
    new_cfg = replace(
        cfg, max_context=int(new_context), rope_base=cfg.rope_base * rope_base_factor
    )
    return TinyLm(new_cfg, {k: v.copy() for k, v in model.params.items()})


# ------------------------------------------------------------------ files

def checkpoint_bytes(model: TinyLm) -> bytes:
    """Serialize a model: magic, int32 config fields, float64 rope base,
    then parameter tensors in declaration order as little-endian float32."""
    cfg = model.cfg
    head = _CHECKPOINT_MAGIC + struct.pack(
        "<6i",
        cfg.layers,
        cfg.d_model,
        cfg.n_heads,
        cfg.d_ff,
        cfg.vocab_size,
        cfg.max_context,
    ) + struct.pack("<d", cfg.rope_base)
    body = b"".join(
        model.params[name].astype("<f4").tobytes()
        for name, _ in _param_layout(cfg)
    )
    return head + body


def save_checkpoint(model: TinyLm, path) -> None:
    with open(path, "wb") as f:
        f.write(checkpoint_bytes(model))


def load_checkpoint(path) -> TinyLm:
    with open(path, "rb") as f:
        blob = f.read()
    if blob[:4] != _CHECKPOINT_MAGIC:
        raise ValueError(f"not a model checkpoint: bad magic {blob[:4]!r}")
    fields = struct.unpack("<6i", blob[4:28])
    (rope_base,) = struct.unpack("<d", blob[28:36])
    cfg = TinyLmConfig(*fields, rope_base=rope_base)
    params: dict[str, np.ndarray] = {}
    off = 36
    for name, shape in _param_layout(cfg):
        size = int(np.prod(shape))
        arr = np.frombuffer(blob, dtype="<f4", count=size, offset=off)
        params[name] = arr.reshape(shape).astype(np.float32)
        off += size * 4
    if off != len(blob):
        raise ValueError("checkpoint has trailing or missing tensor bytes")
    return TinyLm(cfg, params)


def save_traces(path, traces: list[LogProbTrace]) -> None:
    """Binary trace dump: per sequence, int64 seq_id, context_limit and
    length, then the float64 little-endian log-probabilities."""
    with open(path, "wb") as f:
        for tr in traces:
            f.write(struct.pack("<3q", tr.seq_id, tr.context_limit, tr.length))
            f.write(tr.logp.astype("<f8").tobytes())


def load_traces(path) -> list[LogProbTrace]:
    out = []
    with open(path, "rb") as f:
        blob = f.read()
    off = 0
    while off < len(blob):
        seq_id, climit, length = struct.unpack_from("<3q", blob, off)
        off += 24
        logp = np.frombuffer(blob, dtype="<f8", count=length, offset=off)
        off += 8 * length
        out.append(LogProbTrace(seq_id=seq_id, context_limit=climit,
                                logp=logp.astype(np.float64)))
    return out
