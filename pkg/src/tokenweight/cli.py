"""Command-line entry point.

Subcommands: gen (corpora), train (weighted training), score (frozen
score cache + dumps), eval (benchmark report), dump-weights (per-token
TSV for one sequence), sweep (grid over any config key, optionally in
parallel).

Configs are flat ``key = value`` text files with dotted section prefixes
(``train.steps = 500``); ``#`` starts a comment. Every command writes
into a content-addressed directory under ``--out`` containing a copy of
the resolved config, so runs are reproducible and re-running with
unchanged inputs rewrites identical bytes.

Exit codes: 0 success, 2 config error, 3 numeric abort during training,
4 stale score cache that the config forbids rebuilding.
"""

from __future__ import annotations

import argparse
import hashlib
import os
import sys
from concurrent.futures import ProcessPoolExecutor

import numpy as np

from .corpus import (
    TokenSequence,
    chunk_documents,
    derive_seed,
    gen_entity_recurrence_corpus,
    gen_markov_corpus,
    gen_passkey_corpus,
    load_corpus,
    save_corpus,
)
from .errors import StaleCacheError, TrainingDivergedError
from .evalbench import TASK_KINDS, evaluate_model, write_report
from .model import (
    TinyLm,
    TinyLmConfig,
    extend_context,
    init_model,
    load_checkpoint,
    save_checkpoint,
)
from .pipeline import (
    ScorerSpec,
    apply_score_fn,
    load_cache,
    postprocess_scores,
    run_training,
    save_cache,
    score_frozen,
    scorer_fingerprint,
    write_run_log,
)
from .scoring import ScoreVector, entropy_weight
from .training import TrainConfig
from .weighting import write_weight_dump

__all__ = ["RunConfig", "main"]

_REQUIRED = object()


class RunConfig:
    """Flat dotted-key configuration with typed, field-named access."""

    def __init__(self, data: dict[str, str]):
        self.data = dict(data)

    @classmethod
    def from_text(cls, text: str) -> "RunConfig":
        data: dict[str, str] = {}
        for ln, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"config line {ln}: expected key = value, got {raw!r}")
            key, val = line.split("=", 1)
            data[key.strip()] = val.strip()
        return cls(data)

    @classmethod
    def from_file(cls, path: str) -> "RunConfig":
        if not os.path.exists(path):
            raise ValueError(f"config file not found: {path}")
        with open(path, "r", encoding="utf-8") as f:
            return cls.from_text(f.read())

    def get(self, key: str, default=_REQUIRED, cast=str):
        raw = self.data.get(key)
        if raw is None:
            if default is _REQUIRED:
                raise ValueError(f"config field {key!r} is required")
            return default
        try:
            if cast is bool:
                low = raw.lower()
                if low in ("true", "1", "yes"):
                    return True
                if low in ("false", "0", "no"):
                    return False
                raise ValueError(raw)
            return cast(raw)
        except (TypeError, ValueError):
            raise ValueError(
                f"config field {key!r}: cannot parse {raw!r} as {cast.__name__}"
            ) from None

    def get_path(self, key: str, default=_REQUIRED) -> str:
        path = self.get(key, default=default)
        if path is not default and path is not None and not os.path.exists(path):
            raise ValueError(f"config field {key!r}: file not found: {path}")
        return path

    def with_overrides(self, **pairs) -> "RunConfig":
        data = dict(self.data)
        data.update({k: str(v) for k, v in pairs.items()})
        return RunConfig(data)

    def resolved_text(self) -> str:
        return "".join(f"{k} = {self.data[k]}\n" for k in sorted(self.data))


def _run_dir(out: str, command: str, cfg: RunConfig, seed: int) -> str:
    """Content-addressed run directory under `out`."""
    h = hashlib.blake2b(digest_size=6)
    h.update(command.encode())
    h.update(cfg.resolved_text().encode())
    h.update(str(seed).encode())
    path = os.path.join(out, f"{command}-{h.hexdigest()}")
    os.makedirs(path, exist_ok=True)
    with open(os.path.join(path, "config.resolved"), "w", encoding="utf-8") as f:
        f.write(f"# command = {command}\n# seed = {seed}\n")
        f.write(cfg.resolved_text())
    return path


def _model_config(cfg: RunConfig) -> TinyLmConfig:
    return TinyLmConfig(
        layers=cfg.get("model.layers", 2, int),
        d_model=cfg.get("model.d_model", 64, int),
        n_heads=cfg.get("model.n_heads", 4, int),
        d_ff=cfg.get("model.d_ff", 256, int),
        vocab_size=cfg.get("model.vocab", 64, int),
        max_context=cfg.get("model.context", 64, int),
        rope_base=cfg.get("model.rope_base", 10_000.0, float),
    )


def _train_config(cfg: RunConfig, seed: int) -> TrainConfig:
    return TrainConfig(
        learning_rate=cfg.get("train.lr", 1e-3, float),
        warmup_steps=cfg.get("train.warmup", 20, int),
        total_steps=cfg.get("train.steps", 100, int),
        batch_size=cfg.get("train.batch_size", 8, int),
        grad_accum=cfg.get("train.grad_accum", 1, int),
        weight_decay=cfg.get("train.weight_decay", 0.01, float),
        seed=derive_seed(seed, "train"),
    )


def _scorer_spec(cfg: RunConfig, seed: int) -> ScorerSpec:
    spec = ScorerSpec(
        mode=cfg.get("scorer.mode", "unfrozen"),
        score_fn=cfg.get("scorer.score_fn", "abs"),
        postprocess=cfg.get("scorer.postprocess", "uniform"),
        kappa=cfg.get("scorer.kappa", 0.2, float),
        lam=cfg.get("scorer.lambda", 0.75, float),
        n=cfg.get("scorer.n", 32, int),
        o=cfg.get("scorer.o", 8, int),
        shift_k=cfg.get("scorer.shift_k", 2, int),
        seed=derive_seed(seed, "sparse-fill"),
    )
    ref_path = cfg.get_path("scorer.reference", None)
    if ref_path:
        spec.reference = load_checkpoint(ref_path)
    return spec


def _load_corpus_field(cfg: RunConfig) -> list[TokenSequence]:
    return load_corpus(cfg.get_path("corpus.path"))


def cmd_gen(cfg: RunConfig, out: str, seed: int) -> str:
    """Generate a corpus file; returns the run directory."""
    run_dir = _run_dir(out, "gen", cfg, seed)
    kind = cfg.get("corpus.kind")
    count = cfg.get("corpus.count", 64, int)
    length = cfg.get("corpus.length", 256, int)
    cseed = derive_seed(seed, "corpus")
    if kind == "passkey":
        seqs = gen_passkey_corpus(count, length, cfg.get("corpus.distance", 0, int), cseed)
    elif kind == "entity":
        seqs = gen_entity_recurrence_corpus(
            count, length, cfg.get("corpus.gap", 96, int), cseed
        )
    elif kind == "markov":
        docs, _ = gen_markov_corpus(
            cfg.get("corpus.order", 2, int),
            cfg.get("corpus.vocab", 8, int),
            count,
            cseed,
            doc_len=length,
        )
        seqs = chunk_documents(docs, length)
    elif kind == "mixed":
        half = count // 2
        pk = gen_passkey_corpus(
            half, length, cfg.get("corpus.distance", 0, int), derive_seed(cseed, "pk")
        )
        en = gen_entity_recurrence_corpus(
            count - half, length, cfg.get("corpus.gap", 96, int), derive_seed(cseed, "en")
        )
        seqs = []
        for i, s in enumerate([x for pair in zip(pk, en) for x in pair]):
            seqs.append(TokenSequence(seq_id=i, ids=s.ids, answers=s.answers))
    else:
        raise ValueError(
            f"config field 'corpus.kind': unknown kind {kind!r} "
            "(expected passkey|entity|markov|mixed)"
        )
    save_corpus(os.path.join(run_dir, "corpus.tsv"), seqs)
    print(f"gen: {len(seqs)} sequences -> {run_dir}/corpus.tsv")
    return run_dir


def cmd_train(cfg: RunConfig, out: str, seed: int) -> str:
    """Train per config; writes checkpoint.tlm and run_log.tsv."""
    run_dir = _run_dir(out, "train", cfg, seed)
    corpus = _load_corpus_field(cfg)
    init_path = cfg.get_path("train.init_checkpoint", None)
    if init_path:
        model = load_checkpoint(init_path)
    else:
        model = init_model(_model_config(cfg), derive_seed(seed, "model-init"))
    new_ctx = cfg.get("train.extend_context", None, int)
    if new_ctx is not None:
        model = extend_context(
            model, new_ctx, cfg.get("train.rope_base_factor", 16.0, float)
        )
    spec = _scorer_spec(cfg, seed)
    tcfg = _train_config(cfg, seed)
    cache_path = None
    if spec.needs_reference() and spec.postprocess != "uniform":
        cache_path = os.path.join(run_dir, "cache.swc")
    model, records = run_training(
        model, corpus, spec, tcfg, cache_path=cache_path,
        log_path=os.path.join(run_dir, "run_log.tsv"),
    )
    save_checkpoint(model, os.path.join(run_dir, "checkpoint.tlm"))
    print(
        f"train: {tcfg.total_steps} steps, final loss {records[-1].loss:.4f} "
        f"-> {run_dir}/checkpoint.tlm"
    )
    return run_dir


def cmd_score(cfg: RunConfig, out: str, seed: int) -> str:
    """Build (or reuse) a frozen score cache and write score dumps."""
    run_dir = _run_dir(out, "score", cfg, seed)
    corpus = _load_corpus_field(cfg)
    model = load_checkpoint(cfg.get_path("score.checkpoint"))
    spec = _scorer_spec(cfg, seed)
    reference = spec.reference if spec.reference is not None else model
    n, o = spec.n, spec.o
    fp = scorer_fingerprint(reference, n, o, spec.score_fn)
    cache_path = cfg.get("score.cache", os.path.join(run_dir, "cache.swc"))
    require_cache = cfg.get("score.require_cache", False, bool)
    cache = None
    if os.path.exists(cache_path):
        try:
            cache = load_cache(cache_path, expected_fingerprint=fp)
        except StaleCacheError:
            if require_cache:
                raise
            print("warning: stale score cache, rescoring", file=sys.stderr)
    elif require_cache:
        raise StaleCacheError(f"score.require_cache set but no cache at {cache_path}")
    if cache is None:
        cache = score_frozen(reference, corpus, n, o, score_fn=spec.score_fn,
                             long_model=model)
        save_cache(cache_path, cache)
    dump_count = cfg.get("score.dump_count", 1, int)
    from .model import LogProbTrace
    from .scoring import write_score_dump

    for seq in corpus[:dump_count]:
        short = LogProbTrace(seq.seq_id, n, cache.short[seq.seq_id])
        long_arr = cache.long.get(seq.seq_id)
        if long_arr is None:
            long_arr = model.batch_logprobs(seq.ids[None, :], seq.length)[0]
        long = LogProbTrace(seq.seq_id, seq.length, long_arr)
        if spec.score_fn == "entropy":
            sv = entropy_weight(
                reference.batch_distributions(seq.ids[None, :])[0], seq.seq_id
            )
        else:
            from .scoring import signed_score

            sv = apply_score_fn(spec, signed_score(short, long))
        write_score_dump(
            os.path.join(run_dir, f"score_dump_{seq.seq_id}.tsv"),
            seq.ids, long, short, sv,
        )
    print(f"score: cached {len(cache.short)} sequences -> {cache_path}")
    return run_dir


def cmd_eval(cfg: RunConfig, out: str, seed: int, checkpoint: str | None) -> str:
    """Evaluate a checkpoint on the benchmark grid; writes report.tsv."""
    run_dir = _run_dir(out, "eval", cfg, seed)
    ckpt = checkpoint or cfg.get_path("eval.checkpoint")
    if checkpoint is not None and not os.path.exists(checkpoint):
        raise ValueError(f"checkpoint not found: {checkpoint}")
    model = load_checkpoint(ckpt)
    lengths = tuple(
        int(x) for x in cfg.get("eval.lengths", "64,128,192,256").split(",")
    )
    kinds_raw = cfg.get("eval.kinds", ",".join(TASK_KINDS))
    kinds = tuple(k.strip() for k in kinds_raw.split(",") if k.strip())
    report = evaluate_model(
        model,
        lengths=lengths,
        kinds=kinds,
        tasks_per_cell=cfg.get("eval.tasks_per_cell", 8, int),
        seed=derive_seed(seed, "eval"),
    )
    write_report(os.path.join(run_dir, "report.tsv"), report)
    print(f"eval: combined {report.combined:.4f} -> {run_dir}/report.tsv")
    return run_dir


def cmd_dump_weights(
    cfg: RunConfig, out: str, seed: int, checkpoint: str | None, seq_id: int
) -> str:
    """Per-token loss/score/weight TSV for one corpus sequence."""
    run_dir = _run_dir(out, "dump-weights", cfg, seed)
    ckpt = checkpoint or cfg.get_path("dump.checkpoint")
    model = load_checkpoint(ckpt)
    corpus = _load_corpus_field(cfg)
    by_id = {s.seq_id: s for s in corpus}
    if seq_id not in by_id:
        raise ValueError(f"sequence id {seq_id} not present in the corpus")
    seq = by_id[seq_id]
    spec = _scorer_spec(cfg, seed)
    reference = spec.reference if spec.reference is not None else model
    from .model import LogProbTrace
    from .pipeline import _short_logprobs_from_long
    from .scoring import signed_score

    long_arr = model.batch_logprobs(seq.ids[None, :], seq.length)[0]
    if spec.mode == "unfrozen":
        short_arr = _short_logprobs_from_long(
            model, seq.ids[None, :], spec.n, spec.o, long_arr[None, :]
        )[0]
    else:
        short_arr = reference.batch_logprobs(seq.ids[None, :], spec.n, overlap=spec.o)[0]
    short = LogProbTrace(seq.seq_id, spec.n, short_arr)
    long = LogProbTrace(seq.seq_id, seq.length, long_arr)
    if spec.score_fn == "entropy":
        scorer_model = reference if spec.needs_reference() else model
        sv = entropy_weight(
            scorer_model.batch_distributions(seq.ids[None, :])[0], seq.seq_id
        )
    else:
        sv = apply_score_fn(spec, signed_score(short, long))
    wv = postprocess_scores(spec, sv)
    path = os.path.join(run_dir, f"weights_{seq_id}.tsv")
    write_weight_dump(path, seq.ids, long, short, sv, wv)
    print(f"dump-weights: sequence {seq_id} -> {path}")
    return run_dir


def _sweep_point(payload: tuple) -> tuple[str, str, float]:
    """Train + eval one grid point; runs in a worker process."""
    cfg_data, grid_key, value, out, seed = payload
    cfg = RunConfig(cfg_data).with_overrides(**{grid_key: value})
    point_seed = derive_seed(seed, "sweep", grid_key, value)
    run_dir = cmd_train(cfg, out, point_seed)
    eval_dir = cmd_eval(cfg, out, point_seed,
                        os.path.join(run_dir, "checkpoint.tlm"))
    with open(os.path.join(eval_dir, "report.tsv"), "r", encoding="utf-8") as f:
        combined = float(f.read().strip().rsplit("\t", 1)[-1])
    return value, run_dir, combined


def cmd_sweep(
    cfg: RunConfig, out: str, seed: int, grid: str, parallel: int
) -> str:
    """Run the train+eval pipeline for each value of one config key."""
    if "=" not in grid:
        raise ValueError(f"--grid expects NAME=v1,v2,..., got {grid!r}")
    grid_key, _, values_raw = grid.partition("=")
    grid_key = grid_key.strip()
    values = [v.strip() for v in values_raw.split(",") if v.strip()]
    if not values:
        raise ValueError(f"--grid {grid!r} lists no values")
    sweep_dir = _run_dir(out, "sweep", cfg.with_overrides(**{"sweep.grid": grid}), seed)
    payloads = [(cfg.data, grid_key, v, sweep_dir, seed) for v in values]
    if parallel > 1:
        with ProcessPoolExecutor(max_workers=parallel) as ex:
            results = list(ex.map(_sweep_point, payloads))
    else:
        results = [_sweep_point(p) for p in payloads]
    with open(os.path.join(sweep_dir, "sweep.tsv"), "w", encoding="utf-8",
              newline="\n") as f:
        f.write(f"{grid_key}\trun_dir\tcombined\n")
        for value, run_dir, combined in results:
            f.write(f"{value}\t{run_dir}\t{combined:.4f}\n")
    print(f"sweep: {len(values)} points -> {sweep_dir}/sweep.tsv")
    return sweep_dir


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(
        prog="tokenweight",
        description="Token-weighted long-context training laboratory",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name in ("gen", "train", "score", "eval", "dump-weights", "sweep"):
        sp = sub.add_parser(name)
        sp.add_argument("--config", required=True, help="flat key=value config file")
        sp.add_argument("--out", default="runs", help="output root directory")
        sp.add_argument("--seed", type=int, default=None, help="global seed override")
        if name in ("eval", "dump-weights"):
            sp.add_argument("--checkpoint", default=None, help="model checkpoint path")
        if name == "dump-weights":
            sp.add_argument("--seq-id", type=int, required=True)
        if name == "sweep":
            sp.add_argument("--grid", required=True, help="NAME=v1,v2,...")
            sp.add_argument("--parallel", type=int, default=1)
    args = parser.parse_args(argv)

    try:
        cfg = RunConfig.from_file(args.config)
        seed = args.seed if args.seed is not None else cfg.get("seed", 0, int)
        if args.command == "gen":
            cmd_gen(cfg, args.out, seed)
        elif args.command == "train":
            cmd_train(cfg, args.out, seed)
        elif args.command == "score":
            cmd_score(cfg, args.out, seed)
        elif args.command == "eval":
            cmd_eval(cfg, args.out, seed, args.checkpoint)
        elif args.command == "dump-weights":
            cmd_dump_weights(cfg, args.out, seed, args.checkpoint, args.seq_id)
        elif args.command == "sweep":
            cmd_sweep(cfg, args.out, seed, args.grid, args.parallel)
        return 0
    except TrainingDivergedError as e:
        print(f"numeric abort: {e}", file=sys.stderr)
        return 3
    except StaleCacheError as e:
        print(f"stale cache: {e}", file=sys.stderr)
        return 4
    except (ValueError, KeyError, OSError) as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
