"""Command-line pipeline: synth, quantize, index, retrieve, train, eval, bench, analyze.

Every command reads one JSON config (plus dotted-path overrides), writes its
artifacts into a run directory, and drops a manifest recording the fully
echoed config, a config hash, input/output artifact hashes, the seed, and
library versions. Re-running a command with identical inputs reproduces the
artifact bytes, which is what the manifest hashes make auditable.

Exit codes: 0 success, 1 usage/config, 2 data, 3 numeric.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import platform
import sys
from pathlib import Path

import numpy as np
import scipy

from . import __version__
from .analysis import (bucket_sweep, gain_report, mi_vs_clusters,
                       target_semid_groups, within_bucket_dispersion)
from .config import ExperimentConfig, canonical_json, load_config
from .data import Corpus, SplitPolicy, load_corpus, save_corpus, split
from .errors import (ConfigError, DataError, DependencyError, NumericError,
                     SemrecError)
from .model import load_params, read_checkpoint_header, save_params
from .quantizer import load_codebooks, load_semid_map, save_codebooks, save_semid_map
from .retrieval import (bench_retrieval, build_all_indexes, hard_retrieve,
                        load_indexes, save_indexes, soft_retrieve)
from .similarity import BucketConfig, SimRange, calibrate_range
from .training import (context_from_artifacts, evaluate, fit_from_context,
                       prepare_impressions, prepared_buckets, quantize_corpus)

CORPUS = "corpus"
CODEBOOKS = "codebooks.bin"
SEMIDS = "semids.jsonl"
INDEX = "index.jsonl"
CHECKPOINT = "checkpoint.bin"
METRICS = "metrics.jsonl"


class _Parser(argparse.ArgumentParser):
    """argparse that reports usage problems as config errors (exit code 1)."""

    def error(self, message):
        raise ConfigError(message)


def _sha256(path: Path) -> str:
    """Hash a file, or a directory as the sorted (name, file hash) sequence."""
    h = hashlib.sha256()
    files = sorted(p for p in path.rglob("*") if p.is_file()) if path.is_dir() else [path]
    for p in files:
        if path.is_dir():
            h.update(str(p.relative_to(path)).encode())
        with open(p, "rb") as fh:
            for chunk in iter(lambda: fh.read(1 << 20), b""):
                h.update(chunk)
    return h.hexdigest()


def _write_json(path: Path, obj) -> None:
    path.write_text(canonical_json(obj) + "\n")


def _write_jsonl(path: Path, records) -> None:
    with open(path, "w") as fh:
        for rec in records:
            fh.write(canonical_json(rec) + "\n")


def _write_manifest(out: Path, command: str, cfg: ExperimentConfig,
                    inputs: dict[str, Path], outputs: dict[str, Path]) -> Path:
    manifest = {
        "command": command,
        "config_hash": cfg.config_hash(),
        "config": cfg.to_dict(),
        "seed": cfg.seed,
        "inputs": {k: {"file": p.name, "sha256": _sha256(p)} for k, p in sorted(inputs.items())},
        "outputs": {k: {"file": p.name, "sha256": _sha256(p)} for k, p in sorted(outputs.items())},
        "versions": {
            "python": platform.python_version(),
            "numpy": np.__version__,
            "scipy": scipy.__version__,
            "semrec": __version__,
        },
    }
    path = out / f"manifest_{command}.json"
    _write_json(path, manifest)
    return path


def _require(path: Path, what: str, producer: str) -> Path:
    if not path.exists():
        raise DependencyError(f"{what} ({path})", producer)
    return path


def _corpus_path(cfg: ExperimentConfig, out: Path, args) -> Path:
    if getattr(args, "corpus", None):
        return _require(Path(args.corpus), "corpus", "synth")
    if cfg.corpus.path:
        return _require(Path(cfg.corpus.path), "corpus", "synth")
    return _require(out / CORPUS, "corpus", "synth")


def _load_corpus(cfg: ExperimentConfig, out: Path, args) -> tuple[Corpus, Path]:
    path = _corpus_path(cfg, out, args)
    corpus = load_corpus(path)
    corpus.validate()
    return corpus, path


def _semid_artifacts(out: Path, args):
    cb_path = _require(Path(args.codebooks) if getattr(args, "codebooks", None)
                       else out / CODEBOOKS, "codebooks", "quantize")
    sm_path = _require(Path(args.semids) if getattr(args, "semids", None)
                       else out / SEMIDS, "semantic ids", "quantize")
    return load_codebooks(cb_path), load_semid_map(sm_path), cb_path, sm_path


def _build_context(cfg: ExperimentConfig, corpus: Corpus, out: Path, args,
                   need_semid: bool):
    """Context from on-disk artifacts; returns (ctx, input paths)."""
    inputs: dict[str, Path] = {}
    codebooks = semid_map = None
    semid_codes = None
    if need_semid or cfg.retrieval.strategy == "hard":
        codebooks, semid_map, cb_path, sm_path = _semid_artifacts(out, args)
        semid_codes = semid_map.codes_matrix(corpus.item_ids)
        inputs["codebooks"] = cb_path
        inputs["semids"] = sm_path
    ctx = context_from_artifacts(corpus, cfg.split_policy(), cfg.train_config(),
                                 cfg.similarity_config(), codebooks=codebooks,
                                 semid_codes=semid_codes, semid_map=semid_map)
    return ctx, inputs


# --- commands ---

def cmd_synth(cfg: ExperimentConfig, out: Path, args) -> int:
    from .synth import generate_synthetic
    corpus = generate_synthetic(cfg.corpus.synth)
    path = out / CORPUS
    save_corpus(corpus, path)
    _write_manifest(out, "synth", cfg, {}, {"corpus": path})
    print(f"synth: {len(corpus.items)} items, {len(corpus.sequences)} users, "
          f"{len(corpus.impressions)} impressions -> {path}")
    return 0


def cmd_quantize(cfg: ExperimentConfig, out: Path, args) -> int:
    corpus, corpus_path = _load_corpus(cfg, out, args)
    codebooks, codes, semid_map = quantize_corpus(corpus, cfg.quantizer)
    cb_path, sm_path = out / CODEBOOKS, out / SEMIDS
    save_codebooks(codebooks, cb_path)
    save_semid_map(semid_map, sm_path)
    report = {
        "levels": codebooks.levels,
        "codebook_size": codebooks.codebook_size,
        "dim": codebooks.dim,
        "level_mse": [float(m) for m in codebooks.level_mse],
        "n_items": int(len(corpus.items)),
    }
    rp_path = out / "quantize.json"
    _write_json(rp_path, report)
    _write_manifest(out, "quantize", cfg, {"corpus": corpus_path},
                    {"codebooks": cb_path, "semids": sm_path, "report": rp_path})
    print(f"quantize: M={codebooks.levels} C={codebooks.codebook_size} "
          f"level_mse={['%.5f' % m for m in codebooks.level_mse]}")
    return 0


def cmd_index(cfg: ExperimentConfig, out: Path, args) -> int:
    corpus, corpus_path = _load_corpus(cfg, out, args)
    _, semid_map, cb_path, sm_path = _semid_artifacts(out, args)
    indexes = build_all_indexes(corpus, semid_map)
    ix_path = out / INDEX
    save_indexes(indexes, ix_path)
    stats = {
        "n_users": len(indexes),
        "index_bytes": int(sum(ix.payload_bytes() for ix in indexes.values())),
        "n_postings": int(sum(len(ix.postings) for ix in indexes.values())),
    }
    st_path = out / "index_stats.json"
    _write_json(st_path, stats)
    _write_manifest(out, "index", cfg,
                    {"corpus": corpus_path, "codebooks": cb_path, "semids": sm_path},
                    {"index": ix_path, "stats": st_path})
    print(f"index: {stats['n_users']} users, {stats['index_bytes']} payload bytes")
    return 0


def cmd_retrieve(cfg: ExperimentConfig, out: Path, args) -> int:
    corpus, corpus_path = _load_corpus(cfg, out, args)
    inputs = {"corpus": corpus_path}
    strategy = cfg.retrieval.strategy
    sim_cfg = cfg.similarity_config()
    sim_range = calibrate_range(corpus, sample_size=sim_cfg.calib_sample,
                                seed=sim_cfg.calib_seed, lo_pct=sim_cfg.lo_pct,
                                hi_pct=sim_cfg.hi_pct)
    bucket_cfg = BucketConfig(n_buckets=cfg.similarity.n_buckets, sim_range=sim_range)
    semid_map = None
    indexes = None
    if strategy == "hard":
        _, semid_map, cb_path, sm_path = _semid_artifacts(out, args)
        inputs["codebooks"] = cb_path
        inputs["semids"] = sm_path
        ix_path = _require(Path(args.index) if args.index else out / INDEX,
                           "inverted index", "index")
        indexes = load_indexes(ix_path)
        inputs["index"] = ix_path

    def records():
        for imp in corpus.impressions:
            if strategy == "soft":
                r = soft_retrieve(corpus, imp.user_id, imp.target_item_id,
                                  imp.event_time, cfg.retrieval.k_ret, bucket_cfg)
            else:
                if imp.user_id not in indexes:
                    raise DataError(f"no index for user {imp.user_id}")
                r = hard_retrieve(corpus, indexes[imp.user_id], imp.target_item_id,
                                  imp.event_time, cfg.retrieval.k_ret, bucket_cfg,
                                  semid_map, fallback=cfg.retrieval.fallback)
            yield {
                "user_id": int(r.user_id),
                "target_item_id": int(r.target_item_id),
                "event_time": int(imp.event_time),
                "strategy": r.strategy,
                "item_ids": [int(v) for v in r.item_ids],
                "timestamps": [int(v) for v in r.timestamps],
                "similarities": [float(v) for v in r.similarities],
                "buckets": [int(v) for v in r.buckets],
            }

    rt_path = out / "retrieved.jsonl"
    _write_jsonl(rt_path, records())
    _write_manifest(out, "retrieve", cfg, inputs, {"retrieved": rt_path})
    print(f"retrieve: {len(corpus.impressions)} queries ({strategy}) -> {rt_path}")
    return 0


def cmd_train(cfg: ExperimentConfig, out: Path, args) -> int:
    corpus, corpus_path = _load_corpus(cfg, out, args)
    ctx, inputs = _build_context(cfg, corpus, out, args,
                                 need_semid=cfg.training.use_semid)
    inputs["corpus"] = corpus_path
    fit = fit_from_context(ctx, cfg.model_config(), cfg.train_config())
    ck_path = out / CHECKPOINT
    sr = ctx.sim_range
    save_params(fit.params, ck_path, extra={
        "config_hash": cfg.config_hash(),
        "seed": cfg.seed,
        "train_seed": cfg.training.seed,
        "strategy": cfg.retrieval.strategy,
        "k_ret": cfg.retrieval.k_ret,
        "fallback": cfg.retrieval.fallback,
        "sim_range": {"s_min": sr.s_min, "s_max": sr.s_max,
                      "sample_size": sr.sample_size, "degenerate": sr.degenerate},
        "split": dataclasses.asdict(cfg.split_policy()),
    })
    mt_path = out / METRICS
    _write_jsonl(mt_path, fit.history)
    summary = dict(fit.eval_metrics)
    summary.update({
        "optimizer_rejected": fit.optimizer_rejected,
        "train_fallback_queries": ctx.train_prep.n_fallback,
        "train_empty_retrievals": ctx.train_prep.n_empty,
        "eval_fallback_queries": ctx.eval_prep.n_fallback,
        "eval_empty_retrievals": ctx.eval_prep.n_empty,
    })
    tr_path = out / "train.json"
    _write_json(tr_path, summary)
    _write_manifest(out, "train", cfg, inputs,
                    {"checkpoint": ck_path, "metrics": mt_path, "summary": tr_path})
    print(f"train: eval gauc {fit.eval_metrics['gauc']:.4f} "
          f"loss {fit.eval_metrics['loss']:.4f} -> {ck_path}")
    return 0


def _eval_setup(cfg: ExperimentConfig, corpus: Corpus, out: Path, args):
    """Load a checkpoint and rebuild its eval-side prepared data."""
    from .model import build_item_features
    ck_path = _require(Path(args.checkpoint) if getattr(args, "checkpoint", None)
                       else out / CHECKPOINT, "checkpoint", "train")
    params = load_params(ck_path)
    run = read_checkpoint_header(ck_path).get("run", {})
    inputs = {"checkpoint": ck_path}
    semid_codes = None
    semid_map = None
    if params.config.use_semid or run.get("strategy") == "hard":
        _, semid_map, cb_path, sm_path = _semid_artifacts(out, args)
        semid_codes = semid_map.codes_matrix(corpus.item_ids)
        inputs["codebooks"] = cb_path
        inputs["semids"] = sm_path
    feats = build_item_features(corpus, params, semid_codes)
    sp = run.get("split")
    policy = SplitPolicy(**sp) if sp else cfg.split_policy()
    _, eval_corpus = split(corpus, policy)
    prep = prepare_impressions(corpus, eval_corpus.impressions,
                               int(run.get("k_ret", cfg.retrieval.k_ret)),
                               strategy=run.get("strategy", cfg.retrieval.strategy),
                               semid_map=semid_map,
                               fallback=run.get("fallback", cfg.retrieval.fallback))
    sr = run.get("sim_range")
    if sr is None:
        raise DataError(f"{ck_path}: checkpoint lacks the calibrated similarity range")
    bucket_cfg = BucketConfig(n_buckets=params.config.n_buckets,
                              sim_range=SimRange(**sr))
    buckets = prepared_buckets(prep, bucket_cfg)
    return params, feats, prep, buckets, bucket_cfg, inputs


def cmd_eval(cfg: ExperimentConfig, out: Path, args) -> int:
    corpus, corpus_path = _load_corpus(cfg, out, args)
    params, feats, prep, buckets, _, inputs = _eval_setup(cfg, corpus, out, args)
    inputs["corpus"] = corpus_path
    metrics = evaluate(params, feats, prep, buckets,
                       batch_size=cfg.training.batch_size)
    ev_path = out / "eval.json"
    _write_json(ev_path, metrics)
    _write_manifest(out, "eval", cfg, inputs, {"metrics": ev_path})
    print(f"eval: gauc {metrics['gauc']:.4f} loss {metrics['loss']:.4f} "
          f"({metrics['n_impressions']} impressions)")
    return 0


def cmd_bench(cfg: ExperimentConfig, out: Path, args) -> int:
    corpus, corpus_path = _load_corpus(cfg, out, args)
    _, semid_map, cb_path, sm_path = _semid_artifacts(out, args)
    reports = bench_retrieval(corpus, cfg.retrieval.k_ret, semid_map,
                              strategies=("soft", "hard"),
                              fallback=cfg.retrieval.fallback)
    cost = [r.to_dict() for r in reports]
    ct_path = out / "cost.json"
    _write_json(ct_path, cost)
    _write_manifest(out, "bench", cfg,
                    {"corpus": corpus_path, "codebooks": cb_path, "semids": sm_path},
                    {"cost": ct_path})
    for r in reports:
        print(f"bench: {r.strategy:5s} p50 {r.p50_ns:10.0f} ns  p99 {r.p99_ns:10.0f} ns  "
              f"bytes/query {r.bytes_per_query:12.1f}")
    return 0


def cmd_analyze(cfg: ExperimentConfig, out: Path, args) -> int:
    kind = args.kind
    corpus, corpus_path = _load_corpus(cfg, out, args)
    a = cfg.analysis
    if kind == "gain":
        ctx, inputs = _build_context(cfg, corpus, out, args, need_semid=True)
        inputs["corpus"] = corpus_path
        bucket_cfg = BucketConfig(n_buckets=cfg.similarity.n_buckets,
                                  sim_range=ctx.sim_range)
        semid = gain_report(ctx.eval_prep, "semid_level1",
                            semid_codes=ctx.semid_codes, semid_level=a.semid_level)
        bucket = gain_report(ctx.eval_prep, "sim_bucket", bucket_cfg=bucket_cfg)
        report = {"semid_level1": semid, "sim_bucket": bucket,
                  "difference_nats": semid["gain_nats"] - bucket["gain_nats"]}
        path = out / "gain.json"
        _write_json(path, report)
        _write_manifest(out, "analyze_gain", cfg, inputs, {"gain": path})
        print(f"analyze gain: semid {semid['gain_nats']:.6f} nats, "
              f"sim_bucket {bucket['gain_nats']:.6f} nats")
        return 0
    if kind == "dispersion":
        ctx, inputs = _build_context(cfg, corpus, out, args, need_semid=True)
        inputs["corpus"] = corpus_path
        n_b = a.dispersion_buckets or cfg.similarity.n_buckets
        bucket_cfg = BucketConfig(n_buckets=n_b, sim_range=ctx.sim_range)
        groups = target_semid_groups(ctx.eval_prep, ctx.semid_codes, level=a.semid_level)
        report = within_bucket_dispersion(ctx.eval_prep, bucket_cfg, groups,
                                          min_support=a.min_support, pairing=a.pairing)
        chi2, dof = report.total_chi2()
        payload = {
            "cells": [dataclasses.asdict(c) for c in report.cells],
            "buckets": [dataclasses.asdict(b) for b in report.buckets],
            "n_impressions": report.n_impressions,
            "n_pairs": report.n_pairs,
            "n_ungrouped": report.n_ungrouped,
            "n_cells_below_support": report.n_cells_below_support,
            "min_support": report.min_support,
            "pairing": report.pairing,
            "total_chi2": chi2,
            "total_dof": dof,
        }
        js_path = out / "dispersion.json"
        _write_json(js_path, payload)
        tb_path = out / "dispersion.txt"
        tb_path.write_text(report.format_table() + "\n")
        _write_manifest(out, "analyze_dispersion", cfg, inputs,
                        {"dispersion": js_path, "table": tb_path})
        if report.empty:
            print(f"analyze dispersion: no cell met min_support="
                  f"{report.min_support} ({report.n_cells_below_support} below)")
        else:
            print(f"analyze dispersion: {len(report.buckets)} buckets, "
                  f"total chi2 {chi2:.1f} on {dof} dof")
        return 0
    if kind == "mi":
        params, feats, prep, buckets, _, inputs = _eval_setup(cfg, corpus, out, args)
        inputs["corpus"] = corpus_path
        curve = mi_vs_clusters(params, feats, prep, buckets,
                               ks=[int(k) for k in a.cluster_counts], seed=cfg.seed,
                               n_permutations=a.n_permutations,
                               subsample=a.mi_subsample,
                               batch_size=cfg.training.batch_size)
        path = out / "mi.json"
        _write_json(path, curve)
        _write_manifest(out, "analyze_mi", cfg, inputs, {"mi": path})
        for rec in curve:
            print(f"analyze mi: k={rec['k']:4d} mi {rec['mi_nats']:.6f} nats "
                  f"(perm p99 {rec['perm_p99_nats']:.6f})")
        return 0
    if kind == "sweep":
        ctx, inputs = _build_context(cfg, corpus, out, args,
                                     need_semid=cfg.training.use_semid)
        inputs["corpus"] = corpus_path
        curve, _ = bucket_sweep(ctx, cfg.model_config(), cfg.train_config(),
                                [int(b) for b in a.sweep_buckets])
        path = out / "sweep.json"
        _write_json(path, curve)
        _write_manifest(out, "analyze_sweep", cfg, inputs, {"sweep": path})
        for rec in curve:
            print(f"analyze sweep: B={rec['n_buckets']:4d} gauc {rec['gauc']:.4f}")
        return 0
    raise ConfigError(f"unknown analyze kind {kind!r}")


# --- entry point ---

def build_parser() -> _Parser:
    parser = _Parser(prog="semrec", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, corpus=True):
        p.add_argument("-c", "--config", required=True, help="JSON experiment config")
        p.add_argument("-o", "--out", required=True, help="run directory for artifacts")
        p.add_argument("--set", dest="overrides", action="append", default=[],
                       metavar="KEY.PATH=VALUE", help="override a config value")
        if corpus:
            p.add_argument("--corpus", help="corpus directory (default: <out>/corpus)")

    common(sub.add_parser("synth", help="generate a planted-signal corpus"), corpus=False)
    common(sub.add_parser("quantize", help="train residual codebooks, emit semantic ids"))
    p = sub.add_parser("index", help="build per-user inverted indexes")
    common(p)
    p.add_argument("--codebooks")
    p.add_argument("--semids")
    p = sub.add_parser("retrieve", help="run first-stage retrieval for every impression")
    common(p)
    p.add_argument("--codebooks")
    p.add_argument("--semids")
    p.add_argument("--index")
    p = sub.add_parser("train", help="train the ranker")
    common(p)
    p.add_argument("--codebooks")
    p.add_argument("--semids")
    p = sub.add_parser("eval", help="evaluate a checkpoint on the eval split")
    common(p)
    p.add_argument("--codebooks")
    p.add_argument("--semids")
    p.add_argument("--checkpoint")
    p = sub.add_parser("bench", help="benchmark soft vs hard retrieval cost")
    common(p)
    p.add_argument("--codebooks")
    p.add_argument("--semids")
    p = sub.add_parser("analyze", help="representation and label-structure analyses")
    p.add_argument("kind", choices=("mi", "gain", "dispersion", "sweep"))
    common(p)
    p.add_argument("--codebooks")
    p.add_argument("--semids")
    p.add_argument("--checkpoint")
    return parser


COMMANDS = {
    "synth": cmd_synth,
    "quantize": cmd_quantize,
    "index": cmd_index,
    "retrieve": cmd_retrieve,
    "train": cmd_train,
    "eval": cmd_eval,
    "bench": cmd_bench,
    "analyze": cmd_analyze,
}


def main(argv: list[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
        cfg = load_config(args.config, overrides=args.overrides)
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        return COMMANDS[args.command](cfg, out, args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    except NumericError as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return 3
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 2
    except SemrecError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
