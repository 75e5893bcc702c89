"""CLI pipeline: artifacts, manifests, dependency ordering, exit codes."""

from __future__ import annotations

import json

import numpy as np
import pytest

from semrec.cli import _sha256, main
from semrec.config import load_config
from semrec.data import load_corpus
from semrec.model import load_params, read_checkpoint_header
from semrec.quantizer import load_codebooks, load_semid_map
from semrec.retrieval import load_indexes

CONFIG = {
    "seed": 3,
    "corpus": {"synth": {
        "n_users": 24, "n_items": 60, "n_clusters": 3, "embed_dim": 12,
        "id_hash_buckets": 13, "n_item_categories": 5, "n_context_values": 4,
        "seq_len_min": 8, "seq_len_max": 16, "impressions_per_user": 6,
    }},
    "quantizer": {"levels": 3, "codebook_size": 4},
    "similarity": {"n_buckets": 8, "calib_sample": 2000},
    "retrieval": {"k_ret": 5},
    "model": {"item_feature_width": 4, "user_feature_width": 3,
              "context_feature_width": 3, "prefix_depth": 2, "prefix_width": 3,
              "bucket_width": 3, "n_heads": 2, "head_dim": 4,
              "mlp_hidden": [16, 8]},
    "training": {"batch_size": 64, "epochs": 1, "log_every": 5},
    "split": {"kind": "user", "eval_fraction": 0.25},
    "analysis": {"cluster_counts": [2, 4], "n_permutations": 20,
                 "mi_subsample": None, "min_support": 5, "semid_level": 1,
                 "sweep_buckets": [1, 4]},
}


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    """Run every command once into a shared directory."""
    root = tmp_path_factory.mktemp("run")
    cfg_path = root / "config.json"
    cfg_path.write_text(json.dumps(CONFIG))
    out = root / "artifacts"
    base = ["-c", str(cfg_path), "-o", str(out)]
    for argv in (["synth"], ["quantize"], ["index"], ["retrieve"], ["train"],
                 ["eval"], ["bench"], ["analyze", "gain"],
                 ["analyze", "dispersion"], ["analyze", "mi"],
                 ["analyze", "sweep"]):
        assert main(argv + base) == 0, argv
    return cfg_path, out


def read_json(path):
    return json.loads(path.read_text())


def test_synth_writes_corpus_and_manifest(pipeline):
    cfg_path, out = pipeline
    corpus = load_corpus(out / "corpus")
    assert len(corpus.sequences) == 24
    assert len(corpus.impressions) == 24 * 6
    manifest = read_json(out / "manifest_synth.json")
    assert manifest["command"] == "synth"
    assert manifest["seed"] == 3
    assert manifest["config_hash"] == load_config(cfg_path).config_hash()
    assert manifest["inputs"] == {}
    rec = manifest["outputs"]["corpus"]
    assert rec["sha256"] == _sha256(out / "corpus")
    assert set(manifest["versions"]) == {"python", "numpy", "scipy", "semrec"}
    # sub-seeds inherited the global seed
    assert manifest["config"]["corpus"]["synth"]["seed"] == 3
    assert manifest["config"]["quantizer"]["seed"] == 3


def test_quantize_artifacts(pipeline):
    _, out = pipeline
    codebooks = load_codebooks(out / "codebooks.bin")
    assert codebooks.levels == 3
    assert codebooks.codebook_size == 4
    semid_map = load_semid_map(out / "semids.jsonl")
    assert len(semid_map.item_ids) == 60
    report = read_json(out / "quantize.json")
    assert report["n_items"] == 60
    mse = report["level_mse"]
    assert all(b <= a + 1e-12 for a, b in zip(mse, mse[1:]))
    manifest = read_json(out / "manifest_quantize.json")
    assert set(manifest["outputs"]) == {"codebooks", "semids", "report"}
    assert manifest["inputs"]["corpus"]["sha256"] == _sha256(out / "corpus")


def test_index_artifacts(pipeline):
    _, out = pipeline
    indexes = load_indexes(out / "index.jsonl")
    assert len(indexes) == 24
    stats = read_json(out / "index_stats.json")
    assert stats["n_users"] == 24
    assert stats["index_bytes"] > 0
    assert stats["n_postings"] > 0


def test_retrieve_records(pipeline):
    _, out = pipeline
    lines = (out / "retrieved.jsonl").read_text().splitlines()
    assert len(lines) == 24 * 6
    for line in lines[:20]:
        rec = json.loads(line)
        assert set(rec) == {"user_id", "target_item_id", "event_time", "strategy",
                            "item_ids", "timestamps", "similarities", "buckets"}
        assert rec["strategy"] == "soft"
        assert len(rec["item_ids"]) <= 5
        assert all(0 <= b < 8 for b in rec["buckets"])


def test_train_checkpoint_and_metrics(pipeline):
    _, out = pipeline
    params = load_params(out / "checkpoint.bin")
    assert params.config.n_buckets == 8
    run = read_checkpoint_header(out / "checkpoint.bin")["run"]
    assert run["strategy"] == "soft" and run["k_ret"] == 5
    assert run["split"]["kind"] == "user"
    assert {"s_min", "s_max", "sample_size", "degenerate"} == set(run["sim_range"])
    history = [json.loads(x) for x in (out / "metrics.jsonl").read_text().splitlines()]
    assert any("eval_gauc" in h for h in history)
    summary = read_json(out / "train.json")
    assert 0.0 <= summary["gauc"] <= 1.0
    assert summary["optimizer_rejected"] == 0
    assert "train_empty_retrievals" in summary


def test_eval_reproduces_training_eval(pipeline):
    _, out = pipeline
    metrics = read_json(out / "eval.json")
    summary = read_json(out / "train.json")
    assert metrics["gauc"] == summary["gauc"]
    assert metrics["loss"] == summary["loss"]
    assert metrics["n_impressions"] == summary["n_impressions"]


def test_bench_reports_both_strategies(pipeline):
    _, out = pipeline
    cost = read_json(out / "cost.json")
    by_strategy = {r["strategy"]: r for r in cost}
    assert set(by_strategy) == {"soft", "hard"}
    for r in cost:
        assert r["n_queries"] == 24 * 6
        assert r["bytes_per_query"] > 0
    assert by_strategy["hard"]["index_bytes"] > 0


def test_analyze_reports(pipeline):
    _, out = pipeline
    gain = read_json(out / "gain.json")
    assert set(gain) == {"semid_level1", "sim_bucket", "difference_nats"}
    assert gain["semid_level1"]["gain_nats"] >= 0.0
    disp = read_json(out / "dispersion.json")
    assert disp["pairing"] == "max"
    assert disp["min_support"] == 5
    assert disp["total_dof"] == sum(b["dof"] for b in disp["buckets"])
    table = (out / "dispersion.txt").read_text()
    assert table.startswith("bucket")
    mi = read_json(out / "mi.json")
    assert [r["k"] for r in mi] == [2, 4]
    sweep = read_json(out / "sweep.json")
    assert [r["n_buckets"] for r in sweep] == [1, 4]
    for name in ("gain", "dispersion", "mi", "sweep"):
        assert (out / f"manifest_analyze_{name}.json").exists()


def test_dependency_errors_name_the_producer(tmp_path, capsys):
    cfg_path = tmp_path / "config.json"
    cfg_path.write_text(json.dumps(CONFIG))
    out = tmp_path / "empty"
    base = ["-c", str(cfg_path), "-o", str(out)]
    assert main(["quantize"] + base) == 2
    assert "`synth`" in capsys.readouterr().err
    assert main(["train"] + base) == 2  # corpus missing reported first
    main(["synth"] + base)
    assert main(["index"] + base) == 2
    assert "`quantize`" in capsys.readouterr().err
    assert main(["eval"] + base) == 2
    err = capsys.readouterr().err
    assert "checkpoint" in err and "`train`" in err


def test_usage_and_config_errors_exit_one(tmp_path, capsys):
    cfg_path = tmp_path / "config.json"
    cfg_path.write_text(json.dumps(CONFIG))
    out = str(tmp_path / "o")
    assert main(["synth", "-c", str(tmp_path / "missing.json"), "-o", out]) == 1
    bad = tmp_path / "bad.json"
    bad.write_text("{nope")
    assert main(["synth", "-c", str(bad), "-o", out]) == 1
    assert "invalid JSON" in capsys.readouterr().err
    wrong = tmp_path / "wrong.json"
    wrong.write_text(json.dumps({"trainer": {}}))
    assert main(["synth", "-c", str(wrong), "-o", out]) == 1
    assert main(["explode", "-c", str(cfg_path), "-o", out]) == 1
    assert main(["synth", "-c", str(cfg_path)]) == 1  # -o missing
    assert main(["analyze", "ctr", "-c", str(cfg_path), "-o", out]) == 1
    assert main(["synth", "-c", str(cfg_path), "-o", out,
                 "--set", "training.epochs=zero"]) == 1


def test_set_overrides_reach_the_pipeline(tmp_path):
    cfg_path = tmp_path / "config.json"
    cfg_path.write_text(json.dumps(CONFIG))
    out = tmp_path / "o"
    assert main(["synth", "-c", str(cfg_path), "-o", str(out),
                 "--set", "corpus.synth.n_users=5",
                 "--set", "corpus.synth.impressions_per_user=2"]) == 0
    corpus = load_corpus(out / "corpus")
    assert len(corpus.sequences) == 5
    assert len(corpus.impressions) == 10
    manifest = read_json(out / "manifest_synth.json")
    assert manifest["config"]["corpus"]["synth"]["n_users"] == 5


def test_explicit_corpus_flag(pipeline, tmp_path):
    cfg_path, out = pipeline
    other = tmp_path / "elsewhere"
    assert main(["quantize", "-c", str(cfg_path), "-o", str(other),
                 "--corpus", str(out / "corpus")]) == 0
    assert (other / "codebooks.bin").read_bytes() == (out / "codebooks.bin").read_bytes()
    assert (other / "semids.jsonl").read_bytes() == (out / "semids.jsonl").read_bytes()


def test_hard_retrieval_needs_index(pipeline, tmp_path, capsys):
    cfg_path, out = pipeline
    other = tmp_path / "hard"
    base = ["-c", str(cfg_path), "-o", str(other), "--corpus", str(out / "corpus"),
            "--codebooks", str(out / "codebooks.bin"),
            "--semids", str(out / "semids.jsonl"),
            "--set", "retrieval.strategy=hard"]
    assert main(["retrieve"] + base) == 2
    assert "`index`" in capsys.readouterr().err
    assert main(["retrieve"] + base + ["--index", str(out / "index.jsonl")]) == 0
    recs = [json.loads(x) for x in (other / "retrieved.jsonl").read_text().splitlines()]
    assert {r["strategy"] for r in recs} <= {"hard", "fallback"}


def test_checkpoint_flag_for_eval(pipeline, tmp_path):
    cfg_path, out = pipeline
    other = tmp_path / "ev"
    assert main(["eval", "-c", str(cfg_path), "-o", str(other),
                 "--corpus", str(out / "corpus"),
                 "--codebooks", str(out / "codebooks.bin"),
                 "--semids", str(out / "semids.jsonl"),
                 "--checkpoint", str(out / "checkpoint.bin")]) == 0
    assert read_json(other / "eval.json") == read_json(out / "eval.json")
