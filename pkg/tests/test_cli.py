import json
import subprocess
import sys

from cirtrain.cli import dispatch


def write_synth_config(tmp_path, **overrides):
    config = dict(
        n_attributes=3, dim=12, n_corpus=40, n_queries=10,
        noise_sigma=0.05, false_negative_rate=0.1, seed=13,
    )
    config.update(overrides)
    path = tmp_path / "synth.json"
    path.write_text(json.dumps(config))
    return path


def synth_dataset(tmp_path, **overrides):
    config = write_synth_config(tmp_path, **overrides)
    out = tmp_path / "data"
    assert dispatch(["synth", "--config", str(config), "--out-dir", str(out)]) == 0
    return out


def dataset_flags(data):
    return [
        "--manifest", str(data / "manifest.jsonl"),
        "--corpus", str(data / "corpus.emb"),
        "--query-img", str(data / "query_img.emb"),
        "--query-txt", str(data / "query_txt.emb"),
    ]


class TestSynthAndValidate:
    def test_synth_then_validate_ok(self, tmp_path, capsys):
        data = synth_dataset(tmp_path)
        assert dispatch(["validate", *dataset_flags(data)]) == 0
        out = capsys.readouterr().out
        assert '"ok": true' in out

    def test_validate_reports_dangling_target(self, tmp_path, capsys):
        data = synth_dataset(tmp_path)
        manifest = data / "manifest.jsonl"
        lines = manifest.read_text().splitlines()
        record = json.loads(lines[0])
        record["target_id"] = "ghost"
        lines[0] = json.dumps(record)
        manifest.write_text("\n".join(lines) + "\n")
        assert dispatch(["validate", *dataset_flags(data)]) == 1
        out = capsys.readouterr().out
        assert "dangling_target" in out

    def test_synth_idempotent(self, tmp_path):
        config = write_synth_config(tmp_path)
        out1, out2 = tmp_path / "d1", tmp_path / "d2"
        dispatch(["synth", "--config", str(config), "--out-dir", str(out1)])
        dispatch(["synth", "--config", str(config), "--out-dir", str(out2)])
        for name in ("corpus.emb", "query_img.emb", "query_txt.emb", "manifest.jsonl", "truth.jsonl"):
            assert (out1 / name).read_bytes() == (out2 / name).read_bytes()


class TestTrainCli:
    def test_train_rank_eval_pipeline(self, tmp_path, capsys):
        data = synth_dataset(tmp_path)
        train_config = tmp_path / "train.json"
        train_config.write_text(json.dumps({"n_epoch": 4, "n_def": 2, "batch_size": 4, "seed": 3}))
        run = tmp_path / "run"
        assert dispatch([
            "train", "--config", str(train_config), *dataset_flags(data),
            "--out-dir", str(run),
        ]) == 0
        assert (run / "checkpoint.ckpt").exists()
        assert (run / "train_log.jsonl").exists()

        rankings = tmp_path / "rank.jsonl"
        assert dispatch([
            "rank", "--checkpoint", str(run / "checkpoint.ckpt"), *dataset_flags(data),
            "--k", "20", "--out", str(rankings),
        ]) == 0
        assert dispatch([
            "eval", "--rankings", str(rankings), "--truth", str(data / "truth.jsonl"),
            "--metrics", "recall@1,recall@10,map@5,recall_subset@1",
            "--subset", str(data / "manifest.jsonl"),
        ]) == 0
        out = capsys.readouterr().out
        report = json.loads(out.strip().splitlines()[-1])
        assert set(report["metrics"]) == {"recall@1", "recall@10", "map@5", "recall_subset@1"}

    def test_invalid_n_def_exits_1_with_json_error(self, tmp_path, capsys):
        data = synth_dataset(tmp_path)
        bad = tmp_path / "bad.json"
        bad.write_text(json.dumps({"n_epoch": 2, "n_def": 5}))
        code = dispatch([
            "train", "--config", str(bad), *dataset_flags(data),
            "--out-dir", str(tmp_path / "r"),
        ])
        assert code == 1
        err = capsys.readouterr().err.strip()
        parsed = json.loads(err)
        assert "n_def" in parsed["message"]

    def test_train_reproducible_across_thread_counts(self, tmp_path):
        data = synth_dataset(tmp_path)
        config = tmp_path / "t.json"
        config.write_text(json.dumps({"n_epoch": 3, "n_def": 1, "batch_size": 4, "seed": 5}))
        r1, r2 = tmp_path / "r1", tmp_path / "r2"
        dispatch(["--threads", "1", "train", "--config", str(config), *dataset_flags(data), "--out-dir", str(r1)])
        dispatch(["--threads", "4", "train", "--config", str(config), *dataset_flags(data), "--out-dir", str(r2)])
        assert (r1 / "train_log.jsonl").read_bytes() == (r2 / "train_log.jsonl").read_bytes()
        assert (r1 / "checkpoint.ckpt").read_bytes() == (r2 / "checkpoint.ckpt").read_bytes()

    def test_toml_config(self, tmp_path):
        data = synth_dataset(tmp_path)
        config = tmp_path / "t.toml"
        config.write_text('n_epoch = 2\nn_def = 1\nbatch_size = 4\nseed = 9\n')
        assert dispatch([
            "train", "--config", str(config), *dataset_flags(data),
            "--out-dir", str(tmp_path / "rt"),
        ]) == 0

    def test_flag_overrides_config_file(self, tmp_path, capsys):
        data = synth_dataset(tmp_path)
        config = tmp_path / "t.json"
        config.write_text(json.dumps({"n_epoch": 2, "n_def": 1, "batch_size": 4, "seed": 1}))
        capsys.readouterr()  # drain synth output
        dispatch([
            "train", "--config", str(config), *dataset_flags(data),
            "--out-dir", str(tmp_path / "ro"), "--n-epoch", "3", "--seed", "77",
        ])
        first = json.loads(capsys.readouterr().out.strip().splitlines()[0])
        assert first["effective_config"]["n_epoch"] == 3
        assert first["effective_config"]["seed"] == 77


class TestMineCli:
    def test_mine_writes_sets_and_stats(self, tmp_path):
        data = synth_dataset(tmp_path)
        out = tmp_path / "mined.jsonl"
        assert dispatch([
            "mine", *dataset_flags(data), "--strategy", "two-drops",
            "--epoch", "1", "--out", str(out),
        ]) == 0
        lines = out.read_text().splitlines()
        assert len(lines) == 11  # 10 queries + stats trailer
        stats = json.loads(lines[-1])["miner_stats"]
        assert stats["query_count"] == 10
        first = json.loads(lines[0])
        assert set(first) == {"query_id", "negative_ids", "strategy", "epoch"}

    def test_mine_epoch_zero_is_warm_up(self, tmp_path):
        data = synth_dataset(tmp_path)
        out = tmp_path / "warm.jsonl"
        dispatch(["mine", *dataset_flags(data), "--strategy", "two-drops", "--epoch", "0", "--out", str(out)])
        stats = json.loads(out.read_text().splitlines()[-1])["miner_stats"]
        assert stats["strategy"] == "all"
        assert stats["mean_size"] == 39.0


class TestPrefrateCli:
    def test_prefrate_end_to_end(self, tmp_path, capsys):
        data = synth_dataset(tmp_path)
        rankings = tmp_path / "rank.jsonl"
        dispatch(["rank", *dataset_flags(data), "--k", "10", "--out", str(rankings)])
        records = tmp_path / "prefs.jsonl"
        with open(records, "w") as fh:
            for line in rankings.read_text().splitlines():
                r = json.loads(line)
                fh.write(json.dumps({
                    "query_id": r["query_id"], "set1_ids": r["ids"][:5],
                    "set2_ids": r["ids"][5:10], "choice": "set1",
                }) + "\n")
        assert dispatch([
            "prefrate", "--records", str(records), "--corpus", str(data / "corpus.emb"),
            "--queries", str(data),
        ]) == 0
        out = capsys.readouterr().out
        result = json.loads(out.strip().splitlines()[-1])
        assert result["preference_rate"] == 100.0  # top-5 always outscores ranks 6-10


class TestEvalHandCase:
    def test_eval_prints_8333_for_derived_map_example(self, tmp_path, capsys):
        rankings = tmp_path / "r.jsonl"
        rankings.write_text(
            json.dumps(
                {"query_id": "q1", "ids": ["a", "x", "b", "y", "z"],
                 "scores": [5.0, 4.0, 3.0, 2.0, 1.0]}
            )
            + "\n"
        )
        truth = tmp_path / "t.jsonl"
        truth.write_text(json.dumps({"query_id": "q1", "relevant_ids": ["a", "b"]}) + "\n")
        assert dispatch([
            "eval", "--rankings", str(rankings), "--truth", str(truth),
            "--metrics", "map@5",
        ]) == 0
        out = capsys.readouterr().out
        assert "83.33" in out
        report = json.loads(out.strip().splitlines()[-1])
        assert report["metrics"]["map@5"] == 83.33


class TestDispatchBasics:
    def test_no_command_prints_usage(self, capsys):
        assert dispatch([]) == 1

    def test_unknown_metric_is_validation_error(self, tmp_path, capsys):
        data = synth_dataset(tmp_path)
        rankings = tmp_path / "rank.jsonl"
        dispatch(["rank", *dataset_flags(data), "--out", str(rankings)])
        code = dispatch([
            "eval", "--rankings", str(rankings), "--truth", str(data / "truth.jsonl"),
            "--metrics", "ndcg@10",
        ])
        assert code == 1

    def test_missing_file_is_validation_error(self, tmp_path, capsys):
        code = dispatch([
            "validate",
            "--manifest", str(tmp_path / "none.jsonl"),
            "--corpus", str(tmp_path / "none.emb"),
            "--query-img", str(tmp_path / "none.emb"),
            "--query-txt", str(tmp_path / "none.emb"),
        ])
        assert code == 1
        err = capsys.readouterr().err
        json.loads(err.strip())

    def test_console_script_runs(self):
        proc = subprocess.run(
            [sys.executable, "-m", "cirtrain.cli", "--help"],
            capture_output=True, text=True,
        )
        assert proc.returncode == 0
        assert "synth" in proc.stdout

    def test_global_flags_after_subcommand(self, tmp_path):
        data = synth_dataset(tmp_path)
        out = tmp_path / "m.jsonl"
        assert dispatch([
            "mine", *dataset_flags(data), "--epoch", "1", "--out", str(out),
            "--threads", "2",
        ]) == 0
