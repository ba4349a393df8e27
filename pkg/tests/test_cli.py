"""CLI contract: commands, exit codes, machine-readable errors, determinism."""

from __future__ import annotations

import json
from pathlib import Path

import pytest

import e2e_scenario
from halodet.cli import main

FIXTURES = Path(__file__).parent / "fixtures"


@pytest.fixture(scope="module")
def scenario_dir(tmp_path_factory) -> Path:
    root = tmp_path_factory.mktemp("scenario")
    e2e_scenario.materialize_fixtures(root / "mock")
    return root


def _detect_args(scenario_dir: Path, out: Path, run_id: str, *extra: str) -> list[str]:
    return [
        "detect",
        "--bench", str(FIXTURES / "bench6.json"),
        "--backend", "mock",
        "--fixtures", str(scenario_dir / "mock"),
        "--out", str(out),
        "--run-id", run_id,
        "--cache-dir", str(out / "cache"),
        *extra,
    ]


class TestDetect:
    def test_full_mock_run_exits_zero(self, scenario_dir, tmp_path, capsys):
        code = main(_detect_args(scenario_dir, tmp_path, "r1"))
        assert code == 0
        out = capsys.readouterr().out
        assert "6 pairs ok, 0 failed" in out
        names = sorted(p.name for p in (tmp_path / "r1").iterdir())
        assert "manifest.json" in names and "errors.json" in names
        assert sum(1 for n in names if n not in ("manifest.json", "errors.json")) == 6

    def test_missing_bench_is_config_error(self, scenario_dir, tmp_path, capsys):
        code = main([
            "detect", "--backend", "mock",
            "--fixtures", str(scenario_dir / "mock"),
            "--out", str(tmp_path), "--run-id", "x",
        ])
        assert code == 1
        error = json.loads(capsys.readouterr().err.splitlines()[0])
        assert "bench" in error["message"]

    def test_selfcheck2_without_demos(self, scenario_dir, tmp_path, capsys):
        code = main(_detect_args(scenario_dir, tmp_path, "x",
                                 "--method", "selfcheck2"))
        assert code == 1
        error = json.loads(capsys.readouterr().err.splitlines()[0])
        assert error["error"] == "MissingDemonstrations"

    def test_single_pair_input_without_gold_labels(self, scenario_dir, tmp_path):
        bench = json.loads((FIXTURES / "bench6.json").read_text())
        pair = bench["pairs"][1]  # the athlete pair
        for claim in pair["claims"]:
            claim.pop("gold_label", None)
            claim.pop("gold_categories", None)
        single = tmp_path / "single-pair.json"
        single.write_text(json.dumps(pair))
        code = main([
            "detect", "--bench", str(single),
            "--backend", "mock", "--fixtures", str(scenario_dir / "mock"),
            "--out", str(tmp_path), "--run-id", "single",
            "--cache-dir", str(tmp_path / "cache"),
        ])
        assert code == 0
        payload = json.loads((tmp_path / "single" / "i2t-athlete.json").read_text())
        assert payload["verdicts"][0]["label"] == "hallucinatory"

    def test_selfcheck2_with_demos(self, scenario_dir, tmp_path, capsys):
        code = main(_detect_args(
            scenario_dir, tmp_path, "sc2", "--method", "selfcheck2",
            "--demos", str(FIXTURES / "demos.json")))
        assert code == 0

    def test_duplicate_run_id_rejected(self, scenario_dir, tmp_path, capsys):
        assert main(_detect_args(scenario_dir, tmp_path, "dup")) == 0
        code = main(_detect_args(scenario_dir, tmp_path, "dup"))
        assert code == 1
        error = json.loads(capsys.readouterr().err.splitlines()[-1])
        assert "already exists" in error["message"]

    def test_no_cache_matches_cached_run(self, scenario_dir, tmp_path):
        assert main(_detect_args(scenario_dir, tmp_path, "cached")) == 0
        assert main(_detect_args(scenario_dir, tmp_path, "plain", "--no-cache")) == 0
        for name in ("i2t-beach.json", "t2i-car.json", "t2i-eiffel.json"):
            cached = (tmp_path / "cached" / name).read_bytes()
            plain = (tmp_path / "plain" / name).read_bytes()
            assert cached == plain

    def test_partial_failure_exit_code(self, scenario_dir, tmp_path, capsys):
        # Remove one pair's verify fixture: that pair degrades (unverified)
        # but still succeeds; removing its formulation fixtures forces a
        # real failure.
        import shutil

        broken = tmp_path / "broken-fixtures"
        shutil.copytree(scenario_dir / "mock", broken)
        removed = 0
        for path in (broken / "model").glob("*.json"):
            payload = json.loads(path.read_text())
            if payload["note"].startswith("i2t-huawei query-formulate"):
                path.unlink()
                removed += 1
        assert removed == 4
        code = main([
            "detect", "--bench", str(FIXTURES / "bench6.json"),
            "--backend", "mock", "--fixtures", str(broken),
            "--out", str(tmp_path), "--run-id", "partial",
            "--cache-dir", str(tmp_path / "cache2"), "--no-cache",
        ])
        assert code == 2
        err_lines = capsys.readouterr().err.splitlines()
        errors = [json.loads(line) for line in err_lines]
        assert any(e.get("pair_id") == "i2t-huawei" for e in errors)
        written = json.loads((tmp_path / "partial" / "errors.json").read_text())
        assert [e["pair_id"] for e in written] == ["i2t-huawei"]
        assert (tmp_path / "partial" / "i2t-beach.json").exists()


@pytest.fixture(scope="module")
def run_dir(scenario_dir, tmp_path_factory) -> Path:
    out = tmp_path_factory.mktemp("runs")
    assert main(_detect_args(scenario_dir, out, "eval-run")) == 0
    return out / "eval-run"


class TestEvaluate:

    def test_table_output_all_perfect(self, run_dir, capsys):
        code = main([
            "evaluate", "--bench", str(FIXTURES / "bench6.json"),
            "--results", str(run_dir),
        ])
        assert code == 0
        out = capsys.readouterr().out
        assert "Mac.F1" in out
        assert "100.00" in out
        assert "per-category recall" in out

    def test_json_output(self, run_dir, capsys):
        code = main([
            "evaluate", "--bench", str(FIXTURES / "bench6.json"),
            "--results", str(run_dir), "--format", "json",
        ])
        assert code == 0
        payload = json.loads(capsys.readouterr().out)
        levels = [rep["level"] for rep in payload["reports"]]
        assert levels == ["claim", "segment", "response"]
        assert payload["reports"][0]["macro_f1"] == 100.0
        assert payload["category_recall"] == {
            "attribute": 100.0, "fact": 100.0, "object": 100.0, "scene-text": 100.0,
        }

    def test_csv_output_to_file(self, run_dir, tmp_path, capsys):
        target = tmp_path / "report.csv"
        code = main([
            "evaluate", "--bench", str(FIXTURES / "bench6.json"),
            "--results", str(run_dir), "--format", "csv", "--out", str(target),
        ])
        assert code == 0
        assert target.read_text().startswith("level,h_precision")

    def test_misaligned_results_exit_one(self, run_dir, tmp_path, capsys):
        import shutil

        clipped = tmp_path / "clipped"
        shutil.copytree(run_dir, clipped)
        (clipped / "i2t-beach.json").unlink()
        code = main([
            "evaluate", "--bench", str(FIXTURES / "bench6.json"),
            "--results", str(clipped),
        ])
        assert code == 1
        error = json.loads(capsys.readouterr().err.splitlines()[0])
        assert error["error"] == "MissingPrediction"


class TestStatsAndCache:
    def test_stats_text_and_json(self, capsys):
        assert main(["stats", "--bench", str(FIXTURES / "bench6.json")]) == 0
        text = capsys.readouterr().out
        assert "pairs: 6" in text
        assert main(["stats", "--bench", str(FIXTURES / "bench6.json"),
                     "--format", "json"]) == 0
        payload = json.loads(capsys.readouterr().out)
        assert payload["task_counts"] == {
            "image-captioning": 2, "vqa": 1, "text-to-image": 3,
        }

    def test_cache_stat_counts_entries_after_run(self, scenario_dir, tmp_path, capsys):
        assert main(_detect_args(scenario_dir, tmp_path, "cache-run")) == 0
        capsys.readouterr()
        assert main(["cache", "stat", "--cache-dir", str(tmp_path / "cache")]) == 0
        stat = json.loads(capsys.readouterr().out)
        manifest = json.loads((tmp_path / "cache-run" / "manifest.json").read_text())
        backend_calls = sum(
            1 for records in manifest["traces"].values()
            for record in records if not record["cache_hit"]
        )
        assert stat["entries"] == backend_calls
        assert stat["misses"] >= stat["entries"]

    def test_cache_clear(self, scenario_dir, tmp_path, capsys):
        assert main(_detect_args(scenario_dir, tmp_path, "clear-run")) == 0
        capsys.readouterr()
        assert main(["cache", "clear", "--cache-dir", str(tmp_path / "cache")]) == 0
        assert main(["cache", "stat", "--cache-dir", str(tmp_path / "cache")]) == 0
        lines = capsys.readouterr().out
        stat = json.loads(lines[lines.index("{"):])
        assert stat["entries"] == 0


class TestHelp:
    def test_detect_help_documents_every_flag(self, capsys):
        from halodet.cli import build_parser

        with pytest.raises(SystemExit) as exc_info:
            build_parser().parse_args(["detect", "--help"])
        assert exc_info.value.code == 0
        text = capsys.readouterr().out
        for flag in ("--bench", "--method", "--backend", "--fixtures", "--out",
                     "--run-id", "--width", "--no-cache", "--cache-dir",
                     "--fact-top-k", "--demos", "--request-log", "--config"):
            assert flag in text, flag

    def test_top_level_help_lists_commands(self, capsys):
        from halodet.cli import build_parser

        with pytest.raises(SystemExit):
            build_parser().parse_args(["--help"])
        text = capsys.readouterr().out
        for command in ("detect", "evaluate", "stats", "cache"):
            assert command in text


class TestSelfCheckZeroShot:
    def test_cli_run_and_evaluate(self, scenario_dir, tmp_path, capsys):
        assert main(_detect_args(scenario_dir, tmp_path, "sc0",
                                 "--method", "selfcheck0")) == 0
        payload = json.loads((tmp_path / "sc0" / "i2t-beach.json").read_text())
        assert payload["method"] == "selfcheck0"
        assert payload["plan"] is None
        assert payload["evidence"] == {
            "objects": [], "attributes": [], "scene_texts": [], "facts": [],
        }


class TestScenarioFixturesStayInSync:
    def test_committed_bench_matches_scenario(self):
        from halodet.bench import load

        committed = load(FIXTURES / "bench6.json")
        assert committed == e2e_scenario.build_benchmark()

    def test_committed_demos_match_scenario(self):
        committed = json.loads((FIXTURES / "demos.json").read_text())
        assert committed == e2e_scenario.demos_json()
