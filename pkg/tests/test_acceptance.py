"""Acceptance suite: one test per exit criterion, at its stated tolerance.

Each test carries the ``acceptance`` marker; the session summary prints one
pass/fail line per criterion (see conftest). Tolerances and runtime bounds
are pinned here, not calibrated elsewhere.
"""

from __future__ import annotations

import json
import random
import time
from pathlib import Path

import pytest

import e2e_scenario
from conftest import image_ref
from halodet.bench import BenchmarkFile, load as load_bench, save as save_bench, stats
from halodet.cli import main
from halodet.errors import ClaimCountMismatch, UnknownLabel, UnparseableModelOutput
from halodet.metrics import (
    MetricLevel,
    RatingsMatrix,
    derive_response_label,
    derive_segment_label,
    fleiss_kappa,
    report,
)
from halodet.model import (
    Claim,
    EvidenceBundle,
    HallucinationCategory,
    ImageTextPair,
    Label,
    NormBox,
    ObjectEvidence,
    SceneTextEvidence,
    TaskType,
)
from halodet.prompts import TemplateId, render, render_claim_list
from halodet.stages import parse_claim_query_map, parse_verdicts
from halodet.tools import format_evidence_sections
from test_metrics import oracle_counts, oracle_fleiss, oracle_prf1
from test_stages import TEMPLATE_EXAMPLE_OUTPUTS, VERIFY_I2T_EXAMPLE, VERIFY_T2I_EXAMPLE

H = Label.HALLUCINATORY
NH = Label.NON_HALLUCINATORY

FIXTURES = Path(__file__).parent / "fixtures"


@pytest.fixture(scope="module")
def scenario_dir(tmp_path_factory) -> Path:
    root = tmp_path_factory.mktemp("acceptance-scenario")
    e2e_scenario.materialize_fixtures(root / "mock")
    return root


def _detect(scenario_dir: Path, out: Path, run_id: str, *extra: str) -> int:
    return main([
        "detect",
        "--bench", str(FIXTURES / "bench6.json"),
        "--backend", "mock",
        "--fixtures", str(scenario_dir / "mock"),
        "--out", str(out),
        "--run-id", run_id,
        "--cache-dir", str(out / "cache"),
        *extra,
    ])


def _pair_payloads(run_dir: Path) -> dict[str, bytes]:
    return {
        p.name: p.read_bytes()
        for p in sorted(run_dir.glob("*.json"))
        if p.name not in ("manifest.json", "errors.json")
    }


@pytest.mark.acceptance(1, "metric arithmetic fidelity")
def test_criterion_1_metric_arithmetic_fidelity():
    started = time.monotonic()
    rows = json.loads((FIXTURES / "reported_scores.json").read_text())["rows"]
    assert len(rows) == 24
    for row in rows:
        h_p, h_r, h_f1, nh_p, nh_r, nh_f1, _acc, avg_p, avg_r, macro = row["scores"]
        for p, r, printed_f1 in ((h_p, h_r, h_f1), (nh_p, nh_r, nh_f1)):
            recomputed = 2 * p * r / (p + r)
            assert abs(recomputed - printed_f1) <= 0.01, row
        assert abs((h_p + nh_p) / 2 - avg_p) <= 0.01, row
        assert abs((h_r + nh_r) / 2 - avg_r) <= 0.01, row
        assert abs((h_f1 + nh_f1) / 2 - macro) <= 0.01, row
    assert time.monotonic() - started < 1.0


@pytest.mark.acceptance(2, "aggregation laws vs oracles")
def test_criterion_2_aggregation_laws():
    started = time.monotonic()
    rng = random.Random(1234)

    # Label aggregation equals the any-of oracle on >= 1000 random cases.
    for _ in range(1000):
        labels = [rng.choice([H, NH]) for _ in range(rng.randint(1, 40))]
        expected = H if any(label is H for label in labels) else NH
        assert derive_segment_label(labels) is expected
        assert derive_response_label(labels) is expected

    # Full report equals a brute-force counting oracle on random vectors.
    for _ in range(1000):
        size = rng.randint(1, 200)
        preds = [rng.choice([H, NH]) for _ in range(size)]
        golds = [rng.choice([H, NH]) for _ in range(size)]
        rep = report(preds, golds, MetricLevel.CLAIM)
        for positive, scores in ((H, rep.hallucinatory), (NH, rep.non_hallucinatory)):
            tp, fp, fn = oracle_counts(preds, golds, positive)
            precision, recall, f1 = oracle_prf1(tp, fp, fn)
            assert abs(scores.precision - precision) < 1e-12
            assert abs(scores.recall - recall) < 1e-12
            assert abs(scores.f1 - f1) < 1e-9
        matches = sum(p is g for p, g in zip(preds, golds))
        assert abs(rep.accuracy - matches / size) < 1e-12
        assert abs(rep.macro_f1 - (rep.hallucinatory.f1 + rep.non_hallucinatory.f1) / 2) < 1e-12
    assert time.monotonic() - started < 10.0


@pytest.mark.acceptance(3, "prompt fidelity to pinned fixtures")
def test_criterion_3_prompt_fidelity():
    def compose(prompt) -> str:
        return f"SYSTEM:\n{prompt.system}\n\nUSER:\n{prompt.user}\n"

    def pinned(name: str) -> str:
        return (FIXTURES / "rendered" / f"{name}.txt").read_text("utf-8")

    # The four query templates over their own worked examples.
    rendered = {
        "query_object": render(TemplateId.OBJECT_QUERY, {"claims": render_claim_list([
            "The image depicts a man laying on the ground.",
            "The man is next to a motorcycle.",
            "The sun is shining upon the ground.",
            "The light is very bright.",
        ])}),
        "query_attribute": render(TemplateId.ATTRIBUTE_QUERY, {
            "objects": "dog.cat",
            "claims": render_claim_list([
                "There is one black dog on the left in the image.",
                "There are two white cats on the right in the image.",
            ]),
        }),
        "query_scene_text": render(TemplateId.SCENE_TEXT_QUERY, {"claims": render_claim_list([
            "There is a black device in the image.",
            "The device is a brand of smartphones produced by Samsung Electronics.",
        ])}),
        "query_fact": render(TemplateId.FACT_QUERY, {"claims": render_claim_list([
            "The image shows a black phone.",
            "This black phone is manufactured by Huawei.",
            "Huawei is a company located in Shenzhen, China.",
        ])}),
    }

    # The two verification templates over their worked evidence blocks.
    beach = EvidenceBundle(objects=tuple(sorted((
        ObjectEvidence("people", NormBox(0.345, 0.424, 0.408, 0.509)),
        ObjectEvidence("people", NormBox(0.197, 0.44, 0.28, 0.514)),
        ObjectEvidence("people", NormBox(0.517, 0.315, 0.561, 0.401)),
        ObjectEvidence("people", NormBox(0.441, 0.356, 0.47, 0.405)),
        ObjectEvidence("chair", NormBox(0.398, 0.595, 0.637, 0.901)),
        ObjectEvidence("chair", NormBox(0.621, 0.592, 0.789, 0.889)),
        ObjectEvidence("umbrella", NormBox(0.501, 0.334, 0.968, 0.88)),
    ), key=lambda e: (e.label, e.box.x1, e.box.y1))))
    bindings = dict(format_evidence_sections(beach))
    bindings["claims"] = render_claim_list([
        "The picture shows five people swimming.",
        "On the beach, there is a chair, a umbrella, and a surfboard.",
        "The green umbrella is on the right side of the chair.",
    ])
    rendered["verify_image_to_text"] = render(TemplateId.VERIFY_IMAGE_TO_TEXT, bindings)

    car = EvidenceBundle(
        objects=(
            ObjectEvidence("basketball", NormBox(0.741, 0.179, 0.848, 0.285)),
            ObjectEvidence("boy", NormBox(0.773, 0.299, 0.98, 0.828)),
            ObjectEvidence("car", NormBox(0.001, 0.304, 0.992, 0.854)),
        ),
        scene_texts=(SceneTextEvidence("worlld", NormBox(0.405, 0.504, 0.726, 0.7)),),
    )
    bindings = dict(format_evidence_sections(car))
    bindings["claims"] = render_claim_list([
        "The side of the car reads 'Hello World'",
        "A boy is playing a yellow basketball beside a plant.",
    ])
    rendered["verify_text_to_image"] = render(TemplateId.VERIFY_TEXT_TO_IMAGE, bindings)

    for name, prompt in rendered.items():
        assert compose(prompt) == pinned(name), f"{name} drifted from its fixture"

    # Claim-list formatting and empty-evidence placement, asserted directly.
    assert rendered["query_object"].user.count("\nclaim1: The image depicts") == 2
    i2t_input = rendered["verify_image_to_text"].user.split("<Input>:")[1]
    assert i2t_input.count("none information") == 3  # attribute, scene text, fact
    assert "people [0.345, 0.424, 0.408, 0.509]" in i2t_input
    t2i_input = rendered["verify_text_to_image"].user.split("<Input>:")[1]
    assert "worlld [0.405, 0.504, 0.726, 0.7]" in t2i_input


@pytest.mark.acceptance(4, "parser totality on template example outputs")
def test_criterion_4_parser_totality():
    # Every example output printed in the query templates parses.
    for raw, n, kind in TEMPLATE_EXAMPLE_OUTPUTS:
        parsed = parse_claim_query_map(raw, n, kind)
        assert set(parsed) == set(range(1, n + 1))

    # Object period-splitting, checked on the first worked output.
    assert parse_claim_query_map(
        '{"claim1":"man","claim2":"man.motorcycle","claim3":"none", "claim4":"none"}',
        4, HallucinationCategory.OBJECT,
    ) == {1: ["man"], 2: ["man", "motorcycle"], 3: [], 4: []}

    # Both verification example outputs parse into full verdict lists.
    i2t = parse_verdicts(VERIFY_I2T_EXAMPLE, 3)
    assert [v.label for v in i2t] == [H, H, NH]
    t2i = parse_verdicts(VERIFY_T2I_EXAMPLE, 2)
    assert [v.label for v in t2i] == [H, H]

    # The three malformed-input error cases fire.
    with pytest.raises(ClaimCountMismatch):
        parse_claim_query_map('{"claim1":["q"]}', 2, list(TEMPLATE_EXAMPLE_OUTPUTS)[0][2])
    with pytest.raises(UnknownLabel):
        parse_verdicts('[{"claim1":"maybe"}]', 1)
    with pytest.raises(UnparseableModelOutput):
        parse_verdicts("not structured output at all", 2)


@pytest.mark.acceptance(5, "end-to-end mock pipeline with pinned verdicts")
def test_criterion_5_end_to_end_mock_pipeline(scenario_dir, tmp_path):
    started = time.monotonic()
    assert _detect(scenario_dir, tmp_path, "accept-e2e") == 0
    elapsed = time.monotonic() - started
    run_dir = tmp_path / "accept-e2e"

    for pair_id, expectations in e2e_scenario.EXPECTED_VERDICTS.items():
        payload = json.loads((run_dir / f"{pair_id}.json").read_text())
        verdicts = payload["verdicts"]
        assert len(verdicts) == len(expectations), pair_id
        for verdict, (label, substring) in zip(verdicts, expectations):
            assert verdict["label"] == label, (pair_id, verdict)
            assert substring in verdict["rationale"], (pair_id, verdict, substring)
        assert payload["degraded"] is False

    beach = json.loads((run_dir / "i2t-beach.json").read_text())
    assert beach["verdicts"][0]["label"] == "hallucinatory"
    assert "identified four people, not five" in beach["verdicts"][0]["rationale"]
    car = json.loads((run_dir / "t2i-car.json").read_text())
    assert car["verdicts"][0]["label"] == "hallucinatory"
    assert "'hello worlld' not 'hello world'" in car["verdicts"][0]["rationale"]

    assert elapsed < 5.0


@pytest.mark.acceptance(6, "determinism and cache soundness")
def test_criterion_6_determinism_and_cache_soundness(scenario_dir, tmp_path):
    payloads = {}
    for width in (1, 4, 8):
        run_id = f"width-{width}"
        assert _detect(scenario_dir, tmp_path, run_id,
                       "--width", str(width), "--no-cache") == 0
        payloads[width] = _pair_payloads(tmp_path / run_id)
    assert payloads[1] == payloads[4] == payloads[8]

    # Cold cached run, then warm: identical bytes, zero backend invocations.
    assert _detect(scenario_dir, tmp_path, "cold", "--width", "4") == 0
    assert _detect(scenario_dir, tmp_path, "warm", "--width", "4") == 0
    cold = _pair_payloads(tmp_path / "cold")
    warm = _pair_payloads(tmp_path / "warm")
    assert cold == warm == payloads[4]

    cold_manifest = json.loads((tmp_path / "cold" / "manifest.json").read_text())
    warm_manifest = json.loads((tmp_path / "warm" / "manifest.json").read_text())
    cold_records = [r for records in cold_manifest["traces"].values() for r in records]
    warm_records = [r for records in warm_manifest["traces"].values() for r in records]
    assert any(not r["cache_hit"] for r in cold_records)
    assert warm_records, "warm run must still trace every stage"
    assert all(r["cache_hit"] for r in warm_records)
    assert len(warm_records) == len(cold_records)


@pytest.mark.acceptance(7, "annotator agreement statistic")
def test_criterion_7_fleiss_kappa():
    unanimous = RatingsMatrix.from_lists([[3, 0], [0, 3], [3, 0], [0, 3]])
    assert fleiss_kappa(unanimous) == 1.0

    worked = RatingsMatrix.from_lists([[2, 1], [2, 1]])
    value = fleiss_kappa(worked)
    assert abs(value - (-0.5)) <= 1e-9
    assert abs(value - oracle_fleiss([[2, 1], [2, 1]], 3)) <= 1e-9

    rng = random.Random(77)
    for _ in range(1000):
        n_items = rng.randint(2, 10)
        n_cats = rng.randint(2, 5)
        n = rng.randint(2, 7)
        rows = []
        for _ in range(n_items):
            row = [0] * n_cats
            for _ in range(n):
                row[rng.randrange(n_cats)] += 1
            rows.append(row)
        value = fleiss_kappa(RatingsMatrix.from_lists(rows))
        assert -1.0 <= value <= 1.0


@pytest.mark.acceptance(8, "corpus statistics at benchmark composition")
def test_criterion_8_corpus_stats(tmp_path):
    def make_pair(pair_id: str, task: TaskType) -> ImageTextPair:
        return ImageTextPair(
            id=pair_id, task=task, image=image_ref(pair_id),
            text=f"synthetic text for {pair_id}",
            claims=(Claim(index=1, text=f"synthetic claim for {pair_id}",
                          gold_label=NH),),
        )

    pairs = (
        [make_pair(f"ic-{i:04d}", TaskType.IMAGE_CAPTIONING) for i in range(200)]
        + [make_pair(f"vqa-{i:04d}", TaskType.VQA) for i in range(200)]
        + [make_pair(f"t2i-{i:04d}", TaskType.TEXT_TO_IMAGE) for i in range(220)]
    )
    bench = BenchmarkFile(version="mhalubench.v1", pairs=tuple(pairs),
                          provenance={"source": "synthetic composition"})
    path = tmp_path / "composition.json"
    save_bench(bench, path)
    corpus = stats(load_bench(path))
    assert corpus.task_counts == {
        "image-captioning": 200, "vqa": 200, "text-to-image": 220,
    }
    assert corpus.n_pairs == 620
