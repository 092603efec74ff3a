from __future__ import annotations

import random
from datetime import date

import pytest
from hypothesis import given
from hypothesis import strategies as st

from counterprobe.errors import (
    DuplicateVersionError,
    EmptyPopulationError,
    SpoliationSignal,
    UnknownVersionError,
)
from counterprobe.host import (
    JitterModel,
    Label,
    LinearModel,
    ModelRegistry,
    ReferencePopulation,
    ThresholdPolicy,
    VersionResolution,
    percentile_of,
)
from counterprobe.records import Domain, FeatureRecord
from tests.conftest import T0


def brute_percentile(score, scores):
    """Independent oracle: linear scan, strictly-below rank fraction."""
    below = sum(1 for s in scores if s < score)
    return 100.0 * below / len(scores)


def population(scores, pid="pop"):
    return ReferencePopulation(pid, scores, T0)


def record(features, domain=Domain.EMPLOYMENT, rid="r1"):
    return FeatureRecord(rid, domain, features)


# -- registration ------------------------------------------------------------


def test_fixture_registration_resolves(maria, registry):
    assert maria.version_id == "maria-screen@1"
    assert registry.get("maria-screen@1").retained is True
    assert registry.get("maria-screen@1").threshold_policy.decision_threshold == 0.60


def test_register_linear_with_singleton_population(registry):
    vid = registry.register_version(
        LinearModel(0.5),
        version_id="lin@1",
        model_name="lin",
        policy=ThresholdPolicy(0.5),
        population=population([0.5]),
    )
    out = registry.evaluate(vid, record({"a": 1}))
    assert out.percentile == 0.0  # ties rank below under the strict rule


def test_duplicate_version_id_rejected(registry, maria):
    with pytest.raises(DuplicateVersionError):
        registry.register_version(
            LinearModel(0.5),
            version_id="maria-screen@1",
            model_name="maria-screen",
            policy=ThresholdPolicy(0.5),
            population=population([0.5]),
        )


def test_empty_population_rejected():
    with pytest.raises(EmptyPopulationError):
        population([])


def test_threshold_must_be_interior():
    with pytest.raises(ValueError):
        ThresholdPolicy(1.0)
    with pytest.raises(ValueError):
        ThresholdPolicy(0.0)


# -- evaluation ---------------------------------------------------------------


def test_maria_baseline_and_shift(maria, registry):
    baseline = registry.evaluate(maria.version_id, maria.baseline_record)
    assert baseline.score == 0.42
    assert baseline.label is Label.REJECT
    shifted = registry.evaluate(
        maria.version_id, maria.baseline_record.with_feature("grad_year", 2011)
    )
    assert shifted.score == 0.71
    assert shifted.label is Label.ACCEPT


def test_unknown_version(registry):
    with pytest.raises(UnknownVersionError):
        registry.evaluate("ghost@9", record({"a": 1}))


def test_zero_weight_linear_scores_base_everywhere(registry):
    vid = registry.register_version(
        LinearModel(0.37, {"x": 0.0, "y": 0.0}),
        version_id="flat@1",
        model_name="flat",
        policy=ThresholdPolicy(0.5),
        population=population([0.1, 0.9]),
    )
    rng = random.Random(7)
    for i in range(25):
        rec = record({"x": rng.uniform(-50, 50), "y": rng.uniform(-50, 50), "note": "n"})
        assert registry.evaluate(vid, rec).score == pytest.approx(0.37, abs=1e-12)


def test_linear_uses_year_of_date_values(registry):
    vid = registry.register_version(
        LinearModel(0.5, {"grad": {"weight": 0.1, "center": 2000}}),
        version_id="dated@1",
        model_name="dated",
        policy=ThresholdPolicy(0.5),
        population=population([0.5]),
    )
    as_int = registry.evaluate(vid, record({"grad": 2010}))
    as_date = registry.evaluate(vid, record({"grad": date(2010, 6, 1)}))
    assert as_int.score == as_date.score


def test_evaluate_deterministic_for_fixture(maria, registry):
    a = registry.evaluate(maria.version_id, maria.baseline_record)
    b = registry.evaluate(maria.version_id, maria.baseline_record)
    assert (a.score, a.confidence, a.percentile, a.label) == (
        b.score,
        b.confidence,
        b.percentile,
        b.label,
    )


def test_threshold_consistency_over_random_records(registry):
    vid = registry.register_version(
        LinearModel(0.5, {"x": 1.5}),
        version_id="sig@1",
        model_name="sig",
        policy=ThresholdPolicy(0.62),
        population=population([i / 10 for i in range(1, 10)]),
    )
    rng = random.Random(3)
    for _ in range(200):
        out = registry.evaluate(vid, record({"x": rng.uniform(-3, 3)}))
        assert (out.label is Label.ACCEPT) == (out.score >= 0.62)


def test_outcome_discloses_nothing_beyond_schema(maria, registry):
    out = registry.evaluate(maria.version_id, maria.baseline_record)
    assert set(out.to_json()) == {
        "score",
        "confidence",
        "percentile",
        "label",
        "model_version",
        "evaluated_at",
    }


def test_degenerate_interval_for_deterministic_models(maria, registry):
    out = registry.evaluate(maria.version_id, maria.baseline_record)
    assert out.confidence == (out.score, out.score)


def test_replicated_model_reports_min_max_interval(registry):
    vid = registry.register_version(
        JitterModel(LinearModel(0.5), spread=0.05, replicates=5),
        version_id="noisy@1",
        model_name="noisy",
        policy=ThresholdPolicy(0.5),
        population=population([i / 100 for i in range(1, 100)]),
    )
    out = registry.evaluate(vid, record({"x": 1}))
    lo, hi = out.confidence
    assert lo <= out.score <= hi
    assert hi > lo  # five jittered replicates cannot all coincide here


# -- version resolution --------------------------------------------------------


def test_resolution_same_version(maria, registry, maria_decision):
    assert registry.resolve_decision_version(maria_decision) is VersionResolution.SAME_VERSION


def test_resolution_updated_original_retained(maria, registry, maria_decision, clock):
    clock.advance(days=1)
    registry.register_version(
        LinearModel(0.5),
        version_id="maria-screen@2",
        model_name="maria-screen",
        policy=ThresholdPolicy(0.6),
        population=population([0.5]),
    )
    assert (
        registry.resolve_decision_version(maria_decision)
        is VersionResolution.UPDATED_ORIGINAL_RETAINED
    )
    # tests still run against the pinned original
    assert registry.evaluate(maria_decision.model_version, maria_decision.record).score == 0.42


def test_resolution_original_not_retained(maria, registry, maria_decision):
    registry.purge_version(maria.version_id)
    assert (
        registry.resolve_decision_version(maria_decision)
        is VersionResolution.ORIGINAL_NOT_RETAINED
    )


def test_unretained_version_refuses_evaluation(maria, registry):
    registry.mark_unretained(maria.version_id)
    with pytest.raises(SpoliationSignal):
        registry.evaluate(maria.version_id, maria.baseline_record)


# -- percentiles -----------------------------------------------------------------


def test_percentile_example_against_oracle():
    scores = [0.1, 0.2, 0.3]
    expected = brute_percentile(0.25, scores)  # oracle first: 2/3 of 100
    assert expected == pytest.approx(66.66666666666667)
    assert percentile_of(0.25, population(scores)) == expected


def test_percentile_below_everything_is_zero():
    assert percentile_of(0.01, population([0.5, 0.6, 0.7])) == 0.0


def test_percentile_tie_ranks_below():
    assert percentile_of(0.5, population([0.5])) == 0.0


@given(
    st.lists(st.floats(min_value=0, max_value=1, allow_nan=False), min_size=1, max_size=60),
    st.floats(min_value=0, max_value=1, allow_nan=False),
)
def test_percentile_matches_oracle(scores, probe):
    assert percentile_of(probe, population(scores)) == brute_percentile(probe, scores)


@given(
    st.lists(st.floats(min_value=0, max_value=1, allow_nan=False), min_size=1, max_size=40),
    st.floats(min_value=0, max_value=1, allow_nan=False),
    st.floats(min_value=0, max_value=1, allow_nan=False),
)
def test_percentile_monotone_in_score(scores, a, b):
    lo, hi = sorted((a, b))
    pop = population(scores)
    assert percentile_of(lo, pop) <= percentile_of(hi, pop)


# -- descriptor files -------------------------------------------------------------


def test_descriptor_file_roundtrip(tmp_path, clock):
    (tmp_path / "pop.txt").write_text("0.25\n0.50\n0.75\n", encoding="utf-8")
    (tmp_path / "model.yaml").write_text(
        "\n".join(
            [
                "version_id: file-model@1",
                "model_name: file-model",
                "domain: credit",
                "kind: linear",
                "threshold: 0.5",
                "population_file: pop.txt",
                "linear:",
                "  base_score: 0.6",
                "  weights:",
                "    income_score: 0.5",
            ]
        ),
        encoding="utf-8",
    )
    registry = ModelRegistry(clock=clock)
    vid = registry.register_from_descriptor(tmp_path / "model.yaml")
    out = registry.evaluate(vid, FeatureRecord("r", Domain.CREDIT, {"income_score": 0.0}))
    assert out.score == pytest.approx(0.6, abs=1e-12)
    assert out.percentile == brute_percentile(out.score, [0.25, 0.5, 0.75])
