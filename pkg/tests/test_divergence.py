from __future__ import annotations

import json
import random
from pathlib import Path
from types import SimpleNamespace

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from counterprobe.divergence import (
    SHIFT_THRESHOLD_RANGES,
    Criterion,
    Direction,
    DivergenceConfig,
    QueryResult,
    assess_pattern,
    assess_single,
    compile_report,
    estimate_noise_floor,
)
from counterprobe.errors import (
    InsufficientReplicatesError,
    UnresolvableClassError,
    VersionMismatchError,
)
from counterprobe.host import (
    Label,
    LinearModel,
    ReferencePopulation,
    ScoreOutcome,
    ThresholdPolicy,
)
from counterprobe.perturbations import InstanceStatus, PerturbationInstance
from counterprobe.records import Domain, FeatureRecord
from tests.conftest import T0

V = "model@1"


def outcome(score, percentile, label, version=V):
    return ScoreOutcome(
        score=score,
        confidence=(score, score),
        percentile=percentile,
        label=label,
        model_version=version,
        evaluated_at=T0,
    )


def cfg(**overrides):
    base = dict(decision_threshold=0.60, threshold_percentile=60.0)
    base.update(overrides)
    return DivergenceConfig(**base)


def instance(n, class_id="emp-date-reformat", field="grad_year", sub=None):
    return PerturbationInstance(
        instance_id=f"i{n}",
        class_id=class_id,
        field=field,
        original_value=2000,
        substituted_value=sub if sub is not None else 2000 + n + 1,
    )


# -- criteria 1-3 -----------------------------------------------------------------


def test_outcome_crossing_fires_on_label_flip():
    findings = assess_single(
        outcome(0.42, 42.0, Label.REJECT), outcome(0.71, 71.0, Label.ACCEPT), cfg()
    )
    crossing = [f for f in findings if f.criterion is Criterion.OUTCOME_CROSSING]
    assert len(crossing) == 1
    assert crossing[0].magnitude == 0.29
    assert crossing[0].direction is Direction.TOWARD_ACCEPT


def test_percentile_shift_23_to_41():
    findings = assess_single(
        outcome(0.30, 23.0, Label.REJECT), outcome(0.45, 41.0, Label.REJECT), cfg()
    )
    assert [f.criterion for f in findings] == [Criterion.PERCENTILE_SHIFT]
    assert findings[0].magnitude == 18.0
    assert findings[0].direction is Direction.TOWARD_ACCEPT


def test_threshold_proximate_56_to_48():
    findings = assess_single(
        outcome(0.55, 56.0, Label.REJECT), outcome(0.49, 48.0, Label.REJECT), cfg()
    )
    assert [f.criterion for f in findings] == [Criterion.THRESHOLD_PROXIMATE]
    assert findings[0].magnitude == 8.0
    assert findings[0].direction is Direction.TOWARD_REJECT


def test_boundary_deltas_fire_nothing():
    # thresholds are strict: a 15-point shift and a 5-point proximate shift
    # both sit exactly on the line and create no grounds
    at_fifteen = assess_single(
        outcome(0.30, 23.0, Label.REJECT), outcome(0.40, 38.0, Label.REJECT), cfg()
    )
    assert at_fifteen == []
    at_five = assess_single(
        outcome(0.55, 56.0, Label.REJECT), outcome(0.52, 51.0, Label.REJECT), cfg()
    )
    assert at_five == []


def test_identity_perturbation_yields_no_findings():
    same = outcome(0.42, 42.0, Label.REJECT)
    assert assess_single(same, same, cfg()) == []


def test_shift_suppresses_proximate_for_same_pair():
    findings = assess_single(
        outcome(0.55, 56.0, Label.REJECT), outcome(0.30, 36.0, Label.REJECT), cfg()
    )
    kinds = [f.criterion for f in findings]
    assert Criterion.PERCENTILE_SHIFT in kinds
    assert Criterion.THRESHOLD_PROXIMATE not in kinds


def test_outside_window_no_proximate():
    findings = assess_single(
        outcome(0.20, 20.0, Label.REJECT), outcome(0.28, 28.0, Label.REJECT), cfg()
    )
    assert findings == []


def test_crossing_ignores_percentile_fields():
    # corrupted, identical percentiles: label flip must still be seen
    findings = assess_single(
        outcome(0.42, 0.0, Label.REJECT), outcome(0.71, 0.0, Label.ACCEPT), cfg()
    )
    assert [f.criterion for f in findings] == [Criterion.OUTCOME_CROSSING]


def test_version_mismatch_rejected():
    with pytest.raises(VersionMismatchError):
        assess_single(
            outcome(0.4, 40.0, Label.REJECT),
            outcome(0.5, 50.0, Label.REJECT, version="other@2"),
            cfg(),
        )


@settings(max_examples=120)
@given(
    st.floats(min_value=0, max_value=100, allow_nan=False),
    st.floats(min_value=0, max_value=100, allow_nan=False),
    st.floats(min_value=0, max_value=100, allow_nan=False),
)
def test_monotone_triggering(p0, d_small, d_big):
    lo, hi = sorted((d_small, d_big))
    c = cfg()

    def fires(delta):
        p1 = min(100.0, p0 + delta)
        found = assess_single(
            outcome(0.3, p0, Label.REJECT), outcome(0.3, p1, Label.REJECT), c
        )
        return {f.criterion for f in found}

    small, big = fires(lo), fires(hi)
    for criterion in (Criterion.PERCENTILE_SHIFT, Criterion.THRESHOLD_PROXIMATE):
        if criterion in small:
            # increasing the delta may upgrade proximate to full shift but
            # never un-fires both percentile criteria
            assert big & {Criterion.PERCENTILE_SHIFT, Criterion.THRESHOLD_PROXIMATE}


def test_sensitivity_rises_as_threshold_drops():
    deltas = [i * 30.0 / 400.0 for i in range(401)]  # uniform grid over [0, 30]

    def trigger_fraction(threshold):
        c = cfg(percentile_shift_threshold=threshold)
        fired = 0
        for d in deltas:
            found = assess_single(
                outcome(0.3, 40.0, Label.REJECT),
                outcome(0.3, min(100.0, 40.0 + d), Label.REJECT),
                c,
            )
            fired += any(f.criterion is Criterion.PERCENTILE_SHIFT for f in found)
        return fired / len(deltas)

    assert trigger_fraction(10.0) > trigger_fraction(20.0)


def test_domain_calibration_ranges_exposed():
    assert SHIFT_THRESHOLD_RANGES["employment"] == (10.0, 12.0)
    assert SHIFT_THRESHOLD_RANGES["content_moderation"] == (18.0, 20.0)


def test_config_invariants():
    with pytest.raises(ValueError):
        cfg(proximate_shift_threshold=15.0)  # must stay below the full threshold
    with pytest.raises(ValueError):
        cfg(pattern_min_count=1)
    with pytest.raises(ValueError):
        cfg(noise_floor_percentile=-1)


# -- criterion 4 -------------------------------------------------------------------


def age_proxy_results(registry_models, perturbations):
    """Three date-class perturbations against a linear model with a
    negative age-proxy weight; deltas come from direct evaluation."""
    population = ReferencePopulation("grid", [(2 * i + 1) / 200 for i in range(100)], T0)
    vid = registry_models.register_version(
        LinearModel(0.5, {"grad_year": {"weight": -0.04, "center": 2000}}),
        version_id="age-proxy@1",
        model_name="age-proxy",
        policy=ThresholdPolicy(0.6),
        population=population,
    )
    base = FeatureRecord("r", Domain.EMPLOYMENT, {"grad_year": 2000})
    baseline = registry_models.evaluate(vid, base)
    results = []
    for n, year in enumerate((2010, 2015, 2020)):
        inst = PerturbationInstance(
            f"age{n}", "emp-date-reformat", "grad_year", 2000, year
        )
        perturbed = registry_models.evaluate(vid, base.with_feature("grad_year", year))
        results.append(QueryResult(instance=inst, baseline=baseline, perturbed=perturbed))
    return results


def test_pattern_fires_for_three_consistent_date_shifts(registry, perturbations):
    results = age_proxy_results(registry, perturbations)
    # frozen from the direct-evaluation oracle above
    assert [r.percentile_delta for r in results] == [-10.0, -15.0, -19.0]
    findings = assess_pattern(results, perturbations, cfg())
    assert len(findings) == 1
    finding = findings[0]
    assert finding.criterion is Criterion.PATTERN_CONSISTENT
    assert finding.direction is Direction.TOWARD_REJECT
    assert finding.group_kind == "date"
    assert finding.magnitude == pytest.approx(44.0 / 3.0)
    assert len(finding.supporting_results) == 3


def test_pattern_needs_minimum_count(registry, perturbations):
    results = age_proxy_results(registry, perturbations)[:2]
    assert assess_pattern(results, perturbations, cfg()) == []


def test_pattern_rejects_mixed_signs(perturbations):
    def qr(n, delta):
        return QueryResult(
            instance=instance(n),
            baseline=outcome(0.5, 50.0, Label.REJECT),
            perturbed=outcome(0.5, 50.0 + delta, Label.REJECT),
        )

    results = [qr(0, -9.0), qr(1, +7.0), qr(2, -8.0)]
    assert assess_pattern(results, perturbations, cfg()) == []


def test_pattern_order_invariant(registry, perturbations):
    results = age_proxy_results(registry, perturbations)
    reference = assess_pattern(results, perturbations, cfg())
    rng = random.Random(11)
    for _ in range(100):
        shuffled = list(results)
        rng.shuffle(shuffled)
        assert assess_pattern(shuffled, perturbations, cfg()) == reference


def test_pattern_applies_noise_floor(perturbations):
    def qr(n, delta):
        return QueryResult(
            instance=instance(n),
            baseline=outcome(0.5, 50.0, Label.REJECT),
            perturbed=outcome(0.5, 50.0 + delta, Label.REJECT),
        )

    results = [qr(0, -6.0), qr(1, -4.0), qr(2, -7.0), qr(3, -8.0)]
    findings = assess_pattern(results, perturbations, cfg())
    assert len(findings) == 1
    assert len(findings[0].supporting_results) == 3  # the -4 sits under the floor


def test_measured_noise_floor_overrides_downward_only(perturbations):
    def qr(n, delta):
        return QueryResult(
            instance=instance(n),
            baseline=outcome(0.5, 50.0, Label.REJECT),
            perturbed=outcome(0.5, 50.0 + delta, Label.REJECT),
        )

    results = [qr(0, -3.0), qr(1, -3.5), qr(2, -4.0)]
    assert assess_pattern(results, perturbations, cfg()) == []
    lowered = assess_pattern(results, perturbations, cfg(), measured_noise_floor=2.0)
    assert len(lowered) == 1
    raised = assess_pattern(
        [qr(0, -6.0), qr(1, -6.5), qr(2, -7.0)],
        perturbations,
        cfg(),
        measured_noise_floor=20.0,  # cannot raise the configured floor
    )
    assert len(raised) == 1


def test_pattern_unresolvable_class(perturbations):
    result = QueryResult(
        instance=PerturbationInstance("x", "no-such-class", "f", 1, 2),
        baseline=outcome(0.5, 50.0, Label.REJECT),
        perturbed=outcome(0.5, 60.0, Label.REJECT),
    )
    with pytest.raises(UnresolvableClassError):
        assess_pattern([result], perturbations, cfg())


# -- noise floor --------------------------------------------------------------------


def test_noise_floor_zero_for_deterministic_replicates():
    replicates = [outcome(0.5, 50.0, Label.REJECT) for _ in range(5)]
    assert estimate_noise_floor(replicates) == 0.0


def test_noise_floor_max_pairwise_difference():
    replicates = [
        outcome(0.5, 50.0, Label.REJECT),
        outcome(0.5, 52.0, Label.REJECT),
        outcome(0.5, 54.0, Label.REJECT),
    ]
    # oracle: max pairwise |difference| by enumeration
    expected = max(
        abs(a.percentile - b.percentile) for a in replicates for b in replicates
    )
    assert expected == 4.0
    assert estimate_noise_floor(replicates) == expected


def test_noise_floor_needs_two_replicates():
    with pytest.raises(InsufficientReplicatesError):
        estimate_noise_floor([outcome(0.5, 50.0, Label.REJECT)])


# -- report compilation ---------------------------------------------------------------


def session_view(**overrides):
    base = dict(
        session_id="s1",
        spoliation_flag=False,
        queries_used=0,
        budget_limit=50,
        closed_at=T0,
    )
    base.update(overrides)
    return SimpleNamespace(**base)


def test_empty_report_states_no_grounds(perturbations):
    report = compile_report(session_view(), [], cfg(), perturbations)
    assert report.plain_language[0].startswith("No grounds found")
    assert any("retest" in line or "retry" in line for line in report.plain_language)
    assert report.plain_language[-1].startswith("Next steps:")
    assert report.findings == ()
    assert report.magnitudes == ()


def test_report_spoliation_line(perturbations):
    report = compile_report(session_view(spoliation_flag=True), [], cfg(), perturbations)
    assert report.spoliation_flag is True
    assert any("not retained" in line for line in report.plain_language)


def test_custom_pending_watermark(perturbations):
    inst = PerturbationInstance(
        "c1", "custom-zip", "zip_code", "02139", "90210", status=InstanceStatus.CUSTOM_PENDING
    )
    result = QueryResult(
        instance=inst,
        baseline=outcome(0.30, 23.0, Label.REJECT),
        perturbed=outcome(0.45, 41.0, Label.REJECT),
    )
    report = compile_report(session_view(queries_used=1), [result], cfg(), perturbations)
    assert all(f.pending_adjudication for f in report.findings)
    assert any("pending adjudicator" in line for line in report.plain_language)


def test_report_bytes_reproducible(registry, perturbations):
    results = age_proxy_results(registry, perturbations)
    view = session_view(queries_used=3)
    first = compile_report(view, results, cfg(), perturbations)
    second = compile_report(view, results, cfg(), perturbations)
    assert first.to_canonical_json() == second.to_canonical_json()
    assert first.render_text() == second.render_text()


def test_report_validates_against_shipped_schema(registry, perturbations):
    import jsonschema

    schema = json.loads(
        (Path(__file__).resolve().parent.parent / "docs" / "report.schema.json").read_text()
    )
    results = age_proxy_results(registry, perturbations)
    report = compile_report(session_view(queries_used=3), results, cfg(), perturbations)
    jsonschema.validate(report.to_json(), schema)
    # the schema is closed: nothing outside the declared surface can appear
    assert set(report.to_json()) == set(schema["properties"])
