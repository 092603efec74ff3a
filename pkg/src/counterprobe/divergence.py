"""Divergence assessment: four criteria, noise handling, report assembly.

Criterion math runs on percentiles where thresholds are percentile-based;
reported per-query magnitudes are raw absolute score deltas. Both numbers
stay explicit on every query so neither unit masquerades as the other.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from datetime import datetime
from enum import Enum
from importlib import resources
from statistics import mean
from typing import Any, Mapping, Optional, Sequence

from .canonical import canonical_json, quantize, utc
from .errors import (
    InsufficientReplicatesError,
    UnresolvableClassError,
    VersionMismatchError,
)
from .host import Label, ScoreOutcome
from .perturbations import (
    InstanceStatus,
    PerturbationInstance,
    PerturbationRegistry,
)

REPORT_SCHEMA_ID = "counterprobe.divergence_report.v1"

# Domain calibration ranges for the percentile-shift threshold, exposed as
# data without endorsement; the default config keeps the generic 15.
SHIFT_THRESHOLD_RANGES: dict[str, tuple[float, float]] = {
    "employment": (10.0, 12.0),
    "content_moderation": (18.0, 20.0),
}


@dataclass(frozen=True)
class DivergenceConfig:
    """Review thresholds. All comparisons against them are strict (>)."""

    decision_threshold: float
    threshold_percentile: float
    percentile_shift_threshold: float = 15.0
    proximate_window: float = 10.0
    proximate_shift_threshold: float = 5.0
    pattern_min_count: int = 3
    noise_floor_percentile: float = 5.0

    def __post_init__(self):
        if not 0.0 < self.decision_threshold < 1.0:
            raise ValueError("decision_threshold must lie strictly inside (0, 1)")
        if not 0.0 <= self.threshold_percentile <= 100.0:
            raise ValueError("threshold_percentile out of [0, 100]")
        if self.proximate_shift_threshold >= self.percentile_shift_threshold:
            raise ValueError("proximate shift threshold must be below the full shift threshold")
        if self.pattern_min_count < 2:
            raise ValueError("pattern_min_count must be at least 2")
        if self.noise_floor_percentile < 0:
            raise ValueError("noise floor cannot be negative")

    def effective_noise_floor(self, measured: Optional[float]) -> float:
        """Measured replicate noise may lower the floor, never raise it."""
        if measured is None:
            return self.noise_floor_percentile
        return min(self.noise_floor_percentile, measured)


class Criterion(str, Enum):
    OUTCOME_CROSSING = "outcome_crossing"
    PERCENTILE_SHIFT = "percentile_shift"
    THRESHOLD_PROXIMATE = "threshold_proximate"
    PATTERN_CONSISTENT = "pattern_consistent"


class Direction(str, Enum):
    TOWARD_ACCEPT = "toward_accept"
    TOWARD_REJECT = "toward_reject"


@dataclass(frozen=True)
class QueryResult:
    """One tested perturbation with both outcomes embedded.

    Deltas are always derived from the embedded outcomes so they can never
    be stored inconsistently.
    """

    instance: PerturbationInstance
    baseline: ScoreOutcome
    perturbed: ScoreOutcome

    @property
    def result_id(self) -> str:
        return self.instance.instance_id

    @property
    def score_delta(self) -> float:
        return quantize(self.perturbed.score - self.baseline.score)

    @property
    def percentile_delta(self) -> float:
        return quantize(self.perturbed.percentile - self.baseline.percentile)

    def to_json(self) -> dict[str, Any]:
        return {
            "instance": self.instance.to_json(),
            "baseline": self.baseline.to_json(),
            "perturbed": self.perturbed.to_json(),
            "score_delta": self.score_delta,
            "percentile_delta": self.percentile_delta,
        }

    @classmethod
    def from_json(cls, obj: Mapping[str, Any]) -> "QueryResult":
        return cls(
            instance=PerturbationInstance.from_json(obj["instance"]),
            baseline=ScoreOutcome.from_json(obj["baseline"]),
            perturbed=ScoreOutcome.from_json(obj["perturbed"]),
        )


@dataclass(frozen=True)
class Finding:
    criterion: Criterion
    magnitude: float
    supporting_results: tuple[str, ...]
    direction: Direction
    pending_adjudication: bool = False
    group_kind: Optional[str] = None  # pattern findings only: the class kind

    def __post_init__(self):
        if self.criterion is Criterion.PATTERN_CONSISTENT:
            if len(self.supporting_results) < 2:
                raise ValueError("pattern findings need at least two supporting results")
        elif len(self.supporting_results) != 1:
            raise ValueError("single-pair findings reference exactly one result")

    def to_json(self) -> dict[str, Any]:
        out = {
            "criterion": self.criterion.value,
            "magnitude": self.magnitude,
            "supporting_results": list(self.supporting_results),
            "direction": self.direction.value,
            "pending_adjudication": self.pending_adjudication,
        }
        if self.group_kind is not None:
            out["group_kind"] = self.group_kind
        return out


def assess_single(
    baseline: ScoreOutcome,
    perturbed: ScoreOutcome,
    cfg: DivergenceConfig,
    *,
    result_id: str = "pair",
    pending: bool = False,
) -> list[Finding]:
    """Criteria 1-3 for one baseline/perturbed pair.

    The threshold-proximate criterion is suppressed when the full
    percentile-shift criterion already fired for the same pair.
    """
    if baseline.model_version != perturbed.model_version:
        raise VersionMismatchError(
            f"outcomes come from different versions: "
            f"{baseline.model_version} vs {perturbed.model_version}"
        )
    findings: list[Finding] = []
    direction = Direction.TOWARD_ACCEPT
    score_delta = quantize(perturbed.score - baseline.score)
    percentile_delta = quantize(perturbed.percentile - baseline.percentile)
    if percentile_delta < 0 or (percentile_delta == 0 and score_delta < 0):
        direction = Direction.TOWARD_REJECT

    if baseline.label != perturbed.label:
        findings.append(
            Finding(
                criterion=Criterion.OUTCOME_CROSSING,
                magnitude=abs(score_delta),
                supporting_results=(result_id,),
                direction=Direction.TOWARD_ACCEPT
                if perturbed.label is Label.ACCEPT
                else Direction.TOWARD_REJECT,
                pending_adjudication=pending,
            )
        )

    shift_fired = abs(percentile_delta) > cfg.percentile_shift_threshold
    if shift_fired:
        findings.append(
            Finding(
                criterion=Criterion.PERCENTILE_SHIFT,
                magnitude=abs(percentile_delta),
                supporting_results=(result_id,),
                direction=direction,
                pending_adjudication=pending,
            )
        )

    proximate = abs(baseline.percentile - cfg.threshold_percentile) <= cfg.proximate_window
    if (
        not shift_fired
        and proximate
        and abs(percentile_delta) > cfg.proximate_shift_threshold
    ):
        findings.append(
            Finding(
                criterion=Criterion.THRESHOLD_PROXIMATE,
                magnitude=abs(percentile_delta),
                supporting_results=(result_id,),
                direction=direction,
                pending_adjudication=pending,
            )
        )
    return findings


def assess_pattern(
    results: Sequence[QueryResult],
    registry: PerturbationRegistry,
    cfg: DivergenceConfig,
    *,
    measured_noise_floor: Optional[float] = None,
) -> list[Finding]:
    """Criterion 4: consistent same-direction effects within a class kind.

    Groups by (class kind, delta sign); a group fires when at least
    ``pattern_min_count`` results each clear the noise floor. Output is
    invariant under permutation of ``results``.
    """
    floor = cfg.effective_noise_floor(measured_noise_floor)
    groups: dict[tuple[str, int], list[QueryResult]] = {}
    for result in results:
        kind = registry.kind_for(result.instance)
        if kind is None:
            raise UnresolvableClassError(
                f"instance {result.instance.instance_id} references unknown class "
                f"{result.instance.class_id!r}"
            )
        delta = result.percentile_delta
        if abs(delta) <= floor or delta == 0:
            continue
        sign = 1 if delta > 0 else -1
        groups.setdefault((kind.value, sign), []).append(result)

    findings: list[Finding] = []
    for (kind, sign), members in sorted(groups.items()):
        if len(members) < cfg.pattern_min_count:
            continue
        members = sorted(members, key=lambda r: r.result_id)
        findings.append(
            Finding(
                criterion=Criterion.PATTERN_CONSISTENT,
                magnitude=quantize(mean(abs(m.percentile_delta) for m in members)),
                supporting_results=tuple(m.result_id for m in members),
                direction=Direction.TOWARD_ACCEPT if sign > 0 else Direction.TOWARD_REJECT,
                pending_adjudication=any(
                    m.instance.status is InstanceStatus.CUSTOM_PENDING for m in members
                ),
                group_kind=kind,
            )
        )
    return findings


def estimate_noise_floor(replicates: Sequence[ScoreOutcome]) -> float:
    """Max pairwise percentile difference across replicates of one input."""
    if len(replicates) < 2:
        raise InsufficientReplicatesError("noise estimation needs at least 2 replicates")
    versions = {r.model_version for r in replicates}
    if len(versions) != 1:
        raise VersionMismatchError(f"replicates span versions: {sorted(versions)}")
    percentiles = [r.percentile for r in replicates]
    return quantize(max(percentiles) - min(percentiles))


# ---------------------------------------------------------------------------
# Report compilation
# ---------------------------------------------------------------------------


class Templates:
    """Plain-language locale templates; shipped English is the default."""

    def __init__(self, entries: Mapping[str, str]):
        self._entries = dict(entries)

    @classmethod
    def load_default(cls) -> "Templates":
        raw = resources.files("counterprobe").joinpath("data/templates/en.json").read_text("utf-8")
        return cls(json.loads(raw))

    def render(self, key: str, **kwargs: Any) -> str:
        return self._entries[key].format(**kwargs)


_DEFAULT_TEMPLATES: Optional[Templates] = None


def default_templates() -> Templates:
    global _DEFAULT_TEMPLATES
    if _DEFAULT_TEMPLATES is None:
        _DEFAULT_TEMPLATES = Templates.load_default()
    return _DEFAULT_TEMPLATES


def _ordinal(value: float) -> str:
    if float(value).is_integer():
        n = int(value)
        if 10 <= n % 100 <= 20:
            suffix = "th"
        else:
            suffix = {1: "st", 2: "nd", 3: "rd"}.get(n % 10, "th")
        return f"{n}{suffix}"
    return f"{value:.1f}"


@dataclass(frozen=True)
class DivergenceReport:
    session_id: str
    findings: tuple[Finding, ...]
    queries: tuple[QueryResult, ...]
    magnitudes: tuple[float, ...]  # per-query |score_delta|, query order
    plain_language: tuple[str, ...]
    spoliation_flag: bool
    budget_used: int
    generated_at: datetime

    def to_json(self) -> dict[str, Any]:
        return {
            "schema": REPORT_SCHEMA_ID,
            "session_id": self.session_id,
            "findings": [f.to_json() for f in self.findings],
            "queries": [q.to_json() for q in self.queries],
            "magnitudes": list(self.magnitudes),
            "plain_language": list(self.plain_language),
            "spoliation_flag": self.spoliation_flag,
            "budget_used": self.budget_used,
            "generated_at": utc(self.generated_at).isoformat(),
        }

    def to_canonical_json(self) -> str:
        return canonical_json(self.to_json())

    def render_text(self) -> str:
        lines = [
            "DIVERGENCE REPORT",
            f"session: {self.session_id}",
            f"generated: {utc(self.generated_at).isoformat()}",
            f"queries run: {self.budget_used}",
            f"findings: {len(self.findings)}",
            "",
        ]
        lines.extend(self.plain_language)
        return "\n".join(lines) + "\n"


def _change_text(instance: PerturbationInstance, templates: Templates) -> str:
    if instance.is_removal:
        return templates.render("change_removal", field=instance.field)
    return templates.render(
        "change_substitution",
        field=instance.field,
        original=instance.original_value,
        substituted=instance.substituted_value,
    )


def _finding_line(
    finding: Finding,
    by_id: Mapping[str, QueryResult],
    registry: PerturbationRegistry,
    templates: Templates,
) -> str:
    if finding.criterion is Criterion.PATTERN_CONSISTENT:
        line = templates.render(
            "pattern_consistent",
            count=len(finding.supporting_results),
            factor=finding.group_kind or "related",
            direction=templates.render(f"direction_{finding.direction.value}"),
        )
    else:
        result = by_id[finding.supporting_results[0]]
        change = _change_text(result.instance, templates)
        factor = registry.label_for(result.instance)
        if finding.criterion is Criterion.OUTCOME_CROSSING:
            line = templates.render(
                "outcome_crossing",
                change=change,
                before=templates.render(f"label_{result.baseline.label.value}"),
                after=templates.render(f"label_{result.perturbed.label.value}"),
                factor=factor,
            )
        else:
            key = (
                "percentile_shift"
                if finding.criterion is Criterion.PERCENTILE_SHIFT
                else "threshold_proximate"
            )
            line = templates.render(
                key,
                change=change,
                before=_ordinal(result.baseline.percentile),
                after=_ordinal(result.perturbed.percentile),
                factor=factor,
            )
    if finding.pending_adjudication:
        line = f"{line} {templates.render('pending_adjudication')}"
    return line


def compile_report(
    session,
    results: Sequence[QueryResult],
    cfg: DivergenceConfig,
    registry: PerturbationRegistry,
    *,
    templates: Optional[Templates] = None,
    measured_noise_floor: Optional[float] = None,
    generated_at: Optional[datetime] = None,
) -> DivergenceReport:
    """Assemble the appeal-grade report for a closed or snapshotted session.

    ``session`` is duck-typed: it must expose session_id, spoliation_flag,
    queries_used, budget_limit, and closed_at (closed_at may be None for an
    explicit snapshot, in which case ``generated_at`` is required).
    """
    templates = templates or default_templates()
    results = list(results)
    by_id = {r.result_id: r for r in results}

    findings: list[Finding] = []
    for result in results:
        findings.extend(
            assess_single(
                result.baseline,
                result.perturbed,
                cfg,
                result_id=result.result_id,
                pending=result.instance.status is InstanceStatus.CUSTOM_PENDING,
            )
        )
    # custom instances without a registered class cannot pattern-group:
    # grouping is registry-driven, so only class-resolvable results enter
    groupable = [r for r in results if registry.kind_for(r.instance) is not None]
    findings.extend(
        assess_pattern(groupable, registry, cfg, measured_noise_floor=measured_noise_floor)
    )

    magnitudes = tuple(abs(r.score_delta) for r in results)

    lines: list[str] = []
    if findings:
        parts = [
            f"{registry.label_for(r.instance)} [{abs(r.score_delta):.2f}]" for r in results
        ]
        magnitude_list = ", ".join(parts)
        magnitude_list = magnitude_list[0].upper() + magnitude_list[1:] if magnitude_list else ""
        lines.append(templates.render("header_findings", magnitude_list=magnitude_list))
        for finding in findings:
            lines.append(_finding_line(finding, by_id, registry, templates))
    else:
        lines.append(templates.render("no_grounds"))
        lines.append(
            templates.render(
                "retry_guidance",
                remaining=session.budget_limit - session.queries_used,
                budget=session.budget_limit,
            )
        )
    if session.spoliation_flag:
        lines.append(templates.render("spoliation"))
    lines.append(templates.render("next_steps"))

    stamp = getattr(session, "closed_at", None) or generated_at
    if stamp is None:
        raise ValueError("open-session snapshots must pass generated_at explicitly")
    return DivergenceReport(
        session_id=session.session_id,
        findings=tuple(findings),
        queries=tuple(results),
        magnitudes=magnitudes,
        plain_language=tuple(lines),
        spoliation_flag=session.spoliation_flag,
        budget_used=session.queries_used,
        generated_at=stamp,
    )
