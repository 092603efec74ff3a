"""Loaders for the bundled scripted scenarios.

Each bundle file carries a model descriptor (scripted score table plus
reference population), the baseline applicant record, and the documented
perturbation sequence, so demos, tests, and the service all replay the
same decisions bit-exactly.
"""
from __future__ import annotations

from dataclasses import dataclass
from datetime import datetime
from importlib import resources
from typing import Any

import yaml

from .host import AdverseDecision, ModelRegistry, ScoreOutcome
from .perturbations import REMOVED, InstanceStatus, PerturbationInstance
from .records import FeatureRecord, parse_domain

BUNDLED = ("maria_screen", "tenant_screen")


@dataclass(frozen=True)
class FixtureBundle:
    name: str
    spec: dict[str, Any]
    baseline_record: FeatureRecord
    scripted_instances: tuple[PerturbationInstance, ...]

    @property
    def version_id(self) -> str:
        return self.spec["version_id"]

    @property
    def domain(self):
        return parse_domain(self.spec["domain"])

    def register(self, models: ModelRegistry) -> str:
        root = resources.files("counterprobe").joinpath("data/fixtures")
        population = [
            float(line)
            for line in root.joinpath(self.spec["population_file"]).read_text("utf-8").splitlines()
            if line.strip()
        ]
        spec = dict(self.spec)
        spec["population"] = population
        return models.register_from_spec(spec)

    def make_decision(
        self, models: ModelRegistry, decision_id: str, decided_at: datetime
    ) -> AdverseDecision:
        """Reconstruct the production decision this scenario starts from."""
        evaluated = models.evaluate(self.version_id, self.baseline_record)
        outcome = ScoreOutcome(
            score=evaluated.score,
            confidence=evaluated.confidence,
            percentile=evaluated.percentile,
            label=evaluated.label,
            model_version=evaluated.model_version,
            evaluated_at=decided_at,
        )
        return AdverseDecision(
            decision_id=decision_id,
            record=self.baseline_record,
            outcome=outcome,
            model_version=self.version_id,
            decided_at=decided_at,
            domain=self.domain,
        )


def _expand_case(baseline: dict[str, Any], case: dict[str, Any]) -> dict[str, Any]:
    features = dict(baseline)
    features.update(case.get("override", {}))
    for name in case.get("remove", []):
        features.pop(name, None)
    return {"score": case["score"], "features": features}


def load_bundle(name: str) -> FixtureBundle:
    if name not in BUNDLED:
        raise KeyError(f"unknown fixture bundle: {name!r}; bundled: {BUNDLED}")
    raw = (
        resources.files("counterprobe")
        .joinpath(f"data/fixtures/{name}.yaml")
        .read_text("utf-8")
    )
    doc = yaml.safe_load(raw)
    domain = parse_domain(doc["domain"])
    baseline_features = dict(doc["baseline"]["features"])
    record = FeatureRecord(
        record_id=doc["baseline"]["record_id"], domain=domain, features=baseline_features
    )

    instances = []
    for q in doc.get("scripted_queries", []):
        substituted = REMOVED if q.get("remove") else q["substituted_value"]
        instances.append(
            PerturbationInstance(
                instance_id=q["instance_id"],
                class_id=q["class_id"],
                field=q["field"],
                original_value=baseline_features[q["field"]],
                substituted_value=substituted,
                status=InstanceStatus.ACCEPTED,
            )
        )

    spec = {
        "version_id": doc["version_id"],
        "model_name": doc["model_name"],
        "domain": doc["domain"],
        "kind": doc["kind"],
        "threshold": doc["threshold"],
        "population_file": doc["population_file"],
        "fixture": {
            "fallback_score": doc["fallback_score"],
            "cases": [_expand_case(baseline_features, case) for case in doc.get("cases", [])],
        },
    }
    return FixtureBundle(
        name=name,
        spec=spec,
        baseline_record=record,
        scripted_instances=tuple(instances),
    )
