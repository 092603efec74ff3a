"""Applicant-side input records: the objects perturbations modify."""
from __future__ import annotations

from dataclasses import dataclass, field
from datetime import date
from enum import Enum
from typing import Any, Mapping, Union

from .canonical import normalize_value, payload_digest

FeatureValue = Union[str, int, float, date]


class Domain(str, Enum):
    EMPLOYMENT = "employment"
    CREDIT = "credit"
    HOUSING = "housing"
    HEALTHCARE = "healthcare"
    CRIMINAL_JUSTICE = "criminal_justice"
    CONTENT_MODERATION = "content_moderation"
    INSURANCE = "insurance"
    EDUCATION = "education"
    RECOMMENDATION = "recommendation"
    ADVERTISING = "advertising"
    FRAUD_DETECTION = "fraud_detection"


def parse_domain(value: str) -> Domain:
    try:
        return Domain(value)
    except ValueError:
        from .errors import UnknownDomainError

        raise UnknownDomainError(f"unknown domain: {value!r}") from None


@dataclass(frozen=True)
class FeatureRecord:
    """One applicant input to a decision model.

    ``features`` is an ordered name -> value map; insertion order is
    preserved and meaningful for suite generation, but canonical digests
    sort names so representation order never affects identity.
    """

    record_id: str
    domain: Domain
    features: Mapping[str, FeatureValue] = field(default_factory=dict)

    def __post_init__(self):
        if not isinstance(self.domain, Domain):
            object.__setattr__(self, "domain", parse_domain(self.domain))
        normalized = {}
        for name, value in self.features.items():
            if not isinstance(name, str) or not name:
                raise ValueError(f"feature name must be a non-empty string, got {name!r}")
            if not isinstance(value, (str, int, float, date)):
                raise ValueError(f"unsupported feature value for {name!r}: {value!r}")
            normalized[name] = value
        object.__setattr__(self, "features", normalized)

    def canonical_features(self) -> dict[str, Any]:
        return {name: normalize_value(value) for name, value in sorted(self.features.items())}

    def content_digest(self) -> str:
        """Digest of (domain, normalized features); record_id excluded so
        the same substantive input always resolves to the same digest."""
        return payload_digest({"domain": self.domain.value, "features": self.canonical_features()})

    def with_feature(self, name: str, value: FeatureValue) -> "FeatureRecord":
        updated = dict(self.features)
        updated[name] = value
        return FeatureRecord(self.record_id, self.domain, updated)

    def without_feature(self, name: str) -> "FeatureRecord":
        updated = {k: v for k, v in self.features.items() if k != name}
        return FeatureRecord(self.record_id, self.domain, updated)

    def to_json(self) -> dict[str, Any]:
        return {
            "record_id": self.record_id,
            "domain": self.domain.value,
            "features": {name: normalize_value(v) for name, v in self.features.items()},
        }

    @classmethod
    def from_json(cls, obj: Mapping[str, Any]) -> "FeatureRecord":
        return cls(
            record_id=obj["record_id"],
            domain=parse_domain(obj["domain"]),
            features=dict(obj.get("features", {})),
        )
