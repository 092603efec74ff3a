"""Regulator-defined perturbation classes and the machinery to apply them.

A perturbation class groups surface variations deemed equivalent for the
legitimate assessment purpose (name formatting, date presentation, ...).
Equivalence itself is never decided algorithmically here: each class
carries a free-text rationale that reports surface for adjudicators.
"""
from __future__ import annotations

import threading
from dataclasses import dataclass, field, replace
from datetime import date
from enum import Enum
from fnmatch import fnmatchcase
from importlib import resources
from pathlib import Path
from random import Random
from typing import Any, Mapping, Optional, Sequence

import yaml

from .canonical import normalize_value, payload_digest
from .errors import (
    FieldMissingError,
    MalformedInstanceError,
    StaleInstanceError,
    UnknownDomainError,
)
from .records import Domain, FeatureRecord, FeatureValue, parse_domain


class FeatureKind(str, Enum):
    NAME = "name"
    DATE = "date"
    TERMINOLOGY = "terminology"
    FRAMING = "framing"
    ADDRESS = "address"
    INCOME_PRESENTATION = "income_presentation"
    SYMPTOM_SYNONYM = "symptom_synonym"
    REGISTER = "register"
    RECORD_PRESENCE = "record_presence"


class HypothesisDirection(str, Enum):
    SUSPECTED_NEGATIVE = "suspected_negative"
    SUSPECTED_POSITIVE = "suspected_positive"
    UNDIRECTED = "undirected"


class ClassOrigin(str, Enum):
    REGULATOR_MINIMUM = "regulator_minimum"
    PROPOSED_CUSTOM = "proposed_custom"


class InstanceStatus(str, Enum):
    ACCEPTED = "accepted"
    CUSTOM_PENDING = "custom_pending"


class _Removed:
    """Sentinel substituted_value for record-presence removals."""

    def __repr__(self):
        return "REMOVED"


REMOVED = _Removed()
_REMOVAL_MARKER = "__removed__"

# Default breadth: how many alternates one class proposes per matched
# feature when building the standard suite (classes may override).
DEFAULT_SUITE_CAP = 3
SUITE_MIN = 10
SUITE_MAX = 15
TRUNCATION_PER_CLASS = 2


# ---------------------------------------------------------------------------
# Substitution generators
# ---------------------------------------------------------------------------


class Generator:
    """Produces substitution values for a matched feature.

    ``candidates`` is the deterministic enumeration used by the default
    suite; ``sample`` draws seeded non-standard surface forms for
    regulator probes and must avoid the excluded values.
    """

    def candidates(self, value: FeatureValue) -> list[Any]:
        raise NotImplementedError

    def sample(self, value: FeatureValue, rng: Random, exclude: set) -> Optional[Any]:
        raise NotImplementedError


class AlternativesGenerator(Generator):
    def __init__(self, pool: Sequence[str] = (), pairs: Mapping[str, Sequence[str]] | None = None):
        self.pool = list(pool)
        self.pairs = {k: list(v) for k, v in (pairs or {}).items()}

    def candidates(self, value: FeatureValue) -> list[Any]:
        out = [v for v in self.pairs.get(str(value), []) if v != value]
        for entry in self.pool:
            if entry != value and entry not in out:
                out.append(entry)
        return out

    def sample(self, value: FeatureValue, rng: Random, exclude: set) -> Optional[Any]:
        options = [v for v in self.candidates(value) if v not in exclude]
        if not options:
            return None
        return rng.choice(options)


class YearOffsetGenerator(Generator):
    """Shifts the year embedded in a date-like value.

    Works on ints, 4-digit strings, ISO date strings, and date objects;
    the substituted value keeps the original's representation.
    """

    def __init__(self, offsets: Sequence[int] = (20, -20, 10), span: tuple[int, int] = (1, 40)):
        self.offsets = list(offsets)
        self.span = (int(span[0]), int(span[1]))

    @staticmethod
    def _shift(value: FeatureValue, offset: int) -> Optional[Any]:
        if isinstance(value, bool):
            return None
        if isinstance(value, int):
            shifted = value + offset
            return shifted if 1 <= shifted <= 9999 else None
        if isinstance(value, float) and value.is_integer():
            return YearOffsetGenerator._shift(int(value), offset)
        if isinstance(value, date):
            year = value.year + offset
            if not 1 <= year <= 9999:
                return None
            day = min(value.day, 28) if value.month == 2 else value.day
            return value.replace(year=year, day=day)
        if isinstance(value, str):
            text = value.strip()
            if len(text) == 4 and text.isdigit():
                shifted = int(text) + offset
                return str(shifted) if 1000 <= shifted <= 9999 else None
            try:
                return YearOffsetGenerator._shift(date.fromisoformat(text), offset).isoformat()
            except (ValueError, AttributeError):
                return None
        return None

    def candidates(self, value: FeatureValue) -> list[Any]:
        out = []
        for offset in self.offsets:
            shifted = self._shift(value, offset)
            if shifted is not None and shifted not in out:
                out.append(shifted)
        return out

    def sample(self, value: FeatureValue, rng: Random, exclude: set) -> Optional[Any]:
        lo, hi = self.span
        for _ in range(64):
            magnitude = rng.randint(lo, hi)
            offset = magnitude if rng.random() < 0.5 else -magnitude
            shifted = self._shift(value, offset)
            if shifted is not None and shifted not in exclude:
                return shifted
        return None


class RemovalGenerator(Generator):
    def candidates(self, value: FeatureValue) -> list[Any]:
        return [REMOVED]

    def sample(self, value: FeatureValue, rng: Random, exclude: set) -> Optional[Any]:
        return None if REMOVED in exclude else REMOVED


def _generator_from_spec(spec: Mapping[str, Any]) -> Generator:
    kind = spec["type"]
    if kind == "alternatives":
        return AlternativesGenerator(pool=spec.get("pool", ()), pairs=spec.get("pairs"))
    if kind == "year_offset":
        return YearOffsetGenerator(
            offsets=spec.get("offsets", (20, -20, 10)),
            span=tuple(spec.get("span", (1, 40))),
        )
    if kind == "removal":
        return RemovalGenerator()
    raise ValueError(f"unknown generator type: {kind!r}")


# ---------------------------------------------------------------------------
# Classes and instances
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PerturbationClass:
    class_id: str
    domain: Domain
    label: str
    description: str
    kind: FeatureKind
    direction: HypothesisDirection
    origin: ClassOrigin
    priority: int
    matchers: tuple[str, ...]
    generator: Generator
    suite_cap: int = DEFAULT_SUITE_CAP

    def matched_features(self, record: FeatureRecord) -> list[str]:
        out = []
        for name in record.features:
            if any(fnmatchcase(name, pattern) for pattern in self.matchers):
                out.append(name)
        return out


@dataclass(frozen=True)
class PerturbationInstance:
    instance_id: str
    class_id: str
    field: str
    original_value: FeatureValue
    substituted_value: Any  # FeatureValue or REMOVED
    status: InstanceStatus = InstanceStatus.ACCEPTED

    @property
    def is_removal(self) -> bool:
        return self.substituted_value is REMOVED

    def digest(self) -> str:
        """Content identity: ids and status never affect deduplication."""
        substituted = _REMOVAL_MARKER if self.is_removal else normalize_value(self.substituted_value)
        return payload_digest(
            {
                "class_id": self.class_id,
                "field": self.field,
                "original": normalize_value(self.original_value),
                "substituted": substituted,
            }
        )

    def describe(self) -> str:
        if self.is_removal:
            return f"{self.field} removed"
        return f"{self.field} {self.original_value!r} -> {self.substituted_value!r}"

    def to_json(self) -> dict[str, Any]:
        return {
            "instance_id": self.instance_id,
            "class_id": self.class_id,
            "field": self.field,
            "original_value": normalize_value(self.original_value),
            "substituted_value": _REMOVAL_MARKER
            if self.is_removal
            else normalize_value(self.substituted_value),
            "status": self.status.value,
        }

    @classmethod
    def from_json(cls, obj: Mapping[str, Any]) -> "PerturbationInstance":
        substituted = obj["substituted_value"]
        if substituted == _REMOVAL_MARKER:
            substituted = REMOVED
        return cls(
            instance_id=obj["instance_id"],
            class_id=obj["class_id"],
            field=obj["field"],
            original_value=obj["original_value"],
            substituted_value=substituted,
            status=InstanceStatus(obj.get("status", "accepted")),
        )


def apply_instance(record: FeatureRecord, p: PerturbationInstance) -> FeatureRecord:
    """Apply one perturbation; the result differs at exactly ``p.field``."""
    if p.field not in record.features:
        raise FieldMissingError(f"record has no feature {p.field!r}")
    current = normalize_value(record.features[p.field])
    if current != normalize_value(p.original_value):
        raise StaleInstanceError(
            f"instance {p.instance_id} expected {p.field}={p.original_value!r}, "
            f"record holds {record.features[p.field]!r}"
        )
    if p.is_removal:
        return record.without_feature(p.field)
    return record.with_feature(p.field, p.substituted_value)


def inverse(p: PerturbationInstance) -> PerturbationInstance:
    """Swap original and substituted; removals are not invertible."""
    if p.is_removal:
        raise MalformedInstanceError("record-presence removals have no inverse")
    return replace(
        p,
        instance_id=f"{p.instance_id}~inv",
        original_value=p.substituted_value,
        substituted_value=p.original_value,
    )


@dataclass(frozen=True)
class SuiteResult:
    instances: tuple[PerturbationInstance, ...]
    warnings: tuple[str, ...]

    def __len__(self) -> int:
        return len(self.instances)


# ---------------------------------------------------------------------------
# Registry
# ---------------------------------------------------------------------------


class PerturbationRegistry:
    """Holds per-domain class lists plus the domain probe templates."""

    def __init__(self):
        self._classes: dict[Domain, list[PerturbationClass]] = {}
        self._templates: dict[Domain, FeatureRecord] = {}
        self._write_lock = threading.Lock()

    # -- loading ------------------------------------------------------------

    @classmethod
    def load_default(cls) -> "PerturbationRegistry":
        registry = cls()
        root = resources.files("counterprobe").joinpath("data/registries")
        for entry in sorted(root.iterdir(), key=lambda e: e.name):
            if entry.name.endswith(".yaml"):
                registry.load_file(entry)
        return registry

    @classmethod
    def from_dir(cls, path: str | Path) -> "PerturbationRegistry":
        registry = cls()
        for file in sorted(Path(path).glob("*.yaml")):
            registry.load_file(file)
        return registry

    def load_file(self, path) -> None:
        doc = yaml.safe_load(Path(str(path)).read_text(encoding="utf-8")) if isinstance(
            path, (str, Path)
        ) else yaml.safe_load(path.read_text(encoding="utf-8"))
        self.load_spec(doc)

    def load_spec(self, doc: Mapping[str, Any]) -> None:
        domain = parse_domain(doc["domain"])
        classes = []
        seen_ids = set()
        for priority, spec in enumerate(doc.get("classes", [])):
            cid = spec["class_id"]
            if cid in seen_ids:
                raise ValueError(f"duplicate class_id in {domain.value}: {cid}")
            seen_ids.add(cid)
            classes.append(
                PerturbationClass(
                    class_id=cid,
                    domain=domain,
                    label=spec.get("label", cid),
                    description=spec.get("rationale", ""),
                    kind=FeatureKind(spec["kind"]),
                    direction=HypothesisDirection(spec.get("direction", "undirected")),
                    origin=ClassOrigin(spec.get("origin", "regulator_minimum")),
                    priority=priority,
                    matchers=tuple(spec.get("matchers", ())),
                    generator=_generator_from_spec(spec["generator"]),
                    suite_cap=int(spec.get("suite_cap", DEFAULT_SUITE_CAP)),
                )
            )
        with self._write_lock:
            self._classes[domain] = classes
            template = doc.get("probe_template")
            if template:
                self._templates[domain] = FeatureRecord(
                    record_id=template.get("record_id", f"{domain.value}-probe-template"),
                    domain=domain,
                    features=dict(template["features"]),
                )

    def add_class(self, cls: PerturbationClass) -> None:
        with self._write_lock:
            bucket = self._classes.setdefault(cls.domain, [])
            if any(existing.class_id == cls.class_id for existing in bucket):
                raise ValueError(f"duplicate class_id: {cls.class_id}")
            bucket.append(cls)

    # -- lookups ------------------------------------------------------------

    def domains(self) -> list[Domain]:
        return sorted(self._classes, key=lambda d: d.value)

    def load_registry(self, domain: Domain | str) -> list[PerturbationClass]:
        """All classes for a domain, ordered by class_id."""
        domain = domain if isinstance(domain, Domain) else parse_domain(domain)
        if domain not in self._classes:
            raise UnknownDomainError(f"no registry shipped for domain: {domain.value}")
        return sorted(self._classes[domain], key=lambda c: c.class_id)

    def classes_by_priority(self, domain: Domain) -> list[PerturbationClass]:
        if domain not in self._classes:
            raise UnknownDomainError(f"no registry shipped for domain: {domain.value}")
        return sorted(self._classes[domain], key=lambda c: c.priority)

    def find_class(self, class_id: str) -> Optional[PerturbationClass]:
        for classes in self._classes.values():
            for cls in classes:
                if cls.class_id == class_id:
                    return cls
        return None

    def probe_template(self, domain: Domain | str) -> FeatureRecord:
        domain = domain if isinstance(domain, Domain) else parse_domain(domain)
        if domain not in self._templates:
            raise UnknownDomainError(f"no probe template for domain: {domain.value}")
        return self._templates[domain]

    # -- operations ----------------------------------------------------------

    def build_instance(
        self,
        cls: PerturbationClass,
        record: FeatureRecord,
        feature: str,
        substituted: Any,
        instance_id: str,
    ) -> PerturbationInstance:
        if feature not in record.features:
            raise FieldMissingError(f"record has no feature {feature!r}")
        status = (
            InstanceStatus.ACCEPTED
            if cls.origin is ClassOrigin.REGULATOR_MINIMUM
            else InstanceStatus.CUSTOM_PENDING
        )
        return PerturbationInstance(
            instance_id=instance_id,
            class_id=cls.class_id,
            field=feature,
            original_value=record.features[feature],
            substituted_value=substituted,
            status=status,
        )

    def default_suite(self, domain: Domain | str, record: FeatureRecord) -> SuiteResult:
        """Deterministic standard suite for (registry, record).

        Enumerates class x feature x alternate candidates in class priority
        order. Oversized enumerations are first capped at 2 instances per
        class, refilled round-robin if that overshoots below the 10-query
        floor, and finally truncated at 15.
        """
        domain = domain if isinstance(domain, Domain) else parse_domain(domain)
        if record.domain is not domain:
            raise ValueError(f"record domain {record.domain.value} does not match {domain.value}")
        classes = [
            c for c in self.classes_by_priority(domain) if c.origin is ClassOrigin.REGULATOR_MINIMUM
        ]

        per_class: list[tuple[PerturbationClass, list[PerturbationInstance]]] = []
        seen_digests = set()
        for cls in classes:
            bucket: list[PerturbationInstance] = []
            for feature in cls.matched_features(record):
                value = record.features[feature]
                for idx, substituted in enumerate(cls.generator.candidates(value)):
                    if idx >= cls.suite_cap:
                        break
                    instance = self.build_instance(
                        cls, record, feature, substituted, f"{cls.class_id}.{feature}.{idx}"
                    )
                    digest = instance.digest()
                    if digest in seen_digests:
                        continue
                    seen_digests.add(digest)
                    bucket.append(instance)
            if bucket:
                per_class.append((cls, bucket))

        warnings: list[str] = []
        if not per_class:
            return SuiteResult(
                (),
                (
                    "no regulator-minimum perturbation class matches any feature of "
                    f"record {record.record_id!r}; nothing to test by default",
                ),
            )

        total = sum(len(bucket) for _, bucket in per_class)
        if total <= SUITE_MAX:
            suite = [inst for _, bucket in per_class for inst in bucket]
        else:
            suite = [inst for _, bucket in per_class for inst in bucket[:TRUNCATION_PER_CLASS]]
            if len(suite) < SUITE_MIN:
                leftovers = [inst for _, bucket in per_class for inst in bucket[TRUNCATION_PER_CLASS:]]
                suite.extend(leftovers[: SUITE_MIN - len(suite)])
            suite = suite[:SUITE_MAX]

        if len(suite) < SUITE_MIN:
            warnings.append(
                f"default suite has only {len(suite)} instances; the record exposes "
                "too few matchable features for the standard 10-15 query suite"
            )
        return SuiteResult(tuple(suite), tuple(warnings))

    def validate_instance(self, p: PerturbationInstance) -> InstanceStatus:
        """Accept regulator-minimum instances; everything else tests as
        custom_pending and is watermarked in reports."""
        if not p.field:
            raise MalformedInstanceError("instance field must be non-empty")
        if not p.is_removal and normalize_value(p.substituted_value) == normalize_value(
            p.original_value
        ):
            raise MalformedInstanceError("substituted value must differ from original")
        cls = self.find_class(p.class_id)
        if cls is not None and cls.origin is ClassOrigin.REGULATOR_MINIMUM:
            return InstanceStatus.ACCEPTED
        return InstanceStatus.CUSTOM_PENDING

    def label_for(self, p: PerturbationInstance) -> str:
        cls = self.find_class(p.class_id)
        return cls.label if cls is not None else p.field

    def kind_for(self, p: PerturbationInstance) -> Optional[FeatureKind]:
        cls = self.find_class(p.class_id)
        return cls.kind if cls is not None else None
