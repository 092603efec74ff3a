"""Hosts pluggable decision models behind one evaluate interface.

The sandbox never serves production traffic: models registered here exist
so an affected party (or a regulator) can re-run a pinned decision version
against modified inputs. An evaluation discloses score, confidence
interval, percentile, and label -- nothing else.
"""
from __future__ import annotations

import hashlib
import math
import threading
from bisect import bisect_left
from dataclasses import dataclass
from datetime import datetime
from enum import Enum
from pathlib import Path
from typing import Any, Iterable, Mapping, Optional, Sequence

import yaml

from .canonical import quantize, utc
from .clock import Clock, SystemClock
from .errors import (
    DuplicateVersionError,
    EmptyPopulationError,
    SpoliationSignal,
    UnknownVersionError,
)
from .records import Domain, FeatureRecord, parse_domain


class Label(str, Enum):
    ACCEPT = "accept"
    REJECT = "reject"


@dataclass(frozen=True)
class ThresholdPolicy:
    """Score at or above ``decision_threshold`` labels accept."""

    decision_threshold: float

    def __post_init__(self):
        if not 0.0 < self.decision_threshold < 1.0:
            raise ValueError("decision threshold must lie strictly inside (0, 1)")

    def label_for(self, score: float) -> Label:
        return Label.ACCEPT if score >= self.decision_threshold else Label.REJECT


class ReferencePopulation:
    """Immutable multiset of scores a percentile is ranked against."""

    def __init__(self, population_id: str, scores: Iterable[float], snapshot_at: datetime):
        self.population_id = population_id
        self.snapshot_at = utc(snapshot_at)
        scores = tuple(float(s) for s in scores)
        if not scores:
            raise EmptyPopulationError("reference population must be non-empty")
        for s in scores:
            if not 0.0 <= s <= 1.0:
                raise ValueError(f"population score out of [0, 1]: {s}")
        self.scores = scores
        self._sorted = sorted(scores)

    def __len__(self) -> int:
        return len(self.scores)

    def percentile_of(self, score: float) -> float:
        """100 x (count of scores strictly below) / size. Ties rank below."""
        below = bisect_left(self._sorted, score)
        return 100.0 * below / len(self._sorted)


def percentile_of(score: float, population: ReferencePopulation) -> float:
    return population.percentile_of(score)


@dataclass(frozen=True)
class ScoreOutcome:
    """The only information the sandbox ever discloses for one input."""

    score: float
    confidence: tuple[float, float]
    percentile: float
    label: Label
    model_version: str
    evaluated_at: datetime

    def __post_init__(self):
        lo, hi = self.confidence
        if not 0.0 <= self.score <= 1.0:
            raise ValueError("score out of [0, 1]")
        if not (0.0 <= lo <= self.score <= hi <= 1.0):
            raise ValueError("confidence interval must satisfy 0 <= lo <= score <= hi <= 1")
        if not 0.0 <= self.percentile <= 100.0:
            raise ValueError("percentile out of [0, 100]")
        object.__setattr__(self, "evaluated_at", utc(self.evaluated_at))

    def to_json(self) -> dict[str, Any]:
        return {
            "score": self.score,
            "confidence": [self.confidence[0], self.confidence[1]],
            "percentile": self.percentile,
            "label": self.label.value,
            "model_version": self.model_version,
            "evaluated_at": self.evaluated_at.isoformat(),
        }

    @classmethod
    def from_json(cls, obj: Mapping[str, Any]) -> "ScoreOutcome":
        return cls(
            score=obj["score"],
            confidence=(obj["confidence"][0], obj["confidence"][1]),
            percentile=obj["percentile"],
            label=Label(obj["label"]),
            model_version=obj["model_version"],
            evaluated_at=datetime.fromisoformat(obj["evaluated_at"]),
        )


# ---------------------------------------------------------------------------
# Model plug-ins
# ---------------------------------------------------------------------------


class DecisionModel:
    """Plug-in contract: a pure mapping from record to score in [0, 1].

    ``replicates`` > 1 declares stochastic replication; evaluate() then runs
    that many replicates and reports min/max as the confidence interval.
    """

    replicates: int = 1

    def score(self, record: FeatureRecord, replicate: int = 0) -> float:
        raise NotImplementedError


def _sigmoid(x: float) -> float:
    if x >= 0:
        return 1.0 / (1.0 + math.exp(-x))
    e = math.exp(x)
    return e / (1.0 + e)


def _logit(p: float) -> float:
    return math.log(p / (1.0 - p))


def _numeric(value: Any) -> Optional[float]:
    if isinstance(value, bool):
        return None
    if isinstance(value, (int, float)):
        return float(value)
    if hasattr(value, "year"):  # date: the year is the numeric surface
        return float(value.year)
    return None


class LinearModel(DecisionModel):
    """Weighted linear scorer squashed through a logistic.

    score = sigmoid(logit(base_score) + sum of contributions), so an
    all-zero weight vector scores exactly ``base_score`` for every record.
    Numeric and date-valued features contribute weight * (value - center);
    text and categorical features contribute through one-hot keys spelled
    "feature=value".
    """

    def __init__(self, base_score: float, weights: Mapping[str, Any] | None = None):
        if not 0.0 < base_score < 1.0:
            raise ValueError("base_score must lie strictly inside (0, 1)")
        self.base_score = base_score
        self.weights: dict[str, tuple[float, float]] = {}
        for key, spec in (weights or {}).items():
            if isinstance(spec, Mapping):
                self.weights[key] = (float(spec["weight"]), float(spec.get("center", 0.0)))
            else:
                self.weights[key] = (float(spec), 0.0)

    def score(self, record: FeatureRecord, replicate: int = 0) -> float:
        z = _logit(self.base_score)
        for name, value in record.features.items():
            numeric = _numeric(value)
            if name in self.weights and numeric is not None:
                weight, center = self.weights[name]
                z += weight * (numeric - center)
            onehot = f"{name}={value}"
            if onehot in self.weights:
                z += self.weights[onehot][0]
        return _sigmoid(z)


class FixtureModel(DecisionModel):
    """Scripted scorer keyed by canonical record digests.

    Used to reproduce documented decision traces bit-exactly; unknown
    inputs fall back to ``fallback_score``.
    """

    def __init__(self, table: Mapping[str, float], fallback_score: float):
        self.table = dict(table)
        self.fallback_score = float(fallback_score)
        for digest, score in self.table.items():
            if not 0.0 <= score <= 1.0:
                raise ValueError(f"fixture score out of [0, 1] for {digest}")

    @classmethod
    def from_cases(
        cls,
        domain: Domain,
        cases: Sequence[Mapping[str, Any]],
        fallback_score: float,
    ) -> "FixtureModel":
        table = {}
        for case in cases:
            record = FeatureRecord("fixture", domain, dict(case["features"]))
            table[record.content_digest()] = float(case["score"])
        return cls(table, fallback_score)

    def score(self, record: FeatureRecord, replicate: int = 0) -> float:
        return self.table.get(record.content_digest(), self.fallback_score)


class TunedLinearModel(DecisionModel):
    """Linear scorer that plays dead on a fixed set of input digests.

    Models an organization gamed against well-known test suites: inputs
    whose digest is on the suppress list score exactly ``masked_score``
    (typically the baseline), hiding divergence from those probes while the
    live scorer stays sensitive. Exists so the regulator tooling has a
    positive control.
    """

    def __init__(self, inner: LinearModel, suppressed: Iterable[str], masked_score: float):
        self.inner = inner
        self.suppressed = frozenset(suppressed)
        self.masked_score = float(masked_score)

    def score(self, record: FeatureRecord, replicate: int = 0) -> float:
        if record.content_digest() in self.suppressed:
            return self.masked_score
        return self.inner.score(record, replicate)


class JitterModel(DecisionModel):
    """Stochastic wrapper adding digest-seeded replicate noise.

    Jitter is deterministic per (record, replicate) so tests stay stable
    while still exercising the replicate confidence-interval path.
    """

    def __init__(self, inner: DecisionModel, spread: float, replicates: int = 5):
        self.inner = inner
        self.spread = float(spread)
        self.replicates = int(replicates)

    def score(self, record: FeatureRecord, replicate: int = 0) -> float:
        base = self.inner.score(record, replicate)
        seed = hashlib.sha256(f"{record.content_digest()}:{replicate}".encode()).digest()
        unit = int.from_bytes(seed[:8], "big") / 2**64  # [0, 1)
        jitter = (unit - 0.5) * 2.0 * self.spread
        return min(1.0, max(0.0, base + jitter))


# ---------------------------------------------------------------------------
# Version registry
# ---------------------------------------------------------------------------


class VersionResolution(str, Enum):
    SAME_VERSION = "same_version"
    UPDATED_ORIGINAL_RETAINED = "updated_original_retained"
    ORIGINAL_NOT_RETAINED = "original_not_retained"


@dataclass
class ModelVersion:
    version_id: str
    model_name: str
    created_at: datetime
    retained: bool
    threshold_policy: ThresholdPolicy
    population: ReferencePopulation
    model: DecisionModel

    @property
    def population_ref(self) -> str:
        return self.population.population_id


@dataclass(frozen=True)
class AdverseDecision:
    """A recorded decision an affected party may interrogate."""

    decision_id: str
    record: FeatureRecord
    outcome: ScoreOutcome
    model_version: str
    decided_at: datetime
    domain: Domain

    def __post_init__(self):
        object.__setattr__(self, "decided_at", utc(self.decided_at))
        if not isinstance(self.domain, Domain):
            object.__setattr__(self, "domain", parse_domain(self.domain))


class ModelRegistry:
    """Versioned model store: one writer, many readers."""

    def __init__(self, clock: Clock | None = None):
        self._clock = clock or SystemClock()
        self._versions: dict[str, ModelVersion] = {}
        self._write_lock = threading.Lock()

    def register_version(
        self,
        model: DecisionModel,
        *,
        version_id: str,
        model_name: str,
        policy: ThresholdPolicy,
        population: ReferencePopulation,
    ) -> str:
        with self._write_lock:
            if version_id in self._versions:
                raise DuplicateVersionError(f"version already registered: {version_id}")
            self._versions[version_id] = ModelVersion(
                version_id=version_id,
                model_name=model_name,
                created_at=self._clock.now(),
                retained=True,
                threshold_policy=policy,
                population=population,
                model=model,
            )
        return version_id

    def get(self, version_id: str) -> ModelVersion:
        try:
            return self._versions[version_id]
        except KeyError:
            raise UnknownVersionError(f"unknown version: {version_id}") from None

    def has(self, version_id: str) -> bool:
        return version_id in self._versions

    def version_ids(self) -> list[str]:
        return sorted(self._versions)

    def mark_unretained(self, version_id: str) -> None:
        with self._write_lock:
            self.get(version_id).retained = False

    def purge_version(self, version_id: str) -> None:
        with self._write_lock:
            self._versions.pop(version_id, None)

    def evaluate(self, version_id: str, record: FeatureRecord) -> ScoreOutcome:
        version = self.get(version_id)
        if not version.retained:
            raise SpoliationSignal(
                f"version {version_id} is no longer retained; evaluation refused"
            )
        model = version.model
        replicates = max(1, int(getattr(model, "replicates", 1)))
        scores = [float(model.score(record, r)) for r in range(replicates)]
        score = quantize(sum(scores) / len(scores))
        lo, hi = (score, score) if replicates == 1 else (min(scores), max(scores))
        return ScoreOutcome(
            score=score,
            confidence=(lo, hi),
            percentile=version.population.percentile_of(score),
            label=version.threshold_policy.label_for(score),
            model_version=version_id,
            evaluated_at=self._clock.now(),
        )

    def threshold_percentile(self, version_id: str) -> float:
        version = self.get(version_id)
        return version.population.percentile_of(version.threshold_policy.decision_threshold)

    def resolve_decision_version(self, decision: AdverseDecision) -> VersionResolution:
        version = self._versions.get(decision.model_version)
        if version is None or not version.retained:
            return VersionResolution.ORIGINAL_NOT_RETAINED
        newer = any(
            v.model_name == version.model_name and v.created_at > version.created_at
            for v in self._versions.values()
            if v.version_id != version.version_id
        )
        if newer:
            return VersionResolution.UPDATED_ORIGINAL_RETAINED
        return VersionResolution.SAME_VERSION

    # -- descriptor files ---------------------------------------------------

    def register_from_descriptor(self, path: str | Path) -> str:
        """Register a version from a model plug-in descriptor file."""
        path = Path(path)
        spec = yaml.safe_load(path.read_text(encoding="utf-8"))
        return self.register_from_spec(spec, base_dir=path.parent)

    def register_from_spec(self, spec: Mapping[str, Any], base_dir: str | Path = ".") -> str:
        base_dir = Path(base_dir)
        domain = parse_domain(spec["domain"])
        kind = spec["kind"]
        if kind == "fixture":
            fx = spec["fixture"]
            model: DecisionModel = FixtureModel.from_cases(
                domain, fx["cases"], fx["fallback_score"]
            )
        elif kind == "linear":
            lin = spec["linear"]
            model = LinearModel(lin["base_score"], lin.get("weights"))
        elif kind == "tuned_linear":
            lin = spec["linear"]
            model = TunedLinearModel(
                LinearModel(lin["base_score"], lin.get("weights")),
                suppressed=spec.get("suppressed_digests", []),
                masked_score=spec["masked_score"],
            )
        else:
            raise ValueError(f"unknown model kind: {kind!r}")
        if spec.get("replicates", 1) > 1:
            model = JitterModel(model, spec.get("jitter_spread", 0.0), spec["replicates"])

        if "population" in spec:
            scores = [float(s) for s in spec["population"]]
        else:
            scores = load_population_file(base_dir / spec["population_file"])
        population = ReferencePopulation(
            population_id=spec.get("population_id", f"{spec['version_id']}/population"),
            scores=scores,
            snapshot_at=self._clock.now(),
        )
        return self.register_version(
            model,
            version_id=spec["version_id"],
            model_name=spec.get("model_name", spec["version_id"].split("@")[0]),
            policy=ThresholdPolicy(float(spec["threshold"])),
            population=population,
        )


def load_population_file(path: str | Path) -> list[float]:
    """Population file format: one decimal score per line."""
    scores = []
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        line = line.strip()
        if line:
            scores.append(float(line))
    return scores
