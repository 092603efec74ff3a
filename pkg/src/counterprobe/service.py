"""HTTP/JSON API binding the sandbox together, with tiered access control.

Access tiers by domain:
  tier 1 (criminal_justice, healthcare, employment, housing, credit):
         direct interrogation for the affected party.
  tier 2 (content_moderation, insurance, education): representative-
         mediated interrogation; representatives get direct access.
  tier 3 (recommendation, advertising): aggregate disclosure only.
  fraud_detection: time-delayed 48h, then representative-mediated.
Regulators get direct access everywhere; organization admins administer
models and see aggregates but never open sessions.

Every state-changing route lands in the audit ledger before the response
is acknowledged.
"""
from __future__ import annotations

import argparse
import os
import time
from dataclasses import dataclass, field as dataclass_field
from datetime import datetime, timedelta
from enum import Enum
from pathlib import Path
from typing import Any, Mapping, Optional

import yaml
from fastapi import Depends, FastAPI, Header, Request, Response
from fastapi.responses import JSONResponse
from pydantic import BaseModel

from .audit import AuditLedger
from .canonical import quantize, utc
from .clock import Clock, FixedClock, SystemClock
from .divergence import Templates
from .errors import (
    AccessDeniedError,
    AggregateGroupError,
    AggregateOnlyError,
    BudgetExhaustedError,
    CounterprobeError,
    CrossAppLimitExceededError,
    DelayedAccessError,
    DuplicateSessionError,
    DuplicateVersionError,
    EmptyPopulationError,
    FieldMissingError,
    InsufficientProbesError,
    InsufficientReplicatesError,
    MalformedInstanceError,
    MediatedAccessError,
    NotAdverseError,
    SessionClosedError,
    SpoliationSignal,
    StaleInstanceError,
    UnknownDomainError,
    UnknownSessionError,
    UnknownVersionError,
    UnresolvableClassError,
    VersionMismatchError,
    WindowExpiredError,
)
from .fixtures import load_bundle
from .host import AdverseDecision, Label, ModelRegistry, ScoreOutcome
from .perturbations import REMOVED, PerturbationInstance, PerturbationRegistry
from .records import Domain, FeatureRecord, parse_domain
from .sessions import SessionManager

FRAUD_DELAY_HOURS = 48


class Role(str, Enum):
    AFFECTED_PARTY = "affected_party"
    REPRESENTATIVE = "representative"
    REGULATOR = "regulator"
    ORGANIZATION_ADMIN = "organization_admin"


TIER1 = frozenset(
    {Domain.CRIMINAL_JUSTICE, Domain.HEALTHCARE, Domain.EMPLOYMENT, Domain.HOUSING, Domain.CREDIT}
)
TIER2 = frozenset({Domain.CONTENT_MODERATION, Domain.INSURANCE, Domain.EDUCATION})
TIER3 = frozenset({Domain.RECOMMENDATION, Domain.ADVERTISING})
SPECIAL = frozenset({Domain.FRAUD_DETECTION})


def tier_of(domain: Domain, overrides: Optional[Mapping[str, str]] = None) -> str:
    if overrides and domain.value in overrides:
        return overrides[domain.value]
    if domain in TIER1:
        return "tier1"
    if domain in TIER2:
        return "tier2"
    if domain in TIER3:
        return "tier3"
    return "special_fraud"


@dataclass(frozen=True)
class AccessMode:
    mode: str  # direct | mediated | aggregate_only | delayed
    until: Optional[datetime] = None

    def to_json(self) -> dict[str, Any]:
        out: dict[str, Any] = {"mode": self.mode}
        if self.until is not None:
            out["until"] = utc(self.until).isoformat()
        return out


def enforce_tier(
    domain: Domain,
    role: Role,
    decided_at: datetime,
    now: datetime,
    *,
    delay_hours: int = FRAUD_DELAY_HOURS,
    overrides: Optional[Mapping[str, str]] = None,
) -> AccessMode:
    """Pure access-mode decision for (domain, role, timestamps)."""
    if role is Role.REGULATOR:
        return AccessMode("direct")
    tier = tier_of(domain, overrides)
    if role is Role.ORGANIZATION_ADMIN:
        return AccessMode("aggregate_only")
    if tier == "special_fraud":
        gate = utc(decided_at) + timedelta(hours=delay_hours)
        if utc(now) < gate:
            return AccessMode("delayed", until=gate)
        return AccessMode("direct" if role is Role.REPRESENTATIVE else "mediated")
    if tier == "tier1":
        return AccessMode("direct")
    if tier == "tier2":
        return AccessMode("direct" if role is Role.REPRESENTATIVE else "mediated")
    return AccessMode("aggregate_only")


# Explicit route-by-role policy; the authorization property test enumerates
# this table against observed behavior.
ROUTE_POLICY: dict[str, Any] = {
    "POST /sessions": "tier",
    "GET /sessions/{id}": "owner_or_regulator",
    "GET /sessions/{id}/suite": "owner_or_regulator",
    "POST /sessions/{id}/queries": "owner_or_regulator",
    "POST /sessions/{id}/close": "owner_or_regulator",
    "GET /sessions/{id}/report": "owner_or_regulator",
    "GET /registry/{domain}": "any",
    "GET /aggregate/{version}": "any",
    "POST /admin/models": {Role.ORGANIZATION_ADMIN},
    "POST /admin/decisions": {Role.ORGANIZATION_ADMIN},
    "GET /audit/verify": {Role.REGULATOR},
}

_STATUS_BY_ERROR: dict[type, int] = {
    UnknownVersionError: 404,
    UnknownSessionError: 404,
    UnknownDomainError: 404,
    DuplicateVersionError: 409,
    DuplicateSessionError: 409,
    BudgetExhaustedError: 409,
    StaleInstanceError: 409,
    SessionClosedError: 409,
    SpoliationSignal: 409,
    WindowExpiredError: 410,
    CrossAppLimitExceededError: 429,
    NotAdverseError: 422,
    MalformedInstanceError: 422,
    FieldMissingError: 422,
    VersionMismatchError: 422,
    UnresolvableClassError: 422,
    InsufficientReplicatesError: 422,
    InsufficientProbesError: 422,
    EmptyPopulationError: 422,
    AggregateGroupError: 422,
    AccessDeniedError: 403,
    MediatedAccessError: 403,
    AggregateOnlyError: 403,
}


def _status_for(err: CounterprobeError) -> int:
    for klass in type(err).__mro__:
        if klass in _STATUS_BY_ERROR:
            return _STATUS_BY_ERROR[klass]
    return 500


# ---------------------------------------------------------------------------
# Configuration and state
# ---------------------------------------------------------------------------


@dataclass
class ServiceConfig:
    host: str = "127.0.0.1"
    port: int = 8420
    data_dir: Path = Path("./counterprobe-data")
    clock_mode: str = "system"  # "system" or a fixed ISO timestamp
    anomaly_k: int = 10
    response_deadline_hours: float = 48.0
    aggregate_min_cell: int = 10
    fraud_delay_hours: int = FRAUD_DELAY_HOURS
    window_days: int = 30
    budget_limit: int = 50
    cross_app_limit: int = 10
    thresholds: dict[str, Any] = dataclass_field(default_factory=dict)
    tier_overrides: dict[str, str] = dataclass_field(default_factory=dict)
    credentials: dict[str, dict[str, str]] = dataclass_field(default_factory=dict)
    demo_fixtures: bool = False

    @classmethod
    def load(cls, path: Optional[str | Path] = None) -> "ServiceConfig":
        cfg = cls()
        if path is not None:
            doc = yaml.safe_load(Path(path).read_text(encoding="utf-8")) or {}
            listen = doc.get("listen", {})
            cfg.host = listen.get("host", cfg.host)
            cfg.port = int(listen.get("port", cfg.port))
            cfg.data_dir = Path(doc.get("data_dir", cfg.data_dir))
            cfg.clock_mode = str(doc.get("clock", cfg.clock_mode))
            cfg.anomaly_k = int(doc.get("anomaly_k", cfg.anomaly_k))
            cfg.response_deadline_hours = float(
                doc.get("response_deadline_hours", cfg.response_deadline_hours)
            )
            cfg.aggregate_min_cell = int(doc.get("aggregate_min_cell", cfg.aggregate_min_cell))
            cfg.fraud_delay_hours = int(doc.get("fraud_delay_hours", cfg.fraud_delay_hours))
            cfg.window_days = int(doc.get("window_days", cfg.window_days))
            cfg.budget_limit = int(doc.get("budget_limit", cfg.budget_limit))
            cfg.cross_app_limit = int(doc.get("cross_app_limit", cfg.cross_app_limit))
            cfg.thresholds = dict(doc.get("thresholds", {}))
            cfg.tier_overrides = dict(doc.get("tier_overrides", {}))
            cfg.credentials = {k: dict(v) for k, v in doc.get("credentials", {}).items()}
            cfg.demo_fixtures = bool(doc.get("demo_fixtures", cfg.demo_fixtures))
        env_dir = os.environ.get("COUNTERPROBE_DATA_DIR")
        if env_dir:
            cfg.data_dir = Path(env_dir)
        return cfg


DEMO_CREDENTIALS = {
    "demo-party": {"role": "affected_party", "requester_id": "maria-g"},
    "demo-rep": {"role": "representative", "requester_id": "rep-01"},
    "demo-regulator": {"role": "regulator", "requester_id": "reg-01"},
    "demo-admin": {"role": "organization_admin", "requester_id": "org-01"},
}


@dataclass(frozen=True)
class Credential:
    key: str
    role: Role
    requester_id: str


class ServiceState:
    """Everything one service instance owns (single-tenant deployment)."""

    def __init__(self, config: ServiceConfig, *, clock: Optional[Clock] = None):
        self.config = config
        if clock is not None:
            self.clock = clock
        elif config.clock_mode == "system":
            self.clock = SystemClock()
        else:
            self.clock = FixedClock(datetime.fromisoformat(config.clock_mode))
        config.data_dir.mkdir(parents=True, exist_ok=True)
        self.models = ModelRegistry(clock=self.clock)
        self.perturbations = PerturbationRegistry.load_default()
        self.audit = AuditLedger(
            clock=self.clock, path=config.data_dir / "audit.jsonl", anomaly_k=config.anomaly_k
        )
        self.sessions = SessionManager(
            self.models,
            self.perturbations,
            clock=self.clock,
            audit=self.audit,
            journal_path=config.data_dir / "sessions.jsonl",
            window_days=config.window_days,
            budget_limit=config.budget_limit,
            cross_app_limit=config.cross_app_limit,
            divergence_overrides=config.thresholds,
            templates=Templates.load_default(),
        )
        self.sessions.recover_journal()
        self.decisions: dict[str, AdverseDecision] = {}
        credentials = config.credentials or DEMO_CREDENTIALS
        self.credentials = {
            key: Credential(key=key, role=Role(spec["role"]), requester_id=spec["requester_id"])
            for key, spec in credentials.items()
        }
        if config.demo_fixtures:
            self.load_demo_fixtures()
        models_dir = config.data_dir / "models"
        if models_dir.is_dir():
            for descriptor in sorted(models_dir.glob("*.yaml")):
                self.models.register_from_descriptor(descriptor)

    def load_demo_fixtures(self) -> None:
        decided_at = self.clock.now() - timedelta(days=1)
        for name, decision_id in (("maria_screen", "maria-001"), ("tenant_screen", "tenant-001")):
            bundle = load_bundle(name)
            if not self.models.has(bundle.version_id):
                bundle.register(self.models)
            if decision_id not in self.decisions:
                self.decisions[decision_id] = bundle.make_decision(
                    self.models, decision_id, decided_at
                )

    def add_decision(self, decision: AdverseDecision) -> None:
        self.decisions[decision.decision_id] = decision

    def get_decision(self, decision_id: str) -> AdverseDecision:
        try:
            return self.decisions[decision_id]
        except KeyError:
            raise UnknownSessionError(f"unknown decision: {decision_id}") from None

    def authenticate(self, api_key: Optional[str]) -> Credential:
        if api_key is None or api_key not in self.credentials:
            raise AccessDeniedError("missing or unknown API key")
        return self.credentials[api_key]


def aggregate_disclosure(
    state: ServiceState, version_id: str, group_by: str
) -> dict[str, Any]:
    """Group counts and adverse rates over recorded decisions for a version.

    Cells under the minimum group size are suppressed; output never
    contains an individual record.
    """
    state.models.get(version_id)  # raises UnknownVersionError
    groups: dict[str, list[AdverseDecision]] = {}
    for decision in state.decisions.values():
        if decision.model_version != version_id:
            continue
        value = decision.record.features.get(group_by)
        if value is None:
            continue
        if not isinstance(value, str) or any(ch.isspace() for ch in value) or len(value) > 40:
            raise AggregateGroupError(
                f"feature {group_by!r} is not a categorical token; aggregate disclosure "
                "requires token-valued grouping features"
            )
        groups.setdefault(value, []).append(decision)

    table: dict[str, Any] = {}
    for value, decisions in sorted(groups.items()):
        if len(decisions) < state.config.aggregate_min_cell:
            table[value] = {"suppressed": True}
            continue
        adverse = sum(1 for d in decisions if d.outcome.label is Label.REJECT)
        table[value] = {
            "count": len(decisions),
            "adverse_rate": quantize(adverse / len(decisions)),
        }
    return {
        "version_id": version_id,
        "group_by": group_by,
        "minimum_group_size": state.config.aggregate_min_cell,
        "groups": table,
    }


# ---------------------------------------------------------------------------
# HTTP app
# ---------------------------------------------------------------------------


class InstanceBody(BaseModel):
    class_id: str
    field: str
    substituted_value: Any = None
    remove: bool = False
    instance_id: Optional[str] = None


class QueryBody(BaseModel):
    instance: InstanceBody


class OpenSessionBody(BaseModel):
    decision_id: str


class ModelSpecBody(BaseModel):
    spec: dict[str, Any]


class DecisionBody(BaseModel):
    decision_id: str
    version_id: str
    record: dict[str, Any]
    decided_at: str


def create_app(state: ServiceState) -> FastAPI:
    app = FastAPI(title="counterprobe interrogation service", version="1")
    app.state.service = state

    def current(api_key: Optional[str] = Header(default=None, alias="X-Api-Key")) -> Credential:
        return state.authenticate(api_key)

    def owner_or_regulator(session_id: str, who: Credential):
        session = state.sessions.get_session(session_id)
        if who.role is Role.REGULATOR or session.requester_id == who.requester_id:
            return session
        raise AccessDeniedError(f"session {session_id} does not belong to {who.requester_id}")

    @app.exception_handler(CounterprobeError)
    async def counterprobe_error_handler(request: Request, err: CounterprobeError):
        if isinstance(err, DelayedAccessError):
            now = state.clock.now()
            due_by = now + timedelta(hours=state.config.response_deadline_hours)
            return JSONResponse(
                status_code=202,
                content={
                    "code": err.code,
                    "message": str(err),
                    "retriable": True,
                    "status": "queued",
                    "retry_at": utc(err.retry_at).isoformat(),
                    "due_by": due_by.isoformat(),
                },
            )
        return JSONResponse(
            status_code=_status_for(err),
            content={"code": err.code, "message": str(err), "retriable": err.retriable},
        )

    @app.middleware("http")
    async def response_deadline(request: Request, call_next):
        started = time.monotonic()
        response = await call_next(request)
        deadline_s = state.config.response_deadline_hours * 3600.0
        elapsed = time.monotonic() - started
        if elapsed > deadline_s:
            state.audit.append(
                "admin",
                {
                    "action": "response_deadline_breach",
                    "path": request.url.path,
                    "elapsed_seconds": elapsed,
                    "deadline_hours": state.config.response_deadline_hours,
                },
            )
        response.headers["X-Due-By"] = (
            state.clock.now() + timedelta(hours=state.config.response_deadline_hours)
        ).isoformat()
        return response

    # -- sessions -----------------------------------------------------------

    @app.post("/sessions", status_code=201)
    def open_session(body: OpenSessionBody, who: Credential = Depends(current)):
        decision = state.get_decision(body.decision_id)
        access = enforce_tier(
            decision.domain,
            who.role,
            decision.decided_at,
            state.clock.now(),
            delay_hours=state.config.fraud_delay_hours,
            overrides=state.config.tier_overrides,
        )
        if access.mode == "delayed":
            raise DelayedAccessError(
                f"{decision.domain.value} decisions become contestable "
                f"{state.config.fraud_delay_hours}h after action",
                retry_at=access.until,
            )
        if access.mode == "mediated":
            raise MediatedAccessError(
                f"{decision.domain.value} interrogation requires a licensed representative"
            )
        if access.mode == "aggregate_only":
            raise AggregateOnlyError(
                f"{decision.domain.value} offers aggregate disclosure only"
            )
        session = state.sessions.open_session(decision, who.requester_id)
        return session.to_json(state.clock.now())

    @app.get("/sessions/{session_id}")
    def view_session(session_id: str, who: Credential = Depends(current)):
        session = owner_or_regulator(session_id, who)
        return session.to_json(state.clock.now())

    @app.get("/sessions/{session_id}/suite")
    def session_suite(session_id: str, who: Credential = Depends(current)):
        session = owner_or_regulator(session_id, who)
        suite = state.perturbations.default_suite(
            session.decision.domain, session.decision.record
        )
        instances = []
        for inst in suite.instances:
            entry = inst.to_json()
            entry["label"] = state.perturbations.label_for(inst)
            entry["description"] = inst.describe()
            cls = state.perturbations.find_class(inst.class_id)
            entry["rationale"] = cls.description if cls else ""
            instances.append(entry)
        return {"instances": instances, "warnings": list(suite.warnings)}

    @app.post("/sessions/{session_id}/queries")
    def submit_query(session_id: str, body: QueryBody, who: Credential = Depends(current)):
        session = owner_or_regulator(session_id, who)
        spec = body.instance
        record = session.decision.record
        if spec.field not in record.features:
            raise FieldMissingError(f"decision record has no feature {spec.field!r}")
        substituted = REMOVED if spec.remove else spec.substituted_value
        instance = PerturbationInstance(
            instance_id=spec.instance_id or "pending",
            class_id=spec.class_id,
            field=spec.field,
            original_value=record.features[spec.field],
            substituted_value=substituted,
        )
        if spec.instance_id is None:
            instance = PerturbationInstance(
                instance_id=f"{spec.class_id}.{spec.field}.{instance.digest()[:8]}",
                class_id=instance.class_id,
                field=instance.field,
                original_value=instance.original_value,
                substituted_value=instance.substituted_value,
            )
        result, replayed = state.sessions.submit_query(session_id, instance)
        return {
            "result": result.to_json(),
            "replayed": replayed,
            "session": state.sessions.get_session(session_id).to_json(state.clock.now()),
        }

    @app.post("/sessions/{session_id}/close")
    def close_session(session_id: str, who: Credential = Depends(current)):
        owner_or_regulator(session_id, who)
        package = state.sessions.close_session(session_id)
        return {
            "report": package.report.to_json(),
            "report_text": package.report_text,
            "audit_extract": list(package.audit_extract),
        }

    @app.get("/sessions/{session_id}/report")
    def get_report(session_id: str, who: Credential = Depends(current)):
        owner_or_regulator(session_id, who)
        report = state.sessions.report(session_id)
        return Response(content=report.to_canonical_json(), media_type="application/json")

    # -- registry and aggregates ---------------------------------------------

    @app.get("/registry/{domain}")
    def get_registry(domain: str, who: Credential = Depends(current)):
        classes = state.perturbations.load_registry(parse_domain(domain))
        return {
            "domain": domain,
            "classes": [
                {
                    "class_id": c.class_id,
                    "label": c.label,
                    "kind": c.kind.value,
                    "direction": c.direction.value,
                    "origin": c.origin.value,
                    "rationale": c.description,
                    "matchers": list(c.matchers),
                    "priority": c.priority,
                }
                for c in classes
            ],
        }

    @app.get("/aggregate/{version_id}")
    def get_aggregate(version_id: str, group_by: str, who: Credential = Depends(current)):
        return aggregate_disclosure(state, version_id, group_by)

    # -- admin and audit -------------------------------------------------------

    @app.post("/admin/models", status_code=201)
    def register_model(body: ModelSpecBody, who: Credential = Depends(current)):
        if who.role is not Role.ORGANIZATION_ADMIN:
            raise AccessDeniedError("model registration requires the organization_admin role")
        state.audit.append(
            "admin",
            {"action": "register_model", "version_id": body.spec.get("version_id")},
        )
        version_id = state.models.register_from_spec(body.spec, base_dir=state.config.data_dir)
        return {"version_id": version_id}

    @app.post("/admin/decisions", status_code=201)
    def register_decision(body: DecisionBody, who: Credential = Depends(current)):
        if who.role is not Role.ORGANIZATION_ADMIN:
            raise AccessDeniedError("decision ingestion requires the organization_admin role")
        record = FeatureRecord.from_json(body.record)
        decided_at = datetime.fromisoformat(body.decided_at)
        evaluated = state.models.evaluate(body.version_id, record)
        outcome = ScoreOutcome(
            score=evaluated.score,
            confidence=evaluated.confidence,
            percentile=evaluated.percentile,
            label=evaluated.label,
            model_version=evaluated.model_version,
            evaluated_at=decided_at,
        )
        decision = AdverseDecision(
            decision_id=body.decision_id,
            record=record,
            outcome=outcome,
            model_version=body.version_id,
            decided_at=decided_at,
            domain=record.domain,
        )
        state.audit.append(
            "admin",
            {
                "action": "register_decision",
                "decision_id": decision.decision_id,
                "model_version": decision.model_version,
            },
        )
        state.add_decision(decision)
        return {
            "decision_id": decision.decision_id,
            "label": outcome.label.value,
            "score": outcome.score,
        }

    @app.get("/audit/verify")
    def audit_verify(who: Credential = Depends(current)):
        if who.role is not Role.REGULATOR:
            raise AccessDeniedError("chain verification requires the regulator role")
        result = state.audit.verify_chain()
        out = result.to_json()
        out["entries"] = len(state.audit)
        return out

    return app


def main(argv: Optional[list[str]] = None) -> int:
    parser = argparse.ArgumentParser(prog="counterprobe-service")
    parser.add_argument("--config", help="YAML config file")
    parser.add_argument("--host", help="listen address override")
    parser.add_argument("--port", type=int, help="listen port override")
    parser.add_argument(
        "--demo", action="store_true", help="load the bundled demo models and decisions"
    )
    args = parser.parse_args(argv)

    config = ServiceConfig.load(args.config)
    if args.host:
        config.host = args.host
    if args.port:
        config.port = args.port
    if args.demo:
        config.demo_fixtures = True

    state = ServiceState(config)
    app = create_app(state)

    import uvicorn

    uvicorn.run(app, host=config.host, port=config.port, log_level="warning")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
