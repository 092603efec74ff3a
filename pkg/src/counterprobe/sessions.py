"""Interrogation sessions: window, budgets, dedup, and evidence packages.

Budget rules implemented here:
  * 50 distinct queries per decision; identical replays return the cached
    result and cost nothing (they add zero information, and are still
    audit-logged).
  * 10 cross-application queries per requester per UTC calendar month,
    debited only on second-and-later concurrent applications; the first
    application is governed by its own per-decision budget alone.
  * A 30-day window from the decision gates both opening and submission.

Per-session operations are serialized behind one lock; distinct sessions
proceed in parallel. All state changes are journaled as append-only JSON
lines so a crashed process recovers by replay.
"""
from __future__ import annotations

import json
import threading
from dataclasses import dataclass, field
from datetime import datetime, timedelta
from enum import Enum
from pathlib import Path
from typing import Any, Callable, Mapping, Optional

from .canonical import canonical_json, payload_digest, utc
from .clock import Clock, SystemClock
from .divergence import (
    DivergenceConfig,
    DivergenceReport,
    QueryResult,
    Templates,
    compile_report,
)
from .errors import (
    BudgetExhaustedError,
    CrossAppLimitExceededError,
    DuplicateSessionError,
    MalformedInstanceError,
    NotAdverseError,
    SessionClosedError,
    SpoliationSignal,
    UnknownSessionError,
    WindowExpiredError,
)
from .host import (
    AdverseDecision,
    Label,
    ModelRegistry,
    ScoreOutcome,
    VersionResolution,
)
from .perturbations import PerturbationInstance, PerturbationRegistry, apply_instance

WINDOW_DAYS = 30
BUDGET_LIMIT = 50
CROSS_APP_LIMIT = 10


class SessionState(str, Enum):
    OPEN = "open"
    CLOSED = "closed"
    EXPIRED = "expired"


@dataclass
class InterrogationSession:
    session_id: str
    decision: AdverseDecision
    requester_id: str
    opened_at: datetime
    window_deadline: datetime
    budget_limit: int = BUDGET_LIMIT
    queries_used: int = 0
    state: SessionState = SessionState.OPEN
    results: list[QueryResult] = field(default_factory=list)
    dedup_index: dict[str, str] = field(default_factory=dict)  # digest -> result_id
    spoliation_flag: bool = False
    version_resolution: VersionResolution = VersionResolution.SAME_VERSION
    cross_app_billable: bool = False
    baseline_outcome: Optional[ScoreOutcome] = None
    closed_at: Optional[datetime] = None

    @property
    def decision_id(self) -> str:
        return self.decision.decision_id

    @property
    def model_version(self) -> str:
        return self.decision.model_version

    @property
    def remaining_budget(self) -> int:
        return self.budget_limit - self.queries_used

    def effective_state(self, now: datetime) -> SessionState:
        if self.state is SessionState.OPEN and now > self.window_deadline:
            return SessionState.EXPIRED
        return self.state

    def to_json(self, now: datetime) -> dict[str, Any]:
        return {
            "session_id": self.session_id,
            "decision_id": self.decision_id,
            "requester_id": self.requester_id,
            "model_version": self.model_version,
            "opened_at": self.opened_at.isoformat(),
            "window_deadline": self.window_deadline.isoformat(),
            "budget_limit": self.budget_limit,
            "queries_used": self.queries_used,
            "remaining_budget": self.remaining_budget,
            "state": self.effective_state(now).value,
            "spoliation_flag": self.spoliation_flag,
            "version_resolution": self.version_resolution.value,
            "cross_app_billable": self.cross_app_billable,
            "closed_at": self.closed_at.isoformat() if self.closed_at else None,
        }


class RequesterLedger:
    """Cross-application query accounting, bucketed by UTC calendar month."""

    def __init__(self, limit: int = CROSS_APP_LIMIT):
        self.limit = limit
        self._used: dict[tuple[str, int, int], int] = {}
        self._lock = threading.Lock()

    @staticmethod
    def bucket_of(now: datetime) -> tuple[int, int]:
        now = utc(now)
        return (now.year, now.month)

    def used(self, requester_id: str, now: datetime) -> int:
        year, month = self.bucket_of(now)
        with self._lock:
            return self._used.get((requester_id, year, month), 0)

    def debit(self, requester_id: str, now: datetime) -> int:
        """Atomically consume one cross-application query."""
        year, month = self.bucket_of(now)
        key = (requester_id, year, month)
        with self._lock:
            used = self._used.get(key, 0)
            if used >= self.limit:
                raise CrossAppLimitExceededError(
                    f"requester {requester_id} has used all {self.limit} "
                    f"cross-application queries for {year}-{month:02d}"
                )
            self._used[key] = used + 1
            return used + 1

    def restore(self, requester_id: str, now: datetime) -> None:
        """Refund one debit (evaluation failed after the ledger charge)."""
        year, month = self.bucket_of(now)
        key = (requester_id, year, month)
        with self._lock:
            if self._used.get(key, 0) > 0:
                self._used[key] -= 1


@dataclass(frozen=True)
class EvidencePackage:
    """What the affected party files: report (two renderings) + audit extract."""

    report: DivergenceReport
    audit_extract: tuple[dict, ...]

    @property
    def report_json(self) -> str:
        return self.report.to_canonical_json()

    @property
    def report_text(self) -> str:
        return self.report.render_text()

    def write_to(self, directory: str | Path) -> Path:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        (directory / "report.json").write_text(self.report_json, encoding="utf-8")
        (directory / "report.txt").write_text(self.report_text, encoding="utf-8")
        with (directory / "audit_extract.jsonl").open("w", encoding="utf-8") as fh:
            for entry in self.audit_extract:
                fh.write(canonical_json(entry) + "\n")
        return directory


class SessionManager:
    """Owns every session plus the shared requester ledger."""

    def __init__(
        self,
        models: ModelRegistry,
        perturbations: PerturbationRegistry,
        *,
        clock: Optional[Clock] = None,
        audit=None,  # audit.AuditLedger | None
        journal_path: Optional[str | Path] = None,
        window_days: int = WINDOW_DAYS,
        budget_limit: int = BUDGET_LIMIT,
        cross_app_limit: int = CROSS_APP_LIMIT,
        divergence_overrides: Optional[Mapping[str, Any]] = None,
        templates: Optional[Templates] = None,
    ):
        self.models = models
        self.perturbations = perturbations
        self.clock = clock or SystemClock()
        self.audit = audit
        self.window_days = window_days
        self.budget_limit = budget_limit
        self.ledger = RequesterLedger(cross_app_limit)
        self.divergence_overrides = dict(divergence_overrides or {})
        self.templates = templates
        self.sessions: dict[str, InterrogationSession] = {}
        self._session_locks: dict[str, threading.Lock] = {}
        self._manager_lock = threading.Lock()
        self._session_counter = 0
        self._journal_path = Path(journal_path) if journal_path else None
        self._journal_lock = threading.Lock()
        # test seam: called after the audit append, before state commit
        self._post_audit_hook: Optional[Callable[[str], None]] = None

    # -- plumbing -----------------------------------------------------------

    def _journal(self, event: dict[str, Any]) -> None:
        if self._journal_path is None:
            return
        with self._journal_lock:
            with self._journal_path.open("a", encoding="utf-8") as fh:
                fh.write(canonical_json(event) + "\n")

    def _audit(self, kind: str, payload: dict[str, Any]) -> None:
        if self.audit is not None:
            self.audit.append(kind, payload)
        if self._post_audit_hook is not None:
            self._post_audit_hook(kind)

    def _lock_for(self, session_id: str) -> threading.Lock:
        with self._manager_lock:
            return self._session_locks.setdefault(session_id, threading.Lock())

    def get_session(self, session_id: str) -> InterrogationSession:
        try:
            return self.sessions[session_id]
        except KeyError:
            raise UnknownSessionError(f"unknown session: {session_id}") from None

    def divergence_config(self, version_id: str) -> DivergenceConfig:
        version = self.models.get(version_id)
        return DivergenceConfig(
            decision_threshold=version.threshold_policy.decision_threshold,
            threshold_percentile=self.models.threshold_percentile(version_id),
            **self.divergence_overrides,
        )

    # -- operations ----------------------------------------------------------

    def open_session(self, decision: AdverseDecision, requester_id: str) -> InterrogationSession:
        now = self.clock.now()
        if decision.outcome.label is not Label.REJECT:
            raise NotAdverseError(
                f"decision {decision.decision_id} is not adverse; no interrogation right attaches"
            )
        deadline = decision.decided_at + timedelta(days=self.window_days)
        if now > deadline:
            raise WindowExpiredError(
                f"decision {decision.decision_id} left its {self.window_days}-day window "
                f"on {deadline.isoformat()}"
            )

        with self._manager_lock:
            for existing in self.sessions.values():
                if (
                    existing.decision_id == decision.decision_id
                    and existing.requester_id == requester_id
                    and existing.effective_state(now) is SessionState.OPEN
                ):
                    raise DuplicateSessionError(
                        f"requester {requester_id} already has an open session for "
                        f"{decision.decision_id}"
                    )
            billable = any(
                s.requester_id == requester_id
                and s.decision_id != decision.decision_id
                and s.effective_state(now) is SessionState.OPEN
                for s in self.sessions.values()
            )
            self._session_counter += 1
            session_id = f"s{self._session_counter:05d}"

        resolution = self.models.resolve_decision_version(decision)
        spoliation = resolution is VersionResolution.ORIGINAL_NOT_RETAINED
        baseline = None
        if not spoliation:
            baseline = self.models.evaluate(decision.model_version, decision.record)

        session = InterrogationSession(
            session_id=session_id,
            decision=decision,
            requester_id=requester_id,
            opened_at=now,
            window_deadline=deadline,
            budget_limit=self.budget_limit,
            spoliation_flag=spoliation,
            version_resolution=resolution,
            cross_app_billable=billable,
            baseline_outcome=baseline,
        )
        self._audit(
            "session_open",
            {
                "session_id": session_id,
                "decision_id": decision.decision_id,
                "requester_id": requester_id,
                "model_version": decision.model_version,
                "version_resolution": resolution.value,
                "spoliation_flag": spoliation,
                "cross_app_billable": billable,
                "opened_at": now.isoformat(),
            },
        )
        self._journal(
            {
                "event": "session_open",
                "session": {
                    "session_id": session_id,
                    "requester_id": requester_id,
                    "opened_at": now.isoformat(),
                    "window_deadline": deadline.isoformat(),
                    "budget_limit": self.budget_limit,
                    "spoliation_flag": spoliation,
                    "version_resolution": resolution.value,
                    "cross_app_billable": billable,
                    "baseline_outcome": baseline.to_json() if baseline else None,
                },
                "decision": {
                    "decision_id": decision.decision_id,
                    "record": decision.record.to_json(),
                    "outcome": decision.outcome.to_json(),
                    "model_version": decision.model_version,
                    "decided_at": decision.decided_at.isoformat(),
                    "domain": decision.domain.value,
                },
            }
        )
        with self._manager_lock:
            self.sessions[session_id] = session
        return session

    def submit_query(
        self, session_id: str, instance: PerturbationInstance
    ) -> tuple[QueryResult, bool]:
        """Run one perturbation. Returns (result, replayed).

        Replays of an identical perturbation return the cached result and
        leave every budget untouched.
        """
        session = self.get_session(session_id)
        with self._lock_for(session_id):
            now = self.clock.now()
            state = session.effective_state(now)
            if state is SessionState.CLOSED:
                raise SessionClosedError(f"session {session_id} is closed")
            if state is SessionState.EXPIRED:
                raise WindowExpiredError(
                    f"session {session_id} expired on {session.window_deadline.isoformat()}"
                )

            digest = instance.digest()
            if digest in session.dedup_index:
                cached_id = session.dedup_index[digest]
                cached = next(r for r in session.results if r.result_id == cached_id)
                self._audit(
                    "query",
                    {
                        "session_id": session_id,
                        "requester_id": session.requester_id,
                        "instance_digest": digest,
                        "replay": True,
                        "result_id": cached_id,
                    },
                )
                return cached, True

            if session.queries_used >= session.budget_limit:
                raise BudgetExhaustedError(
                    f"session {session_id} has used all {session.budget_limit} queries"
                )
            if session.baseline_outcome is None:
                raise SpoliationSignal(
                    f"version {session.model_version} is unavailable; queries cannot run "
                    "and the spoliation presumption applies"
                )
            status = self.perturbations.validate_instance(instance)
            if instance.status is not status:
                instance = PerturbationInstance(
                    instance_id=instance.instance_id,
                    class_id=instance.class_id,
                    field=instance.field,
                    original_value=instance.original_value,
                    substituted_value=instance.substituted_value,
                    status=status,
                )
            if any(r.result_id == instance.instance_id for r in session.results):
                raise MalformedInstanceError(
                    f"instance_id {instance.instance_id!r} already used in this session"
                )

            debited = False
            if session.cross_app_billable:
                self.ledger.debit(session.requester_id, now)
                debited = True
            # audit, then journal, then memory: a crash at any point leaves
            # a state the journal replays consistently, and nothing becomes
            # externally visible before its audit entry is acknowledged
            try:
                perturbed_record = apply_instance(session.decision.record, instance)
                perturbed = self.models.evaluate(session.model_version, perturbed_record)
                result = QueryResult(
                    instance=instance,
                    baseline=session.baseline_outcome,
                    perturbed=perturbed,
                )
                self._audit(
                    "query",
                    {
                        "session_id": session_id,
                        "requester_id": session.requester_id,
                        "instance_digest": digest,
                        "replay": False,
                        "result_id": result.result_id,
                        "instance": instance.to_json(),
                        "score_delta": result.score_delta,
                        "percentile_delta": result.percentile_delta,
                        "cross_app_debited": debited,
                    },
                )
                self._journal(
                    {
                        "event": "query",
                        "session_id": session_id,
                        "digest": digest,
                        "cross_app_debited": debited,
                        "debit_at": now.isoformat() if debited else None,
                        "result": result.to_json(),
                    }
                )
            except Exception:
                if debited:
                    self.ledger.restore(session.requester_id, now)
                raise
            session.results.append(result)
            session.dedup_index[digest] = result.result_id
            session.queries_used += 1
            return result, False

    def close_session(self, session_id: str) -> EvidencePackage:
        session = self.get_session(session_id)
        with self._lock_for(session_id):
            now = self.clock.now()
            if session.state is SessionState.CLOSED:
                raise SessionClosedError(f"session {session_id} is already closed")
            session.state = SessionState.CLOSED
            session.closed_at = now
            report = self._compile(session)
            self._audit(
                "report",
                {
                    "session_id": session_id,
                    "requester_id": session.requester_id,
                    "findings": len(report.findings),
                    "queries": session.queries_used,
                    "report_digest": payload_digest(report.to_json()),
                },
            )
            self._journal(
                {"event": "close", "session_id": session_id, "closed_at": now.isoformat()}
            )
            return self.evidence_package(session_id)

    def _compile(self, session: InterrogationSession) -> DivergenceReport:
        if session.baseline_outcome is not None:
            cfg = self.divergence_config(session.model_version)
        else:
            # version purged: thresholds are moot with zero runnable queries
            cfg = DivergenceConfig(
                decision_threshold=0.5, threshold_percentile=50.0, **self.divergence_overrides
            )
        stamp = session.closed_at or self.clock.now()
        return compile_report(
            session,
            session.results,
            cfg,
            self.perturbations,
            templates=self.templates,
            generated_at=stamp,
        )

    def report(self, session_id: str) -> DivergenceReport:
        """Report for a closed session, or a dated snapshot of an open one."""
        session = self.get_session(session_id)
        with self._lock_for(session_id):
            return self._compile(session)

    def evidence_package(self, session_id: str) -> EvidencePackage:
        session = self.get_session(session_id)
        report = self._compile(session)
        extract: tuple[dict, ...] = ()
        if self.audit is not None:
            extract = tuple(self.audit.extract(session_id))
        return EvidencePackage(report=report, audit_extract=extract)

    # -- crash recovery -----------------------------------------------------

    def recover_journal(self) -> int:
        """Rebuild session and ledger state by replaying the journal file."""
        if self._journal_path is None or not self._journal_path.exists():
            return 0
        replayed = 0
        from .records import FeatureRecord, parse_domain

        for line in self._journal_path.read_text(encoding="utf-8").splitlines():
            if not line.strip():
                continue
            event = json.loads(line)
            replayed += 1
            if event["event"] == "session_open":
                sd, dd = event["session"], event["decision"]
                decision = AdverseDecision(
                    decision_id=dd["decision_id"],
                    record=FeatureRecord.from_json(dd["record"]),
                    outcome=ScoreOutcome.from_json(dd["outcome"]),
                    model_version=dd["model_version"],
                    decided_at=datetime.fromisoformat(dd["decided_at"]),
                    domain=parse_domain(dd["domain"]),
                )
                baseline = (
                    ScoreOutcome.from_json(sd["baseline_outcome"])
                    if sd["baseline_outcome"]
                    else None
                )
                session = InterrogationSession(
                    session_id=sd["session_id"],
                    decision=decision,
                    requester_id=sd["requester_id"],
                    opened_at=datetime.fromisoformat(sd["opened_at"]),
                    window_deadline=datetime.fromisoformat(sd["window_deadline"]),
                    budget_limit=sd["budget_limit"],
                    spoliation_flag=sd["spoliation_flag"],
                    version_resolution=VersionResolution(sd["version_resolution"]),
                    cross_app_billable=sd["cross_app_billable"],
                    baseline_outcome=baseline,
                )
                self.sessions[session.session_id] = session
                number = int(session.session_id.lstrip("s"))
                self._session_counter = max(self._session_counter, number)
            elif event["event"] == "query":
                session = self.sessions[event["session_id"]]
                result = QueryResult.from_json(event["result"])
                session.results.append(result)
                session.dedup_index[event["digest"]] = result.result_id
                session.queries_used += 1
                if event.get("cross_app_debited"):
                    self.ledger.debit(
                        session.requester_id, datetime.fromisoformat(event["debit_at"])
                    )
            elif event["event"] == "close":
                session = self.sessions[event["session_id"]]
                session.state = SessionState.CLOSED
                session.closed_at = datetime.fromisoformat(event["closed_at"])
        return replayed
