from __future__ import annotations

import json
from datetime import timedelta

import pytest
from fastapi.testclient import TestClient

from counterprobe.clock import FixedClock
from counterprobe.host import AdverseDecision, LinearModel, ReferencePopulation, ScoreOutcome, ThresholdPolicy
from counterprobe.records import Domain, FeatureRecord
from counterprobe.service import (
    Role,
    ServiceConfig,
    ServiceState,
    create_app,
    enforce_tier,
    tier_of,
)
from tests.conftest import T0

CREDENTIALS = {
    "k-party": {"role": "affected_party", "requester_id": "maria-g"},
    "k-party2": {"role": "affected_party", "requester_id": "someone-else"},
    "k-rep": {"role": "representative", "requester_id": "rep-01"},
    "k-reg": {"role": "regulator", "requester_id": "reg-01"},
    "k-admin": {"role": "organization_admin", "requester_id": "org-01"},
}

PARTY = {"X-Api-Key": "k-party"}
PARTY2 = {"X-Api-Key": "k-party2"}
REP = {"X-Api-Key": "k-rep"}
REG = {"X-Api-Key": "k-reg"}
ADMIN = {"X-Api-Key": "k-admin"}


@pytest.fixture
def state(tmp_path):
    config = ServiceConfig(
        data_dir=tmp_path / "data",
        clock_mode="system",
        credentials=CREDENTIALS,
        demo_fixtures=True,
    )
    return ServiceState(config, clock=FixedClock(T0))


@pytest.fixture
def client(state):
    return TestClient(create_app(state), raise_server_exceptions=False)


def register_domain_model(state, domain: Domain, base_score=0.3):
    vid = f"m-{domain.value}@1"
    if not state.models.has(vid):
        state.models.register_version(
            LinearModel(base_score),
            version_id=vid,
            model_name=f"m-{domain.value}",
            policy=ThresholdPolicy(0.9),
            population=ReferencePopulation(f"{vid}/pop", [0.1, 0.5, 0.9], T0),
        )
    return vid


def add_decision(state, domain: Domain, decision_id: str, age_hours=24):
    vid = register_domain_model(state, domain)
    record = FeatureRecord(f"{decision_id}-record", domain, {"name": "Pat Doe", "grad_year": 2001})
    decided_at = state.clock.now() - timedelta(hours=age_hours)
    evaluated = state.models.evaluate(vid, record)
    outcome = ScoreOutcome(
        score=evaluated.score,
        confidence=evaluated.confidence,
        percentile=evaluated.percentile,
        label=evaluated.label,
        model_version=vid,
        evaluated_at=decided_at,
    )
    decision = AdverseDecision(
        decision_id=decision_id,
        record=record,
        outcome=outcome,
        model_version=vid,
        decided_at=decided_at,
        domain=domain,
    )
    state.add_decision(decision)
    return decision


def scripted_body(instance):
    return {
        "instance": {
            "instance_id": instance.instance_id,
            "class_id": instance.class_id,
            "field": instance.field,
            "substituted_value": None if instance.is_removal else instance.substituted_value,
            "remove": instance.is_removal,
        }
    }


# -- tier decision function -----------------------------------------------------------


def test_tier_matrix_exhaustive():
    decided = T0
    before_gate = T0 + timedelta(hours=24)
    after_gate = T0 + timedelta(hours=49)
    tier1 = {
        Domain.CRIMINAL_JUSTICE,
        Domain.HEALTHCARE,
        Domain.EMPLOYMENT,
        Domain.HOUSING,
        Domain.CREDIT,
    }
    tier2 = {Domain.CONTENT_MODERATION, Domain.INSURANCE, Domain.EDUCATION}
    tier3 = {Domain.RECOMMENDATION, Domain.ADVERTISING}

    for domain in Domain:
        for role in Role:
            for now, gate_open in ((before_gate, False), (after_gate, True)):
                access = enforce_tier(domain, role, decided, now)
                if role is Role.REGULATOR:
                    assert access.mode == "direct"
                elif role is Role.ORGANIZATION_ADMIN:
                    assert access.mode == "aggregate_only"
                elif domain in tier1:
                    assert access.mode == "direct"
                elif domain in tier2:
                    expected = "direct" if role is Role.REPRESENTATIVE else "mediated"
                    assert access.mode == expected
                elif domain in tier3:
                    assert access.mode == "aggregate_only"
                else:  # fraud_detection
                    if not gate_open:
                        assert access.mode == "delayed"
                        assert access.until == decided + timedelta(hours=48)
                    else:
                        expected = "direct" if role is Role.REPRESENTATIVE else "mediated"
                        assert access.mode == expected


def test_every_domain_maps_to_exactly_one_tier():
    for domain in Domain:
        assert tier_of(domain) in {"tier1", "tier2", "tier3", "special_fraud"}


def test_tier_override_respected():
    access = enforce_tier(
        Domain.ADVERTISING,
        Role.AFFECTED_PARTY,
        T0,
        T0,
        overrides={"advertising": "tier1"},
    )
    assert access.mode == "direct"


# -- authentication --------------------------------------------------------------------


def test_missing_or_unknown_key_rejected(client):
    assert client.get("/registry/employment").status_code == 403
    assert client.get("/registry/employment", headers={"X-Api-Key": "nope"}).status_code == 403


# -- the full affected-party flow ----------------------------------------------------------


def test_maria_flow_over_http(client, state):
    opened = client.post("/sessions", json={"decision_id": "maria-001"}, headers=PARTY)
    assert opened.status_code == 201
    session = opened.json()
    sid = session["session_id"]
    assert session["budget_limit"] == 50
    assert session["remaining_budget"] == 50
    assert session["state"] == "open"

    suite = client.get(f"/sessions/{sid}/suite", headers=PARTY).json()
    assert len(suite["instances"]) == 12

    from counterprobe.fixtures import load_bundle

    bundle = load_bundle("maria_screen")
    for instance in bundle.scripted_instances:
        reply = client.post(f"/sessions/{sid}/queries", json=scripted_body(instance), headers=PARTY)
        assert reply.status_code == 200, reply.text
        assert reply.json()["replayed"] is False

    meter = client.get(f"/sessions/{sid}", headers=PARTY).json()
    assert meter["queries_used"] == 4
    assert meter["remaining_budget"] == 46

    replay = client.post(
        f"/sessions/{sid}/queries", json=scripted_body(bundle.scripted_instances[0]), headers=PARTY
    )
    assert replay.json()["replayed"] is True
    assert replay.json()["session"]["remaining_budget"] == 46

    closed = client.post(f"/sessions/{sid}/close", headers=PARTY)
    assert closed.status_code == 200
    report = closed.json()["report"]
    assert report["magnitudes"] == [0.29, 0.16, 0.22, 0.27]
    crossings = [f for f in report["findings"] if f["criterion"] == "outcome_crossing"]
    assert {f["supporting_results"][0] for f in crossings} == {
        "emp-date-reformat.grad_year.0",
        "emp-experience-framing.experience_summary.0",
        "emp-terminology-update.skills.0",
    }

    served = client.get(f"/sessions/{sid}/report", headers=PARTY)
    assert served.status_code == 200
    assert json.loads(served.content) == report
    assert served.content == client.get(f"/sessions/{sid}/report", headers=PARTY).content

    assert client.post(f"/sessions/{sid}/close", headers=PARTY).status_code == 409
    after = client.post(
        f"/sessions/{sid}/queries", json=scripted_body(bundle.scripted_instances[1]), headers=PARTY
    )
    assert after.status_code == 409


def test_budget_exhaustion_maps_to_409(client, state):
    sid = client.post("/sessions", json={"decision_id": "maria-001"}, headers=PARTY).json()[
        "session_id"
    ]
    for n in range(50):
        body = {
            "instance": {
                "class_id": "custom-seq",
                "field": "grad_year",
                "substituted_value": 2100 + n,
            }
        }
        assert (
            client.post(f"/sessions/{sid}/queries", json=body, headers=PARTY).status_code == 200
        )
    over = client.post(
        f"/sessions/{sid}/queries",
        json={"instance": {"class_id": "custom-seq", "field": "grad_year", "substituted_value": 3000}},
        headers=PARTY,
    )
    assert over.status_code == 409
    assert over.json()["code"] == "budget_exhausted"


def test_unknown_ids_map_to_404(client):
    assert client.post("/sessions", json={"decision_id": "ghost"}, headers=PARTY).status_code == 404
    assert client.get("/sessions/shadow", headers=PARTY).status_code == 404
    assert client.get("/registry/astrology", headers=PARTY).status_code == 404


# -- tier enforcement over HTTP ---------------------------------------------------------


def test_tier2_affected_party_mediated(client, state):
    add_decision(state, Domain.CONTENT_MODERATION, "cm-001")
    reply = client.post("/sessions", json={"decision_id": "cm-001"}, headers=PARTY)
    assert reply.status_code == 403
    assert reply.json()["code"] == "mediated_access_required"
    assert (
        client.post("/sessions", json={"decision_id": "cm-001"}, headers=REP).status_code == 201
    )


def test_tier3_aggregate_only(client, state):
    add_decision(state, Domain.ADVERTISING, "adv-001")
    for headers in (PARTY, REP):
        reply = client.post("/sessions", json={"decision_id": "adv-001"}, headers=headers)
        assert reply.status_code == 403
        assert reply.json()["code"] == "aggregate_only"
    assert (
        client.post("/sessions", json={"decision_id": "adv-001"}, headers=REG).status_code == 201
    )


def test_fraud_delayed_then_mediated(client, state):
    decision = add_decision(state, Domain.FRAUD_DETECTION, "frd-001", age_hours=24)
    queued = client.post("/sessions", json={"decision_id": "frd-001"}, headers=REP)
    assert queued.status_code == 202
    body = queued.json()
    assert body["code"] == "delayed_access"
    assert body["retry_at"] == (decision.decided_at + timedelta(hours=48)).isoformat()
    assert "due_by" in body

    state.clock.advance(hours=25)  # past the 48h gate
    assert (
        client.post("/sessions", json={"decision_id": "frd-001"}, headers=REP).status_code == 201
    )
    denied = client.post("/sessions", json={"decision_id": "frd-001"}, headers=PARTY)
    assert denied.status_code == 403
    assert denied.json()["code"] == "mediated_access_required"


def test_org_admin_cannot_open_sessions(client, state):
    reply = client.post("/sessions", json={"decision_id": "maria-001"}, headers=ADMIN)
    assert reply.status_code == 403
    assert reply.json()["code"] == "aggregate_only"


# -- authorization matrix over live routes ----------------------------------------------


def test_route_role_matrix(client, state):
    sid = client.post("/sessions", json={"decision_id": "maria-001"}, headers=PARTY).json()[
        "session_id"
    ]
    owner_routes = [
        ("GET", f"/sessions/{sid}", None),
        ("GET", f"/sessions/{sid}/suite", None),
        ("GET", f"/sessions/{sid}/report", None),
    ]
    for method, path, body in owner_routes:
        assert client.request(method, path, headers=PARTY).status_code == 200
        assert client.request(method, path, headers=REG).status_code == 200
        assert client.request(method, path, headers=PARTY2).status_code == 403
        assert client.request(method, path, headers=ADMIN).status_code == 403

    for headers, expected in ((PARTY, 403), (REP, 403), (REG, 200), (ADMIN, 403)):
        assert client.get("/audit/verify", headers=headers).status_code == expected

    spec = {
        "version_id": "matrix-model@1",
        "model_name": "matrix-model",
        "domain": "employment",
        "kind": "linear",
        "threshold": 0.5,
        "population": [0.2, 0.8],
        "linear": {"base_score": 0.4},
    }
    for headers, expected in ((PARTY, 403), (REP, 403), (REG, 403)):
        assert (
            client.post("/admin/models", json={"spec": spec}, headers=headers).status_code
            == expected
        )
    assert client.post("/admin/models", json={"spec": spec}, headers=ADMIN).status_code == 201

    for headers in (PARTY, PARTY2, REP, REG, ADMIN):
        assert client.get("/registry/employment", headers=headers).status_code == 200


# -- aggregates ---------------------------------------------------------------------------


def test_aggregate_disclosure_rates_and_suppression(client, state):
    vid = state.models.register_version(
        LinearModel(0.5, {"x": 3.0}),
        version_id="agg@1",
        model_name="agg",
        policy=ThresholdPolicy(0.5),
        population=ReferencePopulation("agg/pop", [0.25, 0.5, 0.75], T0),
    )
    adverse_by_cohort = {"a": 20, "b": 10}
    for cohort, adverse_count in adverse_by_cohort.items():
        for i in range(50):
            x = -1.0 if i < adverse_count else 1.0
            record = FeatureRecord(
                f"{cohort}{i}", Domain.CREDIT, {"cohort": cohort, "x": x, "note": "free text"}
            )
            evaluated = state.models.evaluate(vid, record)
            state.add_decision(
                AdverseDecision(
                    decision_id=f"agg-{cohort}-{i}",
                    record=record,
                    outcome=evaluated,
                    model_version=vid,
                    decided_at=T0,
                    domain=Domain.CREDIT,
                )
            )
    for i in range(3):  # one cohort under the privacy floor
        record = FeatureRecord(f"c{i}", Domain.CREDIT, {"cohort": "c", "x": 1.0})
        state.add_decision(
            AdverseDecision(
                decision_id=f"agg-c-{i}",
                record=record,
                outcome=state.models.evaluate(vid, record),
                model_version=vid,
                decided_at=T0,
                domain=Domain.CREDIT,
            )
        )

    table = client.get(f"/aggregate/{vid}", params={"group_by": "cohort"}, headers=PARTY).json()
    # oracle: recount directly from what was ingested
    assert table["groups"]["a"] == {"count": 50, "adverse_rate": 0.4}
    assert table["groups"]["b"] == {"count": 50, "adverse_rate": 0.2}
    assert table["groups"]["c"] == {"suppressed": True}

    free_text = client.get(f"/aggregate/{vid}", params={"group_by": "note"}, headers=PARTY)
    assert free_text.status_code == 422
    assert free_text.json()["code"] == "non_categorical_group"

    missing = client.get("/aggregate/ghost@1", params={"group_by": "cohort"}, headers=PARTY)
    assert missing.status_code == 404


# -- admin decision ingestion ----------------------------------------------------------------


def test_admin_decision_ingestion_then_session(client, state):
    register_domain_model(state, Domain.EMPLOYMENT)
    body = {
        "decision_id": "ingested-001",
        "version_id": "m-employment@1",
        "record": {
            "record_id": "r-ing",
            "domain": "employment",
            "features": {"name": "Lee Wong", "grad_year": 1995},
        },
        "decided_at": state.clock.now().isoformat(),
    }
    assert client.post("/admin/decisions", json=body, headers=PARTY).status_code == 403
    created = client.post("/admin/decisions", json=body, headers=ADMIN)
    assert created.status_code == 201
    assert created.json()["label"] == "reject"
    assert (
        client.post("/sessions", json={"decision_id": "ingested-001"}, headers=PARTY).status_code
        == 201
    )


# -- audit plumbing ---------------------------------------------------------------------------


def test_audit_verify_route(client, state):
    client.post("/sessions", json={"decision_id": "maria-001"}, headers=PARTY)
    verdict = client.get("/audit/verify", headers=REG).json()
    assert verdict["ok"] is True
    assert verdict["entries"] >= 1


def test_due_by_header_present(client):
    reply = client.get("/registry/employment", headers=PARTY)
    assert "X-Due-By" in reply.headers


def test_deadline_breach_logged(tmp_path):
    config = ServiceConfig(
        data_dir=tmp_path / "breach",
        credentials=CREDENTIALS,
        demo_fixtures=True,
        response_deadline_hours=0.0,  # everything breaches instantly
    )
    state = ServiceState(config, clock=FixedClock(T0))
    client = TestClient(create_app(state))
    client.get("/registry/employment", headers=PARTY)
    breaches = [
        e
        for e in state.audit.entries()
        if e["kind"] == "admin" and e["payload"].get("action") == "response_deadline_breach"
    ]
    assert breaches


def test_crash_between_audit_and_reply_is_replayable(tmp_path):
    config = ServiceConfig(
        data_dir=tmp_path / "crashy", credentials=CREDENTIALS, demo_fixtures=True
    )
    state = ServiceState(config, clock=FixedClock(T0))
    client = TestClient(create_app(state), raise_server_exceptions=False)
    sid = client.post("/sessions", json={"decision_id": "maria-001"}, headers=PARTY).json()[
        "session_id"
    ]

    def explode(kind):
        if kind == "query":
            raise RuntimeError("crash between audit append and reply")

    state.sessions._post_audit_hook = explode
    body = {
        "instance": {"class_id": "custom-x", "field": "grad_year", "substituted_value": 2011}
    }
    assert client.post(f"/sessions/{sid}/queries", json=body, headers=PARTY).status_code == 500
    state.sessions._post_audit_hook = None

    # the same deployment restarted on the same data dir replays cleanly
    revived = ServiceState(
        ServiceConfig(data_dir=tmp_path / "crashy", credentials=CREDENTIALS, demo_fixtures=True),
        clock=FixedClock(T0 + timedelta(minutes=1)),
    )
    twin = revived.sessions.get_session(sid)
    assert twin.queries_used == 0  # the crashed query never became state
    assert revived.audit.verify_chain().ok

    client2 = TestClient(create_app(revived))
    assert client2.post(f"/sessions/{sid}/queries", json=body, headers=PARTY).status_code == 200
    assert revived.sessions.get_session(sid).queries_used == 1
