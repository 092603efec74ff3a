from __future__ import annotations

from datetime import datetime, timedelta, timezone

import pytest

from counterprobe.audit import AuditLedger
from counterprobe.clock import FixedClock
from counterprobe.fixtures import load_bundle
from counterprobe.host import ModelRegistry
from counterprobe.perturbations import PerturbationRegistry
from counterprobe.sessions import SessionManager

T0 = datetime(2025, 6, 1, 12, 0, 0, tzinfo=timezone.utc)


@pytest.fixture
def clock():
    return FixedClock(T0)


@pytest.fixture
def registry(clock):
    return ModelRegistry(clock=clock)


@pytest.fixture
def perturbations():
    return PerturbationRegistry.load_default()


@pytest.fixture
def maria(registry):
    bundle = load_bundle("maria_screen")
    bundle.register(registry)
    return bundle


@pytest.fixture
def tenant(registry):
    bundle = load_bundle("tenant_screen")
    bundle.register(registry)
    return bundle


@pytest.fixture
def audit_ledger(clock):
    return AuditLedger(clock=clock)


@pytest.fixture
def manager(registry, perturbations, clock, audit_ledger):
    return SessionManager(registry, perturbations, clock=clock, audit=audit_ledger)


@pytest.fixture
def maria_decision(maria, registry, clock):
    return maria.make_decision(registry, "maria-001", clock.now() - timedelta(days=1))


@pytest.fixture
def tenant_decision(tenant, registry, clock):
    return tenant.make_decision(registry, "tenant-001", clock.now() - timedelta(days=1))
