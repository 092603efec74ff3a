"""Append-only, hash-chained audit ledger with retention and anti-gaming.

Every entry chains to its predecessor through a digest over canonical
JSON, so any byte of recorded history that later changes is detectable by
re-verification. The ledger is the enforcement surface: evaluations,
session events, parity probes, and administrative actions all land here,
and evidence packages carry extracts from it.

One appender at a time; verification and detection scan immutable
snapshots of the entry list.
"""
from __future__ import annotations

import json
import os
import threading
from dataclasses import dataclass
from datetime import datetime
from pathlib import Path
from typing import Any, Mapping, Optional

from .canonical import (
    DIGEST_ALGORITHM,
    GENESIS_DIGEST,
    canonical_json,
    payload_digest,
    utc,
)
from .clock import Clock, SystemClock
from .errors import VersionMismatchError
from .host import ScoreOutcome
from .records import FeatureRecord

LEDGER_FORMAT = "counterprobe.audit_ledger.v1"
ENTRY_KINDS = frozenset({"session_open", "query", "report", "parity_probe", "admin"})
RETENTION_YEARS = 3
DEFAULT_ANOMALY_K = 10


def _entry_digest(seq: int, ts: str, kind: str, pdigest: str, prev: str) -> str:
    return payload_digest([seq, ts, kind, pdigest, prev])


def three_years_before(now: datetime) -> datetime:
    now = utc(now)
    year = now.year - RETENTION_YEARS
    day = now.day
    if now.month == 2 and day == 29:
        day = 28
    return now.replace(year=year, day=day)


@dataclass(frozen=True)
class VerifyResult:
    ok: bool
    violation_seq: Optional[int] = None

    def to_json(self) -> dict[str, Any]:
        return {"ok": self.ok, "violation_seq": self.violation_seq}


@dataclass(frozen=True)
class CoordinationFlag:
    """One perturbation sequence shared by several distinct requesters."""

    sequence_digest: str
    requester_ids: tuple[str, ...]
    session_ids: tuple[str, ...]

    def to_json(self) -> dict[str, Any]:
        return {
            "sequence_digest": self.sequence_digest,
            "requester_ids": list(self.requester_ids),
            "session_ids": list(self.session_ids),
        }


class AuditLedger:
    def __init__(
        self,
        *,
        clock: Optional[Clock] = None,
        path: Optional[str | Path] = None,
        anomaly_k: int = DEFAULT_ANOMALY_K,
    ):
        self.clock = clock or SystemClock()
        self.anomaly_k = anomaly_k
        self._path = Path(path) if path else None
        self._entries: list[dict[str, Any]] = []
        self._lock = threading.Lock()
        self._anchor_seq = 1
        self._anchor_prev = GENESIS_DIGEST
        self._holds: set[str] = set()
        if self._path is not None:
            if self._path.exists():
                self._load()
            else:
                self._write_header()

    # -- storage --------------------------------------------------------------

    def _header(self) -> dict[str, Any]:
        return {
            "format": LEDGER_FORMAT,
            "digest_algorithm": DIGEST_ALGORITHM,
            "genesis": GENESIS_DIGEST,
            "anchor_seq": self._anchor_seq,
            "anchor_prev": self._anchor_prev,
        }

    def _write_header(self) -> None:
        self._path.parent.mkdir(parents=True, exist_ok=True)
        self._path.write_text(canonical_json(self._header()) + "\n", encoding="utf-8")

    def _load(self) -> None:
        # decode with replacement so byte-level tampering surfaces as a
        # poisoned entry instead of an unreadable ledger
        raw = self._path.read_bytes().decode("utf-8", errors="replace")
        lines = raw.splitlines()
        if not lines:
            self._write_header()
            return
        header = json.loads(lines[0])
        self._anchor_seq = header.get("anchor_seq", 1)
        self._anchor_prev = header.get("anchor_prev", GENESIS_DIGEST)
        expected_seq = self._anchor_seq
        for line in lines[1:]:
            if not line.strip():
                continue
            try:
                entry = json.loads(line)
                if not isinstance(entry, dict):
                    raise ValueError
            except ValueError:
                # unparseable line: keep a poisoned placeholder so the chain
                # verifier reports the violation at this position
                entry = {"seq": expected_seq, "corrupt_line": line}
            self._entries.append(entry)
            expected_seq = int(entry.get("seq", expected_seq)) + 1

    def _persist(self, entry: dict[str, Any]) -> None:
        if self._path is None:
            return
        with self._path.open("a", encoding="utf-8") as fh:
            fh.write(canonical_json(entry) + "\n")
            fh.flush()
            os.fsync(fh.fileno())

    def _rewrite_file(self) -> None:
        if self._path is None:
            return
        tmp = self._path.with_suffix(".tmp")
        with tmp.open("w", encoding="utf-8") as fh:
            fh.write(canonical_json(self._header()) + "\n")
            for entry in self._entries:
                fh.write(canonical_json(entry) + "\n")
            fh.flush()
            os.fsync(fh.fileno())
        tmp.replace(self._path)

    # -- core operations -------------------------------------------------------

    def append(self, kind: str, payload: Mapping[str, Any]) -> dict[str, Any]:
        if kind not in ENTRY_KINDS:
            raise ValueError(f"unknown audit entry kind: {kind!r}")
        with self._lock:
            seq = self._entries[-1]["seq"] + 1 if self._entries else self._anchor_seq
            prev = self._entries[-1]["entry_digest"] if self._entries else self._anchor_prev
            ts = self.clock.now().isoformat()
            pdigest = payload_digest(payload)
            entry = {
                "seq": seq,
                "ts": ts,
                "kind": kind,
                "payload": dict(payload),
                "payload_digest": pdigest,
                "prev_digest": prev,
                "entry_digest": _entry_digest(seq, ts, kind, pdigest, prev),
            }
            self._persist(entry)  # a storage failure means no acknowledgment
            self._entries.append(entry)
            return entry

    def __len__(self) -> int:
        return len(self._entries)

    def entries(self) -> list[dict[str, Any]]:
        return list(self._entries)

    def last_seq(self) -> int:
        return self._entries[-1]["seq"] if self._entries else self._anchor_seq - 1

    def verify_chain(
        self, start: Optional[int] = None, end: Optional[int] = None
    ) -> VerifyResult:
        """Recompute every digest in [start, end]; report the first mismatch."""
        with self._lock:
            entries = list(self._entries)
            anchor_seq, anchor_prev = self._anchor_seq, self._anchor_prev
        start = anchor_seq if start is None else start
        end = (entries[-1]["seq"] if entries else anchor_seq - 1) if end is None else end
        if end < start:
            return VerifyResult(ok=True)

        by_seq: dict[int, dict] = {}
        for entry in entries:
            seq = entry.get("seq")
            if isinstance(seq, int) and seq not in by_seq:
                by_seq[seq] = entry

        prev: Optional[str]
        if start == anchor_seq:
            prev = anchor_prev
        else:
            before = by_seq.get(start - 1)
            prev = before.get("entry_digest") if before else None

        for seq in range(start, end + 1):
            entry = by_seq.get(seq)
            if entry is None or "corrupt_line" in entry:
                return VerifyResult(ok=False, violation_seq=seq)
            try:
                expected_payload = payload_digest(entry["payload"])
                if entry["payload_digest"] != expected_payload:
                    return VerifyResult(ok=False, violation_seq=seq)
                if prev is not None and entry["prev_digest"] != prev:
                    return VerifyResult(ok=False, violation_seq=seq)
                recomputed = _entry_digest(
                    seq,
                    entry["ts"],
                    entry["kind"],
                    entry["payload_digest"],
                    entry["prev_digest"],
                )
                if entry["entry_digest"] != recomputed:
                    return VerifyResult(ok=False, violation_seq=seq)
            except (KeyError, TypeError, ValueError):
                return VerifyResult(ok=False, violation_seq=seq)
            prev = entry["entry_digest"]
        return VerifyResult(ok=True)

    # -- retention --------------------------------------------------------------

    def add_hold(self, matter_key: str) -> None:
        """Open-matter hold: entries for this key survive retention sweeps."""
        with self._lock:
            self._holds.add(matter_key)

    def release_hold(self, matter_key: str) -> None:
        with self._lock:
            self._holds.discard(matter_key)

    def holds(self) -> set[str]:
        return set(self._holds)

    def _matter_key(self, entry: Mapping[str, Any]) -> Optional[str]:
        payload = entry.get("payload") or {}
        return payload.get("session_id")

    def retention_sweep(self, now: Optional[datetime] = None) -> int:
        """Purge the contiguous prefix older than 3 years and not on hold.

        Compaction stops at the first in-window or held entry so the chain
        stays contiguous; the new anchor (checkpoint) digest re-roots
        verification and the purge itself is logged as an admin entry.
        """
        now = utc(now) if now else self.clock.now()
        cutoff = three_years_before(now)
        with self._lock:
            purged = 0
            for entry in self._entries:
                ts = datetime.fromisoformat(entry["ts"])
                key = self._matter_key(entry)
                if ts < cutoff and (key is None or key not in self._holds):
                    purged += 1
                else:
                    break
            if purged == 0:
                return 0
            last_purged = self._entries[purged - 1]
            self._anchor_seq = last_purged["seq"] + 1
            self._anchor_prev = last_purged["entry_digest"]
            through_seq = last_purged["seq"]
            self._entries = self._entries[purged:]
            self._rewrite_file()
        self.append(
            "admin",
            {
                "action": "retention_sweep",
                "purged": purged,
                "through_seq": through_seq,
                "checkpoint_digest": self._anchor_prev,
                "cutoff": cutoff.isoformat(),
            },
        )
        return purged

    # -- anti-gaming --------------------------------------------------------------

    def detect_anomaly(
        self,
        k: Optional[int] = None,
        *,
        window_start: Optional[datetime] = None,
        window_end: Optional[datetime] = None,
    ) -> list[CoordinationFlag]:
        """Flag perturbation sequences shared by >= k distinct requesters.

        Deterministic in ledger contents: session sequences are ordered by
        entry seq, and flags sort by sequence digest, so ingestion order
        never changes the output.
        """
        k = self.anomaly_k if k is None else k
        if k < 2:
            raise ValueError("anomaly threshold k must be at least 2")
        sequences: dict[str, list[str]] = {}
        requesters: dict[str, str] = {}
        for entry in self._entries:
            if entry.get("kind") != "query":
                continue
            payload = entry.get("payload") or {}
            if payload.get("replay"):
                continue
            if window_start or window_end:
                ts = datetime.fromisoformat(entry["ts"])
                if window_start and ts < utc(window_start):
                    continue
                if window_end and ts > utc(window_end):
                    continue
            sid = payload.get("session_id")
            if sid is None:
                continue
            sequences.setdefault(sid, []).append(payload.get("instance_digest", ""))
            requesters[sid] = payload.get("requester_id", "")

        grouped: dict[str, list[str]] = {}
        for sid, digests in sequences.items():
            grouped.setdefault(payload_digest(digests), []).append(sid)

        flags = []
        for sequence_digest, session_ids in sorted(grouped.items()):
            distinct = sorted({requesters[sid] for sid in session_ids})
            if len(distinct) >= k:
                flags.append(
                    CoordinationFlag(
                        sequence_digest=sequence_digest,
                        requester_ids=tuple(distinct),
                        session_ids=tuple(sorted(session_ids)),
                    )
                )
        return flags

    def parity_check(
        self,
        record: FeatureRecord,
        test_outcome: ScoreOutcome,
        production_outcome: ScoreOutcome,
    ) -> str:
        """Compare sandbox and production scores for one record.

        Tolerance is the wider of the two replicate confidence intervals;
        deterministic models therefore require exact equality. Divergence
        raises an organization-gaming flag on the logged probe.
        """
        if test_outcome.model_version != production_outcome.model_version:
            raise VersionMismatchError(
                "parity check crosses versions: "
                f"{test_outcome.model_version} vs {production_outcome.model_version}"
            )
        width_test = test_outcome.confidence[1] - test_outcome.confidence[0]
        width_prod = production_outcome.confidence[1] - production_outcome.confidence[0]
        tolerance = max(width_test, width_prod)
        divergent = abs(test_outcome.score - production_outcome.score) > tolerance
        status = "divergent" if divergent else "parity"
        self.append(
            "parity_probe",
            {
                "record_digest": record.content_digest(),
                "model_version": test_outcome.model_version,
                "test_score": test_outcome.score,
                "production_score": production_outcome.score,
                "tolerance": tolerance,
                "status": status,
                "organization_gaming_flag": divergent,
            },
        )
        return status

    def gaming_flags(self) -> list[dict[str, Any]]:
        return [
            e
            for e in self._entries
            if e.get("kind") == "parity_probe"
            and (e.get("payload") or {}).get("organization_gaming_flag")
        ]

    def extract(self, session_id: str) -> list[dict[str, Any]]:
        """Entries belonging to one session, for the evidence package."""
        return [
            e for e in self._entries if (e.get("payload") or {}).get("session_id") == session_id
        ]
