"""Request lifecycle tracking: five-state machine, append-only audit log,
ledger correlation, metrics exposition.

States move Received -> Translated -> Processing -> Confirmed, with any
non-terminal state allowed to drop to Failed. Every transition is appended
to a JSONL write-ahead log before the in-memory view changes, and the full
store is rebuilt from that log on restart.
"""

from __future__ import annotations

import json
import logging
import os
import threading
from dataclasses import dataclass, field
from typing import Optional

from .model import ValidationError, format_utc, parse_utc, utc_now

logger = logging.getLogger(__name__)

STATES = ("Received", "Translated", "Processing", "Confirmed", "Failed")
TERMINAL_STATES = ("Confirmed", "Failed")

LEGAL_TRANSITIONS = {
    None: {"Received"},
    "Received": {"Translated", "Failed"},
    "Translated": {"Processing", "Failed"},
    "Processing": {"Confirmed", "Failed"},
    "Confirmed": set(),
    "Failed": set(),
}


class StatusError(Exception):
    pass


class IllegalTransition(StatusError):
    def __init__(self, request_id: str, current: Optional[str], attempted: str):
        super().__init__(f"illegal transition {current} -> {attempted} for request {request_id}")
        self.request_id = request_id
        self.current = current
        self.attempted = attempted


class UnknownRequest(StatusError):
    pass


def is_legal_transition(current: Optional[str], new: str) -> bool:
    return new in LEGAL_TRANSITIONS.get(current, set())


@dataclass
class RequestStatus:
    request_id: str
    tenant: str
    state: str
    history: list = field(default_factory=list)  # [(state, ts_str, detail)]
    tx_id: Optional[str] = None
    block_number: Optional[int] = None
    errors: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "request_id": self.request_id,
            "tenant": self.tenant,
            "state": self.state,
            "history": [{"state": s, "ts": ts, "detail": d} for s, ts, d in self.history],
            "tx_id": self.tx_id,
            "block_number": self.block_number,
            "errors": [e.to_dict() for e in self.errors],
        }


@dataclass(frozen=True)
class MetricsSnapshot:
    counters: dict  # (tenant, state) -> monotone count of entries into state
    current: dict  # (tenant, state) -> number of requests currently in state
    latency_ms: dict  # {"avg": .., "p50": .., "p95": .., "p99": .., "count": ..}
    topic_stats: list  # list of broker TopicStats


def _quantile(sorted_values, q: float) -> float:
    if not sorted_values:
        return 0.0
    idx = min(len(sorted_values) - 1, max(0, int(q * len(sorted_values))))
    return sorted_values[idx]


class StatusStore:
    """Durable request-status store with an append-only transition log."""

    MAX_LATENCY_SAMPLES = 500_000

    def __init__(self, data_dir, flush_mode: str = "always"):
        from pathlib import Path

        self.dir = Path(data_dir)
        self.dir.mkdir(parents=True, exist_ok=True)
        self.wal_path = self.dir / "transitions.jsonl"
        self._lock = threading.RLock()
        self._requests: dict = {}
        self._tenant_order: dict = {}  # tenant -> [request_id] in receipt order
        self._counters: dict = {}
        self._current: dict = {}
        self._received_ts: dict = {}  # request_id -> receipt datetime (for e2e latency)
        self._latencies: list = []
        self._flush_mode = flush_mode
        self._dirty = False
        self._replay()
        self._fh = open(self.wal_path, "a", encoding="utf-8")

    # -- persistence -----------------------------------------------------------

    def _replay(self) -> None:
        if not self.wal_path.exists():
            return
        raw = self.wal_path.read_text(encoding="utf-8")
        lines = raw.split("\n")
        complete = lines[:-1]
        valid_chars = 0
        for line in complete:
            try:
                entry = json.loads(line)
            except json.JSONDecodeError:
                logger.warning("truncating status WAL at torn line")
                break
            self._apply(entry, replay=True)
            valid_chars += len(line) + 1
        if valid_chars < len(raw):
            with open(self.wal_path, "r+", encoding="utf-8") as f:
                f.truncate(valid_chars)

    def flush(self) -> None:
        with self._lock:
            if self._dirty:
                self._fh.flush()
                os.fsync(self._fh.fileno())
                self._dirty = False

    def close(self) -> None:
        with self._lock:
            self._fh.flush()
            os.fsync(self._fh.fileno())
            self._fh.close()

    # -- transitions ------------------------------------------------------------

    def record_transition(
        self,
        request_id: str,
        new_state: str,
        detail: str = "",
        tenant: Optional[str] = None,
        tx_id: Optional[str] = None,
        block_number: Optional[int] = None,
        errors: Optional[list] = None,
    ) -> RequestStatus:
        """Append a transition; raises IllegalTransition for anything off the
        legal graph, leaving state unchanged."""
        if new_state not in STATES:
            raise StatusError(f"unknown state {new_state!r}")
        with self._lock:
            existing = self._requests.get(request_id)
            current = existing.state if existing else None
            if not is_legal_transition(current, new_state):
                logger.warning("rejected transition %s -> %s for %s", current, new_state, request_id)
                raise IllegalTransition(request_id, current, new_state)
            if new_state == "Received" and not tenant:
                raise StatusError("Received transitions must carry the tenant")
            if new_state == "Confirmed" and (tx_id is None or block_number is None):
                raise StatusError("Confirmed requires tx_id and block_number")
            if new_state == "Failed" and not (errors or detail):
                raise StatusError("Failed requires errors or a detail message")
            entry = {
                "request_id": request_id,
                "tenant": tenant or (existing.tenant if existing else None),
                "state": new_state,
                "ts": format_utc(utc_now()),
                "detail": detail,
                "tx_id": tx_id,
                "block_number": block_number,
                "errors": [e.to_dict() for e in errors] if errors else None,
            }
            # durable before the in-memory view changes
            self._fh.write(json.dumps(entry, separators=(",", ":")) + "\n")
            if self._flush_mode == "always":
                self._fh.flush()
                os.fsync(self._fh.fileno())
            else:
                self._dirty = True
            return self._apply(entry, replay=False)

    def _apply(self, entry: dict, replay: bool) -> RequestStatus:
        request_id = entry["request_id"]
        state = entry["state"]
        tenant = entry.get("tenant") or ""
        status = self._requests.get(request_id)
        prev_state = status.state if status else None
        if status is None:
            status = RequestStatus(request_id=request_id, tenant=tenant, state=state)
            self._requests[request_id] = status
            self._tenant_order.setdefault(tenant, []).append(request_id)
        status.state = state
        status.history.append((state, entry["ts"], entry.get("detail") or ""))
        if entry.get("tx_id") is not None:
            status.tx_id = entry["tx_id"]
        if entry.get("block_number") is not None:
            status.block_number = entry["block_number"]
        if entry.get("errors"):
            status.errors = [ValidationError.from_dict(e) for e in entry["errors"]]

        key = (status.tenant, state)
        self._counters[key] = self._counters.get(key, 0) + 1
        if prev_state is not None:
            prev_key = (status.tenant, prev_state)
            self._current[prev_key] = self._current.get(prev_key, 0) - 1
        self._current[key] = self._current.get(key, 0) + 1

        ts = parse_utc(entry["ts"])
        if state == "Received":
            self._received_ts[request_id] = ts
        elif state == "Confirmed":
            received = self._received_ts.pop(request_id, None)
            if received is not None and len(self._latencies) < self.MAX_LATENCY_SAMPLES:
                self._latencies.append((ts - received).total_seconds() * 1000.0)
        elif state == "Failed":
            self._received_ts.pop(request_id, None)
        return status

    # -- queries -----------------------------------------------------------------

    def get(self, request_id: str) -> RequestStatus:
        with self._lock:
            status = self._requests.get(request_id)
            if status is None:
                raise UnknownRequest(request_id)
            return self._copy(status)

    def exists(self, request_id: str) -> bool:
        return request_id in self._requests

    def state_of(self, request_id: str) -> Optional[str]:
        with self._lock:
            status = self._requests.get(request_id)
            return status.state if status else None

    @staticmethod
    def _copy(status: RequestStatus) -> RequestStatus:
        return RequestStatus(
            request_id=status.request_id,
            tenant=status.tenant,
            state=status.state,
            history=list(status.history),
            tx_id=status.tx_id,
            block_number=status.block_number,
            errors=list(status.errors),
        )

    def list_requests(
        self,
        tenant: str,
        state: Optional[str] = None,
        page: int = 0,
        page_size: int = 50,
    ) -> tuple:
        """Newest-first page of a tenant's requests; returns (items, total)."""
        with self._lock:
            ids = self._tenant_order.get(tenant, [])
            selected = []
            for rid in reversed(ids):
                status = self._requests[rid]
                if state is None or status.state == state:
                    selected.append(status)
            total = len(selected)
            start = page * page_size
            return [self._copy(s) for s in selected[start : start + page_size]], total

    def counts(self, tenant: Optional[str] = None) -> dict:
        """Current per-state request counts, optionally for one tenant."""
        with self._lock:
            out = {s: 0 for s in STATES}
            for (t, state), n in self._current.items():
                if tenant is None or t == tenant:
                    out[state] += n
            return out

    # -- metrics -------------------------------------------------------------------

    def metrics_snapshot(self, broker=None) -> MetricsSnapshot:
        with self._lock:
            counters = dict(self._counters)
            current = {k: v for k, v in self._current.items() if v}
            lat = sorted(self._latencies)
        latency = {
            "count": len(lat),
            "avg": (sum(lat) / len(lat)) if lat else 0.0,
            "p50": _quantile(lat, 0.50),
            "p95": _quantile(lat, 0.95),
            "p99": _quantile(lat, 0.99),
        }
        topic_stats = []
        if broker is not None:
            for name in broker.topics():
                topic_stats.append(broker.stats(name))
        return MetricsSnapshot(counters=counters, current=current, latency_ms=latency, topic_stats=topic_stats)


def render_metrics(snapshot: MetricsSnapshot) -> str:
    """Line-oriented text exposition: one ``name{labels} value`` per line."""
    lines = []
    for (tenant, state), n in sorted(snapshot.counters.items()):
        lines.append(f'tracepipe_requests_total{{tenant="{tenant}",state="{state}"}} {n}')
    for (tenant, state), n in sorted(snapshot.current.items()):
        lines.append(f'tracepipe_requests_current{{tenant="{tenant}",state="{state}"}} {n}')
    lat = snapshot.latency_ms
    lines.append(f"tracepipe_e2e_latency_ms_count {lat['count']}")
    lines.append(f"tracepipe_e2e_latency_ms_avg {lat['avg']:.3f}")
    for q in ("p50", "p95", "p99"):
        lines.append(f'tracepipe_e2e_latency_ms{{quantile="{q}"}} {lat[q]:.3f}')
    for ts in snapshot.topic_stats:
        lines.append(f'tracepipe_topic_size_bytes{{topic="{ts.name}"}} {ts.size_bytes}')
        lines.append(f'tracepipe_topic_messages{{topic="{ts.name}"}} {ts.message_count}')
        for group, lag in sorted(ts.lag.items()):
            lines.append(f'tracepipe_topic_lag{{topic="{ts.name}",group="{group}"}} {lag}')
    return "\n".join(lines) + "\n"
