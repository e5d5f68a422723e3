"""Open-loop load generator and broker-overhead measurement harness.

Requests are scheduled at fixed wall-clock slots (index/rate) and issued by a
pool of worker threads over persistent connections, so a slow server delays
responses, not the offered load. Every request carries a unique payload.
The paired mode runs the same workload twice — once bypassing the broker
append, once through it — and reports the enqueue overhead percentage.
"""

from __future__ import annotations

import http.client
import itertools
import json
import re
import threading
import time
import uuid
from dataclasses import dataclass, field
from datetime import datetime, timezone
from typing import Optional
from urllib.parse import urlparse

DEFAULT_PAYLOAD_BYTES = 512


@dataclass
class PhaseResult:
    sent: int = 0
    accepted: int = 0
    rejected: int = 0
    lost: int = 0
    duration_s: float = 0.0
    latencies_ms: list = field(default_factory=list)

    def latency_stats(self) -> dict:
        lat = sorted(self.latencies_ms)

        def q(p):
            if not lat:
                return 0.0
            return lat[min(len(lat) - 1, int(p * len(lat)))]

        return {
            "avg": (sum(lat) / len(lat)) if lat else 0.0,
            "p50": q(0.50),
            "p95": q(0.95),
            "p99": q(0.99),
        }

    @property
    def achieved_rate(self) -> float:
        return self.sent / self.duration_s if self.duration_s else 0.0


@dataclass
class LoadReport:
    endpoint: str
    target_rate: float
    duration_s: float
    payload_bytes: int
    sent: int
    accepted: int
    rejected: int
    lost: int
    achieved_rate: float
    latency_ms: dict
    verified: bool = False
    confirmed_end_to_end: int = 0
    failed_end_to_end: int = 0
    verify_wait_s: float = 0.0
    e2e_latency_ms: Optional[dict] = None
    queue_overhead_pct: Optional[float] = None
    direct_latency_ms: Optional[dict] = None
    broker_latency_ms: Optional[dict] = None

    def to_dict(self) -> dict:
        return {k: v for k, v in self.__dict__.items()}

    def write(self, path) -> None:
        with open(path, "w") as f:
            json.dump(self.to_dict(), f, indent=2, sort_keys=True)
            f.write("\n")


def entry_batch_payload(index: int, payload_bytes: int) -> bytes:
    """Unique entryBatch-shaped body padded to the target size."""
    created = datetime.now(timezone.utc).strftime("%Y-%m-%dT%H:%M:%S")
    base = {
        "batch_id": f"lg-{uuid.uuid4().hex}-{index}",
        "created_at": created,
        "note": "",
    }
    skeleton = len(json.dumps(base, separators=(",", ":")).encode())
    pad = max(0, payload_bytes - skeleton)
    base["note"] = "x" * pad
    return json.dumps(base, separators=(",", ":")).encode()


class _Worker(threading.Thread):
    def __init__(self, host, port, path, headers, schedule, payload_bytes, result, lock, deadline):
        super().__init__(daemon=True)
        self.host, self.port, self.path = host, port, path
        self.headers = headers
        self.schedule = schedule  # (counter, t0, rate, total)
        self.payload_bytes = payload_bytes
        self.result = result
        self.lock = lock
        self.deadline = deadline
        self.local = PhaseResult()

    def run(self):
        counter, t0, rate, total = self.schedule
        conn = http.client.HTTPConnection(self.host, self.port, timeout=15)
        try:
            while True:
                i = next(counter)
                if i >= total:
                    break
                slot = t0 + i / rate
                now = time.monotonic()
                if now < slot:
                    time.sleep(slot - now)
                elif now > self.deadline:
                    break
                started = time.perf_counter()
                self.local.sent += 1
                try:
                    conn.request("POST", self.path, body=entry_batch_payload(i, self.payload_bytes), headers=self.headers)
                    resp = conn.getresponse()
                    resp.read()
                    elapsed_ms = (time.perf_counter() - started) * 1000.0
                    self.local.latencies_ms.append(elapsed_ms)
                    if resp.status == 202:
                        self.local.accepted += 1
                    else:
                        self.local.rejected += 1
                except Exception:
                    self.local.lost += 1
                    try:
                        conn.close()
                    except Exception:
                        pass
                    conn = http.client.HTTPConnection(self.host, self.port, timeout=15)
        finally:
            try:
                conn.close()
            except Exception:
                pass
            with self.lock:
                self.result.sent += self.local.sent
                self.result.accepted += self.local.accepted
                self.result.rejected += self.local.rejected
                self.result.lost += self.local.lost
                self.result.latencies_ms.extend(self.local.latencies_ms)


def run_phase(
    base_url: str,
    endpoint: str,
    rate: float,
    duration_s: float,
    payload_bytes: int,
    username: str,
    api_key: str,
    workers: Optional[int] = None,
    bypass_broker: bool = False,
) -> PhaseResult:
    parsed = urlparse(base_url)
    host, port = parsed.hostname, parsed.port or 80
    headers = {
        "X-Username": username,
        "X-Api-Key": api_key,
        "Content-Type": "application/json",
    }
    if bypass_broker:
        headers["X-Bypass-Broker"] = "1"
    total = int(rate * duration_s)
    workers = workers or min(96, max(8, int(rate // 8)))
    result = PhaseResult()
    lock = threading.Lock()
    t0 = time.monotonic() + 0.25
    deadline = t0 + duration_s + 30.0  # grace for stragglers
    schedule = (itertools.count(), t0, rate, total)
    pool = [
        _Worker(host, port, endpoint, headers, schedule, payload_bytes, result, lock, deadline)
        for _ in range(workers)
    ]
    for w in pool:
        w.start()
    for w in pool:
        w.join()
    result.duration_s = max(time.monotonic() - t0, duration_s)
    assert result.sent == result.accepted + result.rejected + result.lost
    return result


_METRIC_RE = re.compile(r'^(?P<name>[a-zA-Z0-9_]+)(?:\{(?P<labels>[^}]*)\})? (?P<value>[-0-9.eE+]+)$')


def parse_metrics(text: str) -> dict:
    """Map (name, frozenset(label pairs)) -> float from the text exposition."""
    out = {}
    for line in text.strip().split("\n"):
        m = _METRIC_RE.match(line.strip())
        if not m:
            continue
        labels = frozenset(
            tuple(part.split("=", 1)) for part in (m.group("labels") or "").split(",") if "=" in part
        )
        out[(m.group("name"), labels)] = float(m.group("value"))
    return out


def _label(name: str, **labels) -> tuple:
    return (name, frozenset((k, f'"{v}"') for k, v in labels.items()))


def fetch_metrics(base_url: str) -> dict:
    import requests

    return parse_metrics(requests.get(f"{base_url}/metrics", timeout=15).text)


def terminal_counts(metrics: dict, tenant: str) -> tuple:
    confirmed = metrics.get(_label("tracepipe_requests_total", tenant=tenant, state="Confirmed"), 0.0)
    failed = metrics.get(_label("tracepipe_requests_total", tenant=tenant, state="Failed"), 0.0)
    return int(confirmed), int(failed)


def wait_until_terminal(base_url: str, tenant: str, target: int, baseline: tuple, timeout_s: float = 600.0) -> tuple:
    """Poll /metrics until confirmed+failed-baseline reaches target; returns
    (reached, confirmed_delta, failed_delta, waited_s)."""
    t0 = time.monotonic()
    confirmed = failed = 0
    while time.monotonic() - t0 < timeout_s:
        metrics = fetch_metrics(base_url)
        c, f = terminal_counts(metrics, tenant)
        confirmed, failed = c - baseline[0], f - baseline[1]
        if confirmed + failed >= target:
            return True, confirmed, failed, time.monotonic() - t0
        time.sleep(0.25)
    return False, confirmed, failed, time.monotonic() - t0


def e2e_latency_snapshot(base_url: str) -> dict:
    metrics = fetch_metrics(base_url)
    out = {}
    for q in ("p50", "p95", "p99"):
        out[q] = metrics.get(_label("tracepipe_e2e_latency_ms", quantile=q), 0.0)
    out["avg"] = metrics.get(("tracepipe_e2e_latency_ms_avg", frozenset()), 0.0)
    return out


def run_load(
    base_url: str,
    endpoint: str,
    rate: float,
    duration_s: float,
    payload_bytes: int,
    username: str,
    api_key: str,
    tenant: str,
    verify: bool = False,
    verify_timeout_s: float = 600.0,
    workers: Optional[int] = None,
) -> LoadReport:
    baseline = terminal_counts(fetch_metrics(base_url), tenant) if verify else (0, 0)
    phase = run_phase(base_url, endpoint, rate, duration_s, payload_bytes, username, api_key, workers=workers)
    report = LoadReport(
        endpoint=endpoint,
        target_rate=rate,
        duration_s=duration_s,
        payload_bytes=payload_bytes,
        sent=phase.sent,
        accepted=phase.accepted,
        rejected=phase.rejected,
        lost=phase.lost,
        achieved_rate=phase.achieved_rate,
        latency_ms=phase.latency_stats(),
    )
    if verify:
        reached, confirmed, failed, waited = wait_until_terminal(
            base_url, tenant, phase.accepted, baseline, timeout_s=verify_timeout_s
        )
        report.verified = reached
        report.confirmed_end_to_end = confirmed
        report.failed_end_to_end = failed
        report.verify_wait_s = waited
        report.e2e_latency_ms = e2e_latency_snapshot(base_url)
    return report


def run_paired_overhead(
    base_url: str,
    endpoint: str,
    rate: float,
    duration_s: float,
    payload_bytes: int,
    username: str,
    api_key: str,
    workers: Optional[int] = None,
) -> LoadReport:
    """Direct-handler phase (broker append bypassed) then through-broker
    phase; the report carries both latency profiles and the overhead."""
    direct = run_phase(
        base_url, endpoint, rate, duration_s, payload_bytes, username, api_key,
        workers=workers, bypass_broker=True,
    )
    broker = run_phase(
        base_url, endpoint, rate, duration_s, payload_bytes, username, api_key, workers=workers
    )
    direct_stats = direct.latency_stats()
    broker_stats = broker.latency_stats()
    overhead = None
    if direct_stats["avg"] > 0:
        overhead = (broker_stats["avg"] - direct_stats["avg"]) / direct_stats["avg"] * 100.0
    return LoadReport(
        endpoint=endpoint,
        target_rate=rate,
        duration_s=duration_s,
        payload_bytes=payload_bytes,
        sent=direct.sent + broker.sent,
        accepted=direct.accepted + broker.accepted,
        rejected=direct.rejected + broker.rejected,
        lost=direct.lost + broker.lost,
        achieved_rate=broker.achieved_rate,
        latency_ms=broker_stats,
        queue_overhead_pct=overhead,
        direct_latency_ms=direct_stats,
        broker_latency_ms=broker_stats,
    )
