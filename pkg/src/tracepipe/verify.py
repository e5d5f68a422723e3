"""End-to-end functional matrix: authentication, input validation,
transformation, routing isolation, and duplicate-commit suppression, driven
through the public HTTP surface of a running service.
"""

from __future__ import annotations

import json
import time
import uuid
from dataclasses import dataclass, field
from typing import Optional

import requests

from .config import PipelineConfig
from .model import CanonicalEvent, validate_event


@dataclass
class RowResult:
    name: str
    passed: bool = True
    details: list = field(default_factory=list)
    counts: dict = field(default_factory=dict)

    def check(self, ok: bool, message: str) -> None:
        self.details.append(("ok" if ok else "FAIL") + ": " + message)
        if not ok:
            self.passed = False


class VerifyClient:
    def __init__(self, base_url: str, config: PipelineConfig):
        self.base_url = base_url
        self.config = config
        self._tenant_creds = {}
        by_username = {c.username: c for c in config.credentials}
        for username, key in config.clients.items():
            cred = by_username.get(username)
            if cred is not None:
                self._tenant_creds[cred.tenant] = (username, key)

    def headers(self, tenant: Optional[str]) -> dict:
        if tenant is None:
            return {}
        if tenant not in self._tenant_creds:
            raise RuntimeError(
                f"config has no client key for tenant {tenant!r}; add it under clients:"
            )
        username, key = self._tenant_creds[tenant]
        return {"X-Username": username, "X-Api-Key": key}

    def post_json(self, path: str, payload, tenant: Optional[str], raw: Optional[bytes] = None):
        data = raw if raw is not None else json.dumps(payload).encode()
        return requests.post(
            f"{self.base_url}{path}",
            data=data,
            headers={**self.headers(tenant), "Content-Type": "application/json"},
            timeout=15,
        )

    def get(self, path: str, tenant: Optional[str] = None, **kwargs):
        return requests.get(f"{self.base_url}{path}", headers=self.headers(tenant), timeout=15, **kwargs)

    def wait_terminal(self, request_id: str, tenant: str, timeout: float = 30.0) -> dict:
        deadline = time.monotonic() + timeout
        last = None
        while time.monotonic() < deadline:
            r = self.get(f"/status/{request_id}", tenant=tenant)
            if r.status_code == 200:
                last = r.json()
                if last["state"] in ("Confirmed", "Failed"):
                    return last
            time.sleep(0.05)
        raise TimeoutError(f"request {request_id} not terminal after {timeout}s: {last}")


def _unique_batch() -> str:
    return f"vf{uuid.uuid4().hex[:12]}"


def row_authentication(client: VerifyClient) -> RowResult:
    row = RowResult("authentication")
    body = {"batch_id": _unique_batch(), "created_at": "2026-06-02T09:00:00"}
    r = client.post_json("/entryBatch", body, tenant="factory")
    row.check(r.status_code == 202, f"valid credentials accepted (got {r.status_code})")

    username, _ = client._tenant_creds["factory"]
    r = requests.post(
        f"{client.base_url}/entryBatch",
        json=body,
        headers={"X-Username": username, "X-Api-Key": "wrong-key"},
        timeout=15,
    )
    ok = r.status_code == 401
    err = r.json().get("error", {}) if ok else {}
    row.check(ok, f"invalid key rejected with 401 (got {r.status_code})")
    row.check(bool(err.get("code") and err.get("message")), f"401 body names the failure: {err}")

    r = requests.post(f"{client.base_url}/entryBatch", json=body, timeout=15)
    row.check(r.status_code == 401, f"missing credentials rejected with 401 (got {r.status_code})")
    row.check(
        r.json().get("error", {}).get("code") == "missing_credentials",
        "missing-credential failure is distinguished",
    )
    return row


def row_input_validation(client: VerifyClient) -> RowResult:
    row = RowResult("input_validation")
    r = client.post_json("/entryBatch", None, tenant="factory", raw=b'{"batch_id": ')
    row.check(r.status_code == 400, f"syntactically broken body rejected 400 (got {r.status_code})")
    err = r.json().get("error", {})
    row.check(bool(err.get("locus")), f"rejection names the locus: {err.get('locus')!r}")

    # semantically broken: missing the mapped entry_batch_ids field
    r = client.post_json(
        "/manageBatches",
        {"exit_batch_id": _unique_batch(), "created_at": "2026-06-02T12:00:00"},
        tenant="factory",
    )
    row.check(r.status_code == 202, "semantically broken payload accepted for async validation")
    status = client.wait_terminal(r.json()["request_id"], "factory")
    row.check(status["state"] == "Failed", f"missing field surfaces as Failed (got {status['state']})")
    loci = [e.get("locus") for e in status.get("errors", [])]
    row.check("entry_batch_ids" in loci, f"failure names the offending field: {loci}")
    return row


def row_transformation(client: VerifyClient) -> RowResult:
    row = RowResult("transformation")
    entry = _unique_batch()
    r = client.post_json(
        "/entryBatch", {"batch_id": entry, "created_at": "2026-06-02T09:00:00"}, tenant="factory"
    )
    status = client.wait_terminal(r.json()["request_id"], "factory")
    row.check(status["state"] == "Confirmed", f"entry batch reached Confirmed (got {status['state']})")

    journey = client.get(f"/journey/urn:epc:id:lot:cherry.{entry}", tenant="factory").json()
    row.check(len(journey["entries"]) == 1, f"journey returned the event ({len(journey['entries'])} entries)")
    if journey["entries"]:
        event_dict = journey["entries"][0]["event"]
        try:
            errors = validate_event(CanonicalEvent.from_dict(event_dict))
            row.check(errors == [], f"committed event matches the canonical schema ({len(errors)} errors)")
        except Exception as exc:
            row.check(False, f"committed event unparsable: {exc}")
        row.check(event_dict.get("event_type") == "ObjectEvent", "event type mapped correctly")
        row.check(
            event_dict.get("record_time") is not None and event_dict.get("event_time") is not None,
            "timestamps populated and normalized",
        )
    return row


def row_routing(client: VerifyClient) -> RowResult:
    row = RowResult("routing")
    batch = _unique_batch()
    r = client.post_json(
        "/entryBatch", {"batch_id": batch, "created_at": "2026-06-02T09:00:00"}, tenant="factory"
    )
    rid = r.json()["request_id"]
    client.wait_terminal(rid, "factory")

    listing_factory = client.get("/requests", tenant="factory", params={"page_size": 500}).json()
    listing_retail = client.get("/requests", tenant="retail", params={"page_size": 500}).json()
    ids_factory = {i["request_id"] for i in listing_factory["items"]}
    ids_retail = {i["request_id"] for i in listing_retail["items"]}
    row.check(rid in ids_factory, "request listed under its own tenant")
    row.check(not ids_factory & ids_retail, "tenant listings are disjoint")

    r = client.get(f"/status/{rid}", tenant="retail")
    row.check(r.status_code == 403, f"cross-tenant status read denied (got {r.status_code})")

    # 'receiving' events are not promoted to the shared channel
    journey_anon = requests.get(f"{client.base_url}/journey/urn:epc:id:lot:cherry.{batch}", timeout=15).json()
    row.check(journey_anon["entries"] == [], "private event invisible to anonymous callers")
    journey_member = client.get(f"/journey/urn:epc:id:lot:cherry.{batch}", tenant="factory").json()
    row.check(len(journey_member["entries"]) == 1, "private event visible to its member")
    return row


def row_duplicate_writing(client: VerifyClient, flood: int = 10) -> RowResult:
    row = RowResult("duplicate_writing")
    batch = _unique_batch()
    payload_sorted = json.dumps(
        {"batch_id": batch, "created_at": "2026-06-02T09:00:00"}, sort_keys=True
    ).encode()
    payload_reversed = json.dumps(
        dict(reversed(list(json.loads(payload_sorted).items())))
    ).encode()
    assert payload_sorted != payload_reversed

    rids = []
    for i in range(flood):
        raw = payload_sorted if i % 2 == 0 else payload_reversed
        r = client.post_json("/entryBatch", None, tenant="factory", raw=raw)
        row.check(r.status_code == 202, f"flood request {i} accepted")
        rids.append(r.json()["request_id"])

    statuses = [client.wait_terminal(rid, "factory", timeout=60) for rid in rids]
    confirmed = [s for s in statuses if s["state"] == "Confirmed"]
    row.check(len(confirmed) == flood, f"all {flood} flood requests reached Confirmed")
    suppressed = [s for s in statuses if s["history"][-1]["detail"] == "duplicate_suppressed"]
    tx_ids = {s["tx_id"] for s in statuses}
    row.check(len(tx_ids) == 1, f"all statuses correlate to one transaction ({len(tx_ids)})")
    row.counts["duplicates_suppressed"] = len(suppressed)
    row.check(len(suppressed) == flood - 1, f"{len(suppressed)} duplicates suppressed (expected {flood - 1})")

    journey = client.get(f"/journey/urn:epc:id:lot:cherry.{batch}", tenant="factory").json()
    row.check(len(journey["entries"]) == 1, f"single commit only ({len(journey['entries'])} ledger entries)")
    return row


def run_matrix(base_url: str, config: PipelineConfig) -> tuple:
    """Run all five rows; returns (passed, rows)."""
    client = VerifyClient(base_url, config)
    rows = [
        row_authentication(client),
        row_input_validation(client),
        row_transformation(client),
        row_routing(client),
        row_duplicate_writing(client),
    ]
    return all(r.passed for r in rows), rows


def render_rows(rows) -> str:
    lines = []
    for row in rows:
        lines.append(f"[{'PASS' if row.passed else 'FAIL'}] {row.name}")
        for detail in row.details:
            lines.append(f"    {detail}")
        for key, value in row.counts.items():
            lines.append(f"    {key} = {value}")
    return "\n".join(lines)
