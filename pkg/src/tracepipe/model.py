"""Canonical event model: serialization, idempotency keys, validation.

Everything downstream of ingestion speaks CanonicalEvent. The canonical JSON
form (sorted keys, UTF-8, no insignificant whitespace, one number rendering)
is what idempotency keys are computed over, so two payloads that differ only
in key order or whitespace hash identically.
"""

from __future__ import annotations

import base64
import hashlib
import math
import re
import uuid
from dataclasses import dataclass, field
from datetime import datetime, timedelta, timezone
from typing import Any, Mapping, Optional

EVENT_TYPES = ("ObjectEvent", "AggregationEvent", "TransformationEvent")
SOURCE_KINDS = ("http_push", "file_drop", "poll")
CONTENT_TYPES = ("structured_object", "delimited_line")

# Mass units recognized for canonical-unit enforcement; kilograms is canonical.
MASS_UNITS_TO_KG = {
    "mg": 1e-6,
    "g": 0.001,
    "kg": 1.0,
    "t": 1000.0,
    "lb": 0.45359237,
    "oz": 0.028349523125,
}

_TENANT_RE = re.compile(r"^[a-z0-9][a-z0-9-]{0,63}$")


class CanonicalizationError(ValueError):
    """Raised for values the canonical JSON form cannot represent."""


def is_valid_tenant_id(value: Any) -> bool:
    return isinstance(value, str) and bool(_TENANT_RE.match(value))


def new_request_id() -> str:
    return uuid.uuid4().hex


# ---------------------------------------------------------------------------
# Canonical JSON
# ---------------------------------------------------------------------------

_STRING_ESCAPES = {
    "\\": "\\\\",
    '"': '\\"',
    "\b": "\\b",
    "\f": "\\f",
    "\n": "\\n",
    "\r": "\\r",
    "\t": "\\t",
}


def _encode_string(s: str, out: list) -> None:
    out.append('"')
    for ch in s:
        esc = _STRING_ESCAPES.get(ch)
        if esc is not None:
            out.append(esc)
        elif ch < "\x20":
            out.append("\\u%04x" % ord(ch))
        else:
            out.append(ch)
    out.append('"')


def _encode_number(value: float, out: list) -> None:
    if not math.isfinite(value):
        raise CanonicalizationError(f"non-finite number not representable: {value!r}")
    if value.is_integer() and abs(value) < 2**53:
        out.append(str(int(value)))
    else:
        out.append(repr(value))


def _encode(value: Any, out: list) -> None:
    if value is None:
        out.append("null")
    elif value is True:
        out.append("true")
    elif value is False:
        out.append("false")
    elif isinstance(value, str):
        _encode_string(value, out)
    elif isinstance(value, int):
        out.append(str(value))
    elif isinstance(value, float):
        _encode_number(value, out)
    elif isinstance(value, (list, tuple)):
        out.append("[")
        for i, item in enumerate(value):
            if i:
                out.append(",")
            _encode(item, out)
        out.append("]")
    elif isinstance(value, Mapping):
        keys = list(value.keys())
        for k in keys:
            if not isinstance(k, str):
                raise CanonicalizationError(f"map key must be a string, got {type(k).__name__}")
        out.append("{")
        for i, k in enumerate(sorted(keys)):
            if i:
                out.append(",")
            _encode_string(k, out)
            out.append(":")
            _encode(value[k], out)
        out.append("}")
    else:
        raise CanonicalizationError(f"unsupported value type: {type(value).__name__}")


def canonical_json_bytes(payload: Any) -> bytes:
    """Render a structured value as canonical JSON bytes.

    Map keys are sorted by code point, text is UTF-8, there is no
    insignificant whitespace, and integral floats render as integers so a
    given logical value has exactly one byte representation.
    """
    out: list = []
    _encode(payload, out)
    return "".join(out).encode("utf-8")


def compute_idempotency_key(canonical_bytes: bytes) -> str:
    """SHA-256 digest of the canonical serialization, lowercase hex (64 chars)."""
    return hashlib.sha256(canonical_bytes).hexdigest()


# ---------------------------------------------------------------------------
# Timestamps
# ---------------------------------------------------------------------------


def to_utc(dt: datetime) -> datetime:
    if dt.tzinfo is None:
        raise ValueError("naive datetime; timestamps must be timezone-aware")
    return dt.astimezone(timezone.utc)


def format_utc(dt: datetime) -> str:
    dt = to_utc(dt)
    base = dt.strftime("%Y-%m-%dT%H:%M:%S")
    if dt.microsecond:
        base += ".%06d" % dt.microsecond
    return base + "Z"


def parse_utc(text: str) -> datetime:
    if not isinstance(text, str):
        raise ValueError(f"timestamp must be a string, got {type(text).__name__}")
    raw = text.strip()
    if raw.endswith(("Z", "z")):
        raw = raw[:-1] + "+00:00"
    dt = datetime.fromisoformat(raw)
    if dt.tzinfo is None:
        raise ValueError(f"timestamp lacks timezone: {text!r}")
    return dt.astimezone(timezone.utc)


def utc_now() -> datetime:
    return datetime.now(timezone.utc)


# ---------------------------------------------------------------------------
# Domain records
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ValidationError:
    code: str
    message: str
    locus: Optional[str] = None

    def to_dict(self) -> dict:
        return {"code": self.code, "message": self.message, "locus": self.locus}

    @classmethod
    def from_dict(cls, d: Mapping) -> "ValidationError":
        return cls(code=d["code"], message=d["message"], locus=d.get("locus"))


@dataclass(frozen=True)
class Attribute:
    """A 'how' attribute: a value with an optional unit (mass in kilograms)."""

    value: Any
    unit: Optional[str] = None


@dataclass(frozen=True)
class CanonicalEvent:
    event_type: str
    event_time: datetime
    record_time: datetime
    actor: str
    epc_list: tuple
    biz_location: str
    biz_step: str
    tenant: str
    attributes: Mapping[str, Attribute] = field(default_factory=dict)
    inputs: tuple = ()
    outputs: tuple = ()

    def to_dict(self) -> dict:
        d = {
            "event_type": self.event_type,
            "event_time": format_utc(self.event_time),
            "record_time": format_utc(self.record_time),
            "actor": self.actor,
            "epc_list": list(self.epc_list),
            "biz_location": self.biz_location,
            "biz_step": self.biz_step,
            "tenant": self.tenant,
            "attributes": {
                k: {"value": a.value, "unit": a.unit} for k, a in sorted(self.attributes.items())
            },
        }
        if self.event_type == "TransformationEvent":
            d["inputs"] = list(self.inputs)
            d["outputs"] = list(self.outputs)
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "CanonicalEvent":
        attrs = {}
        for k, v in (d.get("attributes") or {}).items():
            if isinstance(v, Mapping):
                attrs[k] = Attribute(value=v.get("value"), unit=v.get("unit"))
            else:
                attrs[k] = Attribute(value=v)
        return cls(
            event_type=d["event_type"],
            event_time=parse_utc(d["event_time"]),
            record_time=parse_utc(d["record_time"]),
            actor=d["actor"],
            epc_list=tuple(d.get("epc_list") or ()),
            biz_location=d["biz_location"],
            biz_step=d["biz_step"],
            tenant=d["tenant"],
            attributes=attrs,
            inputs=tuple(d.get("inputs") or ()),
            outputs=tuple(d.get("outputs") or ()),
        )

    def canonical_bytes(self) -> bytes:
        return canonical_json_bytes(self.to_dict())

    def content_dict(self) -> dict:
        """The event minus record_time: receipt time is transport metadata, so
        replays of one logical event must serialize identically."""
        d = self.to_dict()
        d.pop("record_time")
        return d

    def idempotency_key(self) -> str:
        return compute_idempotency_key(canonical_json_bytes(self.content_dict()))


@dataclass(frozen=True)
class RawRecord:
    """An ingested payload plus provenance, before transformation.

    ``route`` names the ingress (entry_batch, manage_batches, exit_batch,
    upload, poll:<source_id>) so the transform stage can pick a mapping spec;
    ``payload`` is the ingested bytes exactly as received.
    """

    request_id: str
    tenant: str
    source_kind: str
    received_at: datetime
    content_type: str
    payload: bytes
    route: str = ""

    def __post_init__(self):
        if not self.payload:
            raise ValueError("RawRecord payload must be non-empty")
        if self.source_kind not in SOURCE_KINDS:
            raise ValueError(f"unknown source_kind: {self.source_kind!r}")
        if self.content_type not in CONTENT_TYPES:
            raise ValueError(f"unknown content_type: {self.content_type!r}")

    def to_json_dict(self) -> dict:
        return {
            "request_id": self.request_id,
            "tenant": self.tenant,
            "source_kind": self.source_kind,
            "received_at": format_utc(self.received_at),
            "content_type": self.content_type,
            "payload_b64": base64.b64encode(self.payload).decode("ascii"),
            "route": self.route,
        }

    @classmethod
    def from_json_dict(cls, d: Mapping) -> "RawRecord":
        return cls(
            request_id=d["request_id"],
            tenant=d["tenant"],
            source_kind=d["source_kind"],
            received_at=parse_utc(d["received_at"]),
            content_type=d["content_type"],
            payload=base64.b64decode(d["payload_b64"]),
            route=d.get("route", ""),
        )


# ---------------------------------------------------------------------------
# Event validation
# ---------------------------------------------------------------------------

DEFAULT_CLOCK_SKEW = timedelta(hours=24)


def _check_epc(value: Any) -> bool:
    return isinstance(value, str) and value.startswith("urn:") and len(value) > 4


def validate_event(event: CanonicalEvent, clock_skew: timedelta = DEFAULT_CLOCK_SKEW) -> list:
    """Return a list of ValidationError, empty when every invariant holds.

    Each error names the offending field in ``locus``.
    """
    errors: list = []

    if event.event_type not in EVENT_TYPES:
        errors.append(
            ValidationError(
                "invalid_event_type",
                f"event_type must be one of {', '.join(EVENT_TYPES)}; got {event.event_type!r}",
                "event_type",
            )
        )
    if not is_valid_tenant_id(event.tenant):
        errors.append(
            ValidationError(
                "invalid_tenant",
                f"tenant must be 1-64 lowercase alphanumeric/dash characters; got {event.tenant!r}",
                "tenant",
            )
        )
    if not isinstance(event.actor, str) or not event.actor:
        errors.append(ValidationError("missing_actor", "actor must be a non-empty party identifier", "actor"))
    if not isinstance(event.biz_location, str) or not event.biz_location:
        errors.append(
            ValidationError("missing_biz_location", "biz_location must be a non-empty location identifier", "biz_location")
        )
    if not isinstance(event.biz_step, str) or not event.biz_step:
        errors.append(ValidationError("missing_biz_step", "biz_step must be a non-empty vocabulary string", "biz_step"))

    is_transformation = event.event_type == "TransformationEvent"
    if is_transformation:
        if not event.inputs:
            errors.append(
                ValidationError("missing_inputs", "TransformationEvent requires a non-empty inputs EPC list", "inputs")
            )
        if not event.outputs:
            errors.append(
                ValidationError("missing_outputs", "TransformationEvent requires a non-empty outputs EPC list", "outputs")
            )
        for name, epcs in (("inputs", event.inputs), ("outputs", event.outputs)):
            for i, epc in enumerate(epcs):
                if not _check_epc(epc):
                    errors.append(
                        ValidationError("invalid_epc", f"{name}[{i}] is not a GS1 EPC URI: {epc!r}", f"{name}[{i}]")
                    )
    else:
        if not event.epc_list:
            errors.append(
                ValidationError("missing_epcs", "epc_list must contain at least one EPC URI", "epc_list")
            )
        if event.inputs or event.outputs:
            errors.append(
                ValidationError(
                    "unexpected_io_lists",
                    f"inputs/outputs are only valid on TransformationEvent, not {event.event_type}",
                    "inputs",
                )
            )
    for i, epc in enumerate(event.epc_list):
        if not _check_epc(epc):
            errors.append(ValidationError("invalid_epc", f"epc_list[{i}] is not a GS1 EPC URI: {epc!r}", f"epc_list[{i}]"))

    for ts_name in ("event_time", "record_time"):
        ts = getattr(event, ts_name)
        if not isinstance(ts, datetime) or ts.tzinfo is None:
            errors.append(
                ValidationError("invalid_timestamp", f"{ts_name} must be a timezone-aware UTC timestamp", ts_name)
            )
    if (
        isinstance(event.event_time, datetime)
        and isinstance(event.record_time, datetime)
        and event.event_time.tzinfo is not None
        and event.record_time.tzinfo is not None
        and to_utc(event.event_time) > to_utc(event.record_time) + clock_skew
    ):
        errors.append(
            ValidationError(
                "clock_skew",
                "event_time is more than the allowed clock skew "
                f"({clock_skew}) ahead of record_time",
                "event_time",
            )
        )

    for name, attr in event.attributes.items():
        if not isinstance(attr, Attribute):
            errors.append(
                ValidationError("invalid_attribute", f"attributes.{name} must be a (value, unit) pair", f"attributes.{name}")
            )
            continue
        unit = attr.unit
        if unit is not None and unit in MASS_UNITS_TO_KG and unit != "kg":
            errors.append(
                ValidationError(
                    "non_canonical_unit",
                    f"attributes.{name} uses mass unit {unit!r}; mass must be normalized to kg",
                    f"attributes.{name}",
                )
            )

    return errors
