"""Declarative mapping from raw records to canonical events.

A MappingSpec names a tenant, a source kind and optionally an ingress route,
plus a fixed rule library: copy, epc templating, unit conversion to
kilograms, timestamp parsing to UTC, and concatenation. Specs are fully
validated at load time; apply_mapping either yields an event that passes
validate_event or a complete list of located errors, never both.
"""

from __future__ import annotations

import json
import logging
import threading
import time
from dataclasses import dataclass, field
from datetime import datetime, timedelta, timezone
from typing import Optional

from .broker import Backpressure
from .extractors import FileSpec, dlq_topic
from .model import (
    MASS_UNITS_TO_KG,
    Attribute,
    CanonicalEvent,
    RawRecord,
    ValidationError,
    validate_event,
)
from .status import IllegalTransition

logger = logging.getLogger(__name__)

TRANSFORMS = ("copy", "epc", "unit", "time", "concat")

TOP_LEVEL_TARGETS = (
    "event_time",
    "actor",
    "epc_list",
    "biz_location",
    "biz_step",
    "inputs",
    "outputs",
)
LIST_TARGETS = ("epc_list", "inputs", "outputs")
RESERVED_TARGETS = ("record_time", "tenant", "event_type")


class SpecError(Exception):
    def __init__(self, errors):
        super().__init__("; ".join(errors))
        self.errors = list(errors)


@dataclass(frozen=True)
class FieldRule:
    target: str
    source: Optional[str] = None
    transform: str = "copy"
    template: Optional[str] = None  # epc
    fmt: Optional[str] = None  # time
    assume_utc: bool = True  # time: naive values treated as UTC
    from_unit: Optional[str] = None  # unit
    unit: Optional[str] = None  # attribute unit label for copy targets
    sources: tuple = ()  # concat
    separator: str = " "


@dataclass(frozen=True)
class MappingSpec:
    tenant: str
    source_kind: str
    route: Optional[str]
    event_type: str
    rules: tuple
    constants: dict
    filespec: Optional[FileSpec] = None

    def selector(self) -> tuple:
        return (self.tenant, self.source_kind, self.route)


def _is_valid_target(target: str) -> bool:
    return target in TOP_LEVEL_TARGETS or (
        target.startswith("attributes.") and len(target) > len("attributes.")
    )


def load_mapping_spec(raw: dict, filespecs: Optional[dict] = None, where: str = "spec") -> MappingSpec:
    """Build a fully validated MappingSpec or raise SpecError listing every
    problem (no partial load)."""
    errors: list = []
    filespecs = filespecs or {}

    tenant = raw.get("tenant")
    if not tenant:
        errors.append(f"{where}: tenant is required")
    source_kind = raw.get("source_kind")
    if source_kind not in ("http_push", "file_drop", "poll"):
        errors.append(f"{where}: source_kind must be http_push, file_drop or poll; got {source_kind!r}")
    route = raw.get("route")

    event_type = (raw.get("constants") or {}).get("event_type") or raw.get("event_type")
    if event_type not in ("ObjectEvent", "AggregationEvent", "TransformationEvent"):
        errors.append(
            f"{where}: event_type must be a constant ObjectEvent, AggregationEvent or "
            f"TransformationEvent; got {event_type!r}"
        )

    constants = dict(raw.get("constants") or {})
    constants.pop("event_type", None)
    for key in constants:
        if key in RESERVED_TARGETS:
            errors.append(f"{where}: {key} is derived by the pipeline and cannot be a constant")
        elif not _is_valid_target(key):
            errors.append(f"{where}: unknown canonical field {key!r} in constants")

    rules = []
    produced = set(constants)
    filespec = None
    fs_name = raw.get("filespec")
    if source_kind == "file_drop":
        if not fs_name:
            errors.append(f"{where}: file_drop specs must reference a filespec")
        elif fs_name not in filespecs:
            errors.append(f"{where}: unknown filespec {fs_name!r}")
        else:
            filespec = filespecs[fs_name]
    elif fs_name:
        errors.append(f"{where}: filespec only applies to file_drop sources")

    for i, rule_raw in enumerate(raw.get("fields") or []):
        loc = f"{where}.fields[{i}]"
        target = rule_raw.get("target")
        if not target:
            errors.append(f"{loc}: target is required")
            continue
        if target in RESERVED_TARGETS:
            errors.append(f"{loc}: {target} is derived by the pipeline and cannot be mapped")
            continue
        if not _is_valid_target(target):
            errors.append(f"{loc}: unknown canonical field {target!r}")
            continue
        transform = rule_raw.get("transform", "copy")
        if transform not in TRANSFORMS:
            errors.append(f"{loc}: unknown transform {transform!r} (have: {', '.join(TRANSFORMS)})")
            continue
        source = rule_raw.get("source")
        sources = tuple(rule_raw.get("sources") or ())
        if transform == "concat":
            if not sources:
                errors.append(f"{loc}: concat needs a sources list")
                continue
        elif not source:
            errors.append(f"{loc}: source is required")
            continue
        if transform == "epc" and not rule_raw.get("template"):
            errors.append(f"{loc}: epc transform needs a template like 'urn:epc:id:lot:x.{{value}}'")
            continue
        if transform == "time" and not rule_raw.get("fmt"):
            errors.append(f"{loc}: time transform needs a fmt (strptime format)")
            continue
        if transform == "unit":
            from_unit = rule_raw.get("from_unit")
            if from_unit not in MASS_UNITS_TO_KG:
                errors.append(
                    f"{loc}: unit transform needs from_unit in {sorted(MASS_UNITS_TO_KG)}; got {from_unit!r}"
                )
                continue
            if not target.startswith("attributes."):
                errors.append(f"{loc}: unit transform targets an attribute, got {target!r}")
                continue
        if filespec is not None:
            for col in (sources or ((source,) if source else ())):
                if col not in filespec.columns:
                    errors.append(f"{loc}: source column {col!r} not in filespec columns {filespec.columns}")
        rules.append(
            FieldRule(
                target=target,
                source=source,
                transform=transform,
                template=rule_raw.get("template"),
                fmt=rule_raw.get("fmt"),
                assume_utc=bool(rule_raw.get("assume_utc", True)),
                from_unit=rule_raw.get("from_unit"),
                unit=rule_raw.get("unit"),
                sources=sources,
                separator=rule_raw.get("separator", " "),
            )
        )
        produced.add(target)

    required = {"event_time", "actor", "biz_location", "biz_step"}
    if event_type == "TransformationEvent":
        required |= {"inputs", "outputs"}
    else:
        required |= {"epc_list"}
    for missing in sorted(required - produced):
        errors.append(f"{where}: unmapped required field {missing}")

    if errors:
        raise SpecError(errors)
    return MappingSpec(
        tenant=tenant,
        source_kind=source_kind,
        route=route,
        event_type=event_type,
        rules=tuple(rules),
        constants=constants,
        filespec=filespec,
    )


@dataclass
class TransformOutcome:
    request_id: str
    event: Optional[CanonicalEvent] = None
    errors: list = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return self.event is not None


def _resolve_path(data: dict, path: str):
    node = data
    for part in path.split("."):
        if not isinstance(node, dict) or part not in node:
            return None, False
        node = node[part]
    return node, True


def _parse_record_payload(record: RawRecord, spec: MappingSpec):
    if record.content_type == "structured_object":
        try:
            parsed = json.loads(record.payload)
        except json.JSONDecodeError as exc:
            return None, ValidationError("malformed_json", f"payload is not valid JSON: {exc.msg}", "payload")
        if not isinstance(parsed, dict):
            return None, ValidationError("malformed_json", "payload must be a JSON object", "payload")
        return parsed, None
    # delimited_line
    if spec.filespec is None:
        return None, ValidationError("no_filespec", "delimited record but spec has no filespec", "payload")
    cells = record.payload.decode("utf-8", errors="replace").split(spec.filespec.delimiter)
    if len(cells) != len(spec.filespec.columns):
        return None, ValidationError(
            "column_mismatch",
            f"expected {len(spec.filespec.columns)} columns, got {len(cells)}",
            "payload",
        )
    return dict(zip(spec.filespec.columns, cells)), None


def _coerce_number(value):
    if isinstance(value, bool):
        raise ValueError("boolean is not a quantity")
    if isinstance(value, (int, float)):
        return float(value)
    if isinstance(value, str):
        return float(value.strip())
    raise ValueError(f"not numeric: {value!r}")


def apply_mapping(record: RawRecord, spec: MappingSpec, clock_skew: timedelta = timedelta(hours=24)) -> TransformOutcome:
    """Map one RawRecord to a CanonicalEvent; on failure return every located
    error. The result is deterministic in (record, spec)."""
    outcome = TransformOutcome(request_id=record.request_id)
    source, parse_err = _parse_record_payload(record, spec)
    if parse_err is not None:
        outcome.errors.append(parse_err)
        return outcome

    values: dict = {}
    attributes: dict = {}
    errors: list = []

    def assign(target: str, value, unit=None):
        if target.startswith("attributes."):
            attributes[target.split(".", 1)[1]] = Attribute(value=value, unit=unit)
            return
        if target in LIST_TARGETS:
            if not isinstance(value, (list, tuple)):
                value = [value]
            values[target] = tuple(value)
            return
        values[target] = value

    for key, value in spec.constants.items():
        assign(key, value)

    for rule in spec.rules:
        if rule.transform == "concat":
            parts = []
            missing = [s for s in rule.sources if _resolve_path(source, s)[1] is False]
            if missing:
                for m in missing:
                    errors.append(
                        ValidationError("missing_source_field", f"source field {m!r} absent from payload", m)
                    )
                continue
            for s in rule.sources:
                parts.append(str(_resolve_path(source, s)[0]))
            assign(rule.target, rule.separator.join(parts))
            continue

        value, found = _resolve_path(source, rule.source)
        if not found:
            errors.append(
                ValidationError(
                    "missing_source_field", f"source field {rule.source!r} absent from payload", rule.source
                )
            )
            continue
        try:
            if rule.transform == "copy":
                assign(rule.target, value, unit=rule.unit)
            elif rule.transform == "epc":
                items = value if isinstance(value, (list, tuple)) else [value]
                formatted = [rule.template.format(value=item) for item in items]
                assign(rule.target, formatted if rule.target in LIST_TARGETS else formatted[0])
            elif rule.transform == "unit":
                qty = _coerce_number(value) * MASS_UNITS_TO_KG[rule.from_unit]
                assign(rule.target, qty, unit="kg")
            elif rule.transform == "time":
                parsed = datetime.strptime(str(value), rule.fmt)
                if parsed.tzinfo is None:
                    if not rule.assume_utc:
                        raise ValueError("timestamp lacks timezone")
                    parsed = parsed.replace(tzinfo=timezone.utc)
                assign(rule.target, parsed.astimezone(timezone.utc))
        except (ValueError, TypeError, KeyError) as exc:
            errors.append(
                ValidationError(
                    "bad_source_value",
                    f"cannot apply {rule.transform} to {rule.source}={value!r}: {exc}",
                    rule.source,
                )
            )

    if errors:
        outcome.errors = errors
        return outcome

    event = CanonicalEvent(
        event_type=spec.event_type,
        event_time=values.get("event_time"),
        record_time=record.received_at,
        actor=values.get("actor", ""),
        epc_list=tuple(values.get("epc_list", ())),
        biz_location=values.get("biz_location", ""),
        biz_step=values.get("biz_step", ""),
        tenant=record.tenant,
        attributes=attributes,
        inputs=tuple(values.get("inputs", ())),
        outputs=tuple(values.get("outputs", ())),
    )
    validation = validate_event(event, clock_skew=clock_skew)
    if validation:
        outcome.errors = validation
        return outcome
    outcome.event = event
    return outcome


class SpecIndex:
    """Route-aware lookup: (tenant, source_kind, route) falling back to
    (tenant, source_kind, None)."""

    def __init__(self, specs):
        self._by_selector = {}
        for spec in specs:
            key = spec.selector()
            if key in self._by_selector:
                raise SpecError([f"duplicate mapping spec for {key}"])
            self._by_selector[key] = spec

    def find(self, tenant: str, source_kind: str, route: str) -> Optional[MappingSpec]:
        return self._by_selector.get((tenant, source_kind, route)) or self._by_selector.get(
            (tenant, source_kind, None)
        )

    def __iter__(self):
        return iter(self._by_selector.values())


class Transformer:
    """Per-tenant loop: raw topic -> mapping -> epcis topic (+ status)."""

    def __init__(
        self,
        tenant: str,
        broker,
        status_store,
        specs: SpecIndex,
        clock_skew: timedelta = timedelta(hours=24),
        batch_size: int = 200,
        idle_sleep: float = 0.02,
        pace_s: float = 0.0005,
    ):
        self.tenant = tenant
        self.broker = broker
        self.status = status_store
        self.specs = specs
        self.clock_skew = clock_skew
        self.batch_size = batch_size
        self.idle_sleep = idle_sleep
        # embedded consumers share the interpreter with the ingest event
        # loop; a sub-millisecond pace per message keeps ingest latency flat
        # under bursts while the broker absorbs the backlog
        self.pace_s = pace_s
        self.raw_topic = f"{tenant}.raw"
        self.epcis_topic = f"{tenant}.epcis"
        self.dlq = dlq_topic(tenant)
        self.group = f"transform:{tenant}"
        self._stop = threading.Event()
        self._thread: Optional[threading.Thread] = None

    def _record_status(self, request_id: str, state: str, **kwargs) -> None:
        try:
            self.status.record_transition(request_id, state, **kwargs)
        except IllegalTransition:
            # redelivery after a crash: the record already progressed
            logger.debug("skipping %s -> %s (already past)", request_id, state)

    def _to_dlq(self, record: RawRecord, errors) -> None:
        body = json.dumps(
            {"record": record.to_json_dict(), "errors": [e.to_dict() for e in errors]},
            separators=(",", ":"),
        ).encode("utf-8")
        try:
            self.broker.append(self.dlq, record.request_id, body)
        except Backpressure:
            logger.warning("dlq %s under backpressure; entry dropped from dlq (status retained)", self.dlq)

    def process_available(self) -> int:
        """Drain whatever is currently readable; returns records handled."""
        handled = 0
        while True:
            start = self.broker.committed(self.raw_topic, self.group) + 1
            messages = self.broker.read(self.raw_topic, self.group, start, self.batch_size)
            if not messages:
                return handled
            done_through = None
            for message in messages:
                if not self._process_one(message):
                    break  # shutdown mid-message: leave it for redelivery
                done_through = message.offset
                handled += 1
                if self.pace_s:
                    time.sleep(self.pace_s)
            if done_through is not None:
                # outcomes are durable before the offset moves
                self.status.flush()
                self.broker.flush_topic(self.epcis_topic)
                self.broker.commit_offset(self.raw_topic, self.group, done_through)
            if self._stop.is_set() or done_through != messages[-1].offset:
                return handled

    def _process_one(self, message) -> bool:
        """Handle one raw message; False means shutdown interrupted it and it
        must be redelivered."""
        try:
            record = RawRecord.from_json_dict(json.loads(message.payload))
        except Exception as exc:
            logger.error("undecodable raw record at %s[%d]: %s", self.raw_topic, message.offset, exc)
            return True
        if not self.status.exists(record.request_id):
            # append outran the status write (crash window or ingest race)
            try:
                self.status.record_transition(
                    record.request_id, "Received", tenant=record.tenant, detail="recovered from raw topic"
                )
            except IllegalTransition:
                pass
        spec = self.specs.find(record.tenant, record.source_kind, record.route)
        if spec is None:
            errors = [
                ValidationError(
                    "no_mapping_spec",
                    f"no mapping spec for tenant={record.tenant} source={record.source_kind} route={record.route}",
                    "route",
                )
            ]
            self._record_status(record.request_id, "Failed", detail="no mapping spec", errors=errors)
            self._to_dlq(record, errors)
            return True
        outcome = apply_mapping(record, spec, clock_skew=self.clock_skew)
        if outcome.ok:
            envelope = json.dumps(
                {"request_id": record.request_id, "event": outcome.event.to_dict()},
                separators=(",", ":"),
            ).encode("utf-8")
            appended = False
            while True:
                try:
                    self.broker.append(self.epcis_topic, outcome.event.idempotency_key(), envelope)
                    appended = True
                    break
                except Backpressure:
                    if self._stop.is_set():
                        break
                    time.sleep(0.05)
            if not appended:
                return False
            self._record_status(record.request_id, "Translated", detail=f"event_type={outcome.event.event_type}")
        else:
            self._record_status(record.request_id, "Failed", detail="mapping failed", errors=outcome.errors)
            self._to_dlq(record, outcome.errors)
        return True

    def _loop(self) -> None:
        while not self._stop.is_set():
            if self.process_available() == 0:
                self._stop.wait(self.idle_sleep)

    def start(self) -> None:
        self._thread = threading.Thread(target=self._loop, daemon=True, name=f"transformer-{self.tenant}")
        self._thread.start()

    def stop(self) -> None:
        self._stop.set()
        if self._thread is not None:
            self._thread.join(timeout=10.0)
