"""Broker-to-ledger bridge: consumes canonical events, submits them to the
tenant's channel (and to the shared channel when the promotion rule
matches), drives status transitions, and commits offsets only after the
outcome is durable. At-least-once delivery plus ledger idempotency gives the
exactly-once effect.
"""

from __future__ import annotations

import json
import logging
import threading
import time
from dataclasses import dataclass, field
from typing import Optional

from .extractors import dlq_topic
from .ledger import AccessDenied, Committed, Duplicate, EventRejected, LedgerClosed
from .model import CanonicalEvent, ValidationError
from .status import IllegalTransition

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class RetryPolicy:
    base_ms: int = 100
    multiplier: float = 2.0
    cap_ms: int = 30_000

    def delay(self, attempt: int) -> float:
        d = self.base_ms * (self.multiplier**attempt)
        return min(d, self.cap_ms) / 1000.0


@dataclass(frozen=True)
class SharedChannelRule:
    """Predicate selecting events that also go to the shared channel."""

    biz_steps: frozenset = frozenset()
    event_types: frozenset = frozenset()

    def matches(self, event: CanonicalEvent) -> bool:
        if not self.biz_steps and not self.event_types:
            return False
        if self.biz_steps and event.biz_step not in self.biz_steps:
            return False
        if self.event_types and event.event_type not in self.event_types:
            return False
        return True


@dataclass(frozen=True)
class LoaderPipeline:
    tenant: str
    channel: str
    shared_channel: Optional[str] = None
    shared_rule: SharedChannelRule = field(default_factory=SharedChannelRule)
    retry: RetryPolicy = field(default_factory=RetryPolicy)

    @property
    def epcis_topic(self) -> str:
        return f"{self.tenant}.epcis"

    @property
    def group(self) -> str:
        return f"loader:{self.tenant}"


class Loader:
    """One sequential loop per pipeline."""

    def __init__(
        self,
        pipeline: LoaderPipeline,
        broker,
        ledger,
        status_store,
        batch_size: int = 100,
        idle_sleep: float = 0.02,
        pace_s: float = 0.0005,
    ):
        self.pipeline = pipeline
        self.broker = broker
        self.ledger = ledger
        self.status = status_store
        self.batch_size = batch_size
        self.idle_sleep = idle_sleep
        # same pacing rationale as the transformer: never starve the ingest loop
        self.pace_s = pace_s
        self._stop = threading.Event()
        self._thread: Optional[threading.Thread] = None
        self._in_flight = 0

    # -- status helpers ---------------------------------------------------------

    def _record(self, request_id: str, state: str, **kwargs) -> None:
        try:
            self.status.record_transition(request_id, state, **kwargs)
        except IllegalTransition:
            logger.debug("loader: %s already past %s", request_id, state)

    # -- core loop ----------------------------------------------------------------

    def process_available(self) -> int:
        pipe = self.pipeline
        handled = 0
        while True:
            start = self.broker.committed(pipe.epcis_topic, pipe.group) + 1
            messages = self.broker.read(pipe.epcis_topic, pipe.group, start, self.batch_size)
            if not messages:
                return handled
            self._in_flight = len(messages)
            done_through = None
            try:
                for message in messages:
                    if not self._process_one(message):
                        break
                    done_through = message.offset
                    handled += 1
                    self._in_flight -= 1
                    if self.pace_s:
                        time.sleep(self.pace_s)
            finally:
                self._in_flight = 0
            if done_through is not None:
                self.status.flush()
                self.broker.commit_offset(pipe.epcis_topic, pipe.group, done_through)
            if self._stop.is_set() or done_through != messages[-1].offset:
                return handled

    def _process_one(self, message) -> bool:
        """Submit one event; False means shutdown interrupted the retry loop
        and the message must be redelivered."""
        pipe = self.pipeline
        try:
            envelope = json.loads(message.payload)
            request_id = envelope["request_id"]
            event = CanonicalEvent.from_dict(envelope["event"])
        except Exception as exc:
            logger.error("undecodable canonical envelope at %s[%d]: %s", pipe.epcis_topic, message.offset, exc)
            return True

        current = self.status.state_of(request_id)
        if current in ("Confirmed", "Failed"):
            return True  # redelivery of an already-terminal request
        self._record(request_id, "Processing", detail=f"submitting to {pipe.channel}")

        attempt = 0
        while True:
            try:
                result = self.ledger.submit(pipe.channel, pipe.tenant, event)
                break
            except (AccessDenied, EventRejected) as exc:
                errors = getattr(exc, "errors", None) or [
                    ValidationError("submit_rejected", str(exc), "event")
                ]
                self._record(request_id, "Failed", detail="ledger rejected event", errors=errors)
                self._to_dlq(request_id, envelope, errors)
                return True
            except LedgerClosed:
                return False
            except Exception as exc:
                if self._stop.is_set():
                    return False
                delay = pipe.retry.delay(attempt)
                logger.warning(
                    "transient submit failure on %s (attempt %d, retrying in %.2fs): %s",
                    pipe.channel,
                    attempt,
                    delay,
                    exc,
                )
                if self._stop.wait(delay):
                    return False
                attempt += 1

        if pipe.shared_channel and pipe.shared_rule.matches(event):
            if not self._submit_shared(event):
                return False

        if isinstance(result, Committed):
            self._record(
                request_id,
                "Confirmed",
                detail="committed",
                tx_id=result.tx_id,
                block_number=result.block_number,
            )
        elif isinstance(result, Duplicate):
            self._record(
                request_id,
                "Confirmed",
                detail="duplicate_suppressed",
                tx_id=result.existing_tx_id,
                block_number=result.block_number,
            )
        return True

    def _submit_shared(self, event: CanonicalEvent) -> bool:
        pipe = self.pipeline
        attempt = 0
        while True:
            try:
                self.ledger.submit(pipe.shared_channel, pipe.tenant, event)
                return True
            except (AccessDenied, EventRejected) as exc:
                # private commit stands; promotion failure is logged, not fatal
                logger.error("shared-channel submit rejected on %s: %s", pipe.shared_channel, exc)
                return True
            except LedgerClosed:
                return False
            except Exception as exc:
                if self._stop.is_set():
                    return False
                delay = pipe.retry.delay(attempt)
                logger.warning("transient shared submit failure (retry in %.2fs): %s", delay, exc)
                if self._stop.wait(delay):
                    return False
                attempt += 1

    def _to_dlq(self, request_id: str, envelope: dict, errors) -> None:
        body = json.dumps({"envelope": envelope, "errors": [e.to_dict() for e in errors]}).encode()
        try:
            self.broker.append(dlq_topic(self.pipeline.tenant), request_id, body)
        except Exception as exc:
            logger.warning("could not dead-letter %s: %s", request_id, exc)

    def _loop(self) -> None:
        while not self._stop.is_set():
            if self.process_available() == 0:
                self._stop.wait(self.idle_sleep)

    def start(self) -> None:
        self._thread = threading.Thread(target=self._loop, daemon=True, name=f"loader-{self.pipeline.tenant}")
        self._thread.start()

    def drain(self, timeout: float = 30.0) -> str:
        """Stop reading, let in-flight submits finish, persist offsets.
        Returns "drained" or "timed_out"; draining twice is a no-op."""
        self._stop.set()
        if self._thread is None:
            return "drained"
        self._thread.join(timeout=timeout)
        if self._thread.is_alive():
            logger.error("loader %s drain timed out with %d in flight", self.pipeline.tenant, self._in_flight)
            return "timed_out"
        self._thread = None
        return "drained"

    @property
    def in_flight(self) -> int:
        return self._in_flight
