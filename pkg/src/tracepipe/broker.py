"""Embedded durable message log: per-tenant topics, consumer groups,
size-based retention, back-pressure.

On-disk layout under <data_dir>:

    <topic>/<base_offset:020d>.log     append-only segment (magic header + frames)
    <topic>/<base_offset:020d>.idx     frame byte positions (magic header + u64s)
    __groups__/<group>.json            committed offsets per topic, replaced atomically

A frame is ``u32 body_len | u32 crc32(body) | body`` where body packs the
offset, append timestamp, key and payload. Recovery scans the newest segment
and truncates at the first torn or corrupt frame, so an acknowledged append
(flushed per the flush policy) is always readable after a crash.
"""

from __future__ import annotations

import json
import logging
import os
import re
import struct
import threading
import time
import zlib
from bisect import bisect_right
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Optional

from .model import is_valid_tenant_id

logger = logging.getLogger(__name__)

LOG_MAGIC = b"TPLOG\x00\x00\x01"
IDX_MAGIC = b"TPIDX\x00\x00\x01"
_FRAME_HEADER = struct.Struct(">II")  # body_len, crc32
_BODY_HEADER = struct.Struct(">QQH")  # offset, appended_at_ms, key_len

DEFAULT_RETENTION_BYTES = 512 * 1024 * 1024
DEFAULT_SEGMENT_BYTES = 16 * 1024 * 1024
DEFAULT_HIGH_WATERMARK = 100_000

TOPIC_STAGES = ("raw", "epcis", "dlq")
_GROUP_RE = re.compile(r"^[a-zA-Z0-9._:-]{1,128}$")


class BrokerError(Exception):
    pass


class UnknownTopic(BrokerError):
    pass


class TopicExists(BrokerError):
    pass


class InvalidTopicName(BrokerError):
    pass


class OffsetOutOfRange(BrokerError):
    def __init__(self, topic: str, requested: int, floor: int):
        super().__init__(f"offset {requested} below retention floor {floor} for {topic}")
        self.floor = floor


class OffsetRegression(BrokerError):
    pass


class Backpressure(BrokerError):
    def __init__(self, topic: str, unconsumed: int, watermark: int):
        super().__init__(f"topic {topic} at high watermark: {unconsumed} unconsumed >= {watermark}")
        self.topic = topic
        self.unconsumed = unconsumed
        self.watermark = watermark


@dataclass(frozen=True)
class Message:
    offset: int
    key: str
    payload: bytes
    appended_at: datetime


@dataclass(frozen=True)
class TopicStats:
    name: str
    size_bytes: int
    earliest_offset: int
    latest_offset: int  # -1 when empty
    message_count: int
    lag: dict


def frame_overhead(key: str) -> int:
    """On-disk bytes per record beyond the payload itself."""
    return _FRAME_HEADER.size + _BODY_HEADER.size + len(key.encode("utf-8"))


def validate_topic_name(name: str) -> None:
    parts = name.split(".")
    if len(parts) != 2 or not is_valid_tenant_id(parts[0]) or parts[1] not in TOPIC_STAGES:
        raise InvalidTopicName(
            f"topic name must be <tenant>.<stage> with stage in {TOPIC_STAGES}; got {name!r}"
        )


def topic_tenant(name: str) -> str:
    return name.split(".", 1)[0]


def _encode_frame(offset: int, key: str, payload: bytes, ts_ms: int) -> bytes:
    key_b = key.encode("utf-8")
    body = _BODY_HEADER.pack(offset, ts_ms, len(key_b)) + key_b + payload
    return _FRAME_HEADER.pack(len(body), zlib.crc32(body)) + body


def _decode_body(body: bytes) -> Message:
    offset, ts_ms, key_len = _BODY_HEADER.unpack_from(body, 0)
    start = _BODY_HEADER.size
    key = body[start : start + key_len].decode("utf-8")
    payload = body[start + key_len :]
    return Message(
        offset=offset,
        key=key,
        payload=payload,
        appended_at=datetime.fromtimestamp(ts_ms / 1000.0, tz=timezone.utc),
    )


class _Segment:
    """One sealed or active segment: a .log file plus its byte-position index."""

    def __init__(self, directory: Path, base_offset: int):
        self.base_offset = base_offset
        self.log_path = directory / f"{base_offset:020d}.log"
        self.idx_path = directory / f"{base_offset:020d}.idx"
        self.positions: list = []  # byte position of each frame, in offset order
        self.size = 0

    def record_count(self) -> int:
        return len(self.positions)

    def next_offset(self) -> int:
        return self.base_offset + len(self.positions)

    def scan_and_repair(self) -> None:
        """Rebuild positions from the log, truncating any torn tail frame."""
        self.positions = []
        with open(self.log_path, "rb") as f:
            magic = f.read(len(LOG_MAGIC))
            if magic != LOG_MAGIC:
                raise BrokerError(f"bad segment magic in {self.log_path}")
            pos = len(LOG_MAGIC)
            data = f.read()
        valid_end = pos
        rel = 0
        i = 0
        while True:
            if i + _FRAME_HEADER.size > len(data):
                break
            body_len, crc = _FRAME_HEADER.unpack_from(data, i)
            start = i + _FRAME_HEADER.size
            end = start + body_len
            if end > len(data):
                break
            body = data[i + _FRAME_HEADER.size : end]
            if zlib.crc32(body) != crc:
                break
            self.positions.append(pos + i)
            rel += 1
            i = end
            valid_end = pos + i
        actual = pos + len(data)
        if valid_end != actual:
            logger.warning(
                "truncating torn tail of %s: %d -> %d bytes", self.log_path, actual, valid_end
            )
            with open(self.log_path, "r+b") as f:
                f.truncate(valid_end)
        self.size = valid_end
        self._rewrite_index()

    def load_index(self) -> bool:
        """Load .idx if it is consistent with the log size; else return False."""
        try:
            raw = self.idx_path.read_bytes()
        except FileNotFoundError:
            return False
        if not raw.startswith(IDX_MAGIC):
            return False
        body = raw[len(IDX_MAGIC) :]
        if len(body) % 8:
            return False
        positions = list(struct.unpack(f">{len(body) // 8}Q", body)) if body else []
        try:
            log_size = self.log_path.stat().st_size
        except FileNotFoundError:
            return False
        if positions and (positions[-1] >= log_size or positions[0] != len(LOG_MAGIC)):
            return False
        self.positions = positions
        self.size = log_size
        return True

    def _rewrite_index(self) -> None:
        tmp = self.idx_path.with_suffix(".idx.tmp")
        with open(tmp, "wb") as f:
            f.write(IDX_MAGIC)
            if self.positions:
                f.write(struct.pack(f">{len(self.positions)}Q", *self.positions))
            f.flush()
            os.fsync(f.fileno())
        os.replace(tmp, self.idx_path)


class _FlushPolicy:
    """always: fsync before ack. interval: background fsync every N ms.
    never: leave flushing to the OS."""

    def __init__(self, mode: str = "always", interval_ms: int = 50):
        if mode not in ("always", "interval", "never"):
            raise ValueError(f"unknown flush mode {mode!r}")
        self.mode = mode
        self.interval_ms = interval_ms


class _TopicLog:
    def __init__(
        self,
        name: str,
        directory: Path,
        retention_bytes: int,
        high_watermark: int,
        segment_bytes: int,
        flush: _FlushPolicy,
    ):
        self.name = name
        self.dir = directory
        self.retention_bytes = retention_bytes
        self.high_watermark = high_watermark
        self.segment_bytes = segment_bytes
        self.flush_policy = flush
        self.lock = threading.RLock()
        self.segments: list = []
        self.active_fh = None
        self.dirty = False
        self._open()

    # -- lifecycle -----------------------------------------------------------

    def _open(self) -> None:
        self.dir.mkdir(parents=True, exist_ok=True)
        bases = sorted(
            int(p.stem) for p in self.dir.glob("*.log") if p.stem.isdigit()
        )
        if not bases:
            self._start_segment(0)
            return
        for i, base in enumerate(bases):
            seg = _Segment(self.dir, base)
            newest = i == len(bases) - 1
            if newest or not seg.load_index():
                seg.scan_and_repair()
            self.segments.append(seg)
        self.active_fh = open(self.segments[-1].log_path, "ab")

    def _start_segment(self, base_offset: int) -> None:
        seg = _Segment(self.dir, base_offset)
        with open(seg.log_path, "wb") as f:
            f.write(LOG_MAGIC)
            f.flush()
            os.fsync(f.fileno())
        seg.size = len(LOG_MAGIC)
        seg._rewrite_index()
        self.segments.append(seg)
        if self.active_fh is not None:
            self.active_fh.close()
        self.active_fh = open(seg.log_path, "ab")

    def close(self) -> None:
        with self.lock:
            self.flush()
            if self.active_fh is not None:
                self.active_fh.close()
                self.active_fh = None

    # -- accessors -----------------------------------------------------------

    @property
    def earliest_offset(self) -> int:
        return self.segments[0].base_offset

    @property
    def next_offset(self) -> int:
        return self.segments[-1].next_offset()

    def size_bytes(self) -> int:
        return sum(s.size for s in self.segments)

    # -- append path ---------------------------------------------------------

    def append(self, key: str, payload: bytes) -> int:
        with self.lock:
            active = self.segments[-1]
            offset = active.next_offset()
            frame = _encode_frame(offset, key, payload, int(time.time() * 1000))
            pos = active.size
            self.active_fh.write(frame)
            if self.flush_policy.mode == "always":
                self.active_fh.flush()
                os.fsync(self.active_fh.fileno())
            else:
                self.dirty = True
            active.positions.append(pos)
            active.size += len(frame)
            if active.size >= self.segment_bytes:
                self._roll()
            return offset

    def _roll(self) -> None:
        active = self.segments[-1]
        self.active_fh.flush()
        os.fsync(self.active_fh.fileno())
        active._rewrite_index()
        self._start_segment(active.next_offset())
        self._enforce_retention()

    def _enforce_retention(self) -> None:
        while len(self.segments) > 1 and self.size_bytes() > self.retention_bytes:
            victim = self.segments.pop(0)
            victim.log_path.unlink(missing_ok=True)
            victim.idx_path.unlink(missing_ok=True)
            logger.info("retention: deleted segment %s of %s", victim.base_offset, self.name)

    def flush(self) -> None:
        with self.lock:
            if self.active_fh is not None and self.dirty:
                self.active_fh.flush()
                os.fsync(self.active_fh.fileno())
                self.dirty = False
            elif self.active_fh is not None:
                self.active_fh.flush()

    # -- read path ------------------------------------------------------------

    def read(self, from_offset: int, max_n: int) -> list:
        # plan byte ranges under the lock, then hit the disk without it so
        # readers never stall the append path
        plan: list = []
        with self.lock:
            if from_offset < self.earliest_offset:
                raise OffsetOutOfRange(self.name, from_offset, self.earliest_offset)
            if from_offset >= self.next_offset or max_n <= 0:
                return []
            if self.dirty:
                self.flush()
            bases = [s.base_offset for s in self.segments]
            si = bisect_right(bases, from_offset) - 1
            offset = from_offset
            remaining = max_n
            while remaining > 0 and si < len(self.segments):
                seg = self.segments[si]
                rel = offset - seg.base_offset
                count = seg.record_count()
                if rel >= count:
                    si += 1
                    continue
                take = min(remaining, count - rel)
                start = seg.positions[rel]
                end = seg.positions[rel + take] if rel + take < count else seg.size
                plan.append((seg.log_path, start, end))
                remaining -= take
                offset += take
                si += 1
        out: list = []
        for path, start, end in plan:
            try:
                with open(path, "rb") as fh:
                    fh.seek(start)
                    buf = fh.read(end - start)
            except FileNotFoundError:
                # segment trimmed by retention between planning and reading
                raise OffsetOutOfRange(self.name, from_offset, self.earliest_offset) from None
            pos = 0
            while pos + _FRAME_HEADER.size <= len(buf):
                body_len, _crc = _FRAME_HEADER.unpack_from(buf, pos)
                body_start = pos + _FRAME_HEADER.size
                out.append(_decode_body(buf[body_start : body_start + body_len]))
                pos = body_start + body_len
        return out


class Broker:
    """Durable ordered per-tenant message log with consumer groups."""

    def __init__(
        self,
        data_dir,
        default_retention_bytes: int = DEFAULT_RETENTION_BYTES,
        default_high_watermark: int = DEFAULT_HIGH_WATERMARK,
        segment_bytes: int = DEFAULT_SEGMENT_BYTES,
        flush_mode: str = "always",
        flush_interval_ms: int = 50,
    ):
        self.data_dir = Path(data_dir)
        self.data_dir.mkdir(parents=True, exist_ok=True)
        self.default_retention_bytes = default_retention_bytes
        self.default_high_watermark = default_high_watermark
        self.segment_bytes = segment_bytes
        self.flush_policy = _FlushPolicy(flush_mode, flush_interval_ms)
        self._topics: dict = {}
        self._groups: dict = {}  # group -> {topic: offset}
        self._topic_groups: dict = {}  # topic -> set of group ids
        self._lock = threading.RLock()
        self._groups_dir = self.data_dir / "__groups__"
        self._groups_dir.mkdir(exist_ok=True)
        self._closed = False
        self._load()
        self._flusher: Optional[threading.Thread] = None
        if self.flush_policy.mode == "interval":
            self._flusher = threading.Thread(target=self._flush_loop, daemon=True, name="broker-flusher")
            self._flusher.start()

    def _load(self) -> None:
        for entry in sorted(self.data_dir.iterdir()):
            if entry.is_dir() and entry.name != "__groups__":
                meta_path = entry / "topic.json"
                if not meta_path.exists():
                    continue
                meta = json.loads(meta_path.read_text())
                self._topics[meta["name"]] = _TopicLog(
                    meta["name"],
                    entry,
                    meta["retention_bytes"],
                    meta["high_watermark"],
                    meta.get("segment_bytes", self.segment_bytes),
                    self.flush_policy,
                )
                self._topic_groups.setdefault(meta["name"], set())
        for gf in self._groups_dir.glob("*.json"):
            group = gf.stem
            try:
                committed = json.loads(gf.read_text())
            except json.JSONDecodeError:
                logger.warning("skipping unreadable offsets file %s", gf)
                continue
            self._groups[group] = {t: int(o) for t, o in committed.items()}
            for t in committed:
                self._topic_groups.setdefault(t, set()).add(group)

    def _flush_loop(self) -> None:
        interval = self.flush_policy.interval_ms / 1000.0
        while not self._closed:
            time.sleep(interval)
            for topic in list(self._topics.values()):
                try:
                    topic.flush()
                except Exception:  # pragma: no cover - flush failures only logged
                    logger.exception("background flush failed for %s", topic.name)

    # -- topic management ------------------------------------------------------

    def create_topic(
        self,
        name: str,
        retention_bytes: Optional[int] = None,
        high_watermark: Optional[int] = None,
        segment_bytes: Optional[int] = None,
    ):
        validate_topic_name(name)
        with self._lock:
            if name in self._topics:
                raise TopicExists(name)
            directory = self.data_dir / name
            topic = _TopicLog(
                name,
                directory,
                retention_bytes or self.default_retention_bytes,
                high_watermark or self.default_high_watermark,
                segment_bytes or self.segment_bytes,
                self.flush_policy,
            )
            meta = {
                "name": name,
                "retention_bytes": topic.retention_bytes,
                "high_watermark": topic.high_watermark,
                "segment_bytes": topic.segment_bytes,
            }
            (directory / "topic.json").write_text(json.dumps(meta))
            self._topics[name] = topic
            self._topic_groups.setdefault(name, set())
            return topic

    def ensure_topic(self, name: str, **kwargs):
        with self._lock:
            if name in self._topics:
                return self._topics[name]
            return self.create_topic(name, **kwargs)

    def topics(self) -> list:
        with self._lock:
            return sorted(self._topics)

    def has_topic(self, name: str) -> bool:
        return name in self._topics

    def _topic(self, name: str) -> _TopicLog:
        try:
            return self._topics[name]
        except KeyError:
            raise UnknownTopic(name) from None

    # -- produce / consume ------------------------------------------------------

    def unconsumed(self, name: str) -> int:
        topic = self._topic(name)
        groups = self._topic_groups.get(name) or ()
        next_offset = topic.next_offset
        if not groups:
            return next_offset - topic.earliest_offset
        slowest = min(self._groups.get(g, {}).get(name, -1) for g in groups)
        return next_offset - (slowest + 1)

    def append(self, name: str, key: str, payload: bytes) -> int:
        topic = self._topic(name)
        unconsumed = self.unconsumed(name)
        if unconsumed >= topic.high_watermark:
            raise Backpressure(name, unconsumed, topic.high_watermark)
        return topic.append(key, payload)

    def read(self, name: str, group: str, from_offset: int, max_n: int) -> list:
        if not _GROUP_RE.match(group):
            raise BrokerError(f"invalid group id {group!r}")
        topic = self._topic(name)
        with self._lock:
            self._topic_groups.setdefault(name, set()).add(group)
            self._groups.setdefault(group, {})
        return topic.read(from_offset, max_n)

    def committed(self, name: str, group: str) -> int:
        """Last committed offset for the group on this topic; -1 when none."""
        self._topic(name)
        return self._groups.get(group, {}).get(name, -1)

    def commit_offset(self, name: str, group: str, offset: int) -> None:
        topic = self._topic(name)
        with self._lock:
            if offset >= topic.next_offset:
                raise BrokerError(
                    f"cannot commit offset {offset} past head {topic.next_offset - 1} of {name}"
                )
            current = self._groups.get(group, {}).get(name, -1)
            if offset < current:
                raise OffsetRegression(
                    f"group {group} already committed {current} on {name}; refusing {offset}"
                )
            self._groups.setdefault(group, {})[name] = offset
            self._topic_groups.setdefault(name, set()).add(group)
            self._persist_group(group)

    def _persist_group(self, group: str) -> None:
        path = self._groups_dir / f"{group}.json"
        tmp = path.with_suffix(".json.tmp")
        with open(tmp, "w") as f:
            json.dump(self._groups[group], f)
            f.flush()
            os.fsync(f.fileno())
        os.replace(tmp, path)

    # -- introspection ------------------------------------------------------------

    def stats(self, name: str) -> TopicStats:
        topic = self._topic(name)
        with topic.lock, self._lock:
            next_offset = topic.next_offset
            lag = {}
            for g in sorted(self._topic_groups.get(name) or ()):
                committed = self._groups.get(g, {}).get(name, -1)
                lag[g] = next_offset - (committed + 1)
            return TopicStats(
                name=name,
                size_bytes=topic.size_bytes(),
                earliest_offset=topic.earliest_offset,
                latest_offset=next_offset - 1,
                message_count=sum(s.record_count() for s in topic.segments),
                lag=lag,
            )

    def flush(self) -> None:
        for topic in list(self._topics.values()):
            topic.flush()

    def flush_topic(self, name: str) -> None:
        self._topic(name).flush()

    def close(self) -> None:
        self._closed = True
        if self._flusher is not None:
            self._flusher.join(timeout=2.0)
        for topic in list(self._topics.values()):
            topic.close()
