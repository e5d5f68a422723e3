"""Simulated permissioned ledger: channels, hash-chained blocks, idempotent
sequential commits, commit notifications, journey queries.

Each channel persists as an append-only file of JSON lines
(``<data_dir>/<channel>.chain``): a header line, then one line per block.
Submissions are queued to a per-channel committer thread so commits are
strictly sequential; duplicates are suppressed by the event's idempotency
key. The block hash covers the full transaction bodies, so flipping any
stored byte is caught by verify_chain.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import queue
import threading
import time
from concurrent.futures import Future
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Optional, Union

from .model import (
    CanonicalEvent,
    canonical_json_bytes,
    compute_idempotency_key,
    format_utc,
    utc_now,
    validate_event,
)

logger = logging.getLogger(__name__)

CHAIN_FORMAT = "tracepipe-chain"
CHAIN_VERSION = 1
GENESIS_PREV_HASH = "0" * 64


class LedgerError(Exception):
    pass


class UnknownChannel(LedgerError):
    pass


class ChannelExists(LedgerError):
    pass


class InvalidChannel(LedgerError):
    pass


class AccessDenied(LedgerError):
    pass


class UnknownBlock(LedgerError):
    pass


class EventRejected(LedgerError):
    def __init__(self, errors):
        super().__init__("event failed validation: " + "; ".join(e.code for e in errors))
        self.errors = errors


class LedgerClosed(LedgerError):
    pass


@dataclass(frozen=True)
class Transaction:
    tx_id: str
    idempotency_key: str
    event: dict
    committed_at: str  # UTC timestamp string; part of the hashed body

    def to_dict(self) -> dict:
        return {
            "tx_id": self.tx_id,
            "idempotency_key": self.idempotency_key,
            "event": self.event,
            "committed_at": self.committed_at,
        }


@dataclass(frozen=True)
class Block:
    number: int
    prev_hash: str
    block_hash: str
    sealed_at: str
    txs: tuple

    def to_dict(self) -> dict:
        return {
            "number": self.number,
            "prev_hash": self.prev_hash,
            "block_hash": self.block_hash,
            "sealed_at": self.sealed_at,
            "txs": [t.to_dict() for t in self.txs],
        }


@dataclass(frozen=True)
class Committed:
    tx_id: str
    block_number: int


@dataclass(frozen=True)
class Duplicate:
    existing_tx_id: str
    block_number: int


@dataclass(frozen=True)
class CommitNotice:
    channel: str
    tx_id: str
    block_number: int
    idempotency_key: str


@dataclass(frozen=True)
class JourneyEntry:
    event: dict
    tx_id: str
    block_number: int
    channel: str


def tx_digest(channel: str, idempotency_key: str, nonce: int, seq: int) -> str:
    return hashlib.sha256(
        canonical_json_bytes({"channel": channel, "key": idempotency_key, "nonce": nonce, "seq": seq})
    ).hexdigest()


def block_digest(number: int, prev_hash: str, txs: Iterable[Transaction]) -> str:
    body = {
        "number": number,
        "prev_hash": prev_hash,
        "tx_ids": [t.tx_id for t in txs],
        "txs": [t.to_dict() for t in txs],
    }
    return hashlib.sha256(canonical_json_bytes(body)).hexdigest()


class Subscription:
    """A stream of CommitNotice: replay from a block, then live, each exactly once."""

    def __init__(self):
        self._q: "queue.Queue" = queue.Queue()
        self._closed = False

    def _push(self, notice: CommitNotice) -> None:
        if not self._closed:
            self._q.put(notice)

    def get(self, timeout: Optional[float] = None) -> Optional[CommitNotice]:
        try:
            return self._q.get(timeout=timeout)
        except queue.Empty:
            return None

    def drain(self) -> list:
        out = []
        while True:
            try:
                out.append(self._q.get_nowait())
            except queue.Empty:
                return out

    def close(self) -> None:
        self._closed = True


class _Channel:
    def __init__(self, name: str, members: frozenset, shared: bool, path: Path):
        self.name = name
        self.members = members
        self.shared = shared
        self.path = path
        self.blocks: list = []
        self.idem_index: dict = {}  # idempotency_key -> (tx_id, block_number)
        self.epc_index: dict = {}  # epc -> list[(block_number, tx_seq)]
        self.lock = threading.RLock()
        self.subscribers: list = []
        self.fh = None
        self.pending: "queue.Queue" = queue.Queue()
        self.committer: Optional[threading.Thread] = None
        self.last_commit_at = 0.0

    def index_tx(self, block_number: int, seq: int, tx: Transaction) -> None:
        self.idem_index[tx.idempotency_key] = (tx.tx_id, block_number)
        ev = tx.event
        refs = set(ev.get("epc_list") or ()) | set(ev.get("inputs") or ()) | set(ev.get("outputs") or ())
        for epc in refs:
            self.epc_index.setdefault(epc, []).append((block_number, seq))


class Ledger:
    """In-process ledger with one sequential committer per channel."""

    def __init__(
        self,
        data_dir,
        commit_interval_ms: int = 1000,
        block_batch: int = 1,
        batch_linger_ms: int = 5,
    ):
        self.data_dir = Path(data_dir)
        self.data_dir.mkdir(parents=True, exist_ok=True)
        self.commit_interval = commit_interval_ms / 1000.0
        self.block_batch = max(1, block_batch)
        self.batch_linger = batch_linger_ms / 1000.0
        self._channels: dict = {}
        self._lock = threading.RLock()
        self._closed = False
        self._load()

    # -- load / persist ---------------------------------------------------------

    def _load(self) -> None:
        for path in sorted(self.data_dir.glob("*.chain")):
            with open(path, "r", encoding="utf-8") as f:
                raw = f.read()
            lines = raw.split("\n")
            complete = lines[:-1]  # drops "" after a trailing \n, or a torn partial line
            if not complete:
                logger.warning("empty chain file %s skipped", path)
                continue
            header = json.loads(complete[0])
            if header.get("format") != CHAIN_FORMAT:
                raise LedgerError(f"unrecognized chain format in {path}")
            ch = _Channel(
                name=header["channel"],
                members=frozenset(header["members"]),
                shared=bool(header["shared"]),
                path=path,
            )
            valid_chars = len(complete[0]) + 1
            for line in complete[1:]:
                try:
                    d = json.loads(line)
                except json.JSONDecodeError:
                    logger.warning("truncating %s at torn block line", path)
                    break
                txs = tuple(
                    Transaction(
                        tx_id=t["tx_id"],
                        idempotency_key=t["idempotency_key"],
                        event=t["event"],
                        committed_at=t["committed_at"],
                    )
                    for t in d["txs"]
                )
                block = Block(
                    number=d["number"],
                    prev_hash=d["prev_hash"],
                    block_hash=d["block_hash"],
                    sealed_at=d["sealed_at"],
                    txs=txs,
                )
                ch.blocks.append(block)
                for seq, tx in enumerate(txs):
                    ch.index_tx(block.number, seq, tx)
                valid_chars += len(line) + 1
            if valid_chars < len(raw):
                with open(path, "r+", encoding="utf-8") as f:
                    f.truncate(valid_chars)
            ch.fh = open(path, "a", encoding="utf-8")
            self._channels[ch.name] = ch
            self._start_committer(ch)

    def _append_line(self, ch: _Channel, obj: dict) -> None:
        ch.fh.write(json.dumps(obj, separators=(",", ":")) + "\n")
        ch.fh.flush()
        os.fsync(ch.fh.fileno())

    # -- channel management -------------------------------------------------------

    def create_channel(self, name: str, members, shared: bool):
        if not name or "/" in name or name.startswith("."):
            raise InvalidChannel(f"invalid channel name {name!r}")
        members = frozenset(members)
        if not shared and len(members) != 1:
            raise InvalidChannel(
                f"private channel {name!r} must have exactly one member, got {len(members)}"
            )
        if shared and not members:
            raise InvalidChannel(f"shared channel {name!r} needs at least one member")
        with self._lock:
            if name in self._channels:
                raise ChannelExists(name)
            path = self.data_dir / f"{name}.chain"
            ch = _Channel(name, members, shared, path)
            ch.fh = open(path, "a", encoding="utf-8")
            self._append_line(
                ch,
                {
                    "format": CHAIN_FORMAT,
                    "version": CHAIN_VERSION,
                    "channel": name,
                    "members": sorted(members),
                    "shared": shared,
                },
            )
            genesis = Block(
                number=0,
                prev_hash=GENESIS_PREV_HASH,
                block_hash=block_digest(0, GENESIS_PREV_HASH, ()),
                sealed_at=format_utc(utc_now()),
                txs=(),
            )
            self._append_line(ch, genesis.to_dict())
            ch.blocks.append(genesis)
            self._channels[name] = ch
            self._start_committer(ch)
            return ch

    def ensure_channel(self, name: str, members, shared: bool):
        with self._lock:
            if name in self._channels:
                return self._channels[name]
            return self.create_channel(name, members, shared)

    def channels(self) -> list:
        with self._lock:
            return sorted(self._channels)

    def channel_info(self, name: str) -> dict:
        ch = self._channel(name)
        return {"name": ch.name, "members": sorted(ch.members), "shared": ch.shared}

    def _channel(self, name: str) -> _Channel:
        try:
            return self._channels[name]
        except KeyError:
            raise UnknownChannel(name) from None

    def is_member(self, name: str, caller: Optional[str]) -> bool:
        return caller is not None and caller in self._channel(name).members

    def can_read(self, name: str, caller: Optional[str]) -> bool:
        ch = self._channel(name)
        return ch.shared or (caller is not None and caller in ch.members)

    # -- commit path ---------------------------------------------------------------

    def _start_committer(self, ch: _Channel) -> None:
        t = threading.Thread(target=self._commit_loop, args=(ch,), daemon=True, name=f"committer-{ch.name}")
        ch.committer = t
        t.start()

    def _commit_loop(self, ch: _Channel) -> None:
        while True:
            item = ch.pending.get()
            if item is None:
                return
            batch = [item]
            deadline = time.monotonic() + self.batch_linger
            while len(batch) < self.block_batch:
                remaining = deadline - time.monotonic()
                if remaining <= 0:
                    break
                try:
                    nxt = ch.pending.get(timeout=remaining)
                except queue.Empty:
                    break
                if nxt is None:
                    self._seal(ch, batch)
                    return
                batch.append(nxt)
            self._seal(ch, batch)

    def _seal(self, ch: _Channel, batch: list) -> None:
        try:
            if self.commit_interval > 0:
                since = time.monotonic() - ch.last_commit_at
                if since < self.commit_interval:
                    time.sleep(self.commit_interval - since)
            with ch.lock:
                txs = []
                results: list = []
                number = len(ch.blocks)
                seen_in_batch: dict = {}
                for key, event_dict, fut in batch:
                    if key in ch.idem_index:
                        tx_id, blk = ch.idem_index[key]
                        results.append((fut, Duplicate(tx_id, blk)))
                        continue
                    if key in seen_in_batch:
                        results.append((fut, Duplicate(seen_in_batch[key], number)))
                        continue
                    seq = len(txs)
                    tx = Transaction(
                        tx_id=tx_digest(ch.name, key, number, seq),
                        idempotency_key=key,
                        event=event_dict,
                        committed_at=format_utc(utc_now()),
                    )
                    txs.append(tx)
                    seen_in_batch[key] = tx.tx_id
                    results.append((fut, Committed(tx.tx_id, number)))
                if txs:
                    prev = ch.blocks[-1].block_hash
                    block = Block(
                        number=number,
                        prev_hash=prev,
                        block_hash=block_digest(number, prev, txs),
                        sealed_at=format_utc(utc_now()),
                        txs=tuple(txs),
                    )
                    self._append_line(ch, block.to_dict())
                    ch.blocks.append(block)
                    for seq, tx in enumerate(txs):
                        ch.index_tx(number, seq, tx)
                    ch.last_commit_at = time.monotonic()
                    notices = [
                        CommitNotice(ch.name, tx.tx_id, number, tx.idempotency_key) for tx in txs
                    ]
                    for sub in list(ch.subscribers):
                        for n in notices:
                            sub._push(n)
                for fut, res in results:
                    fut.set_result(res)
        except Exception as exc:  # pragma: no cover - surfaced via futures
            for _, _, fut in batch:
                if not fut.done():
                    fut.set_exception(exc)

    def submit(self, channel: str, caller: str, event: Union[CanonicalEvent, dict]):
        """Commit an event to a channel; returns Committed or Duplicate."""
        if self._closed:
            raise LedgerClosed("ledger is closed")
        ch = self._channel(channel)
        if caller not in ch.members:
            raise AccessDenied(f"{caller!r} is not a member of channel {channel!r}")
        if isinstance(event, CanonicalEvent):
            ev_obj = event
        else:
            ev_obj = CanonicalEvent.from_dict(event)
        errors = validate_event(ev_obj)
        if errors:
            raise EventRejected(errors)
        event_dict = ev_obj.to_dict()
        key = ev_obj.idempotency_key()
        fut: Future = Future()
        ch.pending.put((key, event_dict, fut))
        return fut.result()

    # -- queries ---------------------------------------------------------------------

    def get_block(self, channel: str, number: int, caller: Optional[str] = None) -> Block:
        ch = self._channel(channel)
        if not self.can_read(channel, caller):
            raise AccessDenied(f"caller {caller!r} cannot read channel {channel!r}")
        with ch.lock:
            if number < 0 or number >= len(ch.blocks):
                raise UnknownBlock(f"{channel} has no block {number}")
            return ch.blocks[number]

    def block_height(self, channel: str) -> int:
        ch = self._channel(channel)
        with ch.lock:
            return len(ch.blocks)

    def find_tx(self, channel: str, tx_id: str) -> Optional[tuple]:
        """Return (block_number, Transaction) or None."""
        ch = self._channel(channel)
        with ch.lock:
            for block in ch.blocks:
                for tx in block.txs:
                    if tx.tx_id == tx_id:
                        return block.number, tx
        return None

    def verify_chain(self, channel: str) -> Optional[int]:
        """Recompute every hash link from genesis; None when intact, else the
        number of the first bad block."""
        ch = self._channel(channel)
        with ch.lock:
            blocks = list(ch.blocks)
        prev_hash = GENESIS_PREV_HASH
        for i, block in enumerate(blocks):
            if block.number != i:
                return i
            if block.prev_hash != prev_hash:
                return i
            for seq, tx in enumerate(block.txs):
                try:
                    content = dict(tx.event)
                    content.pop("record_time", None)
                    expected_key = compute_idempotency_key(canonical_json_bytes(content))
                except Exception:
                    return i
                if tx.idempotency_key != expected_key:
                    return i
                if tx.tx_id != tx_digest(ch.name, tx.idempotency_key, block.number, seq):
                    return i
            if block.block_hash != block_digest(block.number, block.prev_hash, block.txs):
                return i
            prev_hash = block.block_hash
        return None

    def committed_keys(self, channel: str) -> list:
        """All idempotency keys in commit order (duplicate-scan helper)."""
        ch = self._channel(channel)
        with ch.lock:
            return [tx.idempotency_key for b in ch.blocks for tx in b.txs]

    def visible_channels(self, caller: Optional[str]) -> list:
        with self._lock:
            return [name for name in sorted(self._channels) if self.can_read(name, caller)]

    def query_journey(self, epc: str, caller: Optional[str] = None) -> list:
        """Committed events referencing the EPC or its transformation-linked
        predecessors, across channels visible to the caller, ordered by
        event time."""
        snapshots = []
        for name in self.visible_channels(caller):
            ch = self._channels[name]
            with ch.lock:
                snapshots.append((name, list(ch.blocks)))

        def refs(ev: dict) -> set:
            return (
                set(ev.get("epc_list") or ())
                | set(ev.get("inputs") or ())
                | set(ev.get("outputs") or ())
            )

        # upstream closure across transformation events
        epc_set = {epc}
        changed = True
        while changed:
            changed = False
            for _, blocks in snapshots:
                for block in blocks:
                    for tx in block.txs:
                        ev = tx.event
                        if ev.get("event_type") != "TransformationEvent":
                            continue
                        outs = set(ev.get("outputs") or ())
                        ins = set(ev.get("inputs") or ())
                        if outs & epc_set and not ins <= epc_set:
                            epc_set |= ins
                            changed = True

        entries = []
        for name, blocks in snapshots:
            for block in blocks:
                for seq, tx in enumerate(block.txs):
                    if refs(tx.event) & epc_set:
                        entries.append(
                            (
                                (tx.event.get("event_time"), tx.event.get("record_time"), block.number, seq, name),
                                JourneyEntry(tx.event, tx.tx_id, block.number, name),
                            )
                        )
        entries.sort(key=lambda pair: pair[0])
        return [entry for _, entry in entries]

    def subscribe_commits(self, channel: str, from_block: int = 0, caller: Optional[str] = None) -> Subscription:
        ch = self._channel(channel)
        if not self.can_read(channel, caller):
            raise AccessDenied(f"caller {caller!r} cannot read channel {channel!r}")
        sub = Subscription()
        with ch.lock:
            for block in ch.blocks[from_block:]:
                for tx in block.txs:
                    sub._push(CommitNotice(ch.name, tx.tx_id, block.number, tx.idempotency_key))
            ch.subscribers.append(sub)
        return sub

    def unsubscribe(self, channel: str, sub: Subscription) -> None:
        ch = self._channel(channel)
        with ch.lock:
            if sub in ch.subscribers:
                ch.subscribers.remove(sub)
        sub.close()

    # -- lifecycle ---------------------------------------------------------------------

    def close(self) -> None:
        with self._lock:
            if self._closed:
                return
            self._closed = True
            chans = list(self._channels.values())
        for ch in chans:
            ch.pending.put(None)
        for ch in chans:
            if ch.committer is not None:
                ch.committer.join(timeout=10.0)
            with ch.lock:
                if ch.fh is not None:
                    ch.fh.close()
                    ch.fh = None
