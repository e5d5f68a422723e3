import itertools
import json

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tracepipe.broker import Backpressure, Broker
from tracepipe.extractors import (
    FileSpec,
    IngestService,
    PayloadInvalid,
    PollCursor,
    PollError,
    PollRunner,
    PollSource,
    parse_daily_file,
    poll_once,
)
from tracepipe.status import StatusStore

RETAIL_SPEC = FileSpec(
    name="retail_daily",
    delimiter=";",
    header_rows=2,
    comment_prefix="#",
    columns=("batch_id", "arrived_at", "store", "quantity"),
)


@pytest.fixture
def stack(tmp_path):
    broker = Broker(tmp_path / "broker")
    status = StatusStore(tmp_path / "status")
    for t in ("farm", "factory", "retail"):
        broker.create_topic(f"{t}.raw")
    ingest = IngestService(broker, status)
    yield broker, status, ingest
    status.close()
    broker.close()


class TestPush:
    def test_accepted_push_lands_on_raw_topic_with_received_status(self, stack):
        broker, status, ingest = stack
        rid = ingest.ingest_push("factory", "entry_batch", b'{"batch_id": "B1"}')
        assert status.get(rid).state == "Received"
        msgs = broker.read("factory.raw", "t", 0, 10)
        assert len(msgs) == 1
        record = json.loads(msgs[0].payload)
        assert record["request_id"] == rid
        assert record["tenant"] == "factory"
        assert record["route"] == "entry_batch"

    def test_broken_body_rejected_with_locus(self, stack):
        _, _, ingest = stack
        with pytest.raises(PayloadInvalid) as ei:
            ingest.ingest_push("factory", "entry_batch", b'{"batch_id": ')
        assert ei.value.error.code == "malformed_json"
        assert ei.value.error.locus

    def test_non_object_body_rejected(self, stack):
        _, _, ingest = stack
        with pytest.raises(PayloadInvalid):
            ingest.ingest_push("factory", "entry_batch", b"[1,2]")

    def test_backpressure_surfaces(self, tmp_path):
        broker = Broker(tmp_path / "b", default_high_watermark=3)
        status = StatusStore(tmp_path / "s")
        broker.create_topic("factory.raw")
        ingest = IngestService(broker, status)
        for i in range(3):
            ingest.ingest_push("factory", "entry_batch", b'{"n": %d}' % i)
        with pytest.raises(Backpressure):
            ingest.ingest_push("factory", "entry_batch", b'{"n": 99}')
        status.close()
        broker.close()

    def test_record_lands_only_on_own_tenant_topic(self, stack):
        broker, _, ingest = stack
        ingest.ingest_push("factory", "exit_batch", b'{"x": 1}')
        assert broker.read("farm.raw", "t", 0, 10) == []
        assert broker.read("retail.raw", "t", 0, 10) == []
        assert len(broker.read("factory.raw", "t", 0, 10)) == 1


SAMPLE_FILE = b"""\
RETAIL DAILY EXPORT v2
batch_id;arrived_at;store;quantity
X1;2026-06-02 08:15;lisbon-1;120
X2;2026-06-02 08:40;lisbon-1;80
# mid-file operator comment
X3;2026-06-02 09:05;porto-2;50
X4;2026-06-02 09:30
X5;2026-06-02 10:00;porto-2;44
X6;2026-06-02 10:20;faro-1;31;EXTRA
X7;2026-06-02 11:00;faro-1;12
X8;2026-06-02 11:30;lisbon-1;77
X9;2026-06-02 12:00;lisbon-1;23
X10;2026-06-02 12:30;porto-2;66
"""


class TestDailyFile:
    def test_mixed_validity_file(self, stack):
        _, status, ingest = stack
        receipt = ingest.ingest_upload("retail", "daily.csv", SAMPLE_FILE, RETAIL_SPEC)
        assert len(receipt.request_ids) == 8
        assert len(receipt.rejected) == 2
        lines = [n for n, _ in receipt.rejected]
        assert lines == [7, 9]  # 1-based, counting header+comment lines
        for _, err in receipt.rejected:
            assert err.code == "column_mismatch"
            assert "line" in (err.locus or "")
        for rid in receipt.request_ids:
            assert status.get(rid).state == "Received"

    def test_headers_and_comments_skipped(self):
        records, rejected = parse_daily_file(
            b"meta\nbatch_id;arrived_at;store;quantity\n#c\nA;t;s;1\nB;t;s;2\nC;t;s;3\n",
            FileSpec("f", ";", 2, "#", ("batch_id", "arrived_at", "store", "quantity")),
            tenant="retail",
        )
        assert len(records) == 3 and rejected == []
        assert records[0].payload == b"A;t;s;1"
        assert records[0].content_type == "delimited_line"

    def test_metadata_only_file_warns(self, stack):
        _, _, ingest = stack
        receipt = ingest.ingest_upload(
            "retail", "empty.csv", b"HEADER\ncols\n# nothing today\n", RETAIL_SPEC
        )
        assert receipt.request_ids == [] and receipt.rejected == []
        assert receipt.warning

    def test_empty_file_rejected(self, stack):
        _, _, ingest = stack
        with pytest.raises(PayloadInvalid) as ei:
            ingest.ingest_upload("retail", "none.csv", b"", RETAIL_SPEC)
        assert ei.value.error.code == "empty_file"

    def test_wholly_malformed_file_zero_accepted(self, stack):
        _, _, ingest = stack
        receipt = ingest.ingest_upload("retail", "bad.bin", b"\xff\xfe\x00junk", RETAIL_SPEC)
        assert receipt.request_ids == []
        assert receipt.rejected and receipt.rejected[0][1].code == "encoding"

    def test_trailing_newline_ignored(self):
        records, rejected = parse_daily_file(
            b"batch_id;arrived_at;store;quantity\nA;t;s;1\n\n",
            FileSpec("f", ";", 1, "#", ("batch_id", "arrived_at", "store", "quantity")),
            tenant="retail",
        )
        assert len(records) == 1 and rejected == []


@settings(max_examples=80)
@given(
    st.lists(
        st.sampled_from(["data", "short", "long", "comment", "blank"]),
        max_size=30,
    ),
    st.integers(min_value=0, max_value=3),
)
def test_line_partition_is_exact(kinds, header_rows):
    """accepted + rejected + skipped == total lines, on arbitrary files."""
    spec = FileSpec("f", ";", header_rows, "#", ("a", "b"))
    lines = []
    for kind in kinds:
        if kind == "data":
            lines.append("x;y")
        elif kind == "short":
            lines.append("only-one")
        elif kind == "long":
            lines.append("x;y;z")
        elif kind == "comment":
            lines.append("# note")
        else:
            lines.append("")
    data = ("\n".join(lines) + ("\n" if lines else "")).encode()
    records, rejected = parse_daily_file(data, spec, tenant="retail")
    total = len(lines)
    skipped = sum(
        1
        for i, line in enumerate(lines, start=1)
        if i <= header_rows or not line.strip() or line.startswith("#")
    )
    assert len(records) + len(rejected) + skipped == total


class TestPolling:
    ROWS = [
        {"id": 1, "weight_g": 2500, "variety": "burlat", "harvest_date": "2026-06-01"},
        {"id": 2, "weight_g": 1800, "variety": "burlat", "harvest_date": "2026-06-01"},
        {"id": 3, "weight_g": 3100, "variety": "lapins", "harvest_date": "2026-06-02"},
    ]

    def fetcher(self, rows):
        def fetch(url, timeout):
            return rows
        return fetch

    def source(self):
        return PollSource(source_id="farm-harvest", tenant="farm", url="http://fixture/rows", marker_field="id")

    def test_three_new_rows(self):
        records, cursor = poll_once(self.source(), PollCursor("farm-harvest"), fetch=self.fetcher(self.ROWS))
        assert len(records) == 3
        assert cursor.last_seen == 3
        body = json.loads(records[0].payload)
        assert body["weight_g"] == 2500 and body["variety"] == "burlat" and body["harvest_date"]

    def test_no_new_entries_same_cursor(self):
        cursor = PollCursor("farm-harvest", last_seen=3)
        records, cursor2 = poll_once(self.source(), cursor, fetch=self.fetcher(self.ROWS))
        assert records == [] and cursor2 is cursor

    def test_idempotent_for_fixed_source_state(self):
        c0 = PollCursor("farm-harvest", last_seen=1)
        r1, _ = poll_once(self.source(), c0, fetch=self.fetcher(self.ROWS))
        r2, _ = poll_once(self.source(), c0, fetch=self.fetcher(self.ROWS))
        assert [json.loads(r.payload) for r in r1] == [json.loads(r.payload) for r in r2]

    def test_unreachable_source_raises(self):
        def boom(url, timeout):
            raise ConnectionError("nope")

        with pytest.raises(PollError):
            poll_once(self.source(), PollCursor("farm-harvest"), fetch=boom)

    def test_malformed_listing_raises(self):
        with pytest.raises(PollError):
            poll_once(self.source(), PollCursor("farm-harvest"), fetch=self.fetcher({"not": "a list"}))
        with pytest.raises(PollError):
            poll_once(self.source(), PollCursor("farm-harvest"), fetch=self.fetcher([{"no_marker": 1}]))

    def test_restart_does_not_reingest(self, tmp_path):
        broker = Broker(tmp_path / "broker")
        status = StatusStore(tmp_path / "status")
        broker.create_topic("farm.raw")
        ingest = IngestService(broker, status)
        runner = PollRunner(ingest, [self.source()], tmp_path / "cursors", fetch=self.fetcher(self.ROWS))
        first = runner.run_once(self.source())
        assert len(first) == 3
        status.close()
        broker.close()

        # simulate a process restart: everything rebuilt from disk
        broker2 = Broker(tmp_path / "broker")
        status2 = StatusStore(tmp_path / "status")
        ingest2 = IngestService(broker2, status2)
        runner2 = PollRunner(ingest2, [self.source()], tmp_path / "cursors", fetch=self.fetcher(self.ROWS))
        again = runner2.run_once(self.source())
        assert again == []
        assert len(broker2.read("farm.raw", "t", 0, 100)) == 3
        status2.close()
        broker2.close()

    def test_poll_failure_leaves_cursor(self, tmp_path):
        broker = Broker(tmp_path / "broker")
        status = StatusStore(tmp_path / "status")
        broker.create_topic("farm.raw")
        ingest = IngestService(broker, status)
        runner = PollRunner(ingest, [self.source()], tmp_path / "cursors", fetch=self.fetcher(self.ROWS))
        runner.run_once(self.source())

        def boom(url, timeout):
            raise ConnectionError("down")

        runner.fetch = boom
        out = runner.run_all_once()
        assert out["farm-harvest"] == []
        assert runner.load_cursor("farm-harvest").last_seen == 3
        status.close()
        broker.close()


class TestInvariants:
    def test_exactly_one_status_and_one_append_per_accept(self, stack):
        broker, status, ingest = stack
        ids = [ingest.ingest_push("farm", "entry_batch", b'{"i": %d}' % i) for i in range(5)]
        msgs = broker.read("farm.raw", "t", 0, 100)
        assert [json.loads(m.payload)["request_id"] for m in msgs] == ids
        for rid in ids:
            st_ = status.get(rid)
            assert st_.state == "Received"
            assert len(st_.history) == 1

    def test_no_plaintext_keys_stored_anywhere(self, tmp_path):
        # the ingest path never handles keys; the credential store is hash-only
        from tracepipe.auth import Credential, CredentialStore, hash_credential

        store = CredentialStore()
        store.add(Credential("u", hash_credential("topsecret", cost=4), "farm", 4))
        cred = store.lookup("u")
        assert "topsecret" not in cred.key_hash
