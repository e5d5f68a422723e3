import json
import os
import signal
import subprocess
import sys
import textwrap
import time

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tracepipe.broker import (
    Backpressure,
    Broker,
    InvalidTopicName,
    OffsetOutOfRange,
    OffsetRegression,
    TopicExists,
    frame_overhead,
)


@pytest.fixture
def broker(tmp_path):
    b = Broker(tmp_path / "broker")
    yield b
    b.close()


class TestTopics:
    def test_create_with_defaults(self, broker):
        broker.create_topic("farm.raw")
        st_ = broker.stats("farm.raw")
        assert st_.size_bytes >= 0
        assert st_.earliest_offset == 0
        assert st_.latest_offset == -1

    def test_default_retention_512mib(self, tmp_path):
        b = Broker(tmp_path / "b")
        t = b.create_topic("farm.raw")
        assert t.retention_bytes == 512 * 1024 * 1024
        b.close()

    def test_duplicate_name(self, broker):
        broker.create_topic("farm.raw")
        with pytest.raises(TopicExists):
            broker.create_topic("farm.raw")

    @pytest.mark.parametrize("bad", ["raw", "farm.other", "Farm.raw", "farm.raw.x", "a_b.raw"])
    def test_invalid_names(self, broker, bad):
        with pytest.raises(InvalidTopicName):
            broker.create_topic(bad)


class TestAppendRead:
    def test_offsets_monotonic_from_zero(self, broker):
        broker.create_topic("farm.raw")
        offs = [broker.append("farm.raw", f"k{i}", b"payload") for i in range(3)]
        assert offs == [0, 1, 2]

    def test_read_window(self, broker):
        broker.create_topic("farm.raw")
        for i in range(3):
            broker.append("farm.raw", f"k{i}", f"p{i}".encode())
        msgs = broker.read("farm.raw", "g1", 0, 2)
        assert [m.offset for m in msgs] == [0, 1]
        assert msgs[0].payload == b"p0" and msgs[0].key == "k0"

    def test_read_past_head_empty(self, broker):
        broker.create_topic("farm.raw")
        broker.append("farm.raw", "k", b"p")
        assert broker.read("farm.raw", "g1", 5, 10) == []

    def test_read_across_segments(self, tmp_path):
        b = Broker(tmp_path / "b", segment_bytes=256)
        b.create_topic("farm.raw")
        n = 50
        for i in range(n):
            b.append("farm.raw", f"k{i}", b"x" * 40)
        msgs = b.read("farm.raw", "g", 0, n)
        assert [m.offset for m in msgs] == list(range(n))
        b.close()

    def test_ordering_strictly_increasing_equals_append_order(self, broker):
        broker.create_topic("factory.raw")
        payloads = [f"m{i}".encode() for i in range(200)]
        for i, p in enumerate(payloads):
            broker.append("factory.raw", str(i), p)
        msgs = broker.read("factory.raw", "g", 0, 1000)
        assert [m.offset for m in msgs] == sorted(m.offset for m in msgs)
        assert [m.payload for m in msgs] == payloads


class TestBackpressure:
    def test_append_at_watermark(self, tmp_path):
        b = Broker(tmp_path / "b", default_high_watermark=10)
        b.create_topic("farm.raw")
        for i in range(10):
            b.append("farm.raw", str(i), b"p")
        with pytest.raises(Backpressure) as ei:
            b.append("farm.raw", "x", b"p")
        assert ei.value.unconsumed == 10
        b.close()

    def test_consuming_relieves_pressure(self, tmp_path):
        b = Broker(tmp_path / "b", default_high_watermark=10)
        b.create_topic("farm.raw")
        for i in range(10):
            b.append("farm.raw", str(i), b"p")
        b.read("farm.raw", "g", 0, 10)
        b.commit_offset("farm.raw", "g", 7)
        b.append("farm.raw", "x", b"p")  # unconsumed now 3+1
        assert b.stats("farm.raw").latest_offset == 10
        b.close()


class TestOffsets:
    def test_commit_and_resume_after_restart(self, tmp_path):
        b = Broker(tmp_path / "b")
        b.create_topic("farm.raw")
        for i in range(10):
            b.append("farm.raw", str(i), b"p")
        b.read("farm.raw", "g", 0, 6)
        b.commit_offset("farm.raw", "g", 5)
        b.close()

        b2 = Broker(tmp_path / "b")
        assert b2.committed("farm.raw", "g") == 5
        msgs = b2.read("farm.raw", "g", 6, 100)
        assert [m.offset for m in msgs] == [6, 7, 8, 9]
        b2.close()

    def test_regression_rejected(self, broker):
        broker.create_topic("farm.raw")
        for i in range(6):
            broker.append("farm.raw", str(i), b"p")
        broker.commit_offset("farm.raw", "g", 5)
        with pytest.raises(OffsetRegression):
            broker.commit_offset("farm.raw", "g", 3)

    def test_fresh_group_any_valid_offset(self, broker):
        broker.create_topic("farm.raw")
        for i in range(4):
            broker.append("farm.raw", str(i), b"p")
        broker.commit_offset("farm.raw", "newgroup", 2)
        assert broker.committed("farm.raw", "newgroup") == 2

    def test_commit_past_head_rejected(self, broker):
        broker.create_topic("farm.raw")
        broker.append("farm.raw", "k", b"p")
        with pytest.raises(Exception):
            broker.commit_offset("farm.raw", "g", 5)


class TestRetention:
    def test_earliest_advances_and_floor_read_fails(self, tmp_path):
        b = Broker(tmp_path / "b", segment_bytes=1024)
        b.create_topic("farm.raw", retention_bytes=4096)
        payload = b"x" * 100
        for i in range(200):
            b.append("farm.raw", f"{i:04d}", payload)
        stats = b.stats("farm.raw")
        assert stats.earliest_offset > 0
        assert stats.size_bytes <= 4096 + 1024
        with pytest.raises(OffsetOutOfRange) as ei:
            b.read("farm.raw", "g", 0, 1)
        assert ei.value.floor == stats.earliest_offset
        msgs = b.read("farm.raw", "g", stats.earliest_offset, 5)
        assert msgs[0].offset == stats.earliest_offset
        b.close()

    def test_size_bound_holds_throughout(self, tmp_path):
        b = Broker(tmp_path / "b", segment_bytes=2048)
        b.create_topic("farm.raw", retention_bytes=8192)
        payload = b"y" * 64
        for i in range(500):
            b.append("farm.raw", f"{i:05d}", payload)
            assert b.stats("farm.raw").size_bytes <= 8192 + 2048
        b.close()


class TestStats:
    def test_fresh_topic(self, broker):
        broker.create_topic("farm.raw")
        s = broker.stats("farm.raw")
        assert s.latest_offset == -1 and s.lag == {}

    def test_lag_counts_unconsumed(self, broker):
        broker.create_topic("farm.raw")
        for i in range(7):
            broker.append("farm.raw", str(i), b"p")
        broker.read("farm.raw", "g", 0, 1)  # registers the group
        assert broker.stats("farm.raw").lag["g"] == 7
        broker.commit_offset("farm.raw", "g", 2)
        assert broker.stats("farm.raw").lag["g"] == 4


class TestDurability:
    def test_reopen_preserves_messages(self, tmp_path):
        b = Broker(tmp_path / "b")
        b.create_topic("farm.raw")
        for i in range(20):
            b.append("farm.raw", f"k{i}", f"p{i}".encode())
        b.close()
        b2 = Broker(tmp_path / "b")
        msgs = b2.read("farm.raw", "g", 0, 100)
        assert [m.payload for m in msgs] == [f"p{i}".encode() for i in range(20)]
        b2.close()

    def test_torn_tail_truncated(self, tmp_path):
        b = Broker(tmp_path / "b")
        b.create_topic("farm.raw")
        for i in range(5):
            b.append("farm.raw", str(i), b"payload")
        b.close()
        log = next((tmp_path / "b" / "farm.raw").glob("*.log"))
        with open(log, "ab") as f:
            f.write(b"\x00\x01\x02garbage-torn-frame")
        b2 = Broker(tmp_path / "b")
        msgs = b2.read("farm.raw", "g", 0, 100)
        assert [m.offset for m in msgs] == [0, 1, 2, 3, 4]
        assert b2.append("farm.raw", "next", b"after-recovery") == 5
        b2.close()

    def test_kill9_mid_append_burst(self, tmp_path):
        """Messages acked before a hard kill are readable after restart."""
        script = textwrap.dedent(
            """
            import sys
            from tracepipe.broker import Broker
            b = Broker(sys.argv[1], flush_mode="always")
            b.ensure_topic("farm.raw")
            i = 0
            while True:
                off = b.append("farm.raw", f"k{i}", f"payload-{i}".encode() * 10)
                print(off, flush=True)
                i += 1
            """
        )
        proc = subprocess.Popen(
            [sys.executable, "-c", script, str(tmp_path / "b")],
            stdout=subprocess.PIPE,
            text=True,
        )
        acked = []
        try:
            for _ in range(300):
                line = proc.stdout.readline()
                if not line:
                    break
                acked.append(int(line))
        finally:
            os.kill(proc.pid, signal.SIGKILL)
            proc.wait(timeout=10)
        assert len(acked) >= 100

        b = Broker(tmp_path / "b")
        msgs = b.read("farm.raw", "g", 0, len(acked) + 50)
        have = {m.offset: m.payload for m in msgs}
        for off in acked:
            assert off in have, f"acked offset {off} lost after kill -9"
            assert have[off] == f"payload-{off}".encode() * 10
        b.close()


class TestIsolationFuzz:
    @settings(max_examples=20, deadline=None)
    @given(st.lists(st.tuples(st.sampled_from(["farm", "factory", "retail"]), st.binary(min_size=1, max_size=20)), min_size=1, max_size=60))
    def test_no_cross_topic_leakage(self, tmp_path_factory, traffic):
        base = tmp_path_factory.mktemp("fuzz")
        b = Broker(base)
        for t in ("farm", "factory", "retail"):
            b.create_topic(f"{t}.raw")
        sent = {"farm": [], "factory": [], "retail": []}
        for tenant, payload in traffic:
            b.append(f"{tenant}.raw", tenant, payload)
            sent[tenant].append(payload)
        for tenant in sent:
            got = [m.payload for m in b.read(f"{tenant}.raw", "g", 0, 10_000)]
            assert got == sent[tenant]
            for m in b.read(f"{tenant}.raw", "g", 0, 10_000):
                assert m.key == tenant
        b.close()


class TestFrameOverhead:
    def test_overhead_is_exact(self, tmp_path):
        b = Broker(tmp_path / "b")
        b.create_topic("farm.raw")
        key = "a" * 32
        payload = b"z" * 100
        before = b.stats("farm.raw").size_bytes
        b.append("farm.raw", key, payload)
        after = b.stats("farm.raw").size_bytes
        assert after - before == frame_overhead(key) + len(payload)
        b.close()
