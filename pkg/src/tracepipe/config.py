"""Pipeline configuration: one YAML file defines tenants, credentials,
channels, filespecs, poll sources, mapping specs, loaders and tuning.

Loading validates everything up front — cross-references included — and
reports every problem with its YAML path; nothing starts on a bad config.
Environment variables prefixed APP_ (APP_PORT, APP_HOST, APP_DATA_DIR)
override the file.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import yaml

from .auth import Credential, hash_cost_of
from .extractors import FileSpec, PollSource
from .loader import LoaderPipeline, RetryPolicy, SharedChannelRule
from .model import is_valid_tenant_id
from .transform import MappingSpec, SpecError, load_mapping_spec

ENV_PREFIX = "APP_"


class ConfigError(Exception):
    def __init__(self, errors):
        super().__init__("\n".join(errors))
        self.errors = list(errors)


@dataclass(frozen=True)
class ChannelConfig:
    name: str
    members: frozenset
    shared: bool


@dataclass
class PipelineConfig:
    data_dir: Path
    host: str = "127.0.0.1"
    port: int = 8400
    clock_skew_hours: float = 24.0
    max_body_bytes: int = 1_048_576
    allow_broker_bypass: bool = False
    # broker tuning
    retention_bytes: int = 512 * 1024 * 1024
    segment_bytes: int = 16 * 1024 * 1024
    high_watermark: int = 100_000
    flush_mode: str = "always"
    flush_interval_ms: int = 50
    # ledger tuning
    commit_interval_ms: int = 1000
    block_batch: int = 1
    # wiring
    tenants: list = field(default_factory=list)
    credentials: list = field(default_factory=list)
    clients: dict = field(default_factory=dict)  # demo client keys for the bundled harness
    channels: list = field(default_factory=list)
    filespecs: dict = field(default_factory=dict)
    uploads: dict = field(default_factory=dict)  # tenant -> filespec name
    poll_sources: list = field(default_factory=list)
    mapping_specs: list = field(default_factory=list)
    loaders: list = field(default_factory=list)

    def channel(self, name: str) -> Optional[ChannelConfig]:
        for ch in self.channels:
            if ch.name == name:
                return ch
        return None

    def upload_filespec(self, tenant: str) -> Optional[FileSpec]:
        name = self.uploads.get(tenant)
        return self.filespecs.get(name) if name else None


def _expect_map(value, where: str, errors: list) -> dict:
    if value is None:
        return {}
    if not isinstance(value, dict):
        errors.append(f"{where}: expected a mapping")
        return {}
    return value


def _expect_list(value, where: str, errors: list) -> list:
    if value is None:
        return []
    if not isinstance(value, list):
        errors.append(f"{where}: expected a list")
        return []
    return value


def load_config(path, env: Optional[dict] = None) -> PipelineConfig:
    """Parse and validate the pipeline YAML; raises ConfigError with every
    problem found (no partial configuration)."""
    env = dict(os.environ if env is None else env)
    path = Path(path)
    try:
        raw = yaml.safe_load(path.read_text())
    except FileNotFoundError:
        raise ConfigError([f"config file not found: {path}"]) from None
    except yaml.YAMLError as exc:
        raise ConfigError([f"config is not valid YAML: {exc}"]) from None

    errors: list = []
    if not isinstance(raw, dict) or not raw:
        raise ConfigError(["config: empty or not a mapping; refusing to start"])

    data_dir = env.get(f"{ENV_PREFIX}DATA_DIR") or raw.get("data_dir")
    if not data_dir:
        errors.append("data_dir: required")

    server = _expect_map(raw.get("server"), "server", errors)
    host = env.get(f"{ENV_PREFIX}HOST") or server.get("host", "127.0.0.1")
    port_raw = env.get(f"{ENV_PREFIX}PORT") or server.get("port", 8400)
    try:
        port = int(port_raw)
        if not 1 <= port <= 65535:
            raise ValueError
    except (TypeError, ValueError):
        errors.append(f"server.port: must be an integer in [1, 65535], got {port_raw!r}")
        port = 0

    broker_raw = _expect_map(raw.get("broker"), "broker", errors)
    ledger_raw = _expect_map(raw.get("ledger"), "ledger", errors)
    flush_mode = broker_raw.get("flush_mode", "always")
    if flush_mode not in ("always", "interval", "never"):
        errors.append(f"broker.flush_mode: must be always, interval or never; got {flush_mode!r}")

    tenants = _expect_list(raw.get("tenants"), "tenants", errors)
    if not tenants:
        errors.append("tenants: at least one tenant is required")
    seen = set()
    for i, t in enumerate(tenants):
        if not is_valid_tenant_id(t):
            errors.append(f"tenants[{i}]: invalid tenant id {t!r}")
        elif t in seen:
            errors.append(f"tenants[{i}]: duplicate tenant {t!r}")
        seen.add(t)
    tenant_set = set(tenants)

    credentials = []
    usernames = set()
    for i, c in enumerate(_expect_list(raw.get("credentials"), "credentials", errors)):
        where = f"credentials[{i}]"
        c = _expect_map(c, where, errors)
        username = c.get("username")
        key_hash = c.get("key_hash", "")
        tenant = c.get("tenant")
        if not username:
            errors.append(f"{where}.username: required")
            continue
        if username in usernames:
            errors.append(f"{where}.username: duplicate {username!r}")
        usernames.add(username)
        if tenant not in tenant_set:
            errors.append(f"{where}.tenant: unknown tenant {tenant!r}")
        cost = hash_cost_of(key_hash)
        if cost < 0:
            errors.append(f"{where}.key_hash: not a recognized scrypt hash (use `tracepipe hash-key`)")
        credentials.append(Credential(username=username, key_hash=key_hash, tenant=tenant or "", hash_cost=cost))

    clients = _expect_map(raw.get("clients"), "clients", errors)
    for username in clients:
        if username not in usernames:
            errors.append(f"clients.{username}: no matching credential entry")

    channels = []
    channel_names = set()
    for i, ch in enumerate(_expect_list(raw.get("channels"), "channels", errors)):
        where = f"channels[{i}]"
        ch = _expect_map(ch, where, errors)
        name = ch.get("name")
        members = ch.get("members") or []
        shared = bool(ch.get("shared", False))
        if not name:
            errors.append(f"{where}.name: required")
            continue
        if name in channel_names:
            errors.append(f"{where}.name: duplicate channel {name!r}")
        channel_names.add(name)
        for m in members:
            if m not in tenant_set:
                errors.append(f"{where}.members: unknown tenant {m!r}")
        if not shared and len(members) != 1:
            errors.append(f"{where}: private channel must have exactly one member, got {len(members)}")
        if shared and not members:
            errors.append(f"{where}: shared channel needs at least one member")
        channels.append(ChannelConfig(name=name, members=frozenset(members), shared=shared))

    filespecs = {}
    for name, fs in _expect_map(raw.get("filespecs"), "filespecs", errors).items():
        where = f"filespecs.{name}"
        fs = _expect_map(fs, where, errors)
        try:
            filespecs[name] = FileSpec(
                name=name,
                delimiter=fs.get("delimiter", ""),
                header_rows=int(fs.get("header_rows", 0)),
                comment_prefix=fs.get("comment_prefix", "#"),
                columns=tuple(fs.get("columns") or ()),
            )
        except (ValueError, TypeError) as exc:
            errors.append(f"{where}: {exc}")

    uploads = {}
    for tenant, fs_name in _expect_map(raw.get("uploads"), "uploads", errors).items():
        where = f"uploads.{tenant}"
        if tenant not in tenant_set:
            errors.append(f"{where}: unknown tenant {tenant!r}")
        if fs_name not in filespecs:
            errors.append(f"{where}: unknown filespec {fs_name!r}")
        uploads[tenant] = fs_name

    poll_sources = []
    source_ids = set()
    for i, ps in enumerate(_expect_list(raw.get("poll_sources"), "poll_sources", errors)):
        where = f"poll_sources[{i}]"
        ps = _expect_map(ps, where, errors)
        sid = ps.get("source_id")
        if not sid:
            errors.append(f"{where}.source_id: required")
            continue
        if sid in source_ids:
            errors.append(f"{where}.source_id: duplicate {sid!r}")
        source_ids.add(sid)
        if ps.get("tenant") not in tenant_set:
            errors.append(f"{where}.tenant: unknown tenant {ps.get('tenant')!r}")
        if not ps.get("url"):
            errors.append(f"{where}.url: required")
        if not ps.get("marker_field"):
            errors.append(f"{where}.marker_field: required")
        poll_sources.append(
            PollSource(
                source_id=sid,
                tenant=ps.get("tenant") or "",
                url=ps.get("url") or "",
                marker_field=ps.get("marker_field") or "",
                interval_s=float(ps.get("interval_s", 3600)),
                timeout_s=float(ps.get("timeout_s", 10)),
            )
        )

    mapping_specs = []
    for i, spec_raw in enumerate(_expect_list(raw.get("transform"), "transform", errors)):
        where = f"transform[{i}]"
        spec_raw = _expect_map(spec_raw, where, errors)
        if spec_raw.get("tenant") not in tenant_set:
            errors.append(f"{where}.tenant: unknown tenant {spec_raw.get('tenant')!r}")
        try:
            mapping_specs.append(load_mapping_spec(spec_raw, filespecs=filespecs, where=where))
        except SpecError as exc:
            errors.extend(exc.errors)

    loaders = []
    for i, ld in enumerate(_expect_list(raw.get("loaders"), "loaders", errors)):
        where = f"loaders[{i}]"
        ld = _expect_map(ld, where, errors)
        tenant = ld.get("tenant")
        channel = ld.get("channel")
        shared_channel = ld.get("shared_channel")
        if tenant not in tenant_set:
            errors.append(f"{where}.tenant: unknown tenant {tenant!r}")
        ch = next((c for c in channels if c.name == channel), None)
        if ch is None:
            errors.append(f"{where}.channel: unknown channel {channel!r}")
        elif tenant and tenant not in ch.members:
            errors.append(f"{where}.channel: tenant {tenant!r} is not a member of {channel!r}")
        rule = SharedChannelRule()
        if shared_channel:
            sc = next((c for c in channels if c.name == shared_channel), None)
            if sc is None:
                errors.append(f"{where}.shared_channel: unknown channel {shared_channel!r}")
            else:
                if not sc.shared:
                    errors.append(f"{where}.shared_channel: {shared_channel!r} is not a shared channel")
                if tenant and tenant not in sc.members:
                    errors.append(f"{where}.shared_channel: tenant {tenant!r} is not a member of {shared_channel!r}")
            rule_raw = _expect_map(ld.get("shared_rule"), f"{where}.shared_rule", errors)
            rule = SharedChannelRule(
                biz_steps=frozenset(rule_raw.get("biz_steps") or ()),
                event_types=frozenset(rule_raw.get("event_types") or ()),
            )
        retry_raw = _expect_map(ld.get("retry"), f"{where}.retry", errors)
        retry = RetryPolicy(
            base_ms=int(retry_raw.get("base_ms", 100)),
            multiplier=float(retry_raw.get("multiplier", 2.0)),
            cap_ms=int(retry_raw.get("cap_ms", 30_000)),
        )
        loaders.append(
            LoaderPipeline(
                tenant=tenant or "",
                channel=channel or "",
                shared_channel=shared_channel,
                shared_rule=rule,
                retry=retry,
            )
        )

    if errors:
        raise ConfigError(sorted(errors))

    return PipelineConfig(
        data_dir=Path(data_dir),
        host=host,
        port=port,
        clock_skew_hours=float(raw.get("clock_skew_hours", 24)),
        max_body_bytes=int(raw.get("max_body_bytes", 1_048_576)),
        allow_broker_bypass=bool(raw.get("allow_broker_bypass", False)),
        retention_bytes=int(broker_raw.get("retention_bytes", 512 * 1024 * 1024)),
        segment_bytes=int(broker_raw.get("segment_bytes", 16 * 1024 * 1024)),
        high_watermark=int(broker_raw.get("high_watermark", 100_000)),
        flush_mode=flush_mode,
        flush_interval_ms=int(broker_raw.get("flush_interval_ms", 50)),
        commit_interval_ms=int(ledger_raw.get("commit_interval_ms", 1000)),
        block_batch=int(ledger_raw.get("block_batch", 1)),
        tenants=list(tenants),
        credentials=credentials,
        clients=dict(clients),
        channels=channels,
        filespecs=filespecs,
        uploads=uploads,
        poll_sources=poll_sources,
        mapping_specs=mapping_specs,
        loaders=loaders,
    )
