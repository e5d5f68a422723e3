"""Service wiring: builds every component from a PipelineConfig and exposes
the HTTP surface.

Endpoints:
    POST /entryBatch, /manageBatches, /exitBatch   authenticated push ingest
    POST /upload                                   multipart daily-file upload
    GET  /status/{request_id}                      lifecycle + correlation
    GET  /requests?state=&page=&page_size=         tenant-scoped listing
    GET  /metrics                                  text exposition
    GET  /journey/{epc}                            ledger journey query
    GET  /channels/{channel}/blocks/{number}       ledger block read
    GET  /healthz
"""

from __future__ import annotations

import logging
import signal
import threading
from datetime import timedelta
from pathlib import Path
from typing import Optional

from starlette.applications import Starlette
from starlette.requests import Request
from starlette.responses import JSONResponse, PlainTextResponse, Response
from starlette.routing import Mount, Route
from starlette.staticfiles import StaticFiles

from .auth import AuthFailure, CredentialStore
from .broker import Backpressure, Broker, UnknownTopic
from .config import PipelineConfig
from .extractors import IngestService, PayloadInvalid, PollRunner, dlq_topic, epcis_topic, raw_topic
from .ledger import AccessDenied, Ledger, UnknownBlock, UnknownChannel
from .loader import Loader
from .status import StatusStore, UnknownRequest, render_metrics
from .transform import SpecIndex, Transformer

logger = logging.getLogger(__name__)

ROUTE_BY_PATH = {
    "/entryBatch": "entry_batch",
    "/manageBatches": "manage_batches",
    "/exitBatch": "exit_batch",
}


def error_body(code: str, message: str, locus: Optional[str] = None) -> dict:
    return {"error": {"code": code, "message": message, "locus": locus}}


class Service:
    """Owns the component graph and its lifecycle."""

    def __init__(self, config: PipelineConfig):
        self.config = config
        data_dir = Path(config.data_dir)
        data_dir.mkdir(parents=True, exist_ok=True)

        self.broker = Broker(
            data_dir / "broker",
            default_retention_bytes=config.retention_bytes,
            default_high_watermark=config.high_watermark,
            segment_bytes=config.segment_bytes,
            flush_mode=config.flush_mode,
            flush_interval_ms=config.flush_interval_ms,
        )
        self.ledger = Ledger(
            data_dir / "ledger",
            commit_interval_ms=config.commit_interval_ms,
            block_batch=config.block_batch,
        )
        self.status = StatusStore(data_dir / "status", flush_mode=config.flush_mode)
        self.credentials = CredentialStore()
        for cred in config.credentials:
            self.credentials.add(cred)

        for tenant in config.tenants:
            self.broker.ensure_topic(raw_topic(tenant))
            self.broker.ensure_topic(epcis_topic(tenant))
            # dead-letter topics are parking lots; back-pressure never applies
            self.broker.ensure_topic(dlq_topic(tenant), high_watermark=2**62)
        for ch in config.channels:
            self.ledger.ensure_channel(ch.name, ch.members, ch.shared)

        self.ingest = IngestService(self.broker, self.status)
        skew = timedelta(hours=config.clock_skew_hours)
        spec_index = SpecIndex(config.mapping_specs)
        tenants_with_specs = {spec.tenant for spec in config.mapping_specs}
        self.transformers = [
            Transformer(tenant, self.broker, self.status, spec_index, clock_skew=skew)
            for tenant in config.tenants
            if tenant in tenants_with_specs
        ]
        self.loaders = [
            Loader(pipeline, self.broker, self.ledger, self.status) for pipeline in config.loaders
        ]
        self.poller = PollRunner(self.ingest, config.poll_sources, data_dir / "cursors")
        self._started = False
        self._stopped = False

    # -- lifecycle ---------------------------------------------------------------

    def start(self) -> None:
        if self._started:
            return
        self._started = True
        for transformer in self.transformers:
            transformer.start()
        for loader in self.loaders:
            loader.start()
        self.poller.start()
        logger.info(
            "service started: %d tenants, %d transformers, %d loaders, %d poll sources",
            len(self.config.tenants),
            len(self.transformers),
            len(self.loaders),
            len(self.config.poll_sources),
        )

    def stop(self) -> None:
        if self._stopped:
            return
        self._stopped = True
        self.poller.stop()
        for transformer in self.transformers:
            transformer.stop()
        for loader in self.loaders:
            loader.drain(timeout=30.0)
        self.status.flush()
        self.broker.flush()
        self.status.close()
        self.broker.close()
        self.ledger.close()
        logger.info("service stopped cleanly")

    def quiesce(self, timeout: float = 60.0) -> bool:
        """Wait until every ingested request is terminal; True on success."""
        import time

        deadline = time.monotonic() + timeout
        while time.monotonic() < deadline:
            counts = self.status.counts()
            if counts["Received"] + counts["Translated"] + counts["Processing"] == 0:
                return True
            time.sleep(0.05)
        return False

    # -- request helpers ------------------------------------------------------------

    def authenticate(self, request: Request) -> str:
        return self.credentials.authenticate(dict(request.headers))

    def maybe_tenant(self, request: Request) -> Optional[str]:
        """Best-effort caller identity for read endpoints; None = anonymous."""
        try:
            return self.credentials.authenticate(dict(request.headers))
        except AuthFailure:
            return None


def build_app(service: Service) -> Starlette:
    config = service.config

    async def push_handler(request: Request) -> Response:
        route = ROUTE_BY_PATH[request.url.path]
        try:
            tenant = service.authenticate(request)
        except AuthFailure as exc:
            return JSONResponse(error_body(exc.code, exc.message), status_code=401)
        body = await request.body()
        if len(body) > config.max_body_bytes:
            return JSONResponse(
                error_body("payload_too_large", f"body exceeds {config.max_body_bytes} bytes", "body"),
                status_code=413,
            )
        bypass = config.allow_broker_bypass and request.headers.get("x-bypass-broker") == "1"
        try:
            if bypass:
                # measurement path: everything but the broker append
                request_id = service.ingest.ingest_push_direct(tenant, route, body)
                return JSONResponse({"request_id": request_id, "bypass": True}, status_code=202)
            request_id = service.ingest.ingest_push(tenant, route, body)
        except PayloadInvalid as exc:
            return JSONResponse(error_body(**exc.error.to_dict()), status_code=400)
        except Backpressure:
            return JSONResponse(
                error_body("backpressure", "raw topic at high watermark; retry later"),
                status_code=503,
                headers={"Retry-After": "1"},
            )
        return JSONResponse({"request_id": request_id}, status_code=202)

    async def upload_handler(request: Request) -> Response:
        try:
            tenant = service.authenticate(request)
        except AuthFailure as exc:
            return JSONResponse(error_body(exc.code, exc.message), status_code=401)
        filespec = config.upload_filespec(tenant)
        if filespec is None:
            return JSONResponse(
                error_body("no_upload_config", f"tenant {tenant!r} has no upload filespec"),
                status_code=400,
            )
        form = await request.form()
        upload = form.get("file")
        if upload is None:
            return JSONResponse(
                error_body("missing_file", "multipart field 'file' is required", "file"),
                status_code=400,
            )
        data = await upload.read()
        if len(data) > config.max_body_bytes:
            return JSONResponse(
                error_body("payload_too_large", f"file exceeds {config.max_body_bytes} bytes", "file"),
                status_code=413,
            )
        try:
            receipt = service.ingest.ingest_upload(tenant, upload.filename or "upload", data, filespec)
        except PayloadInvalid as exc:
            return JSONResponse(error_body(**exc.error.to_dict()), status_code=400)
        except Backpressure:
            return JSONResponse(
                error_body("backpressure", "raw topic at high watermark; retry later"),
                status_code=503,
                headers={"Retry-After": "1"},
            )
        return JSONResponse(receipt.to_dict(), status_code=200)

    async def status_handler(request: Request) -> Response:
        try:
            tenant = service.authenticate(request)
        except AuthFailure as exc:
            return JSONResponse(error_body(exc.code, exc.message), status_code=401)
        request_id = request.path_params["request_id"]
        try:
            st = service.status.get(request_id)
        except UnknownRequest:
            return JSONResponse(error_body("not_found", f"unknown request {request_id}"), status_code=404)
        if st.tenant != tenant:
            return JSONResponse(
                error_body("forbidden", "request belongs to another tenant"), status_code=403
            )
        return JSONResponse(st.to_dict())

    async def requests_handler(request: Request) -> Response:
        try:
            tenant = service.authenticate(request)
        except AuthFailure as exc:
            return JSONResponse(error_body(exc.code, exc.message), status_code=401)
        q = request.query_params
        asked = q.get("tenant")
        if asked and asked != tenant:
            return JSONResponse(
                error_body("forbidden", "cannot list another tenant's requests"), status_code=403
            )
        state = q.get("state") or None
        try:
            page = int(q.get("page", 0))
            page_size = min(500, int(q.get("page_size", 50)))
        except ValueError:
            return JSONResponse(error_body("bad_request", "page/page_size must be integers"), status_code=400)
        items, total = service.status.list_requests(tenant, state=state, page=page, page_size=page_size)
        return JSONResponse(
            {
                "tenant": tenant,
                "state": state,
                "page": page,
                "page_size": page_size,
                "total": total,
                "items": [s.to_dict() for s in items],
            }
        )

    async def metrics_handler(request: Request) -> Response:
        snapshot = service.status.metrics_snapshot(broker=service.broker)
        return PlainTextResponse(render_metrics(snapshot))

    async def journey_handler(request: Request) -> Response:
        epc = request.path_params["epc"]
        caller = service.maybe_tenant(request)
        entries = service.ledger.query_journey(epc, caller=caller)
        return JSONResponse(
            {
                "epc": epc,
                "entries": [
                    {
                        "event": e.event,
                        "tx_id": e.tx_id,
                        "block_number": e.block_number,
                        "channel": e.channel,
                    }
                    for e in entries
                ],
            }
        )

    async def block_handler(request: Request) -> Response:
        channel = request.path_params["channel"]
        number = request.path_params["number"]
        caller = service.maybe_tenant(request)
        try:
            block = service.ledger.get_block(channel, number, caller=caller)
        except UnknownChannel:
            return JSONResponse(error_body("not_found", f"unknown channel {channel}"), status_code=404)
        except UnknownBlock:
            return JSONResponse(error_body("not_found", f"no block {number} on {channel}"), status_code=404)
        except AccessDenied:
            return JSONResponse(error_body("forbidden", "not a channel member"), status_code=403)
        return JSONResponse(block.to_dict())

    async def healthz(request: Request) -> Response:
        return JSONResponse({"status": "ok"})

    routes = [
        Route("/entryBatch", push_handler, methods=["POST"]),
        Route("/manageBatches", push_handler, methods=["POST"]),
        Route("/exitBatch", push_handler, methods=["POST"]),
        Route("/upload", upload_handler, methods=["POST"]),
        Route("/status/{request_id}", status_handler, methods=["GET"]),
        Route("/requests", requests_handler, methods=["GET"]),
        Route("/metrics", metrics_handler, methods=["GET"]),
        Route("/journey/{epc}", journey_handler, methods=["GET"]),
        Route("/channels/{channel}/blocks/{number:int}", block_handler, methods=["GET"]),
        Route("/healthz", healthz, methods=["GET"]),
    ]
    ui_dir = Path(__file__).resolve().parents[2] / "frontend" / "dist"
    if ui_dir.is_dir():
        routes.append(Mount("/ui", app=StaticFiles(directory=str(ui_dir), html=True), name="ui"))
    return Starlette(routes=routes)


class ServerHandle:
    """A uvicorn server running in a thread; for tests and the CLI harness."""

    def __init__(self, service: Service):
        import uvicorn

        self.service = service
        app = build_app(service)
        self._uv = uvicorn.Server(
            uvicorn.Config(
                app,
                host=service.config.host,
                port=service.config.port,
                log_level="warning",
                access_log=False,
            )
        )
        self._thread: Optional[threading.Thread] = None

    @property
    def base_url(self) -> str:
        return f"http://{self.service.config.host}:{self.service.config.port}"

    def start(self, wait: float = 10.0) -> None:
        import time

        self.service.start()
        self._thread = threading.Thread(target=self._uv.run, daemon=True, name="uvicorn")
        self._thread.start()
        deadline = time.monotonic() + wait
        while not self._uv.started:
            if time.monotonic() > deadline:
                raise RuntimeError("server failed to start in time")
            time.sleep(0.02)

    def stop(self) -> None:
        self._uv.should_exit = True
        if self._thread is not None:
            self._thread.join(timeout=10.0)
        self.service.stop()


def run_service(config: PipelineConfig) -> None:
    """Run in the foreground until SIGINT/SIGTERM; drains on shutdown."""
    import uvicorn

    service = Service(config)
    service.start()
    app = build_app(service)
    server = uvicorn.Server(
        uvicorn.Config(app, host=config.host, port=config.port, log_level="info", access_log=False)
    )

    def handle_signal(signum, frame):
        server.should_exit = True

    signal.signal(signal.SIGTERM, handle_signal)
    try:
        server.run()
    finally:
        service.stop()
