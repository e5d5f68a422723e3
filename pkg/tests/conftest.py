import socket
from pathlib import Path

import pytest
import yaml

ACCEPTANCE_LINES: list = []


def acceptance_report(line: str) -> None:
    """Collect a criterion's one-line verdict for the end-of-run summary."""
    ACCEPTANCE_LINES.append(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)

REPO_ROOT = Path(__file__).resolve().parents[1]
BUNDLED_CONFIG = REPO_ROOT / "configs" / "pipeline.yaml"
MIXED_UPLOAD_FIXTURE = REPO_ROOT / "configs" / "fixtures" / "retail-daily-mixed.csv"

DEMO_KEYS = {
    "farm-bot": "farm-key-1",
    "factory-bot": "factory-key-1",
    "retail-bot": "retail-key-1",
}
TENANT_USERS = {"farm": "farm-bot", "factory": "factory-bot", "retail": "retail-bot"}


def free_port() -> int:
    with socket.socket() as s:
        s.bind(("127.0.0.1", 0))
        return s.getsockname()[1]


def auth_headers(tenant: str) -> dict:
    user = TENANT_USERS[tenant]
    return {"X-Username": user, "X-Api-Key": DEMO_KEYS[user]}


def build_config_file(tmp_path, mutate=None) -> Path:
    """Bundled pipeline config re-rooted at tmp_path with a free port."""
    raw = yaml.safe_load(BUNDLED_CONFIG.read_text())
    raw["data_dir"] = str(tmp_path / "data")
    raw["server"]["port"] = free_port()
    if mutate:
        mutate(raw)
    path = tmp_path / "pipeline.yaml"
    path.write_text(yaml.safe_dump(raw))
    return path


@pytest.fixture
def running_service(tmp_path):
    """In-process service + real uvicorn server on a free port."""
    from tracepipe.config import load_config
    from tracepipe.service import ServerHandle, Service

    config = load_config(build_config_file(tmp_path), env={})
    handle = ServerHandle(Service(config))
    handle.start()
    yield handle
    handle.stop()
