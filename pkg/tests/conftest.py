from __future__ import annotations

import pytest

from helpers import ACCEPTANCE
from mock_server import MockPolicyServer


@pytest.fixture
def mock_server():
    servers = []

    def start(mode: str = "echo", **kwargs) -> MockPolicyServer:
        srv = MockPolicyServer(mode, **kwargs).__enter__()
        servers.append(srv)
        return srv

    yield start
    for srv in servers:
        srv.__exit__(None, None, None)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
