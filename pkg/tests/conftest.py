"""Shared fixtures: mock fleets, a live bridge, and an HTTP front end.

Fixtures that own child processes assert on teardown that every spawned
process is gone, so any test that leaks a mock fails loudly here.
"""

from __future__ import annotations

import os

import pytest

from bridgekit.gateway import Bridge, start_http
from bridgekit.manager import parse_config
from bridgekit.mockserver import default_fleet_config


def _build_fleet(state_dir: str):
    os.makedirs(state_dir, exist_ok=True)
    configs, settings = parse_config(default_fleet_config(state_dir))
    settings["sandboxBackend"] = "subprocess"
    return configs, settings


@pytest.fixture
def fleet(tmp_path):
    """Fresh per-test fleet: (configs, settings, state_dir)."""
    state_dir = str(tmp_path / "state")
    configs, settings = _build_fleet(state_dir)
    return configs, settings, state_dir


@pytest.fixture
def bridge(fleet):
    configs, settings, _ = fleet
    b = Bridge(configs, settings=settings)
    b.start_all(strict=True)
    yield b
    b.shutdown()
    leftovers = b.manager.live_children()
    assert leftovers == [], f"leaked child processes: {leftovers}"


@pytest.fixture
def http_bridge(bridge):
    server, _ = start_http(bridge, port=0)
    url = f"http://127.0.0.1:{server.server_address[1]}"
    yield bridge, url
    server.shutdown()


@pytest.fixture(scope="session")
def shared_http_fleet(tmp_path_factory):
    """One long-lived fleet for read-only routing tests; cheaper than a
    process quartet per test. Tests must not stop its servers."""
    state_dir = str(tmp_path_factory.mktemp("fleet-state"))
    configs, settings = _build_fleet(state_dir)
    b = Bridge(configs, settings=settings)
    b.start_all(strict=True)
    server, _ = start_http(b, port=0)
    url = f"http://127.0.0.1:{server.server_address[1]}"
    yield b, url, state_dir
    server.shutdown()
    b.shutdown()
    leftovers = b.manager.live_children()
    assert leftovers == [], f"leaked child processes: {leftovers}"


def server_id_by_name(bridge: Bridge, name: str) -> str:
    for conn in bridge.manager.list_connections():
        if conn.config.name == name:
            return conn.id
    raise AssertionError(f"no server named {name}")
