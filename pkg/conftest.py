# conftest.py
# Shared pytest setup: repo root on sys.path, opt-in slow acceptance runs (--runslow),
# frozen acceptance values under tests/golden/ (--update-golden rewrites them).

from __future__ import annotations
import json
import os, sys
from pathlib import Path
from typing import Any, Dict, Optional

import pytest

sys.path.insert(0, os.path.dirname(os.path.abspath(__file__)))

GOLDEN_DIR = Path(__file__).resolve().parent / "tests" / "golden"


def pytest_addoption(parser):
    parser.addoption("--runslow", action="store_true", default=False,
                     help="also run the long desk-scale acceptance experiments")
    parser.addoption("--update-golden", action="store_true", default=False,
                     help="rewrite the frozen acceptance values in tests/golden/ from this run")


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: long-running acceptance experiment (needs --runslow)")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow"):
        return
    skip = pytest.mark.skip(reason="needs --runslow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip)


class Golden:
    """Frozen values keyed by file name; each file records the inputs it was computed from."""

    def __init__(self, root: Path, update: bool) -> None:
        self.root = root
        self.update = update

    def path(self, name: str) -> Path:
        return self.root / f"{name}.json"

    def get(self, name: str, key: str, inputs: Dict[str, Any]) -> Optional[float]:
        payload = json.loads(self.path(name).read_text(encoding="utf-8"))
        if payload.get("inputs") != inputs:
            pytest.fail(f"{self.path(name)} was frozen for {payload.get('inputs')}, not {inputs}")
        return payload.get(key)

    def freeze(self, name: str, key: str, value: float, inputs: Dict[str, Any]) -> None:
        self.root.mkdir(parents=True, exist_ok=True)
        payload = {"inputs": inputs, key: value}
        self.path(name).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")


@pytest.fixture
def golden(request) -> Golden:
    return Golden(GOLDEN_DIR, request.config.getoption("--update-golden"))
