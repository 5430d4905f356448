from __future__ import annotations

import shutil
import sys
import uuid
from pathlib import Path
from typing import Iterator

import numpy as np
import pytest

ROOT = Path(__file__).resolve().parents[2]
sys.path.insert(0, str(ROOT / "python"))

SCENARIOS = ROOT / "scenarios"


@pytest.fixture
def tmp_path() -> Iterator[Path]:
    """Workspace-local tmp_path that avoids platform-specific temp ACL issues."""
    tmp_root = ROOT / "target" / "pytest-tmp"
    tmp_root.mkdir(parents=True, exist_ok=True)
    case_dir = tmp_root / f"case-{uuid.uuid4().hex}"
    case_dir.mkdir()
    try:
        yield case_dir
    finally:
        shutil.rmtree(case_dir, ignore_errors=True)


@pytest.fixture
def scenarios_dir() -> Path:
    return SCENARIOS


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(20240611)
