# lbsim/utils.py
from __future__ import annotations

import hashlib
import logging
import os
import random
from pathlib import Path
from typing import Any, Dict, Optional, Union

import numpy as np
import orjson
import torch
from dotenv import load_dotenv

ROOT = Path(__file__).resolve().parents[1]
DATA = ROOT / "data"
TOPOLOGIES = DATA / "topologies"
CONFIGS = ROOT / "configs"

load_dotenv()

_LOG_FORMAT = "%(asctime)s %(levelname)s [%(name)s] %(message)s"
_LOGGING_READY = False


def setup_logging(level: Optional[str] = None) -> None:
    """
    Install one stream handler on the `lbsim` logger.
    Level falls back to LBSIM_LOG_LEVEL, then INFO.
    """
    global _LOGGING_READY
    level = (level or os.getenv("LBSIM_LOG_LEVEL", "INFO")).upper()
    root = logging.getLogger("lbsim")
    root.setLevel(level)
    if not _LOGGING_READY:
        handler = logging.StreamHandler()
        handler.setFormatter(logging.Formatter(_LOG_FORMAT))
        root.addHandler(handler)
        _LOGGING_READY = True


def progress_enabled() -> bool:
    """tqdm bars are on unless LBSIM_PROGRESS=0."""
    return os.getenv("LBSIM_PROGRESS", "1") not in ("0", "false", "no")


def seed_everything(seed: int) -> None:
    """Seed python, numpy's legacy global state and torch."""
    random.seed(seed)
    np.random.seed(seed % (2**32))
    torch.manual_seed(seed)


def rng_for(*keys: int) -> np.random.Generator:
    """Independent generator for a tuple of integer keys (seed, worker, ...)."""
    return np.random.default_rng([int(k) for k in keys])


def dumps_json(obj: Any, pretty: bool = False) -> bytes:
    """orjson dump with sorted keys and numpy support."""
    option = orjson.OPT_SORT_KEYS | orjson.OPT_SERIALIZE_NUMPY
    if pretty:
        option |= orjson.OPT_INDENT_2
    return orjson.dumps(obj, option=option)


def write_json(path: Union[str, Path], obj: Any, pretty: bool = True) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(dumps_json(obj, pretty=pretty))
    return path


def read_json(path: Union[str, Path]) -> Dict[str, Any]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"Missing JSON file: {path}")
    return orjson.loads(path.read_bytes())


def content_hash(data: Union[bytes, str, Path]) -> str:
    """
    sha256 hex digest of raw bytes, a string, or a file's contents.
    """
    if isinstance(data, Path):
        data = data.read_bytes()
    elif isinstance(data, str):
        data = data.encode("utf-8")
    return hashlib.sha256(data).hexdigest()


def canonical_hash(obj: Any) -> str:
    """Hash of the sorted-key JSON form of `obj`."""
    return content_hash(dumps_json(obj))


def jsonable_state(state: Any) -> Any:
    """
    Make an rng state JSON-safe: numpy bit generator states carry 128-bit
    integers, which are stored as strings.
    """
    if isinstance(state, dict):
        return {k: jsonable_state(v) for k, v in state.items()}
    if isinstance(state, (list, tuple)):
        return [jsonable_state(v) for v in state]
    if isinstance(state, (int, np.integer)) and not isinstance(state, bool):
        value = int(state)
        if abs(value) >= 2**63:
            return {"__bigint__": str(value)}
        return value
    return state


def restore_state(state: Any) -> Any:
    """Inverse of `jsonable_state`."""
    if isinstance(state, dict):
        if set(state) == {"__bigint__"}:
            return int(state["__bigint__"])
        return {k: restore_state(v) for k, v in state.items()}
    if isinstance(state, list):
        return [restore_state(v) for v in state]
    return state
