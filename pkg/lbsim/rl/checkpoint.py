# lbsim/rl/checkpoint.py
"""
JSON checkpoints.

Tensors are stored as {"dtype", "shape", "data"} with data flattened row-major.
Floats go through orjson's shortest round-trip repr, so float64 weights load
back bit-identical.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Optional, Sequence, Union

import orjson
import torch
from torch import nn

from ..errors import CheckpointError
from ..utils import jsonable_state, restore_state

logger = logging.getLogger(__name__)

SCHEMA_VERSION = 1

_DTYPES = {
    "float64": torch.float64,
    "float32": torch.float32,
    "int64": torch.int64,
    "uint8": torch.uint8,
}


def tensor_to_json(t: torch.Tensor) -> Dict[str, Any]:
    t = t.detach().cpu()
    name = str(t.dtype).replace("torch.", "")
    if name not in _DTYPES:
        raise CheckpointError(f"Unsupported tensor dtype {t.dtype}")
    return {"dtype": name, "shape": list(t.shape), "data": t.reshape(-1).tolist()}


def tensor_from_json(d: Dict[str, Any]) -> torch.Tensor:
    try:
        dtype = _DTYPES[d["dtype"]]
        return torch.tensor(d["data"], dtype=dtype).reshape(d["shape"])
    except (KeyError, TypeError, RuntimeError) as exc:
        raise CheckpointError(f"Malformed tensor entry: {exc}") from exc


def module_to_json(module: nn.Module) -> Dict[str, Any]:
    return {name: tensor_to_json(t) for name, t in module.state_dict().items()}


def load_module(module: nn.Module, data: Dict[str, Any], prefix: str) -> None:
    """Load weights after checking every layer's shape."""
    own = module.state_dict()
    missing = sorted(set(own) - set(data))
    if missing:
        raise CheckpointError(f"{prefix}.{missing[0]} missing from checkpoint")
    unexpected = sorted(set(data) - set(own))
    if unexpected:
        raise CheckpointError(f"Unexpected layer {prefix}.{unexpected[0]} in checkpoint")
    loaded = {}
    for name, ref in own.items():
        shape = list(data[name]["shape"])
        if shape != list(ref.shape):
            raise CheckpointError(
                f"Layer {prefix}.{name} expects shape {tuple(ref.shape)}, checkpoint has {tuple(shape)}")
        loaded[name] = tensor_from_json(data[name])
    module.load_state_dict(loaded)


def optimizer_to_json(opt: torch.optim.Optimizer) -> Dict[str, Any]:
    state = opt.state_dict()
    return {
        "param_groups": state["param_groups"],
        "state": {
            str(idx): {k: tensor_to_json(v) if torch.is_tensor(v) else v for k, v in s.items()}
            for idx, s in state["state"].items()
        },
    }


def load_optimizer(opt: torch.optim.Optimizer, data: Dict[str, Any]) -> None:
    state = {
        int(idx): {k: tensor_from_json(v) if isinstance(v, dict) and "dtype" in v else v
                   for k, v in s.items()}
        for idx, s in data["state"].items()
    }
    try:
        opt.load_state_dict({"state": state, "param_groups": data["param_groups"]})
    except (ValueError, KeyError) as exc:
        raise CheckpointError(f"Optimizer state does not match: {exc}") from exc


def generator_state(gen: torch.Generator) -> list:
    return gen.get_state().tolist()


def set_generator_state(gen: torch.Generator, state: list) -> None:
    gen.set_state(torch.tensor(state, dtype=torch.uint8))


@dataclass
class Checkpoint:
    algo: str
    meta: Dict[str, Any]
    networks: Dict[str, Dict[str, Any]]
    optimizers: Dict[str, Dict[str, Any]]
    rng: Dict[str, Any] = field(default_factory=dict)
    replay: Optional[Dict[str, Any]] = None
    schema_version: int = SCHEMA_VERSION

    @property
    def episode(self) -> int:
        return int(self.meta.get("episode", 0))

    def to_dict(self) -> Dict[str, Any]:
        return {
            "schema_version": self.schema_version,
            "algo": self.algo,
            "meta": self.meta,
            "networks": self.networks,
            "optimizers": self.optimizers,
            "rng": jsonable_state(self.rng),
            "replay": self.replay,
        }

    @classmethod
    def from_dict(cls, raw: Dict[str, Any]) -> "Checkpoint":
        version = raw.get("schema_version")
        if version != SCHEMA_VERSION:
            raise CheckpointError(f"Unsupported checkpoint schema {version}, expected {SCHEMA_VERSION}")
        try:
            return cls(
                algo=raw["algo"],
                meta=raw["meta"],
                networks=raw["networks"],
                optimizers=raw["optimizers"],
                rng=restore_state(raw.get("rng") or {}),
                replay=raw.get("replay"),
                schema_version=version,
            )
        except KeyError as exc:
            raise CheckpointError(f"Checkpoint missing field {exc.args[0]}") from None


def save_checkpoint(ckpt: Checkpoint, path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(orjson.dumps(ckpt.to_dict(), option=orjson.OPT_SERIALIZE_NUMPY))
    logger.info("Saved %s checkpoint (episode %d) to %s", ckpt.algo, ckpt.episode, path)
    return path


def load_checkpoint(path: Union[str, Path]) -> Checkpoint:
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"Missing checkpoint: {path}")
    try:
        raw = orjson.loads(path.read_bytes())
    except orjson.JSONDecodeError as exc:
        raise CheckpointError(f"Corrupt checkpoint {path}: {exc}") from exc
    return Checkpoint.from_dict(raw)


def check_compatible(ckpt: Checkpoint, algo: str, tunnel_ids: Sequence[str]) -> None:
    if ckpt.algo != algo:
        raise CheckpointError(f"Checkpoint holds a {ckpt.algo} agent, expected {algo}")
    saved = ckpt.meta.get("tunnel_ids")
    if saved is not None and list(saved) != list(tunnel_ids):
        raise CheckpointError(f"Checkpoint tunnels {saved} do not match topology {list(tunnel_ids)}")
