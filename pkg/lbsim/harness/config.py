# lbsim/harness/config.py
"""
Experiment configuration: one validated document per run.

Sources, lowest to highest precedence: model defaults, config file
(.toml / .json / .yaml), LBSIM_* environment variables, explicit overrides
(CLI flags).
"""
from __future__ import annotations

import logging
import os
try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional, Union

import orjson
import yaml
from dotenv import load_dotenv
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from ..core.flow_env import EnvConfig
from ..core.safety import CbfConfig
from ..errors import ConfigError, LbsimError
from ..net.topology import Topology, build_abilene, load_topology, scale_capacities, with_capacities
from ..net.traffic import TrafficConfig
from ..opt.optimizer import SolverConfig
from ..rl.trainer import AgentConfig, TrainSchedule
from ..utils import CONFIGS, canonical_hash

logger = logging.getLogger(__name__)

load_dotenv()


class TopologyConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    path: Optional[Path] = None        # None: built-in Abilene
    c_hi: Optional[float] = Field(default=None, gt=0)
    c_lo: Optional[float] = Field(default=None, gt=0)
    scale: Optional[float] = Field(default=None, gt=0)

    @model_validator(mode="after")
    def _path_exists(self) -> "TopologyConfig":
        if self.path is not None and not self.path.exists():
            raise ValueError(f"Topology file not found: {self.path}")
        if (self.c_hi is None) != (self.c_lo is None):
            raise ValueError("c_hi and c_lo must be given together")
        return self

    def build(self) -> Topology:
        topo = load_topology(self.path) if self.path is not None else build_abilene()
        if self.c_hi is not None:
            topo = with_capacities(topo, self.c_hi, self.c_lo)
        if self.scale is not None:
            topo = scale_capacities(topo, self.scale)
        return topo


class EvalConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    trace_length: int = Field(default=100, ge=1)
    trace_start: int = Field(default=100_000, ge=0)
    trace_seed: int = 7
    trace_path: Optional[Path] = None
    baselines: List[str] = Field(default_factory=lambda: ["static", "random", "ecmp", "ucmp"])
    static_path: int = Field(default=1, ge=0)
    include_nlp: bool = True
    nlp_cache_dir: Optional[Path] = None


class ExperimentConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    name: str = "default"
    output_dir: Path = Path("runs")
    topology: TopologyConfig = Field(default_factory=TopologyConfig)
    traffic: TrafficConfig = Field(default_factory=TrafficConfig)
    env: EnvConfig = Field(default_factory=EnvConfig)
    cbf: CbfConfig = Field(default_factory=CbfConfig)
    agent: AgentConfig = Field(default_factory=AgentConfig)
    schedule: TrainSchedule = Field(default_factory=TrainSchedule)
    solver: SolverConfig = Field(default_factory=SolverConfig)
    eval: EvalConfig = Field(default_factory=EvalConfig)

    @model_validator(mode="after")
    def _cross_checks(self) -> "ExperimentConfig":
        # binds traffic to the tunnel set; raises on B_k < A_k or unknown tunnels
        topo = self.topology.build()
        self.traffic.resolve(topo)
        shortest = min((len(t.paths) for t in topo.tunnels), default=0)
        if "static" in self.eval.baselines and self.eval.static_path >= shortest:
            raise ValueError(f"static_path {self.eval.static_path} exceeds the smallest tunnel")
        return self


def _read_document(path: Path) -> Dict[str, Any]:
    if not path.exists():
        raise ConfigError(f"Missing config file: {path}")
    suffix = path.suffix.lower()
    try:
        if suffix == ".toml":
            return tomllib.loads(path.read_text(encoding="utf-8"))
        if suffix == ".json":
            return orjson.loads(path.read_bytes())
        if suffix in (".yaml", ".yml"):
            return yaml.safe_load(path.read_text(encoding="utf-8")) or {}
    except (tomllib.TOMLDecodeError, orjson.JSONDecodeError, yaml.YAMLError) as exc:
        raise ConfigError(f"Failed to parse {path}: {exc}") from exc
    raise ConfigError(f"Unsupported config format: {path.suffix}")


def deep_merge(base: Dict[str, Any], extra: Mapping[str, Any]) -> Dict[str, Any]:
    out = dict(base)
    for key, value in extra.items():
        if value is None:
            continue
        if isinstance(value, Mapping):
            current = out.get(key)
            out[key] = deep_merge(dict(current) if isinstance(current, Mapping) else {}, value)
        else:
            out[key] = value
    return out


def env_overrides() -> Dict[str, Any]:
    """LBSIM_* environment variables as a nested override document."""
    raw: Dict[str, Any] = {}
    if os.getenv("LBSIM_OUTPUT_DIR"):
        raw["output_dir"] = os.getenv("LBSIM_OUTPUT_DIR")
    if os.getenv("LBSIM_SEED"):
        seed = int(os.environ["LBSIM_SEED"])
        raw = deep_merge(raw, seed_overrides(seed))
    if os.getenv("LBSIM_WORKERS"):
        raw = deep_merge(raw, {"schedule": {"workers": int(os.environ["LBSIM_WORKERS"])}})
    return raw


def seed_overrides(seed: int) -> Dict[str, Any]:
    """One seed drives agent init, traffic noise and the CBF search."""
    return {"schedule": {"seed": seed}, "traffic": {"seed": seed}, "cbf": {"seed": seed},
            "solver": {"seed": seed}}


def load_config(path: Optional[Union[str, Path]] = None,
                overrides: Optional[Mapping[str, Any]] = None) -> ExperimentConfig:
    raw: Dict[str, Any] = {}
    if path is not None:
        raw = _read_document(Path(path))
    raw = deep_merge(raw, env_overrides())
    if overrides:
        raw = deep_merge(raw, overrides)
    try:
        cfg = ExperimentConfig.model_validate(raw)
    except ValidationError as exc:
        raise ConfigError(f"Invalid experiment config: {exc}") from exc
    except LbsimError as exc:
        raise ConfigError(f"Invalid experiment config: {exc}") from exc
    logger.info("Loaded config %s (%s)", cfg.name, config_hash(cfg)[:12])
    return cfg


def named_config(name: str) -> Path:
    """Path of a config shipped in configs/."""
    path = CONFIGS / f"{name}.toml"
    if not path.exists():
        raise ConfigError(f"No shipped config named {name}")
    return path


def config_hash(cfg: ExperimentConfig) -> str:
    return canonical_hash(cfg.model_dump(mode="json", exclude={"output_dir"}))
