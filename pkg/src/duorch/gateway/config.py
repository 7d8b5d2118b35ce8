"""Runtime configuration file (JSON)."""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping

from ..provisioner import InstallerRegistry
from ..qpusim import Clock, LatencyModel
from .policy import ResourcePolicy
from .runtime import Runtime

__all__ = ["ConfigError", "RuntimeConfig", "load_config", "build_runtime"]

DEFAULT_LISTEN = "127.0.0.1:7411"


class ConfigError(ValueError):
    pass


@dataclass
class RuntimeConfig:
    listen: str = DEFAULT_LISTEN
    state_dir: str = "state"
    clock: str = "simulated"
    qpu: dict[str, Any] = field(default_factory=dict)
    policy: dict[str, Any] = field(default_factory=dict)
    installers: dict[str, Any] = field(default_factory=dict)
    apps: list[str] = field(default_factory=list)
    retries: dict[str, int] = field(default_factory=dict)
    max_deployments: int = 4
    max_iterations: int = 1000

    @classmethod
    def from_dict(cls, doc: Mapping[str, Any], *, base: Path | None = None) -> "RuntimeConfig":
        if not isinstance(doc, Mapping):
            raise ConfigError("configuration must be a JSON object")
        unknown = sorted(set(doc) - set(cls.__dataclass_fields__))
        if unknown:
            raise ConfigError(f"unknown configuration keys: {', '.join(unknown)}")
        cfg = cls(**dict(doc))
        if base is not None:
            if not Path(cfg.state_dir).is_absolute():
                cfg.state_dir = str(base / cfg.state_dir)
            cfg.apps = [str(p if Path(p).is_absolute() else base / p) for p in cfg.apps]
        cfg.check()
        return cfg

    def check(self) -> None:
        if self.clock not in ("simulated", "wall"):
            raise ConfigError(f"clock must be simulated or wall, not {self.clock!r}")
        unknown_qpu = sorted(set(self.qpu) - {"queue_wait_ms", "exec_base_ms", "per_shot_us", "seed"})
        if unknown_qpu:
            raise ConfigError(f"unknown qpu keys: {', '.join(unknown_qpu)}")
        unknown_retries = sorted(set(self.retries) - {"installer", "deploy"})
        if unknown_retries:
            raise ConfigError(f"unknown retries keys: {', '.join(unknown_retries)}")
        try:
            self.latency()
            self.resource_policy()
            InstallerRegistry.from_config(self.installers)
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from None
        if not isinstance(self.max_deployments, int) or self.max_deployments < 1:
            raise ConfigError("max_deployments must be a positive integer")

    def listen_address(self) -> str:
        return os.environ.get("DUORCH_LISTEN") or self.listen

    def latency(self) -> LatencyModel:
        q = self.qpu
        return LatencyModel(q.get("queue_wait_ms", 500), q.get("exec_base_ms", 100), q.get("per_shot_us", 0))

    def resource_policy(self) -> ResourcePolicy:
        return ResourcePolicy.from_dict(self.policy)


def load_config(path: str | Path | None) -> RuntimeConfig:
    if path is None:
        return RuntimeConfig()
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except OSError as exc:
        raise ConfigError(f"cannot read {path}: {exc}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON at line {exc.lineno} column {exc.colno}") from None
    return RuntimeConfig.from_dict(doc, base=path.parent)


def build_runtime(cfg: RuntimeConfig, **overrides: Any) -> Runtime:
    clock = Clock(cfg.clock)
    return Runtime(
        cfg.state_dir,
        clock=clock,
        latency=cfg.latency(),
        policy=overrides.get("policy") or cfg.resource_policy(),
        installers=cfg.installers,
        installer_retries=cfg.retries.get("installer", 3),
        deploy_retries=cfg.retries.get("deploy", 2),
        max_iterations=cfg.max_iterations,
        seed=int(cfg.qpu.get("seed", 0)),
    )
