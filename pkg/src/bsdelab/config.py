"""Experiment configuration: a JSON document with strict unknown-key rejection."""

from __future__ import annotations

import json
from typing import List, Literal, Optional

from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from .catalog import DRIVERS, MODELS

__all__ = ["ExperimentConfig", "ConfigError", "load_config", "parse_config", "TASKS"]

TASKS = ("simulate", "solve", "gradient", "bmo", "constants", "verify-mild", "verify-identification")
_SOLVE_TASKS = {"solve", "gradient", "bmo", "verify-mild", "verify-identification"}


class ConfigError(ValueError):
    pass


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


class GridConfig(_Strict):
    t0: float = 0.0
    T: float
    K: int = Field(ge=2)

    @model_validator(mode="after")
    def _order(self):
        if not self.T > self.t0:
            raise ValueError("grid.T must exceed grid.t0")
        return self


class McConfig(_Strict):
    n_paths: int = Field(ge=1)
    seed: int = Field(ge=0, lt=2**64)


class BasisConfig(_Strict):
    family: Literal["hermite"] = "hermite"
    degree: int = Field(default=3, ge=0, le=12)
    ridge: float = Field(default=1e-10, ge=0.0)


class ConstantsConfig(_Strict):
    N: float = Field(default=0.05, ge=0.0)
    T: float = Field(default=1.0, gt=0.0)
    alpha: float = Field(default=0.5, gt=0.0, lt=1.0)
    q: Optional[float] = None
    p: Optional[float] = None
    p_upper: Optional[float] = None
    data_norm: float = Field(default=1.0, ge=0.0)


class GradientConfig(_Strict):
    h: Optional[List[float]] = None
    eps: float = Field(default=1e-4, gt=0.0)


class VerifyConfig(_Strict):
    t: float = 0.0
    x: Optional[List[float]] = None
    n_outer: int = Field(default=10_000, ge=100)
    n_inner: int = Field(default=1_000, ge=10)
    n_quad: int = Field(default=8, ge=1)
    n_nested: int = Field(default=200, ge=2)
    basis_degree: int = Field(default=7, ge=0, le=12)


class Tolerances(_Strict):
    solve: float = Field(default=2e-2, gt=0.0)
    gradient: float = Field(default=3e-2, gt=0.0)


class ExperimentConfig(_Strict):
    task: Optional[Literal[TASKS]] = None
    model_id: str = "brownian-1d"
    model_params: dict = Field(default_factory=dict)
    driver_id: str = "pure-quadratic-gamma"
    driver_params: dict = Field(default_factory=dict)
    grid: Optional[GridConfig] = None
    mc: Optional[McConfig] = None
    basis: BasisConfig = Field(default_factory=BasisConfig)
    x0: Optional[List[float]] = None
    outputs: str = "out"
    export_paths: int = Field(default=100, ge=0)
    constants: ConstantsConfig = Field(default_factory=ConstantsConfig)
    gradient: GradientConfig = Field(default_factory=GradientConfig)
    verify: VerifyConfig = Field(default_factory=VerifyConfig)
    tolerances: Tolerances = Field(default_factory=Tolerances)

    @model_validator(mode="after")
    def _catalog_keys(self):
        if self.model_id not in MODELS:
            raise ValueError(f"unknown model_id {self.model_id!r}; known: {sorted(MODELS)}")
        if self.driver_id not in DRIVERS:
            raise ValueError(f"unknown driver_id {self.driver_id!r}; known: {sorted(DRIVERS)}")
        return self

    def check_task(self, task: str) -> None:
        """Task-dependent requirements; raises :class:`ConfigError`."""
        if self.task is not None and self.task != task:
            raise ConfigError(f"config field task={self.task!r} conflicts with subcommand {task!r}")
        if task == "constants":
            return
        for name in ("grid", "mc"):
            if getattr(self, name) is None:
                raise ConfigError(f"config error at {name}: field required for task {task!r}")
        if task in _SOLVE_TASKS and self.mc.n_paths < 100:
            raise ConfigError(f"config error at mc.n_paths: must be >= 100 for task {task!r}")


def _format_loc(loc) -> str:
    return ".".join(str(p) for p in loc) or "<root>"


def parse_config(text: str, source: str = "<config>") -> ExperimentConfig:
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{source}: line {exc.lineno} column {exc.colno}: {exc.msg}") from None
    try:
        return ExperimentConfig.model_validate(raw)
    except ValidationError as exc:
        msgs = [f"config error at {_format_loc(e['loc'])}: {e['msg']}" for e in exc.errors()]
        raise ConfigError(f"{source}: " + "; ".join(msgs)) from None


def load_config(path) -> ExperimentConfig:
    with open(path) as fh:
        return parse_config(fh.read(), source=str(path))
