"""Experiment configuration: TOML files checked against a strict schema."""

from __future__ import annotations

import hashlib
import re
import sys
from pathlib import Path
from typing import Literal, Optional

from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

CONFIG_FORMAT = "toml/1"


class ConfigError(ValueError):
    """A config that fails to parse or validate; ``line``/``column`` are 1-based."""

    def __init__(self, message: str, line: int | None = None, column: int | None = None):
        where = f" (line {line}, column {column})" if line is not None else ""
        super().__init__(message + where)
        self.line = line
        self.column = column


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


class ExpressionBlock(_Strict):
    drift: list[str]
    diffusion: list[list[str]]
    running_cost: str = "0"
    terminal_cost: str = "0"
    delta: float
    controls: list[list[float]] = Field(default_factory=lambda: [[0.0]])
    labels: Optional[list[str]] = None
    dominator: Optional[str] = None
    g_bound: float = float("inf")


class ProblemBlock(_Strict):
    preset: Optional[str] = None
    params: dict = Field(default_factory=dict)
    expression: Optional[ExpressionBlock] = None
    dim: int = 2

    @model_validator(mode="after")
    def _one_source(self):
        if (self.preset is None) == (self.expression is None):
            raise ValueError("give exactly one of problem.preset or problem.expression")
        return self


class DomainBlock(_Strict):
    shape: Literal["ball", "box", "whole"] = "ball"
    center: Optional[list[float]] = None
    radius: float = 1.0
    lo: Optional[list[float]] = None
    hi: Optional[list[float]] = None


class GridBlock(_Strict):
    h: float = 1 / 64
    lo: Optional[list[float]] = None
    hi: Optional[list[float]] = None


class MCBlock(_Strict):
    dt: float = 1e-3
    n_paths: int = 10_000
    seed: int = 0
    x0: list[list[float]] = Field(default_factory=lambda: [[0.0, 0.0]])
    antithetic: bool = False


class SolverBlock(_Strict):
    tol: float = 1e-8
    max_outer: int = 100
    mode: Literal["implicit", "explicit"] = "implicit"
    converged: bool = False


class ParabolicBlock(_Strict):
    t: float = 0.3
    dt: float = 1e-3
    terminal: Optional[str] = None
    # lags in time steps for the (t, x) modulus report; skipped when unset
    joint_lags: Optional[list[int]] = None
    lipschitz: Optional[float] = None


class DiscountedBlock(_Strict):
    rho: Optional[float] = None
    horizon_cut: Optional[float] = None
    tail_tol: float = 1e-3


class DppBlock(_Strict):
    intermediate: Literal["zero", "time", "exit"] = "exit"
    radius: float = 0.5
    s: float = 0.1
    horizon: float = 0.3
    tol: float = 0.02


class SemigroupBlock(_Strict):
    t: float = 0.15
    s: float = 0.15
    dt: float = 1e-3
    terminal: Optional[str] = None
    c_tol: float = 1.0


class HolderBlock(_Strict):
    source: Literal["semigroup", "elliptic"] = "semigroup"
    times: list[float] = Field(default_factory=lambda: [0.0, 0.05, 0.1, 0.2])
    dt: float = 1e-3
    scales: Optional[list[float]] = None
    terminal: str = "half_space"


class BoundaryBlock(_Strict):
    anchors: list[list[float]] = Field(default_factory=lambda: [[1.0, 0.0]])
    radii: list[float] = Field(default_factory=lambda: [1 / 32, 1 / 16, 1 / 8])
    lipschitz: Optional[float] = None


class StabilityBlock(_Strict):
    kind: Literal["mollify", "oscillate", "identity"] = "mollify"
    ms: list[int] = Field(default_factory=lambda: [4, 8, 16, 32])
    amplitude: float = 1.0


class CounterexampleBlock(_Strict):
    d: int = 2
    eps: list[float] = Field(default_factory=lambda: [1.0])
    truncations: list[float] = Field(default_factory=lambda: [10.0, 100.0, 1000.0])
    dt: float = 1e-4
    n_paths: int = 10_000
    horizon: float = 1.0


class AcceptanceBlock(_Strict):
    profile: Literal["full", "quick"] = "full"
    only: Optional[list[int]] = None


class ExperimentConfig(_Strict):
    version: int = 1
    problem: ProblemBlock = Field(default_factory=lambda: ProblemBlock(preset="laplacian"))
    domain: DomainBlock = Field(default_factory=DomainBlock)
    grid: GridBlock = Field(default_factory=GridBlock)
    mc: MCBlock = Field(default_factory=MCBlock)
    solver: SolverBlock = Field(default_factory=SolverBlock)
    parabolic: ParabolicBlock = Field(default_factory=ParabolicBlock)
    discounted: DiscountedBlock = Field(default_factory=DiscountedBlock)
    dpp: DppBlock = Field(default_factory=DppBlock)
    semigroup: SemigroupBlock = Field(default_factory=SemigroupBlock)
    holder: HolderBlock = Field(default_factory=HolderBlock)
    boundary: BoundaryBlock = Field(default_factory=BoundaryBlock)
    stability: StabilityBlock = Field(default_factory=StabilityBlock)
    counterexample: CounterexampleBlock = Field(default_factory=CounterexampleBlock)
    acceptance: AcceptanceBlock = Field(default_factory=AcceptanceBlock)


def _locate(text: str, loc: tuple) -> tuple[int | None, int | None]:
    """Best-effort line/column of the key named by a validation error location."""
    keys = [k for k in loc if isinstance(k, str)]
    if not keys:
        return None, None
    lines = text.splitlines()
    table: list[str] = []
    for i, raw in enumerate(lines):
        line = raw.split("#", 1)[0].strip()
        m = re.match(r"^\[\s*([^\]]+?)\s*\]$", line)
        if m:
            table = [p.strip() for p in m.group(1).split(".")]
            if table == keys:
                return i + 1, 1
            continue
        m = re.match(r"^([A-Za-z0-9_\-\.\"]+)\s*=", line)
        if not m:
            continue
        path = table + [p.strip('"') for p in m.group(1).split(".")]
        if path == keys or (len(path) < len(keys) and keys[:len(path)] == path):
            return i + 1, raw.index(m.group(1)[0]) + 1
    # a missing key is reported at its table header
    for i, raw in enumerate(lines):
        if re.match(r"^\s*\[\s*" + re.escape(".".join(keys[:-1])) + r"\s*\]", raw):
            return i + 1, 1
    return None, None


def parse_config(text: str) -> ExperimentConfig:
    try:
        raw = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        m = re.search(r"line (\d+), column (\d+)", str(exc))
        line, col = (int(m.group(1)), int(m.group(2))) if m else (None, None)
        raise ConfigError(f"config parse error: {str(exc).split(' (at')[0]}", line, col) from None
    try:
        return ExperimentConfig.model_validate(raw)
    except ValidationError as exc:
        err = exc.errors()[0]
        where = ".".join(str(k) for k in err["loc"])
        line, col = _locate(text, err["loc"])
        raise ConfigError(f"config error at {where}: {err['msg']}", line, col) from None


def load_config(path) -> tuple[ExperimentConfig, str]:
    """Parsed config plus the sha256 of the file's bytes."""
    data = Path(path).read_bytes()
    return parse_config(data.decode("utf-8")), hashlib.sha256(data).hexdigest()
