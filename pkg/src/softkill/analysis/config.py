"""Experiment configuration: one JSON document, validated, unknown keys rejected.

Fields ``V``, ``g`` and ``mu0`` are either a preset name or a Fourier
coefficient list::

    {"const": 1.0, "cos": [1.0], "sin": []}

meaning ``const + sum_n cos[n-1] cos(2 pi n x) + sin[n-1] sin(2 pi n x)``.
In two dimensions the same series is applied to ``x1`` and ``x2`` and summed
(the constant is counted once).
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import Dict, List, Optional, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from ..mean_field import ProblemSpec, default_radius
from ..torus import ScalarField, TorusGrid

PRESETS = {
    "zero": {"const": 0.0},
    "one": {"const": 1.0},
    "uniform": {"const": 1.0},
    "cos": {"cos": [1.0]},
    "sin": {"sin": [1.0]},
    "one_plus_cos": {"const": 1.0, "cos": [1.0]},
    "bump": {"const": 1.0, "cos": [0.5]},
}


class FourierSeries(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    const: float = 0.0
    cos: List[float] = Field(default_factory=list)
    sin: List[float] = Field(default_factory=list)

    def sample(self, grid: TorusGrid) -> np.ndarray:
        out = np.full(grid.shape, self.const)
        for axis in grid.nodes:
            for n, c in enumerate(self.cos, start=1):
                out = out + c * np.cos(2 * np.pi * n * axis)
            for n, s in enumerate(self.sin, start=1):
                out = out + s * np.sin(2 * np.pi * n * axis)
        return out


FieldSpec = Union[str, FourierSeries]


def resolve_field(spec: FieldSpec) -> FourierSeries:
    if isinstance(spec, FourierSeries):
        return spec
    if spec not in PRESETS:
        raise ValueError(f"unknown preset {spec!r}; choose from {sorted(PRESETS)}")
    return FourierSeries(**PRESETS[spec])


class ExperimentConfig(BaseModel):
    """All physical and numerical parameters of a run.

    Defaults reproduce the generic suite: ``V = 1 + cos 2 pi x``,
    ``g = sin 2 pi x``, uniform ``mu0``, ``T = 0.5``, ``d = 1``, ``M = 64``.
    """

    model_config = ConfigDict(extra="forbid", frozen=True)

    d: int = 1
    M: int = 64
    V: FieldSpec = "one_plus_cos"
    g: FieldSpec = "sin"
    mu0: FieldSpec = "uniform"
    t0: float = 0.0
    T: float = 0.5
    dt: float = 5e-3
    R: Optional[float] = None
    k: Optional[int] = None
    eps: Optional[float] = None
    picard_tol: float = 1e-10
    picard_max_iter: int = 400
    # particle side
    N_list: List[int] = Field(default_factory=lambda: [8, 16, 32, 64, 128, 256, 512])
    replications: int = 64
    dt_sim: float = 1e-3
    a0: Union[str, List[float]] = "zero"
    seed: int = 0
    # N = 2 exact side
    M_delta: int = 65
    delta0: float = 2.0
    exact_samples: int = 20
    study_exact_samples: int = 4
    # probes
    probe_pairs: int = 20
    probe_scale: float = 0.4
    probe_modes: int = 8
    time_ladder: int = 33
    output_dir: str = "report"

    @field_validator("V", "g", "mu0", mode="before")
    @classmethod
    def _field(cls, v):
        if isinstance(v, str):
            resolve_field(v)
            return v
        return FourierSeries.model_validate(v)

    @field_validator("d")
    @classmethod
    def _dim(cls, v):
        if v not in (1, 2):
            raise ValueError("d must be 1 or 2")
        return v

    @field_validator("M")
    @classmethod
    def _grid(cls, v):
        if v < 8 or v & (v - 1):
            raise ValueError("M must be a power of two >= 8")
        return v

    @field_validator("N_list")
    @classmethod
    def _sweep(cls, v):
        if not v:
            raise ValueError("N_list must not be empty")
        if any(n < 1 for n in v):
            raise ValueError("every N must be positive")
        return sorted(set(v))

    @field_validator("dt", "dt_sim", "T", "picard_tol", "probe_scale")
    @classmethod
    def _positive(cls, v):
        if not v > 0:
            raise ValueError("must be positive")
        return v

    @field_validator("replications", "probe_pairs", "time_ladder", "picard_max_iter")
    @classmethod
    def _count(cls, v):
        if v < 1:
            raise ValueError("must be at least 1")
        return v

    @model_validator(mode="after")
    def _consistent(self):
        if not self.T > self.t0:
            raise ValueError("T must exceed t0")
        for name, step in (("dt", self.dt), ("dt_sim", self.dt_sim)):
            n = (self.T - self.t0) / step
            if abs(n - round(n)) > 1e-6 * max(1.0, n):
                raise ValueError(f"{name}={step} does not divide [t0, T]")
        if isinstance(self.a0, str) and self.a0 != "zero":
            raise ValueError("a0 must be 'zero' or a list of clocks")
        return self

    # ------------------------------------------------------------------

    @property
    def grid(self) -> TorusGrid:
        return TorusGrid(self.d, self.M)

    def field(self, name: str) -> ScalarField:
        return ScalarField(self.grid, resolve_field(getattr(self, name)).sample(self.grid))

    def problem(self, dt: float | None = None) -> ProblemSpec:
        """Problem data; without an explicit ``R`` the crude over-estimate
        :func:`default_radius` is used (truncation inactive in practice)."""
        V, g = self.field("V"), self.field("g")
        R = default_radius(V, g, self.t0, self.T) if self.R is None else self.R
        return ProblemSpec(V, g, t0=self.t0, T=self.T, dt=self.dt if dt is None else dt, R=R)

    def initial_density(self) -> ScalarField:
        mu = self.field("mu0")
        if mu.values.min() < 0:
            raise ValueError("mu0 must be nonnegative")
        return ScalarField(self.grid, mu.values / mu.values.mean())

    def clocks(self, N: int) -> np.ndarray:
        """Initial clocks for ``N`` particles; a short list is padded with zeros."""
        if isinstance(self.a0, str):
            return np.zeros(N)
        a = np.zeros(N)
        m = min(N, len(self.a0))
        a[:m] = self.a0[:m]
        return a

    def picard_options(self) -> Dict[str, float]:
        return {"tol": self.picard_tol, "max_iter": self.picard_max_iter}

    def with_overrides(self, **changes) -> "ExperimentConfig":
        data = self.model_dump()
        data.update({k: v for k, v in changes.items() if v is not None})
        return ExperimentConfig.model_validate(data)


def load_config(path: str | Path | None = None, **overrides) -> ExperimentConfig:
    data = {}
    if path is not None:
        with open(path, encoding="utf-8") as fh:
            data = json.load(fh)
    data.update({k: v for k, v in overrides.items() if v is not None})
    return ExperimentConfig.model_validate(data)


def config_schema() -> dict:
    return ExperimentConfig.model_json_schema()
