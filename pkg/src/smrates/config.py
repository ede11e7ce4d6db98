"""Experiment configuration: one self-describing JSON file per run.

The file carries the kernel, the rate model, the solver discretization,
and per-command parameter blocks; the CLI only adds the command name,
the output directory, and an optional seed override.  Parsing errors
raise ConfigError with the offending field path (or JSON line/column),
which the CLI maps to exit code 2.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError
from .moment_engine import SolverConfig
from .rate_models import (
    CIR,
    HULL_WHITE,
    VASICEK,
    CIRParams,
    HullWhiteParams,
    PiecewiseLinear,
    RegimeRateModel,
    VasicekParams,
)
from .semi_markov import SemiMarkovKernel
from .sojourn import SojournDistribution


def _need(mapping: dict, key: str, path: str):
    if key not in mapping:
        raise ConfigError(f"field {path}.{key}: missing")
    return mapping[key]


def parse_kernel(spec: dict, path: str = "kernel") -> SemiMarkovKernel:
    states = _need(spec, "states", path)
    p_matrix = _need(spec, "P", path)
    sojourns_raw = _need(spec, "sojourns", path)
    m = len(states)
    if not (isinstance(p_matrix, list) and len(p_matrix) == m
            and all(isinstance(row, list) and len(row) == m for row in p_matrix)):
        raise ConfigError(f"field {path}.P: must be a {m}x{m} matrix")
    sojourns = []
    for i, row in enumerate(sojourns_raw):
        parsed_row = []
        for j, entry in enumerate(row):
            if entry is None:
                parsed_row.append(None)
                continue
            try:
                parsed_row.append(SojournDistribution.from_dict(entry))
            except (ValueError, KeyError, TypeError) as exc:
                raise ConfigError(f"field {path}.sojourns[{i}][{j}]: {exc}") from exc
        sojourns.append(parsed_row)
    try:
        return SemiMarkovKernel(p_matrix, sojourns, states=states)
    except ValueError as exc:
        raise ConfigError(f"field {path}: {exc}") from exc


def _parse_table(entry, path: str) -> PiecewiseLinear:
    try:
        if isinstance(entry, (int, float)):
            return PiecewiseLinear.constant(float(entry))
        return PiecewiseLinear(entry["ts"], entry["vs"])
    except (ValueError, KeyError, TypeError) as exc:
        raise ConfigError(f"field {path}: {exc}") from exc


def parse_model(spec: dict, path: str = "model") -> RegimeRateModel:
    kind = _need(spec, "kind", path)
    params = _need(spec, "params", path)
    try:
        if kind == VASICEK:
            return RegimeRateModel.vasicek(
                [VasicekParams(p["a"], p["b"], p["sigma"]) for p in params]
            )
        if kind == CIR:
            return RegimeRateModel.cir(
                [CIRParams(p["a"], p["b"], p["sigma"]) for p in params]
            )
        if kind == HULL_WHITE:
            return RegimeRateModel.hull_white([
                HullWhiteParams(
                    _parse_table(p["alpha"], f"{path}.params[{i}].alpha"),
                    _parse_table(p["beta"], f"{path}.params[{i}].beta"),
                    _parse_table(p["sigma"], f"{path}.params[{i}].sigma"),
                )
                for i, p in enumerate(params)
            ])
    except ConfigError:
        raise
    except (ValueError, KeyError, TypeError) as exc:
        raise ConfigError(f"field {path}.params: {exc}") from exc
    raise ConfigError(f"field {path}.kind: unknown model kind {kind!r}")


def parse_solver(spec: dict, path: str = "solver") -> SolverConfig:
    known = {f for f in SolverConfig.__dataclass_fields__}
    unknown = set(spec) - known
    if unknown:
        raise ConfigError(f"field {path}: unknown keys {sorted(unknown)}")
    try:
        return SolverConfig(**spec)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"field {path}: {exc}") from exc


@dataclass
class ExperimentConfig:
    """Parsed experiment: model objects plus per-command parameter blocks."""

    kernel: SemiMarkovKernel
    model: RegimeRateModel
    solver: SolverConfig
    seed: int
    phi: dict = field(default_factory=dict)
    moments: dict = field(default_factory=dict)
    simulate: dict = field(default_factory=dict)
    validate: dict = field(default_factory=dict)
    raw: dict = field(default_factory=dict)

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentConfig":
        if not isinstance(data, dict):
            raise ConfigError("top level: config must be a JSON object")
        kernel = parse_kernel(_need(data, "kernel", "top level"))
        model = parse_model(_need(data, "model", "top level"))
        solver = parse_solver(data.get("solver", {}))
        if kernel.m != model.n_states:
            raise ConfigError(
                f"field model.params: {model.n_states} states but the kernel has {kernel.m}"
            )
        seed = data.get("seed", 0)
        if not isinstance(seed, int) or seed < 0:
            raise ConfigError("field seed: must be a nonnegative integer")
        cfg = cls(
            kernel=kernel, model=model, solver=solver, seed=seed,
            phi=dict(data.get("phi", {})),
            moments=dict(data.get("moments", {})),
            simulate=dict(data.get("simulate", {})),
            validate=dict(data.get("validate", {})),
            raw=data,
        )
        cfg._check_cross_fields()
        return cfg

    @classmethod
    def from_file(cls, path) -> "ExperimentConfig":
        try:
            with open(path, encoding="utf-8") as fh:
                data = json.load(fh)
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(
                f"config {path}: line {exc.lineno}, column {exc.colno}: {exc.msg}"
            ) from exc
        return cls.from_dict(data)

    def _check_cross_fields(self):
        horizon = self.solver.horizon
        for block, key in (
            (self.moments, "maturities"),
            (self.validate, "maturities"),
        ):
            for s in block.get(key, []):
                if s > horizon + 1e-12:
                    raise ConfigError(
                        f"field {key}: maturity {s} exceeds the solver horizon {horizon}"
                    )
        for block in (self.phi, self.moments, self.simulate, self.validate):
            for age_key in ("age", "ages"):
                ages = block.get(age_key)
                if ages is None:
                    continue
                for u in np.atleast_1d(ages):
                    for i in range(self.kernel.m):
                        if float(self.kernel.holding_cdf(i, float(u))) >= 1.0 - 1e-12:
                            raise ConfigError(
                                f"field {age_key}: age {u} saturates state {i}"
                            )

    def config_hash(self) -> str:
        canon = json.dumps(self.raw, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canon.encode("utf-8")).hexdigest()[:16]

    def with_seed(self, seed: int) -> "ExperimentConfig":
        raw = dict(self.raw)
        raw["seed"] = int(seed)
        return ExperimentConfig.from_dict(raw)
