"""Run configuration: JSON schema, validation and shipped presets.

A run config is one JSON object with the sections below.  Every section is
optional except ``system``; missing fields take the documented defaults.

``seed``      root seed for every stage (int)
``system``    ``potential`` (kind plus parameters), ``langevin`` (integrator
              settings without temperature/seed), ``temperatures`` (list),
              ``n_trajectories`` per temperature, ``initial_states`` (list of
              ``n x dim`` configurations, cycled), optional ``tokens``
``data``      ``paths`` (trajectory files; default: the simulate stage output),
              ``dt_max`` in frames
``model``     :class:`~itolab.model.ModelConfig` fields
``train``     :class:`~itolab.training.TrainConfig` fields except ``dt_max``
``sample``    ODE steps, rollout lag (frames of the training data), ensemble
              size, rollout length ``n_steps``, tail window, chunk size
``analyze``   projection, reference, bins, TICA/MSM settings
``sweep``     temperatures, rollout length and burn-in for rate estimation
"""

from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import dataclass, field, fields
from typing import Any

import numpy as np

from .errors import ConfigError, InputError
from .model import ModelConfig
from .systems import LangevinConfig, PotentialSpec, potential_from_dict
from .training import TrainConfig


@dataclass(frozen=True)
class SystemSection:
    potential: PotentialSpec
    langevin: LangevinConfig
    temperatures: tuple[float, ...] = (1.0,)
    n_trajectories: int = 8
    initial_states: tuple = ()
    tokens: tuple[str, ...] | None = None

    @property
    def n_particles(self) -> int:
        return self.potential.n_particles

    @property
    def dim(self) -> int:
        return self.potential.dim

    @property
    def token_list(self) -> tuple[str, ...]:
        return self.tokens if self.tokens is not None else ("P",) * self.n_particles


@dataclass(frozen=True)
class DataSection:
    paths: tuple[str, ...] = ()
    dt_max: int = 10


@dataclass(frozen=True)
class SampleSection:
    n_ode_steps: int = 50
    lag_frames: int = 10
    n_rollouts: int = 100
    n_steps: int = 100
    tail_window: int = 10
    n_samples: int = 1000
    chunk_size: int = 256
    recenter: bool = True


@dataclass(frozen=True)
class AnalyzeSection:
    projection: str = "tica"            # "tica" or "coordinates"
    reference: str = "trajectories"     # "trajectories" or "boltzmann"
    fes_components: int = 2
    bins: int = 40
    fes_threshold: float = 1e-3         # boltzmann reference: bins below this mass are unoccupied
    range: tuple[float, float] | None = None
    tica_lag_time: float = 1.0
    n_components: int = 4
    n_clusters: int = 20
    msm_lag_time: float = 1.0
    pcca_tol: float = 0.1
    n_posterior: int = 100


@dataclass(frozen=True)
class SweepSection:
    temperatures: tuple[float, ...] = ()
    n_rollouts: int = 100
    n_steps: int = 1000
    burn_in: int = 0


@dataclass(frozen=True)
class RunConfig:
    seed: int
    system: SystemSection
    data: DataSection = field(default_factory=DataSection)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    sample: SampleSection = field(default_factory=SampleSection)
    analyze: AnalyzeSection = field(default_factory=AnalyzeSection)
    sweep: SweepSection = field(default_factory=SweepSection)
    raw: dict = field(default_factory=dict, compare=False, repr=False)

    @property
    def train_config(self) -> TrainConfig:
        return self.train

    def hash(self) -> str:
        return config_hash(self.raw)


# ---------------------------------------------------------------------------
# validation
# ---------------------------------------------------------------------------

_SECTIONS = ("seed", "system", "data", "model", "train", "sample", "analyze", "sweep")


def _names(cls) -> set[str]:
    return {f.name for f in fields(cls)}


def _build(cls, section: str, values: dict, errors: list[str], exclude=()):
    if not isinstance(values, dict):
        errors.append(f"{section}: must be an object")
        return None
    allowed = _names(cls) - set(exclude)
    for k in sorted(set(values) - allowed):
        errors.append(f"{section}.{k}: unknown field")
    kw = {k: v for k, v in values.items() if k in allowed}
    for f in fields(cls):
        if f.name in kw:
            v = kw[f.name]
            want = f.type if isinstance(f.type, str) else getattr(f.type, "__name__", "")
            if want in ("int",) and (isinstance(v, bool) or not isinstance(v, int)):
                errors.append(f"{section}.{f.name}: expected an integer, got {v!r}")
                return None
            if want in ("float",) and (isinstance(v, bool) or not isinstance(v, (int, float))):
                errors.append(f"{section}.{f.name}: expected a number, got {v!r}")
                return None
            if want in ("bool",) and not isinstance(v, bool):
                errors.append(f"{section}.{f.name}: expected true or false, got {v!r}")
                return None
            if isinstance(v, list):
                kw[f.name] = tuple(tuple(x) if isinstance(x, list) else x for x in v)
    try:
        obj = cls(**kw)
    except (InputError, TypeError, ValueError) as exc:
        errors.extend(f"{section}: {msg.strip()}" for msg in str(exc).split(";"))
        return None
    return obj


def _check_sections(cfg: RunConfig, errors: list[str]) -> None:
    s = cfg.sample
    checks = [
        (s.n_ode_steps >= 1, "sample.n_ode_steps: must be >= 1"),
        (s.lag_frames >= 1, "sample.lag_frames: must be >= 1"),
        (s.lag_frames <= cfg.data.dt_max, "sample.lag_frames: must not exceed data.dt_max"),
        (s.n_rollouts >= 1, "sample.n_rollouts: must be >= 1"),
        (s.n_steps >= 0, "sample.n_steps: must be >= 0"),
        (1 <= s.tail_window <= s.n_steps + 1, "sample.tail_window: must lie in [1, n_steps + 1]"),
        (s.n_samples >= 1, "sample.n_samples: must be >= 1"),
        (s.chunk_size >= 1, "sample.chunk_size: must be >= 1"),
        (cfg.data.dt_max >= 1, "data.dt_max: must be >= 1"),
    ]
    a = cfg.analyze
    checks += [
        (a.projection in ("tica", "coordinates"), "analyze.projection: must be 'tica' or 'coordinates'"),
        (a.reference in ("trajectories", "boltzmann"), "analyze.reference: must be 'trajectories' or 'boltzmann'"),
        (a.fes_components in (1, 2), "analyze.fes_components: must be 1 or 2"),
        (a.bins >= 2, "analyze.bins: must be >= 2"),
        (0 <= a.fes_threshold < 1, "analyze.fes_threshold: must lie in [0, 1)"),
        (a.range is None or (len(a.range) == 2 and a.range[0] < a.range[1]),
         "analyze.range: must be [low, high] with low < high"),
        (a.tica_lag_time > 0, "analyze.tica_lag_time: must be > 0"),
        (a.n_components >= 1, "analyze.n_components: must be >= 1"),
        (a.n_clusters >= 2, "analyze.n_clusters: must be >= 2"),
        (a.msm_lag_time > 0, "analyze.msm_lag_time: must be > 0"),
        (a.pcca_tol >= 0, "analyze.pcca_tol: must be >= 0"),
        (a.n_posterior >= 2, "analyze.n_posterior: must be >= 2"),
        (not (a.reference == "boltzmann" and a.projection != "coordinates"),
         "analyze.reference: 'boltzmann' requires projection 'coordinates'"),
    ]
    w = cfg.sweep
    checks += [
        (all(t > 0 for t in w.temperatures), "sweep.temperatures: must be positive"),
        (w.n_rollouts >= 1, "sweep.n_rollouts: must be >= 1"),
        (w.n_steps >= 1, "sweep.n_steps: must be >= 1"),
        (0 <= w.burn_in < w.n_steps, "sweep.burn_in: must lie in [0, n_steps)"),
    ]
    sy = cfg.system
    checks += [
        (len(sy.temperatures) >= 1 and all(t > 0 for t in sy.temperatures),
         "system.temperatures: need at least one positive temperature"),
        (sy.n_trajectories >= 1, "system.n_trajectories: must be >= 1"),
        (sy.tokens is None or len(sy.tokens) == sy.n_particles,
         "system.tokens: need one token per particle"),
    ]
    errors.extend(msg for ok, msg in checks if not ok)


def _system(values: Any, errors: list[str]) -> SystemSection | None:
    if not isinstance(values, dict):
        errors.append("system: missing or not an object")
        return None
    allowed = {"potential", "langevin", "temperatures", "n_trajectories", "initial_states", "tokens"}
    for k in sorted(set(values) - allowed):
        errors.append(f"system.{k}: unknown field")
    try:
        pot = potential_from_dict(values.get("potential", {}))
    except (InputError, TypeError, KeyError, ValueError) as exc:
        errors.append(f"system.potential: {exc}")
        return None
    lv = values.get("langevin", {})
    for k in ("temperature", "seed"):
        if isinstance(lv, dict) and k in lv:
            errors.append(f"system.langevin.{k}: set via system.temperatures / seed instead")
    lang = _build(LangevinConfig, "system.langevin", lv, errors, exclude=("temperature", "seed"))
    temps = values.get("temperatures", [1.0])
    if not isinstance(temps, list) or not all(isinstance(t, (int, float)) for t in temps):
        errors.append("system.temperatures: expected a list of numbers")
        return None
    states = values.get("initial_states", [])
    try:
        arr = [np.asarray(s, dtype=float) for s in states]
        for i, a in enumerate(arr):
            if a.shape != (pot.n_particles, pot.dim):
                errors.append(f"system.initial_states[{i}]: expected shape {(pot.n_particles, pot.dim)}, got {a.shape}")
    except (TypeError, ValueError):
        errors.append("system.initial_states: expected a list of n x dim arrays")
    ntraj = values.get("n_trajectories", 8)
    if isinstance(ntraj, bool) or not isinstance(ntraj, int):
        errors.append("system.n_trajectories: expected an integer")
        return None
    tokens = values.get("tokens")
    if lang is None:
        return None
    return SystemSection(pot, lang, tuple(float(t) for t in temps), ntraj,
                         tuple(tuple(map(tuple, s)) for s in states),
                         tuple(tokens) if tokens is not None else None)


def parse_config(raw: dict) -> RunConfig:
    """Validate a config mapping; raises :class:`ConfigError` listing every bad field."""
    if not isinstance(raw, dict):
        raise ConfigError(["<root>: config must be a JSON object"])
    errors: list[str] = []
    for k in sorted(set(raw) - set(_SECTIONS)):
        errors.append(f"{k}: unknown section")
    seed = raw.get("seed", 0)
    if isinstance(seed, bool) or not isinstance(seed, int) or not 0 <= seed < 2 ** 64:
        errors.append("seed: expected an unsigned 64-bit integer")
    system = _system(raw.get("system"), errors)
    data = _build(DataSection, "data", raw.get("data", {}), errors)
    model = _build(ModelConfig, "model", raw.get("model", {}), errors)
    dt_max = data.dt_max if data is not None else 1
    tr = dict(raw.get("train", {})) if isinstance(raw.get("train", {}), dict) else raw.get("train")
    if isinstance(tr, dict):
        if "dt_max" in tr:
            errors.append("train.dt_max: set via data.dt_max instead")
        tr = {**tr, "dt_max": dt_max}
        tr.setdefault("seed", seed if isinstance(seed, int) else 0)
    train = _build(TrainConfig, "train", tr, errors)
    sample = _build(SampleSection, "sample", raw.get("sample", {}), errors)
    analyze = _build(AnalyzeSection, "analyze", raw.get("analyze", {}), errors)
    sweep = _build(SweepSection, "sweep", raw.get("sweep", {}), errors)
    if system is not None:
        # range checks run even when another section failed to build, so one
        # pass reports every violation; broken sections fall back to defaults
        cfg = RunConfig(seed, system, data or DataSection(), model or ModelConfig(),
                        train or TrainConfig(dt_max=dt_max), sample or SampleSection(),
                        analyze or AnalyzeSection(), sweep or SweepSection(), copy.deepcopy(raw))
        _check_sections(cfg, errors)
        if model is not None and system.dim != model.coord_dim:
            errors.append(f"model.coord_dim: must equal the system dimension {system.dim}")
        if not errors:
            return cfg
    raise ConfigError(errors)


def config_hash(raw: dict) -> str:
    """SHA-256 of the canonical JSON form (insensitive to key order and whitespace)."""
    text = json.dumps(raw, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


def _merge(base: dict, over: dict) -> dict:
    out = dict(base)
    for k, v in over.items():
        same_kind = k != "potential" or v.get("kind", out.get(k, {}).get("kind")) == out.get(k, {}).get("kind")
        if isinstance(v, dict) and isinstance(out.get(k), dict) and same_kind:
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


def load_config(path=None, preset: str | None = None, seed: int | None = None) -> RunConfig:
    """Read a JSON file and/or a preset; file sections override preset sections."""
    raw: dict = {}
    if preset is not None:
        if preset not in PRESETS:
            raise ConfigError([f"preset: unknown preset {preset!r}; choose from {sorted(PRESETS)}"])
        raw = copy.deepcopy(PRESETS[preset])
    if path is not None:
        with open(path) as fh:
            try:
                user = json.load(fh)
            except json.JSONDecodeError as exc:
                raise ConfigError([f"{path}: not valid JSON ({exc})"]) from None
        if not isinstance(user, dict):
            raise ConfigError([f"{path}: top level must be an object"])
        raw = _merge(raw, user)
    if not raw:
        raise ConfigError(["<root>: no config given (use --config and/or --preset)"])
    if seed is not None:
        raw["seed"] = seed
        if isinstance(raw.get("train"), dict):
            raw["train"].pop("seed", None)
    return parse_config(raw)


# ---------------------------------------------------------------------------
# presets
# ---------------------------------------------------------------------------

PRESETS: dict[str, dict] = {
    "ou": {
        "seed": 0,
        "system": {
            "potential": {"kind": "harmonic", "theta": 1.0, "center": 0.0},
            "langevin": {"timestep": 0.0025, "friction": 1.0, "n_steps": 20000, "save_stride": 10},
            "temperatures": [1.0],
            "n_trajectories": 16,
            "initial_states": [[[-1.0]], [[1.0]]],
        },
        "data": {"dt_max": 32},
        "model": {"coord_dim": 1},
        "train": {"n_steps": 2000, "batch_size": 128},
        "sample": {"n_ode_steps": 50, "lag_frames": 16, "n_rollouts": 64, "n_steps": 50,
                   "tail_window": 10, "n_samples": 1000},
        "analyze": {"projection": "coordinates", "reference": "boltzmann", "fes_components": 1,
                    "bins": 30, "range": [-3.0, 3.0], "tica_lag_time": 0.4, "msm_lag_time": 0.4,
                    "n_clusters": 10, "pcca_tol": 0.0, "n_posterior": 20},
        "sweep": {"temperatures": [0.8, 1.0, 1.2], "n_rollouts": 32, "n_steps": 200, "burn_in": 20},
    },
    "double_well": {
        "seed": 0,
        "system": {
            "potential": {"kind": "double_well", "a": 2.0, "b": 1.0},
            "langevin": {"timestep": 0.001, "friction": 1.0, "n_steps": 100000, "save_stride": 50},
            "temperatures": [0.8, 1.2],
            "n_trajectories": 16,
            "initial_states": [[[-1.0]], [[1.0]]],
        },
        "data": {"dt_max": 10},
        "model": {"coord_dim": 1},
        "train": {"n_steps": 20000, "batch_size": 256, "lr_decay_every": 7000, "lr_decay_factor": 0.3},
        "sample": {"n_ode_steps": 50, "lag_frames": 10, "n_rollouts": 1000, "n_steps": 1000,
                   "tail_window": 10, "n_samples": 1000},
        "analyze": {"projection": "coordinates", "reference": "boltzmann", "fes_components": 1,
                    "bins": 40, "range": [-2.0, 2.0], "tica_lag_time": 0.5, "msm_lag_time": 0.5,
                    "n_clusters": 20, "n_posterior": 100},
        "sweep": {"temperatures": [0.6, 0.8, 1.0, 1.2, 1.4], "n_rollouts": 200, "n_steps": 1000,
                  "burn_in": 10},
    },
    "mueller_brown": {
        "seed": 0,
        "system": {
            "potential": {"kind": "mueller_brown", "scale": 0.1},
            "langevin": {"timestep": 1e-4, "friction": 1.0, "n_steps": 200000, "save_stride": 100},
            "temperatures": [1.0],
            "n_trajectories": 16,
            "initial_states": [[[-0.558, 1.442]], [[0.623, 0.028]]],
        },
        "data": {"dt_max": 10},
        "model": {"coord_dim": 2},
        "train": {"n_steps": 5000, "batch_size": 128},
        "sample": {"n_ode_steps": 50, "lag_frames": 10, "n_rollouts": 200, "n_steps": 200,
                   "tail_window": 10, "n_samples": 1000},
        "analyze": {"projection": "coordinates", "reference": "boltzmann", "fes_components": 2,
                    "bins": 25, "tica_lag_time": 0.1, "msm_lag_time": 0.1, "n_clusters": 20},
        "sweep": {"temperatures": [0.8, 1.0, 1.2], "n_rollouts": 64, "n_steps": 500, "burn_in": 10},
    },
    "bead_chain_8": {
        "seed": 0,
        "system": {
            "potential": {"kind": "bead_chain", "n_particles": 8, "dim": 3},
            "langevin": {"timestep": 5e-4, "friction": 1.0, "n_steps": 100000, "save_stride": 100},
            "temperatures": [1.0],
            "n_trajectories": 8,
            "initial_states": [[[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [2.0, 0.0, 0.0], [3.0, 0.0, 0.0],
                                [4.0, 0.0, 0.0], [5.0, 0.0, 0.0], [6.0, 0.0, 0.0], [7.0, 0.0, 0.0]]],
            "tokens": ["A", "B", "C", "D", "D", "C", "B", "A"],
        },
        "data": {"dt_max": 10},
        "model": {"coord_dim": 3},
        "train": {"n_steps": 3000, "batch_size": 64},
        "sample": {"n_ode_steps": 50, "lag_frames": 10, "n_rollouts": 64, "n_steps": 200,
                   "tail_window": 10, "n_samples": 200},
        "analyze": {"projection": "tica", "reference": "trajectories", "fes_components": 2,
                    "bins": 20, "tica_lag_time": 0.5, "msm_lag_time": 0.5, "n_clusters": 20},
        "sweep": {"temperatures": [0.8, 1.0, 1.2], "n_rollouts": 32, "n_steps": 200, "burn_in": 10},
    },
}
