"""Toy potentials and Langevin integrators producing reference trajectories.

Configurations have shape ``(n_particles, dim)``; energy and force functions
also accept leading batch axes ``(..., n_particles, dim)``.  All simulator
arithmetic is double precision.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np

from .errors import InputError, IntegrationError

_NOISE_CHUNK = 1024


# ---------------------------------------------------------------------------
# potentials
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Harmonic:
    """U(x) = theta/2 * |x - center|^2, summed over all coordinates."""

    theta: float = 1.0
    center: float = 0.0
    n_particles: int = 1
    dim: int = 1

    kind = "harmonic"
    translation_invariant = False

    def energy(self, x: np.ndarray) -> np.ndarray:
        d = x - self.center
        return 0.5 * self.theta * np.sum(d * d, axis=(-2, -1))

    def force(self, x: np.ndarray) -> np.ndarray:
        return -self.theta * (x - self.center)


@dataclass(frozen=True)
class DoubleWell:
    """U(x) = a (x^2 - b)^2 per coordinate; minima at +-sqrt(b), barrier a*b^2."""

    a: float = 1.0
    b: float = 1.0
    n_particles: int = 1
    dim: int = 1

    kind = "double_well"
    translation_invariant = False

    @property
    def barrier_height(self) -> float:
        return self.a * self.b ** 2

    def energy(self, x: np.ndarray) -> np.ndarray:
        q = x * x - self.b
        return self.a * np.sum(q * q, axis=(-2, -1))

    def force(self, x: np.ndarray) -> np.ndarray:
        return -4.0 * self.a * x * (x * x - self.b)


_MB_A = np.array([-200.0, -100.0, -170.0, 15.0])
_MB_a = np.array([-1.0, -1.0, -6.5, 0.7])
_MB_b = np.array([0.0, 0.0, 11.0, 0.6])
_MB_c = np.array([-10.0, -10.0, -6.5, 0.7])
_MB_X0 = np.array([1.0, 0.0, -0.5, -1.0])
_MB_Y0 = np.array([0.0, 0.5, 1.5, 1.0])


@dataclass(frozen=True)
class MuellerBrown:
    """Standard four-Gaussian Mueller-Brown surface, multiplied by ``scale``."""

    scale: float = 1.0
    n_particles: int = 1
    dim: int = 2

    kind = "mueller_brown"
    translation_invariant = False

    def _terms(self, x: np.ndarray):
        dx = x[..., 0:1] - _MB_X0
        dy = x[..., 1:2] - _MB_Y0
        e = _MB_A * np.exp(_MB_a * dx * dx + _MB_b * dx * dy + _MB_c * dy * dy)
        return dx, dy, e

    def energy(self, x: np.ndarray) -> np.ndarray:
        _, _, e = self._terms(x)
        return self.scale * np.sum(e, axis=(-2, -1))

    def force(self, x: np.ndarray) -> np.ndarray:
        dx, dy, e = self._terms(x)
        gx = np.sum(e * (2 * _MB_a * dx + _MB_b * dy), axis=-1)
        gy = np.sum(e * (_MB_b * dx + 2 * _MB_c * dy), axis=-1)
        return -self.scale * np.stack([gx, gy], axis=-1)


@dataclass(frozen=True)
class BeadChain:
    """Coarse-grained chain: harmonic bonds plus Gaussian attractive contacts.

    ``contacts`` lists bead pairs (i, j) that attract each other with a
    Gaussian well of depth ``eps_c`` and width ``sigma_c`` centred at
    ``contact_distance``.  The designed contacts define the folded basin.
    """

    n_particles: int = 8
    dim: int = 3
    k_bond: float = 100.0
    r0: float = 1.0
    contacts: tuple[tuple[int, int], ...] = ((0, 7), (1, 6), (2, 5))
    eps_c: float = 2.0
    sigma_c: float = 0.3
    contact_distance: float = 1.0

    kind = "bead_chain"
    translation_invariant = True

    def __post_init__(self):
        object.__setattr__(self, "contacts", tuple(tuple(int(v) for v in c) for c in self.contacts))
        for i, j in self.contacts:
            if not (0 <= i < self.n_particles and 0 <= j < self.n_particles and i != j):
                raise InputError(f"contact ({i}, {j}) outside chain of {self.n_particles} beads")

    def _contact_index(self):
        if not self.contacts:
            return np.zeros(0, dtype=int), np.zeros(0, dtype=int)
        c = np.asarray(self.contacts)
        return c[:, 0], c[:, 1]

    def energy(self, x: np.ndarray) -> np.ndarray:
        bond = x[..., 1:, :] - x[..., :-1, :]
        r = np.linalg.norm(bond, axis=-1)
        u = 0.5 * self.k_bond * np.sum((r - self.r0) ** 2, axis=-1)
        ci, cj = self._contact_index()
        if ci.size:
            rc = np.linalg.norm(x[..., cj, :] - x[..., ci, :], axis=-1)
            w = np.exp(-((rc - self.contact_distance) ** 2) / (2 * self.sigma_c ** 2))
            u = u - self.eps_c * np.sum(w, axis=-1)
        return u

    def force(self, x: np.ndarray) -> np.ndarray:
        f = np.zeros_like(x, dtype=np.float64)
        bond = x[..., 1:, :] - x[..., :-1, :]
        r = np.linalg.norm(bond, axis=-1, keepdims=True)
        g = self.k_bond * (r - self.r0) * bond / r  # dU/dx_{i+1}
        f[..., 1:, :] -= g
        f[..., :-1, :] += g
        ci, cj = self._contact_index()
        if ci.size:
            d = x[..., cj, :] - x[..., ci, :]
            rc = np.linalg.norm(d, axis=-1, keepdims=True)
            w = np.exp(-((rc - self.contact_distance) ** 2) / (2 * self.sigma_c ** 2))
            gc = self.eps_c * w * (rc - self.contact_distance) / self.sigma_c ** 2 * d / rc
            fp = np.moveaxis(f, -2, 0)
            np.add.at(fp, cj, -np.moveaxis(gc, -2, 0))
            np.add.at(fp, ci, np.moveaxis(gc, -2, 0))
        return f


PotentialSpec = Harmonic | DoubleWell | MuellerBrown | BeadChain

POTENTIALS = {cls.kind: cls for cls in (Harmonic, DoubleWell, MuellerBrown, BeadChain)}


def potential_from_dict(d: dict) -> PotentialSpec:
    d = dict(d)
    kind = d.pop("kind", None)
    if kind not in POTENTIALS:
        raise InputError(f"unknown potential kind {kind!r}; expected one of {sorted(POTENTIALS)}")
    if "contacts" in d:
        d["contacts"] = tuple(tuple(c) for c in d["contacts"])
    try:
        return POTENTIALS[kind](**d)
    except TypeError as exc:
        raise InputError(f"bad parameters for {kind}: {exc}") from None


def potential_to_dict(spec: PotentialSpec) -> dict:
    d = asdict(spec)
    if "contacts" in d:
        d["contacts"] = [list(c) for c in d["contacts"]]
    return {"kind": spec.kind, **d}


def _check_config(spec: PotentialSpec, x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim < 2 or x.shape[-2:] != (spec.n_particles, spec.dim):
        raise InputError(
            f"configuration shape {x.shape} does not end with "
            f"(n_particles, dim) = ({spec.n_particles}, {spec.dim})"
        )
    return x


def potential_energy(spec: PotentialSpec, x) -> float | np.ndarray:
    """Potential energy of one configuration (scalar) or a batch (array)."""
    x = _check_config(spec, x)
    u = spec.energy(x)
    return float(u) if np.ndim(u) == 0 else u


def force(spec: PotentialSpec, x) -> np.ndarray:
    """Analytic force -grad U, same shape as ``x``."""
    return spec.force(_check_config(spec, x))


def boltzmann_log_weight(spec: PotentialSpec, x, temperature: float, kB: float = 1.0):
    """Unnormalized log Boltzmann weight -U(x) / (kB T)."""
    if not temperature > 0:
        raise InputError(f"temperature must be positive, got {temperature}")
    return -potential_energy(spec, x) / (kB * temperature)


def ou_transition_moments(theta: float, gamma: float, temperature: float, dt: float,
                          kB: float = 1.0) -> tuple[float, float]:
    """Exact transition moments of overdamped dynamics in a harmonic well.

    Returns the multiplier applied to the displacement from the centre and the
    conditional variance after a lag ``dt``.
    """
    if theta <= 0 or gamma <= 0 or temperature <= 0 or kB <= 0:
        raise InputError("theta, gamma, temperature and kB must be positive")
    if dt < 0:
        raise InputError(f"lag must be non-negative, got {dt}")
    rate = theta / gamma
    decay = math.exp(-rate * dt)
    var = kB * temperature / theta * -math.expm1(-2.0 * rate * dt)
    return decay, var


# ---------------------------------------------------------------------------
# Langevin integration
# ---------------------------------------------------------------------------

INTEGRATORS = ("overdamped", "baoab")


@dataclass(frozen=True)
class LangevinConfig:
    timestep: float = 1e-3
    friction: float = 1.0
    temperature: float = 1.0
    kB: float = 1.0
    seed: int = 0
    n_steps: int = 1000
    save_stride: int = 1
    integrator: str = "overdamped"
    mass: float = 1.0

    def __post_init__(self):
        problems = []
        if not self.timestep > 0:
            problems.append("timestep must be > 0")
        if not self.friction > 0:
            problems.append("friction must be > 0")
        if not self.temperature > 0:
            problems.append("temperature must be > 0")
        if not self.kB > 0:
            problems.append("kB must be > 0")
        if self.save_stride < 1:
            problems.append("save_stride must be >= 1")
        if self.n_steps < 0:
            problems.append("n_steps must be >= 0")
        if self.integrator not in INTEGRATORS:
            problems.append(f"integrator must be one of {INTEGRATORS}")
        if not self.mass > 0:
            problems.append("mass must be > 0")
        if problems:
            raise InputError("; ".join(problems))

    @property
    def frame_interval(self) -> float:
        return self.timestep * self.save_stride


@dataclass
class Trajectory:
    frames: np.ndarray  # (M, n_particles, dim)
    frame_interval: float
    system_id: str = ""
    temperature: float = 1.0

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.float64)
        if self.frames.ndim != 3:
            raise InputError(f"frames must be (M, n_particles, dim), got shape {self.frames.shape}")
        if not self.frame_interval > 0:
            raise InputError("frame_interval must be positive")

    def __len__(self) -> int:
        return self.frames.shape[0]

    @property
    def n_particles(self) -> int:
        return self.frames.shape[1]

    @property
    def dim(self) -> int:
        return self.frames.shape[2]

    def subsample(self, stride: int) -> "Trajectory":
        return Trajectory(self.frames[::stride].copy(), self.frame_interval * stride,
                          self.system_id, self.temperature)


def simulate_langevin(spec: PotentialSpec, config: LangevinConfig, x0,
                      system_id: str = "") -> Trajectory:
    """Integrate one trajectory from ``x0``; bit-reproducible for a fixed seed."""
    x0 = _check_config(spec, x0)
    if x0.ndim != 2:
        raise InputError("simulate_langevin takes a single configuration")
    rng = np.random.default_rng(config.seed)
    frames = _integrate(spec, config, x0[None], [rng], np.array([config.temperature]))
    return Trajectory(frames[:, 0], config.frame_interval, system_id, config.temperature)


def ensemble_seeds(seed: int, n: int) -> list[np.random.SeedSequence]:
    """Independent per-member seed sequences derived from one root seed."""
    return [np.random.SeedSequence(seed, spawn_key=(i,)) for i in range(n)]


def simulate_ensemble(spec: PotentialSpec, config: LangevinConfig, x0s,
                      temperatures: Sequence[float] | None = None,
                      system_id: str = "") -> list[Trajectory]:
    """Integrate independent trajectories together, one RNG stream per member.

    Member ``i`` draws its noise from ``SeedSequence(config.seed, spawn_key=(i,))``,
    so its trajectory does not depend on which other members share the batch.
    ``temperatures`` overrides ``config.temperature`` per member.
    """
    x0s = _check_config(spec, x0s)
    if x0s.ndim != 3:
        raise InputError("x0s must have shape (n_members, n_particles, dim)")
    n = x0s.shape[0]
    temps = np.full(n, config.temperature) if temperatures is None else np.asarray(temperatures, float)
    if temps.shape != (n,) or np.any(temps <= 0):
        raise InputError("temperatures must be positive, one per member")
    rngs = [np.random.default_rng(s) for s in ensemble_seeds(config.seed, n)]
    frames = _integrate(spec, config, x0s, rngs, temps)
    return [Trajectory(frames[:, i], config.frame_interval, system_id, float(temps[i])) for i in range(n)]


def _integrate(spec, config: LangevinConfig, x0: np.ndarray, rngs, temps: np.ndarray) -> np.ndarray:
    n_members, n_part, dim = x0.shape
    n_saved = config.n_steps // config.save_stride + 1
    out = np.empty((n_saved, n_members, n_part, dim))
    out[0] = x0
    if not np.isfinite(x0).all():
        raise IntegrationError("non-finite initial configuration", 0)
    kT = (config.kB * temps)[:, None, None]
    tau, gam = config.timestep, config.friction
    x = x0.copy()
    baoab = config.integrator == "baoab"
    if baoab:
        m = config.mass
        v = np.stack([r.standard_normal((n_part, dim)) for r in rngs]) * np.sqrt(kT / m)
        c1 = math.exp(-gam * tau)
        c2 = np.sqrt(kT / m * (1.0 - c1 * c1))
        f = spec.force(x)
    else:
        drift = tau / gam
        amp = np.sqrt(2.0 * kT * tau / gam)
    noise = None
    saved = 1
    for step in range(1, config.n_steps + 1):
        k = (step - 1) % _NOISE_CHUNK
        if k == 0:
            size = min(_NOISE_CHUNK, config.n_steps - step + 1)
            noise = np.stack([r.standard_normal((size, n_part, dim)) for r in rngs], axis=1)
        xi = noise[k]
        if baoab:
            v = v + (0.5 * tau / m) * f
            x = x + 0.5 * tau * v
            v = c1 * v + c2 * xi
            x = x + 0.5 * tau * v
            f = spec.force(x)
            v = v + (0.5 * tau / m) * f
        else:
            x = x + drift * spec.force(x) + amp * xi
        if not np.isfinite(x).all():
            raise IntegrationError("integration blew up: non-finite configuration", step)
        if step % config.save_stride == 0:
            out[saved] = x
            saved += 1
    return out
