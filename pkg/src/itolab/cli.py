"""Command-line entry point: ``itolab <stage> [--config PATH] [--preset NAME] ...``.

Stages read from and write to ``<out>/<stage>/``; each writes a
``manifest.json`` with the config hash, artifacts and seeds used.  Exit codes:
0 success, 2 configuration error, 3 numerical failure, 4 I/O or format error.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from dataclasses import asdict
from importlib import metadata
from pathlib import Path

import numpy as np

from . import analysis as an
from .config import PRESETS, RunConfig, load_config
from .data import Dataset, SystemMeta, read_trajectory, write_trajectory
from .errors import (AmbiguityError, ConditioningError, ConfigError, FormatError, InputError,
                     IntegrationError, NumericError, SamplingError)
from .sampling import SamplerConfig, ensemble_rollout, sample_transition, temperature_sweep, write_ensemble
from .seeding import derive_seed, stream
from .systems import LangevinConfig, simulate_ensemble
from .training import default_layout, load_train_state, save_train_state, train, write_loss_trace

log = logging.getLogger("itolab")

STAGES = ("simulate", "train", "sample", "rollout", "analyze", "sweep")
EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_IO = 0, 2, 3, 4


def _version() -> str:
    try:
        return metadata.version("artifact")
    except metadata.PackageNotFoundError:
        return "0+unknown"


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------

class Stage:
    """Output directory plus manifest bookkeeping for one stage."""

    def __init__(self, name: str, cfg: RunConfig, out: Path):
        self.name, self.cfg = name, cfg
        self.dir = out / name
        self.dir.mkdir(parents=True, exist_ok=True)
        self.artifacts: list[str] = []
        self.seeds: dict[str, int] = {}
        self.t0 = time.perf_counter()

    def path(self, rel: str) -> Path:
        p = self.dir / rel
        p.parent.mkdir(parents=True, exist_ok=True)
        self.artifacts.append(rel)
        return p

    def finish(self, **extra) -> Path:
        man = {
            "stage": self.name,
            "config_hash": self.cfg.hash(),
            "seed": self.cfg.seed,
            "seeds": self.seeds,
            "artifacts": sorted(set(self.artifacts)),
            "timings": {"seconds": round(time.perf_counter() - self.t0, 3)},
            "version": _version(),
            **extra,
        }
        p = self.dir / "manifest.json"
        p.write_text(json.dumps(man, indent=2, sort_keys=True) + "\n")
        log.info("%s: wrote %d artifacts to %s", self.name, len(man["artifacts"]), self.dir)
        return p


def _tdir(i: int, T: float) -> str:
    return f"T{i}_{T:g}"


def _initial_states(cfg: RunConfig, count: int) -> np.ndarray:
    states = cfg.system.initial_states
    if not states:
        raise ConfigError(["system.initial_states: required for this stage"])
    arr = np.asarray(states, dtype=np.float64)
    return arr[np.arange(count) % len(arr)]


def _meta(cfg: RunConfig) -> SystemMeta:
    return SystemMeta(cfg.system.token_list)


def _frame_interval(cfg: RunConfig) -> float:
    return cfg.system.langevin.frame_interval


def _read_dir(d: Path):
    files = sorted(d.rglob("*.itr"))
    if not files:
        raise FileNotFoundError(f"no trajectory files under {d}")
    return [read_trajectory(f) for f in files]


def _reference_trajectories(cfg: RunConfig, out: Path):
    if cfg.data.paths:
        files = []
        for p in cfg.data.paths:
            pp = Path(p)
            files += sorted(pp.rglob("*.itr")) if pp.is_dir() else [pp]
        return [read_trajectory(f) for f in files]
    return _read_dir(out / "simulate")


def _checkpoint(args, out: Path) -> Path:
    p = Path(args.checkpoint) if args.checkpoint else out / "train" / "model.ckpt"
    if not p.exists():
        raise FileNotFoundError(f"checkpoint {p} not found (run the train stage first)")
    return p


def _by_temperature(trajs) -> dict[float, list]:
    out: dict[float, list] = {}
    for t in trajs:
        out.setdefault(float(t.temperature), []).append(t)
    return dict(sorted(out.items()))


def _flat(frames: np.ndarray) -> np.ndarray:
    return frames.reshape(len(frames), -1)


# ---------------------------------------------------------------------------
# stages
# ---------------------------------------------------------------------------

def cmd_simulate(cfg: RunConfig, out: Path, args) -> None:
    st = Stage("simulate", cfg, out)
    sy = cfg.system
    base = asdict(sy.langevin)
    for i, T in enumerate(sy.temperatures):
        seed = derive_seed(cfg.seed, "simulate", i)
        st.seeds[_tdir(i, T)] = seed
        lcfg = LangevinConfig(**{**base, "temperature": T, "seed": seed})
        x0s = _initial_states(cfg, sy.n_trajectories)
        trajs = simulate_ensemble(sy.potential, lcfg, x0s, system_id=sy.potential.kind)
        for j, tr in enumerate(trajs):
            write_trajectory(st.path(f"{_tdir(i, T)}/traj_{j:04d}.itr"), tr)
    st.finish()


def cmd_train(cfg: RunConfig, out: Path, args) -> None:
    trajs = _reference_trajectories(cfg, out)
    st = Stage("train", cfg, out)
    meta = _meta(cfg)
    ds = Dataset(trajs, [meta] * len(trajs))
    layout = default_layout(ds, cfg.data.dt_max, center=cfg.system.potential.translation_invariant)
    ckdir = st.dir / "checkpoints" if cfg.train.checkpoint_every else None
    state, trace = train(ds, cfg.model, cfg.train, layout=layout, checkpoint_dir=ckdir)
    if ckdir is not None:
        st.artifacts += [f"checkpoints/{p.name}" for p in sorted(ckdir.glob("*.ckpt"))]
    save_train_state(st.path("model.ckpt"), state, cfg.train.seed)
    write_loss_trace(st.path("loss_trace.csv"), trace)
    st.seeds["train"] = cfg.train.seed
    st.finish(n_parameters=state.params.n_parameters(),
              final_loss=float(np.mean([r[1] for r in trace[-100:]])) if trace else None)


def _sampler(cfg: RunConfig, seed: int) -> SamplerConfig:
    s = cfg.sample
    return SamplerConfig(n_ode_steps=s.n_ode_steps, seed=seed, recenter=s.recenter, chunk_size=s.chunk_size)


def cmd_sample(cfg: RunConfig, out: Path, args) -> None:
    state, _ = load_train_state(_checkpoint(args, out))
    st = Stage("sample", cfg, out)
    params, meta = state.params, _meta(cfg)
    lag = cfg.sample.lag_frames * _frame_interval(cfg)
    x0s = np.asarray(cfg.system.initial_states, dtype=np.float64)
    if len(x0s) == 0:
        raise ConfigError(["system.initial_states: required for this stage"])
    nd = x0s[0].size
    rows = []
    for ti, T in enumerate(cfg.system.temperatures):
        for i, x0 in enumerate(x0s):
            rng = stream(cfg.seed, "sample", ti, i)
            batch = np.broadcast_to(x0, (cfg.sample.n_samples,) + x0.shape)
            xs = sample_transition(params, batch, _sampler(cfg, cfg.seed), meta, lag=lag,
                                   temperature=T, rng=rng)
            for k, x in enumerate(xs.reshape(len(xs), -1)):
                rows.append([T, i, k, *x])
    an.write_table(st.path("samples.csv"),
                   {"kind": "transition_samples", "lag": lag, "n_ode_steps": cfg.sample.n_ode_steps,
                    "coordinates": "flattened (particle, dim)"},
                   ["temperature", "initial_state", "sample"] + [f"c{j}" for j in range(nd)], rows)
    st.finish(lag=lag)


def cmd_rollout(cfg: RunConfig, out: Path, args) -> None:
    state, _ = load_train_state(_checkpoint(args, out))
    st = Stage("rollout", cfg, out)
    s = cfg.sample
    lag = s.lag_frames * _frame_interval(cfg)
    x0s = _initial_states(cfg, s.n_rollouts)
    failures = 0
    for ti, T in enumerate(cfg.system.temperatures):
        seed = derive_seed(cfg.seed, "rollout", ti)
        st.seeds[_tdir(ti, T)] = seed
        ens = ensemble_rollout(state.params, x0s, lag, T, s.n_steps, _sampler(cfg, seed), _meta(cfg),
                               workers=args.workers)
        failures += len(ens.failures)
        write_ensemble(st.dir / _tdir(ti, T), ens, lag, T, cfg.system.potential.kind)
        st.artifacts += [str(p.relative_to(st.dir)) for p in sorted((st.dir / _tdir(ti, T)).iterdir())]
    st.finish(lag=lag, failed_trajectories=failures)


class _Projector:
    """Maps frames to analysis coordinates (raw coordinates or TICA components)."""

    def __init__(self, cfg: RunConfig, reference, frame_interval: float):
        a = cfg.analyze
        self.kind = a.projection
        self.tica = None
        if self.kind == "tica":
            lag = max(1, int(round(a.tica_lag_time / frame_interval)))
            feats = [an.default_features(t.frames) for t in reference]
            self.tica = an.tica_fit(feats, lag, a.n_components)

    def __call__(self, frames: np.ndarray) -> np.ndarray:
        if self.tica is None:
            return _flat(frames)
        return an.tica_transform(self.tica, an.default_features(frames))


def _edges(cfg: RunConfig, samples) -> tuple:
    a = cfg.analyze
    if a.range is not None:
        k = min(a.fes_components, samples[0].shape[1])
        return tuple(np.linspace(a.range[0], a.range[1], a.bins + 1) for _ in range(k))
    return an.common_edges(samples, a.bins, a.fes_components)


def _reference_fes(cfg: RunConfig, ref_samples, edges, T):
    a, sy = cfg.analyze, cfg.system
    kB = sy.langevin.kB
    if a.reference == "trajectories":
        return an.free_energy_surface(ref_samples, edges, T, kB, a.fes_components)
    if sy.n_particles != 1 or sy.dim != len(edges):
        raise ConfigError(["analyze.reference: 'boltzmann' needs a single particle whose dimension "
                           "equals analyze.fes_components"])
    pot = sy.potential
    p = an.boltzmann_bin_probabilities(lambda x: pot.energy(x[..., None, :]), edges, T, kB)
    return an.fes_from_probabilities(p, edges, T, kB, threshold=a.fes_threshold)


def _rates(cfg: RunConfig, feats, frame_interval, T, centers, seed):
    a = cfg.analyze
    lag = max(1, int(round(a.msm_lag_time / frame_interval)))
    try:
        return an.two_state_rates(feats, lag, frame_interval, T, centers=centers, seed=seed,
                                  n_posterior=a.n_posterior, gap_tol=a.pcca_tol)
    except (AmbiguityError, InputError) as exc:
        log.warning("T=%g: no two-state rates: %s", T, exc)
        return None


def cmd_analyze(cfg: RunConfig, out: Path, args) -> None:
    ref_all = _by_temperature(_reference_trajectories(cfg, out))
    model_dir = Path(args.model_dir) if args.model_dir else out / "rollout"
    model_all = _by_temperature(_read_dir(model_dir))
    st = Stage("analyze", cfg, out)
    a = cfg.analyze
    rows = []
    for ti, (T, model) in enumerate(model_all.items()):
        ref = ref_all.get(T)
        if ref is None:
            raise InputError(f"no reference trajectories at temperature {T}")
        proj = _Projector(cfg, ref, ref[0].frame_interval)
        ref_x = [proj(t.frames) for t in ref]
        mod_x = [proj(t.frames) for t in model]
        ref_samples = np.concatenate(ref_x)
        if args.model_samples == "all":
            mod_samples = np.concatenate(mod_x)
        else:
            W = cfg.sample.tail_window
            mod_samples = np.concatenate([x[-W:] for x in mod_x])
        edges = _edges(cfg, [ref_samples, mod_samples])
        g_ref = _reference_fes(cfg, ref_samples, edges, T)
        g_mod = an.free_energy_surface(mod_samples, edges, T, cfg.system.langevin.kB, a.fes_components)
        mae, rmse, cov = an.fes_metrics(g_ref, g_mod)
        an.write_fes(st.path(f"fes_reference_{_tdir(ti, T)}.csv"), g_ref, {"source": a.reference})
        an.write_fes(st.path(f"fes_model_{_tdir(ti, T)}.csv"), g_mod, {"source": "model"})
        if proj.tica is not None:
            an.write_matrix(st.path(f"tica_{_tdir(ti, T)}.csv"), proj.tica.eigenvalues[None, :],
                            {"kind": "tica_eigenvalues", "lag_frames": proj.tica.lag})
        seed = derive_seed(cfg.seed, "analyze", ti)
        st.seeds[_tdir(ti, T)] = seed
        centers = an.kmeans(ref_samples, a.n_clusters, seed).centers
        r_ref = _rates(cfg, ref_x, ref[0].frame_interval, T, centers, seed)
        r_mod = _rates(cfg, mod_x, model[0].frame_interval, T, centers, seed)
        nan = float("nan")
        ref_m = r_ref.mean_mfpt if r_ref else nan
        mod_m = r_mod.mean_mfpt if r_mod else nan
        ratio = mod_m / ref_m if r_ref and r_mod else nan
        bias = "" if not np.isfinite(ratio) else ("faster" if ratio < 1 else "slower")
        rows.append([T, mae, rmse, cov, g_mod.n_samples,
                     r_ref.mfpt_01 if r_ref else nan, r_ref.mfpt_10 if r_ref else nan,
                     r_mod.mfpt_01 if r_mod else nan, r_mod.mfpt_10 if r_mod else nan,
                     r_mod.std_01 if r_mod else nan, r_mod.std_10 if r_mod else nan, ratio, bias])
    cols = ["temperature", "mae", "rmse", "coverage", "n_model_samples", "ref_mfpt_01", "ref_mfpt_10",
            "model_mfpt_01", "model_mfpt_10", "model_std_01", "model_std_10", "mfpt_ratio", "model_kinetics"]
    an.write_table(st.path("metrics.csv"),
                   {"kind": "metrics", "energy_units": "kB*T", "time_units": "simulation time",
                    "fes_dims": a.fes_components, "bins": a.bins, "projection": a.projection,
                    "reference": a.reference, "model_samples": args.model_samples,
                    "g_cap": "-kT ln(1/(10 n_model_samples))"}, cols, rows)
    st.finish()


def cmd_sweep(cfg: RunConfig, out: Path, args) -> None:
    state, _ = load_train_state(_checkpoint(args, out))
    st = Stage("sweep", cfg, out)
    w, a = cfg.sweep, cfg.analyze
    temps = w.temperatures or cfg.system.temperatures
    lag = cfg.sample.lag_frames * _frame_interval(cfg)
    x0s = _initial_states(cfg, w.n_rollouts)
    seed = derive_seed(cfg.seed, "sweep")
    st.seeds["sweep"] = seed
    ensembles = temperature_sweep(state.params, x0s, temps, lag, w.n_steps, _sampler(cfg, seed),
                                  _meta(cfg), workers=args.workers)
    feats = {T: [_flat(r.frames[w.burn_in:]) for r in ens.ok] for T, ens in ensembles.items()}
    if a.projection == "tica":
        pooled = [an.default_features(r.frames[w.burn_in:]) for ens in ensembles.values() for r in ens.ok]
        tica = an.tica_fit(pooled, max(1, int(round(a.tica_lag_time / lag))), a.n_components)
        feats = {T: [an.tica_transform(tica, an.default_features(r.frames[w.burn_in:])) for r in ens.ok]
                 for T, ens in ensembles.items()}
    pooled_x = np.concatenate([x for fs in feats.values() for x in fs])
    centers = an.kmeans(pooled_x, a.n_clusters, derive_seed(cfg.seed, "sweep", "kmeans")).centers
    msm_lag = max(1, int(round(a.msm_lag_time / lag)))
    rows, rates, relax = [], [], []
    for T, fs in feats.items():
        r = _rates(cfg, fs, lag, T, centers, derive_seed(cfg.seed, "sweep", "posterior"))
        lam = an.tica_fit(fs, msm_lag, 1).eigenvalues[0]
        kr = -np.log(lam) / (msm_lag * lag) if 0 < lam < 1 else float("nan")
        k = 1.0 / r.mean_mfpt if r else float("nan")
        rates.append(k)
        relax.append(kr)
        nan = float("nan")
        rows.append([T, r.mfpt_01 if r else nan, r.std_01 if r else nan, r.mfpt_10 if r else nan,
                     r.std_10 if r else nan, k, kr, len(ensembles[T].failures),
                     " | ".join(ensembles[T].warnings)])
    an.write_table(st.path("rates.csv"),
                   {"kind": "rates", "time_units": "simulation time", "lag": lag, "msm_lag_frames": msm_lag,
                    "rate": "1 / mean(mfpt_01, mfpt_10)", "relaxation_rate": "-ln(lambda_1) / tau"},
                   ["temperature", "mfpt_01", "std_01", "mfpt_10", "std_10", "rate", "relaxation_rate",
                    "failed_trajectories", "warnings"], rows)
    fits = []
    T_arr = np.asarray(list(feats), dtype=np.float64)
    for name, vals in (("rate", rates), ("relaxation_rate", relax)):
        v = np.asarray(vals)
        if len(v) >= 2 and np.all(np.isfinite(v)) and np.all(v > 0):
            f = an.arrhenius_fit(v, T_arr, cfg.system.langevin.kB)
            fits.append([name, f.ln_A, f.E_a, f.curvature, json.dumps([float(x) for x in f.residuals])])
    an.write_table(st.path("arrhenius.csv"), {"kind": "arrhenius", "model": "ln k = ln A - E_a / (kB T)"},
                   ["quantity", "ln_A", "E_a", "curvature", "residuals"], fits)
    st.finish(temperatures=[float(t) for t in temps])


COMMANDS = {"simulate": cmd_simulate, "train": cmd_train, "sample": cmd_sample,
            "rollout": cmd_rollout, "analyze": cmd_analyze, "sweep": cmd_sweep}
PIPELINE = ("simulate", "train", "rollout", "analyze")


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run config (overrides preset sections)")
    common.add_argument("--preset", choices=sorted(PRESETS), help="start from a shipped preset")
    common.add_argument("--out", default="runs", help="output root (default: runs)")
    common.add_argument("--seed", type=int, help="override the root seed")
    common.add_argument("--workers", type=int, default=1, help="threads for rollouts (results do not depend on it)")
    common.add_argument("--checkpoint", help="model checkpoint (default: <out>/train/model.ckpt)")
    common.add_argument("--model-dir", help="analyze: model trajectories (default: <out>/rollout)")
    common.add_argument("--model-samples", choices=("tail", "all"), default="tail",
                        help="analyze: FES from the tail window of each trajectory or all frames")
    p = argparse.ArgumentParser(prog="itolab", description="Transfer-operator surrogate toolkit.")
    sub = p.add_subparsers(dest="command", required=True)
    for name in STAGES:
        sub.add_parser(name, parents=[common], help=f"run the {name} stage")
    sub.add_parser("pipeline", parents=[common], help="simulate, train, rollout and analyze in sequence")
    return p


def _error(kind: str, exc: BaseException, code: int, fields=None) -> int:
    rec = {"error": kind, "type": type(exc).__name__, "message": str(exc), "exit_code": code}
    if fields:
        rec["fields"] = fields
    print(json.dumps(rec), file=sys.stderr)
    return code


def main(argv=None) -> int:
    logging.basicConfig(level=os.environ.get("ITOLAB_LOG", "WARNING").upper(),
                        format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        if args.workers < 1:
            raise ConfigError(["--workers: must be >= 1"])
        cfg = load_config(args.config, args.preset, args.seed)
        out = Path(args.out)
        stages = PIPELINE if args.command == "pipeline" else (args.command,)
        for name in stages:
            log.info("running %s", name)
            COMMANDS[name](cfg, out, args)
    except ConfigError as exc:
        return _error("config", exc, EXIT_CONFIG, exc.fields)
    except (NumericError, IntegrationError, ConditioningError, FloatingPointError) as exc:
        return _error("numeric", exc, EXIT_NUMERIC)
    except (OSError, FormatError) as exc:
        return _error("io", exc, EXIT_IO)
    except (InputError, SamplingError, ValueError) as exc:
        return _error("config", exc, EXIT_CONFIG)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
