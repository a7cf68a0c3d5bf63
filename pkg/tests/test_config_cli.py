import json
import subprocess
import sys

import numpy as np
import pytest
from hypothesis import given, strategies as st

from itolab.analysis import read_table
from itolab.cli import main
from itolab.config import PRESETS, config_hash, load_config, parse_config
from itolab.errors import ConfigError

TINY_RUN = {
    "system": {"langevin": {"n_steps": 2000, "save_stride": 20}, "n_trajectories": 2},
    "data": {"dt_max": 4},
    "model": {"residue_repr_dim": 8, "cond_dim": 8, "hidden_dim": 8, "n_attention_heads": 2,
              "n_layers_fc": 1, "n_layers_fv": 1, "s_encoding_dim": 4},
    "train": {"n_steps": 5, "batch_size": 8, "lr_decay_every": 0},
    "sample": {"n_ode_steps": 3, "lag_frames": 2, "n_rollouts": 5, "n_steps": 30, "tail_window": 10,
               "n_samples": 7, "chunk_size": 2},
    "analyze": {"n_clusters": 4, "n_posterior": 3},
    "sweep": {"temperatures": [0.8, 1.0], "n_rollouts": 3, "n_steps": 30, "burn_in": 2},
}


@pytest.mark.parametrize("name", sorted(PRESETS))
def test_presets_parse(name):
    cfg = load_config(preset=name)
    assert cfg.model.coord_dim == cfg.system.dim
    assert cfg.train.dt_max == cfg.data.dt_max


def test_all_violations_reported_together():
    raw = json.loads(json.dumps(PRESETS["double_well"]))
    raw["train"]["lr"] = -1
    raw["sample"]["lag_frames"] = 99
    raw["model"]["hidden_dim"] = "wide"
    raw["bogus"] = 1
    with pytest.raises(ConfigError) as info:
        parse_config(raw)
    joined = "\n".join(info.value.fields)
    for name in ("train", "model.hidden_dim", "bogus"):
        assert name in joined
    assert len(info.value.fields) >= 3


def test_missing_system_and_bad_seed():
    with pytest.raises(ConfigError) as info:
        parse_config({"seed": -1})
    assert any(f.startswith("seed") for f in info.value.fields)
    assert any(f.startswith("system") for f in info.value.fields)


@given(st.dictionaries(st.text(max_size=5), st.integers(), max_size=6))
def test_hash_ignores_key_order(d):
    rev = dict(reversed(list(d.items())))
    assert config_hash(d) == config_hash(rev)


def test_user_file_overrides_preset(tmp_path):
    p = tmp_path / "c.json"
    p.write_text(json.dumps({"system": {"langevin": {"n_steps": 10}}, "train": {"lr": 0.01}}))
    cfg = load_config(p, preset="double_well", seed=5)
    assert cfg.system.langevin.n_steps == 10
    assert cfg.system.langevin.timestep == 0.001      # kept from the preset
    assert cfg.train.lr == 0.01 and cfg.seed == 5 and cfg.train.seed == 5


@pytest.fixture(scope="module")
def tiny_run(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "tiny.json"
    cfg.write_text(json.dumps(TINY_RUN))
    out = root / "out"
    common = ["--preset", "double_well", "--config", str(cfg), "--out", str(out)]
    codes = {cmd: main([cmd, *common]) for cmd in ("simulate", "train", "sample", "rollout", "analyze", "sweep")}
    return root, out, common, codes


def test_every_stage_succeeds_and_writes_manifest(tiny_run):
    root, out, _, codes = tiny_run
    assert set(codes.values()) == {0}
    assert sorted(p.name for p in out.iterdir()) == sorted(codes)
    for stage in codes:
        man = json.loads((out / stage / "manifest.json").read_text())
        assert man["stage"] == stage and len(man["config_hash"]) == 64
        for rel in man["artifacts"]:
            assert (out / stage / rel).exists(), rel


def test_analyze_outputs(tiny_run):
    _, out, _, _ = tiny_run
    meta, cols, rows = read_table(out / "analyze" / "metrics.csv")
    assert {"temperature", "mae", "rmse", "coverage", "mfpt_ratio"} <= set(cols)
    assert len(rows) == 2                                      # one per simulated temperature
    assert all(0 <= float(r[cols.index("coverage")]) <= 1 for r in rows)
    _, cols, rows = read_table(out / "sweep" / "rates.csv")
    assert len(rows) == 2


def test_sample_stage_table(tiny_run):
    _, out, _, _ = tiny_run
    _, cols, rows = read_table(out / "sample" / "samples.csv")
    assert len(rows) == 7 * 2 * 2                             # samples x initial states x temperatures


def test_stage_rerun_is_deterministic(tiny_run, tmp_path):
    root, out, common, _ = tiny_run
    other = tmp_path / "again"
    args = [a if a != str(out) else str(other) for a in common]
    assert main(["simulate", *args]) == 0
    a = sorted((out / "simulate").rglob("*.itr"))
    b = sorted((other / "simulate").rglob("*.itr"))
    assert [x.read_bytes() for x in a] == [y.read_bytes() for y in b]


def test_exit_codes(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"train": {"lr": -1}, "sample": {"n_ode_steps": 0}}))
    assert main(["train", "--preset", "double_well", "--config", str(bad), "--out", str(tmp_path)]) == 2
    err = json.loads(capsys.readouterr().err.strip().splitlines()[-1])
    assert err["error"] == "config" and len(err["fields"]) == 2
    assert main(["rollout", "--preset", "double_well", "--out", str(tmp_path / "empty")]) == 4
    assert json.loads(capsys.readouterr().err.strip().splitlines()[-1])["error"] == "io"
    assert main(["train", "--preset", "double_well", "--workers", "0"]) == 2


def test_module_entry_point():
    r = subprocess.run([sys.executable, "-m", "itolab", "--help"], capture_output=True, text=True)
    assert r.returncode == 0 and "pipeline" in r.stdout
