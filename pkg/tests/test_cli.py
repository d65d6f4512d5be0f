from __future__ import annotations

import json
import math
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest

from effdiff.cli import EXIT_ASSERT, EXIT_CONFIG, EXIT_OK, EXIT_RUNTIME, main
from effdiff.config import load_config, parse_number
from effdiff.errors import ConfigError

ZERO = """\
[flow]
name = zero
dim = 2

[integrator]
name = splitnd
d0 = 0.1
dt = 2^-4

[ensemble]
T = 4
n_particles = 3000
{seed}
sample_times = log:16

[output]
dir = {out}
prefix = run

[expect]
d11 = {target}
se_mult = 3
"""


def write(tmp_path: Path, text: str, name: str = "run.ini") -> Path:
    p = tmp_path / name
    p.write_text(text)
    return p


def zero_cfg(tmp_path, seed="seed = 11", target=0.1, out="out"):
    return write(tmp_path, ZERO.format(seed=seed, out=out, target=target))


def body(path: Path) -> list[str]:
    return [l for l in path.read_text().splitlines() if not l.startswith("#")]


def header(path: Path) -> dict:
    out = {}
    for l in path.read_text().splitlines():
        if l.startswith("# ") and "=" in l:
            k, v = l[2:].split("=", 1)
            out[k] = v
    return out


# -- numbers and config parsing -------------------------------------------------------


@pytest.mark.parametrize(
    "text,value",
    [("2^-8", 2**-8), ("1/256", 1 / 256), ("1e-3", 1e-3), ("sqrt(0.2)", math.sqrt(0.2)), ("2*pi", 2 * math.pi), ("-3", -3.0)],
)
def test_parse_number(text, value):
    assert parse_number(text) == pytest.approx(value, rel=1e-15)


@pytest.mark.parametrize("text", ["__import__('os')", "1/0", "abc", "2**2000"])
def test_parse_number_rejects(text):
    with pytest.raises(ValueError):
        parse_number(text)


def test_config_errors_carry_line_numbers(tmp_path):
    text = ZERO.format(seed="seed = 1", out="out", target=0.1).replace("dt = 2^-4", "dt = fast")
    rc = load_config(write(tmp_path, text))
    with pytest.raises(ConfigError) as err:
        rc.simulation()
    assert err.value.line == 8
    assert f"{tmp_path / 'run.ini'}:8:" in str(err.value)


def test_validation_error_maps_to_line(tmp_path):
    text = ZERO.format(seed="seed = 1", out="out", target=0.1).replace("n_particles = 3000", "n_particles = 0")
    with pytest.raises(ConfigError) as err:
        load_config(write(tmp_path, text)).simulation()
    assert err.value.line == 12


def test_unknown_flow_parameter_is_config_error(tmp_path):
    text = ZERO.format(seed="seed = 1", out="out", target=0.1).replace("dim = 2", "dim = 2\nomega = 3")
    with pytest.raises(ConfigError):
        load_config(write(tmp_path, text)).simulation()


def test_unknown_section(tmp_path):
    with pytest.raises(ConfigError) as err:
        load_config(write(tmp_path, ZERO.format(seed="", out="out", target=0.1) + "\n[plots]\nx = 1\n"))
    assert err.value.line is not None


def test_seed_precedence(tmp_path):
    rc = load_config(zero_cfg(tmp_path, seed="seed = 5"))
    assert rc.simulation().master_seed == 5
    assert rc.simulation(seed=9).master_seed == 9
    rc = load_config(zero_cfg(tmp_path, seed=""))
    assert rc.simulation(seed=9).master_seed == 9
    with pytest.raises(ConfigError, match="seed"):
        rc.simulation()


def test_abc_amplitudes_and_matrix_noise(tmp_path):
    text = """\
[flow]
name = abc3d
a = 1
b = 0.5
c = 2
eps = 0.1
[integrator]
sigma_matrix = 0.1, 0, 0; 0, 0.2, 0; 0, 0, 0.3
dt = 0.1
[ensemble]
T = 1
n_particles = 1
seed = 1
initial = uniform_box
lo = -1, -1, -1
hi = 1, 1, 1
"""
    sim = load_config(write(tmp_path, text)).simulation()
    assert dict(sim.flow.params) == {"A": 1.0, "B": 0.5, "C": 2.0, "eps": 0.1}
    np.testing.assert_array_equal(np.diag(sim.diffusion.matrix), [0.1, 0.2, 0.3])
    assert sim.initial.kind == "uniform_box"


# -- subcommands -----------------------------------------------------------------------


def test_simulate_writes_reports(tmp_path, capsys):
    cfg = zero_cfg(tmp_path)
    assert main(["-q", "simulate", str(cfg), "--assert"]) == EXIT_OK
    out = tmp_path / "out"
    ts, final = out / "run_timeseries.csv", out / "run_final.csv"
    manifest = json.loads((out / "run_simulate_manifest.json").read_text())
    assert body(ts)[0] == "t,D11,SE11,D12,SE12,D22,SE22"
    assert body(final)[0].startswith("t,D11,SE11,D12,SE12,D22,SE22,n")
    h = header(ts)
    assert h["manifest"] == manifest["manifest_hash"]
    assert h["seed"] == "11" and h["n_particles"] == "3000" and float(h["dt"]) == 2**-4
    assert h["config_hash"] == manifest["config_hash"]
    assert manifest["outputs"] == ["run_timeseries.csv", "run_final.csv"]
    assert manifest["particle_steps"] == 3000 * 64
    assert "D11 =" in capsys.readouterr().out


def test_simulate_is_byte_identical_across_runs_and_workers(tmp_path):
    cfg = zero_cfg(tmp_path)
    assert main(["-q", "simulate", str(cfg), "--workers", "1"]) == EXIT_OK
    first = (tmp_path / "out" / "run_timeseries.csv").read_bytes()
    assert main(["-q", "simulate", str(cfg), "--workers", "4"]) == EXIT_OK
    assert (tmp_path / "out" / "run_timeseries.csv").read_bytes() == first
    assert main(["-q", "simulate", str(cfg), "--workers", "0"]) == EXIT_OK
    assert (tmp_path / "out" / "run_timeseries.csv").read_bytes() == first


def test_assert_failure_exit_code(tmp_path):
    assert main(["-q", "simulate", str(zero_cfg(tmp_path, target=0.5)), "--assert"]) == EXIT_ASSERT


def test_config_error_exit_code(tmp_path, capsys):
    assert main(["-q", "simulate", str(zero_cfg(tmp_path, seed=""))]) == EXIT_CONFIG
    assert "seed" in capsys.readouterr().err
    assert main(["-q", "simulate", str(tmp_path / "missing.ini")]) == EXIT_CONFIG


def test_runtime_failure_keeps_checkpoint(tmp_path, monkeypatch):
    text = ZERO.format(seed="seed = 1", out="out", target=0.1)
    text = text.replace("n_particles = 3000", "n_particles = 3000\nchunk_size = 100\ncheckpoint_every = 100")
    monkeypatch.setenv("EFFDIFF_CHECKPOINT_DIR", str(tmp_path / "ck"))
    import effdiff.ensemble as ens
    from effdiff.errors import IntegrationError

    real = ens._chunk
    calls = {"n": 0}

    def failing_third_chunk(plan, start, stop):
        calls["n"] += 1
        if calls["n"] == 3:
            raise IntegrationError("particle 200 became non-finite", particle=200, step=0)
        return real(plan, start, stop)

    monkeypatch.setattr(ens, "_chunk", failing_third_chunk)
    assert main(["-q", "simulate", str(write(tmp_path, text))]) == EXIT_RUNTIME
    kept = list((tmp_path / "ck").glob("*.npz"))
    assert len(kept) == 1
    monkeypatch.setattr(ens, "_chunk", real)
    # the rerun resumes and cleans up
    assert main(["-q", "simulate", str(write(tmp_path, text))]) == EXIT_OK
    assert not list((tmp_path / "ck").glob("*.npz"))


def test_non_finite_run_is_runtime_failure(tmp_path, capsys):
    text = ZERO.format(seed="seed = 1", out="out", target=0.1)
    text = text.replace("d0 = 0.1", "sigma = 1e308").replace("dt = 2^-4", "dt = 4").replace("T = 4", "T = 40")
    assert main(["-q", "simulate", str(write(tmp_path, text))]) == EXIT_RUNTIME
    assert "non-finite" in capsys.readouterr().err


def test_converge_subcommand(tmp_path, capsys):
    cfg = zero_cfg(tmp_path)
    code = main(["-q", "converge", str(cfg), "--dt-list", "2^-2,2^-3", "--ref-value", "0.1,0"])
    assert code == EXIT_OK
    rows = body(tmp_path / "out" / "run_convergence.csv")
    assert rows[0] == "dt,D11,SE11,error,noise_dominated,seed"
    assert len(rows) == 3
    assert "fitted slope" in capsys.readouterr().out


def test_converge_needs_reference(tmp_path):
    assert main(["-q", "converge", str(zero_cfg(tmp_path)), "--dt-list", "0.1,0.05"]) == EXIT_CONFIG
    assert main(["-q", "converge", str(zero_cfg(tmp_path)), "--dt-list", "0.1,0.05", "--ref-dt", "0.01"]) == EXIT_CONFIG


def test_sweep_subcommand(tmp_path, capsys):
    cfg = zero_cfg(tmp_path)
    assert main(["-q", "sweep", str(cfg), "--param", "d0", "--values", "0.05,0.1,0.2"]) == EXIT_OK
    rows = body(tmp_path / "out" / "run_sweep_d0.csv")
    assert rows[0] == "d0,D11,SE11,T,t_mix,mixed,seed"
    assert len(rows) == 4
    out = capsys.readouterr().out
    assert "fitted slope" in out
    assert main(["-q", "sweep", str(cfg), "--param", "eps", "--values", "0.1"]) == EXIT_CONFIG


def test_validate_flow(tmp_path, capsys):
    assert main(["validate-flow", str(zero_cfg(tmp_path)), "--assert"]) == EXIT_OK
    assert "structure: PASS" in capsys.readouterr().out


def test_console_script_runs(tmp_path):
    cfg = zero_cfg(tmp_path)
    res = subprocess.run([sys.executable, "-m", "effdiff.cli", "validate-flow", str(cfg)], capture_output=True, text=True)
    assert res.returncode == 0
    assert "max_abs_divergence" in res.stdout


def test_shipped_configs_parse():
    root = Path(__file__).resolve().parents[1] / "configs"
    files = sorted(root.glob("*.ini"))
    assert files
    for f in files:
        rc = load_config(f)
        rc.simulation(seed=1)
