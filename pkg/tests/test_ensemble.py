from __future__ import annotations

import math
import os

import numpy as np
import pytest

from effdiff.analysis import effective_diffusivity
from effdiff.ensemble import (
    CHECKPOINT_ENV,
    EnsembleStatistics,
    InitialDistribution,
    SimulationConfig,
    collect_samples,
    make_config,
    run_ensemble,
    run_particle,
)
from effdiff.errors import ConfigError, DomainError, IntegrationError
from effdiff.flows import make_flow
from effdiff.integrators import DiffusionSpec, ParticleState, get_stepper
from effdiff.rng import derive_particle_rng


def small(flow="chaotic2d", **kw):
    base = dict(integrator="splitnd", sigma=0.4, dt=2**-5, T=4.0, n_particles=300, seed=17, n_samples=12)
    base.update(kw)
    return make_config(flow, **base)


def stats_equal(a: EnsembleStatistics, b: EnsembleStatistics) -> bool:
    return (
        a.count.tobytes() == b.count.tobytes()
        and a.mean.tobytes() == b.mean.tobytes()
        and a.m2.tobytes() == b.m2.tobytes()
    )


# -- config ---------------------------------------------------------------------------


def test_config_validation():
    with pytest.raises(ConfigError):
        small(dt=0.0)
    with pytest.raises(ConfigError):
        small(n_particles=0)
    with pytest.raises(ConfigError):
        small(integrator="rk4")
    with pytest.raises(ConfigError):
        small("abc3d", integrator="split2d")
    with pytest.raises(ConfigError):
        small(T=0.01, dt=0.1)


def test_initial_distribution_validation():
    with pytest.raises(DomainError):
        InitialDistribution.uniform_box([0, 1], [1, 1])
    with pytest.raises(DomainError):
        InitialDistribution.dirac([0.0, math.inf])
    with pytest.raises(ConfigError):
        small(initial=InitialDistribution.dirac([0, 0, 0]))


def test_default_schedule_is_log_spaced_and_snapped():
    cfg = small(T=100.0, dt=0.01, n_samples=64)
    steps = cfg.sample_steps()
    assert steps[0] == 1 and steps[-1] == cfg.n_steps
    assert np.all(np.diff(steps) > 0)
    assert len(steps) <= 64


def test_explicit_sample_times_snap_within_half_step():
    cfg = small(dt=0.1, T=2.0, sample_times=(0.33, 1.07, 2.0))
    assert cfg.snap_error() <= cfg.dt / 2 + 1e-12
    with pytest.raises(ConfigError):
        small(sample_times=(5.0,)).sample_steps()


def test_period_warning():
    with pytest.warns(RuntimeWarning):
        small(dt=0.3, T=3.0).check_time_period()


def test_fingerprint_tracks_content():
    a = small()
    assert a.fingerprint() == small().fingerprint()
    assert a.fingerprint() != a.with_(master_seed=18).fingerprint()


# -- single particles -----------------------------------------------------------------


def test_zero_flow_zero_noise_gives_zero_displacement():
    cfg = small("zero", sigma=0.0, seed=123)
    _, disp = collect_samples(cfg)
    assert np.all(disp == 0)


def test_single_brownian_increment():
    cfg = small("zero", sigma=1.0, dt=1.0, T=1.0, sample_times=(1.0,))
    _, disp = run_particle(cfg, 5)
    dw = derive_particle_rng(cfg.master_seed, 5).increments(0, 2, 1.0)
    np.testing.assert_array_equal(disp[0], dw)


def test_shear_straight_line_motion():
    flow = make_flow("shear2d", a=1.3, k=2 * math.pi)
    x2 = 0.25
    cfg = small(flow, sigma=0.0, dt=0.01, T=1.0, initial=InitialDistribution.dirac([0.0, x2]), sample_times=(0.5, 1.0))
    times, disp = run_particle(cfg, 0)
    speed = 1.3 * math.sin(2 * math.pi * x2)
    np.testing.assert_allclose(disp[:, 0], speed * times, rtol=1e-12)
    np.testing.assert_array_equal(disp[:, 1], 0.0)


@pytest.mark.parametrize(
    "flow,integrator,params",
    [
        ("chaotic2d", "split2d", {}),
        ("chaotic2d", "euler", {}),
        ("kolmogorov3d", "splitnd", {"eps": 0.4}),
        ("abc3d", "splitnd", {"eps": 0.2}),
        ("abc3d_omega", "euler", {"omega": 0.3}),
        ("shear2d", "splitnd", {}),
    ],
)
def test_compiled_path_matches_reference_steppers(flow, integrator, params):
    cfg = small(flow, integrator=integrator, flow_params=params, dt=0.05, T=5.0, sample_times=(1.0, 5.0),
                initial=InitialDistribution.uniform_box([-1] * 3 if flow != "chaotic2d" and flow != "shear2d" else [-1, -1],
                                                        [1] * 3 if flow != "chaotic2d" and flow != "shear2d" else [1, 1]))
    times, disp = run_particle(cfg, 9)
    rng = derive_particle_rng(cfg.master_seed, 9)
    x0 = rng.uniforms(cfg.flow.dim)
    lo, hi = np.array(cfg.initial.lo), np.array(cfg.initial.hi)
    state = ParticleState.start(lo + (hi - lo) * x0)
    step = get_stepper(integrator)
    rec = {}
    for n in range(cfg.n_steps):
        state = step(state, cfg.dt, cfg.flow, cfg.diffusion, rng.increments(n, cfg.flow.dim, cfg.dt))
        rec[n + 1] = state.displacement
    expect = np.array([rec[int(round(t / cfg.dt))] for t in times])
    np.testing.assert_allclose(disp, expect, rtol=1e-9, atol=1e-9)


def test_matrix_noise_matches_reference():
    m = np.array([[0.3, 0.1, 0.0], [0.0, 0.2, 0.05], [0.1, 0.0, 0.4]])
    cfg = make_config("abc3d", sigma_matrix=m, dt=0.05, T=2.0, n_particles=1, seed=3, sample_times=(2.0,))
    _, disp = run_particle(cfg, 0)
    rng = derive_particle_rng(3, 0)
    state = ParticleState.start(np.zeros(3))
    spec = DiffusionSpec(matrix=m)
    for n in range(cfg.n_steps):
        state = get_stepper("splitnd")(state, cfg.dt, cfg.flow, spec, rng.increments(n, 3, cfg.dt))
    np.testing.assert_allclose(disp[-1], state.displacement, rtol=1e-10, atol=1e-12)


# -- ensembles ------------------------------------------------------------------------


@pytest.mark.parametrize("flow", ["chaotic2d", "abc3d"])
def test_bitwise_invariance_over_worker_counts(flow):
    cfg = small(flow, n_particles=2500, chunk_size=256)
    ref = run_ensemble(cfg, workers=1)
    for w in (4, os.cpu_count() or 1, 0):
        assert stats_equal(run_ensemble(cfg, workers=w), ref)


def test_run_particle_agrees_with_ensemble_bitwise():
    cfg = small(n_particles=40, chunk_size=16)
    times, all_disp = collect_samples(cfg)
    for i in (0, 17, 39):
        _, disp = run_particle(cfg, i)
        assert disp.tobytes() == np.ascontiguousarray(all_disp[:, :, i]).tobytes()


def test_particle_paths_do_not_depend_on_population_size():
    a = collect_samples(small(n_particles=10))[1]
    b = collect_samples(small(n_particles=50))[1]
    assert a.tobytes() == np.ascontiguousarray(b[:, :, :10]).tobytes()


def test_single_particle_statistics():
    cfg = small(n_particles=1)
    st = run_ensemble(cfg)
    _, disp = run_particle(cfg, 0)
    n, mean, raw = st.totals()
    assert n == 1
    np.testing.assert_allclose(mean, disp, rtol=1e-15)
    np.testing.assert_allclose(raw, np.einsum("ki,kj->kij", disp, disp), rtol=1e-12)


def test_second_moments_are_symmetric_psd():
    st = run_ensemble(small("abc3d", n_particles=500))
    _, _, raw = st.totals()
    np.testing.assert_allclose(raw, np.swapaxes(raw, 1, 2), rtol=1e-13)
    assert np.all(np.linalg.eigvalsh(raw) > -1e-12)


def test_merge_matches_direct_moments():
    cfg = small(n_particles=700)
    times, disp = collect_samples(cfg)
    st = run_ensemble(cfg.with_(chunk_size=100))
    n, mean, raw = st.totals()
    np.testing.assert_allclose(mean, disp.mean(axis=2), rtol=1e-12, atol=1e-14)
    np.testing.assert_allclose(raw, np.einsum("kim,kjm->kij", disp, disp) / disp.shape[2], rtol=1e-12)


def test_checkpoint_and_resume_is_bitwise(tmp_path, monkeypatch):
    cfg = small(n_particles=1000, chunk_size=100)
    full = run_ensemble(cfg)

    # interrupt after the fourth chunk
    import effdiff.ensemble as ens

    real_chunk = ens._chunk
    calls = {"n": 0}

    def flaky(plan, start, stop):
        calls["n"] += 1
        if calls["n"] == 5:
            raise KeyboardInterrupt
        return real_chunk(plan, start, stop)

    monkeypatch.setattr(ens, "_chunk", flaky)
    with pytest.raises(KeyboardInterrupt):
        run_ensemble(cfg, checkpoint_every=200, checkpoint_dir=tmp_path)
    files = list(tmp_path.glob("*.npz"))
    assert len(files) == 1
    saved, extra = EnsembleStatistics.load(files[0])
    assert int(extra["next_particle"]) == 400 and saved.n == 400

    monkeypatch.setattr(ens, "_chunk", real_chunk)
    resumed = run_ensemble(cfg, checkpoint_every=200, checkpoint_dir=tmp_path)
    assert stats_equal(resumed, full)
    assert not list(tmp_path.glob("*.npz"))


def test_checkpoint_env_override(tmp_path, monkeypatch):
    monkeypatch.setenv(CHECKPOINT_ENV, str(tmp_path / "ck"))
    cfg = small(n_particles=300, chunk_size=100)
    import effdiff.ensemble as ens

    real_chunk = ens._chunk
    calls = {"n": 0}

    def flaky(plan, start, stop):
        calls["n"] += 1
        if calls["n"] == 3:
            raise RuntimeError("boom")
        return real_chunk(plan, start, stop)

    monkeypatch.setattr(ens, "_chunk", flaky)
    with pytest.raises(RuntimeError):
        run_ensemble(cfg, checkpoint_every=100, checkpoint_dir=tmp_path / "ignored")
    assert len(list((tmp_path / "ck").glob("*.npz"))) == 1
    assert not (tmp_path / "ignored").exists()


def test_checkpoint_from_other_config_is_rejected(tmp_path):
    cfg = small(n_particles=300, chunk_size=100)
    other = cfg.with_(master_seed=99)
    st = EnsembleStatistics.empty(np.zeros(1), 2, other.fingerprint())
    path = tmp_path / f"ensemble-{cfg.fingerprint()}.npz"
    st.save(path, next_particle=np.int64(100))
    with pytest.raises(ConfigError):
        run_ensemble(cfg, checkpoint_dir=tmp_path)


def test_non_finite_particle_aborts_with_diagnostics():
    cfg = make_config("zero", sigma=1e308, dt=4.0, T=40.0, n_particles=64, seed=1, chunk_size=32)
    with pytest.raises(IntegrationError) as err:
        run_ensemble(cfg)
    assert err.value.particle is not None and 0 <= err.value.particle < 32
    assert err.value.step is not None and err.value.step >= 0
    # the reported particle really fails at the reported step
    step_cfg = cfg.with_(T=4.0 * (err.value.step + 1), sample_times=None, n_samples=1)
    with pytest.raises(IntegrationError):
        run_particle(step_cfg, err.value.particle)


def test_brownian_baseline_statistics():
    cfg = make_config("zero", d0=0.1, dt=0.01, T=10.0, n_particles=20000, seed=5, sample_times=(10.0,))
    rep = effective_diffusivity(run_ensemble(cfg))
    D, se = rep.D[-1], rep.se[-1]
    assert abs(D[0, 0] - 0.1) < 3 * se[0, 0]
    assert abs(D[1, 1] - 0.1) < 3 * se[1, 1]
    assert abs(D[0, 1]) < 3 * se[0, 1]
    # batch-means SE close to the chi-square value 0.1 * sqrt(2 / n)
    assert se[0, 0] == pytest.approx(0.1 * math.sqrt(2 / 20000), rel=0.35)


def test_uniform_initial_positions_inside_box():
    ini = InitialDistribution.uniform_box([-0.5, -0.5], [0.5, 0.5])
    x = ini.positions(3, np.arange(1000, dtype=np.uint64))
    assert x.shape == (2, 1000)
    assert np.all(np.abs(x) < 0.5)
    assert abs(x.mean()) < 0.05


def test_failure_after_last_sample_is_still_reported():
    cfg = make_config("zero", sigma=1e308, dt=4.0, T=40.0, n_particles=8, seed=1, sample_times=(4.0,))
    with pytest.raises(IntegrationError):
        run_ensemble(cfg)
