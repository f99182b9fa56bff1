import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from mvparticles import ImplicitSolveFailure, ModelSpec, ParticleCloud, SchemeConfig, get_preset, simulate, simulate_coupled
from mvparticles.model import zero_model
from mvparticles.scheme import bem_step, em_step, solve_implicit, steps_for

from oracles import cubic_bem_root, opinion_em_step


def decay_model(lam=1.0):
    return ModelSpec(
        name="decay",
        d=1,
        m=1,
        drift=lambda x, mu, obs=None: -lam * x,
        diffusion=lambda x, mu: np.zeros(x.shape + (1,)),
        drift_jacobian=lambda x, mu: np.full(x.shape + (1,), -lam),
    )


def linear_no_noise():
    lin = get_preset("linear")
    return ModelSpec(
        name="linear0",
        d=1,
        m=1,
        drift=lin.drift,
        diffusion=lambda x, mu: np.zeros(x.shape + (1,)),
        drift_jacobian=lin.drift_jacobian,
        initial_mean=2.0,
        initial_std=1.0,
    )


def cubic_no_mean():
    return ModelSpec(
        name="cubic0",
        d=1,
        m=1,
        drift=lambda x, mu, obs=None: -2 * x**3 - 4 * x,
        diffusion=lambda x, mu: np.zeros(x.shape + (1,)),
    )


CFG = SchemeConfig(dt=0.1, steps=1, n=2)


def test_config_validation():
    with pytest.raises(ValueError):
        SchemeConfig(dt=1.0)
    with pytest.raises(ValueError):
        SchemeConfig(dt=0.01, obs_gap=0.015)
    with pytest.raises(ValueError):
        SchemeConfig(kind="milstein")
    cfg = SchemeConfig.for_horizon(3.0, 0.3)
    assert cfg.steps == 10 and steps_for(1.0, 0.001) == 1000
    assert SchemeConfig(dt=0.01, obs_gap=0.05).obs_every == 5


def test_em_opinion_step_matches_scalar_oracle():
    out = em_step(ParticleCloud(np.array([1.0, 3.0])), get_preset("opinion"), CFG, [0.0, 0.0])
    assert out.atoms[:, 0] == pytest.approx([0.85, 2.15], abs=1e-15)
    rng = np.random.default_rng(3)
    atoms, dw = rng.normal(size=7), rng.normal(size=7) * 0.3
    out = em_step(ParticleCloud(atoms), get_preset("opinion"), CFG, dw)
    assert np.allclose(out.atoms[:, 0], opinion_em_step(list(atoms), 0.1, list(dw)), rtol=1e-13)
    assert out.step == 1


def test_trivial_linear_steps():
    c = ParticleCloud(np.array([1.0]))
    cfg = SchemeConfig(dt=0.1, n=1)
    assert em_step(c, decay_model(), cfg, [0.0]).atoms[0, 0] == pytest.approx(0.9)
    assert bem_step(c, decay_model(), cfg, [0.0]).atoms[0, 0] == pytest.approx(1 / 1.1, abs=1e-14)


def test_bem_cubic_matches_bisection():
    c = ParticleCloud(np.array([1.0, -1.0]))
    out, iters, res = bem_step(c, get_preset("cubic"), CFG, [0.0, 0.0], return_info=True)
    assert out.atoms[0, 0] == pytest.approx(cubic_bem_root(1.0, 0.1), abs=1e-9)
    assert out.atoms[0, 0] == pytest.approx(0.6712, abs=1e-4)
    assert np.all(res <= 1e-12)


def test_stiff_implicit_solve():
    cfg = SchemeConfig(dt=0.5, n=1)
    out, iters, res = bem_step(ParticleCloud(np.array([10.0])), cubic_no_mean(), cfg, [0.0], return_info=True)
    assert res[0] < 1e-12
    assert out.atoms[0, 0] == pytest.approx(cubic_bem_root(10.0, 0.5), abs=1e-10)


def test_solve_implicit_trivial_cases():
    rhs = np.array([[1.5, -2.0]])
    z, it, r = solve_implicit(lambda z: np.zeros_like(z), 0.3, rhs)
    assert np.array_equal(z, rhs) and it[0] <= 1
    z, it, r = solve_implicit(lambda z: -4.0 * z, 0.3, rhs, jac=lambda z: np.broadcast_to(-4.0 * np.eye(2), z.shape + (2,)))
    assert np.allclose(z, rhs / 2.2, rtol=1e-14) and it[0] == 1
    z, it, r = solve_implicit(lambda z: -4.0 * z, 0.3, rhs)
    assert np.allclose(z, rhs / 2.2, rtol=1e-12)
    with pytest.raises(ValueError):
        solve_implicit(lambda z: z, 0.0, rhs)


def test_solve_implicit_fallback_on_non_smooth_drift():
    # Newton stalls on the kink of -sign(z)|z|^0.5 near the root; the damped iteration still converges.
    f = lambda z: -np.sign(z) * np.sqrt(np.abs(z))  # noqa: E731
    z, it, r = solve_implicit(f, 0.5, np.array([[2.0], [-0.3], [1e-4]]), tol=1e-12, max_iter=500)
    assert np.all(r <= 1e-12)
    assert np.allclose(z - 0.5 * f(z), [[2.0], [-0.3], [1e-4]], atol=1e-12)


def test_implicit_failure_reports_particle():
    cfg = SchemeConfig(dt=0.5, n=2, implicit_max_iter=1)
    with pytest.raises(ImplicitSolveFailure) as err:
        bem_step(ParticleCloud(np.array([0.0, 10.0])), cubic_no_mean(), cfg, [0.0, 0.0])
    assert err.value.index[-1] == 1 and err.value.iterations == 1 and err.value.residual > 1e-12


def test_zero_model_is_identity():
    c = ParticleCloud(np.array([0.3, -2.0, 5.0]))
    cfg = SchemeConfig(dt=0.1, n=3)
    assert np.array_equal(em_step(c, zero_model(), cfg, [1.0, 2.0, 3.0]).atoms, c.atoms)
    out, it, _ = bem_step(c, zero_model(), cfg, [1.0, 2.0, 3.0], return_info=True)
    assert np.array_equal(out.atoms, c.atoms) and it.max() <= 1
    res = simulate(zero_model(), SchemeConfig(dt=0.1, steps=20, n=10, paths=3))
    assert np.all(res.mean_square == res.mean_square[0])


def test_diverged_input_passes_through():
    c = ParticleCloud(np.array([np.inf]), diverged=True)
    out = em_step(c, decay_model(), SchemeConfig(dt=0.1, n=1), [0.0])
    assert out.diverged and out.step == 1
    big = em_step(ParticleCloud(np.array([1e13])), decay_model(), SchemeConfig(dt=0.1, n=1), [0.0])
    assert big.diverged


def test_noise_shape_is_checked():
    with pytest.raises(ValueError):
        em_step(ParticleCloud(np.array([1.0, 2.0])), decay_model(), CFG, [0.0])


@given(st.integers(0, 2**31), st.sampled_from(["opinion", "linear", "cubic"]), st.sampled_from([em_step, bem_step]))
def test_permutation_equivariance(seed, name, step):
    rng = np.random.default_rng(seed)
    atoms, dw = rng.normal(size=6), rng.normal(size=6) * 0.1
    perm = rng.permutation(6)
    m = get_preset(name)
    cfg = SchemeConfig(dt=0.05, n=6)
    a = step(ParticleCloud(atoms), m, cfg, dw).atoms
    b = step(ParticleCloud(atoms[perm]), m, cfg, dw[perm]).atoms
    assert np.allclose(a[perm], b, rtol=1e-12, atol=1e-14)


@pytest.mark.parametrize("kind", ["explicit_em", "backward_em"])
def test_thread_count_does_not_change_results(kind):
    cfg = SchemeConfig(kind=kind, dt=0.01, steps=30, n=50, paths=7, seed=5)
    a = simulate(get_preset("cubic"), cfg, threads=1)
    b = simulate(get_preset("cubic"), cfg, threads=3)
    for name in ("mean_square", "mean", "max_norm", "implicit_iters", "residual"):
        assert np.array_equal(getattr(a, name), getattr(b, name)), name
    assert a.records == b.records


def test_observer_streams_records():
    seen = []
    res = simulate(get_preset("opinion"), SchemeConfig(dt=0.01, steps=12, n=20, paths=2), observer=seen.append)
    assert [r.step for r in seen] == list(range(13))
    assert seen == res.records
    for r in seen:
        assert r.mean_square >= sum(v * v for v in r.mean) - 1e-12


@pytest.mark.parametrize("kind", ["explicit_em", "backward_em"])
def test_linear_without_noise_follows_exact_recursion(kind):
    dt, K = 0.05, 20
    cfg = SchemeConfig(kind=kind, dt=dt, steps=K, n=16, paths=1, seed=2)
    res = simulate(linear_no_noise(), cfg, keep_final=True)
    x = simulate(linear_no_noise(), SchemeConfig(kind=kind, dt=dt, steps=0, n=16, paths=1, seed=2), keep_final=True).final_states[0, :, 0]
    for _ in range(K):
        m = x.mean()
        x = x * (1 - 3.5 * dt) + dt * m if kind == "explicit_em" else (x + dt * m) / (1 + 3.5 * dt)
    assert np.allclose(res.final_states[0, :, 0], x, rtol=1e-13, atol=1e-15)


def test_linear_mean_matches_ode():
    cfg = SchemeConfig(dt=0.01, steps=100, n=500, paths=200, seed=11)
    res = simulate(get_preset("linear"), cfg)
    means = res.mean[-1, :, 0]
    se = means.std(ddof=1) / math.sqrt(len(means))
    assert abs(means.mean() - 2 * (1 - 2.5 * 0.01) ** 100) <= 3 * se
    assert abs(2 * (1 - 2.5 * 0.01) ** 100 - 2 * math.exp(-2.5)) < 0.01


def test_exchangeability_of_particle_halves():
    cfg = SchemeConfig(dt=0.01, steps=50, n=400, paths=40, seed=3)
    res = simulate(get_preset("opinion"), cfg, keep_final=True)
    sq = res.final_states[:, :, 0] ** 2
    a, b = sq[:, :200].mean(axis=1), sq[:, 200:].mean(axis=1)
    diff = a - b
    assert abs(diff.mean()) <= 4 * diff.std(ddof=1) / math.sqrt(len(diff))


def test_feedback_snapshot_refresh_and_blow_up():
    fb = get_preset("feedback", {"k1": 7, "k2": 8})
    with pytest.raises(ValueError):
        simulate(fb, SchemeConfig(dt=0.01, steps=5, n=10))
    # Held observation: with obs refreshed every 5 steps, steps inside a window share the same control term.
    cfg = SchemeConfig(dt=0.01, steps=10, n=10, seed=1, obs_gap=0.05)
    res = simulate(fb, cfg)
    assert res.mean_square.shape == (11, 1) and not res.any_diverged
    same = simulate(fb, SchemeConfig(dt=0.01, steps=10, n=10, seed=1, obs_gap=0.01))
    assert not np.array_equal(res.mean_square, same.mean_square)
    assert np.array_equal(res.mean_square[:2], same.mean_square[:2])
    free = simulate(get_preset("feedback"), SchemeConfig(dt=0.01, steps=2000, n=50, paths=2, obs_gap=0.05))
    assert free.any_diverged and free.records[-1].diverged
    assert len(free.records) < 2001 and free.times[-1] < 20


def test_coupled_self_coupling_and_monotone_in_n():
    cfg = SchemeConfig(dt=0.01, steps=20, n=1, paths=20, seed=4)
    res = simulate_coupled(get_preset("linear"), cfg, [16, 64], n_ref=64)
    assert res.reference == "proxy" and np.all(res.errors[1] == 0)
    ode = simulate_coupled(get_preset("linear"), cfg, [8, 32, 128])
    assert ode.reference == "mean_ode"
    e = ode.errors[:, -1]
    assert e[0] > e[1] > e[2] > 0
    with pytest.raises(ValueError):
        simulate_coupled(get_preset("linear"), cfg, [32, 16])
    cub = simulate_coupled(get_preset("cubic"), SchemeConfig(kind="backward_em", dt=0.01, steps=5, n=1, paths=2), [4, 8])
    assert cub.reference == "proxy" and cub.n_ref == 64
