import numpy as np
import pytest
from hypothesis import given, strategies as st

from smokerecon import fluid
from smokerecon.benchmark import SceneConfig, simulate
from smokerecon.fluid import (PressureSolveError, SimParams, SmokeState, StabilityError, add_buoyancy,
                              add_viscosity, advect, advect_scalar, max_divergence, pressure_project,
                              source_mask, step_forward)
from smokerecon.grid import GridDims, StaggeredField, gradient

from conftest import blob, random_field


@pytest.mark.parametrize("kw", [{"dt": 0.0}, {"viscosity": -1.0}, {"buoyancy": -0.1}])
def test_sim_params_rejects(kw):
    with pytest.raises(ValueError):
        SimParams(**kw)


# ---------------------------------------------------------------- advection

def test_advect_zero_velocity_is_identity(rng):
    d = GridDims(6, 7, 5, 0.1)
    q = rng.random(d.shape)
    u = random_field(d, rng)
    zero = StaggeredField.zeros(d)
    assert np.array_equal(advect(q, zero, 0.1), q)
    v = advect(u, zero, 0.1)
    assert np.array_equal(v.flat(), u.flat())


def test_advect_delta_shifts_one_cell():
    d = GridDims(8, 8, 8, 0.05)
    dt = 0.02
    vel = StaggeredField.zeros(d)
    vel.x[:] = d.h / dt
    q = np.zeros(d.shape)
    q[3, 4, 2] = 1.0
    out = advect_scalar(q, vel, dt)
    expect = np.zeros(d.shape)
    expect[4, 4, 2] = 1.0
    np.testing.assert_allclose(out, expect, atol=1e-12)


def test_advect_constant_is_fixed_point(rng):
    d = GridDims(12, 12, 12, 1.0)
    vel = random_field(d, rng) * 0.5
    out = advect_scalar(np.full(d.shape, 2.5), vel, 1.0)
    # within two cells of the boundary the trace may leave the domain
    np.testing.assert_allclose(out[2:-2, 2:-2, 2:-2], 2.5, rtol=0, atol=1e-12)


@given(st.integers(0, 2**31 - 1))
def test_advect_nonnegative(seed):
    rng = np.random.default_rng(seed)
    d = GridDims(6, 6, 6, 1.0)
    q = rng.random(d.shape)
    out = advect_scalar(q, random_field(d, rng) * 2.0, 1.0)
    assert out.min() >= 0.0


# --------------------------------------------------------------- projection

def test_project_gradient_field_vanishes(rng):
    d = GridDims(16, 16, 16, 1.0 / 16)
    p = np.zeros(d.shape)
    p[2:-2, 2:-2, 2:-2] = rng.standard_normal((12, 12, 12))
    g = gradient(p, d)
    tol = 1e-4
    out = pressure_project(g, tol)
    assert out.max_abs() <= 10 * tol


def test_project_idempotent(rng):
    d = GridDims(10, 12, 9, 0.1)
    v = pressure_project(random_field(d, rng), 1e-8)
    assert max_divergence(v) <= 1e-8
    w = pressure_project(v, 1e-8)
    assert np.abs(w.flat() - v.flat()).max() <= 1e-8


def test_project_keeps_faces_below_bottom(rng):
    d = GridDims(8, 10, 8, 0.1)
    u = random_field(d, rng)
    v = pressure_project(u, 1e-8, bottom=3)
    assert np.array_equal(v.x[:, :3], u.x[:, :3])
    assert np.array_equal(v.y[:, :4], u.y[:, :4])
    assert np.array_equal(v.z[:, :3], u.z[:, :3])
    assert max_divergence(v, bottom=3) <= 1e-8


def test_project_reports_residual(rng):
    d = GridDims(6, 6, 6, 0.1)
    with pytest.raises(PressureSolveError) as exc:
        pressure_project(random_field(d, rng), tol=1e-300)
    assert exc.value.residual > 1e-300


# ------------------------------------------------------------------- forces

def test_viscosity_zero_and_constant(rng):
    d = GridDims(8, 8, 8, 1.0)
    u = random_field(d, rng)
    assert np.array_equal(add_viscosity(u, 0.0, 0.1).flat(), u.flat())
    c = StaggeredField.constant(d, (1.0, -2.0, 0.5))
    np.testing.assert_allclose(add_viscosity(c, 0.1, 0.5).flat(), c.flat(), atol=1e-14)


def test_viscosity_face_delta_spreads():
    d = GridDims(8, 8, 8, 1.0)
    u = StaggeredField.zeros(d)
    u.x[4, 4, 4] = 1.0
    nu, dt = 0.1, 0.5
    r = nu * dt
    out = add_viscosity(u, nu, dt).x
    expect = np.zeros_like(out)
    expect[4, 4, 4] = 1.0 - 6 * r
    for off in [(1, 0, 0), (-1, 0, 0), (0, 1, 0), (0, -1, 0), (0, 0, 1), (0, 0, -1)]:
        expect[4 + off[0], 4 + off[1], 4 + off[2]] = r
    np.testing.assert_allclose(out, expect, atol=1e-15)


def test_viscosity_stability_guard():
    d = GridDims(4, 4, 4, 0.01)
    with pytest.raises(StabilityError):
        add_viscosity(StaggeredField.zeros(d), 1e-3, 0.1)


def test_buoyancy_examples(rng):
    d = GridDims(6, 7, 5, 0.1)
    u = random_field(d, rng)
    assert np.array_equal(add_buoyancy(u, d.zeros(), 2.0, 0.1).flat(), u.flat())
    out = add_buoyancy(u, np.ones(d.shape), 1.0, 0.1)
    np.testing.assert_allclose(out.y - u.y, 0.1, rtol=0, atol=1e-15)
    assert np.array_equal(out.x, u.x) and np.array_equal(out.z, u.z)
    rho = rng.random(d.shape)
    inc = add_buoyancy(u, rho, 1.0, 0.1).y - u.y
    inc15 = add_buoyancy(u, rho, 1.5, 0.1).y - u.y
    np.testing.assert_allclose(inc15, 1.5 * inc, rtol=1e-12)


# --------------------------------------------------------------------- step

def test_zero_state_stays_zero():
    d = GridDims(8, 10, 8, 0.05)
    state = SmokeState.empty(d)
    params = SimParams()
    none = np.zeros(d.shape, bool)
    for _ in range(5):
        state = step_forward(state, params, none)
    assert not state.density.any() and state.velocity.max_abs() == 0.0


def test_source_injection_bounds():
    d = GridDims(16, 12, 16, 0.05)
    params = SimParams(source_radius=4.0, source_y=(1, 3), noise_amp=0.3)
    mask = source_mask(d, params)
    assert mask.sum() > 0 and not mask[:, 0].any() and not mask[:, 3:].any()
    out, injected = fluid.inject_source(d.zeros(), mask, params, np.random.default_rng(0))
    vals = out[mask]
    assert vals.min() >= 0.7 and vals.max() <= 1.3
    assert injected == pytest.approx(vals.sum())
    assert not out[~mask].any()


@pytest.fixture(scope="module")
def plume_run():
    scene = SceneConfig(nx=32, ny=56, nz=32)
    return simulate(scene, seed=3, frames=101)


def test_divergence_after_every_step(plume_run):
    _, _, info = plume_run
    assert max(info["div"]) <= SimParams().pressure_tol


def test_density_nonnegative(plume_run):
    dens, _, _ = plume_run
    assert min(float(d.min()) for d in dens) >= 0.0


def test_plume_rises(plume_run):
    dens, _, _ = plume_run
    ys = np.arange(dens[1].shape[1])
    com = [float((d.sum(axis=(0, 2)) * ys).sum() / d.sum()) for d in dens[1:31]]
    assert all(b > a for a, b in zip(com, com[1:]))


@pytest.mark.xfail(strict=True, reason="trilinear semi-Lagrangian advection loses more than 2% "
                   "of the injected mass per 100 steps at this resolution")
def test_mass_drift_bounded(plume_run):
    dens, _, info = plume_run
    injected = np.cumsum(info["injected"])
    totals = np.array([d.sum() for d in dens])
    # no density reaches the open sides or top within 100 steps
    assert all(d[[0, -1]].sum() + d[:, -1].sum() + d[:, :, [0, -1]].sum() < 1e-9 for d in dens)
    drift = np.abs(totals[1:] - injected[1:]) / injected[1:]
    assert drift.max() < 0.02


def test_deterministic_trajectory():
    scene = SceneConfig(nx=16, ny=28, nz=16)
    a = simulate(scene, seed=5, frames=8)
    b = simulate(scene, seed=5, frames=8)
    for da, db in zip(a[0], b[0]):
        assert da.tobytes() == db.tobytes()
    for va, vb in zip(a[1], b[1]):
        assert va.flat().tobytes() == vb.flat().tobytes()
    c = simulate(scene, seed=6, frames=8)
    assert not np.array_equal(a[0][-1], c[0][-1])


def test_blob_carried_by_uniform_flow():
    d = GridDims(16, 16, 16, 0.1)
    dt = 0.05
    vel = StaggeredField.zeros(d)
    vel.y[:] = d.h / dt
    q = blob(d.shape, (8, 6, 8), 1.5)
    out = advect_scalar(q, vel, dt)
    np.testing.assert_allclose(out[:, 1:], q[:, :-1], atol=1e-12)
