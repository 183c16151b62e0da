import itertools
import math

import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy.integrate import solve_ivp

from parceldrone.allocation import geometry_from_morphology, mixer_from_geometry
from parceldrone.core import GRAVITY, ParcelSpec
from parceldrone.morphogen import generate_morphology
from parceldrone.simdyn import (DT, BatteryBank, BatteryModel, RigidBodyState, RotorBank,
                                SafetyAction, SafetyPolicy, SimulationFault, Simulator,
                                SingleAxisRig, TestRigConstraint, VehicleParams, WindModel,
                                apply_test_rig, battery_step, euler_from_quat,
                                force_discharge, quat_from_euler, safety_monitor,
                                sample_wind, step)

import oracles


@pytest.fixture(scope="module")
def quad():
    return generate_morphology(ParcelSpec(0.2, 0.5, 0.5, 0.08))


def _settled(params, cmds):
    c = np.asarray(cmds) * params.max_thrust
    return RotorBank(c.copy(), c.copy())


def test_hover_force_balance(quad):
    # no drag, so the sink rate picked up while the rotors spin up leaves no residual force
    p = VehicleParams.from_morphology(quad, drag_coeff=0.0)
    cmds = np.full(4, quad.e_H)
    s, r = RigidBodyState(), RotorBank.idle(4)
    for _ in range(int(1.0 / DT)):
        s, r = step(s, r, cmds, DT, p)
    s2, _ = step(s, r, cmds, DT, p)
    assert abs((s2.velocity[2] - s.velocity[2]) / DT) < 1e-6
    np.testing.assert_allclose(s2.angular_velocity, 0.0, atol=1e-12)


def test_zero_commands_free_fall(quad):
    p = VehicleParams.from_morphology(quad, drag_coeff=0.0)
    s, r = RigidBodyState(), RotorBank.idle(4)
    for _ in range(250):
        s, r = step(s, r, np.zeros(4), DT, p)
    assert s.velocity[2] == pytest.approx(GRAVITY * 1.0, rel=1e-12)
    assert s.position[2] == pytest.approx(0.5 * GRAVITY, rel=1e-12)


def test_single_motor_impulse_follows_its_column(quad):
    p = VehicleParams.from_morphology(quad, drag_coeff=0.0)
    p = VehicleParams(p.mass, p.inertia, p.B, p.max_thrust, 0.0, p.drag_areas, 0.0)
    hover = np.full(4, quad.e_H)
    for i in range(4):
        cmds = hover.copy()
        cmds[i] += 0.1
        s, _ = step(RigidBodyState(), _settled(p, hover), cmds, DT, p)
        wdot = s.angular_velocity / DT
        f = cmds * p.max_thrust
        want = np.array([-quad.placements[j].y for j in range(4)]) @ f / p.inertia[0], \
            np.array([quad.placements[j].x for j in range(4)]) @ f / p.inertia[1], \
            np.array([quad.placements[j].spin.sign * 0.016 for j in range(4)]) @ f / p.inertia[2]
        np.testing.assert_allclose(wdot, want, rtol=1e-6, atol=1e-9)
        np.testing.assert_array_equal(np.sign(wdot), np.sign(p.B[:3, i]))


def _reference_error(morph, sub):
    """Max state error against a tight reference after 0.4 s of random held commands."""
    p = VehicleParams.from_morphology(morph)
    rotors = [(q.x, q.y, q.spin.sign) for q in morph.placements]
    rng = np.random.default_rng(3)
    wind = (1.0, -0.5, 0.0)
    wm = WindModel(mean=wind)
    s = RigidBodyState(velocity=np.array([0.5, 0.2, -0.1]),
                       attitude=quat_from_euler(0.1, -0.05, 0.3),
                       angular_velocity=np.array([0.2, -0.1, 0.3]))
    r = _settled(p, np.full(p.n, 0.5))
    ref = np.concatenate([s.as_tuple(), r.thrust])
    h = DT / sub
    for k in range(100):
        cmds = np.clip(0.5 + 0.1 * rng.standard_normal(p.n), 0, 1)
        for j in range(sub):
            s, r = step(s, r, cmds, h, p, wm)
        rhs = oracles.multirotor_rhs(p.mass, p.inertia, rotors, 0.016, p.rotor_time_constant,
                                     p.drag_areas, p.drag_coeff, cmds * p.max_thrust, wind)
        ref = solve_ivp(rhs, (0, DT), ref, rtol=1e-12, atol=1e-13, method="DOP853").y[:, -1]
    ref[6:10] /= np.linalg.norm(ref[6:10])
    return max(np.max(np.abs(np.array(s.as_tuple()) - ref[:13])),
               np.max(np.abs(r.thrust - ref[13:])))


def test_step_matches_reference_integration(platforms):
    e1 = _reference_error(platforms["B"], 1)
    e2 = _reference_error(platforms["B"], 2)
    assert e1 < 1e-6
    # halving the step shrinks the error about sixteenfold: the folded rotor
    # lag keeps the scheme fourth order
    assert e1 / e2 > 12


def test_nan_raises_fault_with_tick(quad):
    p = VehicleParams.from_morphology(quad)
    with pytest.raises(SimulationFault) as exc:
        step(RigidBodyState(), RotorBank.idle(4), [math.nan] * 4, DT, p, tick=17)
    assert exc.value.tick == 17


@pytest.mark.parametrize("dt", [0.0, -0.001, 0.0101])
def test_timestep_bounds(quad, dt):
    with pytest.raises(ValueError):
        step(RigidBodyState(), RotorBank.idle(4), np.zeros(4), dt, VehicleParams.from_morphology(quad))


@given(seed=st.integers(0, 2**32 - 1))
def test_quaternion_norm_and_rotor_bounds(quad, seed):
    p = VehicleParams.from_morphology(quad)
    rng = np.random.default_rng(seed)
    s, r = RigidBodyState(), RotorBank.idle(4)
    for _ in range(100):
        s, r = step(s, r, rng.uniform(-0.2, 1.2, 4), DT, p)
        assert abs(np.linalg.norm(s.attitude) - 1) < 1e-9
        assert np.all((r.thrust >= 0) & (r.thrust <= p.max_thrust))


def test_energy_conserved_without_thrust_or_drag(platforms):
    # drag is dissipative, so this invariant is checked with it disabled
    p = VehicleParams.from_morphology(platforms["C"], drag_coeff=0.0)
    I = np.array(p.inertia)
    s = RigidBodyState(velocity=np.array([1.0, -2.0, -3.0]),
                       angular_velocity=np.array([0.3, 1.2, -0.4]))
    r = RotorBank.idle(p.n)

    def energy(s):
        return (0.5 * p.mass * s.velocity @ s.velocity - p.mass * GRAVITY * s.position[2]
                + 0.5 * s.angular_velocity @ (I * s.angular_velocity))

    e0 = energy(s)
    for _ in range(int(10 / DT)):
        s, r = step(s, r, np.zeros(p.n), DT, p)
    assert abs(energy(s) - e0) <= 1e-6 * abs(e0)


def test_vertical_angular_momentum_conserved(quad):
    p = VehicleParams.from_morphology(quad, drag_coeff=0.0)
    I = np.array(p.inertia)
    cmds = np.full(4, 0.3)
    s = RigidBodyState(angular_velocity=np.array([0.05, -0.02, 0.8]))
    r = _settled(p, cmds)

    def hz(s):
        return (oracles.quat_to_matrix(s.attitude) @ (I * s.angular_velocity))[2]

    h0 = hz(s)
    for _ in range(int(5 / DT)):
        s, r = step(s, r, cmds, DT, p)
    assert hz(s) == pytest.approx(h0, rel=1e-9)


def test_bit_deterministic(platforms):
    p = VehicleParams.from_morphology(platforms["D"])

    def run():
        rng = np.random.default_rng(11)
        wm = WindModel((1, 1, 0), 0.7, 3.0, seed=5)
        s, r = RigidBodyState(), RotorBank.idle(p.n)
        for k in range(200):
            s, r = step(s, r, rng.uniform(0, 1, p.n), DT, p, wm, t=k * DT)
        return s.as_tuple()

    assert run() == run()


@given(seed=st.integers(0, 1000))
def test_rig_locks_all_but_roll(platforms, seed):
    p = VehicleParams.from_morphology(platforms["A"])
    rig = TestRigConstraint("roll")
    rng = np.random.default_rng(seed)
    s, r = RigidBodyState(), RotorBank.idle(p.n)
    for _ in range(int(10 / DT) // 25):
        s, r = step(s, r, rng.uniform(0, 1, p.n), DT, p)
        s = apply_test_rig(s, rig)
        assert np.all(s.position == 0) and np.all(s.velocity == 0)
        assert s.attitude[2] == 0 and s.attitude[3] == 0
        assert s.angular_velocity[1] == 0 and s.angular_velocity[2] == 0


def test_rig_symmetric_hover_keeps_roll_zero(platforms):
    morph = platforms["A"]
    p = VehicleParams.from_morphology(morph)
    mx = mixer_from_geometry(geometry_from_morphology(morph))
    cmds = mx.matrix[:, 3] * 0.5
    rig = TestRigConstraint("roll")
    s, r = RigidBodyState(), RotorBank.idle(p.n)
    for _ in range(int(10 / DT)):
        s, r = step(s, r, cmds, DT, p)
        s = apply_test_rig(s, rig)
    # mirror partners cancel up to float summation order
    assert abs(euler_from_quat(s.attitude)[0]) < 1e-9 and abs(s.angular_velocity[0]) < 1e-9


def test_rig_differential_thrust_gives_analytic_roll_acceleration(platforms):
    morph = platforms["A"]
    base = VehicleParams.from_morphology(morph)
    p = VehicleParams(base.mass, base.inertia, base.B, base.max_thrust, 0.0, base.drag_areas)
    delta = 0.05
    cmds = np.array([0.5 + (delta if q.y < 0 else -delta) for q in morph.placements])
    s, _ = step(RigidBodyState(), _settled(p, cmds), cmds, DT, p)
    s = apply_test_rig(s, TestRigConstraint("roll"))
    moment = sum(-q.y * c * p.max_thrust for q, c in zip(morph.placements, cmds))
    # the rig locks the other axes between ticks, so within one tick a little
    # gyroscopic coupling remains; it stays far below one part per million
    assert s.angular_velocity[0] / DT == pytest.approx(moment / p.inertia[0], rel=1e-6)


def test_reduced_rig_matches_full_simulator_under_constraint(platforms):
    morph = platforms["C"]
    mx = mixer_from_geometry(geometry_from_morphology(morph))
    rig = SingleAxisRig.from_morphology(morph, mx, "pitch")
    K = 3.0
    trace = rig.run(lambda rate, angle, t: -K * rate, 1.0, initial_rate=0.05)
    p = VehicleParams.from_morphology(morph)
    con = TestRigConstraint("pitch")
    s = RigidBodyState(angular_velocity=np.array([0.0, 0.05, 0.0]))
    r = _settled(p, rig.hover_cmd)
    u_prev = 0.0
    rates = []
    for _ in range(len(trace.t)):
        rates.append(s.angular_velocity[1])
        u = -K * s.angular_velocity[1]
        cmds = np.clip(rig.hover_cmd + rig.mixer_col * u_prev, 0, 1)
        s, r = step(s, r, cmds, DT, p)
        s = apply_test_rig(s, con)
        u_prev = u
    np.testing.assert_allclose(trace.rate, rates, atol=1e-9)


def test_battery_zero_thrust_drains_c0_only():
    m = BatteryModel(1000.0)
    b = battery_step(BatteryBank.full(3, m), np.zeros(3), 0.5, m)
    np.testing.assert_allclose(b.energy, 1000.0 - 2.0 * 0.5)


@given(thrusts=st.lists(st.floats(0, 8), min_size=1, max_size=30))
def test_battery_energy_is_monotone(thrusts):
    m = BatteryModel(500.0)
    b = BatteryBank.full(2, m)
    for f in thrusts:
        nb = battery_step(b, [f, 8 - f], 1.0, m)
        assert np.all(nb.energy <= b.energy) and np.all(nb.discharged >= b.discharged)
        b = nb


def test_full_thrust_time_to_empty():
    m = BatteryModel(5000.0)
    t_closed = m.capacity / (m.c0 + m.c1 * 8.0**1.5)
    b, t, dt = BatteryBank.full(1, m), 0.0, 0.01
    while b.energy[0] > 0:
        b = battery_step(b, [8.0], dt, m)
        t += dt
    assert t == pytest.approx(t_closed, abs=dt)
    assert b.discharged[0]


def test_battery_model_hover_endurance():
    from parceldrone.core import ModuleSpec
    m = BatteryModel.for_module(ModuleSpec())
    assert m.capacity / m.power(0.55 * 8.0) == pytest.approx(600.0)


@pytest.mark.parametrize("count,want", [(0, SafetyAction.NONE), (1, SafetyAction.RETURN),
                                        (2, SafetyAction.LAND), (5, SafetyAction.LAND)])
def test_safety_thresholds(count, want):
    m = BatteryModel(100.0)
    b = BatteryBank.full(6, m)
    for i in range(count):
        b = force_discharge(b, i)
    assert safety_monitor(b, SafetyPolicy()) is want


@given(mask=st.lists(st.booleans(), min_size=4, max_size=12), data=st.data())
def test_safety_is_permutation_invariant(mask, data):
    perm = data.draw(st.permutations(mask))
    pol = SafetyPolicy(2, 3)
    mk = lambda flags: BatteryBank(np.ones(len(flags)), np.array(flags))  # noqa: E731
    assert safety_monitor(mk(mask), pol) is safety_monitor(mk(perm), pol)


def test_safety_policy_ordering():
    with pytest.raises(ValueError):
        SafetyPolicy(3, 2)


def test_calm_wind_is_constant_mean():
    w = WindModel((1.0, 2.0, 0.0), 0.0, seed=4)
    assert all(w.sample(t) == (1.0, 2.0, 0.0) for t in np.linspace(0, 100, 7))


@given(seed=st.integers(0, 2**31), t=st.floats(0, 1e4), amp=st.floats(0, 5),
       mx=st.floats(-5, 5), my=st.floats(-5, 5))
def test_wind_bounded_and_deterministic(seed, t, amp, mx, my):
    w = WindModel((mx, my, 0.0), amp, 4.0, seed)
    v = sample_wind(w, t)
    assert np.linalg.norm(v) <= math.hypot(mx, my) + amp + 1e-12
    assert WindModel((mx, my, 0.0), amp, 4.0, seed).sample(t) == w.sample(t)


def test_wind_from_southwest_blows_north_east():
    w = WindModel.from_direction(2.5, 225.0, 0.0)
    assert w.mean[0] == pytest.approx(2.5 / math.sqrt(2))
    assert w.mean[1] == pytest.approx(2.5 / math.sqrt(2))


def test_simulator_rests_on_ground(quad):
    sim = Simulator(VehicleParams.from_morphology(quad))
    for _ in range(100):
        sim.step(np.zeros(4))
    assert sim.state.position[2] == 0.0 and sim.on_ground()
    assert sim.t == pytest.approx(0.4)


def test_simulator_agrees_with_step_in_the_air(quad):
    p = VehicleParams.from_morphology(quad)
    s0 = RigidBodyState(position=np.array([0, 0, -10.0]))
    sim = Simulator(p, s0)
    s, r = s0, RotorBank.idle(4)
    for cmds in itertools.islice(itertools.cycle([[0.6, 0.5, 0.5, 0.6], [0.5] * 4]), 300):
        sim.step(np.array(cmds))
        s, r = step(s, r, cmds, DT, p)
    assert tuple(sim.y) == s.as_tuple()
