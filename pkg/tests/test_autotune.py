import numpy as np
import pytest
from hypothesis import given, strategies as st

from parceldrone.allocation import MixerMatrix, geometry_from_morphology, mixer_from_geometry
from parceldrone.autotune import (PID, DatabaseError, DatabaseLocked, DbEntry, GainDatabase,
                                  OutOfSupport, PlantDoesNotDestabilize, SweepConfig,
                                  TraceTooShort, UnstableTuningError, _file_lock,
                                  build_database, detect_oscillation, find_ultimate_gain,
                                  lookup, module_hash, tune_morphology,
                                  zn_gains)
from parceldrone.core import (YAW_RATE_DEFAULT, GainSet, ModuleSpec, PARCELS, ParcelSpec)
from parceldrone.morphogen import assign_spins, distribute_modules, generate_morphology
from parceldrone.simdyn import DT, SingleAxisRig, TuneTrace

import oracles

# the grid the shipped fixture was built from
FIXTURE_GRID = [ParcelSpec(m, L, W, 0.08) for m in (0.3, 0.6, 0.9)
                for L, W in ((0.5, 0.5), (0.75, 0.375), (1.0, 0.25))]


def synth(signal, duration=4.0, dt=DT):
    t = np.arange(int(round(duration / dt))) * dt
    x = signal(t)
    return TuneTrace(t, np.zeros_like(t), x, np.zeros_like(t))


# -- oscillation detection -----------------------------------------------------

def test_pure_sinusoid_is_detected():
    det = detect_oscillation(synth(lambda t: 0.3 * np.sin(2 * np.pi * t / 0.5)), 2.0)
    assert det is not None
    assert det.period == pytest.approx(0.5, rel=0.01)
    assert det.amplitude_ratio == pytest.approx(1.0, abs=5e-3)


def test_decaying_sinusoid_is_rejected():
    tr = synth(lambda t: np.exp(np.log(0.5) * t / 0.5) * np.sin(2 * np.pi * t / 0.5))
    assert detect_oscillation(tr, 2.0) is None


def test_growing_sinusoid_is_rejected():
    tr = synth(lambda t: np.exp(np.log(2.0) * t / 0.5) * np.sin(2 * np.pi * t / 0.5))
    assert detect_oscillation(tr, 2.0) is None


def test_noisy_sinusoid_detection_rate():
    hits = 0
    for seed in range(100):
        rng = np.random.default_rng(seed)
        tr = synth(lambda t: np.sin(2 * np.pi * t / 0.5) + 0.05 * rng.standard_normal(t.size))
        det = detect_oscillation(tr, 2.0)
        if det is not None and abs(det.period - 0.5) <= 0.025:
            hits += 1
    assert hits >= 95


def test_short_trace_is_an_error_not_none():
    with pytest.raises(TraceTooShort):
        detect_oscillation(synth(lambda t: np.sin(t), duration=3.0), 2.0)


def test_quiet_and_chatter_traces_are_not_oscillations():
    assert detect_oscillation(synth(lambda t: 0 * t), 2.0) is None
    # alternating sign every tick is below the resolvable period
    assert detect_oscillation(synth(lambda t: (-1.0) ** np.arange(t.size)), 2.0) is None
    # round-off sized ringing under the floor counts as quiet
    tr = synth(lambda t: 1e-12 * np.sin(2 * np.pi * t / 0.5))
    assert detect_oscillation(tr, 2.0, floor=1e-9) is None


@given(period=st.floats(0.05, 0.6), amp=st.floats(1e-3, 10), phase=st.floats(0, 6.3))
def test_detected_period_tracks_any_clean_sinusoid(period, amp, phase):
    det = detect_oscillation(synth(lambda t: amp * np.sin(2 * np.pi * t / period + phase),
                                   duration=8.0), 4.0)
    assert det is not None and det.period == pytest.approx(period, rel=0.01)


# -- ultimate gain ---------------------------------------------------------------

@pytest.fixture(scope="module")
def generic_results():
    return {I: find_ultimate_gain(SingleAxisRig.generic(I, 0.03)) for I in (0.02, 0.04)}


def test_ultimate_gain_matches_frequency_domain_oracle(generic_results):
    ult = generic_results[0.02]
    Ku, Tu = oracles.rate_loop_ultimate(0.02, 0.03, b=1.0, delay=DT, dt=DT)
    assert ult.Ku == pytest.approx(Ku, rel=0.10)
    assert ult.Tu == pytest.approx(Tu, rel=0.10)


def test_doubling_inertia_doubles_ultimate_gain(generic_results):
    a, b = generic_results[0.02], generic_results[0.04]
    Ka, _ = oracles.rate_loop_ultimate(0.02, 0.03)
    Kb, _ = oracles.rate_loop_ultimate(0.04, 0.03)
    assert b.Ku / a.Ku == pytest.approx(Kb / Ka, rel=0.05)
    assert b.Ku / a.Ku == pytest.approx(2.0, rel=0.05)
    assert b.Tu == pytest.approx(a.Tu, rel=0.05)


def test_bracket_invariant(generic_results):
    for ult in generic_results.values():
        lo, hi = ult.bracket
        assert lo <= ult.Ku <= hi and (hi - lo) / hi <= 0.02
        quiet = [g for g, osc in ult.stages if not osc]
        loud = [g for g, osc in ult.stages if osc]
        assert lo in quiet and hi in loud
        assert max(quiet) < min(loud)


def test_ideal_plant_never_destabilizes():
    rig = SingleAxisRig.generic(0.02, 0.0, delay_ticks=0)
    with pytest.raises(PlantDoesNotDestabilize):
        find_ultimate_gain(rig)


def test_oscillating_start_gain_is_retried_then_rejected():
    rig = SingleAxisRig.generic(0.02, 0.03)
    ult = find_ultimate_gain(rig, SweepConfig(start_gain=5.0))
    assert ult.stages[0][0] == pytest.approx(5.0 / 1.3**8)
    assert ult.Ku == pytest.approx(3.44, rel=0.1)
    with pytest.raises(PlantDoesNotDestabilize, match="start gain"):
        find_ultimate_gain(rig, SweepConfig(start_gain=5.0 * 1.3**8))


# -- Ziegler-Nichols ---------------------------------------------------------------

def test_zn_table():
    assert zn_gains(10, 0.5) == pytest.approx((6, 24, 0.375))
    with pytest.raises(ValueError):
        zn_gains(0, 0.5)
    with pytest.raises(ValueError):
        zn_gains(1, -0.5)


@given(Ku=st.floats(1e-3, 1e3), Tu=st.floats(1e-3, 10), c=st.floats(1e-2, 1e2))
def test_zn_is_linear_in_ku(Ku, Tu, c):
    np.testing.assert_allclose(zn_gains(c * Ku, Tu), np.array(zn_gains(Ku, Tu)) * c,
                               rtol=1e-12)


def test_pid_derivative_acts_on_measurement_and_integrator_clamps():
    pid = PID(1.0, 100.0, 1.0, dt=0.01, i_limit=0.3, setpoint_weight=1.0)
    pid(0.0, 0.0)
    # a setpoint jump adds no derivative kick; the integrator is already at its clamp
    assert pid(1.0, 0.0) == pytest.approx(1.0 + 0.3)
    for _ in range(100):
        pid(1.0, 0.0)
    assert pid.integral == 0.3
    pid.reset()
    assert pid.integral == 0.0
    weighted = PID(2.0, 0.0, 0.0, setpoint_weight=0.5)
    assert weighted(1.0, 0.25) == pytest.approx(2.0 * (0.5 - 0.25))


# -- per-morphology tuning ---------------------------------------------------------------

@pytest.fixture(scope="module")
def square_quad():
    m = generate_morphology(ParcelSpec(0.2, 0.5, 0.5, 0.08))
    assert m.n == 4
    return m


def test_square_quad_has_symmetric_gains(square_quad):
    g = tune_morphology(square_quad)
    np.testing.assert_allclose(g.roll, g.pitch, rtol=0.02)
    assert g.yaw == YAW_RATE_DEFAULT


def test_tuning_is_deterministic(square_quad):
    assert tune_morphology(square_quad) == tune_morphology(square_quad)


def test_parcel_iii_pitch_ultimate_gain_exceeds_roll():
    ms = ModuleSpec()
    p = PARCELS["III"]
    pl = tuple(assign_spins(distribute_modules(p, 8, ms)))
    from parceldrone.core import CentralModuleSpec, Morphology, composite_inertia, total_mass
    from parceldrone.morphogen import effort_at_hover, space_left
    c = CentralModuleSpec()
    morph = Morphology(p, ms, c, pl, (1.0, 0.0, 0.0), total_mass(p, c, 8, ms),
                       composite_inertia(p, c, pl, ms), effort_at_hover(p, c, 8, ms),
                       space_left(p, 8, ms))
    mx = mixer_from_geometry(geometry_from_morphology(morph))
    got, want = {}, {}
    for axis in ("roll", "pitch"):
        rig = SingleAxisRig.from_morphology(morph, mx, axis)
        got[axis] = find_ultimate_gain(rig).Ku
        want[axis] = oracles.rate_loop_ultimate(rig.inertia, ms.rotor_time_constant,
                                                b=rig.torque_per_command)[0]
        assert got[axis] == pytest.approx(want[axis], rel=0.10)
    assert want["pitch"] > want["roll"] and got["pitch"] > got["roll"]


def test_reversed_roll_column_fails_validation(square_quad):
    mx = mixer_from_geometry(geometry_from_morphology(square_quad))
    M = mx.matrix.copy()
    M[:, 0] *= -1
    with pytest.raises(UnstableTuningError) as exc:
        tune_morphology(square_quad, MixerMatrix(M, mx.authority))
    assert exc.value.axis == "roll" and exc.value.trace is not None


# -- gain database ---------------------------------------------------------------

def _entry(desc, k):
    return DbEntry(ParcelSpec(1.0, 0.5, 0.5, 0.1), desc,
                   GainSet((k, 2 * k, 0.1 * k), (k + 1, 2 * k + 1, 0.1 * k + 0.1)))


def test_fixture_is_complete_and_matches_module_spec(fixture_db):
    assert len(fixture_db.entries) == 9 and not fixture_db.failures
    assert fixture_db.module_hash == module_hash(ModuleSpec())
    assert fixture_db.sigma == 0.5


def test_fixture_rebuild_is_byte_identical(tmp_path, fixture_db):
    path = tmp_path / "gains.db"
    build_database(FIXTURE_GRID, path=path, resume=False)
    assert path.read_text() == fixture_db.dumps()


def test_two_point_build_and_byte_identical_rebuild(tmp_path):
    grid = [ParcelSpec(0.3, 0.5, 0.5, 0.08), ParcelSpec(0.6, 0.5, 0.5, 0.08)]
    a, b = tmp_path / "a.db", tmp_path / "b.db"
    db = build_database(grid, path=a, resume=False)
    assert len(db.entries) == 2
    build_database(grid, path=b, resume=False)
    assert a.read_bytes() == b.read_bytes()
    calls = []
    build_database(grid, path=a, resume=True, progress=lambda p, d: calls.append(p))
    assert calls == [] and a.read_bytes() == b.read_bytes()


def test_failures_are_recorded_and_resume_skips_them(tmp_path, fixture_db):
    path = tmp_path / "g.db"
    path.write_text(fixture_db.dumps())
    heavy = ParcelSpec(50.0, 0.5, 0.5, 0.08)
    calls = []
    db = build_database(FIXTURE_GRID + [heavy], path=path, progress=lambda p, d: calls.append(p))
    assert calls == [heavy]
    assert len(db.entries) == 9 and db.failures[0][0] == heavy
    assert "NoViableConfiguration" in db.failures[0][1]
    assert GainDatabase.load(path).failures == db.failures


def test_all_failures_is_an_error():
    with pytest.raises(DatabaseError, match="empty"):
        build_database([ParcelSpec(50.0, 0.5, 0.5, 0.08)])


def test_resume_rejects_foreign_module_spec(tmp_path, fixture_db):
    path = tmp_path / "g.db"
    path.write_text(fixture_db.dumps())
    with pytest.raises(DatabaseError, match="module spec"):
        build_database(FIXTURE_GRID[:1], module_spec=ModuleSpec(max_thrust=9.0), path=path)


def test_locked_database_is_refused(tmp_path):
    path = tmp_path / "g.db"
    with _file_lock(path):
        with pytest.raises(DatabaseLocked):
            build_database(FIXTURE_GRID[:1], path=path)


def test_database_text_round_trip(fixture_db):
    text = fixture_db.dumps()
    again = GainDatabase.loads(text)
    assert again.dumps() == text
    assert [e.gains for e in again.entries] == [e.gains for e in fixture_db.entries]


def test_database_rejects_bad_files(fixture_db):
    text = fixture_db.dumps()
    with pytest.raises(DatabaseError, match="format_version"):
        GainDatabase.loads(text.replace("format_version 1", "format_version 7"))
    line = next(ln for ln in text.splitlines() if ln.startswith("entry"))
    with pytest.raises(DatabaseError, match="duplicate"):
        GainDatabase.loads(text + line + "\n")
    with pytest.raises(DatabaseError, match="line"):
        GainDatabase.loads(text + "entry 1 2 3\n")
    with pytest.raises(DatabaseError):
        GainDatabase("x", sigma=0.0)


def test_lookup_exact_match_returns_stored_gains(fixture_db):
    for e in fixture_db.entries:
        assert lookup(fixture_db, e.descriptor) is e.gains


def test_lookup_midway_is_arithmetic_mean():
    db = GainDatabase("x", entries=[_entry((0.1, 0.2, 2.0, 6), 1.0),
                                    _entry((0.3, 0.4, 3.0, 8), 3.0)])
    g = lookup(db, (0.2, 0.3, 2.5, 7))
    np.testing.assert_allclose(g.roll, (2.0, 4.0, 0.2), rtol=1e-12)
    np.testing.assert_allclose(g.pitch, (3.0, 5.0, 0.3), rtol=1e-12)


def test_lookup_far_outside_is_out_of_support(fixture_db):
    with pytest.raises(OutOfSupport):
        lookup(fixture_db, (10.0, 10.0, 100.0, 64))
    with pytest.raises(DatabaseError):
        lookup(GainDatabase("x"), (1, 1, 1, 4))


_desc = st.tuples(st.floats(0.02, 0.6), st.floats(0.02, 0.6), st.floats(1.5, 5.0),
                  st.sampled_from([6, 8, 10]))


@given(q=_desc)
def test_lookup_stays_inside_stored_range(fixture_db, q):
    try:
        g = lookup(fixture_db, q)
    except OutOfSupport:
        return
    G = np.array([e.gains.roll + e.gains.pitch for e in fixture_db.entries])
    got = np.array(g.roll + g.pitch)
    assert np.all(got >= G.min(axis=0)) and np.all(got <= G.max(axis=0))
    assert g.yaw == YAW_RATE_DEFAULT


@given(i=st.integers(0, 8), d=st.tuples(*[st.floats(-1, 1)] * 3))
def test_lookup_is_continuous(fixture_db, i, d):
    base = np.array(fixture_db.entries[i].descriptor, dtype=float)
    scale = fixture_db.descriptors().std(axis=0)
    direction = np.r_[d, 0.0] * np.where(scale > 0, scale, 1.0)
    q0 = base + 0.05 * direction
    G = np.array([e.gains.roll + e.gains.pitch for e in fixture_db.entries])
    span = G.max(axis=0) - G.min(axis=0)
    r0 = lookup(fixture_db, q0)
    g0 = np.array(r0.roll + r0.pitch)
    for eps in (1e-3, 1e-4):
        q1 = q0 + eps * direction
        g1 = np.array(lookup(fixture_db, q1).roll + lookup(fixture_db, q1).pitch)
        # Lipschitz in normalized units; a jump would not shrink with eps
        assert np.all(np.abs(g1 - g0) <= 50 * eps * span + 1e-12)


def test_exact_match_agrees_with_kernel_limit(fixture_db):
    narrow = GainDatabase(fixture_db.module_hash, 0.05, list(fixture_db.entries))
    scale = fixture_db.descriptors().std(axis=0)
    for e in fixture_db.entries:
        q = np.array(e.descriptor, dtype=float) + 1e-9 * np.r_[scale[:3], 0.0]
        g = lookup(narrow, q)
        np.testing.assert_allclose(g.roll + g.pitch, e.gains.roll + e.gains.pitch,
                                   rtol=1e-6)
