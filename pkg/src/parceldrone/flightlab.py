"""Cascaded flight controller, mission plans, flight logs and tracking reports.

The controller is a PX4-style cascade: position P -> velocity PID ->
acceleration/thrust vector -> attitude P on the quaternion error -> body
rate PID -> mixer. Only the roll/pitch rate gains vary between platforms;
the outer gains are fixed.
"""

from __future__ import annotations

import io
import math
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .allocation import Bundle, MixerMatrix, mix
from .autotune import PID
from .core import GRAVITY, GainSet
from .simdyn import (DT, BatteryBank, BatteryModel, RigidBodyState, SafetyAction, SafetyPolicy,
                     Simulator, VehicleParams, WindModel, battery_step,
                     force_discharge, safety_monitor, tilt_angle)

LOG_FORMAT_VERSION = 1
YAW_ACCEL_REF = 10.0  # rad/s^2 per unit of normalized yaw-rate PID output


class CrashDetected(RuntimeError):
    def __init__(self, reason: str, tick: int, log: "FlightLog"):
        self.reason = reason
        self.tick = tick
        self.log = log
        super().__init__(f"crash detected at t = {tick * log.dt:.3f} s: {reason}")


class ControlFault(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# setpoints and trajectories
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Setpoint:
    position: tuple[float, float, float]
    velocity: tuple[float, float, float] = (0.0, 0.0, 0.0)
    acceleration: tuple[float, float, float] = (0.0, 0.0, 0.0)
    yaw: float = 0.0
    yaw_rate: float = 0.0


@dataclass(frozen=True)
class LissajousSpec:
    amplitudes: tuple[float, float, float] = (2.0, 1.0, 1.0)
    center_altitude: float = 2.0
    duration: float = 40.0

    @property
    def omega(self) -> float:
        return 2 * math.pi / self.duration


def lissajous_setpoint(spec: LissajousSpec, t: float) -> Setpoint:
    """Figure-eight with x at the base rate and y, z at twice the base rate.

    z is down, so the altitude oscillates about ``center_altitude``. The
    heading is tangent to the horizontal path.
    """
    ax, ay, az = spec.amplitudes
    w = spec.omega
    s1, c1 = math.sin(w * t), math.cos(w * t)
    s2, c2 = math.sin(2 * w * t), math.cos(2 * w * t)
    # sin(2wt + pi/2) = cos(2wt)
    pos = (ax * s1, ay * s2, -spec.center_altitude - az * c2)
    vel = (ax * w * c1, 2 * ay * w * c2, 2 * az * w * s2)
    acc = (-ax * w * w * s1, -4 * ay * w * w * s2, 4 * az * w * w * c2)
    yaw = math.atan2(vel[1], vel[0])
    sp2 = vel[0] ** 2 + vel[1] ** 2
    yaw_rate = (vel[0] * acc[1] - vel[1] * acc[0]) / sp2 if sp2 > 0 else 0.0
    return Setpoint(pos, vel, acc, yaw, yaw_rate)


def _smooth(tau: float) -> tuple[float, float, float]:
    """Quintic smoothstep and its first two derivatives on [0, 1]."""
    tau = min(max(tau, 0.0), 1.0)
    s = tau ** 3 * (10 - 15 * tau + 6 * tau * tau)
    ds = 30 * tau * tau * (1 - tau) ** 2
    dds = 60 * tau * (1 - tau) * (1 - 2 * tau)
    return s, ds, dds


def _wrap(a: float) -> float:
    """Wrap to (-pi, pi]."""
    a = math.fmod(a + math.pi, 2 * math.pi)
    if a <= 0:
        a += 2 * math.pi
    return a - math.pi


def _blend(p0, p1, yaw0, yaw1, duration, t) -> Setpoint:
    s, ds, dds = _smooth(t / duration)
    d = [b - a for a, b in zip(p0, p1)]
    dyaw = _wrap(yaw1 - yaw0)
    return Setpoint(tuple(a + s * e for a, e in zip(p0, d)),
                    tuple(ds / duration * e for e in d),
                    tuple(dds / duration ** 2 * e for e in d),
                    _wrap(yaw0 + s * dyaw), ds / duration * dyaw)


# ---------------------------------------------------------------------------
# mission plans
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Takeoff:
    altitude: float
    duration: float = 5.0
    yaw: float | None = None


@dataclass(frozen=True)
class Hold:
    duration: float


@dataclass(frozen=True)
class Goto:
    """Straight leg to (north, east, altitude) with a trapezoidal speed profile."""

    waypoint: tuple[float, float, float]
    speed: float = 3.0
    accel: float = 1.0
    settle: float = 3.0
    heading: float | None = None  # default: along the leg


@dataclass(frozen=True)
class Land:
    duration: float = 5.0
    depth: float = 0.2  # setpoint ends this far below ground to ensure touchdown


Step = Takeoff | Hold | LissajousSpec | Goto | Land


@dataclass(frozen=True)
class MissionPlan:
    steps: tuple

    def __post_init__(self):
        if not self.steps or not isinstance(self.steps[0], Takeoff):
            raise ValueError("a mission plan must begin with TAKEOFF")
        if not isinstance(self.steps[-1], Land):
            raise ValueError("a mission plan must end with LAND")


def indoor_plan(spec: LissajousSpec | None = None) -> MissionPlan:
    spec = spec or LissajousSpec()
    start = lissajous_setpoint(spec, 0.0)
    return MissionPlan((Takeoff(-start.position[2], 5.0, start.yaw), Hold(5.0), spec,
                        Hold(5.0), Land(5.0)))


def outdoor_plan(distance: float = 50.0, bearing_deg: float = 16.0, altitude: float = 5.0,
                 speed: float = 3.0) -> MissionPlan:
    b = math.radians(bearing_deg)
    wp = (distance * math.cos(b), distance * math.sin(b), altitude)
    return MissionPlan((Takeoff(altitude, 5.0, b), Goto(wp, speed, heading=b),
                        Goto((0.0, 0.0, altitude), speed, heading=b), Land(5.0)))


@dataclass(frozen=True)
class Segment:
    name: str
    t0: float
    t1: float


class _Compiled:
    def __init__(self, name, t0, duration, fn, end_pos, end_yaw):
        self.name, self.t0, self.t1 = name, t0, t0 + duration
        self.fn, self.end_pos, self.end_yaw = fn, end_pos, end_yaw


def _goto_profile(dist, speed, accel):
    t_acc = speed / accel
    if accel * t_acc * t_acc >= dist:  # triangular
        t_acc = math.sqrt(dist / accel)
        speed = accel * t_acc
    t_cruise = (dist - accel * t_acc * t_acc) / speed
    total = 2 * t_acc + t_cruise

    def s_of(t):
        if t <= 0:
            return 0.0, 0.0, 0.0
        if t < t_acc:
            return 0.5 * accel * t * t, accel * t, accel
        if t < t_acc + t_cruise:
            return 0.5 * accel * t_acc ** 2 + speed * (t - t_acc), speed, 0.0
        if t < total:
            r = total - t
            return dist - 0.5 * accel * r * r, accel * r, -accel
        return dist, 0.0, 0.0
    return total, s_of


def _compile_step(step, t0, pos, yaw) -> _Compiled:
    if isinstance(step, Takeoff):
        p1 = (pos[0], pos[1], -step.altitude)
        y1 = yaw if step.yaw is None else step.yaw
        return _Compiled("TAKEOFF", t0, step.duration,
                         lambda t: _blend(pos, p1, yaw, y1, step.duration, t), p1, y1)
    if isinstance(step, Hold):
        sp = Setpoint(pos, yaw=yaw)
        return _Compiled("HOLD", t0, step.duration, lambda t: sp, pos, yaw)
    if isinstance(step, LissajousSpec):
        end = lissajous_setpoint(step, step.duration)
        return _Compiled("LISSAJOUS", t0, step.duration,
                         lambda t: lissajous_setpoint(step, t), end.position, end.yaw)
    if isinstance(step, Goto):
        n, e, alt = step.waypoint
        p1 = (n, e, -alt)
        d = [b - a for a, b in zip(pos, p1)]
        dist = math.sqrt(sum(v * v for v in d))
        u = [v / dist for v in d] if dist > 0 else [0.0, 0.0, 0.0]
        heading = (step.heading if step.heading is not None
                   else math.atan2(d[1], d[0]) if dist > 0 else yaw)
        travel, s_of = _goto_profile(dist, step.speed, step.accel) if dist > 0 else (
            0.0, lambda t: (0.0, 0.0, 0.0))
        # yaw settles to the leg heading during the first two seconds
        turn = min(2.0, travel) if travel > 0 else 0.0

        def fn(t):
            s, v, a = s_of(t)
            if turn > 0 and t < turn:
                yb = _blend((0, 0, 0), (0, 0, 0), yaw, heading, turn, t)
                y, yr = yb.yaw, yb.yaw_rate
            else:
                y, yr = heading, 0.0
            return Setpoint(tuple(p + s * k for p, k in zip(pos, u)),
                            tuple(v * k for k in u), tuple(a * k for k in u), y, yr)
        return _Compiled("GOTO", t0, travel + step.settle, fn, p1, heading)
    if isinstance(step, Land):
        p1 = (pos[0], pos[1], step.depth)
        return _Compiled("LAND", t0, step.duration,
                         lambda t: _blend(pos, p1, yaw, yaw, step.duration, t), p1, yaw)
    raise TypeError(f"unknown mission step {step!r}")


def compile_plan(steps, t0: float, pos, yaw: float) -> list[_Compiled]:
    out = []
    for step in steps:
        c = _compile_step(step, t0, tuple(pos), yaw)
        out.append(c)
        t0, pos, yaw = c.t1, c.end_pos, c.end_yaw
    return out


# ---------------------------------------------------------------------------
# controller
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class OuterGains:
    pos_xy: float = 0.95
    pos_z: float = 1.0
    vel_xy: tuple[float, float, float] = (1.8, 0.4, 0.2)
    vel_z: tuple[float, float, float] = (4.0, 2.0, 0.0)
    att_rp: float = 6.5
    att_yaw: float = 2.8
    max_tilt: float = math.radians(35.0)
    max_rate_rp: float = math.radians(220.0)
    max_rate_yaw: float = math.radians(120.0)
    max_speed_xy: float = 5.0
    max_speed_z: float = 2.0


@dataclass(frozen=True)
class ControllerModel:
    """Vehicle constants the controller is allowed to know."""

    mass: float
    max_thrust: float
    inertia: tuple[float, float, float]
    mixer: MixerMatrix

    @classmethod
    def from_bundle(cls, bundle: Bundle) -> "ControllerModel":
        m = bundle.morphology
        I = m.composite_inertia
        return cls(m.total_mass, m.module_spec.max_thrust, (I.Ixx, I.Iyy, I.Izz), bundle.mixer)


def _quat_from_matrix(r) -> tuple[float, float, float, float]:
    (r00, r01, r02), (r10, r11, r12), (r20, r21, r22) = r
    tr = r00 + r11 + r22
    if tr > 0:
        s = 2 * math.sqrt(tr + 1.0)
        return (0.25 * s, (r21 - r12) / s, (r02 - r20) / s, (r10 - r01) / s)
    if r00 > r11 and r00 > r22:
        s = 2 * math.sqrt(1.0 + r00 - r11 - r22)
        return ((r21 - r12) / s, 0.25 * s, (r01 + r10) / s, (r02 + r20) / s)
    if r11 > r22:
        s = 2 * math.sqrt(1.0 + r11 - r00 - r22)
        return ((r02 - r20) / s, (r01 + r10) / s, 0.25 * s, (r12 + r21) / s)
    s = 2 * math.sqrt(1.0 + r22 - r00 - r11)
    return ((r10 - r01) / s, (r02 + r20) / s, (r12 + r21) / s, 0.25 * s)


class CascadeController:
    def __init__(self, model: ControllerModel, gains: GainSet, outer: OuterGains | None = None,
                 dt: float = DT):
        self.model = model
        self.gains = gains
        self.outer = outer = outer or OuterGains()
        self.dt = dt
        self.vel_pid = [PID(*outer.vel_xy, dt=dt, i_limit=3.0, setpoint_weight=1.0),
                        PID(*outer.vel_xy, dt=dt, i_limit=3.0, setpoint_weight=1.0),
                        PID(*outer.vel_z, dt=dt, i_limit=4.0, setpoint_weight=1.0)]
        self.rate_pid = [PID(*gains.roll, dt=dt), PID(*gains.pitch, dt=dt),
                         PID(*gains.yaw, dt=dt, setpoint_weight=1.0)]
        a = model.mixer.authority
        self._thrust_scale = 1.0 / (model.max_thrust * a[3])
        self._yaw_scale = model.inertia[2] * YAW_ACCEL_REF / (model.max_thrust * a[2])

    def reset(self) -> None:
        for pid in self.vel_pid + self.rate_pid:
            pid.reset()

    def update(self, pos, vel, q, omega, sp: Setpoint) -> np.ndarray:
        o, m = self.outer, self.model
        # position -> velocity setpoint
        vsp = [sp.velocity[0] + o.pos_xy * (sp.position[0] - pos[0]),
               sp.velocity[1] + o.pos_xy * (sp.position[1] - pos[1]),
               sp.velocity[2] + o.pos_z * (sp.position[2] - pos[2])]
        h = math.hypot(vsp[0], vsp[1])
        if h > o.max_speed_xy:
            vsp[0] *= o.max_speed_xy / h
            vsp[1] *= o.max_speed_xy / h
        vsp[2] = max(-o.max_speed_z, min(o.max_speed_z, vsp[2]))
        # velocity -> acceleration -> required force (NED: gravity +z, thrust along -b3)
        acc = [sp.acceleration[i] + self.vel_pid[i](vsp[i], vel[i]) for i in range(3)]
        fx, fy, fz = m.mass * acc[0], m.mass * acc[1], m.mass * (acc[2] - GRAVITY)
        fz = min(fz, -0.1 * m.mass * GRAVITY)
        fh = math.hypot(fx, fy)
        fh_max = math.tan(o.max_tilt) * -fz
        if fh > fh_max:
            fx *= fh_max / fh
            fy *= fh_max / fh
        fn = math.sqrt(fx * fx + fy * fy + fz * fz)
        b3 = (-fx / fn, -fy / fn, -fz / fn)
        # desired attitude from thrust direction and heading
        xc = (math.cos(sp.yaw), math.sin(sp.yaw), 0.0)
        b2 = (b3[1] * xc[2] - b3[2] * xc[1], b3[2] * xc[0] - b3[0] * xc[2],
              b3[0] * xc[1] - b3[1] * xc[0])
        n2 = math.sqrt(b2[0] ** 2 + b2[1] ** 2 + b2[2] ** 2)
        b2 = (b2[0] / n2, b2[1] / n2, b2[2] / n2)
        b1 = (b2[1] * b3[2] - b2[2] * b3[1], b2[2] * b3[0] - b2[0] * b3[2],
              b2[0] * b3[1] - b2[1] * b3[0])
        qd = _quat_from_matrix(((b1[0], b2[0], b3[0]), (b1[1], b2[1], b3[1]),
                                (b1[2], b2[2], b3[2])))
        # collective thrust: required force projected on the current thrust axis
        qw, qx, qy, qz = q
        c3 = (2 * (qx * qz + qw * qy), 2 * (qy * qz - qw * qx), 1 - 2 * (qx * qx + qy * qy))
        thrust = max(0.0, -(fx * c3[0] + fy * c3[1] + fz * c3[2]))
        # attitude error q_e = conj(q) * qd
        dw, dx, dy, dz = qd
        ew = qw * dw + qx * dx + qy * dy + qz * dz
        ex = qw * dx - qx * dw - qy * dz + qz * dy
        ey = qw * dy + qx * dz - qy * dw - qz * dx
        ez = qw * dz - qx * dy + qy * dx - qz * dw
        if ew < 0:
            ex, ey, ez = -ex, -ey, -ez
        # yaw-rate feed-forward (world z) expressed in body axes
        r2 = (2 * (qx * qz - qw * qy), 2 * (qy * qz + qw * qx), 1 - 2 * (qx * qx + qy * qy))
        ff = sp.yaw_rate
        rsp = [2 * o.att_rp * ex + ff * r2[0], 2 * o.att_rp * ey + ff * r2[1],
               2 * o.att_yaw * ez + ff * r2[2]]
        rsp[0] = max(-o.max_rate_rp, min(o.max_rate_rp, rsp[0]))
        rsp[1] = max(-o.max_rate_rp, min(o.max_rate_rp, rsp[1]))
        rsp[2] = max(-o.max_rate_yaw, min(o.max_rate_yaw, rsp[2]))
        u_roll = self.rate_pid[0](rsp[0], omega[0])
        u_pitch = self.rate_pid[1](rsp[1], omega[1])
        u_yaw = self.rate_pid[2](rsp[2], omega[2]) * self._yaw_scale
        cmds = mix(m.mixer, u_roll, u_pitch, u_yaw, thrust * self._thrust_scale)
        if not np.all(np.isfinite(cmds)):
            raise ControlFault("non-finite motor command")
        return cmds


def cascade_controller(state: RigidBodyState, setpoint: Setpoint, gains: GainSet,
                       model: ControllerModel, controller: CascadeController | None = None
                       ) -> np.ndarray:
    """One evaluation of the cascade (a fresh controller unless one is passed in)."""
    ctl = controller or CascadeController(model, gains)
    return ctl.update(state.position.tolist(), state.velocity.tolist(), state.attitude.tolist(),
                      state.angular_velocity.tolist(), setpoint)


# ---------------------------------------------------------------------------
# flight log
# ---------------------------------------------------------------------------

STATE_COLUMNS = ("t", "seg", "x", "y", "z", "vx", "vy", "vz", "qw", "qx", "qy", "qz",
                 "p", "q", "r", "sp_x", "sp_y", "sp_z", "sp_yaw", "batt_min",
                 "batt_discharged", "action")


class LogFormatError(ValueError):
    pass


@dataclass
class FlightLog:
    meta: dict
    dt: float
    segments: list[Segment]
    columns: tuple[str, ...]
    data: np.ndarray

    def col(self, name: str) -> np.ndarray:
        return self.data[:, self.columns.index(name)]

    @property
    def t(self) -> np.ndarray:
        return self.col("t")

    @property
    def position(self) -> np.ndarray:
        return self.data[:, 2:5]

    @property
    def setpoint_position(self) -> np.ndarray:
        return self.data[:, 15:18]

    @property
    def attitude(self) -> np.ndarray:
        return self.data[:, 8:12]

    @property
    def motor_commands(self) -> np.ndarray:
        return self.data[:, len(STATE_COLUMNS):]

    @property
    def duration(self) -> float:
        return float(self.t[-1] - self.t[0]) + self.dt if len(self.data) else 0.0

    def segment_names(self) -> list[str]:
        return [s.name for s in self.segments]

    # -- text form (canonical) -----------------------------------------------

    def dumps(self) -> str:
        buf = io.StringIO()
        buf.write("# parceldrone flight log\n")
        buf.write(f"format_version {LOG_FORMAT_VERSION}\n")
        for k in sorted(self.meta):
            buf.write(f"meta {k} {self.meta[k]}\n")
        buf.write(f"dt {self.dt!r}\n")
        for s in self.segments:
            buf.write(f"segment {s.name} {s.t0!r} {s.t1!r}\n")
        buf.write("columns " + " ".join(self.columns) + "\n")
        buf.write("data\n")
        for row in self.data.tolist():
            buf.write(" ".join(map(repr, row)))
            buf.write("\n")
        return buf.getvalue()

    @classmethod
    def loads(cls, text: str) -> "FlightLog":
        lines = text.split("\n")
        meta, segments, columns, dt, version = {}, [], None, None, None
        i = 0
        while i < len(lines):
            line = lines[i]
            i += 1
            if not line or line.startswith("#"):
                continue
            key, _, rest = line.partition(" ")
            if key == "data":
                break
            if key == "format_version":
                version = rest
            elif key == "meta":
                k, _, v = rest.partition(" ")
                meta[k] = v
            elif key == "dt":
                dt = float(rest)
            elif key == "segment":
                name, a, b = rest.split()
                segments.append(Segment(name, float(a), float(b)))
            elif key == "columns":
                columns = tuple(rest.split())
            else:
                raise LogFormatError(f"line {i}: unknown header key {key!r}")
        if version != str(LOG_FORMAT_VERSION):
            raise LogFormatError(f"unsupported log format_version {version!r}")
        if columns is None or dt is None:
            raise LogFormatError("log header lacks columns or dt")
        rows = [ln for ln in lines[i:] if ln]
        data = (np.array([[float(v) for v in ln.split()] for ln in rows])
                if rows else np.empty((0, len(columns))))
        if data.shape[1:] != (len(columns),):
            raise LogFormatError("row width does not match the column list")
        return cls(meta, dt, segments, columns, data)

    # -- binary mirror -------------------------------------------------------

    def save_npz(self, path) -> None:
        seg = np.array([(s.name, s.t0, s.t1) for s in self.segments],
                       dtype=[("name", "U16"), ("t0", "f8"), ("t1", "f8")])
        meta = np.array(sorted(f"{k}={v}" for k, v in self.meta.items()))
        np.savez(path, data=self.data, columns=np.array(self.columns), segments=seg,
                 meta=meta, dt=np.array(self.dt), version=np.array(LOG_FORMAT_VERSION))

    @classmethod
    def load_npz(cls, path) -> "FlightLog":
        with np.load(path) as z:
            if int(z["version"]) != LOG_FORMAT_VERSION:
                raise LogFormatError("unsupported binary log version")
            meta = dict(s.split("=", 1) for s in z["meta"].tolist())
            segs = [Segment(str(n), float(a), float(b)) for n, a, b in z["segments"].tolist()]
            return cls(meta, float(z["dt"]), segs, tuple(z["columns"].tolist()),
                       z["data"].copy())


# ---------------------------------------------------------------------------
# flight runner
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class FlightOptions:
    dt: float = DT
    feedback_latency: float = 0.05
    thrust_mismatch: float = 0.01   # relative std of per-rotor thrust scale
    draft_amplitude: float = 0.2    # indoor air movement, m/s
    max_tilt: float = math.radians(60.0)
    outer: OuterGains = field(default_factory=OuterGains)


class _Runner:
    """Owns the closed loop: delayed feedback, one-tick actuation delay, logging."""

    def __init__(self, bundle: Bundle, gains: GainSet, seed: int, wind: WindModel | None,
                 options: FlightOptions, meta: dict, battery: BatteryModel | None = None,
                 policy: SafetyPolicy | None = None):
        self.bundle, self.options = bundle, options
        morph = bundle.morphology
        rng = np.random.default_rng(seed)
        scale = 1.0 + options.thrust_mismatch * rng.standard_normal(morph.n)
        self.params = VehicleParams.from_morphology(morph, thrust_scale=scale)
        self.sim = Simulator(self.params, RigidBodyState(), options.dt, wind, ground=True)
        self.ctl = CascadeController(ControllerModel.from_bundle(bundle), gains, options.outer,
                                     options.dt)
        self.lag = max(0, math.ceil(options.feedback_latency / options.dt - 1e-9))
        self.battery = battery or BatteryModel.for_module(morph.module_spec)
        self.bank = BatteryBank.full(morph.n, self.battery)
        self.policy = policy
        self.meta = dict(meta, seed=seed, modules=morph.n)
        self.rows = []
        self.segments: list[Segment] = []

    def log(self, crashed: str | None = None) -> FlightLog:
        n = self.bundle.morphology.n
        cols = STATE_COLUMNS + tuple(f"m{i}" for i in range(1, n + 1))
        meta = dict(self.meta)
        meta["status"] = "crashed" if crashed else "ok"
        data = np.array(self.rows) if self.rows else np.empty((0, len(cols)))
        return FlightLog(meta, self.options.dt, list(self.segments), cols, data)

    def fly(self, plan: MissionPlan, discharge_at: tuple[float, int] | None = None) -> FlightLog:
        sim, dt, opts = self.sim, self.options.dt, self.options
        y0 = sim.y
        hist = deque([(y0[0:3], y0[3:6])] * (self.lag + 1), maxlen=self.lag + 1)
        segs = compile_plan(plan.steps, 0.0, (y0[0], y0[1], y0[2]), 0.0)
        self.segments = [Segment(s.name, s.t0, s.t1) for s in segs]
        pending = np.zeros(self.params.n)
        action = SafetyAction.NONE
        k, i_seg = 0, 0
        while True:
            t = k * dt
            while i_seg < len(segs) and t >= segs[i_seg].t1 - 1e-9:
                i_seg += 1
            if i_seg >= len(segs):
                break
            seg = segs[i_seg]
            sp = seg.fn(t - seg.t0)
            y = sim.y
            # battery and safety policy
            if discharge_at is not None and abs(t - discharge_at[0]) < dt / 2:
                self.bank = force_discharge(self.bank, discharge_at[1])
            if self.policy is not None:
                new = safety_monitor(self.bank, self.policy)
                if new.value > action.value and seg.name != "LAND":
                    action = new
                    seg.t1 = t  # cut the interrupted segment short
                    here = (y[0], y[1], sp.position[2])
                    if new is SafetyAction.RETURN:
                        steps = [Goto((0.0, 0.0, -sp.position[2]), settle=2.0), Land()]
                    else:
                        steps = [Land()]
                    extra = compile_plan(steps, t, here, sp.yaw)
                    if new is SafetyAction.RETURN:
                        extra[0].name = "RETURN"
                    segs = segs[:i_seg + 1] + extra
                    self.segments = [Segment(c.name, c.t0, c.t1) for c in segs]
                    i_seg += 1
                    seg = segs[i_seg]
                    sp = seg.fn(t - seg.t0)
            pos_d, vel_d = hist[0]
            cmds = self.ctl.update(pos_d, vel_d, y[6:10], y[10:13], sp)
            e = self.bank.energy
            self.rows.append([t, float(i_seg), *y, *sp.position, sp.yaw,
                              float(e.min() / self.battery.capacity),
                              float(self.bank.discharged_count), float(action.value),
                              *pending.tolist()])
            # motors run the command from the previous tick
            sim.step(pending)
            self.bank = battery_step(self.bank, sim.f, dt, self.battery)
            pending = cmds
            k += 1
            y = sim.y
            hist.append((y[0:3], y[3:6]))
            if tilt_angle(y[6:10]) > opts.max_tilt:
                raise CrashDetected(f"tilt above {math.degrees(opts.max_tilt):.0f} deg", k,
                                    self.log("tilt"))
            if seg.name not in ("TAKEOFF", "LAND") and y[2] >= 0.0:
                raise CrashDetected("ground contact mid-flight", k, self.log("ground"))
        return self.log()


def run_indoor_experiment(bundle: Bundle, seed: int, gains: GainSet | None = None,
                          plan: MissionPlan | None = None,
                          options: FlightOptions | None = None,
                          platform: str = "-", config_hash: str = "-") -> FlightLog:
    """Table-style indoor protocol: takeoff, hold, one Lissajous loop, hold, land."""
    options = options or FlightOptions()
    wind = (WindModel(amplitude=options.draft_amplitude, gust_period=6.0, seed=seed)
            if options.draft_amplitude > 0 else None)
    runner = _Runner(bundle, gains or bundle.gains, seed, wind, options,
                     {"kind": "indoor", "platform": platform, "config_hash": config_hash})
    return runner.fly(plan or indoor_plan())


@dataclass(frozen=True)
class OutdoorConditions:
    wind_speed: float = 1.0
    wind_from_deg: float = 225.0   # south-west
    gust_amplitude: float = 1.5
    gust_period: float = 4.0


def run_outdoor_mission(bundle: Bundle, seed: int, conditions: OutdoorConditions | None = None,
                        gains: GainSet | None = None, plan: MissionPlan | None = None,
                        options: FlightOptions | None = None,
                        policy: SafetyPolicy | None = None,
                        discharge_at: tuple[float, int] | None = None,
                        platform: str = "-", config_hash: str = "-") -> FlightLog:
    """Out-and-back waypoint mission in seeded gusty wind.

    ``discharge_at = (t, module)`` marks one battery as discharged at time t,
    which lets tests exercise the safety policy.
    """
    options = options or FlightOptions(draft_amplitude=0.0)
    c = conditions or OutdoorConditions()
    wind = None
    if c.wind_speed > 0 or c.gust_amplitude > 0:
        wind = WindModel.from_direction(c.wind_speed, c.wind_from_deg, c.gust_amplitude,
                                        c.gust_period, seed=seed)
    runner = _Runner(bundle, gains or bundle.gains, seed, wind, options,
                     {"kind": "outdoor", "platform": platform, "config_hash": config_hash},
                     policy=policy or SafetyPolicy())
    return runner.fly(plan or outdoor_plan(), discharge_at)


def platform_bundle(name: str, db=None) -> Bundle:
    """Bundle for a preset platform with gains looked up in ``db`` (default: shipped fixture)."""
    from .allocation import emit_geometry_file, load_bundle
    from .autotune import fixture_database, lookup
    from .core import PLATFORMS
    from .morphogen import generate_morphology

    morph = generate_morphology(PLATFORMS[name])
    gains = lookup(db or fixture_database(), morph.descriptor())
    return load_bundle(emit_geometry_file(morph, gains, provenance=f"platform-{name}"))


# ---------------------------------------------------------------------------
# post-processing
# ---------------------------------------------------------------------------

class SegmentError(ValueError):
    pass


def align_and_trim(log: FlightLog) -> FlightLog:
    """Shift time so the Lissajous loop starts at 0 and drop takeoff/landing records."""
    names = log.segment_names()
    if "LISSAJOUS" not in names:
        raise SegmentError("log has no LISSAJOUS segment marker")
    t_ref = log.segments[names.index("LISSAJOUS")].t0
    keep_idx = [i for i, s in enumerate(log.segments) if s.name not in ("TAKEOFF", "LAND")]
    seg_col = log.col("seg")
    mask = np.isin(seg_col, keep_idx)
    data = log.data[mask].copy()
    # renumber segment indices into the trimmed table
    remap = {old: new for new, old in enumerate(keep_idx)}
    data[:, 1] = [remap[int(v)] for v in data[:, 1]]
    data[:, 0] = data[:, 0] - t_ref
    segments = [Segment(log.segments[i].name, log.segments[i].t0 - t_ref,
                        log.segments[i].t1 - t_ref) for i in keep_idx]
    return FlightLog(dict(log.meta), log.dt, segments, log.columns, data)


@dataclass(frozen=True)
class TrackingReport:
    per_run: np.ndarray      # runs x 4: x, y, z (m), yaw (rad)
    mean: np.ndarray
    std: np.ndarray

    AXES = ("x", "y", "z", "yaw")

    def table(self) -> str:
        lines = ["run    RMSE_x [m]  RMSE_y [m]  RMSE_z [m]  RMSE_yaw [deg]"]
        for i, r in enumerate(self.per_run, start=1):
            lines.append(f"{i:<5d} {r[0]:11.4f} {r[1]:11.4f} {r[2]:11.4f} "
                         f"{math.degrees(r[3]):15.3f}")
        m, s = self.mean, self.std
        lines.append(f"mean  {m[0]:11.4f} {m[1]:11.4f} {m[2]:11.4f} {math.degrees(m[3]):15.3f}")
        lines.append(f"std   {s[0]:11.4f} {s[1]:11.4f} {s[2]:11.4f} {math.degrees(s[3]):15.3f}")
        return "\n".join(lines) + "\n"

    def records(self) -> dict:
        return {"runs": [dict(zip(("rmse_x", "rmse_y", "rmse_z", "rmse_yaw"), r))
                         for r in self.per_run.tolist()],
                "mean": dict(zip(("rmse_x", "rmse_y", "rmse_z", "rmse_yaw"),
                                 self.mean.tolist())),
                "std": dict(zip(("rmse_x", "rmse_y", "rmse_z", "rmse_yaw"),
                                self.std.tolist()))}


def yaw_series(log: FlightLog) -> np.ndarray:
    q = log.attitude
    return np.arctan2(2 * (q[:, 0] * q[:, 3] + q[:, 1] * q[:, 2]),
                      1 - 2 * (q[:, 2] ** 2 + q[:, 3] ** 2))


def wrap_angle(a):
    """Wrap to (-pi, pi], element-wise."""
    w = np.mod(np.asarray(a, dtype=float) + np.pi, 2 * np.pi)
    w = np.where(w <= 0, w + 2 * np.pi, w)
    return w - np.pi


def run_rmse(log: FlightLog) -> np.ndarray:
    err = log.position - log.setpoint_position
    rm = np.sqrt(np.mean(err ** 2, axis=0))
    eyaw = wrap_angle(yaw_series(log) - log.col("sp_yaw"))
    return np.append(rm, math.sqrt(float(np.mean(eyaw ** 2))))


def tracking_report(logs) -> TrackingReport:
    logs = list(logs)
    if not logs:
        raise ValueError("tracking_report needs at least one log")
    per = np.array([run_rmse(lg) for lg in logs])
    std = per.std(axis=0, ddof=1) if len(per) > 1 else np.zeros(4)
    return TrackingReport(per, per.mean(axis=0), std)


def plot_csv(log: FlightLog, axis: str) -> str:
    """Time, setpoint and actual value for one axis (x, y, z or yaw)."""
    if axis == "yaw":
        sp, act = log.col("sp_yaw"), yaw_series(log)
    else:
        j = "xyz".index(axis)
        sp, act = log.setpoint_position[:, j], log.position[:, j]
    out = [f"# format_version={LOG_FORMAT_VERSION} "
           f"config_hash={log.meta.get('config_hash', '-')} axis={axis}",
           "t,setpoint,actual"]
    out += [f"{t:.3f},{s:.6f},{a:.6f}" for t, s, a in zip(log.t, sp, act)]
    return "\n".join(out) + "\n"


def cross_track_error(log: FlightLog, waypoint_ne) -> np.ndarray:
    """Horizontal distance from the start-to-waypoint line during GOTO segments."""
    n, e = waypoint_ne
    length = math.hypot(n, e)
    ux, uy = n / length, e / length
    goto = [i for i, s in enumerate(log.segments) if s.name == "GOTO"]
    mask = np.isin(log.col("seg"), goto)
    p = log.position[mask]
    return np.abs(p[:, 0] * uy - p[:, 1] * ux)
