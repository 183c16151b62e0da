"""Deterministic 6-DoF rigid-body simulator with rotor lag, batteries and wind.

World frame NED (z down), body frame FRD. Attitude quaternions are
``(w, x, y, z)`` rotating body vectors into the world frame.

Rotor thrust follows a first-order lag toward ``cmd * T_max``. The rotor
ODE is linear and independent of the rigid body, so its RK4 stage values
are propagated through the effectiveness matrix as 4-vectors
``[roll, pitch, yaw, thrust]`` instead of carrying all n rotors in the
integrator state; the result is identical to integrating the full system
with RK4.
"""

from __future__ import annotations

import enum
import math
from collections import deque
from dataclasses import dataclass, field, replace

import numpy as np

from .core import GRAVITY, ModuleSpec, Morphology
from .allocation import effectiveness_matrix, geometry_from_morphology

DT = 0.004
DRAG_PER_AREA = 0.5  # N s/m per m^2


class SimulationFault(RuntimeError):
    def __init__(self, tick: int, what: str = "non-finite state"):
        self.tick = tick
        super().__init__(f"{what} at tick {tick}")


# ---------------------------------------------------------------------------
# state types
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class RigidBodyState:
    position: np.ndarray = field(default_factory=lambda: np.zeros(3))
    velocity: np.ndarray = field(default_factory=lambda: np.zeros(3))
    attitude: np.ndarray = field(default_factory=lambda: np.array([1.0, 0.0, 0.0, 0.0]))
    angular_velocity: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def as_tuple(self) -> tuple:
        return tuple(np.concatenate([self.position, self.velocity, self.attitude,
                                     self.angular_velocity]).tolist())

    @classmethod
    def from_tuple(cls, y) -> "RigidBodyState":
        y = np.asarray(y, dtype=float)
        return cls(y[0:3].copy(), y[3:6].copy(), y[6:10].copy(), y[10:13].copy())


@dataclass(frozen=True)
class RotorBank:
    thrust: np.ndarray        # N, current
    command: np.ndarray       # N, commanded (cmd * T_max)

    @classmethod
    def idle(cls, n: int) -> "RotorBank":
        return cls(np.zeros(n), np.zeros(n))


@dataclass(frozen=True)
class VehicleParams:
    mass: float
    inertia: tuple[float, float, float]
    B: np.ndarray                 # 4 x n, rows [roll, pitch, yaw, thrust], thrust scale folded in
    max_thrust: float
    rotor_time_constant: float
    drag_areas: tuple[float, float, float] = (0.0, 0.0, 0.0)  # body x/y/z projected areas
    drag_coeff: float = DRAG_PER_AREA

    @property
    def n(self) -> int:
        return self.B.shape[1]

    @classmethod
    def from_morphology(cls, morphology: Morphology, drag_coeff: float = DRAG_PER_AREA,
                        thrust_scale=None) -> "VehicleParams":
        p = morphology.parcel
        B = effectiveness_matrix(geometry_from_morphology(morphology))
        if thrust_scale is not None:
            B = B * np.asarray(thrust_scale, dtype=float)
        I = morphology.composite_inertia
        ms: ModuleSpec = morphology.module_spec
        # x is the length axis: front face W*H, side face L*H, top L*W
        areas = (p.width * p.height, p.length * p.height, p.length * p.width)
        return cls(morphology.total_mass, (I.Ixx, I.Iyy, I.Izz), B, ms.max_thrust,
                   ms.rotor_time_constant, areas, drag_coeff)


# ---------------------------------------------------------------------------
# quaternion helpers
# ---------------------------------------------------------------------------

def quat_from_euler(roll: float, pitch: float, yaw: float) -> np.ndarray:
    cr, sr = math.cos(roll / 2), math.sin(roll / 2)
    cp, sp = math.cos(pitch / 2), math.sin(pitch / 2)
    cy, sy = math.cos(yaw / 2), math.sin(yaw / 2)
    return np.array([cr * cp * cy + sr * sp * sy, sr * cp * cy - cr * sp * sy,
                     cr * sp * cy + sr * cp * sy, cr * cp * sy - sr * sp * cy])


def euler_from_quat(q) -> tuple[float, float, float]:
    w, x, y, z = q
    roll = math.atan2(2 * (w * x + y * z), 1 - 2 * (x * x + y * y))
    pitch = math.asin(max(-1.0, min(1.0, 2 * (w * y - z * x))))
    yaw = math.atan2(2 * (w * z + x * y), 1 - 2 * (y * y + z * z))
    return roll, pitch, yaw


def tilt_angle(q) -> float:
    """Angle between body z and world z."""
    w, x, y, z = q
    return math.acos(max(-1.0, min(1.0, 1 - 2 * (x * x + y * y))))


# ---------------------------------------------------------------------------
# integration core
# ---------------------------------------------------------------------------

def _deriv(y, agg, wind, mass, inv_i, inertia, areas, cd):
    px, py, pz, vx, vy, vz, qw, qx, qy, qz, wx, wy, wz = y
    mx, my, mz, thrust = agg
    # rotation matrix body->world
    r00 = 1 - 2 * (qy * qy + qz * qz); r01 = 2 * (qx * qy - qw * qz); r02 = 2 * (qx * qz + qw * qy)
    r10 = 2 * (qx * qy + qw * qz); r11 = 1 - 2 * (qx * qx + qz * qz); r12 = 2 * (qy * qz - qw * qx)
    r20 = 2 * (qx * qz - qw * qy); r21 = 2 * (qy * qz + qw * qx); r22 = 1 - 2 * (qx * qx + qy * qy)
    fx = -thrust * r02
    fy = -thrust * r12
    fz = -thrust * r22
    if cd:
        ux, uy, uz = vx - wind[0], vy - wind[1], vz - wind[2]
        bx = -cd * areas[0] * (r00 * ux + r10 * uy + r20 * uz)
        by = -cd * areas[1] * (r01 * ux + r11 * uy + r21 * uz)
        bz = -cd * areas[2] * (r02 * ux + r12 * uy + r22 * uz)
        fx += r00 * bx + r01 * by + r02 * bz
        fy += r10 * bx + r11 * by + r12 * bz
        fz += r20 * bx + r21 * by + r22 * bz
    ixx, iyy, izz = inertia
    return (vx, vy, vz,
            fx / mass, fy / mass, fz / mass + GRAVITY,
            -0.5 * (qx * wx + qy * wy + qz * wz),
            0.5 * (qw * wx + qy * wz - qz * wy),
            0.5 * (qw * wy - qx * wz + qz * wx),
            0.5 * (qw * wz + qx * wy - qy * wx),
            (mx - (izz - iyy) * wy * wz) * inv_i[0],
            (my - (ixx - izz) * wz * wx) * inv_i[1],
            (mz - (iyy - ixx) * wx * wy) * inv_i[2])


def _rotor_stages(f, c, a):
    """RK4 stage values of the lag f' = (c - f)/tau, a = dt/tau (works on arrays)."""
    f2 = f + 0.5 * a * (c - f)
    f3 = f + 0.5 * a * (c - f2)
    f4 = f + a * (c - f3)
    f_next = f + (a / 6.0) * ((c - f) + 2 * (c - f2) + 2 * (c - f3) + (c - f4))
    return f2, f3, f4, f_next


def _agg(B, f):
    w = B @ f
    return (w[0], w[1], w[2], w[3])


def _rk4(y, params: VehicleParams, f, c, dt, winds):
    """One RK4 step; returns (next rigid-body tuple, next rotor thrusts)."""
    tau = params.rotor_time_constant
    B = params.B
    if tau > 0:
        a = dt / tau
        f2, f3, f4, f_next = _rotor_stages(f, c, a)
        w1, w2, w3, w4 = _agg(B, f), _agg(B, f2), _agg(B, f3), _agg(B, f4)
    else:
        f_next = c
        w1 = w2 = w3 = w4 = _agg(B, c)
    m, inertia, areas, cd = params.mass, params.inertia, params.drag_areas, params.drag_coeff
    inv_i = (1 / inertia[0], 1 / inertia[1], 1 / inertia[2])
    h = 0.5 * dt
    k1 = _deriv(y, w1, winds[0], m, inv_i, inertia, areas, cd)
    k2 = _deriv([a_ + h * b for a_, b in zip(y, k1)], w2, winds[1], m, inv_i, inertia, areas, cd)
    k3 = _deriv([a_ + h * b for a_, b in zip(y, k2)], w3, winds[1], m, inv_i, inertia, areas, cd)
    k4 = _deriv([a_ + dt * b for a_, b in zip(y, k3)], w4, winds[2], m, inv_i, inertia, areas,
                cd)
    s = dt / 6.0
    out = [a_ + s * (b1 + 2 * b2 + 2 * b3 + b4) for a_, b1, b2, b3, b4 in zip(y, k1, k2, k3, k4)]
    qn = math.sqrt(out[6] ** 2 + out[7] ** 2 + out[8] ** 2 + out[9] ** 2)
    out[6] /= qn; out[7] /= qn; out[8] /= qn; out[9] /= qn
    return out, f_next


_CALM = ((0.0, 0.0, 0.0),) * 3


def step(state: RigidBodyState, rotors: RotorBank, motor_cmds, dt: float,
         params: VehicleParams, wind: "WindModel | None" = None, t: float = 0.0,
         tick: int = 0) -> tuple[RigidBodyState, RotorBank]:
    """Advance one fixed step with motor commands held constant (values in [0, 1])."""
    if not 0 < dt <= 0.01:
        raise ValueError("dt must be in (0, 0.01]")
    cmds = np.clip(np.asarray(motor_cmds, dtype=float), 0.0, 1.0)
    c = cmds * params.max_thrust
    winds = _CALM if wind is None else (wind.sample(t), wind.sample(t + dt / 2),
                                        wind.sample(t + dt))
    y, f = _rk4(list(state.as_tuple()), params, rotors.thrust, c, dt, winds)
    if not (all(map(math.isfinite, y)) and np.all(np.isfinite(f))):
        raise SimulationFault(tick)
    return RigidBodyState.from_tuple(y), RotorBank(np.clip(f, 0.0, params.max_thrust), c)


# ---------------------------------------------------------------------------
# test rig
# ---------------------------------------------------------------------------

_AXIS_INDEX = {"roll": 0, "pitch": 1}


@dataclass(frozen=True)
class TestRigConstraint:
    """Lock every degree of freedom except rotation about one body axis."""

    __test__ = False  # not a pytest class
    free_axis: str
    initial: RigidBodyState = field(default_factory=RigidBodyState)

    def __post_init__(self):
        if self.free_axis not in _AXIS_INDEX:
            raise ValueError("free_axis must be 'roll' or 'pitch'")


def apply_test_rig(state: RigidBodyState, constraint: TestRigConstraint) -> RigidBodyState:
    """Reset all constrained components to the rig's initial values.

    The attitude is rebuilt as a pure rotation about the free axis, keeping
    the free-axis angle from ``state``.
    """
    j = _AXIS_INDEX[constraint.free_axis]
    q = state.attitude
    angle = 2 * math.atan2(q[1 + j], q[0])
    att = np.array([1.0, 0.0, 0.0, 0.0])
    att[0], att[1 + j] = math.cos(angle / 2), math.sin(angle / 2)
    w = np.zeros(3)
    w[j] = state.angular_velocity[j]
    ini = constraint.initial
    return RigidBodyState(ini.position.copy(), ini.velocity.copy(), att, w)


@dataclass
class TuneTrace:
    t: np.ndarray
    angle: np.ndarray
    rate: np.ndarray
    command: np.ndarray
    gains: tuple = ()

    @property
    def dt(self) -> float:
        return float(self.t[1] - self.t[0])


class SingleAxisRig:
    """Reduced dynamics of the test rig: one rotational DoF, per-motor lag and saturation.

    Equivalent to the full simulator under ``apply_test_rig`` (everything
    else is locked, so only the free-axis moment row matters).
    """

    def __init__(self, inertia: float, torque_row, mixer_col, hover_cmd, max_thrust: float,
                 rotor_time_constant: float, dt: float = DT, delay_ticks: int = 1):
        self.inertia = float(inertia)
        self.torque_row = np.asarray(torque_row, dtype=float)
        self.mixer_col = np.asarray(mixer_col, dtype=float)
        self.hover_cmd = np.asarray(hover_cmd, dtype=float)
        self.max_thrust = float(max_thrust)
        self.tau = float(rotor_time_constant)
        self.dt = float(dt)
        self.delay_ticks = int(delay_ticks)

    @classmethod
    def generic(cls, inertia: float, rotor_time_constant: float, dt: float = DT,
                torque_per_command: float = 1.0, delay_ticks: int = 1) -> "SingleAxisRig":
        """Two opposing virtual motors: torque = torque_per_command * u, saturating at |u| = 1."""
        half = 0.5 * torque_per_command
        return cls(inertia, [half, -half], [1.0, -1.0],
                   [0.5, 0.5], 1.0, rotor_time_constant, dt, delay_ticks)

    @classmethod
    def from_morphology(cls, morphology: Morphology, mixer, axis: str,
                        dt: float = DT) -> "SingleAxisRig":
        j = _AXIS_INDEX[axis]
        B = effectiveness_matrix(geometry_from_morphology(morphology))
        M = mixer.matrix
        t_hover = morphology.total_mass * GRAVITY / (morphology.module_spec.max_thrust
                                                      * mixer.authority[3])
        I = morphology.composite_inertia
        return cls((I.Ixx, I.Iyy)[j], B[j], M[:, j], M[:, 3] * t_hover,
                   morphology.module_spec.max_thrust,
                   morphology.module_spec.rotor_time_constant, dt)

    @property
    def torque_per_command(self) -> float:
        return float(self.max_thrust * self.torque_row @ self.mixer_col)

    def run(self, controller, duration: float, initial_rate: float = 0.0,
            initial_angle: float = 0.0) -> TuneTrace:
        """Closed-loop run; ``controller(rate, angle, t) -> u`` sees the state at each tick.

        Commands reach the motors ``delay_ticks`` later and are held for one tick.
        """
        dt, tau, I = self.dt, self.tau, self.inertia
        n_ticks = int(round(duration / dt))
        th, om = float(initial_angle), float(initial_rate)
        f = self.hover_cmd * self.max_thrust
        row = self.torque_row
        pending = deque([0.0] * self.delay_ticks)
        ts = np.arange(n_ticks) * dt
        angles = np.empty(n_ticks)
        rates = np.empty(n_ticks)
        applied = np.empty(n_ticks)
        a = dt / tau if tau > 0 else None
        for k in range(n_ticks):
            angles[k], rates[k] = th, om
            pending.append(controller(om, th, k * dt))
            u = pending.popleft()
            applied[k] = u
            c = np.clip(self.hover_cmd + self.mixer_col * u, 0.0, 1.0) * self.max_thrust
            if a is None:
                m1 = m2 = m3 = m4 = float(row @ c)
                f = c
            else:
                f2, f3, f4, f_next = _rotor_stages(f, c, a)
                m1, m2, m3, m4 = (float(row @ f), float(row @ f2), float(row @ f3),
                                  float(row @ f4))
                f = f_next
            # RK4 on (angle, rate) with the staged moments
            k1w, k2w, k3w, k4w = m1 / I, m2 / I, m3 / I, m4 / I
            th += dt * (om + (om + 0.5 * dt * k1w) * 2 + (om + 0.5 * dt * k2w) * 2
                        + (om + dt * k3w)) / 6.0
            om += dt * (k1w + 2 * k2w + 2 * k3w + k4w) / 6.0
            if not (math.isfinite(om) and math.isfinite(th)):
                raise SimulationFault(k)
        return TuneTrace(ts, angles, rates, applied)


# ---------------------------------------------------------------------------
# batteries and safety
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class BatteryModel:
    """Per-module power draw P = c0 + c1 * thrust**1.5 (W, thrust in N)."""

    capacity: float
    c0: float = 2.0
    c1: float = 9.164
    reserve_fraction: float = 0.2

    @classmethod
    def for_module(cls, spec: ModuleSpec, hover_fraction: float = 0.55,
                   endurance: float = 600.0, c0: float = 2.0) -> "BatteryModel":
        """Choose c1 so hovering at ``hover_fraction * T_max`` lasts ``endurance`` seconds."""
        thrust = hover_fraction * spec.max_thrust
        c1 = (spec.battery_capacity / endurance - c0) / thrust**1.5
        return cls(spec.battery_capacity, c0, c1)

    def power(self, thrust):
        return self.c0 + self.c1 * np.power(np.maximum(thrust, 0.0), 1.5)


@dataclass(frozen=True)
class BatteryBank:
    energy: np.ndarray
    discharged: np.ndarray

    @classmethod
    def full(cls, n: int, model: BatteryModel) -> "BatteryBank":
        return cls(np.full(n, model.capacity), np.zeros(n, dtype=bool))

    @property
    def discharged_count(self) -> int:
        return int(np.count_nonzero(self.discharged))


def battery_step(bank: BatteryBank, thrust, dt: float, model: BatteryModel) -> BatteryBank:
    energy = np.maximum(bank.energy - model.power(np.asarray(thrust, dtype=float)) * dt, 0.0)
    flags = bank.discharged | (energy < model.reserve_fraction * model.capacity)
    return BatteryBank(energy, flags)


def force_discharge(bank: BatteryBank, module: int) -> BatteryBank:
    flags = bank.discharged.copy()
    flags[module] = True
    return replace(bank, discharged=flags)


class SafetyAction(enum.Enum):
    NONE = 0
    RETURN = 1
    LAND = 2


@dataclass(frozen=True)
class SafetyPolicy:
    k_return: int = 1
    k_land: int = 2

    def __post_init__(self):
        if not 0 < self.k_return <= self.k_land:
            raise ValueError("need 0 < k_return <= k_land")


def safety_monitor(bank: BatteryBank, policy: SafetyPolicy) -> SafetyAction:
    count = bank.discharged_count
    if count >= policy.k_land:
        return SafetyAction.LAND
    if count >= policy.k_return:
        return SafetyAction.RETURN
    return SafetyAction.NONE


# ---------------------------------------------------------------------------
# wind
# ---------------------------------------------------------------------------

class WindModel:
    """Mean wind plus a band-limited gust built from seeded sinusoids.

    Each horizontal gust component is a sum of sinusoids whose amplitudes
    add up to ``amplitude / sqrt(2)``, so the gust magnitude never exceeds
    ``amplitude``. Frequencies lie in [0.5, 2] / gust_period.
    """

    def __init__(self, mean=(0.0, 0.0, 0.0), amplitude: float = 0.0, gust_period: float = 4.0,
                 seed: int = 0, n_modes: int = 6):
        self.mean = tuple(float(v) for v in mean)
        self.amplitude = float(amplitude)
        self.gust_period = float(gust_period)
        self.seed = int(seed)
        rng = np.random.default_rng(self.seed)
        w = rng.uniform(0.5, 1.0, size=(2, n_modes))
        w *= (self.amplitude / math.sqrt(2)) / w.sum(axis=1, keepdims=True)
        self._amp = w.tolist()
        self._omega = (2 * math.pi * rng.uniform(0.5, 2.0, size=(2, n_modes))
                       / self.gust_period).tolist()
        self._phase = rng.uniform(0, 2 * math.pi, size=(2, n_modes)).tolist()

    def sample(self, t: float) -> tuple[float, float, float]:
        if self.amplitude == 0.0:
            return self.mean
        gx = sum(a * math.sin(o * t + p)
                 for a, o, p in zip(self._amp[0], self._omega[0], self._phase[0]))
        gy = sum(a * math.sin(o * t + p)
                 for a, o, p in zip(self._amp[1], self._omega[1], self._phase[1]))
        return (self.mean[0] + gx, self.mean[1] + gy, self.mean[2])

    @classmethod
    def from_direction(cls, speed: float, from_bearing_deg: float, amplitude: float,
                       gust_period: float = 4.0, seed: int = 0) -> "WindModel":
        """Mean wind blowing *from* a compass bearing (NED world frame)."""
        to = math.radians(from_bearing_deg + 180.0)
        return cls((speed * math.cos(to), speed * math.sin(to), 0.0), amplitude, gust_period,
                   seed)


def sample_wind(model: WindModel, t: float) -> np.ndarray:
    return np.array(model.sample(t))


# ---------------------------------------------------------------------------
# stateful simulator used by the flight runners
# ---------------------------------------------------------------------------

class Simulator:
    """Owns one vehicle's state; steps at a fixed dt with optional ground contact."""

    def __init__(self, params: VehicleParams, state: RigidBodyState | None = None,
                 dt: float = DT, wind: WindModel | None = None, ground: bool = True):
        self.params = params
        self.dt = dt
        self.wind = wind
        self.ground = ground
        self.y = list((state or RigidBodyState()).as_tuple())
        self.f = np.zeros(params.n)
        self.tick = 0

    @property
    def t(self) -> float:
        return self.tick * self.dt

    @property
    def state(self) -> RigidBodyState:
        return RigidBodyState.from_tuple(self.y)

    @property
    def thrust(self) -> np.ndarray:
        return self.f

    def on_ground(self) -> bool:
        return self.ground and self.y[2] >= 0.0

    def step(self, cmds) -> None:
        dt, t = self.dt, self.t
        c = np.clip(cmds, 0.0, 1.0) * self.params.max_thrust
        w = self.wind
        winds = _CALM if w is None else (w.sample(t), w.sample(t + dt / 2), w.sample(t + dt))
        y, f = _rk4(self.y, self.params, self.f, c, dt, winds)
        if not all(map(math.isfinite, y)):
            raise SimulationFault(self.tick)
        if self.ground and y[2] >= 0.0 and y[5] >= 0.0:
            # resting contact: stop at the plane, keep heading, level out
            _, _, yaw = euler_from_quat(y[6:10])
            q = quat_from_euler(0.0, 0.0, yaw)
            y[0:3] = [y[0], y[1], 0.0]
            y[3:6] = [0.0, 0.0, 0.0]
            y[6:10] = q.tolist()
            y[10:13] = [0.0, 0.0, 0.0]
        self.y = y
        self.f = f
        self.tick += 1
