"""Domain types and mass/inertia arithmetic.

Body frame: x forward, y right, z down, origin at the parcel's geometric
centre. All quantities are SI.
"""

from __future__ import annotations

import configparser
import enum
import hashlib
import os
from dataclasses import dataclass, fields

import numpy as np

GRAVITY = 9.80665
MAX_MODULES = 128


class SpecError(ValueError):
    """Invalid physical specification."""


class Spin(enum.Enum):
    CW = 1
    CCW = -1

    @property
    def sign(self) -> int:
        return self.value

    @property
    def opposite(self) -> "Spin":
        return Spin.CCW if self is Spin.CW else Spin.CW


@dataclass(frozen=True)
class ParcelSpec:
    mass: float
    length: float
    width: float
    height: float
    material_label: str = "unknown"

    def __post_init__(self):
        if not self.mass > 0:
            raise SpecError(f"parcel mass must be > 0, got {self.mass}")
        if not (self.width > 0 and self.height > 0):
            raise SpecError("parcel width and height must be > 0")
        if not self.length >= self.width:
            raise SpecError(
                f"parcel length ({self.length}) must be >= width ({self.width})")


@dataclass(frozen=True)
class InertiaDiag:
    Ixx: float
    Iyy: float
    Izz: float

    def __post_init__(self):
        if not (self.Ixx > 0 and self.Iyy > 0 and self.Izz > 0):
            raise SpecError(f"inertia entries must be > 0: {self}")
        # Relative slack covers rounding in the sums for thin plates.
        tol = 1e-12 * (self.Ixx + self.Iyy + self.Izz)
        if (self.Ixx + self.Iyy < self.Izz - tol or self.Iyy + self.Izz < self.Ixx - tol
                or self.Izz + self.Ixx < self.Iyy - tol):
            raise SpecError(f"inertia violates triangle inequality: {self}")

    def as_array(self) -> np.ndarray:
        return np.array([self.Ixx, self.Iyy, self.Izz])


@dataclass(frozen=True)
class ModuleSpec:
    """Propulsion module: motor, propeller, ESC and battery."""

    mass: float = 0.30
    max_thrust: float = 8.0
    prop_diameter: float = 0.12
    mount_footprint: float = 0.10
    torque_coeff_ratio: float = 0.016
    rotor_time_constant: float = 0.03
    battery_capacity: float = 51948.0  # 3S 1300 mAh

    def __post_init__(self):
        if not self.mass > 0:
            raise SpecError("module mass must be > 0")
        if not self.max_thrust > 0:
            raise SpecError("module max_thrust must be > 0")
        if not self.mount_footprint > 0:
            raise SpecError("mount_footprint must be > 0")
        if not self.prop_diameter >= self.mount_footprint:
            raise SpecError("prop_diameter must be >= mount_footprint")
        if not self.torque_coeff_ratio > 0:
            raise SpecError("torque_coeff_ratio must be > 0")
        if not (self.rotor_time_constant >= 0 and self.battery_capacity > 0):
            raise SpecError("rotor_time_constant must be >= 0, battery_capacity > 0")


@dataclass(frozen=True)
class CentralModuleSpec:
    mass: float = 0.50
    footprint_length: float = 0.15
    footprint_width: float = 0.15

    def __post_init__(self):
        if not self.mass > 0:
            raise SpecError("central module mass must be > 0")


@dataclass(frozen=True)
class ModulePlacement:
    x: float
    y: float
    spin: Spin | None = None


@dataclass(frozen=True)
class Morphology:
    parcel: ParcelSpec
    module_spec: ModuleSpec
    central: CentralModuleSpec
    placements: tuple[ModulePlacement, ...]
    forward_axis: tuple[float, float, float]
    total_mass: float
    composite_inertia: InertiaDiag
    e_H: float
    s_L: float

    @property
    def n(self) -> int:
        return len(self.placements)

    def positions(self) -> np.ndarray:
        return np.array([[p.x, p.y] for p in self.placements], dtype=float)

    def spin_signs(self) -> np.ndarray:
        return np.array([p.spin.sign for p in self.placements], dtype=float)

    def descriptor(self) -> tuple[float, float, float, int]:
        """Gain-database key: (Ixx, Iyy, total mass, module count)."""
        I = self.composite_inertia
        return (I.Ixx, I.Iyy, self.total_mass, self.n)

    def check_invariants(self) -> None:
        n = self.n
        if n % 2 or not 4 <= n <= MAX_MODULES:
            raise SpecError(f"module count {n} must be even and in [4, {MAX_MODULES}]")
        if sum(p.spin.sign for p in self.placements) != 0:
            raise SpecError("CW and CCW counts differ")
        if not is_mirror_symmetric(self.placements):
            raise SpecError("placements are not mirror-paired about the x axis")
        pos = self.positions()
        d = self.module_spec.prop_diameter
        for i in range(n):
            gaps = np.hypot(*(pos[i + 1:] - pos[i]).T)
            if np.any(gaps < d - 1e-9):
                raise SpecError("propeller disks overlap")


def box_inertia(parcel: ParcelSpec) -> InertiaDiag:
    m, L, W, H = parcel.mass, parcel.length, parcel.width, parcel.height
    return InertiaDiag(m * (W**2 + H**2) / 12, m * (L**2 + H**2) / 12,
                       m * (L**2 + W**2) / 12)


def is_mirror_symmetric(placements) -> bool:
    pts = sorted((p.x, p.y) for p in placements)
    mirrored = sorted((p.x, -p.y) for p in placements)
    return pts == mirrored


def composite_inertia(parcel: ParcelSpec, central: CentralModuleSpec, placements,
                      module_spec: ModuleSpec) -> InertiaDiag:
    """Parcel box inertia plus point-mass modules (central module sits at the origin).

    Mirror symmetry about the x axis is required: it is what makes the
    products of inertia vanish.
    """
    if not is_mirror_symmetric(placements):
        raise SpecError("placements must be mirror-symmetric about the body x axis")
    box = box_inertia(parcel)
    m = module_spec.mass
    xs = np.array([p.x for p in placements], dtype=float)
    ys = np.array([p.y for p in placements], dtype=float)
    ixx = box.Ixx + m * float(np.sum(ys**2))
    iyy = box.Iyy + m * float(np.sum(xs**2))
    izz = box.Izz + m * float(np.sum(xs**2 + ys**2))
    return InertiaDiag(ixx, iyy, izz)


def products_of_inertia(placements, module_spec: ModuleSpec) -> tuple[float, float, float]:
    """Off-diagonal accumulators (Ixy, Ixz, Iyz); identically zero for mirrored planar layouts."""
    m = module_spec.mass
    ixy = -m * sum(p.x * p.y for p in placements)
    return ixy, 0.0, 0.0


def total_mass(parcel: ParcelSpec, central: CentralModuleSpec, n: int,
               module_spec: ModuleSpec) -> float:
    if n < 0 or n > MAX_MODULES:
        raise SpecError(f"module count must be in [0, {MAX_MODULES}]")
    return parcel.mass + central.mass + n * module_spec.mass


YAW_RATE_DEFAULT = (0.2, 0.1, 0.0)


@dataclass(frozen=True)
class GainSet:
    """Rate-loop PID gains (Kp, Ki, Kd) per axis; yaw is never tuned."""

    roll: tuple[float, float, float]
    pitch: tuple[float, float, float]
    yaw: tuple[float, float, float] = YAW_RATE_DEFAULT

    def __post_init__(self):
        object.__setattr__(self, "roll", tuple(float(g) for g in self.roll))
        object.__setattr__(self, "pitch", tuple(float(g) for g in self.pitch))
        object.__setattr__(self, "yaw", tuple(float(g) for g in self.yaw))
        for g in self.roll + self.pitch + self.yaw:
            if not g >= 0:
                raise SpecError(f"gains must be >= 0: {self}")
        if self.yaw != YAW_RATE_DEFAULT:
            raise SpecError("yaw-rate gains are fixed to the default set")


# Reference parcels. Platforms A-D use parcels I-IV.
PARCELS = {
    "I": ParcelSpec(0.42, 0.50, 0.50, 0.08, "foam"),
    "II": ParcelSpec(0.76, 0.50, 0.50, 0.08, "foam"),
    "III": ParcelSpec(0.42, 1.00, 0.25, 0.08, "foam"),
    "IV": ParcelSpec(0.76, 1.00, 0.25, 0.08, "foam"),
}
PLATFORMS = {"A": PARCELS["I"], "B": PARCELS["II"], "C": PARCELS["III"], "D": PARCELS["IV"]}


# ---------------------------------------------------------------------------
# key-value spec files
# ---------------------------------------------------------------------------

_SECTIONS = {"parcel": ParcelSpec, "module": ModuleSpec, "central": CentralModuleSpec}


def _coerce(cls, section) -> dict:
    out = {}
    known = {f.name: f for f in fields(cls)}
    for key, raw in section.items():
        if key not in known:
            raise SpecError(f"unknown key {key!r} in [{section.name}]")
        out[key] = raw.strip() if key == "material_label" else float(raw)
    return out


def load_specs(path: str | os.PathLike) -> dict:
    """Read ``[parcel]``, ``[module]`` and ``[central]`` sections from an INI-style file.

    Missing sections are omitted from the result; missing keys in
    ``[module]``/``[central]`` take the defaults.
    """
    cp = configparser.ConfigParser(interpolation=None)
    with open(path, encoding="utf-8") as fh:
        cp.read_file(fh)
    specs = {}
    for name in cp.sections():
        if name not in _SECTIONS:
            raise SpecError(f"unknown section [{name}]")
        try:
            specs[name] = _SECTIONS[name](**_coerce(_SECTIONS[name], cp[name]))
        except TypeError as exc:
            raise SpecError(f"[{name}]: {exc}") from None
    return specs


def dump_specs(**specs) -> str:
    lines = []
    for name, spec in specs.items():
        lines.append(f"[{name}]")
        for f in fields(spec):
            v = getattr(spec, f.name)
            lines.append(f"{f.name} = {v if isinstance(v, str) else repr(float(v))}")
        lines.append("")
    return "\n".join(lines)


def spec_hash(*objs) -> str:
    """Short stable hash of frozen dataclasses (by field repr)."""
    h = hashlib.sha256()
    for obj in objs:
        h.update(repr(obj).encode())
    return h.hexdigest()[:16]
