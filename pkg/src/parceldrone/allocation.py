"""Geometry artifacts and control allocation.

The effectiveness matrix ``B`` (4 x n) maps per-rotor thrust to
[roll moment, pitch moment, yaw moment, total thrust]; the mixer is its
pseudo-inverse with every column scaled to unit max-abs, so motor commands
stay normalized to [0, 1].
"""

from __future__ import annotations

import configparser
import io
import math
import warnings
from dataclasses import dataclass

import numpy as np

from .core import (CentralModuleSpec, GainSet, ModulePlacement, ModuleSpec, Morphology,
                   ParcelSpec, Spin, composite_inertia, total_mass)

AXES = ("roll", "pitch", "yaw", "thrust")
FORMAT_VERSION = 1


class UncontrollableConfiguration(ValueError):
    def __init__(self, axis: str, detail: str = ""):
        self.axis = axis
        super().__init__(f"uncontrollable configuration: {axis} axis {detail}".rstrip())


class LayoutParseError(ValueError):
    pass


class BundleError(ValueError):
    pass


@dataclass(frozen=True)
class Rotor:
    x: float
    y: float
    z: float
    spin: Spin


@dataclass(frozen=True)
class GeometrySpec:
    rotors: tuple[Rotor, ...]
    torque_coeff_ratio: float
    thrust_axis: tuple[float, float, float] = (0.0, 0.0, -1.0)

    @property
    def n(self) -> int:
        return len(self.rotors)


@dataclass(frozen=True)
class MixerMatrix:
    """n x 4 weights, columns [roll, pitch, yaw, thrust]."""

    matrix: np.ndarray
    # diagonal of B @ M: physical output per unit normalized command, per unit thrust
    authority: np.ndarray

    @property
    def n(self) -> int:
        return self.matrix.shape[0]


def geometry_from_morphology(morphology: Morphology) -> GeometrySpec:
    rotors = tuple(Rotor(p.x, p.y, 0.0, p.spin) for p in morphology.placements)
    return GeometrySpec(rotors, morphology.module_spec.torque_coeff_ratio)


def effectiveness_matrix(geometry: GeometrySpec) -> np.ndarray:
    k = geometry.torque_coeff_ratio
    B = np.empty((4, geometry.n))
    for i, r in enumerate(geometry.rotors):
        B[:, i] = (-r.y, r.x, r.spin.sign * k, 1.0)
    return B


def _deficient_axis(B: np.ndarray, tol: float = 1e-9) -> str:
    for j in range(4):
        others = np.delete(B, j, axis=0)
        coef, *_ = np.linalg.lstsq(others.T, B[j], rcond=None)
        resid = np.linalg.norm(B[j] - others.T @ coef)
        if resid <= tol * max(np.linalg.norm(B[j]), 1e-300):
            return AXES[j]
    return "unknown"


def mixer_from_geometry(geometry: GeometrySpec) -> MixerMatrix:
    B = effectiveness_matrix(geometry)
    if np.linalg.matrix_rank(B) < 4:
        raise UncontrollableConfiguration(_deficient_axis(B), "(effectiveness matrix rank < 4)")
    M = np.linalg.pinv(B)
    M = M / np.max(np.abs(M), axis=0)
    for j, axis in enumerate(AXES[:3]):
        col = M[:, j]
        if not (np.any(col > 0) and np.any(col < 0)):
            raise UncontrollableConfiguration(axis, "(one-signed mixer column)")
    if np.any(M[:, 3] <= 0):
        raise UncontrollableConfiguration("thrust", "(non-positive thrust weights)")
    return MixerMatrix(M, np.diag(B @ M).copy())


def mix(mixer: MixerMatrix, roll: float, pitch: float, yaw: float,
        thrust: float) -> np.ndarray:
    """Motor commands in [0, 1] with roll/pitch prioritized over yaw.

    Roll/pitch + thrust are fitted first by shifting the common mode (and
    scaling the attitude part only if its spread exceeds the full range);
    yaw then gets whatever headroom remains.
    """
    M = mixer.matrix
    rp = M[:, 0] * roll + M[:, 1] * pitch
    base = M[:, 3] * thrust
    out = base + rp
    lo, hi = out.min(), out.max()
    if hi - lo > 1.0:
        span = rp.max() - rp.min()
        scale = 1.0 / span if span > 0 else 0.0
        rp = rp * scale
        out = base + rp
        lo, hi = out.min(), out.max()
    if lo < 0.0:
        out = out - lo
    elif hi > 1.0:
        out = out - (hi - 1.0)
    y = M[:, 2] * yaw
    if yaw != 0.0:
        with np.errstate(divide="ignore", invalid="ignore"):
            up = np.where(y > 0, (1.0 - out) / y, np.inf)
            dn = np.where(y < 0, -out / y, np.inf)
        f = min(1.0, float(np.min(up)), float(np.min(dn)))
        out = out + max(f, 0.0) * y
    return np.clip(out, 0.0, 1.0)


# ---------------------------------------------------------------------------
# layout CSV
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class LayoutRow:
    index: int
    x: float
    y: float
    z: float
    spin: Spin


def _g6(v: float) -> str:
    s = f"{v:.6g}"
    return "0" if s == "-0" else s


def layout_rows(morphology: Morphology) -> list[LayoutRow]:
    return [LayoutRow(i, p.x, p.y, 0.0, p.spin)
            for i, p in enumerate(morphology.placements, start=1)]


def emit_layout_csv(rows_or_morphology, config_hash: str = "-") -> str:
    """Rotor table as CSV: a comment line with version/hash, a header, one row per rotor."""
    rows = (layout_rows(rows_or_morphology) if isinstance(rows_or_morphology, Morphology)
            else rows_or_morphology)
    out = [f"# format_version={FORMAT_VERSION} config_hash={config_hash}",
           "index,x,y,z,spin"]
    for r in rows:
        out.append(f"{r.index},{_g6(r.x)},{_g6(r.y)},{_g6(r.z)},{r.spin.name}")
    return "\n".join(out) + "\n"


def parse_layout_csv(text: str) -> list[LayoutRow]:
    rows, seen, header_seen = [], set(), False
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        fields = [f.strip() for f in line.split(",")]
        if not header_seen:
            if [f.lower() for f in fields] != ["index", "x", "y", "z", "spin"]:
                raise LayoutParseError(f"line {lineno}: expected header 'index,x,y,z,spin'")
            header_seen = True
            continue
        if len(fields) != 5:
            raise LayoutParseError(f"line {lineno}: expected 5 fields, got {len(fields)}")
        try:
            idx = int(fields[0])
            x, y, z = (float(f) for f in fields[1:4])
            spin = Spin[fields[4].upper()]
        except (ValueError, KeyError):
            raise LayoutParseError(f"line {lineno}: malformed row {raw!r}") from None
        if not all(math.isfinite(v) for v in (x, y, z)):
            raise LayoutParseError(f"line {lineno}: non-finite coordinate")
        if idx in seen:
            raise LayoutParseError(f"line {lineno}: duplicate index {idx}")
        seen.add(idx)
        rows.append(LayoutRow(idx, x, y, z, spin))
    if not header_seen:
        raise LayoutParseError("missing header row")
    if len(rows) % 2:
        warnings.warn(f"layout has an odd rotor count ({len(rows)})", stacklevel=2)
    return rows


# ---------------------------------------------------------------------------
# configuration bundle
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Bundle:
    morphology: Morphology
    geometry: GeometrySpec
    mixer: MixerMatrix
    gains: GainSet
    meta: dict


def _r(v) -> str:
    return repr(float(v))


def emit_geometry_file(morphology: Morphology, gains: GainSet, mixer: MixerMatrix | None = None,
                       provenance: str = "-", config_hash: str = "-") -> str:
    """Self-contained configuration bundle (INI sections: bundle, meta, rotors, mixer, gains).

    Floats are written with ``repr`` so loading is bit-exact.
    """
    geometry = geometry_from_morphology(morphology)
    mixer = mixer or mixer_from_geometry(geometry)
    p, ms, c = morphology.parcel, morphology.module_spec, morphology.central
    axis = "length" if morphology.forward_axis[0] == 1.0 else "width"
    lines = ["# parceldrone configuration bundle", "[bundle]",
             f"format_version = {FORMAT_VERSION}", f"config_hash = {config_hash}", "",
             "[meta]",
             f"parcel = {_r(p.mass)} {_r(p.length)} {_r(p.width)} {_r(p.height)}",
             f"material = {p.material_label}",
             f"forward_axis = {axis}",
             f"module = {_r(ms.mass)} {_r(ms.max_thrust)} {_r(ms.prop_diameter)} "
             f"{_r(ms.mount_footprint)} {_r(ms.torque_coeff_ratio)} "
             f"{_r(ms.rotor_time_constant)} {_r(ms.battery_capacity)}",
             f"central = {_r(c.mass)} {_r(c.footprint_length)} {_r(c.footprint_width)}",
             f"e_h = {_r(morphology.e_H)}", f"s_l = {_r(morphology.s_L)}", "",
             "[rotors]", f"count = {geometry.n}",
             f"torque_coeff_ratio = {_r(geometry.torque_coeff_ratio)}"]
    for i, r in enumerate(geometry.rotors, start=1):
        lines.append(f"rotor.{i} = {_r(r.x)} {_r(r.y)} {_r(r.z)} {r.spin.name}")
    lines += ["", "[mixer]", "columns = roll pitch yaw thrust"]
    for i, row in enumerate(mixer.matrix, start=1):
        lines.append(f"row.{i} = " + " ".join(_r(v) for v in row))
    lines += ["", "[gains]",
              "roll_rate = " + " ".join(_r(g) for g in gains.roll),
              "pitch_rate = " + " ".join(_r(g) for g in gains.pitch),
              "yaw_rate = " + " ".join(_r(g) for g in gains.yaw),
              f"source = {provenance}"]
    return "\n".join(lines) + "\n"


def load_bundle(text: str) -> Bundle:
    cp = configparser.ConfigParser(interpolation=None)
    try:
        cp.read_file(io.StringIO(text))
    except configparser.Error as exc:
        raise BundleError(f"malformed bundle: {exc}") from None
    for sec in ("bundle", "meta", "rotors", "mixer"):
        if not cp.has_section(sec):
            raise BundleError(f"{sec} missing")
    if not cp.has_section("gains"):
        raise BundleError("gains missing")
    version = cp.getint("bundle", "format_version")
    if version != FORMAT_VERSION:
        raise BundleError(f"unsupported format_version {version}")
    meta = cp["meta"]
    parcel = ParcelSpec(*map(float, meta["parcel"].split()), meta.get("material", "unknown"))
    ms = ModuleSpec(*map(float, meta["module"].split()))
    central = CentralModuleSpec(*map(float, meta["central"].split()))
    n = cp.getint("rotors", "count")
    placements = []
    for i in range(1, n + 1):
        x, y, _z, spin = cp["rotors"][f"rotor.{i}"].split()
        placements.append(ModulePlacement(float(x), float(y), Spin[spin]))
    forward = (1.0, 0.0, 0.0) if meta["forward_axis"] == "length" else (0.0, 1.0, 0.0)
    morph = Morphology(parcel, ms, central, tuple(placements), forward,
                       total_mass(parcel, central, n, ms),
                       composite_inertia(parcel, central, placements, ms),
                       float(meta["e_h"]), float(meta["s_l"]))
    geometry = geometry_from_morphology(morph)
    M = np.array([[float(v) for v in cp["mixer"][f"row.{i}"].split()]
                  for i in range(1, n + 1)])
    mixer = MixerMatrix(M, np.diag(effectiveness_matrix(geometry) @ M).copy())
    g = cp["gains"]
    try:
        gains = GainSet(*(tuple(float(v) for v in g[key].split())
                          for key in ("roll_rate", "pitch_rate", "yaw_rate")))
    except KeyError as exc:
        raise BundleError(f"gains missing: {exc}") from None
    info = {"config_hash": cp.get("bundle", "config_hash"), "source": g.get("source", "-")}
    return Bundle(morph, geometry, mixer, gains, info)
