"""Morphology generation: module count, placement, spins and flight direction.

Candidate module counts are filtered by hover effort and available edge
space, ranked by ``w_e * e_H + w_s * s_L``, then the chosen count is laid
out on a millimetre grid along the two long parcel edges so that the
roll/pitch control-moment ratio matches a target ratio.
"""

from __future__ import annotations

import enum
import warnings
from dataclasses import dataclass

from .core import (GRAVITY, MAX_MODULES, CentralModuleSpec, ModulePlacement, ModuleSpec,
                   Morphology, ParcelSpec, SpecError, Spin, box_inertia, composite_inertia,
                   total_mass)


class NoViableConfiguration(RuntimeError):
    pass


class RatioMode(enum.Enum):
    SIZE = "size"
    INERTIA = "inertia"


@dataclass(frozen=True)
class MorphogenWeights:
    w_e: float = 1.0
    w_s: float = 1.0  # 1/m
    e_H_threshold: float = 0.60
    ratio_mode: RatioMode = RatioMode.INERTIA

    def __post_init__(self):
        if self.w_e < 0 or self.w_s < 0:
            raise SpecError("weights must be >= 0")
        if self.w_e == 0 and self.w_s == 0:
            raise SpecError("w_e and w_s cannot both be zero")
        if not 0 < self.e_H_threshold < 1:
            raise SpecError("e_H_threshold must be in (0, 1)")


@dataclass(frozen=True)
class CandidateConfig:
    n: int
    e_H: float
    s_L: float
    score: float


@dataclass(frozen=True)
class FlightDirection:
    axis: str  # "length" or "width"
    heading: tuple[float, float, float]
    frontal_area: float


def effort_at_hover(parcel: ParcelSpec, central: CentralModuleSpec, n: int,
                    module_spec: ModuleSpec) -> float:
    """Fraction of the total available thrust needed to hover (may exceed 1)."""
    if n < 1:
        raise SpecError("effort at hover needs at least one module")
    return total_mass(parcel, central, n, module_spec) * GRAVITY / (n * module_spec.max_thrust)


def space_left(parcel: ParcelSpec, n: int, module_spec: ModuleSpec) -> float:
    """Summed slack on both long edges with n/2 propellers per edge; < 0 means no fit."""
    per_edge = n / 2
    return 2 * (parcel.length - per_edge * module_spec.prop_diameter)


def score(e_H: float, s_L: float, weights: MorphogenWeights) -> float:
    return weights.w_e * e_H + weights.w_s * s_L


def enumerate_viable(parcel: ParcelSpec, central: CentralModuleSpec, module_spec: ModuleSpec,
                     weights: MorphogenWeights) -> list[CandidateConfig]:
    """All even n in [4, 128] passing the effort and space filters, best score first.

    An empty list means no configuration is viable.
    """
    if parcel.width < module_spec.prop_diameter:
        # propellers on opposite edges would overlap across the parcel
        return []
    out = []
    for n in range(4, MAX_MODULES + 1, 2):
        e = effort_at_hover(parcel, central, n, module_spec)
        s = space_left(parcel, n, module_spec)
        if e <= weights.e_H_threshold and s > 0:
            out.append(CandidateConfig(n, e, s, score(e, s, weights)))
    out.sort(key=lambda c: (-c.score, c.n))
    return out


def ratio_target(parcel: ParcelSpec, mode: RatioMode) -> float:
    if mode is RatioMode.SIZE:
        return parcel.width / (parcel.width + parcel.length)
    I = box_inertia(parcel)
    return I.Ixx / (I.Ixx + I.Iyy)


# ---------------------------------------------------------------------------
# placement search
# ---------------------------------------------------------------------------

def _mm(v: float) -> int:
    return int(round(v * 1000))


def slot_positions_mm(length: float, n: int) -> list[int]:
    """n + 1 uniformly spaced longitudinal slots over [-L/2, L/2], in whole mm.

    Built from the rear half and mirrored so the grid is exactly symmetric.
    """
    rear = [_mm(-length / 2 + i * length / n) for i in range(n // 2)]
    return rear + [0] + [-p for p in reversed(rear)]


def achieved_ratio_mm(slots_mm, half_width_mm: int) -> float:
    """r = Mx / (Mx + My) for one edge's slot set mirrored onto the other edge.

    The common factor T_max cancels, so only lever-arm sums remain.
    """
    sy = len(slots_mm) * half_width_mm
    sx = sum(abs(p) for p in slots_mm)
    return sy / (sy + sx)


def _search_slots(pos: list[int], k: int, dmin: int, half_width: int, target: float,
                  node_budget: int = 2_000_000) -> tuple[int, ...]:
    """Lexicographically first slot-index set minimizing (|r - target|, |sum x|).

    Both extreme slots are always used. A branch is pruned when no sum of
    lever arms it can reach (gaps ignored, so the bound is loose but valid)
    gets closer to the target than the incumbent.
    """
    n = len(pos) - 1
    absx = [abs(p) for p in pos]
    sy = k * half_width
    s_star = sy * (1 / target - 1)  # lever-arm sum giving r == target exactly

    def err(sx):
        return abs(sy / (sy + sx) - target)

    best_key, best_idx = None, None
    budget = node_budget

    def recurse(chosen, sx, remaining):
        nonlocal best_key, best_idx, budget
        budget -= 1
        if budget < 0:
            return
        last = chosen[-1]
        if remaining == 0:
            if pos[n] - pos[last] < dmin:
                return
            key = (err(sx + absx[n]), abs(sum(pos[i] for i in chosen) + pos[n]))
            if best_key is None or key < best_key:
                best_key, best_idx = key, tuple(chosen) + (n,)
            return
        lo = last + 1
        while lo < n and pos[lo] - pos[last] < dmin:
            lo += 1
        window = sorted(absx[lo:n])
        if len(window) < remaining:
            return
        if best_key is not None:
            smin = sx + sum(window[:remaining]) + absx[n]
            smax = sx + sum(window[-remaining:]) + absx[n]
            e_lo = 0.0 if smin <= s_star <= smax else min(err(smin), err(smax))
            if e_lo > best_key[0]:
                return
        for i in range(lo, n):
            recurse(chosen + [i], sx + absx[i], remaining - 1)

    recurse([0], absx[0], k - 2)
    if budget < 0:
        warnings.warn("placement search truncated; result may not be globally optimal",
                      RuntimeWarning, stacklevel=3)
    if best_idx is None:
        raise SpecError("does not fit: no admissible placement on the grid")
    return best_idx


def distribute_modules(parcel: ParcelSpec, n: int, module_spec: ModuleSpec,
                       mode: RatioMode = RatioMode.INERTIA) -> list[ModulePlacement]:
    """Place n/2 mirror pairs on the long edges (positions only, no spins).

    Returned front to back, left module before its right partner.
    """
    if n % 2 or n < 4:
        raise SpecError("n must be even and >= 4")
    k = n // 2
    pos = slot_positions_mm(parcel.length, n)
    dmin = _mm(module_spec.prop_diameter)
    half_w = _mm(parcel.width / 2)
    target = ratio_target(parcel, mode)
    idx = _search_slots(pos, k, dmin, half_w, target)
    xs = sorted((pos[i] for i in idx), reverse=True)
    out = []
    for x in xs:
        out.append(ModulePlacement(x / 1000, -half_w / 1000))
        out.append(ModulePlacement(x / 1000, half_w / 1000))
    return out


def assign_spins(placements) -> list[ModulePlacement]:
    """Alternate CW/CCW front to back along each edge; mirror partners spin opposite.

    The front-left module spins CW, which yields the usual X-quad pattern.
    """
    left = sorted((p for p in placements if p.y < 0), key=lambda p: -p.x)
    if len(left) * 2 != len(placements):
        raise SpecError("placements must be split evenly across the two edges")
    spin_of = {}
    for j, p in enumerate(left):
        s = Spin.CW if j % 2 == 0 else Spin.CCW
        spin_of[(p.x, p.y)] = s
        spin_of[(p.x, -p.y)] = s.opposite
    try:
        return [ModulePlacement(p.x, p.y, spin_of[(p.x, p.y)]) for p in placements]
    except KeyError:
        raise SpecError("placements are not mirror-paired") from None


def select_flight_direction(parcel: ParcelSpec) -> FlightDirection:
    """Fly along the axis whose frontal cross-section is smallest (ties: length axis)."""
    along_length = parcel.width * parcel.height
    along_width = parcel.length * parcel.height
    if along_width < along_length:
        return FlightDirection("width", (0.0, 1.0, 0.0), along_width)
    return FlightDirection("length", (1.0, 0.0, 0.0), along_length)


def generate_morphology(parcel: ParcelSpec, central: CentralModuleSpec | None = None,
                        module_spec: ModuleSpec | None = None,
                        weights: MorphogenWeights | None = None) -> Morphology:
    central = central or CentralModuleSpec()
    module_spec = module_spec or ModuleSpec()
    weights = weights or MorphogenWeights()
    candidates = enumerate_viable(parcel, central, module_spec, weights)
    if not candidates:
        raise NoViableConfiguration(
            f"no viable configuration for parcel {parcel.mass:g} kg, "
            f"{parcel.length:g} x {parcel.width:g} m: every module count either exceeds "
            f"{weights.e_H_threshold:.0%} hover effort or does not fit on the edges")
    best = candidates[0]
    placements = assign_spins(distribute_modules(parcel, best.n, module_spec,
                                                 weights.ratio_mode))
    direction = select_flight_direction(parcel)
    morph = Morphology(
        parcel=parcel, module_spec=module_spec, central=central,
        placements=tuple(placements), forward_axis=direction.heading,
        total_mass=total_mass(parcel, central, best.n, module_spec),
        composite_inertia=composite_inertia(parcel, central, placements, module_spec),
        e_H=best.e_H, s_L=best.s_L)
    morph.check_invariants()
    return morph


# ---------------------------------------------------------------------------
# assembly instructions
# ---------------------------------------------------------------------------

ASSEMBLY_FORMAT_VERSION = 1


def emit_assembly_instructions(morphology: Morphology, config_hash: str = "-") -> str:
    """Human-readable assembly sheet, one line per module.

    Layout::

        # parceldrone assembly instructions
        format_version 1
        config_hash <hex>
        parcel <mass kg> <length m> <width m> <height m>
        modules <n>
        effort_at_hover_percent <e_H * 100>
        space_left_m <s_L>
        forward_axis <length|width>
        # index x_m y_m spin edge
        1 0.500 -0.125 CW left
        ...
    """
    p = morphology.parcel
    axis = "length" if morphology.forward_axis[0] == 1.0 else "width"
    lines = [
        "# parceldrone assembly instructions",
        "# positions in metres from the parcel centre; x forward, y right",
        f"format_version {ASSEMBLY_FORMAT_VERSION}",
        f"config_hash {config_hash}",
        f"parcel {p.mass:.3f} {p.length:.3f} {p.width:.3f} {p.height:.3f}",
        f"modules {morphology.n}",
        f"effort_at_hover_percent {morphology.e_H * 100:.1f}",
        f"space_left_m {morphology.s_L:.3f}",
        f"forward_axis {axis}",
        "# index x_m y_m spin edge",
    ]
    for i, pl in enumerate(morphology.placements, start=1):
        edge = "left" if pl.y < 0 else "right"
        lines.append(f"{i} {pl.x:.3f} {pl.y:.3f} {pl.spin.name} {edge}")
    return "\n".join(lines) + "\n"


def parse_assembly_instructions(text: str) -> tuple[dict, list[ModulePlacement]]:
    summary, placements = {}, []
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        if parts[0].isdigit():
            if len(parts) != 5:
                raise ValueError(f"line {lineno}: expected 5 fields")
            placements.append(ModulePlacement(float(parts[1]), float(parts[2]), Spin[parts[3]]))
        else:
            summary[parts[0]] = parts[1:] if len(parts) > 2 else parts[1]
    if int(summary.get("modules", -1)) != len(placements):
        raise ValueError("module count does not match the number of module lines")
    return summary, placements
