"""Ultimate-gain (Ziegler-Nichols) tuning of the roll/pitch rate loops and the gain database.

The tuning experiment closes a proportional loop on the free-axis body
rate of the single-axis test rig and raises the gain until the response
stops decaying. One tick of transport delay plus rotor lag give the loop a
finite phase-crossover, so the boundary gain is well defined.
"""

from __future__ import annotations

import fcntl
import math
import os
from contextlib import contextmanager
from dataclasses import dataclass, field

import numpy as np

from .allocation import MixerMatrix, geometry_from_morphology, mixer_from_geometry
from .core import (YAW_RATE_DEFAULT, GainSet, ModuleSpec, Morphology, ParcelSpec, SpecError,
                   spec_hash)
from .simdyn import DT, SimulationFault, SingleAxisRig, TuneTrace

__all__ = [
    "PID", "TraceTooShort", "Oscillation", "detect_oscillation", "SweepConfig",
    "UltimateGain", "PlantDoesNotDestabilize", "find_ultimate_gain", "zn_gains",
    "UnstableTuningError", "tune_morphology", "GainDatabase", "DatabaseError",
    "OutOfSupport", "DatabaseLocked", "build_database", "lookup", "TuneTrace",
    "fixture_database",
]


# ---------------------------------------------------------------------------
# PID
# ---------------------------------------------------------------------------

SETPOINT_WEIGHT = 0.5


class PID:
    """Discrete PID with derivative on measurement and a clamped integrator.

    The proportional term acts on ``b * setpoint - measurement``. The
    feedback path is the plain PID; ``b < 1`` only softens the reaction to
    setpoint steps (ZN gains overshoot ~75% on an integrating plant at b = 1).
    """

    def __init__(self, kp: float, ki: float, kd: float, dt: float = DT,
                 i_limit: float = 0.3, setpoint_weight: float = SETPOINT_WEIGHT):
        self.kp, self.ki, self.kd = float(kp), float(ki), float(kd)
        self.dt = dt
        self.i_limit = i_limit
        self.b = float(setpoint_weight)
        self.integral = 0.0
        self._last = None

    def reset(self) -> None:
        self.integral = 0.0
        self._last = None

    def __call__(self, setpoint: float, measurement: float) -> float:
        err = setpoint - measurement
        self.integral += self.ki * err * self.dt
        self.integral = max(-self.i_limit, min(self.i_limit, self.integral))
        d = 0.0 if self._last is None else (measurement - self._last) / self.dt
        self._last = measurement
        return self.kp * (self.b * setpoint - measurement) + self.integral - self.kd * d


# ---------------------------------------------------------------------------
# oscillation detection
# ---------------------------------------------------------------------------

class TraceTooShort(ValueError):
    pass


@dataclass(frozen=True)
class Oscillation:
    period: float
    amplitude_ratio: float  # per full period, same-sign half-cycles
    half_periods: int


MIN_HALF_PERIODS = 6
MAX_DISPERSION = 0.10
RATIO_BAND = (0.9, 1.1)


def _crossings(x: np.ndarray, t: np.ndarray, h: float) -> np.ndarray:
    """Zero-crossing times, with a +/-h hysteresis band against noise chatter."""
    state = 0
    out = []
    for j in range(len(x)):
        if x[j] > h:
            new = 1
        elif x[j] < -h:
            new = -1
        else:
            continue
        if state and new != state:
            i = j - 1
            while i > 0 and np.sign(x[i]) != -new:
                i -= 1
            # interpolate between i (old sign) and i + 1
            x0, x1 = x[i], x[i + 1]
            frac = x0 / (x0 - x1) if x1 != x0 else 0.0
            out.append(t[i] + frac * (t[i + 1] - t[i]))
        state = new
    return np.asarray(out)


def detect_oscillation(trace: TuneTrace, window: float, signal: str = "rate",
                       floor: float = 0.0) -> Oscillation | None:
    """Look for a sustained oscillation in the last ``window`` seconds of the trace.

    Fires when the window holds at least six half-periods whose spread
    (std / mean) is under 10% and the same-sign half-cycle RMS amplitudes
    change by a factor within [0.9, 1.1] per period. Windows whose RMS is at
    or below ``floor`` count as quiet.
    """
    t = np.asarray(trace.t, dtype=float)
    if len(t) < 2 or t[-1] - t[0] + (t[1] - t[0]) < 2 * window - 1e-9:
        raise TraceTooShort(f"trace spans {t[-1] - t[0] if len(t) else 0:.3f} s, "
                            f"need at least {2 * window:.3f} s")
    dt = t[1] - t[0]
    keep = t >= t[-1] - window
    x = np.asarray(getattr(trace, signal), dtype=float)[keep]
    tw = t[keep]
    x = x - x.mean()
    rms = math.sqrt(float(np.mean(x * x)))
    if not rms > floor or not math.isfinite(rms):
        return None
    tc = _crossings(x, tw, 0.3 * rms)
    if len(tc) < MIN_HALF_PERIODS + 1:
        return None
    halves = np.diff(tc)
    mean_half = float(halves.mean())
    if 2 * mean_half < 4 * dt:
        return None  # sampling-rate chatter, not a resolvable oscillation
    if float(halves.std()) / mean_half >= MAX_DISPERSION:
        return None
    amps = []
    for a, b in zip(tc[:-1], tc[1:]):
        seg = x[(tw >= a) & (tw < b)]
        amps.append(math.sqrt(float(np.mean(seg * seg))) if len(seg) else 0.0)
    amps = np.asarray(amps)
    if np.any(amps <= 0):
        return None
    # log-linear fit of the half-cycle amplitudes; two half-cycles per period
    slope = np.polyfit(np.arange(len(amps)), np.log(amps), 1)[0]
    ratio = float(math.exp(2 * slope))
    if not RATIO_BAND[0] <= ratio <= RATIO_BAND[1]:
        return None
    return Oscillation(2 * mean_half, ratio, len(halves))


# ---------------------------------------------------------------------------
# ultimate gain search
# ---------------------------------------------------------------------------

class PlantDoesNotDestabilize(RuntimeError):
    pass


@dataclass(frozen=True)
class SweepConfig:
    start_gain: float = 0.01
    factor: float = 1.3
    stage_duration: float = 8.0
    window: float = 4.0
    rel_tol: float = 0.02
    max_gain: float = 1e6
    initial_rate: float = 0.05
    # a detected oscillation counts as sustained at or above this per-period ratio
    sustain_ratio: float = 0.995


@dataclass(frozen=True)
class UltimateGain:
    Ku: float
    Tu: float
    bracket: tuple[float, float]
    stages: tuple[tuple[float, bool], ...] = ()


def _probe(rig: SingleAxisRig, gain: float, cfg: SweepConfig):
    try:
        trace = rig.run(lambda rate, angle, t: -gain * rate, cfg.stage_duration,
                        initial_rate=cfg.initial_rate)
    except SimulationFault:
        return None
    # anything decayed to round-off level is treated as quiet
    det = detect_oscillation(trace, cfg.window, floor=1e-6 * abs(cfg.initial_rate))
    if det is not None and det.amplitude_ratio >= cfg.sustain_ratio:
        return det
    return None


def find_ultimate_gain(rig: SingleAxisRig, config: SweepConfig | None = None) -> UltimateGain:
    """Multiplicative gain sweep until sustained oscillation, then bisection.

    The returned gain is the upper end of the final bracket, which is the
    first gain observed to sustain oscillation, and ``Tu`` is the period
    measured there.
    """
    cfg = config or SweepConfig()
    start = cfg.start_gain
    for attempt in range(2):
        if _probe(rig, start, cfg) is None:
            break
        if attempt == 1:
            raise PlantDoesNotDestabilize(
                f"oscillation already at the lowest start gain {start:g}; cannot bracket Ku")
        start /= cfg.factor ** 8
    stages = [(start, False)]
    lo, k, det = start, start, None
    while True:
        k *= cfg.factor
        if k > cfg.max_gain:
            raise PlantDoesNotDestabilize(
                f"no sustained oscillation up to gain {cfg.max_gain:g}; the plant model "
                "probably lacks transport delay or actuator lag")
        det = _probe(rig, k, cfg)
        stages.append((k, det is not None))
        if det is not None:
            break
        lo = k
    hi = k
    while (hi - lo) / hi > cfg.rel_tol:
        mid = math.sqrt(lo * hi)
        d = _probe(rig, mid, cfg)
        stages.append((mid, d is not None))
        if d is None:
            lo = mid
        else:
            hi, det = mid, d
    return UltimateGain(hi, det.period, (lo, hi), tuple(stages))


def zn_gains(Ku: float, Tu: float) -> tuple[float, float, float]:
    """Classic Ziegler-Nichols PID row."""
    if not (Ku > 0 and Tu > 0):
        raise ValueError("Ku and Tu must be > 0")
    return (0.6 * Ku, 1.2 * Ku / Tu, 0.075 * Ku * Tu)


# ---------------------------------------------------------------------------
# per-morphology tuning
# ---------------------------------------------------------------------------

class UnstableTuningError(RuntimeError):
    def __init__(self, axis: str, reason: str, trace: TuneTrace | None = None):
        self.axis = axis
        self.trace = trace
        super().__init__(f"unstable tuning on {axis}: {reason}")


@dataclass(frozen=True)
class StepCheck:
    step: float = 0.2          # rad/s rate setpoint step
    duration: float = 2.0
    max_overshoot: float = 0.5
    band: float = 0.05
    hold: float = 0.2          # final stretch that must stay inside the band


def _sign_check(rig: SingleAxisRig, axis: str) -> None:
    trace = rig.run(lambda rate, angle, t: 0.1, 0.1)
    if not trace.rate[-1] > 0:
        raise UnstableTuningError(axis, "positive command does not produce positive rate "
                                  "(mixer column reversed?)", trace)


def validate_step(rig: SingleAxisRig, pid: tuple, axis: str,
                  check: StepCheck | None = None) -> TuneTrace:
    check = check or StepCheck()
    ctl = PID(*pid, dt=rig.dt)
    trace = rig.run(lambda rate, angle, t: ctl(check.step, rate), check.duration)
    trace.gains = tuple(pid)
    r = trace.rate / check.step
    if not np.all(np.isfinite(r)):
        raise UnstableTuningError(axis, "non-finite step response", trace)
    overshoot = float(r.max() - 1.0)
    if overshoot >= check.max_overshoot:
        raise UnstableTuningError(axis, f"overshoot {overshoot:.0%}", trace)
    tail = r[trace.t >= check.duration - check.hold]
    if np.any(np.abs(tail - 1.0) > check.band):
        raise UnstableTuningError(axis, "step response does not settle within "
                                  f"{check.duration:g} s", trace)
    return trace


def tune_morphology(morphology: Morphology, mixer: MixerMatrix | None = None,
                    config: SweepConfig | None = None) -> GainSet:
    mixer = mixer or mixer_from_geometry(geometry_from_morphology(morphology))
    gains = {}
    for axis in ("roll", "pitch"):
        rig = SingleAxisRig.from_morphology(morphology, mixer, axis)
        _sign_check(rig, axis)
        try:
            ult = find_ultimate_gain(rig, config)
        except PlantDoesNotDestabilize as exc:
            raise UnstableTuningError(axis, str(exc)) from None
        pid = zn_gains(ult.Ku, ult.Tu)
        validate_step(rig, pid, axis)
        gains[axis] = pid
    return GainSet(gains["roll"], gains["pitch"], YAW_RATE_DEFAULT)


# ---------------------------------------------------------------------------
# gain database
# ---------------------------------------------------------------------------

DB_FORMAT_VERSION = 1
DEFAULT_SIGMA = 0.5
SUPPORT_FLOOR = 1e-8


class DatabaseError(RuntimeError):
    pass


class OutOfSupport(DatabaseError):
    pass


class DatabaseLocked(DatabaseError):
    pass


@dataclass(frozen=True)
class DbEntry:
    parcel: ParcelSpec
    descriptor: tuple[float, float, float, int]
    gains: GainSet


@dataclass
class GainDatabase:
    module_hash: str
    sigma: float = DEFAULT_SIGMA
    entries: list[DbEntry] = field(default_factory=list)
    failures: list[tuple[ParcelSpec, str]] = field(default_factory=list)

    def __post_init__(self):
        if not self.sigma > 0:
            raise DatabaseError("sigma must be > 0")

    def descriptors(self) -> np.ndarray:
        return np.array([e.descriptor for e in self.entries], dtype=float)

    def add(self, entry: DbEntry) -> bool:
        if any(e.descriptor == entry.descriptor for e in self.entries):
            return False
        self.entries.append(entry)
        return True

    # -- text format ------------------------------------------------------

    def dumps(self) -> str:
        lines = ["# parceldrone gain database",
                 f"format_version {DB_FORMAT_VERSION}",
                 f"module_hash {self.module_hash}",
                 f"sigma {self.sigma!r}",
                 "# entry mass length width height | Ixx Iyy total_mass n"
                 " | roll Kp Ki Kd | pitch Kp Ki Kd"]
        for e in sorted(self.entries, key=lambda e: e.descriptor):
            p = e.parcel
            vals = [p.mass, p.length, p.width, p.height, *e.descriptor[:3]]
            lines.append("entry " + " ".join(repr(float(v)) for v in vals)
                         + f" {e.descriptor[3]} "
                         + " ".join(repr(g) for g in e.gains.roll + e.gains.pitch))
        for p, reason in sorted(self.failures, key=lambda f: (f[0].mass, f[0].length,
                                                               f[0].width, f[0].height)):
            lines.append("failed " + " ".join(repr(float(v)) for v in
                                              (p.mass, p.length, p.width, p.height))
                         + " " + reason.replace("\n", " "))
        return "\n".join(lines) + "\n"

    @classmethod
    def loads(cls, text: str) -> "GainDatabase":
        header, entries, failures = {}, [], []
        for lineno, raw in enumerate(text.splitlines(), start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            key, _, rest = line.partition(" ")
            try:
                if key == "entry":
                    f = rest.split()
                    if len(f) != 14:
                        raise ValueError("expected 14 fields")
                    v = [float(s) for s in f[:7]]
                    parcel = ParcelSpec(*v[:4])
                    g = [float(s) for s in f[8:]]
                    entries.append(DbEntry(parcel, (v[4], v[5], v[6], int(f[7])),
                                           GainSet(tuple(g[:3]), tuple(g[3:]))))
                elif key == "failed":
                    f = rest.split(maxsplit=4)
                    failures.append((ParcelSpec(*map(float, f[:4])),
                                     f[4] if len(f) > 4 else ""))
                else:
                    header[key] = rest.strip()
            except (ValueError, SpecError) as exc:
                raise DatabaseError(f"line {lineno}: {exc}") from None
        if header.get("format_version") != str(DB_FORMAT_VERSION):
            raise DatabaseError(f"unsupported or missing format_version "
                                f"{header.get('format_version')!r}")
        db = cls(header.get("module_hash", "-"), float(header.get("sigma", DEFAULT_SIGMA)))
        for e in entries:
            if not db.add(e):
                raise DatabaseError(f"duplicate descriptor {e.descriptor}")
        db.failures = failures
        return db

    def save(self, path: str | os.PathLike) -> None:
        tmp = f"{path}.tmp"
        with open(tmp, "w", encoding="utf-8") as fh:
            fh.write(self.dumps())
        os.replace(tmp, path)

    @classmethod
    def load(cls, path: str | os.PathLike) -> "GainDatabase":
        with open(path, encoding="utf-8") as fh:
            return cls.loads(fh.read())


def fixture_database() -> GainDatabase:
    """The database shipped with the package (3 masses x 3 parcel shapes, default modules)."""
    from importlib import resources
    return GainDatabase.loads(
        (resources.files("parceldrone") / "data" / "gains_fixture.db").read_text("utf-8"))


def module_hash(module_spec: ModuleSpec) -> str:
    return spec_hash(module_spec)


def _normalizer(desc: np.ndarray):
    mean = desc.mean(axis=0)
    std = desc.std(axis=0)
    std[std == 0] = 1.0
    return mean, std


def lookup(db: GainDatabase, query) -> GainSet:
    """Kernel-weighted mean of stored roll/pitch gains; exact descriptor matches short-circuit."""
    if not db.entries:
        raise DatabaseError("database is empty")
    q = tuple(float(v) for v in query)
    for e in db.entries:
        if tuple(float(v) for v in e.descriptor) == q:
            return e.gains
    desc = db.descriptors()
    mean, std = _normalizer(desc)
    z = (desc - mean) / std
    zq = (np.asarray(q) - mean) / std
    w = np.exp(-0.5 * np.sum(((z - zq) / db.sigma) ** 2, axis=1))
    if not w.max() >= SUPPORT_FLOOR:
        raise OutOfSupport(f"query {q} is outside the database support "
                           f"(largest kernel weight {w.max():.2e})")
    G = np.array([e.gains.roll + e.gains.pitch for e in db.entries])
    g = (w @ G) / w.sum()
    # a convex combination cannot leave the stored range; clip float round-off
    g = np.clip(g, G.min(axis=0), G.max(axis=0))
    return GainSet(tuple(g[:3]), tuple(g[3:]), YAW_RATE_DEFAULT)


@contextmanager
def _file_lock(path):
    fh = open(f"{path}.lock", "w")
    try:
        try:
            fcntl.flock(fh, fcntl.LOCK_EX | fcntl.LOCK_NB)
        except BlockingIOError:
            raise DatabaseLocked(f"{path} is locked by another build") from None
        yield
    finally:
        fh.close()


def build_database(grid, module_spec: ModuleSpec | None = None, weights=None,
                   path: str | os.PathLike | None = None, resume: bool = True,
                   sigma: float = DEFAULT_SIGMA, config: SweepConfig | None = None,
                   progress=None) -> GainDatabase:
    """Tune every parcel in ``grid`` and collect (descriptor, gains) pairs.

    With ``path`` the file is locked for the duration of the build and
    rewritten after every grid point, so an interrupted build can resume.
    Per-point failures are recorded, not raised.
    """
    from .morphogen import generate_morphology, NoViableConfiguration

    module_spec = module_spec or ModuleSpec()
    mhash = module_hash(module_spec)

    def run(db):
        done = {(p.mass, p.length, p.width, p.height) for p in
                [e.parcel for e in db.entries] + [f[0] for f in db.failures]}
        for parcel in grid:
            key = (parcel.mass, parcel.length, parcel.width, parcel.height)
            if key in done:
                continue
            try:
                morph = generate_morphology(parcel, module_spec=module_spec, weights=weights)
                gains = tune_morphology(morph, config=config)
                db.add(DbEntry(parcel, morph.descriptor(), gains))
            except (NoViableConfiguration, UnstableTuningError, SpecError) as exc:
                db.failures.append((parcel, f"{type(exc).__name__}: {exc}"))
            done.add(key)
            if path is not None:
                db.save(path)
            if progress:
                progress(parcel, db)
        if not db.entries:
            raise DatabaseError("database is empty: every grid point failed")
        return db

    if path is None:
        return run(GainDatabase(mhash, sigma))
    with _file_lock(path):
        db = None
        if resume and os.path.exists(path):
            db = GainDatabase.load(path)
            if db.module_hash != mhash:
                raise DatabaseError("existing database was built for a different module spec")
        db = run(db or GainDatabase(mhash, sigma))
        db.save(path)
        return db
