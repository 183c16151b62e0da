"""Command-line workflow: parcel -> morphology -> tuned bundle -> simulated flights.

Exit codes: 0 ok, 1 usage, 2 infeasible parcel, 3 gain database problem,
4 every flight crashed.
"""

from __future__ import annotations

import argparse
import configparser
import json
import math
import os
import sys
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

from . import __version__
from .allocation import (BundleError, LayoutParseError, emit_geometry_file, emit_layout_csv,
                         load_bundle, mixer_from_geometry, geometry_from_morphology,
                         parse_layout_csv)
from .autotune import (DatabaseError, GainDatabase, build_database, lookup, module_hash,
                       tune_morphology, UnstableTuningError)
from .core import (CentralModuleSpec, ModulePlacement, ModuleSpec, Morphology, ParcelSpec,
                   SpecError, composite_inertia, load_specs, spec_hash, total_mass)
from .flightlab import (CrashDetected, FlightOptions, align_and_trim, outdoor_plan, plot_csv,
                        run_indoor_experiment, run_outdoor_mission, tracking_report,
                        cross_track_error)
from .morphogen import (MorphogenWeights, NoViableConfiguration, RatioMode,
                        emit_assembly_instructions, generate_morphology)

EXIT_OK, EXIT_USAGE, EXIT_INFEASIBLE, EXIT_DB, EXIT_FLIGHT = 0, 1, 2, 3, 4
FIXTURE_DB = "gains_fixture.db"


class UsageError(Exception):
    pass


@dataclass(frozen=True)
class ProjectConfig:
    module_spec_file: str | None = None
    database: str | None = None
    output_dir: str = "."
    w_e: float = 1.0
    w_s: float = 1.0
    ratio_mode: str = "inertia"
    seed: int = 0
    runs: int = 9
    feedback_latency: float = 0.05

    @classmethod
    def load(cls, path: str | None) -> "ProjectConfig":
        values = {}
        if path:
            cp = configparser.ConfigParser(interpolation=None)
            with open(path, encoding="utf-8") as fh:
                cp.read_file(fh)
            if cp.has_section("project"):
                values = dict(cp["project"])
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(values) - known
        if unknown:
            raise UsageError(f"unknown project config keys: {sorted(unknown)}")
        types = {"w_e": float, "w_s": float, "seed": int, "runs": int,
                 "feedback_latency": float}
        values = {k: types.get(k, str)(v) for k, v in values.items()}
        return cls(**values)

    def weights(self) -> MorphogenWeights:
        return MorphogenWeights(self.w_e, self.w_s, ratio_mode=RatioMode(self.ratio_mode))

    def specs(self) -> tuple[ModuleSpec, CentralModuleSpec]:
        if not self.module_spec_file:
            return ModuleSpec(), CentralModuleSpec()
        specs = load_specs(self.module_spec_file)
        return specs.get("module", ModuleSpec()), specs.get("central", CentralModuleSpec())


def config_hash(*objs) -> str:
    return spec_hash(__version__, *objs)


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def _positive(v: str) -> float:
    try:
        x = float(v)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a number: {v!r}") from None
    if not (x > 0 and math.isfinite(x)):
        raise argparse.ArgumentTypeError(f"must be a positive number: {v!r}")
    return x


def _add_parcel_args(p):
    p.add_argument("--mass", type=_positive, required=True, help="parcel mass [kg]")
    p.add_argument("--length", type=_positive, required=True, help="parcel length [m]")
    p.add_argument("--width", type=_positive, required=True, help="parcel width [m]")
    p.add_argument("--height", type=_positive, required=True, help="parcel height [m]")
    p.add_argument("--material", default="unknown")


def _parcel(args) -> ParcelSpec:
    try:
        return ParcelSpec(args.mass, args.length, args.width, args.height, args.material)
    except SpecError as exc:
        raise UsageError(str(exc)) from None


def _out_dir(args, cfg: ProjectConfig) -> Path:
    out = Path(args.out or os.environ.get("PARCELDRONE_OUT") or cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _db_path(args, cfg: ProjectConfig) -> str:
    p = getattr(args, "db", None) or os.environ.get("PARCELDRONE_DB") or cfg.database
    if p:
        return p
    return str(resources.files("parceldrone") / "data" / FIXTURE_DB)


def _write(path: Path, text: str) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(text)


def _emit(args, human: str, record: dict) -> None:
    if args.json:
        print(json.dumps(record, sort_keys=True))
    else:
        print(human, end="" if human.endswith("\n") else "\n")


def morphology_summary(morph: Morphology, chash: str) -> str:
    I = morph.composite_inertia
    axis = "length" if morph.forward_axis[0] == 1.0 else "width"
    return "\n".join([
        "# parceldrone morphology summary", "format_version 1", f"config_hash {chash}",
        f"modules {morph.n}", f"total_mass_kg {morph.total_mass:.4f}",
        f"effort_at_hover {morph.e_H:.4f}", f"space_left_m {morph.s_L:.4f}",
        f"inertia_kgm2 {I.Ixx:.6f} {I.Iyy:.6f} {I.Izz:.6f}", f"forward_axis {axis}"]) + "\n"


def _morph_from_layout(path: str, parcel: ParcelSpec, ms: ModuleSpec,
                       central: CentralModuleSpec) -> Morphology:
    with open(path, encoding="utf-8") as fh:
        rows = parse_layout_csv(fh.read())
    from .morphogen import effort_at_hover, space_left, select_flight_direction
    placements = tuple(ModulePlacement(r.x, r.y, r.spin) for r in rows)
    n = len(placements)
    morph = Morphology(parcel, ms, central, placements,
                       select_flight_direction(parcel).heading,
                       total_mass(parcel, central, n, ms),
                       composite_inertia(parcel, central, placements, ms),
                       effort_at_hover(parcel, central, n, ms), space_left(parcel, n, ms))
    morph.check_invariants()
    return morph


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_morph(args, cfg: ProjectConfig) -> int:
    parcel = _parcel(args)
    ms, central = cfg.specs()
    weights = cfg.weights()
    chash = config_hash(parcel, ms, central, weights)
    try:
        morph = generate_morphology(parcel, central, ms, weights)
    except NoViableConfiguration as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INFEASIBLE
    out = _out_dir(args, cfg)
    _write(out / "layout.csv", emit_layout_csv(morph, chash))
    _write(out / "assembly.txt", emit_assembly_instructions(morph, chash))
    summary = morphology_summary(morph, chash)
    _write(out / "morphology.txt", summary)
    I = morph.composite_inertia
    _emit(args, summary, {"config_hash": chash, "modules": morph.n, "e_H": morph.e_H,
                          "s_L": morph.s_L, "total_mass": morph.total_mass,
                          "inertia": [I.Ixx, I.Iyy, I.Izz],
                          "placements": [[p.x, p.y, p.spin.name] for p in morph.placements]})
    return EXIT_OK


def cmd_tune(args, cfg: ProjectConfig) -> int:
    parcel = _parcel(args)
    ms, central = cfg.specs()
    weights = cfg.weights()
    try:
        if args.layout:
            morph = _morph_from_layout(args.layout, parcel, ms, central)
        else:
            morph = generate_morphology(parcel, central, ms, weights)
    except NoViableConfiguration as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INFEASIBLE
    except (LayoutParseError, SpecError, OSError) as exc:
        raise UsageError(f"bad layout: {exc}") from None
    mixer = mixer_from_geometry(geometry_from_morphology(morph))
    if args.no_db:
        try:
            gains = tune_morphology(morph, mixer)
        except UnstableTuningError as exc:
            print(f"error: {exc}", file=sys.stderr)
            return EXIT_DB
        provenance = "fresh-tune"
    else:
        path = _db_path(args, cfg)
        try:
            db = GainDatabase.load(path)
            gains = lookup(db, morph.descriptor())
        except (OSError, DatabaseError) as exc:
            print(f"error: gain database {path}: {exc}", file=sys.stderr)
            return EXIT_DB
        exact = any(e.descriptor == morph.descriptor() for e in db.entries)
        provenance = (f"database:{db.module_hash}:"
                      f"{'exact' if exact else 'interpolated'}:{len(db.entries)}")
    chash = config_hash(parcel, ms, central, weights, morph.placements)
    out = _out_dir(args, cfg)
    text = emit_geometry_file(morph, gains, mixer, provenance, chash)
    _write(out / "bundle.ini", text)
    _emit(args, f"bundle written to {out / 'bundle.ini'} ({provenance})\n",
          {"config_hash": chash, "bundle": str(out / "bundle.ini"), "provenance": provenance,
           "roll_rate": list(gains.roll), "pitch_rate": list(gains.pitch),
           "yaw_rate": list(gains.yaw)})
    return EXIT_OK


def _floats(text: str) -> list[float]:
    try:
        vals = [float(v) for v in text.split(",") if v]
    except ValueError:
        raise UsageError(f"expected comma-separated numbers, got {text!r}") from None
    if not vals or not all(v > 0 for v in vals):
        raise UsageError(f"values must be positive: {text!r}")
    return vals


def _shapes(text: str) -> list[tuple[float, float]]:
    out = []
    for item in text.split(","):
        try:
            length, width = (float(v) for v in item.lower().split("x"))
        except ValueError:
            raise UsageError(f"shape must look like LENGTHxWIDTH, got {item!r}") from None
        out.append((length, width))
    return out


def cmd_db_build(args, cfg: ProjectConfig) -> int:
    ms, _ = cfg.specs()
    try:
        grid = [ParcelSpec(m, length, width, args.height)
                for m in _floats(args.masses) for length, width in _shapes(args.shapes)]
    except SpecError as exc:
        raise UsageError(str(exc)) from None
    path = _db_path(args, cfg) if (args.db or os.environ.get("PARCELDRONE_DB")
                                    or cfg.database) else None
    if path is None:
        raise UsageError("db-build needs --db (or PARCELDRONE_DB)")
    try:
        db = build_database(grid, ms, cfg.weights(), path=path, resume=args.resume)
    except DatabaseError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DB
    _emit(args, f"{len(db.entries)} entries, {len(db.failures)} failures -> {path}\n",
          {"database": path, "entries": len(db.entries), "failures": len(db.failures),
           "module_hash": module_hash(ms)})
    return EXIT_OK


def cmd_fly(args, cfg: ProjectConfig) -> int:
    try:
        with open(args.bundle, encoding="utf-8") as fh:
            bundle = load_bundle(fh.read())
    except (OSError, BundleError) as exc:
        raise UsageError(f"cannot load bundle: {exc}") from None
    runs = args.runs if args.runs is not None else cfg.runs
    seed0 = args.seed if args.seed is not None else cfg.seed
    if runs < 1:
        raise UsageError("--runs must be >= 1")
    outdoor = args.outdoor
    chash = bundle.meta["config_hash"]
    out = _out_dir(args, cfg)
    ok_logs, per_run = [], []
    for i in range(runs):
        seed = seed0 + i
        try:
            if outdoor:
                opts = FlightOptions(feedback_latency=cfg.feedback_latency, draft_amplitude=0.0)
                log = run_outdoor_mission(bundle, seed, options=opts, config_hash=chash)
            else:
                opts = FlightOptions(feedback_latency=cfg.feedback_latency)
                log = run_indoor_experiment(bundle, seed, options=opts, config_hash=chash)
            status = "ok"
        except CrashDetected as exc:
            log, status = exc.log, f"crashed: {exc.reason}"
        _write(out / f"run_{seed:03d}.log", log.dumps())
        per_run.append({"seed": seed, "status": status})
        if status == "ok":
            ok_logs.append((seed, log))
    record = {"config_hash": chash, "mode": "outdoor" if outdoor else "indoor",
              "runs": per_run}
    lines = [f"seed {r['seed']}: {r['status']}" for r in per_run]
    if ok_logs:
        if outdoor:
            plan = outdoor_plan()
            wp = plan.steps[1].waypoint[:2]
            xt = [float(cross_track_error(lg, wp).max()) for _, lg in ok_logs]
            land = [float(math.hypot(*lg.position[-1, :2])) for _, lg in ok_logs]
            record["cross_track_max_m"] = xt
            record["landing_error_m"] = land
            lines += [f"seed {s}: max cross-track {x:.3f} m, landing error {d:.3f} m"
                      for (s, _), x, d in zip(ok_logs, xt, land)]
            table = "\n".join(lines) + "\n"
        else:
            trimmed = [align_and_trim(lg) for _, lg in ok_logs]
            report = tracking_report(trimmed)
            record["report"] = report.records()
            table = "\n".join(lines) + "\n" + report.table()
            first = trimmed[0]
            for axis in ("x", "y", "z", "yaw"):
                _write(out / f"plot_{axis}.csv", plot_csv(first, axis))
        header = f"# parceldrone flight report\nformat_version 1\nconfig_hash {chash}\n"
        _write(out / "report.txt", header + table)
        _write(out / "report.json", json.dumps(record, sort_keys=True, indent=1) + "\n")
        _emit(args, table, record)
    else:
        _emit(args, "\n".join(lines) + "\nall runs crashed\n", record)
    return EXIT_OK if ok_logs else EXIT_FLIGHT


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="parceldrone", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp):
        sp.add_argument("--config", help="project config file ([project] section)")
        sp.add_argument("--out", help="output directory (env PARCELDRONE_OUT)")
        sp.add_argument("--json", action="store_true", help="machine-readable summary")

    m = sub.add_parser("morph", help="generate a morphology for a parcel")
    _add_parcel_args(m)
    common(m)

    t = sub.add_parser("tune", help="write a configuration bundle with rate gains")
    _add_parcel_args(t)
    t.add_argument("--layout", help="layout CSV from 'morph' (default: regenerate)")
    t.add_argument("--db", help="gain database (env PARCELDRONE_DB; default: bundled fixture)")
    t.add_argument("--no-db", action="store_true", help="tune directly instead of a lookup")
    common(t)

    d = sub.add_parser("db-build", help="build or resume a gain database")
    d.add_argument("--masses", required=True, help="comma-separated parcel masses [kg]")
    d.add_argument("--shapes", required=True, help="comma-separated LENGTHxWIDTH pairs [m]")
    d.add_argument("--height", type=_positive, default=0.08)
    d.add_argument("--db", help="database file (env PARCELDRONE_DB)")
    d.add_argument("--resume", action=argparse.BooleanOptionalAction, default=True)
    common(d)

    f = sub.add_parser("fly", help="fly simulated experiments with a bundle")
    f.add_argument("bundle")
    mode = f.add_mutually_exclusive_group()
    mode.add_argument("--indoor", action="store_true", default=True)
    mode.add_argument("--outdoor", action="store_true")
    f.add_argument("--runs", type=int)
    f.add_argument("--seed", type=int)
    common(f)
    return p


COMMANDS = {"morph": cmd_morph, "tune": cmd_tune, "db-build": cmd_db_build, "fly": cmd_fly}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        cfg = ProjectConfig.load(args.config)
        return COMMANDS[args.command](args, cfg)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (SpecError, OSError, ValueError) as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
