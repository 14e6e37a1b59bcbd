"""Command line front end: run, preset, mesh-info, spectrum."""

from __future__ import annotations

import argparse
import json
import sys

import numpy as np

from .driver import (
    ConfigError,
    Simulation,
    apply_override,
    emit_toml,
    fft_spectrum,
    load_config,
    preset,
    preset_names,
    spectral_peak,
)
from .mesh import load_mesh, mesh_info


def _add_overrides(parser: argparse.ArgumentParser) -> None:
    parser.add_argument(
        "--override", "-o", action="append", default=[], metavar="KEY=VALUE",
        help="config override, e.g. -o run.steps=200 -o 'pml.enabled=true'")


def _apply_overrides(cfg: dict, pairs: list[str]) -> None:
    for pair in pairs:
        key, sep, value = pair.partition("=")
        if not sep:
            raise ConfigError(f"override '{pair}' is not KEY=VALUE")
        apply_override(cfg, key.strip(), value.strip())


def _run(cfg: dict, quiet: bool) -> int:
    sim = Simulation(cfg)
    if not quiet:
        print(f"mesh: {sim.mesh.n_faces} faces, dt = {sim.dt:.6e} s, "
              f"{sim.steps} steps, polarizations: {', '.join(sorted(sim.states))}")
    summary = sim.run()
    out_dir = cfg["output"]["directory"]
    if not quiet:
        print(f"done in {summary['wall_seconds']:.2f} s; outputs in {out_dir}/")
        for kind, name in summary["artifacts"].items():
            print(f"  {kind}: {name}")
    return 0


def cmd_run(args: argparse.Namespace) -> int:
    cfg = load_config(args.config)
    _apply_overrides(cfg, args.override)
    return _run(cfg, args.quiet)


def cmd_preset(args: argparse.Namespace) -> int:
    cfg = preset(args.name)
    _apply_overrides(cfg, args.override)
    if args.emit or args.out:
        text = emit_toml(cfg)
        if args.out:
            with open(args.out, "w") as fh:
                fh.write(text)
        else:
            sys.stdout.write(text)
        if args.emit or not args.run:
            return 0
    return _run(cfg, args.quiet)


def cmd_mesh_info(args: argparse.Namespace) -> int:
    info = mesh_info(load_mesh(args.path))
    print(json.dumps(info, indent=2, sort_keys=True))
    return 0


def cmd_spectrum(args: argparse.Namespace) -> int:
    with open(args.csv) as fh:
        header = fh.readline().strip().split(",")
        data = np.loadtxt(fh, delimiter=",", ndmin=2)
    if "t" not in header:
        raise SystemExit(f"{args.csv}: no 't' column")
    t = data[:, header.index("t")]
    if len(t) < 16:
        raise SystemExit(f"{args.csv}: need at least 16 rows for a spectrum")
    dt = float(t[1] - t[0])
    columns = [args.column] if args.column else [
        c for c in header if c not in ("step", "t")]
    rows = None
    freq = None
    for col in columns:
        if col not in header:
            raise SystemExit(f"{args.csv}: no column '{col}'")
        series = data[:, header.index(col)]
        freq, amp = fft_spectrum(series, dt)
        if rows is None:
            rows = [freq]
        rows.append(amp)
        if np.max(amp) > 0.0:
            f_peak, a_peak = spectral_peak(freq, amp, f_min=args.fmin,
                                           f_max=args.fmax)
            print(f"{col}: peak {a_peak:.6g} at {f_peak:.6e} Hz "
                  f"({2.0 * np.pi * f_peak:.6e} rad/s)")
        else:
            print(f"{col}: all zero")
    if args.out and rows is not None:
        table = np.column_stack(rows)
        head = ",".join(["frequency_hz"] + columns)
        np.savetxt(args.out, table, delimiter=",", header=head,
                   comments="", fmt="%.17g")
        print(f"spectrum written to {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="axipic",
        description="Axisymmetric electromagnetic particle-in-cell simulator")
    parser.add_argument("--quiet", "-q", action="store_true",
                        help="suppress progress chatter")
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="run a simulation from a TOML config")
    p_run.add_argument("config")
    _add_overrides(p_run)
    p_run.set_defaults(func=cmd_run)

    p_preset = sub.add_parser(
        "preset", help="run (or emit) a bundled experiment setup")
    p_preset.add_argument("name", choices=preset_names())
    _add_overrides(p_preset)
    p_preset.add_argument("--emit", action="store_true",
                          help="print the resolved config instead of running")
    p_preset.add_argument("--out", metavar="FILE",
                          help="write the resolved config to FILE")
    p_preset.add_argument("--run", action="store_true",
                          help="with --out: also run after writing the config")
    p_preset.set_defaults(func=cmd_preset)

    p_info = sub.add_parser("mesh-info", help="print mesh statistics as JSON")
    p_info.add_argument("path")
    p_info.set_defaults(func=cmd_mesh_info)

    p_spec = sub.add_parser(
        "spectrum", help="amplitude spectrum of probe CSV columns")
    p_spec.add_argument("csv")
    p_spec.add_argument("--column", help="single column name (default: all)")
    p_spec.add_argument("--fmin", type=float, default=0.0)
    p_spec.add_argument("--fmax", type=float, default=None)
    p_spec.add_argument("--out", metavar="FILE",
                        help="write the full spectrum table as CSV")
    p_spec.set_defaults(func=cmd_spectrum)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main(sys.argv[1:]))
