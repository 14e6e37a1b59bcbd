"""Run orchestration: config files, presets, sources, probes, and writers.

A run is described by a TOML file (flat tables plus [[source]], [[particle]],
and [[probe]] arrays); `load_config` merges it over the defaults below and
rejects unknown keys by path.  `Simulation` builds the mesh, operators, and
absorbing layers, owns the step loop, and writes probe CSVs, snapshots, and
a JSON summary.  Presets package the bundled experiment setups.

Time layout per step n (starting from e/d at t_n, b/h at t_{n-1/2}):
magnetic half -> particle gather/push/move and impressed currents sampled at
t_{n+1/2} -> electric step.  Probe rows are stamped t_{n+1}; whole-step
quantities (E components, D) are exact there while the staggered ones (B, H)
carry the freshest half-step value, a pure half-sample lag.
"""

from __future__ import annotations

import json
import math
import os
import time

try:
    import tomllib
except ModuleNotFoundError:        # Python < 3.11
    import tomli as tomllib

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .constants import C0, M_E, Q_E
from .constitutive import MaterialMap
from .field_solver import (
    DiscreteOperators,
    FieldState,
    build_operators,
    estimate_dt,
    expand_edges,
    new_state,
    step_te_electric,
    step_te_magnetic,
    step_tm_electric,
    step_tm_magnetic,
    te_energy,
    tm_energy,
)
from .mesh import Mesh, load_mesh, locate_point, rectangle_mesh
from .pic import ParticleMover, ParticleSet
from .pml import AbsorbingLayer, PmlProfile


class ConfigError(ValueError):
    """Config problem; the message names the offending key path."""


# ---------------------------------------------------------------------------
# Config schema: defaults double as the set of known keys
# ---------------------------------------------------------------------------

_SOURCE_DEFAULTS = {
    "kind": "axial-surface-current",   # or "azimuthal-surface-current"
    "radius": 0.25,
    "height": 0.3,
    "amplitude": 1.0,
    "frequency": 1.0e9,
    "cycles": 1,
}

_PARTICLE_DEFAULTS = {
    "z": 0.0,
    "rho": 0.5,
    "v_z": 0.0,
    "v_rho": 0.0,
    "v_phi": 0.0,
    "charge": -Q_E,
    "mass": M_E,
}

_PROBE_DEFAULTS = {"z": 0.0, "rho": 0.5}

DEFAULTS = {
    "mesh": {
        "kind": "rectangle",          # or "file"
        "path": "",
        "z_min": -0.5,
        "z_max": 0.5,
        "rho_min": 0.0,
        "rho_max": 1.125,
        "h": 0.025,
        "jitter": 0.0,
        "seed": 1,
        "periodic": True,
    },
    "run": {
        "polarizations": ["te"],
        "dt": "auto",
        "safety": 0.9,
        "steps": 1000,
        "seed": 1,
    },
    "boundary": {
        "axis": "auto",
        "rim": "pmc",
    },
    "pml": {
        "enabled": False,
        "rho0": 1.0,
        "thickness": 0.125,
        "taper_order": 3,
        "reflection_target": 1.0e-6,
        "sigma_max": 0.0,             # 0 = derive from reflection_target
    },
    "particles": {
        "rho_reflect": 0.0,           # 0 = none
        "shape_order": 3,
        "shape_alpha": 0.0,           # 0 = three mean edge lengths
        "ext_E": [0.0, 0.0, 0.0],
        "ext_B": [0.0, 0.0, 0.0],
    },
    "probes": {"stride": 1},
    "output": {
        "directory": "out",
        "probe_file": "probes.csv",
        "snapshot_stride": 0,
        "snapshot_format": "vtk",     # or "csv"
        "summary_file": "summary.json",
        "config_echo": "config.toml",
    },
    "solver": {
        "mode": "direct",
        "pattern_level": 2,
        "drop_tol": 1.0e-12,
    },
    "source": [],
    "particle": [],
    "probe": [],
}

_LIST_DEFAULTS = {
    "source": _SOURCE_DEFAULTS,
    "particle": _PARTICLE_DEFAULTS,
    "probe": _PROBE_DEFAULTS,
}


def _merge(defaults: dict, user: dict, path: str = "") -> dict:
    out = {}
    for key, dval in defaults.items():
        out[key] = dval.copy() if isinstance(dval, (dict, list)) else dval
    for key, uval in user.items():
        where = f"{path}.{key}" if path else key
        if key not in defaults:
            raise ConfigError(f"unknown config key '{where}'")
        dval = defaults[key]
        if isinstance(dval, dict):
            if not isinstance(uval, dict):
                raise ConfigError(f"'{where}' must be a table")
            out[key] = _merge(dval, uval, where)
        elif key in _LIST_DEFAULTS:
            if not isinstance(uval, list):
                raise ConfigError(f"'{where}' must be an array of tables")
            out[key] = [
                _merge(_LIST_DEFAULTS[key], item, f"{where}[{i}]")
                for i, item in enumerate(uval)
            ]
        else:
            out[key] = uval
    return out


def _validate(cfg: dict) -> dict:
    mesh = cfg["mesh"]
    if mesh["kind"] not in ("rectangle", "file"):
        raise ConfigError("mesh.kind must be 'rectangle' or 'file'")
    if mesh["kind"] == "file" and not mesh["path"]:
        raise ConfigError("mesh.path is required when mesh.kind = 'file'")
    run = cfg["run"]
    pols = run["polarizations"]
    if not pols or any(p not in ("te", "tm") for p in pols):
        raise ConfigError("run.polarizations must be a non-empty list drawn from ['te', 'tm']")
    if len(set(pols)) != len(pols):
        raise ConfigError("run.polarizations has duplicates")
    if run["dt"] != "auto" and not (isinstance(run["dt"], (int, float)) and run["dt"] > 0):
        raise ConfigError("run.dt must be 'auto' or a positive number of seconds")
    if int(run["steps"]) < 0:
        raise ConfigError("run.steps must be non-negative")
    if cfg["boundary"]["axis"] not in ("auto", "pmc", "pec"):
        raise ConfigError("boundary.axis must be 'auto', 'pmc', or 'pec'")
    if cfg["boundary"]["rim"] not in ("pmc", "pec"):
        raise ConfigError("boundary.rim must be 'pmc' or 'pec'")
    for i, src in enumerate(cfg["source"]):
        if src["kind"] not in ("axial-surface-current", "azimuthal-surface-current"):
            raise ConfigError(f"source[{i}].kind unknown: {src['kind']!r}")
        if src["frequency"] <= 0 or int(src["cycles"]) < 1:
            raise ConfigError(f"source[{i}] needs frequency > 0 and cycles >= 1")
        need = "te" if src["kind"] == "axial-surface-current" else "tm"
        if need not in pols:
            raise ConfigError(
                f"source[{i}] drives the {need} polarization, which is not enabled")
    for i, p in enumerate(cfg["particle"]):
        if p["mass"] <= 0:
            raise ConfigError(f"particle[{i}].mass must be positive")
        if p["v_phi"] != 0.0 and "tm" not in pols:
            raise ConfigError(
                f"particle[{i}] has azimuthal velocity but the tm polarization is off")
    if cfg["particle"] and "te" not in pols:
        raise ConfigError("particles require the te polarization for in-plane currents")
    if int(cfg["probes"]["stride"]) < 1:
        raise ConfigError("probes.stride must be >= 1")
    if cfg["pml"]["enabled"]:
        for i, p in enumerate(cfg["probe"]):
            if p["rho"] > cfg["pml"]["rho0"]:
                raise ConfigError(
                    f"probe[{i}] sits inside the absorbing layer "
                    f"(rho = {p['rho']} > {cfg['pml']['rho0']}); probes must "
                    "stay in the physical region")
    if cfg["output"]["snapshot_format"] not in ("vtk", "csv"):
        raise ConfigError("output.snapshot_format must be 'vtk' or 'csv'")
    for vec in ("ext_E", "ext_B"):
        if len(cfg["particles"][vec]) != 3:
            raise ConfigError(f"particles.{vec} must have 3 components (z, rho, phi)")
    return cfg


def load_config(path: str | Path) -> dict:
    """Parse and validate a TOML run config."""
    with open(path, "rb") as fh:
        try:
            user = tomllib.load(fh)
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from exc
    return _validate(_merge(DEFAULTS, user))


def make_config(overrides: dict | None = None) -> dict:
    return _validate(_merge(DEFAULTS, overrides or {}))


def apply_override(cfg: dict, dotted: str, raw_value: str) -> None:
    """Set cfg['a']['b'] (or list element 'source[0].radius') from a string.

    The value is parsed as a TOML literal so types match the config schema.
    """
    try:
        value = tomllib.loads(f"v = {raw_value}")["v"]
    except tomllib.TOMLDecodeError:
        value = raw_value   # bare strings are convenient on the command line
    node = cfg
    parts = dotted.split(".")
    for i, part in enumerate(parts):
        idx = None
        if "[" in part:
            name, _, rest = part.partition("[")
            idx = int(rest.rstrip("]"))
            part = name
        if part not in node:
            raise ConfigError(f"unknown config key '{dotted}'")
        last = i == len(parts) - 1
        if idx is not None:
            lst = node[part]
            while len(lst) <= idx:
                lst.append(_LIST_DEFAULTS[part].copy() if part in _LIST_DEFAULTS else {})
            if last:
                lst[idx] = value
            else:
                node = lst[idx]
        elif last:
            old = node[part]
            if isinstance(old, (bool, int, float)) and isinstance(value, str):
                raise ConfigError(
                    f"cannot parse '{raw_value}' for '{dotted}' "
                    f"(expected {type(old).__name__})")
            node[part] = value
        else:
            node = node[part]


# ---------------------------------------------------------------------------
# TOML emission (subset: tables, arrays of tables, scalars, flat lists)
# ---------------------------------------------------------------------------

def _toml_scalar(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, str):
        return '"' + value.replace("\\", "\\\\").replace('"', '\\"') + '"'
    if isinstance(value, float):
        if value != value or value in (float("inf"), float("-inf")):
            raise ConfigError("non-finite float in config")
        text = repr(value)
        return text if any(c in text for c in ".eE") else text + ".0"
    if isinstance(value, int):
        return str(value)
    if isinstance(value, list):
        return "[" + ", ".join(_toml_scalar(v) for v in value) + "]"
    raise ConfigError(f"cannot emit config value of type {type(value).__name__}")


def emit_toml(cfg: dict) -> str:
    lines: list[str] = []
    for key, value in cfg.items():
        if isinstance(value, dict) or key in _LIST_DEFAULTS:
            continue
        lines.append(f"{key} = {_toml_scalar(value)}")
    for key, value in cfg.items():
        if isinstance(value, dict):
            lines.append("")
            lines.append(f"[{key}]")
            for k, v in value.items():
                lines.append(f"{k} = {_toml_scalar(v)}")
    for key in _LIST_DEFAULTS:
        for item in cfg.get(key, []):
            lines.append("")
            lines.append(f"[[{key}]]")
            for k, v in item.items():
                lines.append(f"{k} = {_toml_scalar(v)}")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# Waveform
# ---------------------------------------------------------------------------

def pulse_value(t: float, frequency: float, cycles: int) -> float:
    """Raised-cosine-windowed sinusoid over [0, cycles/frequency], else 0.

    The window and its first derivative vanish at both ends, so midpoint
    sampling of the pulse leaves essentially no net time integral.
    """
    duration = cycles / frequency
    if t <= 0.0 or t >= duration:
        return 0.0
    window = 0.5 - 0.5 * math.cos(2.0 * math.pi * t / duration)
    return math.sin(2.0 * math.pi * frequency * t) * window


# ---------------------------------------------------------------------------
# Impressed surface currents
# ---------------------------------------------------------------------------

@dataclass
class _ReducedSource:
    polarization: str
    idx: np.ndarray
    vals: np.ndarray
    frequency: float
    cycles: int
    amplitude: float

    def add(self, t: float, out: np.ndarray) -> None:
        g = pulse_value(t, self.frequency, self.cycles)
        if g != 0.0:
            out[self.idx] += (self.amplitude * g) * self.vals


def _axial_trace_edges(mesh: Mesh, radius: float, height: float
                       ) -> tuple[np.ndarray, np.ndarray]:
    """Edges lying on the cylinder trace rho=radius, |z| <= height/2."""
    tol = 0.25 * float(np.median(mesh.edge_lengths))
    r0 = mesh.nodes[mesh.edges[:, 0], 1]
    r1 = mesh.nodes[mesh.edges[:, 1], 1]
    z0 = mesh.nodes[mesh.edges[:, 0], 0]
    z1 = mesh.nodes[mesh.edges[:, 1], 0]
    zmid = 0.5 * (z0 + z1)
    on = ((np.abs(r0 - radius) <= tol) & (np.abs(r1 - radius) <= tol)
          & (np.abs(zmid) <= 0.5 * height))
    idx = np.nonzero(on)[0]
    # circulation of the primed current a*K along +z: a * dz per edge
    vals = radius * (z1[idx] - z0[idx])
    return idx, vals


def _azimuthal_trace_faces(mesh: Mesh, radius: float, height: float
                           ) -> tuple[np.ndarray, np.ndarray]:
    """Faces cut by the trace line, weighted by the cut length.

    The line is nudged outward by a hair so a trace coinciding with a mesh
    gridline lands in exactly one face column instead of two.
    """
    rho_line = radius + 1e-7 * float(np.median(mesh.edge_lengths))
    z_lo, z_hi = -0.5 * height, 0.5 * height
    idx = []
    vals = []
    for f in range(mesh.n_faces):
        # lam_i(z) along the vertical line: linear, lam = base + slope * z
        g = mesh.grad_lambda[f]
        c = mesh.centroids[f]
        lo, hi = z_lo, z_hi
        for i in range(3):
            base = 1.0 / 3.0 + g[i, 1] * (rho_line - c[1]) - g[i, 0] * c[0]
            slope = g[i, 0]
            if slope > 0.0:
                lo = max(lo, -base / slope)
            elif slope < 0.0:
                hi = min(hi, -base / slope)
            elif base < 0.0:
                lo, hi = 1.0, 0.0
                break
        if hi > lo:
            idx.append(f)
            vals.append(hi - lo)
    if not idx:
        return np.empty(0, dtype=np.int64), np.empty(0)
    return np.asarray(idx, dtype=np.int64), np.asarray(vals)


def build_sources(mesh: Mesh, ops: dict[str, DiscreteOperators],
                  specs: list[dict]) -> list[_ReducedSource]:
    sources = []
    for i, spec in enumerate(specs):
        if spec["kind"] == "axial-surface-current":
            idx_full, vals_full = _axial_trace_edges(mesh, spec["radius"], spec["height"])
            if len(idx_full) == 0:
                raise ConfigError(
                    f"source[{i}]: no mesh edges lie on the trace "
                    f"rho={spec['radius']}, |z|<={spec['height'] / 2}")
            full = np.zeros(mesh.n_edges)
            full[idx_full] = vals_full
            reduced = ops["te"].dofs.S_e.T @ full
            idx = np.nonzero(reduced)[0]
            sources.append(_ReducedSource("te", idx, reduced[idx],
                                          spec["frequency"], int(spec["cycles"]),
                                          spec["amplitude"]))
        else:
            idx, vals = _azimuthal_trace_faces(mesh, spec["radius"], spec["height"])
            if len(idx) == 0:
                raise ConfigError(
                    f"source[{i}]: the trace rho={spec['radius']} cuts no mesh faces")
            sources.append(_ReducedSource("tm", idx, vals,
                                          spec["frequency"], int(spec["cycles"]),
                                          spec["amplitude"]))
    return sources


# ---------------------------------------------------------------------------
# Probes
# ---------------------------------------------------------------------------

@dataclass
class _Probe:
    z: float
    rho: float
    face: int
    # reduced-index weight triples per polarization (empty when pol disabled)
    te_idx: np.ndarray = field(default_factory=lambda: np.empty(0, np.int64))
    te_wz: np.ndarray = field(default_factory=lambda: np.empty(0))
    te_wr: np.ndarray = field(default_factory=lambda: np.empty(0))
    tm_idx: np.ndarray = field(default_factory=lambda: np.empty(0, np.int64))
    tm_wz: np.ndarray = field(default_factory=lambda: np.empty(0))
    tm_wr: np.ndarray = field(default_factory=lambda: np.empty(0))
    inv_area: float = 0.0
    inv_eps_area: float = 0.0
    mu_z: float = 0.0
    mu_rho: float = 0.0


class ProbeSet:
    """Fixed sample points; per-step sampling is a few tiny dot products.

    Column layout per probe: te -> E_z, E_rho, B_phi; tm -> E_phi, H_z, H_rho.
    """

    def __init__(self, mesh: Mesh, materials: MaterialMap,
                 ops: dict[str, DiscreteOperators], points: list[dict]):
        from .mesh import whitney_eval

        self.mesh = mesh
        self.pols = sorted(ops.keys())
        self.probes: list[_Probe] = []
        for spec in points:
            z, rho = float(spec["z"]), float(spec["rho"])
            f = locate_point(mesh, (z, rho))
            if f < 0:
                raise ConfigError(f"probe ({z}, {rho}) lies outside the mesh")
            _, W1, _ = whitney_eval(mesh, f, (z, rho))
            probe = _Probe(z=z, rho=rho, face=f,
                           inv_area=1.0 / mesh.areas[f],
                           inv_eps_area=1.0 / (materials.eps[f, 2] * mesh.areas[f]),
                           mu_z=materials.mu[f, 0], mu_rho=materials.mu[f, 1])
            for pol in self.pols:
                S_e = ops[pol].dofs.S_e.tocsr()
                acc: dict[int, list[float]] = {}
                for l in range(3):
                    row = S_e.getrow(mesh.edge_of_face[f, l])
                    for col, val in zip(row.indices, row.data):
                        wz, wr = acc.setdefault(int(col), [0.0, 0.0])
                        acc[int(col)] = [wz + val * W1[l, 0], wr + val * W1[l, 1]]
                idx = np.array(sorted(acc), dtype=np.int64)
                wz = np.array([acc[int(i)][0] for i in idx])
                wr = np.array([acc[int(i)][1] for i in idx])
                if pol == "te":
                    probe.te_idx, probe.te_wz, probe.te_wr = idx, wz, wr
                else:
                    probe.tm_idx, probe.tm_wz, probe.tm_wr = idx, wz, wr
            self.probes.append(probe)

    def header(self) -> list[str]:
        cols = ["step", "t"]
        for i in range(len(self.probes)):
            if "te" in self.pols:
                cols += [f"p{i}_E_z", f"p{i}_E_rho", f"p{i}_B_phi"]
            if "tm" in self.pols:
                cols += [f"p{i}_E_phi", f"p{i}_H_z", f"p{i}_H_rho"]
        return cols

    def sample(self, states: dict[str, FieldState]) -> list[float]:
        out: list[float] = []
        for p in self.probes:
            if "te" in self.pols:
                e = states["te"].edge
                out.append(float(p.te_wz @ e[p.te_idx]))
                out.append(float(p.te_wr @ e[p.te_idx]))
                out.append(float(states["te"].face[p.face] * p.inv_area))
            if "tm" in self.pols:
                h = states["tm"].edge
                out.append(float(states["tm"].face[p.face] * p.inv_eps_area))
                out.append(float(p.tm_wz @ h[p.tm_idx]))
                out.append(float(p.tm_wr @ h[p.tm_idx]))
        return out


# ---------------------------------------------------------------------------
# Spectra
# ---------------------------------------------------------------------------

def fft_spectrum(series: np.ndarray, dt: float, pad_factor: int = 8
                 ) -> tuple[np.ndarray, np.ndarray]:
    """One-sided amplitude spectrum of a uniformly sampled series.

    Hann window, zero-padding by pad_factor for a dense frequency grid,
    amplitudes scaled so a unit sinusoid reads 1.0 at its peak.
    """
    x = np.asarray(series, dtype=float)
    if x.size < 16:
        raise ValueError("need at least 16 samples for a spectrum")
    w = np.hanning(x.size)
    nfft = 1
    while nfft < pad_factor * x.size:
        nfft *= 2
    X = np.fft.rfft(x * w, nfft)
    freq = np.fft.rfftfreq(nfft, dt)
    amp = 2.0 * np.abs(X) / w.sum()
    amp[0] *= 0.5
    if nfft % 2 == 0:
        amp[-1] *= 0.5
    return freq, amp


def spectral_peak(freq: np.ndarray, amp: np.ndarray,
                  f_min: float = 0.0, f_max: float | None = None
                  ) -> tuple[float, float]:
    """Dominant peak within [f_min, f_max], refined by 3-point quadratic fit."""
    hi = freq[-1] if f_max is None else f_max
    band = np.nonzero((freq >= f_min) & (freq <= hi))[0]
    if band.size == 0:
        raise ValueError("empty frequency band")
    k = band[np.argmax(amp[band])]
    if 0 < k < len(amp) - 1 and amp[k] > 0.0:
        with np.errstate(divide="ignore"):
            la, lb, lc = np.log(np.maximum(amp[k - 1:k + 2], 1e-300))
        denom = la - 2.0 * lb + lc
        delta = 0.5 * (la - lc) / denom if denom != 0.0 else 0.0
        delta = float(np.clip(delta, -0.5, 0.5))
        df = freq[1] - freq[0]
        return float(freq[k] + delta * df), float(amp[k])
    return float(freq[k]), float(amp[k])


# ---------------------------------------------------------------------------
# Snapshot writers
# ---------------------------------------------------------------------------

def snapshot_fields(mesh: Mesh, materials: MaterialMap,
                    ops: dict[str, DiscreteOperators],
                    states: dict[str, FieldState]) -> dict[str, np.ndarray]:
    """Per-face physical components at centroids, via the edge basis mean."""
    out: dict[str, np.ndarray] = {}
    third = 1.0 / 3.0
    for pol, state in states.items():
        full = expand_edges(ops[pol].dofs, state.edge)
        vz = np.zeros(mesh.n_faces)
        vr = np.zeros(mesh.n_faces)
        for l in range(3):
            q = (l + 1) % 3
            s = mesh.face_edge_sign[:, l]
            wz = s * third * (mesh.grad_lambda[:, q, 0] - mesh.grad_lambda[:, l, 0])
            wr = s * third * (mesh.grad_lambda[:, q, 1] - mesh.grad_lambda[:, l, 1])
            vz += full[mesh.edge_of_face[:, l]] * wz
            vr += full[mesh.edge_of_face[:, l]] * wr
        if pol == "te":
            out["E_z"] = vz
            out["E_rho"] = vr
            out["E_par_mag"] = np.hypot(vz, vr)
            out["B_phi"] = state.face / mesh.areas
        else:
            out["H_z"] = vz
            out["H_rho"] = vr
            out["H_par_mag"] = np.hypot(vz, vr)
            out["E_phi"] = state.face / (materials.eps[:, 2] * mesh.areas)
    return out


def write_vtk(path: str | Path, mesh: Mesh, cell_fields: dict[str, np.ndarray]) -> None:
    """Legacy ASCII unstructured-grid snapshot with per-face scalars."""
    lines = ["# vtk DataFile Version 3.0", "axisymmetric field snapshot",
             "ASCII", "DATASET UNSTRUCTURED_GRID",
             f"POINTS {mesh.n_nodes} double"]
    for z, r in mesh.nodes:
        lines.append(f"{z:.17g} {r:.17g} 0")
    lines.append(f"CELLS {mesh.n_faces} {4 * mesh.n_faces}")
    for a, b, c in mesh.faces:
        lines.append(f"3 {a} {b} {c}")
    lines.append(f"CELL_TYPES {mesh.n_faces}")
    lines.extend(["5"] * mesh.n_faces)
    lines.append(f"CELL_DATA {mesh.n_faces}")
    for name in sorted(cell_fields):
        lines.append(f"SCALARS {name} double 1")
        lines.append("LOOKUP_TABLE default")
        lines.extend(f"{v:.17g}" for v in cell_fields[name])
    Path(path).write_text("\n".join(lines) + "\n")


def write_csv_snapshot(path: str | Path, mesh: Mesh,
                       cell_fields: dict[str, np.ndarray]) -> None:
    names = sorted(cell_fields)
    lines = ["z,rho," + ",".join(names)]
    for k in range(mesh.n_faces):
        vals = ",".join(f"{cell_fields[n][k]:.17g}" for n in names)
        lines.append(f"{mesh.centroids[k, 0]:.17g},{mesh.centroids[k, 1]:.17g},{vals}")
    Path(path).write_text("\n".join(lines) + "\n")


# ---------------------------------------------------------------------------
# Steppers (uniform split-step interface, with or without an absorbing layer)
# ---------------------------------------------------------------------------

class _PlainStepper:
    def __init__(self, ops: DiscreteOperators, dt: float):
        self.ops = ops
        self.dt = dt
        if ops.polarization == "te":
            self._mag, self._ele = step_te_magnetic, step_te_electric
        else:
            self._mag, self._ele = step_tm_magnetic, step_tm_electric

    def magnetic(self, state: FieldState) -> None:
        self._mag(self.ops, state, self.dt)

    def electric(self, state: FieldState, j: np.ndarray | None = None) -> None:
        self._ele(self.ops, state, self.dt, j)


class _LayerStepper:
    def __init__(self, layer: AbsorbingLayer):
        self.layer = layer

    def magnetic(self, state: FieldState) -> None:
        self.layer.step_magnetic(state)

    def electric(self, state: FieldState, j: np.ndarray | None = None) -> None:
        self.layer.step_electric(state, j)


# ---------------------------------------------------------------------------
# Simulation
# ---------------------------------------------------------------------------

class NanAbort(RuntimeError):
    """Raised when a field state goes non-finite mid-run."""


def build_mesh(cfg: dict) -> Mesh:
    mc = cfg["mesh"]
    if mc["kind"] == "file":
        return load_mesh(mc["path"])
    return rectangle_mesh(mc["z_min"], mc["z_max"], mc["rho_max"], mc["h"],
                          rho_min=mc["rho_min"], jitter=mc["jitter"],
                          seed=mc["seed"])


class Simulation:
    """Builds every runtime object from a validated config and runs the loop."""

    def __init__(self, cfg: dict):
        self.cfg = cfg
        self.mesh = build_mesh(cfg)
        self.materials = MaterialMap.vacuum(self.mesh)
        periodic = bool(cfg["mesh"]["periodic"])
        pols = list(cfg["run"]["polarizations"])
        # boundary.axis "auto" is the m = 0 regularity condition: the axis
        # edges stay unknowns in both polarizations, which in wall language
        # is a magnetic wall for the E-B set and an electric wall for the
        # D-H set.  Forcing "pmc" or "pec" applies that wall to both sets,
        # which on the axis models a thin conducting rod instead.
        def _axis_for(pol: str) -> str:
            axis = cfg["boundary"]["axis"]
            if axis == "auto":
                return "pmc" if pol == "te" else "pec"
            return axis

        self.ops = {
            pol: build_operators(
                self.mesh, polarization=pol, materials=self.materials,
                axis_bc=_axis_for(pol), rim_bc=cfg["boundary"]["rim"],
                periodic=periodic, solver_mode=cfg["solver"]["mode"],
                pattern_level=cfg["solver"]["pattern_level"],
                drop_tol=cfg["solver"]["drop_tol"])
            for pol in pols
        }
        if cfg["run"]["dt"] == "auto":
            self.dt = min(estimate_dt(op, safety=cfg["run"]["safety"])
                          for op in self.ops.values())
        else:
            self.dt = float(cfg["run"]["dt"])
        self.steps = int(cfg["run"]["steps"])

        self.steppers: dict[str, _PlainStepper | _LayerStepper] = {}
        if cfg["pml"]["enabled"]:
            profile = PmlProfile(
                rho0=cfg["pml"]["rho0"], thickness=cfg["pml"]["thickness"],
                taper_order=int(cfg["pml"]["taper_order"]),
                reflection_target=cfg["pml"]["reflection_target"],
                sigma_max=cfg["pml"]["sigma_max"] or None)
            for pol, op in self.ops.items():
                self.steppers[pol] = _LayerStepper(AbsorbingLayer(
                    op, profile, self.dt, solver_mode=cfg["solver"]["mode"]))
        else:
            for pol, op in self.ops.items():
                self.steppers[pol] = _PlainStepper(op, self.dt)

        self.states = {pol: new_state(op) for pol, op in self.ops.items()}

        self.particles: ParticleSet | None = None
        self.mover: ParticleMover | None = None
        if cfg["particle"]:
            pc = cfg["particles"]
            self.mover = ParticleMover(
                self.mesh, self.materials,
                shape_alpha=pc["shape_alpha"] or None,
                shape_order=int(pc["shape_order"]),
                periodic=periodic,
                rho_reflect=pc["rho_reflect"] or None)
            rows = cfg["particle"]
            self.particles = ParticleSet(
                pos=np.array([[p["z"], p["rho"]] for p in rows], dtype=float),
                vel=np.array([[p["v_z"], p["v_rho"], p["v_phi"]] for p in rows],
                             dtype=float),
                charge=np.array([p["charge"] for p in rows], dtype=float),
                mass=np.array([p["mass"] for p in rows], dtype=float),
                face=np.array([locate_point(self.mesh, (p["z"], p["rho"]))
                               for p in rows], dtype=np.int64),
            )
            if np.any(self.particles.face < 0):
                bad = int(np.nonzero(self.particles.face < 0)[0][0])
                raise ConfigError(f"particle[{bad}] starts outside the mesh")
            self.ext_E = np.asarray(pc["ext_E"], dtype=float)
            self.ext_B = np.asarray(pc["ext_B"], dtype=float)

        self.sources = build_sources(self.mesh, self.ops, cfg["source"])
        self.probe_set = (ProbeSet(self.mesh, self.materials, self.ops, cfg["probe"])
                          if cfg["probe"] else None)
        self.probe_rows: list[list[float]] = []
        self.energy_log: list[tuple[float, dict[str, float]]] = []

    # -- energies ----------------------------------------------------------

    def field_energy(self, pol: str) -> float:
        """Instantaneous (non-staggered) energy; fine for run summaries."""
        ops, st = self.ops[pol], self.states[pol]
        if pol == "te":
            return te_energy(ops, st.edge, st.face, st.face)
        return tm_energy(ops, st.face, st.edge, st.edge)

    # -- main loop ---------------------------------------------------------

    def run(self, on_step=None) -> dict:
        cfg = self.cfg
        t_wall = time.perf_counter()
        stride = int(cfg["probes"]["stride"])
        snap_stride = int(cfg["output"]["snapshot_stride"])
        out_dir = Path(cfg["output"]["directory"])
        snapshots: list[str] = []
        if snap_stride:
            out_dir.mkdir(parents=True, exist_ok=True)

        has_te = "te" in self.states
        has_tm = "tm" in self.states
        te = self.states.get("te")
        tm = self.states.get("tm")
        pic = self.particles is not None and self.particles.n > 0
        energy_stride = max(1, self.steps // 256) if self.steps else 1

        for n in range(self.steps):
            t_half = (n + 0.5) * self.dt
            if pic:
                b_prev = te.face.copy() if has_te else None
                h_prev = tm.edge.copy() if has_tm else None
            if has_te:
                self.steppers["te"].magnetic(te)
            if has_tm:
                self.steppers["tm"].magnetic(tm)

            j_te = None
            j_tm = None
            if pic:
                e_full = expand_edges(self.ops["te"].dofs, te.edge) if has_te else None
                b_avg = 0.5 * (b_prev + te.face) if has_te else None
                h_avg = (expand_edges(self.ops["tm"].dofs, 0.5 * (h_prev + tm.edge))
                         if has_tm else None)
                d = tm.face if has_tm else None
                E, B = self.mover.gather(self.particles, e_full=e_full, d=d,
                                         b_avg=b_avg, h_avg_full=h_avg,
                                         ext_E=self.ext_E, ext_B=self.ext_B)
                self.mover.push(self.particles, E, B, self.dt)
                j_full, mid, mid_face = self.mover.advance(self.particles, self.dt)
                j_te = self.ops["te"].dofs.S_e.T @ j_full
                if has_tm:
                    j_tm = self.mover.deposit_azimuthal(self.particles, mid, mid_face)
            for src in self.sources:
                if src.polarization == "te":
                    if j_te is None:
                        j_te = np.zeros(self.ops["te"].dofs.n_reduced)
                    src.add(t_half, j_te)
                else:
                    if j_tm is None:
                        j_tm = np.zeros(self.mesh.n_faces)
                    src.add(t_half, j_tm)

            if has_te:
                self.steppers["te"].electric(te, j_te)
            if has_tm:
                self.steppers["tm"].electric(tm, j_tm)

            if self.probe_set is not None and (n + 1) % stride == 0:
                self.probe_rows.append(
                    [float(n + 1), (n + 1) * self.dt] + self.probe_set.sample(self.states))
            if (n + 1) % energy_stride == 0 or n + 1 == self.steps:
                self.energy_log.append(((n + 1) * self.dt,
                                        {p: self.field_energy(p) for p in self.states}))
            if snap_stride and (n + 1) % snap_stride == 0:
                snapshots.append(self._write_snapshot(out_dir, n + 1))
            if (n + 1) % 256 == 0:
                self._check_finite(n + 1, out_dir)
            if on_step is not None:
                on_step(n)

        self._check_finite(self.steps, out_dir)
        wall = time.perf_counter() - t_wall
        return self._finalize(out_dir, snapshots, wall)

    def _check_finite(self, step: int, out_dir: Path) -> None:
        for pol, st in self.states.items():
            if not (np.all(np.isfinite(st.edge)) and np.all(np.isfinite(st.face))):
                out_dir.mkdir(parents=True, exist_ok=True)
                dump = out_dir / f"nan_abort_step{step}.json"
                dump.write_text(json.dumps({
                    "step": step, "polarization": pol, "dt": self.dt,
                    "bad_edges": int(np.sum(~np.isfinite(st.edge))),
                    "bad_faces": int(np.sum(~np.isfinite(st.face))),
                }, indent=2, sort_keys=True))
                raise NanAbort(
                    f"non-finite {pol} field at step {step}; diagnostics in {dump}")

    def _write_snapshot(self, out_dir: Path, step: int) -> str:
        fields = snapshot_fields(self.mesh, self.materials, self.ops, self.states)
        fmt = self.cfg["output"]["snapshot_format"]
        name = f"snapshot_{step:06d}.{'vtk' if fmt == 'vtk' else 'csv'}"
        path = out_dir / name
        if fmt == "vtk":
            write_vtk(path, self.mesh, fields)
        else:
            write_csv_snapshot(path, self.mesh, fields)
        return name

    def probe_csv_text(self) -> str:
        if self.probe_set is None:
            raise ValueError("run has no probes")
        lines = [",".join(self.probe_set.header())]
        for row in self.probe_rows:
            lines.append(f"{int(row[0])}," + ",".join(f"{v:.17g}" for v in row[1:]))
        return "\n".join(lines) + "\n"

    def _finalize(self, out_dir: Path, snapshots: list[str], wall: float) -> dict:
        cfg = self.cfg
        echo = cfg["output"]["config_echo"]
        writes_probes = self.probe_set is not None and cfg["output"]["probe_file"]
        if writes_probes or echo or cfg["output"]["summary_file"]:
            out_dir.mkdir(parents=True, exist_ok=True)
        artifacts = {}
        if writes_probes:
            probe_path = out_dir / cfg["output"]["probe_file"]
            probe_path.write_text(self.probe_csv_text())
            artifacts["probes"] = probe_path.name
        if echo:
            (out_dir / echo).write_text(emit_toml(cfg))
            artifacts["config"] = echo
        summary = {
            "mesh": {"nodes": self.mesh.n_nodes, "edges": self.mesh.n_edges,
                     "faces": self.mesh.n_faces},
            "dt": self.dt,
            "steps": self.steps,
            "polarizations": sorted(self.states),
            "energy_history": [
                {"t": t, **{f"{p}_energy": e for p, e in d.items()}}
                for t, d in self.energy_log
            ],
            "particles": {
                "count": 0 if self.particles is None else int(self.particles.n),
                "lost": 0 if self.particles is None
                        else int(np.sum(self.particles.face < 0)),
            },
            "snapshots": snapshots,
            "artifacts": artifacts,
            "wall_seconds": wall,
            "workers": int(os.environ.get("AXIPIC_WORKERS", "1")),
        }
        summary_file = cfg["output"]["summary_file"]
        if summary_file:
            (out_dir / summary_file).write_text(
                json.dumps(summary, indent=2, sort_keys=True) + "\n")
        return summary


def run_config(cfg: dict) -> dict:
    return Simulation(cfg).run()


# ---------------------------------------------------------------------------
# Presets
# ---------------------------------------------------------------------------

_RING_CHARGE = 1.0e6 * -Q_E
_RING_MASS = 1.0e6 * M_E
_DT_MM = 1.0e-3 / C0      # one millimeter of light travel


def preset(name: str) -> dict:
    """Bundled experiment setups; returns a validated config dict."""
    builder = _PRESETS.get(name)
    if builder is None:
        raise ConfigError(f"unknown preset '{name}'; choices: {', '.join(sorted(_PRESETS))}")
    return _validate(_merge(DEFAULTS, builder()))


def preset_names() -> list[str]:
    return sorted(_PRESETS)


def _surface_current(kind: str) -> dict:
    return {
        "mesh": {"h": 0.0125},
        "run": {"polarizations": ["te" if kind == "axial-surface-current" else "tm"],
                "dt": _DT_MM, "steps": 5000},
        "pml": {"enabled": True},
        "source": [{"kind": kind}],
        "probe": [{"z": 0.0, "rho": 0.6}],
        "output": {"directory": "out-te-surface-current"
                   if kind == "axial-surface-current" else "out-tm-surface-current"},
    }


def _ring_case(rho_reflect: float, tag: str) -> dict:
    # 18000 steps = 60 ns: the outward-drifting ring reaches even the
    # farthest reflector (rho = 1.1 at 50 ns) with time to spare for the
    # bounce and the return leg, so all three cases exercise their wall.
    return {
        "mesh": {"h": 0.0125},
        "run": {"polarizations": ["te", "tm"], "dt": _DT_MM, "steps": 18000},
        "pml": {"enabled": True},
        "particle": [{
            "z": -0.15, "rho": 0.75,
            "v_z": 0.0129 * C0, "v_rho": 0.0233 * C0, "v_phi": 0.0025 * C0,
            "charge": _RING_CHARGE, "mass": _RING_MASS,
        }],
        "particles": {"rho_reflect": rho_reflect},
        "probe": [{"z": 0.0, "rho": 0.85}],
        "output": {"directory": f"out-ring-near-pml-{tag}"},
    }


def _gyromotion(with_pml: bool) -> dict:
    # ten Larmor periods at the bundled dt
    omega = abs(_RING_CHARGE) * 8.53e-4 / _RING_MASS
    steps = int(round(10.0 * 2.0 * math.pi / omega / _DT_MM))
    return {
        "mesh": {"h": 0.0125},
        "run": {"polarizations": ["te"], "dt": _DT_MM, "steps": steps},
        "pml": {"enabled": with_pml},
        "particle": [{
            "z": 0.45, "rho": 0.0, "v_z": 0.025 * C0,
            "charge": _RING_CHARGE, "mass": _RING_MASS,
        }],
        "particles": {"ext_B": [0.0, 0.0, 8.53e-4]},
        "probe": [{"z": 0.0, "rho": 0.9}],
        "output": {"directory": "out-gyromotion-pml" if with_pml
                   else "out-gyromotion-pmc"},
    }


_PRESETS = {
    "te-surface-current": lambda: _surface_current("axial-surface-current"),
    "tm-surface-current": lambda: _surface_current("azimuthal-surface-current"),
    "ring-near-pml-case1": lambda: _ring_case(1.1, "case1"),
    "ring-near-pml-case2": lambda: _ring_case(1.0, "case2"),
    "ring-near-pml-case3": lambda: _ring_case(0.9, "case3"),
    "gyromotion-pml": lambda: _gyromotion(True),
    "gyromotion-pmc": lambda: _gyromotion(False),
}
