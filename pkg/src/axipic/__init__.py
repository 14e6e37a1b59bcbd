"""Axisymmetric electromagnetic particle-in-cell simulator.

Fields live on an unstructured triangular mesh of the (z, rho) meridian
half-plane and are advanced with a dual pair of finite-element time-domain
leapfrog schemes; charged rings are pushed through them with
charge-conserving current deposition.  See the README for the layout.
"""

from __future__ import annotations

from .constants import C0, EPS0, MU0, M_E, Q_E
from .driver import (
    ConfigError,
    Simulation,
    fft_spectrum,
    load_config,
    make_config,
    preset,
    preset_names,
    pulse_value,
    run_config,
    spectral_peak,
)
from .mesh import (
    Mesh,
    MeshError,
    build_incidence,
    load_mesh,
    locate_point,
    mesh_from_arrays,
    mesh_info,
    rectangle_mesh,
    save_mesh,
    whitney_eval,
)

__version__ = "0.1.0"

__all__ = [
    "C0",
    "EPS0",
    "MU0",
    "M_E",
    "Q_E",
    "ConfigError",
    "Mesh",
    "MeshError",
    "Simulation",
    "build_incidence",
    "fft_spectrum",
    "load_config",
    "load_mesh",
    "locate_point",
    "make_config",
    "mesh_from_arrays",
    "mesh_info",
    "preset",
    "preset_names",
    "pulse_value",
    "rectangle_mesh",
    "run_config",
    "save_mesh",
    "spectral_peak",
    "whitney_eval",
    "__version__",
]
