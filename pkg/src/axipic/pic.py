"""Particle storage, field gather, velocity push, and current deposits.

Superparticles are rings: a point in the (z, rho) half-plane carrying the
total charge and mass of the physical ring it stands for.  Velocities use
the (z, rho, phi) component order shared with the field modules.

The in-plane deposit is the exact path integral of the edge basis along
each straight sub-step, which makes the discrete continuity equation hold
to rounding: G^T j = Q (lambda_end - lambda_start) / dt per sub-path.  The
azimuthal deposit spreads Q v_phi over faces with a compact polynomial
shape of unit integral; support pieces are clipped against the shape's
box so the fixed quadrature only ever integrates a polynomial.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import _kernels
from .constitutive import MaterialMap
from .mesh import Mesh, locate_point

# Unit-integral half-widths of (1 - u^2)^m profiles: H = alpha * SHAPE_UNIT_WIDTH[m].
SHAPE_UNIT_WIDTH = {0: 0.5, 1: 0.75, 2: 15.0 / 16.0, 3: 35.0 / 32.0}


def triangle_rule(n: int = 7) -> tuple[np.ndarray, np.ndarray]:
    """Collapsed Gauss-Legendre product rule on the unit triangle.

    Returns barycentric points (n*n, 3) and weights summing to one, so a
    face integral is area * sum(w * f(x)).  The collapse direction carries
    the (1-u) Jacobian, so n = 7 integrates total degree 12 exactly (the
    u-line sees degree 13 after the Jacobian, within Gauss-7 reach).
    """
    x, w = np.polynomial.legendre.leggauss(n)
    u = 0.5 * (x + 1.0)
    wu = 0.5 * w
    pts = np.empty((n * n, 3))
    wts = np.empty(n * n)
    k = 0
    for i in range(n):
        for j in range(n):
            a = u[i]
            b = u[j] * (1.0 - u[i])
            pts[k, 0] = 1.0 - a - b
            pts[k, 1] = a
            pts[k, 2] = b
            wts[k] = wu[i] * wu[j] * (1.0 - u[i]) * 2.0
            k += 1
    return pts, wts


@dataclass
class ParticleSet:
    """Ring superparticles; face holds the current location hint (-1 = lost)."""

    pos: np.ndarray      # (n, 2) (z, rho)
    vel: np.ndarray      # (n, 3) (z, rho, phi)
    charge: np.ndarray   # (n,) total ring charge [C]
    mass: np.ndarray     # (n,) total ring mass [kg]
    face: np.ndarray     # (n,) int64

    @property
    def n(self) -> int:
        return self.pos.shape[0]

    @classmethod
    def single(cls, mesh: Mesh, *, z: float, rho: float, charge: float,
               mass: float, v_z: float = 0.0, v_rho: float = 0.0,
               v_phi: float = 0.0) -> "ParticleSet":
        f = locate_point(mesh, (z, rho))
        if f < 0:
            raise ValueError(f"particle position ({z}, {rho}) is outside the mesh")
        return cls(
            pos=np.array([[z, rho]], dtype=float),
            vel=np.array([[v_z, v_rho, v_phi]], dtype=float),
            charge=np.array([charge], dtype=float),
            mass=np.array([mass], dtype=float),
            face=np.array([f], dtype=np.int64),
        )


class ParticleMover:
    """Mesh-resident particle operations on full (unreduced) DoF layouts.

    Boundary handling: rho reflects specularly at the lower mesh edge (the
    axis for rho_min = 0) and, when rho_reflect is given, at that radius;
    z either wraps (periodic=True) or is unguarded, in which case a
    particle reaching a z wall is dropped from further updates.
    """

    def __init__(self, mesh: Mesh, materials: MaterialMap | None = None, *,
                 shape_alpha: float | None = None, shape_order: int = 3,
                 periodic: bool = False, rho_reflect: float | None = None):
        if shape_order not in SHAPE_UNIT_WIDTH:
            raise ValueError(f"shape_order must be one of {sorted(SHAPE_UNIT_WIDTH)}")
        if materials is None:
            materials = MaterialMap.vacuum(mesh)
        self.mesh = mesh
        self.shape_order = int(shape_order)
        # Default smoothing radius: three typical element lengths.
        self.shape_alpha = (3.0 * float(np.mean(mesh.edge_lengths))
                            if shape_alpha is None else float(shape_alpha))
        if self.shape_alpha <= 0.0:
            raise ValueError("shape_alpha must be positive")
        self.h_support = self.shape_alpha * SHAPE_UNIT_WIDTH[self.shape_order]
        self.periodic = bool(periodic)
        self.z_min = float(mesh.nodes[:, 0].min())
        self.z_max = float(mesh.nodes[:, 0].max())
        self.rho_wall = float(mesh.nodes[:, 1].min())
        self.rho_reflect = (self.rho_wall - 1.0 if rho_reflect is None
                            else float(rho_reflect))

        self._grad = np.ascontiguousarray(mesh.grad_lambda)
        self._cent = np.ascontiguousarray(mesh.centroids)
        self._neigh = np.ascontiguousarray(mesh.face_neighbors)
        self._eof = np.ascontiguousarray(mesh.edge_of_face)
        self._sign = np.ascontiguousarray(mesh.face_edge_sign)
        self._inv_area = 1.0 / mesh.areas
        self._eps_phi_area = materials.eps[:, 2] * mesh.areas
        self._mu_z = np.ascontiguousarray(materials.mu[:, 0])
        self._mu_rho = np.ascontiguousarray(materials.mu[:, 1])
        self._tri = np.ascontiguousarray(mesh.nodes[mesh.faces])
        self._bbox = np.column_stack([
            self._tri[:, :, 0].min(axis=1), self._tri[:, :, 0].max(axis=1),
            self._tri[:, :, 1].min(axis=1), self._tri[:, :, 1].max(axis=1),
        ])
        self._qp, self._qw = triangle_rule(7)
        self._dummy_j = np.zeros(1)

    def gather(self, particles: ParticleSet,
               e_full: np.ndarray | None = None,
               d: np.ndarray | None = None,
               b_avg: np.ndarray | None = None,
               h_avg_full: np.ndarray | None = None,
               ext_E: np.ndarray | None = None,
               ext_B: np.ndarray | None = None) -> tuple[np.ndarray, np.ndarray]:
        """Physical (E, B) triples at particle positions, refreshing face hints.

        e_full/h_avg_full are canonical full-edge values, d and b_avg face
        values; b_avg and h_avg_full should already be centered in time.
        Omitted field arrays count as zero; ext_E/ext_B add uniform
        external fields.
        """
        m = self.mesh
        zeros_e = np.zeros(m.n_edges)
        zeros_f = np.zeros(m.n_faces)
        E = np.empty((particles.n, 3))
        B = np.empty((particles.n, 3))
        _kernels.gather(
            particles.pos, particles.face,
            zeros_e if e_full is None else e_full,
            zeros_f if d is None else d,
            zeros_f if b_avg is None else b_avg,
            zeros_e if h_avg_full is None else h_avg_full,
            self._grad, self._cent, self._neigh, self._eof, self._sign,
            self._inv_area, self._eps_phi_area, self._mu_z, self._mu_rho,
            m.n_faces, E, B)
        if ext_E is not None:
            E += np.asarray(ext_E, dtype=float)
        if ext_B is not None:
            B += np.asarray(ext_B, dtype=float)
        return E, B

    def push(self, particles: ParticleSet, E: np.ndarray, B: np.ndarray,
             dt: float) -> None:
        """Rotate v^(n-1/2) to v^(n+1/2) through the averaged Lorentz force."""
        s_arr = particles.charge * dt / particles.mass
        _kernels.push(particles.vel, E, B, s_arr)

    def advance(self, particles: ParticleSet, dt: float
                ) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Move particles one step and deposit the in-plane current.

        Returns (j_full, mid_pos, mid_face): the charge-conserving edge
        current in full layout plus the half-step positions (computed with
        the same wall handling) for the azimuthal deposit.
        """
        mid_pos = particles.pos.copy()
        mid_vel = particles.vel.copy()
        mid_face = particles.face.copy()
        _kernels.move(mid_pos, mid_vel, mid_face, particles.charge, 0.5 * dt,
                      self._grad, self._cent, self._neigh, self._eof, self._sign,
                      self.z_min, self.z_max, self.periodic,
                      self.rho_wall, self.rho_reflect,
                      self.mesh.n_faces, self._dummy_j, False)
        j_full = np.zeros(self.mesh.n_edges)
        _kernels.move(particles.pos, particles.vel, particles.face,
                      particles.charge, dt,
                      self._grad, self._cent, self._neigh, self._eof, self._sign,
                      self.z_min, self.z_max, self.periodic,
                      self.rho_wall, self.rho_reflect,
                      self.mesh.n_faces, j_full, True)
        return j_full, mid_pos, mid_face

    def deposit_azimuthal(self, particles: ParticleSet, mid_pos: np.ndarray,
                          mid_face: np.ndarray) -> np.ndarray:
        """Shape-smoothed Q v_phi deposit at the half-step positions.

        Returns the face-layout current for the d update.  The sum over
        faces equals Q v_phi whenever the support lies inside the mesh;
        near boundaries the support is clipped, not renormalized.
        """
        j = np.zeros(self.mesh.n_faces)
        if np.any(particles.charge * particles.vel[:, 2]):
            _kernels.ring_deposit(mid_pos, particles.vel, mid_face,
                                  particles.charge, self._tri, self._bbox,
                                  self._qp, self._qw, self.shape_alpha,
                                  self.h_support, self.shape_order, j)
        return j

    def kinetic_energy(self, particles: ParticleSet) -> float:
        v2 = np.sum(particles.vel ** 2, axis=1)
        return float(0.5 * np.sum(particles.mass * v2))
