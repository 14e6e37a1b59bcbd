"""Radial absorbing layer via complex coordinate stretching.

The stretch s = 1 + sigma / (j omega eps0) turns each constitutive relation
inside the layer into a first-order ODE linking a stretched flux X to an
unstretched field value Y:

    r0 X + r1 dX/dt = q0 Y + q1 dY/dt

discretized with the trapezoidal rule.  With tau = 2 / dt and
Lambda = r0 + r1 tau the update is

    X_new = w Y_new + g,   w = (q0 + q1 tau) / Lambda,
    g = u0 X + u1 Xdot - v0 Y - v1 Ydot,
    u0 = r1 tau / Lambda,  u1 = r1 / Lambda,
    v0 = q1 tau / Lambda,  v1 = q1 / Lambda,

and both rates refresh as  Xdot_new = -Xdot + tau (X_new - X).

Chain coefficient tables, with rho the face centroid radius, Om the face
area and sigma the layer conductivity at the centroid:

  "te" (in-plane e, azimuthal b):
    edge, z   component: r = (0, 1),            q = (rho sigma, eps0 rho)
    edge, rho component: r = (sigma/eps0, 1),   q = (0, eps0 rho)
    face (X = b, Y = h): r = (0, rho/Om),       q = (mu0 sigma/eps0, mu0)

  "tm" (in-plane h, azimuthal d) is the eps0 <-> mu0 dual:
    edge, z:   r = (0, 1),            q = (mu0 rho sigma/eps0, mu0 rho)
    edge, rho: r = (sigma/eps0, 1),   q = (0, mu0 rho)
    face (X = d, Y = e): r = (0, rho/Om),  q = (sigma, eps0)

The in-plane mass matrix of the layer run is assembled from the per-face
chain weights w; where sigma = 0 those weights are computed by the exact
same expressions as the plain constitutive assembly, so a layer whose
conductivity vanishes everywhere reproduces the plain stepper bit for bit.
Splits (one X per face/edge/component triple) are stored only for faces
with sigma > 0.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .constants import C0, EPS0, MU0
from .constitutive import (
    MassSolver,
    assemble_weighted,
    edge_mass_weights,
    inplane_kernels,
)
from .field_solver import (
    DiscreteOperators,
    FieldState,
    advance_face_te,
    expand_edges,
    te_edge_rhs,
    tm_edge_rhs,
)


@dataclass
class PmlProfile:
    """Polynomial conductivity taper starting at radius rho0.

    ``sigma_max`` defaults to the value that makes the round-trip analytic
    reflection of the continuous profile equal ``reflection_target``:

        sigma_max = -ln(target) (order + 1) eps0 c / (2 thickness)
    """

    rho0: float
    thickness: float
    taper_order: int = 3
    reflection_target: float = 1e-6
    sigma_max: float | None = None

    def __post_init__(self) -> None:
        if self.thickness <= 0:
            raise ValueError("layer thickness must be positive")
        if self.sigma_max is None:
            self.sigma_max = (
                -np.log(self.reflection_target)
                * (self.taper_order + 1)
                * EPS0
                * C0
                / (2.0 * self.thickness)
            )

    def sigma(self, rho: np.ndarray) -> np.ndarray:
        x = (np.asarray(rho, dtype=float) - self.rho0) / self.thickness
        x = np.clip(x, 0.0, 1.0)
        return self.sigma_max * x**self.taper_order


def chain_coefficients(
    r0: np.ndarray, r1: np.ndarray, q0: np.ndarray, q1: np.ndarray, tau: float
) -> tuple[np.ndarray, ...]:
    """(w, u0, u1, v0, v1) for the trapezoidal update of one chain."""
    lam = r0 + r1 * tau
    w = (q0 + q1 * tau) / lam
    u0 = r1 * tau / lam
    u1 = r1 / lam
    v0 = q1 * tau / lam
    v1 = q1 / lam
    return w, u0, u1, v0, v1


@dataclass
class _Splits:
    """History arrays for one family of auxiliary variables."""

    X: np.ndarray
    Xdot: np.ndarray
    Y: np.ndarray
    Ydot: np.ndarray

    @classmethod
    def zeros(cls, shape: tuple[int, ...]) -> "_Splits":
        return cls(*(np.zeros(shape) for _ in range(4)))


class AbsorbingLayer:
    """Stepper that replaces step_te / step_tm when a layer is present.

    Construct with the same operators used for the plain run; ``dt`` is
    fixed at construction because the chain coefficients depend on it.
    """

    def __init__(
        self,
        ops: DiscreteOperators,
        profile: PmlProfile,
        dt: float,
        solver_mode: str = "direct",
        **solver_kwargs,
    ) -> None:
        self.ops = ops
        self.profile = profile
        self.dt = float(dt)
        self.tau = 2.0 / self.dt
        mesh = ops.mesh

        rho = mesh.centroids[:, 1]
        area = mesh.areas
        sigma = profile.sigma(rho)
        self.sigma_face = sigma
        pml = np.nonzero(sigma > 0.0)[0]
        self.pml_faces = pml
        self.has_pml = pml.size > 0

        if self.has_pml:
            eps_in_layer = ops.materials.eps[pml]
            mu_in_layer = ops.materials.mu[pml]
            if not (np.all(eps_in_layer == EPS0) and np.all(mu_in_layer == MU0)):
                raise ValueError("the absorbing layer region must be vacuum")

        pol = ops.polarization
        tau = self.tau
        sp, rp, ap = sigma[pml], rho[pml], area[pml]

        # In-plane mass weights: plain constitutive values where sigma = 0,
        # chain weights w_z / w_rho inside the layer.
        tensor = ops.materials.eps if pol == "te" else ops.materials.mu
        w_z, w_rho = edge_mass_weights(mesh, tensor)
        scale = EPS0 if pol == "te" else MU0   # q1 = scale * rho for both chains
        z_co = chain_coefficients(
            np.zeros(pml.size), np.ones(pml.size),
            scale / EPS0 * rp * sp, scale * rp, tau,
        )
        r_co = chain_coefficients(
            sp / EPS0, np.ones(pml.size),
            np.zeros(pml.size), scale * rp, tau,
        )
        w_z = w_z.copy()
        w_rho = w_rho.copy()
        w_z[pml] = z_co[0]
        w_rho[pml] = r_co[0]
        self.w_z, self.w_rho = w_z, w_rho
        # Per-split coefficient stacks, shape (n_pml, 2) for (z, rho).
        self._edge_co = [np.stack([z, r], axis=-1) for z, r in zip(z_co, r_co)]

        kernels = inplane_kernels(mesh)
        self._kz, self._kr = kernels
        if self.has_pml:
            A_full = assemble_weighted(mesh, w_z, w_rho, kernels)
            self.A_par = (ops.dofs.S_e.T @ A_full @ ops.dofs.S_e).tocsr()
        else:
            # No layer faces: the weights reduce to the plain constitutive
            # ones, so take the already-built matrix rather than a reassembly
            # that could differ in the last bit (the vacuum magnetic matrix
            # is produced by scaling, not reassembly).
            self.A_par = ops.edge_mass
        self.solver = MassSolver(self.A_par, mode=solver_mode, **solver_kwargs)

        # Face chain: X is the face DoF, Y the azimuthal field value.
        self.face_inv = ops.face_inv.copy()
        if self.has_pml:
            self.face_inv[pml] = 0.0         # replaced by the chain below
            if pol == "te":
                co = chain_coefficients(
                    np.zeros(pml.size), rp / ap, MU0 / EPS0 * sp, np.full(pml.size, MU0), tau
                )
            else:
                co = chain_coefficients(
                    np.zeros(pml.size), rp / ap, sp, np.full(pml.size, EPS0), tau
                )
            w_f, self._fu0, self._fu1, self._fv0, self._fv1 = co
            self.face_w_inv = 1.0 / w_f
            self._face = _Splits.zeros((pml.size,))
            self._edge = _Splits.zeros((pml.size, 3, 2))
            self._g_prev = np.zeros(ops.dofs.n_reduced)

    # -- shared pieces -----------------------------------------------------

    def _edge_g_now(self) -> np.ndarray:
        u0, u1, v0, v1 = (c[:, None, :] for c in self._edge_co[1:])
        s = self._edge
        return u0 * s.X + u1 * s.Xdot - v0 * s.Y - v1 * s.Ydot

    def _reduce_edge_g(self, g_now: np.ndarray) -> np.ndarray:
        full = np.zeros(self.ops.mesh.n_edges)
        np.add.at(full, self.ops.mesh.edge_of_face[self.pml_faces], g_now.sum(axis=2))
        return self.ops.dofs.S_e.T @ full

    def _kernel_apply(self, edge_full: np.ndarray) -> np.ndarray:
        """Y values [L_z e]_i and [L_rho e]_i for layer faces, (n_pml, 3, 2)."""
        loc = edge_full[self.ops.mesh.edge_of_face[self.pml_faces]]
        yz = np.einsum("fij,fj->fi", self._kz[self.pml_faces], loc)
        yr = np.einsum("fij,fj->fi", self._kr[self.pml_faces], loc)
        return np.stack([yz, yr], axis=-1)

    def _refresh_edge_splits(self, g_now: np.ndarray, edge_red: np.ndarray) -> None:
        w = self._edge_co[0][:, None, :]
        s = self._edge
        Y_new = self._kernel_apply(expand_edges(self.ops.dofs, edge_red))
        X_new = w * Y_new + g_now
        s.Xdot = -s.Xdot + self.tau * (X_new - s.X)
        s.Ydot = -s.Ydot + self.tau * (Y_new - s.Y)
        s.X, s.Y = X_new, Y_new
        self._g_prev = self._reduce_edge_g(g_now)

    def _face_chain_solve(self, x_new: np.ndarray) -> np.ndarray:
        """Advance the face chain to the new X values; returns Y_new."""
        s = self._face
        g = self._fu0 * s.X + self._fu1 * s.Xdot - self._fv0 * s.Y - self._fv1 * s.Ydot
        y_new = self.face_w_inv * (x_new - g)
        s.Xdot = -s.Xdot + self.tau * (x_new - s.X)
        s.Ydot = -s.Ydot + self.tau * (y_new - s.Y)
        s.X, s.Y = x_new.copy(), y_new
        return y_new

    # -- steppers ----------------------------------------------------------

    def step(self, state: FieldState, j: np.ndarray | None = None) -> None:
        self.step_magnetic(state)
        self.step_electric(state, j)

    def step_magnetic(self, state: FieldState) -> None:
        """Advance the half-step variable: b (te) or h (tm)."""
        if state.polarization != self.ops.polarization:
            raise ValueError("state and operators disagree on polarization")
        ops, dt = self.ops, self.dt
        if ops.polarization == "te":
            advance_face_te(ops, state, dt)
            return
        e_face = self.face_inv * state.face
        if self.has_pml:
            e_face[self.pml_faces] = self._face_chain_solve(state.face[self.pml_faces])
        rhs = tm_edge_rhs(ops, e_face, dt)
        if self.has_pml:
            g_now = self._edge_g_now()
            rhs = rhs - (self._reduce_edge_g(g_now) - self._g_prev)
        state.edge += self.solver.solve(rhs)
        if self.has_pml:
            self._refresh_edge_splits(g_now, state.edge)

    def step_electric(self, state: FieldState, j: np.ndarray | None = None) -> None:
        """Advance the whole-step variable: e (te) or d (tm)."""
        if state.polarization != self.ops.polarization:
            raise ValueError("state and operators disagree on polarization")
        ops, dt = self.ops, self.dt
        if ops.polarization == "tm":
            r = ops.C @ state.edge
            if j is not None:
                r = r - j
            state.face += dt * r
            return
        h_face = self.face_inv * state.face
        if self.has_pml:
            h_face[self.pml_faces] = self._face_chain_solve(state.face[self.pml_faces])
        rhs = te_edge_rhs(ops, h_face, j, dt)
        if self.has_pml:
            g_now = self._edge_g_now()
            rhs = rhs - (self._reduce_edge_g(g_now) - self._g_prev)
        state.edge += self.solver.solve(rhs)
        if self.has_pml:
            self._refresh_edge_splits(g_now, state.edge)
