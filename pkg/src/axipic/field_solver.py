"""Leapfrog field updates for the two decoupled m = 0 polarizations.

Unknowns (all in the mapped, primed system):

  * "te": in-plane electric circulations e on edges, azimuthal magnetic
    fluxes b on faces.  Update pair

        b <- b - dt * C e
        [star_eps] e <- [star_eps] e + dt * (C^T [star_mu_inv] b - j)

  * "tm": in-plane magnetic circulations h on edges, azimuthal electric
    fluxes d on faces.  Update pair

        [star_mu] h <- [star_mu] h - dt * C^T [star_eps_inv] d
        d <- d + dt * (C h - j_perp)

Boundary handling is algebraic: a signed selection matrix S_e maps reduced
edge unknowns to the full edge set, folding periodic partner edges onto one
master and dropping edges eliminated by the wall conditions.  All reduced
operators are congruence transforms by S_e, so the update code never sees
boundary logic.

Wall semantics for the axis and the remaining boundary ("rim", which
includes the z walls when the run is not periodic):

  * te: "pec" eliminates the tangential-e edges there, "pmc" is natural.
  * tm: "pmc" eliminates the tangential-h edges there, "pec" is natural.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .mesh import (
    AXIS,
    AXIS_TOL,
    OUTER,
    PERIODIC_LEFT,
    PERIODIC_RIGHT,
    Mesh,
    MeshError,
    build_incidence,
    locate_point,
    whitney_eval,
)
from .constitutive import HodgeSet, MassSolver, MaterialMap, build_hodges

POLARIZATIONS = ("te", "tm")


@dataclass
class DofMaps:
    """Edge/node reduction produced by ``apply_boundary_selection``."""

    S_e: sp.csr_matrix            # (n_edges_full, n_edges_reduced), signed
    S_n: sp.csr_matrix            # (n_nodes_full, n_nodes_reduced)
    G: sp.csr_matrix              # reduced gradient (n_edges_reduced, n_nodes_reduced)
    kept_edges: np.ndarray        # reduced id -> full master edge id
    edge_red_id: np.ndarray       # full edge id -> reduced id (-1 if eliminated)
    node_red_id: np.ndarray       # full node id -> reduced id
    eliminated: np.ndarray        # bool mask over full edges

    @property
    def n_reduced(self) -> int:
        return len(self.kept_edges)


def apply_boundary_selection(
    mesh: Mesh,
    polarization: str,
    axis_bc: str = "pmc",
    rim_bc: str = "pmc",
    periodic: bool = False,
) -> DofMaps:
    pol = polarization.lower()
    if pol not in POLARIZATIONS:
        raise ValueError(f"unknown polarization {polarization!r}")
    for name, bc in (("axis_bc", axis_bc), ("rim_bc", rim_bc)):
        if bc not in ("pmc", "pec"):
            raise ValueError(f"{name} must be 'pmc' or 'pec', got {bc!r}")

    n0, n1 = mesh.n_nodes, mesh.n_edges
    tags = mesh.edge_tags
    axis_edges = tags == AXIS
    rim_edges = tags == OUTER
    if not periodic:
        rim_edges = rim_edges | (tags == PERIODIC_LEFT) | (tags == PERIODIC_RIGHT)

    eliminated = np.zeros(n1, dtype=bool)
    kill_on = "pec" if pol == "te" else "pmc"
    if axis_bc == kill_on:
        eliminated |= axis_edges
    if rim_bc == kill_on:
        eliminated |= rim_edges

    node_master = np.arange(n0)
    slave_edge: dict[int, tuple[int, int]] = {}
    if periodic:
        if len(mesh.periodic_nodes) == 0:
            raise MeshError("periodic run requested but the z walls do not pair up")
        for left, right in mesh.periodic_nodes:
            node_master[right] = left
        for master, slave in mesh.periodic_edges:
            a, b = mesh.edges[slave]
            mapped = (node_master[a], node_master[b])
            sign = 1 if mapped[0] < mapped[1] else -1
            slave_edge[int(slave)] = (int(master), sign)

    is_slave = np.zeros(n1, dtype=bool)
    if slave_edge:
        is_slave[list(slave_edge)] = True
    kept = ~eliminated & ~is_slave
    kept_edges = np.nonzero(kept)[0]
    edge_red_id = np.full(n1, -1, dtype=np.int64)
    edge_red_id[kept_edges] = np.arange(len(kept_edges))
    for slave, (master, _) in slave_edge.items():
        edge_red_id[slave] = edge_red_id[master]

    rows = list(kept_edges)
    cols = list(edge_red_id[kept_edges])
    vals = [1.0] * len(kept_edges)
    for slave, (master, sign) in slave_edge.items():
        if edge_red_id[master] >= 0:
            rows.append(slave)
            cols.append(edge_red_id[master])
            vals.append(float(sign))
    S_e = sp.csr_matrix(
        (vals, (rows, cols)), shape=(n1, len(kept_edges))
    )

    kept_nodes = np.nonzero(node_master == np.arange(n0))[0]
    node_red_id = np.full(n0, -1, dtype=np.int64)
    node_red_id[kept_nodes] = np.arange(len(kept_nodes))
    node_red_id = node_red_id[node_master]        # slaves inherit master ids
    S_n = sp.csr_matrix(
        (np.ones(n0), (np.arange(n0), node_red_id)),
        shape=(n0, len(kept_nodes)),
    )

    # Quotient gradient, built topologically so C_red G_red vanishes by
    # telescoping rather than by cancellation.
    ga = node_red_id[mesh.edges[kept_edges, 0]]
    gb = node_red_id[mesh.edges[kept_edges, 1]]
    m = len(kept_edges)
    G = sp.csr_matrix(
        (
            np.concatenate([-np.ones(m), np.ones(m)]),
            (np.tile(np.arange(m), 2), np.concatenate([ga, gb])),
        ),
        shape=(m, len(kept_nodes)),
    )

    return DofMaps(
        S_e=S_e,
        S_n=S_n,
        G=G,
        kept_edges=kept_edges,
        edge_red_id=edge_red_id,
        node_red_id=node_red_id,
        eliminated=eliminated,
    )


@dataclass
class DiscreteOperators:
    """Everything a polarization's time stepper needs."""

    mesh: Mesh
    materials: MaterialMap
    polarization: str
    dofs: DofMaps
    C: sp.csr_matrix              # reduced curl, (n_faces, n_reduced)
    edge_mass: sp.csr_matrix      # reduced edge mass matrix (SPD)
    face_inv: np.ndarray          # inverse azimuthal Hodge diagonal
    solver: MassSolver
    hodge: HodgeSet


def build_operators(
    mesh: Mesh,
    materials: MaterialMap | None = None,
    polarization: str = "te",
    axis_bc: str = "pmc",
    rim_bc: str = "pmc",
    periodic: bool = False,
    solver_mode: str = "auto",
    hodge: HodgeSet | None = None,
    **solver_kwargs,
) -> DiscreteOperators:
    if materials is None:
        materials = MaterialMap.vacuum(mesh)
    pol = polarization.lower()
    dofs = apply_boundary_selection(mesh, pol, axis_bc, rim_bc, periodic)
    if hodge is None:
        hodge = build_hodges(mesh, materials)
    C_full = build_incidence(mesh).C
    C = (C_full @ dofs.S_e).tocsr()
    full_mass = hodge.star_eps if pol == "te" else hodge.star_mu
    edge_mass = (dofs.S_e.T @ full_mass @ dofs.S_e).tocsr()
    face_inv = hodge.star_mu_inv if pol == "te" else hodge.star_eps_inv
    solver = MassSolver(edge_mass, mode=solver_mode, **solver_kwargs)
    return DiscreteOperators(
        mesh=mesh,
        materials=materials,
        polarization=pol,
        dofs=dofs,
        C=C,
        edge_mass=edge_mass,
        face_inv=face_inv,
        solver=solver,
        hodge=hodge,
    )


@dataclass
class FieldState:
    """One polarization's unknowns in reduced numbering.

    ``edge`` is e (te) or h (tm); ``face`` is b (te) or d (tm).
    """

    polarization: str
    edge: np.ndarray
    face: np.ndarray


def new_state(ops: DiscreteOperators) -> FieldState:
    return FieldState(
        polarization=ops.polarization,
        edge=np.zeros(ops.dofs.n_reduced),
        face=np.zeros(ops.mesh.n_faces),
    )


# The arithmetic below is shared verbatim by the absorbing-layer stepper so
# that a layer with all conductivities zero reproduces these steps bit for
# bit.  Keep the operation order stable.

def advance_face_te(ops: DiscreteOperators, state: FieldState, dt: float) -> None:
    state.face -= dt * (ops.C @ state.edge)


def te_edge_rhs(
    ops: DiscreteOperators,
    h_face: np.ndarray,
    j: np.ndarray | None,
    dt: float,
) -> np.ndarray:
    r = ops.C.T @ h_face
    if j is not None:
        r = r - j
    return dt * r


def tm_edge_rhs(ops: DiscreteOperators, e_face: np.ndarray, dt: float) -> np.ndarray:
    return -(dt * (ops.C.T @ e_face))


def step_te_magnetic(ops: DiscreteOperators, state: FieldState, dt: float) -> None:
    """First half of the te cycle: b to n+1/2."""
    advance_face_te(ops, state, dt)


def step_te_electric(
    ops: DiscreteOperators,
    state: FieldState,
    dt: float,
    j: np.ndarray | None = None,
) -> None:
    """Second half of the te cycle: e to n+1 given b at n+1/2."""
    h_face = ops.face_inv * state.face
    state.edge += ops.solver.solve(te_edge_rhs(ops, h_face, j, dt))


def step_te(
    ops: DiscreteOperators,
    state: FieldState,
    dt: float,
    j: np.ndarray | None = None,
) -> None:
    """One leapfrog cycle: b to n+1/2, then e to n+1.

    ``j`` is the reduced in-plane current at n+1/2 (circulation-weighted,
    same layout as e).
    """
    step_te_magnetic(ops, state, dt)
    step_te_electric(ops, state, dt, j)


def step_tm_magnetic(ops: DiscreteOperators, state: FieldState, dt: float) -> None:
    """First half of the tm cycle: h to n+1/2 given d at n."""
    e_face = ops.face_inv * state.face
    state.edge += ops.solver.solve(tm_edge_rhs(ops, e_face, dt))


def step_tm_electric(
    ops: DiscreteOperators,
    state: FieldState,
    dt: float,
    j: np.ndarray | None = None,
) -> None:
    """Second half of the tm cycle: d to n+1."""
    r = ops.C @ state.edge
    if j is not None:
        r = r - j
    state.face += dt * r


def step_tm(
    ops: DiscreteOperators,
    state: FieldState,
    dt: float,
    j: np.ndarray | None = None,
) -> None:
    """One leapfrog cycle: h to n+1/2, then d to n+1.

    ``j`` is the azimuthal current density integrated over faces at n+1/2
    (flux-like, same layout as d).
    """
    step_tm_magnetic(ops, state, dt)
    step_tm_electric(ops, state, dt, j)


def te_energy(
    ops: DiscreteOperators,
    e: np.ndarray,
    b_lo: np.ndarray,
    b_hi: np.ndarray,
) -> float:
    """Staggered energy at step n: e is e^n, b_lo/b_hi are b at n -/+ 1/2.

    The half-step product removes the staggering; the source-free update
    conserves this quantity exactly when the mass solves are exact.
    """
    e_part = 0.5 * e @ (ops.edge_mass @ e)
    b_part = 0.5 * b_lo @ (ops.face_inv * b_hi)
    return float(e_part + b_part)


def tm_energy(
    ops: DiscreteOperators,
    d: np.ndarray,
    h_lo: np.ndarray,
    h_hi: np.ndarray,
) -> float:
    """Staggered energy at step n: d is d^n, h_lo/h_hi are h at n -/+ 1/2."""
    d_part = 0.5 * d @ (ops.face_inv * d)
    h_part = 0.5 * h_lo @ (ops.edge_mass @ h_hi)
    return float(d_part + h_part)


def estimate_dt(
    ops: DiscreteOperators,
    safety: float = 0.9,
    iterations: int = 50,
    seed: int = 0,
) -> float:
    """Largest stable step from power iteration on the update operator.

    Iterates x <- [edge_mass]^{-1} C^T [face_inv] C x and returns
    safety * 2 / sqrt(lambda_max).
    """
    rng = np.random.default_rng(seed)
    x = rng.standard_normal(ops.dofs.n_reduced)
    x /= np.linalg.norm(x)
    lam = 0.0
    for _ in range(iterations):
        y = ops.solver.solve(ops.C.T @ (ops.face_inv * (ops.C @ x)))
        ny = np.linalg.norm(y)
        if ny == 0.0:
            raise ValueError("update operator is identically zero")
        x = y / ny
        lam = ny
    kx = ops.C.T @ (ops.face_inv * (ops.C @ x))
    lam = float(x @ kx) / float(x @ (ops.edge_mass @ x))
    return safety * 2.0 / np.sqrt(lam)


def expand_edges(dofs: DofMaps, reduced: np.ndarray) -> np.ndarray:
    """Reduced edge vector to full edge vector (slaves get signed copies)."""
    return dofs.S_e @ reduced

def reduce_edge_values(dofs: DofMaps, full: np.ndarray) -> np.ndarray:
    """Accumulate a full edge vector into reduced numbering (seam edges sum)."""
    return dofs.S_e.T @ full


def eval_physical_field(
    mesh: Mesh,
    materials: MaterialMap,
    polarization: str,
    edge_full: np.ndarray,
    face_vals: np.ndarray,
    point: np.ndarray,
    face: int | None = None,
    axis_tol: float = AXIS_TOL,
) -> np.ndarray:
    """Point values of the physical (unprimed, SI) field components.

    Returns (E_z, E_rho, B_phi) for "te" and (E_phi, B_z, B_rho) for "tm".
    On the axis the components that must vanish for regular m = 0 fields
    (E_rho, E_phi, B_rho) are returned as exact zeros.
    """
    pol = polarization.lower()
    if face is None:
        face = locate_point(mesh, point)
        if face < 0:
            raise ValueError(f"point {point} is outside the mesh")
    _, w1, w2 = whitney_eval(mesh, face, point)
    dofs = edge_full[mesh.edge_of_face[face]]
    on_axis = point[1] < axis_tol
    if pol == "te":
        ez, erho = dofs @ w1
        bphi = face_vals[face] * w2
        if on_axis:
            erho = 0.0
        return np.array([ez, erho, bphi])
    hz, hrho = dofs @ w1
    bz = materials.mu[face, 0] * hz
    brho = materials.mu[face, 1] * hrho
    ephi = face_vals[face] * w2 / materials.eps[face, 2]
    if on_axis:
        brho = 0.0
        ephi = 0.0
    return np.array([ephi, bz, brho])
