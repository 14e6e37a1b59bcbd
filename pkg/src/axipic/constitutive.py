"""Discrete constitutive operators for the meridian-plane schemes.

The in-plane (edge) mass matrices carry the material tensor and the radial
measure.  For a face k with centroid radius rho_k and diagonal material
tensor (t_z, t_rho, t_phi), its contribution to the edge mass matrix is

    rho_k * (t_z * Lz_k + t_rho * Lr_k)

where Lz_k[i, j] = integral over k of (zhat . W1_i)(zhat . W1_j) dA and
Lr_k is the same with the rho components.  The radius is frozen at the face
centroid, which keeps every face (axis faces included) strictly positive
weight.  The azimuthal (face) operators are diagonal:

    [face Hodge of tensor t]_kk      = t_phi(k) * area_k / rho_k
    [inverse face Hodge of t]_kk     = rho_k / (t_phi(k) * area_k)

The quadrature is the 3-point edge-midpoint rule, exact for the quadratic
integrands above, and the per-face kernels are mirrored entry by entry so
the assembled matrices are symmetric to the last bit.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .constants import EPS0, MU0
from .mesh import Mesh

# Barycentric coordinates of the local edge midpoints (quadrature points).
_EDGE_MID_LAMBDA = np.array(
    [
        [0.5, 0.5, 0.0],
        [0.0, 0.5, 0.5],
        [0.5, 0.0, 0.5],
    ]
)


@dataclass
class MaterialMap:
    """Per-face diagonal material tensors in absolute SI units.

    Columns are the (z, rho, phi) components.  Vacuum is the common case;
    anything spatially varying is set by writing into the arrays.
    """

    eps: np.ndarray
    mu: np.ndarray

    @classmethod
    def vacuum(cls, mesh: Mesh) -> "MaterialMap":
        return cls(
            eps=np.full((mesh.n_faces, 3), EPS0),
            mu=np.full((mesh.n_faces, 3), MU0),
        )

    def is_exact_vacuum(self) -> bool:
        return bool(np.all(self.eps == EPS0) and np.all(self.mu == MU0))


def whitney_midpoint_values(mesh: Mesh) -> np.ndarray:
    """Edge basis functions sampled at the three edge midpoints.

    Returns an (n_faces, 3 quadrature points, 3 local edges, 2) array.  The
    basis functions are oriented along their canonical (low node to high
    node) edges, matching ``whitney_eval``.
    """
    n2 = mesh.n_faces
    vals = np.empty((n2, 3, 3, 2))
    for loc in range(3):
        p, q = loc, (loc + 1) % 3
        gp = mesh.grad_lambda[:, p, :][:, None, :]        # (n2, 1, 2)
        gq = mesh.grad_lambda[:, q, :][:, None, :]
        lp = _EDGE_MID_LAMBDA[:, p][None, :, None]        # (1, 3, 1)
        lq = _EDGE_MID_LAMBDA[:, q][None, :, None]
        sign = mesh.face_edge_sign[:, loc][:, None, None]
        vals[:, :, loc, :] = sign * (lp * gq - lq * gp)
    return vals


def inplane_kernels(mesh: Mesh) -> tuple[np.ndarray, np.ndarray]:
    """Unweighted per-face kernels (Lz, Lr), each (n_faces, 3, 3)."""
    w = whitney_midpoint_values(mesh)
    wz = w[..., 0]
    wr = w[..., 1]
    scale = mesh.areas / 3.0
    kz = np.empty((mesh.n_faces, 3, 3))
    kr = np.empty((mesh.n_faces, 3, 3))
    for i in range(3):
        for j in range(i, 3):
            vz = scale * np.sum(wz[:, :, i] * wz[:, :, j], axis=1)
            vr = scale * np.sum(wr[:, :, i] * wr[:, :, j], axis=1)
            kz[:, i, j] = vz
            kz[:, j, i] = vz
            kr[:, i, j] = vr
            kr[:, j, i] = vr
    return kz, kr


def assemble_weighted(
    mesh: Mesh,
    weight_z: np.ndarray,
    weight_rho: np.ndarray,
    kernels: tuple[np.ndarray, np.ndarray] | None = None,
) -> sp.csr_matrix:
    """Assemble sum_k (weight_z[k] * Lz_k + weight_rho[k] * Lr_k).

    The weights are per-face scalars; the caller bakes in material values
    and the radial measure.  Reused by the absorbing-layer assembly so that
    identical weights give a bitwise identical matrix.
    """
    kz, kr = kernels if kernels is not None else inplane_kernels(mesh)
    data = weight_z[:, None, None] * kz + weight_rho[:, None, None] * kr
    rows = np.broadcast_to(mesh.edge_of_face[:, :, None], data.shape)
    cols = np.broadcast_to(mesh.edge_of_face[:, None, :], data.shape)
    mat = sp.coo_matrix(
        (data.ravel(), (rows.ravel(), cols.ravel())),
        shape=(mesh.n_edges, mesh.n_edges),
    ).tocsr()
    mat.sum_duplicates()
    return mat


def edge_mass_weights(mesh: Mesh, tensor: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-face weights (t_z * rho_k, t_rho * rho_k) for the edge mass matrix."""
    rho = mesh.centroids[:, 1]
    return tensor[:, 0] * rho, tensor[:, 1] * rho


def face_hodge_inv_diag(mesh: Mesh, tensor_phi: np.ndarray) -> np.ndarray:
    """Diagonal of the inverse azimuthal Hodge: rho_k / (t_phi * area_k)."""
    return mesh.centroids[:, 1] / (tensor_phi * mesh.areas)


def face_hodge_diag(mesh: Mesh, tensor_phi: np.ndarray) -> np.ndarray:
    """Diagonal of the azimuthal Hodge: t_phi * area_k / rho_k."""
    return tensor_phi * mesh.areas / mesh.centroids[:, 1]


@dataclass
class HodgeSet:
    """Mass operators for both polarizations on one mesh."""

    star_eps: sp.csr_matrix      # edge matrix, electric (in-plane E)
    star_mu: sp.csr_matrix       # edge matrix, magnetic (in-plane H)
    star_mu_inv: np.ndarray      # face diagonal, 1 / (azimuthal mu)
    star_eps_inv: np.ndarray     # face diagonal, 1 / (azimuthal eps)


def build_hodges(mesh: Mesh, materials: MaterialMap | None = None) -> HodgeSet:
    if materials is None:
        materials = MaterialMap.vacuum(mesh)
    kernels = inplane_kernels(mesh)
    wz_e, wr_e = edge_mass_weights(mesh, materials.eps)
    star_eps = assemble_weighted(mesh, wz_e, wr_e, kernels)
    if materials.is_exact_vacuum():
        # In vacuum the magnetic edge matrix is an exact scalar multiple of
        # the electric one; scaling preserves that identity to the last bit
        # where reassembly would not.
        star_mu = star_eps * (MU0 / EPS0)
    else:
        wz_m, wr_m = edge_mass_weights(mesh, materials.mu)
        star_mu = assemble_weighted(mesh, wz_m, wr_m, kernels)
    return HodgeSet(
        star_eps=star_eps,
        star_mu=star_mu,
        star_mu_inv=face_hodge_inv_diag(mesh, materials.mu[:, 2]),
        star_eps_inv=face_hodge_inv_diag(mesh, materials.eps[:, 2]),
    )


def spai_inverse(
    A: sp.spmatrix,
    pattern_level: int = 2,
    drop_tol: float = 1e-12,
) -> sp.csc_matrix:
    """Sparse approximate inverse by per-column least squares.

    The sparsity pattern of column j of M is taken from column j of
    A**pattern_level (level 0 means diagonal).  Each column solves

        min over m of  || A[:, J] m - e_j ||_2

    restricted to the rows where A[:, J] has entries.  Entries smaller than
    drop_tol times the column maximum are discarded afterwards.
    """
    if pattern_level < 0:
        raise ValueError("pattern_level must be >= 0")
    A = A.tocsc()
    n = A.shape[0]
    patt = sp.csc_matrix(
        (np.ones_like(A.data, dtype=np.int8), A.indices, A.indptr), shape=A.shape
    )
    S = sp.identity(n, dtype=np.int8, format="csc")
    for _ in range(pattern_level):
        S = (S @ patt).tocsc()
        S.data[:] = 1

    col_indices: list[np.ndarray] = []
    col_data: list[np.ndarray] = []
    for j in range(n):
        J = S.indices[S.indptr[j]:S.indptr[j + 1]]
        if J.size == 0:
            J = np.array([j])
        sub = A[:, J]
        rows = np.unique(sub.indices)
        dense = sub.toarray()[rows]
        rhs = np.zeros(rows.size)
        rhs[np.searchsorted(rows, j)] = 1.0
        m = np.linalg.lstsq(dense, rhs, rcond=None)[0]
        keep = np.abs(m) >= drop_tol * np.abs(m).max()
        col_indices.append(J[keep])
        col_data.append(m[keep])

    indptr = np.zeros(n + 1, dtype=np.int64)
    indptr[1:] = np.cumsum([ci.size for ci in col_indices])
    M = sp.csc_matrix(
        (np.concatenate(col_data), np.concatenate(col_indices), indptr),
        shape=A.shape,
    )
    return M


def spai_residual(A: sp.spmatrix, M: sp.spmatrix) -> float:
    """Normalized residual ||I - M A||_F / sqrt(n)."""
    n = A.shape[0]
    R = sp.identity(n, format="csr") - (M @ A).tocsr()
    return float(np.sqrt(np.sum(R.data * R.data) / n))


class MassSolver:
    """Uniform solve interface over a sparse SPD mass matrix.

    Modes:
      * ``"direct"``: exact sparse LU factorization.
      * ``"spai"``:   multiply by a sparse approximate inverse.
      * ``"auto"``:   build the approximate inverse, but fall back to the
        factorization when its residual exceeds ``fallback_residual``.

    ``mode_used`` records the outcome; ``residual`` holds the approximate
    inverse quality when one was built.
    """

    def __init__(
        self,
        A: sp.spmatrix,
        mode: str = "auto",
        pattern_level: int = 2,
        drop_tol: float = 1e-12,
        fallback_residual: float = 0.1,
    ) -> None:
        if mode not in ("auto", "spai", "direct"):
            raise ValueError(f"unknown solver mode {mode!r}")
        self.A = A.tocsr()
        self.residual: float | None = None
        self._approx: sp.csr_matrix | None = None
        self._lu = None
        if mode in ("auto", "spai"):
            M = spai_inverse(A, pattern_level=pattern_level, drop_tol=drop_tol)
            self.residual = spai_residual(A, M)
            if mode == "spai" or self.residual <= fallback_residual:
                self._approx = M.tocsr()
                self.mode_used = "spai"
                return
        self._lu = spla.splu(A.tocsc())
        self.mode_used = "direct"

    def solve(self, b: np.ndarray) -> np.ndarray:
        if self._approx is not None:
            return self._approx @ b
        return self._lu.solve(b)


def dump_operator(A: sp.spmatrix, path: str) -> None:
    """Write a sparse operator as Matrix Market ASCII."""
    from scipy.io import mmwrite

    mmwrite(path, A.tocoo(), precision=17)
