"""Triangulations of the meridian (z, rho) half-plane.

Conventions used throughout the package:

* Node coordinates are stored as (z, rho) pairs, rho >= 0.
* Edges are directed from the lower to the higher node index and stored as
  sorted pairs, re-indexed deterministically (lexicographic order) no matter
  how the input file lists them.
* Faces are oriented counter-clockwise in the (z, rho) plane, so every signed
  area is positive.
* The incidence matrix C (faces x edges) carries +1 where the CCW boundary
  traversal of a face agrees with the edge direction and -1 where it opposes
  it; G (edges x nodes) carries -1 at the tail node and +1 at the head node.
  C @ G == 0 exactly in integer arithmetic (curl of gradient).

Whitney forms on a face with barycentric functions lambda_i:

* 0-form on node i:  lambda_i
* 1-form on edge (a, b):  lambda_a grad(lambda_b) - lambda_b grad(lambda_a)
* 2-form on the face:  1/area  (constant; the face is its own CCW support)
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

# Geometric tolerance for tagging entities that sit on the axis or on the
# periodic z boundaries. Mesh generators emit small nonzero coordinates.
AXIS_TOL = 1e-9

# Edge/node boundary tags.
INTERIOR = 0
AXIS = 1
PERIODIC_LEFT = 2
PERIODIC_RIGHT = 3
OUTER = 4
PML_FRONT = 5

TAG_NAMES = {
    INTERIOR: "interior",
    AXIS: "axis",
    PERIODIC_LEFT: "periodic_left",
    PERIODIC_RIGHT: "periodic_right",
    OUTER: "outer",
    PML_FRONT: "pml_front",
}


class MeshError(ValueError):
    pass


@dataclass
class Mesh:
    """Immutable-after-construction triangulation of the meridian plane."""

    nodes: np.ndarray        # (n0, 2) float64, columns (z, rho)
    edges: np.ndarray        # (n1, 2) int64, each row sorted (lo, hi)
    faces: np.ndarray        # (n2, 3) int64, CCW
    edge_of_face: np.ndarray     # (n2, 3) int64, local edges (v0,v1),(v1,v2),(v2,v0)
    face_edge_sign: np.ndarray   # (n2, 3) int64, traversal sign vs edge direction
    face_neighbors: np.ndarray   # (n2, 3) int64, across local edge l; -1 on boundary
    areas: np.ndarray        # (n2,) positive
    centroids: np.ndarray    # (n2, 2)
    grad_lambda: np.ndarray  # (n2, 3, 2) gradients of the barycentric functions
    edge_lengths: np.ndarray  # (n1,)
    edge_tags: np.ndarray    # (n1,) int64
    node_tags: np.ndarray    # (n0,) int64
    periodic_nodes: np.ndarray   # (k, 2) int64 rows (left_node, right_node)
    periodic_edges: np.ndarray   # (m, 2) int64 rows (left_edge, right_edge)
    z_min: float = 0.0
    z_max: float = 0.0
    rho_max: float = 0.0
    edge_index: dict = field(default_factory=dict, repr=False)

    @property
    def n_nodes(self) -> int:
        return len(self.nodes)

    @property
    def n_edges(self) -> int:
        return len(self.edges)

    @property
    def n_faces(self) -> int:
        return len(self.faces)

    def barycentric(self, face: int, point) -> np.ndarray:
        """Barycentric coordinates of point in face (affine, exact)."""
        # lambda_i is affine with value 1/3 at the centroid, so
        # lambda_i(x) = 1/3 + grad_lambda_i . (x - centroid).
        d = np.asarray(point, dtype=float) - self.centroids[face]
        return 1.0 / 3.0 + self.grad_lambda[face] @ d

    def bounding_box(self):
        return (self.z_min, self.z_max, 0.0, self.rho_max)


def _build_mesh(nodes: np.ndarray, faces: np.ndarray) -> Mesh:
    """Complete a node/face soup into a fully indexed Mesh."""
    nodes = np.ascontiguousarray(np.asarray(nodes, dtype=np.float64))
    faces = np.ascontiguousarray(np.asarray(faces, dtype=np.int64))
    if nodes.ndim != 2 or nodes.shape[1] != 2:
        raise MeshError("nodes must be an (n, 2) array of (z, rho)")
    if faces.ndim != 2 or faces.shape[1] != 3:
        raise MeshError("faces must be an (n, 3) array of node indices")
    if faces.min(initial=0) < 0 or faces.max(initial=-1) >= len(nodes):
        raise MeshError("face references a node that does not exist")

    rho = nodes[:, 1]
    if rho.min(initial=0.0) < -1e-12:
        raise MeshError(f"negative rho coordinate: {rho.min()}")
    np.clip(rho, 0.0, None, out=rho)

    # Orient every face CCW (positive signed area).
    p0 = nodes[faces[:, 0]]
    p1 = nodes[faces[:, 1]]
    p2 = nodes[faces[:, 2]]
    u, v = p1 - p0, p2 - p0
    twice_area = u[:, 0] * v[:, 1] - u[:, 1] * v[:, 0]
    if np.any(twice_area == 0.0):
        bad = int(np.nonzero(twice_area == 0.0)[0][0])
        raise MeshError(f"face {bad} is degenerate (zero area)")
    flip = twice_area < 0.0
    faces[flip] = faces[flip][:, [0, 2, 1]]
    twice_area = np.abs(twice_area)
    areas = 0.5 * twice_area
    centroids = (nodes[faces[:, 0]] + nodes[faces[:, 1]] + nodes[faces[:, 2]]) / 3.0

    # Canonical edge set: sorted node pairs in lexicographic order.
    local_pairs = faces[:, [[0, 1], [1, 2], [2, 0]]]       # (n2, 3, 2) traversal order
    sorted_pairs = np.sort(local_pairs.reshape(-1, 2), axis=1)
    edges, inverse = np.unique(sorted_pairs, axis=0, return_inverse=True)
    edge_of_face = inverse.reshape(-1, 3).astype(np.int64)
    # Sign: +1 when the traversal (p, q) already runs low -> high.
    face_edge_sign = np.where(
        local_pairs[:, :, 0] < local_pairs[:, :, 1], 1, -1
    ).astype(np.int64)

    # Edge -> adjacent faces, and neighbor-across-local-edge table.
    n1 = len(edges)
    counts = np.bincount(edge_of_face.ravel(), minlength=n1)
    if counts.max(initial=0) > 2:
        bad = int(np.argmax(counts))
        raise MeshError(f"non-manifold edge {bad} shared by {counts[bad]} faces")
    edge_faces = np.full((n1, 2), -1, dtype=np.int64)
    slot = np.zeros(n1, dtype=np.int64)
    flat_edges = edge_of_face.ravel()
    flat_faces = np.repeat(np.arange(len(faces), dtype=np.int64), 3)
    for e, f in zip(flat_edges, flat_faces):
        edge_faces[e, slot[e]] = f
        slot[e] += 1
    face_neighbors = np.full_like(edge_of_face, -1)
    for l in range(3):
        e = edge_of_face[:, l]
        a, b = edge_faces[e, 0], edge_faces[e, 1]
        me = np.arange(len(faces), dtype=np.int64)
        face_neighbors[:, l] = np.where(a == me, b, a)

    # Barycentric gradients: grad lambda_i = rot90(P_{i+2} - P_{i+1}) / (2A),
    # grad lambda_i = rot90(P_{i+2} - P_{i+1}) / (2 A), rot90(v) = (-v_rho, v_z).
    grad_lambda = np.empty((len(faces), 3, 2))
    pts = nodes[faces]                                     # (n2, 3, 2)
    for i in range(3):
        opp = pts[:, (i + 2) % 3] - pts[:, (i + 1) % 3]
        grad_lambda[:, i, 0] = -opp[:, 1] / twice_area
        grad_lambda[:, i, 1] = opp[:, 0] / twice_area

    vec = nodes[edges[:, 1]] - nodes[edges[:, 0]]
    edge_lengths = np.hypot(vec[:, 0], vec[:, 1])

    mesh = Mesh(
        nodes=nodes,
        edges=edges.astype(np.int64),
        faces=faces,
        edge_of_face=edge_of_face,
        face_edge_sign=face_edge_sign,
        face_neighbors=face_neighbors,
        areas=areas,
        centroids=centroids,
        grad_lambda=grad_lambda,
        edge_lengths=edge_lengths,
        edge_tags=np.zeros(n1, dtype=np.int64),
        node_tags=np.zeros(len(nodes), dtype=np.int64),
        periodic_nodes=np.empty((0, 2), dtype=np.int64),
        periodic_edges=np.empty((0, 2), dtype=np.int64),
    )
    mesh.edge_index = {(int(a), int(b)): i for i, (a, b) in enumerate(edges)}
    _tag_boundaries(mesh, edge_faces)
    return mesh


def _tag_boundaries(mesh: Mesh, edge_faces: np.ndarray) -> None:
    z = mesh.nodes[:, 0]
    rho = mesh.nodes[:, 1]
    mesh.z_min = float(z.min())
    mesh.z_max = float(z.max())
    mesh.rho_max = float(rho.max())

    on_axis = rho < AXIS_TOL
    on_left = np.abs(z - mesh.z_min) < AXIS_TOL
    on_right = np.abs(z - mesh.z_max) < AXIS_TOL

    node_tags = mesh.node_tags
    node_tags[:] = INTERIOR
    boundary_edges = edge_faces[:, 1] < 0
    # Only nodes that lie on boundary edges get boundary tags.
    bnodes = np.zeros(mesh.n_nodes, dtype=bool)
    bnodes[mesh.edges[boundary_edges].ravel()] = True
    node_tags[bnodes] = OUTER
    node_tags[bnodes & on_left] = PERIODIC_LEFT
    node_tags[bnodes & on_right] = PERIODIC_RIGHT
    node_tags[bnodes & on_axis] = AXIS  # axis wins at corners for Hodge checks

    tags = mesh.edge_tags
    tags[:] = INTERIOR
    a, b = mesh.edges[:, 0], mesh.edges[:, 1]
    eb = boundary_edges
    tags[eb] = OUTER
    tags[eb & on_axis[a] & on_axis[b]] = AXIS
    tags[eb & on_left[a] & on_left[b]] = PERIODIC_LEFT
    tags[eb & on_right[a] & on_right[b]] = PERIODIC_RIGHT

    _pair_periodic(mesh)


def _pair_periodic(mesh: Mesh) -> None:
    """Match left-boundary nodes/edges to right-boundary ones by rho."""
    z = mesh.nodes[:, 0]
    rho = mesh.nodes[:, 1]
    left = np.nonzero(np.abs(z - mesh.z_min) < AXIS_TOL)[0]
    right = np.nonzero(np.abs(z - mesh.z_max) < AXIS_TOL)[0]
    if len(left) == 0 or len(right) == 0 or mesh.z_max <= mesh.z_min:
        return
    left = left[np.argsort(rho[left], kind="stable")]
    right = right[np.argsort(rho[right], kind="stable")]
    if len(left) != len(right) or np.any(np.abs(rho[left] - rho[right]) > AXIS_TOL):
        # Leave pairs empty; the field solver raises if periodic BCs are
        # requested on a mesh that cannot support them.
        return
    mesh.periodic_nodes = np.stack([left, right], axis=1).astype(np.int64)

    node_map = {int(l): int(r) for l, r in mesh.periodic_nodes}
    pairs = []
    for e in np.nonzero(mesh.edge_tags == PERIODIC_LEFT)[0]:
        a, b = (int(v) for v in mesh.edges[e])
        ra, rb = node_map[a], node_map[b]
        key = (min(ra, rb), max(ra, rb))
        if key not in mesh.edge_index:
            return  # topologies differ; bail out as above
        pairs.append((int(e), mesh.edge_index[key]))
    mesh.periodic_edges = np.asarray(sorted(pairs), dtype=np.int64).reshape(-1, 2)


def tag_pml_front(mesh: Mesh, front_radius: float, tol: float = 1e-6) -> None:
    """Mark interior edges lying on the circle rho = front_radius."""
    rho = mesh.nodes[:, 1]
    a, b = mesh.edges[:, 0], mesh.edges[:, 1]
    on = (np.abs(rho[a] - front_radius) < tol) & (np.abs(rho[b] - front_radius) < tol)
    mesh.edge_tags[on & (mesh.edge_tags == INTERIOR)] = PML_FRONT


# ---------------------------------------------------------------------------
# Incidence operators
# ---------------------------------------------------------------------------

@dataclass
class IncidenceMatrices:
    C: sp.csr_matrix  # faces x edges, discrete primed curl
    G: sp.csr_matrix  # edges x nodes, discrete gradient


def build_incidence(mesh: Mesh) -> IncidenceMatrices:
    n2, n1, n0 = mesh.n_faces, mesh.n_edges, mesh.n_nodes
    rows = np.repeat(np.arange(n2, dtype=np.int64), 3)
    C = sp.csr_matrix(
        (mesh.face_edge_sign.ravel().astype(np.int64),
         (rows, mesh.edge_of_face.ravel())),
        shape=(n2, n1),
    )
    erow = np.repeat(np.arange(n1, dtype=np.int64), 2)
    gdat = np.tile(np.array([-1, 1], dtype=np.int64), n1)
    G = sp.csr_matrix((gdat, (erow, mesh.edges.ravel())), shape=(n1, n0))
    return IncidenceMatrices(C=C, G=G)


# ---------------------------------------------------------------------------
# Whitney basis evaluation
# ---------------------------------------------------------------------------

def whitney_eval(mesh: Mesh, face: int, point):
    """Evaluate hat, edge, and face Whitney forms of one face at a point.

    Returns (lam, W1, W2): lam the 3 barycentric values, W1 a (3, 2) array of
    the in-plane edge-form vectors ordered like mesh.edge_of_face[face], and
    W2 the scalar face form 1/area. The point must lie in the closed face.
    """
    lam = mesh.barycentric(face, point)
    if lam.min() < -1e-12:
        raise MeshError(f"point {tuple(point)} outside face {face}")
    g = mesh.grad_lambda[face]
    W1 = np.empty((3, 2))
    for l in range(3):
        p, q = l, (l + 1) % 3
        W1[l] = mesh.face_edge_sign[face, l] * (lam[p] * g[q] - lam[q] * g[p])
    return lam, W1, 1.0 / mesh.areas[face]


# ---------------------------------------------------------------------------
# Point location (barycentric walk)
# ---------------------------------------------------------------------------

def locate_point(mesh: Mesh, point, hint: int | None = None, tol: float = 1e-12) -> int:
    """Walk face-to-face toward the point; returns -1 if it escapes the domain.

    The walk steps across the edge opposite the most negative barycentric
    coordinate. After 2*n_faces steps it restarts from a pseudo-random face
    (guards against cycling on non-convex domains).
    """
    n2 = mesh.n_faces
    f = 0 if hint is None or not (0 <= hint < n2) else int(hint)
    p = np.asarray(point, dtype=float)
    rng = None
    steps = 0
    blocked_retries = 0
    while True:
        lam = mesh.barycentric(f, p)
        worst = int(np.argmin(lam))
        if lam[worst] >= -tol:
            return f
        nxt = mesh.face_neighbors[f, (worst + 1) % 3]
        if nxt < 0:
            # Against a wall: try the runner-up direction before concluding
            # the point lies outside.
            order = np.argsort(lam)
            nxt = -1
            for cand in order[1:]:
                if lam[cand] >= -tol:
                    break
                cand_next = mesh.face_neighbors[f, (int(cand) + 1) % 3]
                if cand_next >= 0:
                    nxt = cand_next
                    break
            if nxt < 0:
                return -1
            blocked_retries += 1
            if blocked_retries > n2:
                return -1
        f = int(nxt)
        steps += 1
        if steps >= 2 * n2:
            if rng is None:
                rng = np.random.default_rng(abs(hash((float(p[0]), float(p[1])))) % (2**32))
            f = int(rng.integers(0, n2))
            steps = 0


# ---------------------------------------------------------------------------
# Loaders / writers / generators
# ---------------------------------------------------------------------------

def load_mesh(path: str, format: str | None = None) -> Mesh:
    """Load a mesh from the native ASCII format or a gmsh MSH-2 subset.

    format=None sniffs: files starting with "$MeshFormat" are MSH-2.
    """
    with open(path, "r") as fh:
        text = fh.read()
    if format is None:
        format = "msh2" if text.lstrip().startswith("$MeshFormat") else "native"
    if format == "native":
        nodes, faces = _parse_native(text)
    elif format == "msh2":
        nodes, faces = _parse_msh2(text)
    else:
        raise MeshError(f"unknown mesh format {format!r}")
    return _build_mesh(nodes, faces)


def _parse_native(text: str):
    tokens = text.split()
    if len(tokens) < 3:
        raise MeshError("native mesh: truncated header")
    try:
        n0, n1, n2 = (int(t) for t in tokens[:3])
    except ValueError as exc:
        raise MeshError(f"native mesh: bad header: {exc}") from None
    need = 3 + 2 * n0 + 2 * n1 + 3 * n2
    if len(tokens) < need:
        raise MeshError(
            f"native mesh: expected {need} tokens, found {len(tokens)}"
        )
    pos = 3
    nodes = np.array(tokens[pos:pos + 2 * n0], dtype=float).reshape(n0, 2)
    pos += 2 * n0
    pos += 2 * n1  # edge block, if present, is regenerated canonically
    faces = np.array(tokens[pos:pos + 3 * n2], dtype=np.int64).reshape(n2, 3)
    return nodes, faces


def _parse_msh2(text: str):
    lines = iter(text.splitlines())

    def until(tag):
        for line in lines:
            if line.strip() == tag:
                return
        raise MeshError(f"msh2: missing {tag}")

    until("$MeshFormat")
    version = next(lines).split()[0]
    if not version.startswith("2"):
        raise MeshError(f"msh2: unsupported version {version}")
    until("$EndMeshFormat")
    until("$Nodes")
    n_nodes = int(next(lines))
    coords = np.empty((n_nodes, 2))
    ids = {}
    for i in range(n_nodes):
        parts = next(lines).split()
        ids[int(parts[0])] = i
        coords[i] = (float(parts[1]), float(parts[2]))  # (z, rho) from (x, y)
    until("$EndNodes")
    until("$Elements")
    n_elem = int(next(lines))
    tris = []
    for _ in range(n_elem):
        parts = next(lines).split()
        etype = int(parts[1])
        if etype != 2:  # keep 3-node triangles only
            continue
        ntags = int(parts[2])
        conn = [ids[int(v)] for v in parts[3 + ntags: 6 + ntags]]
        tris.append(conn)
    if not tris:
        raise MeshError("msh2: no triangles found")
    faces = np.asarray(tris, dtype=np.int64)
    # Compact to referenced nodes, keeping original relative order.
    used = np.unique(faces)
    remap = np.full(n_nodes, -1, dtype=np.int64)
    remap[used] = np.arange(len(used))
    return coords[used], remap[faces]


def save_mesh(mesh: Mesh, path: str) -> None:
    """Write the native ASCII format: header then node/edge/face blocks."""
    with open(path, "w") as fh:
        fh.write(f"{mesh.n_nodes} {mesh.n_edges} {mesh.n_faces}\n")
        for z, r in mesh.nodes:
            fh.write(f"{float(z)!r} {float(r)!r}\n")
        for a, b in mesh.edges:
            fh.write(f"{a} {b}\n")
        for a, b, c in mesh.faces:
            fh.write(f"{a} {b} {c}\n")


def rectangle_mesh(
    z_min: float,
    z_max: float,
    rho_max: float,
    h: float,
    rho_min: float = 0.0,
    jitter: float = 0.0,
    seed: int = 0,
) -> Mesh:
    """Structured triangulation of [z_min, z_max] x [rho_min, rho_max].

    Cells are h x h squares (rounded to fit) split along alternating
    diagonals. jitter > 0 displaces interior nodes by a uniform fraction of h
    (boundary and axis nodes stay put so tags and periodic pairing survive).
    """
    nz = max(1, round((z_max - z_min) / h))
    nr = max(1, round((rho_max - rho_min) / h))
    zs = np.linspace(z_min, z_max, nz + 1)
    rs = np.linspace(rho_min, rho_max, nr + 1)
    Z, R = np.meshgrid(zs, rs, indexing="ij")
    nodes = np.stack([Z.ravel(), R.ravel()], axis=1)

    if jitter > 0.0:
        rng = np.random.default_rng(seed)
        dz = (z_max - z_min) / nz
        dr = (rho_max - rho_min) / nr
        shift = rng.uniform(-0.5, 0.5, size=nodes.shape) * jitter
        shift[:, 0] *= dz
        shift[:, 1] *= dr
        interior = (
            (np.abs(nodes[:, 0] - z_min) > AXIS_TOL)
            & (np.abs(nodes[:, 0] - z_max) > AXIS_TOL)
            & (np.abs(nodes[:, 1] - rho_min) > AXIS_TOL)
            & (np.abs(nodes[:, 1] - rho_max) > AXIS_TOL)
        )
        nodes[interior] += shift[interior]

    def nid(i, j):
        return i * (nr + 1) + j

    faces = []
    for i in range(nz):
        for j in range(nr):
            a, b = nid(i, j), nid(i + 1, j)
            c, d = nid(i + 1, j + 1), nid(i, j + 1)
            if (i + j) % 2 == 0:
                faces.append((a, b, c))
                faces.append((a, c, d))
            else:
                faces.append((a, b, d))
                faces.append((b, c, d))
    return _build_mesh(nodes, np.asarray(faces, dtype=np.int64))


def mesh_from_arrays(nodes, faces) -> Mesh:
    """Build a mesh directly from coordinate/connectivity arrays."""
    return _build_mesh(np.array(nodes, dtype=float), np.array(faces, dtype=np.int64))


def mesh_info(mesh: Mesh) -> dict:
    """Summary used by the CLI and the run logs."""
    tag_counts = {
        TAG_NAMES[t]: int(np.count_nonzero(mesh.edge_tags == t))
        for t in sorted(TAG_NAMES)
    }
    return {
        "nodes": mesh.n_nodes,
        "edges": mesh.n_edges,
        "faces": mesh.n_faces,
        "euler_characteristic": mesh.n_nodes - mesh.n_edges + mesh.n_faces,
        "z_range": [mesh.z_min, mesh.z_max],
        "rho_max": mesh.rho_max,
        "total_area": float(mesh.areas.sum()),
        "edge_tags": tag_counts,
        "periodic_node_pairs": int(len(mesh.periodic_nodes)),
    }
