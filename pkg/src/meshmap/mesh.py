"""Triangle meshes: icosphere generation, keypoints, curvature, symmetry,
solid voxelization and a minimal OBJ reader/writer.

Vertices are stored row-wise as an ``(N, 3)`` float array and faces as an
``(F, 3)`` integer array of 0-based vertex indices.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
from scipy.spatial import cKDTree

from . import _kernels

log = logging.getLogger(__name__)


class MeshError(ValueError):
    pass


class ObjParseError(MeshError):
    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


@dataclass(frozen=True, eq=False)
class TriMesh:
    vertices: np.ndarray
    faces: np.ndarray

    def __post_init__(self):
        V = np.array(self.vertices, dtype=float).reshape(-1, 3)
        F = np.array(self.faces, dtype=np.int64).reshape(-1, 3)
        if F.size and (F.min() < 0 or F.max() >= len(V)):
            raise MeshError("face index out of range")
        if F.size and np.any((F[:, 0] == F[:, 1]) | (F[:, 1] == F[:, 2]) | (F[:, 0] == F[:, 2])):
            raise MeshError("degenerate face (repeated vertex index)")
        F.setflags(write=False)
        object.__setattr__(self, "vertices", V)
        object.__setattr__(self, "faces", F)

    @property
    def n_vertices(self):
        return len(self.vertices)

    def with_vertices(self, vertices):
        """Same connectivity, new vertex positions."""
        return TriMesh(vertices, self.faces)

    def copy(self):
        return TriMesh(self.vertices.copy(), self.faces)

    def edges(self):
        """Unique undirected edges as an (E, 2) array with ``i < j``."""
        F = self.faces
        e = np.concatenate([F[:, [0, 1]], F[:, [1, 2]], F[:, [2, 0]]])
        e.sort(axis=1)
        return np.unique(e, axis=0)

    def is_closed(self):
        """Every edge is shared by exactly two faces."""
        if len(self.faces) == 0:
            return False
        F = self.faces
        e = np.sort(np.concatenate([F[:, [0, 1]], F[:, [1, 2]], F[:, [2, 0]]]), axis=1)
        _, counts = np.unique(e, axis=0, return_counts=True)
        return bool(np.all(counts == 2))

    def is_consistently_oriented(self):
        """Each directed edge occurs at most once (no flipped neighbours)."""
        F = self.faces
        e = np.concatenate([F[:, [0, 1]], F[:, [1, 2]], F[:, [2, 0]]])
        return len(np.unique(e, axis=0)) == len(e)

    def face_areas(self):
        V = self.vertices
        a, b, c = V[self.faces[:, 0]], V[self.faces[:, 1]], V[self.faces[:, 2]]
        return 0.5 * np.linalg.norm(np.cross(b - a, c - a), axis=1)

    def volume(self):
        """Signed volume (positive for outward-oriented closed meshes)."""
        V = self.vertices
        a, b, c = V[self.faces[:, 0]], V[self.faces[:, 1]], V[self.faces[:, 2]]
        return float(np.einsum("ij,ij->i", a, np.cross(b, c)).sum() / 6.0)


_PHI = (1.0 + 5.0 ** 0.5) / 2.0
_ICO_VERTS = np.array([
    [-1, _PHI, 0], [1, _PHI, 0], [-1, -_PHI, 0], [1, -_PHI, 0],
    [0, -1, _PHI], [0, 1, _PHI], [0, -1, -_PHI], [0, 1, -_PHI],
    [_PHI, 0, -1], [_PHI, 0, 1], [-_PHI, 0, -1], [-_PHI, 0, 1],
], dtype=float)
_ICO_FACES = np.array([
    [0, 11, 5], [0, 5, 1], [0, 1, 7], [0, 7, 10], [0, 10, 11],
    [1, 5, 9], [5, 11, 4], [11, 10, 2], [10, 7, 6], [7, 1, 8],
    [3, 9, 4], [3, 4, 2], [3, 2, 6], [3, 6, 8], [3, 8, 9],
    [4, 9, 5], [2, 4, 11], [6, 2, 10], [8, 6, 7], [9, 8, 1],
])


def make_icosphere(subdivisions=3, radius=1.0):
    """Subdivided icosahedron with outward-facing (CCW) triangles.

    Has ``10 * 4**s + 2`` vertices and ``20 * 4**s`` faces; ``s = 3`` gives
    642 / 1280.
    """
    if subdivisions < 0:
        raise ValueError("subdivisions must be >= 0")
    verts = list(_ICO_VERTS / np.linalg.norm(_ICO_VERTS, axis=1, keepdims=True))
    faces = _ICO_FACES.copy()
    for _ in range(subdivisions):
        cache = {}

        def midpoint(i, j):
            key = (i, j) if i < j else (j, i)
            if key not in cache:
                m = verts[i] + verts[j]
                verts.append(m / np.linalg.norm(m))
                cache[key] = len(verts) - 1
            return cache[key]

        new_faces = []
        for a, b, c in faces:
            ab, bc, ca = midpoint(a, b), midpoint(b, c), midpoint(c, a)
            new_faces += [[a, ab, ca], [b, bc, ab], [c, ca, bc], [ab, bc, ca]]
        faces = np.array(new_faces)
    V = np.array(verts) * radius
    return TriMesh(V, faces)


def make_ellipsoid(radii, subdivisions=3, center=(0.0, 0.0, 0.0)):
    """Anisotropically scaled icosphere (same topology as the icosphere)."""
    ico = make_icosphere(subdivisions, 1.0)
    return ico.with_vertices(ico.vertices * np.asarray(radii, dtype=float) + np.asarray(center))


def merge_meshes(meshes):
    """Concatenate meshes; returns the merged mesh and a per-face source index."""
    verts, faces, owner = [], [], []
    offset = 0
    for k, m in enumerate(meshes):
        verts.append(m.vertices)
        faces.append(m.faces + offset)
        owner.append(np.full(len(m.faces), k))
        offset += m.n_vertices
    if not verts:
        return TriMesh(np.zeros((0, 3)), np.zeros((0, 3), dtype=int)), np.zeros(0, dtype=int)
    return TriMesh(np.vstack(verts), np.vstack(faces)), np.concatenate(owner)


# --- keypoints ---------------------------------------------------------------

def farthest_point_sampling(points, k, start=0):
    """Indices of ``k`` points chosen greedily to maximise the minimum spacing."""
    points = np.asarray(points, dtype=float)
    if k > len(points):
        raise ValueError("cannot sample more points than available")
    chosen = [int(start)]
    dist = np.linalg.norm(points - points[start], axis=1)
    for _ in range(k - 1):
        nxt = int(np.argmax(dist))
        chosen.append(nxt)
        dist = np.minimum(dist, np.linalg.norm(points - points[nxt], axis=1))
    return np.array(chosen)


def default_keypoints(mesh, k=12):
    """Farthest-point keypoint selection, started from the +x extreme vertex."""
    start = int(np.argmax(mesh.vertices[:, 0]))
    return farthest_point_sampling(mesh.vertices, k, start)


def association_matrix(kp_index, n_vertices):
    """0/1 selection matrix A (|V| x |K|) with ``V.T @ A`` = keypoints."""
    kp_index = np.asarray(kp_index, dtype=int)
    if len(np.unique(kp_index)) != len(kp_index):
        raise MeshError("keypoint indices must be distinct")
    if kp_index.size and (kp_index.min() < 0 or kp_index.max() >= n_vertices):
        raise MeshError("keypoint index out of range")
    A = np.zeros((n_vertices, len(kp_index)))
    A[kp_index, np.arange(len(kp_index))] = 1.0
    return A


def keypoint_indices(A):
    """Inverse of :func:`association_matrix`."""
    A = np.asarray(A)
    if not np.all((A == 0) | (A == 1)) or not np.all(A.sum(axis=0) == 1):
        raise MeshError("each column of A must select exactly one vertex")
    idx = np.argmax(A, axis=0)
    if len(np.unique(idx)) != len(idx):
        raise MeshError("columns of A must be distinct")
    return idx


# --- curvature -----------------------------------------------------------------

def uniform_laplacian(mesh):
    """Sparse uniform graph Laplacian ``L = I - D^-1 Adj``."""
    n = mesh.n_vertices
    e = mesh.edges()
    adj = sp.coo_matrix((np.ones(2 * len(e)), (np.r_[e[:, 0], e[:, 1]], np.r_[e[:, 1], e[:, 0]])),
                        shape=(n, n)).tocsr()
    deg = np.asarray(adj.sum(axis=1)).ravel()
    if np.any(deg == 0):
        bad = int(np.flatnonzero(deg == 0)[0])
        raise MeshError(f"vertex {bad} has no neighbours")
    return (sp.identity(n, format="csr") - sp.diags(1.0 / deg) @ adj).tocsr()


def laplacian_curvature(mesh, L=None):
    """Per-vertex mean-curvature vectors ``v_i - mean(neighbours(v_i))``, shape (N, 3)."""
    if L is None:
        L = uniform_laplacian(mesh)
    return L @ mesh.vertices


def curvature_energy(mesh, L=None):
    """Returns ``(sum_i |delta_i|^2, gradient wrt vertices)``."""
    if L is None:
        L = uniform_laplacian(mesh)
    delta = L @ mesh.vertices
    return float(np.sum(delta * delta)), 2.0 * (L.T @ delta)


# --- mirror symmetry -------------------------------------------------------------

_MIRROR = np.array([-1.0, 1.0, 1.0])


@dataclass(frozen=True, eq=False)
class SymmetryMap:
    """Mirror pairing about the object-frame plane x = 0.

    ``mirror[i]`` is the index of the vertex reflected onto ``i``;
    vertices with ``mirror[i] == i`` lie on the plane.
    """

    mirror: np.ndarray

    @property
    def pairs(self):
        i = np.arange(len(self.mirror))
        keep = i < self.mirror
        return np.stack([i[keep], self.mirror[keep]], axis=1)

    @property
    def fixed(self):
        return np.flatnonzero(self.mirror == np.arange(len(self.mirror)))

    def validate(self, mesh=None, tol=1e-6):
        m = np.asarray(self.mirror)
        n = len(m)
        if m.min() < 0 or m.max() >= n or np.any(m[m] != np.arange(n)):
            raise MeshError("symmetry map is not an involution")
        if mesh is not None:
            if mesh.n_vertices != n:
                raise MeshError("symmetry map size does not match mesh")
            V = mesh.vertices
            if np.abs(V[m] - V * _MIRROR).max() > tol:
                raise MeshError("mesh is not mirror-symmetric under this map")


def find_symmetry(mesh, tol=1e-6):
    """Pair each vertex with its reflection through x = 0."""
    V = mesh.vertices
    dist, idx = cKDTree(V).query(V * _MIRROR)
    if np.any(dist > tol):
        raise MeshError("mesh has no x = 0 mirror symmetry")
    sym = SymmetryMap(idx.astype(np.int64))
    sym.validate()
    return sym


def enforce_symmetry(vertices, sym):
    """Project vertex positions onto the symmetric subspace."""
    V = np.asarray(vertices, dtype=float)
    return 0.5 * (V + V[sym.mirror] * _MIRROR)


def symmetrize_gradient(grad, sym):
    """Project a vertex gradient onto the mirror-symmetric subspace.

    Mirror pairs receive the average of their own and the reflected partner
    gradient; on-plane vertices lose their x-component.
    """
    grad = np.asarray(grad, dtype=float)
    if grad.shape != (len(sym.mirror), 3):
        raise MeshError("gradient shape does not match symmetry map")
    sym.validate()
    return 0.5 * (grad + grad[sym.mirror] * _MIRROR)


# --- voxels --------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class VoxelGrid:
    origin: np.ndarray
    cell: np.ndarray          # per-axis cell size
    occupancy: np.ndarray     # (nx, ny, nz) bool

    @property
    def resolution(self):
        return self.occupancy.shape


def mesh_bounds(*meshes, pad=0.02):
    lo = np.min([m.vertices.min(axis=0) for m in meshes], axis=0)
    hi = np.max([m.vertices.max(axis=0) for m in meshes], axis=0)
    margin = pad * (hi - lo).max()
    return lo - margin, hi + margin


def voxelize(mesh, resolution=64, bounds=None):
    """Solid voxelization: a cell is occupied iff its centre is inside the mesh.

    Inside-ness is the parity of surface crossings along the +x ray from the
    cell centre. ``bounds`` is ``(lo, hi)``; defaults to the padded mesh box.
    """
    if not mesh.is_closed():
        raise MeshError("voxelize needs a closed mesh (ray parity is undefined otherwise)")
    if bounds is None:
        bounds = mesh_bounds(mesh)
    lo, hi = (np.asarray(b, dtype=float) for b in bounds)
    res = np.broadcast_to(np.asarray(resolution, dtype=int), (3,))
    cell = (hi - lo) / res
    V = mesh.vertices
    occ = _kernels.parity_fill(np.ascontiguousarray(V[:, 1:]), np.ascontiguousarray(V[:, 0]),
                               mesh.faces, lo[1], lo[2], cell[1], cell[2], lo[0], cell[0],
                               int(res[1]), int(res[2]), int(res[0]))
    return VoxelGrid(lo, cell, occ)


def voxel_iou(a, b):
    """|a & b| / |a | b| over two grids of identical layout (empty vs empty -> 1)."""
    oa = a.occupancy if isinstance(a, VoxelGrid) else np.asarray(a, dtype=bool)
    ob = b.occupancy if isinstance(b, VoxelGrid) else np.asarray(b, dtype=bool)
    if oa.shape != ob.shape:
        raise MeshError("voxel grids differ in shape")
    if isinstance(a, VoxelGrid) and isinstance(b, VoxelGrid):
        if not (np.allclose(a.origin, b.origin) and np.allclose(a.cell, b.cell)):
            raise MeshError("voxel grids differ in placement")
    union = np.count_nonzero(oa | ob)
    if union == 0:
        return 1.0
    return np.count_nonzero(oa & ob) / union


def mesh_voxel_iou(a, b, resolution=64):
    """Voxel IoU of two closed meshes on a shared grid covering both."""
    bounds = mesh_bounds(a, b)
    return voxel_iou(voxelize(a, resolution, bounds), voxelize(b, resolution, bounds))


# --- OBJ -------------------------------------------------------------------------

def save_obj(mesh, path):
    with open(path, "w") as fh:
        fh.write(f"# {mesh.n_vertices} vertices, {len(mesh.faces)} faces\n")
        for v in mesh.vertices:
            fh.write("v {:.17g} {:.17g} {:.17g}\n".format(*v))
        for f in mesh.faces + 1:
            fh.write("f {} {} {}\n".format(*f))


def load_obj(path):
    """Read the ``v x y z`` / ``f i j k`` subset of Wavefront OBJ."""
    verts, faces, face_lines = [], [], []
    with open(path) as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            parts = line.split()
            tag = parts[0]
            if tag == "v":
                if len(parts) < 4:
                    raise ObjParseError("vertex needs three coordinates", lineno)
                try:
                    verts.append([float(x) for x in parts[1:4]])
                except ValueError:
                    raise ObjParseError("bad vertex coordinate", lineno) from None
            elif tag == "f":
                if len(parts) != 4:
                    raise ObjParseError("only triangular faces are supported", lineno)
                try:
                    # tolerate "i/t/n" references, keep the vertex index
                    idx = [int(p.split("/")[0]) for p in parts[1:]]
                except ValueError:
                    raise ObjParseError("bad face index", lineno) from None
                faces.append(idx)
                face_lines.append(lineno)
            else:
                raise ObjParseError(f"unsupported record {tag!r}", lineno)
    if not verts:
        raise ObjParseError("no vertices")
    n = len(verts)
    for idx, lineno in zip(faces, face_lines):
        for i in idx:
            if i < 1 or i > n:
                raise ObjParseError(f"face index {i} outside 1..{n}", lineno)
        if len(set(idx)) != 3:
            raise ObjParseError("degenerate face", lineno)
    F = np.array(faces, dtype=np.int64).reshape(-1, 3) - 1
    return TriMesh(np.array(verts), F)
