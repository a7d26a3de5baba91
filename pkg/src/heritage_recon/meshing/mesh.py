"""Triangle meshes: iso-surface extraction, component filtering, vertex
coloring from the trained fields, and PLY/OBJ input and output."""

from __future__ import annotations

from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components

from ..plyio import read_ply, write_ply
from .mc_tables import CORNERS, EDGE_CORNERS, TRI_TABLE


class MeshError(ValueError):
    pass


@dataclass
class TriangleMesh:
    vertices: np.ndarray  # (N, 3)
    faces: np.ndarray  # (F, 3) int64
    colors: np.ndarray | None = None  # (N, 3) in [0, 1]
    normals: np.ndarray | None = None  # (N, 3) unit

    def __post_init__(self) -> None:
        self.vertices = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        self.faces = np.asarray(self.faces, dtype=np.int64).reshape(-1, 3)
        for name in ("colors", "normals"):
            val = getattr(self, name)
            if val is not None:
                val = np.asarray(val, dtype=np.float64).reshape(-1, 3)
                if len(val) != len(self.vertices):
                    raise MeshError(f"{name} must have one row per vertex")
                setattr(self, name, val)
        if len(self.faces) and (self.faces.min() < 0 or self.faces.max() >= len(self.vertices)):
            raise MeshError("face index out of range")

    @classmethod
    def empty(cls) -> "TriangleMesh":
        return cls(np.zeros((0, 3)), np.zeros((0, 3), np.int64))

    @property
    def is_empty(self) -> bool:
        return len(self.faces) == 0

    def face_areas(self) -> np.ndarray:
        v = self.vertices[self.faces]
        return 0.5 * np.linalg.norm(np.cross(v[:, 1] - v[:, 0], v[:, 2] - v[:, 0]), axis=-1)

    def area(self) -> float:
        return float(self.face_areas().sum())

    def edges(self) -> np.ndarray:
        e = np.concatenate([self.faces[:, [0, 1]], self.faces[:, [1, 2]], self.faces[:, [2, 0]]])
        return np.unique(np.sort(e, axis=1), axis=0)

    def euler_characteristic(self) -> int:
        used = np.unique(self.faces)
        return int(len(used) - len(self.edges()) + len(self.faces))

    def signed_volume(self) -> float:
        v = self.vertices[self.faces]
        return float(np.einsum("ij,ij->i", v[:, 0], np.cross(v[:, 1], v[:, 2])).sum() / 6.0)

    def face_normals(self) -> np.ndarray:
        v = self.vertices[self.faces]
        n = np.cross(v[:, 1] - v[:, 0], v[:, 2] - v[:, 0])
        return n / np.maximum(np.linalg.norm(n, axis=-1, keepdims=True), 1e-300)

    def vertex_normals_from_faces(self) -> np.ndarray:
        """Area-weighted average of incident face normals."""
        v = self.vertices[self.faces]
        fn = np.cross(v[:, 1] - v[:, 0], v[:, 2] - v[:, 0])
        acc = np.zeros_like(self.vertices)
        for k in range(3):
            np.add.at(acc, self.faces[:, k], fn)
        return acc / np.maximum(np.linalg.norm(acc, axis=-1, keepdims=True), 1e-300)

    def submesh(self, keep_faces: np.ndarray) -> "TriangleMesh":
        """Keep the selected faces and compact vertex indices."""
        faces = self.faces[keep_faces]
        used = np.unique(faces)
        remap = np.full(len(self.vertices), -1, dtype=np.int64)
        remap[used] = np.arange(len(used))
        return TriangleMesh(self.vertices[used], remap[faces],
                            None if self.colors is None else self.colors[used],
                            None if self.normals is None else self.normals[used])


# -- extraction ---------------------------------------------------------------

def lattice(bounds, resolution: int) -> list[np.ndarray]:
    lo, hi = (np.asarray(b, dtype=np.float64) for b in bounds)
    return [np.linspace(lo[k], hi[k], resolution + 1) for k in range(3)]


def sample_lattice(field, bounds, resolution: int, slab: int = 16) -> np.ndarray:
    """Field values on the (res+1)^3 lattice, one batched call per z-slab."""
    ax = lattice(bounds, resolution)
    n = resolution + 1
    out = np.empty((n, n, n))
    xx, yy = np.meshgrid(ax[0], ax[1], indexing="ij")
    for z0 in range(0, n, slab):
        zs = ax[2][z0:z0 + slab]
        pts = np.stack([np.repeat(xx[..., None], len(zs), axis=2), np.repeat(yy[..., None], len(zs), axis=2),
                        np.broadcast_to(zs, (n, n, len(zs)))], axis=-1)
        out[:, :, z0:z0 + len(zs)] = np.asarray(field(pts.reshape(-1, 3))).reshape(n, n, len(zs))
    return out


def marching_cubes_grid(values: np.ndarray, bounds, iso: float = 0.0) -> TriangleMesh:
    """Triangulate the ``iso`` level set of lattice samples ``values`` (nx, ny, nz).

    Vertices are shared between neighbouring cells, interpolated linearly on
    lattice edges, and triangles face the side where values exceed ``iso``.
    """
    v = np.asarray(values, dtype=np.float64)
    if v.ndim != 3 or min(v.shape) < 2:
        raise MeshError("values must be a 3-D lattice with at least 2 samples per axis")
    lo, hi = (np.asarray(b, dtype=np.float64) for b in bounds)
    step = (hi - lo) / (np.asarray(v.shape) - 1)
    below = v < iso
    nx, ny, nz = (s - 1 for s in v.shape)
    code = np.zeros((nx, ny, nz), dtype=np.int64)
    for c, (dx, dy, dz) in enumerate(CORNERS):
        code |= below[dx:dx + nx, dy:dy + ny, dz:dz + nz].astype(np.int64) << c
    cells = np.nonzero((code != 0) & (code != 255))
    if len(cells[0]) == 0:
        return TriangleMesh.empty()
    cidx = np.stack(cells, axis=-1)
    tri = TRI_TABLE[code[cells]]  # (C, 16)
    cell_of, slot = np.nonzero(tri >= 0)
    local_edge = tri[cell_of, slot]
    # global id of each lattice edge: (axis, corner lattice index)
    a_corner = CORNERS[EDGE_CORNERS[:, 0]]
    b_corner = CORNERS[EDGE_CORNERS[:, 1]]
    low = np.minimum(a_corner, b_corner)
    axis = np.argmax(np.abs(b_corner - a_corner), axis=1)
    p = cidx[cell_of] + low[local_edge]
    shape = np.asarray(v.shape)
    gid = ((axis[local_edge] * shape[0] + p[:, 0]) * shape[1] + p[:, 1]) * shape[2] + p[:, 2]
    uniq, inverse = np.unique(gid, return_inverse=True)
    # interpolate one vertex per unique edge
    ax = uniq // (shape[0] * shape[1] * shape[2])
    rem = uniq % (shape[0] * shape[1] * shape[2])
    p0 = np.stack([rem // (shape[1] * shape[2]), (rem // shape[2]) % shape[1], rem % shape[2]], axis=-1)
    p1 = p0.copy()
    p1[np.arange(len(p1)), ax] += 1
    v0 = v[p0[:, 0], p0[:, 1], p0[:, 2]]
    v1 = v[p1[:, 0], p1[:, 1], p1[:, 2]]
    denom = v1 - v0
    t = np.where(np.abs(denom) > 0, (iso - v0) / np.where(np.abs(denom) > 0, denom, 1.0), 0.5)
    t = np.clip(t, 0.0, 1.0)
    verts = lo + (p0 + t[:, None] * (p1 - p0)) * step
    faces = inverse.reshape(-1, 3)
    # the table winds triangles towards the low side; flip to face increasing values
    faces = faces[:, [0, 2, 1]]
    return _weld(TriangleMesh(verts, faces), tol=1e-9 * float(step.min()))


def _weld(mesh: TriangleMesh, tol: float) -> TriangleMesh:
    """Merge coincident vertices and drop faces that collapse."""
    if mesh.is_empty:
        return mesh
    key = np.round(mesh.vertices / max(tol, 1e-300)).astype(np.int64)
    _, first, inverse = np.unique(key, axis=0, return_index=True, return_inverse=True)
    inverse = inverse.ravel()
    faces = inverse[mesh.faces]
    ok = (faces[:, 0] != faces[:, 1]) & (faces[:, 1] != faces[:, 2]) & (faces[:, 0] != faces[:, 2])
    out = TriangleMesh(mesh.vertices[first], faces[ok])
    areas = out.face_areas()
    return out.submesh(areas > 0)


def marching_cubes(field, bounds=((-1.0, -1.0, -1.0), (1.0, 1.0, 1.0)), resolution: int = 128,
                   iso: float = 0.0) -> TriangleMesh:
    """Zero level set of ``field`` (points (N, 3) -> values (N,)) over ``bounds``
    with ``resolution`` cells per axis."""
    if resolution < 8:
        raise MeshError("resolution must be >= 8")
    values = sample_lattice(field, bounds, resolution)
    return marching_cubes_grid(values, bounds, iso)


def clip_to_sphere(mesh: TriangleMesh, center, radius: float) -> TriangleMesh:
    """Drop vertices outside the sphere together with their incident faces."""
    if mesh.is_empty:
        return mesh
    inside = np.linalg.norm(mesh.vertices - np.asarray(center), axis=-1) <= radius
    return mesh.submesh(inside[mesh.faces].all(axis=1))


# -- components -----------------------------------------------------------------

def component_labels(mesh: TriangleMesh) -> tuple[int, np.ndarray]:
    """Connected components over shared vertices; returns count and per-face labels."""
    n = len(mesh.vertices)
    f = mesh.faces
    rows = np.concatenate([f[:, 0], f[:, 1], f[:, 2]])
    cols = np.concatenate([f[:, 1], f[:, 2], f[:, 0]])
    adj = coo_matrix((np.ones(len(rows), dtype=np.int8), (rows, cols)), shape=(n, n))
    count, vlabel = connected_components(adj, directed=False)
    return count, vlabel[f[:, 0]]


def filter_components(mesh: TriangleMesh, mode: str = "keep-largest", center=(0.0, 0.0, 0.0),
                      radius: float | None = None) -> TriangleMesh:
    """Remove floating pieces.

    ``keep-largest`` keeps the component with the most faces; ``keep-within``
    keeps components whose vertex centroid lies within ``radius`` of ``center``.
    """
    if mesh.is_empty:
        return mesh
    count, flabel = component_labels(mesh)
    if count <= 1:
        return mesh
    if mode == "keep-largest":
        sizes = np.bincount(flabel, minlength=count)
        keep = flabel == int(np.argmax(sizes))
    elif mode == "keep-within":
        if radius is None:
            raise MeshError("keep-within needs a radius")
        keep = np.zeros(len(mesh.faces), bool)
        for c in range(count):
            sel = flabel == c
            verts = np.unique(mesh.faces[sel])
            if np.linalg.norm(mesh.vertices[verts].mean(axis=0) - np.asarray(center)) <= radius:
                keep |= sel
    elif mode == "none":
        return mesh
    else:
        raise MeshError(f"unknown filter mode {mode!r}")
    return mesh.submesh(keep)


# -- coloring ---------------------------------------------------------------------

def colorize_vertices(mesh: TriangleMesh, color_field, sdf_field, embedding: np.ndarray,
                      chunk: int = 16384) -> TriangleMesh:
    """Bake colors by querying the color field at each vertex.

    The view direction is the inward normal; degenerate SDF gradients fall
    back to the face-averaged normal.
    """
    from ..autodiff import Tape, Tensor

    if mesh.is_empty:
        raise MeshError("cannot colorize an empty mesh")
    emb = np.asarray(embedding, dtype=np.float64).reshape(1, -1)
    face_n = None
    colors = np.empty((len(mesh.vertices), 3))
    normals = np.empty((len(mesh.vertices), 3))
    for lo in range(0, len(mesh.vertices), chunk):
        pts = mesh.vertices[lo:lo + chunk]
        x = Tensor(pts, requires_grad=True)
        tape = Tape()
        with tape:
            out = sdf_field.forward(x)
        g = tape.gradient(out.d, [x])[0].data
        gn = np.linalg.norm(g, axis=-1, keepdims=True)
        n = g / np.maximum(gn, 1e-300)
        bad = (gn[:, 0] < 1e-8) | ~np.all(np.isfinite(n), axis=-1)
        if bad.any():
            if face_n is None:
                face_n = mesh.vertex_normals_from_faces()
            n[bad] = face_n[lo:lo + chunk][bad]
        e = np.broadcast_to(emb, (len(pts), emb.shape[1]))
        c = color_field.forward(Tensor(pts), Tensor(-n), Tensor(n), Tensor(np.ascontiguousarray(e)),
                                Tensor(out.f.data)).data
        colors[lo:lo + chunk] = np.clip(c, 0.0, 1.0)
        normals[lo:lo + chunk] = n
    return replace(mesh, colors=colors, normals=normals)


# -- I/O ------------------------------------------------------------------------------

def colors_to_u8(colors: np.ndarray) -> np.ndarray:
    """Scale to 0..255 with round-half-to-even and clamp."""
    return np.clip(np.rint(np.asarray(colors, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)


def export_mesh(mesh: TriangleMesh, path, fmt: str | None = None) -> None:
    path = Path(path)
    fmt = (fmt or path.suffix.lstrip(".")).lower()
    if fmt == "ply":
        _write_ply_mesh(mesh, path)
    elif fmt == "obj":
        _write_obj(mesh, path)
    else:
        raise MeshError(f"unsupported mesh format {fmt!r}")


def _write_ply_mesh(mesh: TriangleMesh, path) -> None:
    v = mesh.vertices
    cols = colors_to_u8(mesh.colors) if mesh.colors is not None else np.full((len(v), 3), 255, np.uint8)
    nrm = mesh.normals if mesh.normals is not None else np.zeros((len(v), 3))
    vertex = [("x", "float", v[:, 0]), ("y", "float", v[:, 1]), ("z", "float", v[:, 2]),
              ("red", "uchar", cols[:, 0]), ("green", "uchar", cols[:, 1]), ("blue", "uchar", cols[:, 2]),
              ("nx", "float", nrm[:, 0]), ("ny", "float", nrm[:, 1]), ("nz", "float", nrm[:, 2])]
    face = [("vertex_indices", "list:uchar:int", mesh.faces.astype(np.int32))]
    write_ply(path, [("vertex", vertex), ("face", face)])


def _write_obj(mesh: TriangleMesh, path) -> None:
    lines = ["# vertex colors follow the coordinates as r g b in [0, 1]"]
    cols = None if mesh.colors is None else colors_to_u8(mesh.colors) / 255.0
    for i, p in enumerate(mesh.vertices):
        s = f"v {p[0]:.9g} {p[1]:.9g} {p[2]:.9g}"
        if cols is not None:
            s += f" {cols[i, 0]:.6g} {cols[i, 1]:.6g} {cols[i, 2]:.6g}"
        lines.append(s)
    if mesh.normals is not None:
        lines += [f"vn {n[0]:.9g} {n[1]:.9g} {n[2]:.9g}" for n in mesh.normals]
        lines += [f"f {a + 1}//{a + 1} {b + 1}//{b + 1} {c + 1}//{c + 1}" for a, b, c in mesh.faces]
    else:
        lines += [f"f {a + 1} {b + 1} {c + 1}" for a, b, c in mesh.faces]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_mesh(path) -> TriangleMesh:
    path = Path(path)
    if path.suffix.lower() == ".obj":
        return _read_obj(path)
    data = read_ply(path)
    if "vertex" not in data:
        raise MeshError(f"{path}: no vertex element")
    v = data["vertex"]
    verts = np.stack([np.asarray(v[k], dtype=np.float64) for k in ("x", "y", "z")], axis=-1)
    faces = np.zeros((0, 3), np.int64)
    if "face" in data:
        f = data["face"]
        key = "vertex_indices" if "vertex_indices" in f else "vertex_index"
        raw = f[key]
        if isinstance(raw, list):
            tris = []
            for poly in raw:
                for k in range(1, len(poly) - 1):
                    tris.append((poly[0], poly[k], poly[k + 1]))
            faces = np.asarray(tris, dtype=np.int64).reshape(-1, 3)
        else:
            faces = np.asarray(raw, dtype=np.int64).reshape(-1, 3)
    colors = None
    if all(k in v for k in ("red", "green", "blue")):
        colors = np.stack([v[k] for k in ("red", "green", "blue")], axis=-1).astype(np.float64) / 255.0
    normals = None
    if all(k in v for k in ("nx", "ny", "nz")):
        normals = np.stack([np.asarray(v[k], dtype=np.float64) for k in ("nx", "ny", "nz")], axis=-1)
    return TriangleMesh(verts, faces, colors, normals)


def _read_obj(path) -> TriangleMesh:
    verts, cols, norms, faces = [], [], [], []
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        parts = line.split()
        if not parts or parts[0].startswith("#"):
            continue
        if parts[0] == "v":
            verts.append([float(x) for x in parts[1:4]])
            if len(parts) >= 7:
                cols.append([float(x) for x in parts[4:7]])
        elif parts[0] == "vn":
            norms.append([float(x) for x in parts[1:4]])
        elif parts[0] == "f":
            idx = [int(p.split("/")[0]) - 1 for p in parts[1:]]
            for k in range(1, len(idx) - 1):
                faces.append((idx[0], idx[k], idx[k + 1]))
    colors = np.asarray(cols) if cols and len(cols) == len(verts) else None
    normals = np.asarray(norms) if norms and len(norms) == len(verts) else None
    return TriangleMesh(np.asarray(verts).reshape(-1, 3), np.asarray(faces, dtype=np.int64).reshape(-1, 3),
                        colors, normals)
