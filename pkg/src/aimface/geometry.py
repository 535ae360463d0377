"""Triangle meshes: OBJ I/O, normals, reflection, and BVH ray queries."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

# Rays starting on a surface must not re-hit it; scaled by the mesh bbox
# diagonal so the guard is resolution-independent.
SELF_HIT_EPS = 1e-6

_DET_EPS = 1e-12


class MeshFormatError(ValueError):
    """Raised when an OBJ file cannot be parsed into a valid mesh."""


@dataclass
class TriMesh:
    vertices: np.ndarray  # (V, 3) float64
    faces: np.ndarray  # (F, 3) int64
    name: str | None = None

    def __post_init__(self):
        self.vertices = np.ascontiguousarray(self.vertices, dtype=np.float64)
        self.faces = np.ascontiguousarray(self.faces, dtype=np.int64)
        if self.vertices.ndim != 2 or self.vertices.shape[1] != 3:
            raise ValueError(f"vertices must be (V, 3), got {self.vertices.shape}")
        if self.faces.size and (self.faces.ndim != 2 or self.faces.shape[1] != 3):
            raise ValueError(f"faces must be (F, 3), got {self.faces.shape}")
        if self.faces.size:
            if self.faces.min() < 0 or self.faces.max() >= len(self.vertices):
                raise ValueError("face index out of range")
            a, b, c = self.faces[:, 0], self.faces[:, 1], self.faces[:, 2]
            if np.any((a == b) | (b == c) | (a == c)):
                raise ValueError("degenerate face (repeated vertex index)")

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def n_faces(self) -> int:
        return len(self.faces)

    def bbox(self) -> tuple[np.ndarray, np.ndarray]:
        return self.vertices.min(axis=0), self.vertices.max(axis=0)

    def bbox_diagonal(self) -> float:
        lo, hi = self.bbox()
        return float(np.linalg.norm(hi - lo))

    def same_topology(self, other: "TriMesh") -> bool:
        return self.faces.shape == other.faces.shape and bool(
            np.array_equal(self.faces, other.faces)
        )


@dataclass
class RayHit:
    point: np.ndarray  # (3,)
    normal: np.ndarray  # unit geometric face normal, (3,)
    face_index: int
    t: float


@dataclass
class SymmetryPlane:
    normal: np.ndarray  # unit (3,)
    offset: float = 0.0  # plane is {x : normal . x = offset}

    def __post_init__(self):
        self.normal = np.asarray(self.normal, dtype=np.float64)
        n = np.linalg.norm(self.normal)
        if not np.isfinite(n) or n < 1e-12:
            raise ValueError("plane normal must be nonzero")
        self.normal = self.normal / n
        self.offset = float(self.offset)


def load_mesh(path: str | Path) -> TriMesh:
    """Read a Wavefront OBJ (v/f records; polygons fan-triangulated)."""
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(path)
    verts: list[list[float]] = []
    face_rows: list[tuple[int, list[int]]] = []  # (line number, indices)
    name = None
    with open(path, "r") as fh:
        for lineno, raw in enumerate(fh, start=1):
            parts = raw.split()
            if not parts or parts[0].startswith("#"):
                continue
            tag = parts[0]
            if tag == "v":
                if len(parts) < 4:
                    raise MeshFormatError(f"{path}:{lineno}: vertex needs 3 coordinates")
                try:
                    verts.append([float(parts[1]), float(parts[2]), float(parts[3])])
                except ValueError as exc:
                    raise MeshFormatError(f"{path}:{lineno}: bad vertex: {exc}") from exc
            elif tag == "f":
                if len(parts) < 4:
                    raise MeshFormatError(f"{path}:{lineno}: face needs >= 3 vertices")
                idx = []
                for tok in parts[1:]:
                    head = tok.split("/")[0]
                    try:
                        i = int(head)
                    except ValueError as exc:
                        raise MeshFormatError(f"{path}:{lineno}: bad face index {tok!r}") from exc
                    if i <= 0:
                        raise MeshFormatError(
                            f"{path}:{lineno}: face index {i} not positive (relative indices unsupported)"
                        )
                    idx.append(i - 1)
                face_rows.append((lineno, idx))
            elif tag == "o" and len(parts) > 1:
                name = parts[1]
            # vn / vt / other records ignored
    nv = len(verts)
    tris: list[list[int]] = []
    for lineno, idx in face_rows:
        for i in idx:
            if i >= nv:
                raise MeshFormatError(f"{path}:{lineno}: face index {i + 1} exceeds vertex count {nv}")
        if len(set(idx)) < len(idx):
            raise MeshFormatError(f"{path}:{lineno}: face repeats a vertex index")
        for k in range(1, len(idx) - 1):  # fan triangulation
            tris.append([idx[0], idx[k], idx[k + 1]])
    vertices = np.array(verts, dtype=np.float64).reshape(nv, 3)
    faces = np.array(tris, dtype=np.int64).reshape(len(tris), 3)
    return TriMesh(vertices=vertices, faces=faces, name=name or path.stem)


def save_mesh(mesh: TriMesh, path: str | Path) -> None:
    """Write OBJ with full float64 precision positions; v/f records only."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = []
    if mesh.name:
        lines.append(f"o {mesh.name}")
    for v in mesh.vertices:
        lines.append(f"v {v[0]:.17g} {v[1]:.17g} {v[2]:.17g}")
    for f in mesh.faces:
        lines.append(f"f {f[0] + 1} {f[1] + 1} {f[2] + 1}")
    path.write_text("\n".join(lines) + "\n")


def face_normals(mesh: TriMesh, normalized: bool = True) -> np.ndarray:
    """Per-face normals; unnormalized vectors have length 2*area."""
    tri = mesh.vertices[mesh.faces]
    n = np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0])
    if not normalized:
        return n
    ln = np.linalg.norm(n, axis=1, keepdims=True)
    with np.errstate(invalid="ignore", divide="ignore"):
        out = np.where(ln > 1e-300, n / ln, 0.0)
    return out


def vertex_normals(mesh: TriMesh) -> np.ndarray:
    """Area-weighted vertex normals; isolated/degenerate vertices get (0,0,1)."""
    acc = np.zeros_like(mesh.vertices)
    if mesh.n_faces:
        fn = face_normals(mesh, normalized=False)  # area weighting for free
        for k in range(3):
            np.add.at(acc, mesh.faces[:, k], fn)
    ln = np.linalg.norm(acc, axis=1, keepdims=True)
    ok = ln[:, 0] > 1e-20
    out = np.tile(np.array([0.0, 0.0, 1.0]), (mesh.n_vertices, 1))
    out[ok] = acc[ok] / ln[ok]
    return out


def vertex_adjacency(mesh: TriMesh) -> list[set[int]]:
    """One-ring neighbor sets per vertex."""
    adj: list[set[int]] = [set() for _ in range(mesh.n_vertices)]
    for a, b, c in mesh.faces:
        adj[a].update((b, c))
        adj[b].update((a, c))
        adj[c].update((a, b))
    return adj


def reflect_points(points: np.ndarray, plane: SymmetryPlane) -> np.ndarray:
    """Mirror points across the plane: p - 2(n.p - offset) n."""
    p = np.asarray(points, dtype=np.float64)
    d = p @ plane.normal - plane.offset
    return p - 2.0 * np.outer(np.atleast_1d(d), plane.normal).reshape(p.shape)


def reflect_point(p: np.ndarray, plane: SymmetryPlane) -> np.ndarray:
    return reflect_points(np.asarray(p, dtype=np.float64).reshape(1, 3), plane)[0]


class Bvh:
    """Median-split bounding volume hierarchy over mesh triangles.

    Queries return exactly the brute-force nearest hit: equal-t candidates
    resolve to the lowest face index, and boxes are pruned only when their
    entry distance strictly exceeds the current best.
    """

    def __init__(self, mesh: TriMesh, leaf_size: int = 8):
        if mesh.n_faces == 0:
            raise ValueError("cannot build a BVH over an empty mesh")
        self.mesh = mesh
        tri = mesh.vertices[mesh.faces]
        self._v0 = np.ascontiguousarray(tri[:, 0])
        self._e1 = np.ascontiguousarray(tri[:, 1] - tri[:, 0])
        self._e2 = np.ascontiguousarray(tri[:, 2] - tri[:, 0])
        self.self_hit_eps = SELF_HIT_EPS * max(mesh.bbox_diagonal(), 1e-30)

        lo = tri.min(axis=1)
        hi = tri.max(axis=1)
        centroids = tri.mean(axis=1)

        order = np.arange(mesh.n_faces)
        bounds_min: list[np.ndarray] = []
        bounds_max: list[np.ndarray] = []
        left: list[int] = []
        right: list[int] = []
        start: list[int] = []
        count: list[int] = []

        def build(ids: np.ndarray, offset: int) -> int:
            node = len(bounds_min)
            bounds_min.append(lo[ids].min(axis=0))
            bounds_max.append(hi[ids].max(axis=0))
            left.append(-1)
            right.append(-1)
            start.append(offset)
            count.append(len(ids))
            if len(ids) > leaf_size:
                cen = centroids[ids]
                axis = int(np.argmax(cen.max(axis=0) - cen.min(axis=0)))
                perm = np.argsort(cen[:, axis], kind="stable")
                ids = ids[perm]
                half = len(ids) // 2
                count[node] = 0
                left[node] = build(ids[:half], offset)
                right[node] = build(ids[half:], offset + half)
            else:
                order[offset : offset + len(ids)] = ids
            return node

        build(np.arange(mesh.n_faces), 0)
        self._bmin = np.array(bounds_min)
        self._bmax = np.array(bounds_max)
        self._left = np.array(left, dtype=np.int64)
        self._right = np.array(right, dtype=np.int64)
        self._start = np.array(start, dtype=np.int64)
        self._count = np.array(count, dtype=np.int64)
        self._order = order
        self._ov0 = self._v0[order]
        self._oe1 = self._e1[order]
        self._oe2 = self._e2[order]

    def _leaf_hits(self, s: int, c: int, origin, direction, eps):
        v0 = self._ov0[s : s + c]
        e1 = self._oe1[s : s + c]
        e2 = self._oe2[s : s + c]
        pvec = np.cross(direction, e2)
        det = np.einsum("ij,ij->i", e1, pvec)
        ok = np.abs(det) > _DET_EPS
        with np.errstate(divide="ignore", invalid="ignore"):
            inv = np.where(ok, 1.0 / det, 0.0)
        tvec = origin - v0
        u = np.einsum("ij,ij->i", tvec, pvec) * inv
        qvec = np.cross(tvec, e1)
        v = (qvec @ direction) * inv
        t = np.einsum("ij,ij->i", e2, qvec) * inv
        ok &= (u >= 0.0) & (v >= 0.0) & (u + v <= 1.0) & (t > eps)
        return ok, t

    def ray_intersect(self, origin: np.ndarray, direction: np.ndarray) -> RayHit | None:
        origin = np.asarray(origin, dtype=np.float64)
        direction = np.asarray(direction, dtype=np.float64)
        dn = np.linalg.norm(direction)
        if abs(dn - 1.0) > 1e-6:
            raise ValueError("ray direction must be unit length")
        eps = self.self_hit_eps
        with np.errstate(divide="ignore"):
            inv_d = 1.0 / direction
        best_t = np.inf
        best_f = -1
        stack = [0]
        with np.errstate(invalid="ignore"):  # 0*inf in the slab test handled via nanmax
            while stack:
                node = stack.pop()
                t0 = (self._bmin[node] - origin) * inv_d
                t1 = (self._bmax[node] - origin) * inv_d
                tn = np.minimum(t0, t1)
                tf = np.maximum(t0, t1)
                # NaN from 0*inf means the ray lies on a box plane; treat as overlap
                tnear = np.nanmax(np.concatenate([tn, [0.0]]))
                tfar = np.nanmin(np.concatenate([tf, [np.inf]]))
                if tnear > tfar or tnear > best_t:
                    continue
                if self._count[node] > 0:
                    s, c = self._start[node], self._count[node]
                    ok, t = self._leaf_hits(s, c, origin, direction, eps)
                    for j in np.nonzero(ok)[0]:
                        fj = int(self._order[s + j])
                        tj = float(t[j])
                        if tj < best_t or (tj == best_t and fj < best_f):
                            best_t, best_f = tj, fj
                else:
                    stack.append(int(self._right[node]))
                    stack.append(int(self._left[node]))
        if best_f < 0:
            return None
        n = np.cross(self._e1[best_f], self._e2[best_f])
        ln = np.linalg.norm(n)
        n = n / ln if ln > 1e-300 else np.array([0.0, 0.0, 1.0])
        return RayHit(
            point=origin + best_t * direction,
            normal=n,
            face_index=best_f,
            t=best_t,
        )


def build_bvh(mesh: TriMesh) -> Bvh:
    return Bvh(mesh)


def ray_intersect(accel: Bvh, origin: np.ndarray, direction: np.ndarray) -> RayHit | None:
    return accel.ray_intersect(origin, direction)
