"""Sparse anatomy constraints by bidirectional skin-bone ray casting.

For each trusted skin vertex, a ray inward along the negated vertex normal
finds the nearest bone point (accepted only when the bone faces the same way
as the skin); a second ray from that bone point along the bone face normal
re-intersects the skin, and the constraint is keyed to the nearest vertex of
the re-intersected face. The stored thickness/direction pair reconstructs the
keyed vertex from the bone point to machine precision.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .geometry import Bvh, TriMesh, vertex_normals

BONE_LABELS = {"skull": "skull", "mandible": "jaw", "jaw": "jaw"}


@dataclass
class ConstraintEntry:
    vertex: int  # skin vertex the triple reconstructs
    bone_point: np.ndarray  # (3,)
    thickness: float  # > 0
    normal: np.ndarray  # unit, bone_point + thickness*normal == vertex pos
    bone: str  # "skull" | "jaw"


@dataclass
class AnatomyConstraintSet:
    entries: dict[int, ConstraintEntry]
    source_mask: np.ndarray  # vertex indices the casting started from
    n_vertices: int

    @property
    def coverage(self) -> float:
        return len(self.entries) / max(self.n_vertices, 1)

    def vertex_indices(self) -> np.ndarray:
        return np.array(sorted(self.entries), dtype=np.int64)

    def arrays(self):
        """(indices, bone points, thicknesses, normals) in vertex order."""
        idx = self.vertex_indices()
        b = np.stack([self.entries[i].bone_point for i in idx]) if len(idx) else np.zeros((0, 3))
        d = np.array([self.entries[i].thickness for i in idx])
        n = np.stack([self.entries[i].normal for i in idx]) if len(idx) else np.zeros((0, 3))
        return idx, b, d, n


def compute_constraints(neutral: TriMesh, bones: list[TriMesh],
                        trusted_mask) -> AnatomyConstraintSet:
    """Bidirectional casting from every masked vertex; entries keyed by the
    re-intersected vertex, duplicate keys keep the smaller thickness."""
    mask_arr = np.asarray(trusted_mask)
    if mask_arr.dtype == bool:
        if mask_arr.shape != (neutral.n_vertices,):
            raise ValueError(f"boolean trusted mask must be "
                             f"({neutral.n_vertices},), got {mask_arr.shape}")
        mask = np.nonzero(mask_arr)[0].astype(np.int64)
    else:
        mask = np.unique(mask_arr.astype(np.int64).reshape(-1))
    if mask.size and (mask.min() < 0 or mask.max() >= neutral.n_vertices):
        raise ValueError("trusted mask index out of range")
    skin_bvh = Bvh(neutral)
    bone_accels = []
    for bi, bone in enumerate(bones):
        label = BONE_LABELS.get(bone.name or "", bone.name or f"bone{bi}")
        bone_accels.append((label, Bvh(bone)))
    normals = vertex_normals(neutral)

    entries: dict[int, ConstraintEntry] = {}
    for v in mask:
        s = neutral.vertices[v]
        n_s = normals[v]
        best = None  # (t, label, hit)
        for label, accel in bone_accels:
            hit = accel.ray_intersect(s, -n_s)
            if hit is not None and (best is None or hit.t < best[0]):
                best = (hit.t, label, hit)
        if best is None:
            continue
        _, label, bone_hit = best
        if float(bone_hit.normal @ n_s) <= 0.0:
            continue  # bone faces away from the skin here
        back = skin_bvh.ray_intersect(bone_hit.point, bone_hit.normal)
        if back is None:
            continue
        corners = neutral.faces[back.face_index]
        nearest = int(corners[np.argmin(
            np.linalg.norm(neutral.vertices[corners] - back.point, axis=1))])
        offset = neutral.vertices[nearest] - bone_hit.point
        d = float(np.linalg.norm(offset))
        if d <= 0.0:
            continue
        entry = ConstraintEntry(
            vertex=nearest,
            bone_point=bone_hit.point.copy(),
            thickness=d,
            normal=offset / d,
            bone=label,
        )
        prev = entries.get(nearest)
        if prev is None or entry.thickness < prev.thickness:
            entries[nearest] = entry
    return AnatomyConstraintSet(entries=entries, source_mask=mask,
                                n_vertices=neutral.n_vertices)


def save_constraints(cs: AnatomyConstraintSet, path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    rows = []
    for v in sorted(cs.entries):
        e = cs.entries[v]
        rows.append({
            "vertex": int(e.vertex),
            "b": [float(x) for x in e.bone_point],
            "d": float(e.thickness),
            "n": [float(x) for x in e.normal],
            "bone": e.bone,
        })
    doc = {"constraints": rows,
           "source_mask": [int(i) for i in cs.source_mask],
           "n_vertices": int(cs.n_vertices)}
    path.write_text(json.dumps(doc, indent=1))


def load_constraints(path: str | Path) -> AnatomyConstraintSet:
    doc = json.loads(Path(path).read_text())
    if "constraints" not in doc:
        raise ValueError(f"{path}: not a constraint file")
    entries = {}
    for row in doc["constraints"]:
        v = int(row["vertex"])
        entries[v] = ConstraintEntry(
            vertex=v,
            bone_point=np.asarray(row["b"], dtype=np.float64),
            thickness=float(row["d"]),
            normal=np.asarray(row["n"], dtype=np.float64),
            bone=str(row["bone"]),
        )
    return AnatomyConstraintSet(
        entries=entries,
        source_mask=np.asarray(doc.get("source_mask", []), dtype=np.int64),
        n_vertices=int(doc["n_vertices"]),
    )
