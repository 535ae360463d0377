"""Seeded synthetic head actors with exact ground-truth anatomy.

Every field the pipeline estimates elsewhere is constructed here in closed
form: skin = anatomy point + thickness * anatomy normal holds bitwise, each
non-neutral shape is produced by the same blend-skinning-plus-offsets forward
the model family uses, and (at asymmetry 0) every field is exactly mirror
symmetric across x = 0 vertex-for-vertex.

Exactness of the symmetry relies on computing everything from (x*x, y, z) and
multiplying odd components by x: IEEE negation, squaring, and commutative
addition then carry bit-identical values to mirrored vertices.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .diffnet import apply_transform9, lbs_points, rot6d_to_matrix
from .geometry import SymmetryPlane, TriMesh, vertex_normals

MIRROR_SIGNS = np.array([-1.0, 1.0, 1.0])  # reflection across x = 0

# Jaw hinge shared by every generated actor (model mm), so transforms mean
# the same thing across paired actors: axis +x, positive angle opens.
JAW_PIVOT = np.array([0.0, -20.0, -15.0])

_PURE_JAW_ANGLES = (20.0, 13.0, 7.0)  # degrees; shapes with no bump field


@dataclass
class GenConfig:
    verts: int = 2000  # approximate vertex budget
    shapes: int = 10  # N, neutral included
    asymmetry: float = 0.0  # mm of symmetry-breaking noise, 0 = exact


@dataclass
class SyntheticActor:
    skin: TriMesh  # neutral surface
    skull: TriMesh
    mandible: TriMesh
    blendshapes: np.ndarray  # (N, V, 3); row 0 == skin.vertices
    anatomy_points: np.ndarray  # (V, 3)
    thickness: np.ndarray  # (V,) mm, > 0
    anatomy_normals: np.ndarray  # (V, 3) unit
    skinning: np.ndarray  # (V,) in [0, 1]; exactly 0 above the jaw line
    expression_bases: np.ndarray  # (N, V, 3); rows 0 and pure-jaw rows zero
    jaw_poses: np.ndarray  # (N, 9); row 0 identity
    trusted_mask: np.ndarray  # (V,) bool
    forehead_mask: np.ndarray  # (V,) bool
    symmetry_plane: SymmetryPlane
    mirror_index: np.ndarray  # (V,) partner vertex under reflection
    jaw_pivot: np.ndarray = field(default_factory=lambda: JAW_PIVOT.copy())
    seed: int = 0

    @property
    def n_shapes(self) -> int:
        return len(self.blendshapes)

    @property
    def n_vertices(self) -> int:
        return self.skin.n_vertices


@dataclass
class Performance:
    """A synthetic take: per-frame meshes plus the poses that made them."""

    vertices: np.ndarray  # (J, V, 3)
    head_poses: np.ndarray  # (J, 9) global transform
    jaw_poses: np.ndarray  # (J, 9)
    coeffs: np.ndarray  # (J, N-1)
    jaw_angles_deg: np.ndarray  # (J,) the scalar hinge angles behind jaw_poses
    seed: int = 0

    @property
    def n_frames(self) -> int:
        return len(self.vertices)


# ------------------------------------------------------------- base sphere

def _uv_sphere(verts_target: int):
    """Symmetric unit sphere: mirrored columns share bit-exact |x|, y, z."""
    rings = max(3, int(round(math.sqrt(max(verts_target - 2, 8) / 2.0))))
    cols = 2 * (rings + 1)
    nv = 2 + rings * cols
    v = np.zeros((nv, 3))
    v[0] = (0.0, 1.0, 0.0)
    v[nv - 1] = (0.0, -1.0, 0.0)

    def vid(r, c):
        return 1 + r * cols + (c % cols)

    half = cols // 2
    for r in range(rings):
        theta = math.pi * (r + 1) / (rings + 1)
        st, ct = math.sin(theta), math.cos(theta)
        for c in range(half + 1):
            phi = 2.0 * math.pi * c / cols
            x = 0.0 if c in (0, half) else st * math.sin(phi)
            z = st * math.cos(phi)
            v[vid(r, c)] = (x, ct, z)
            if 0 < c < half:
                v[vid(r, cols - c)] = (-x, ct, z)

    mirror = np.arange(nv)
    for r in range(rings):
        for c in range(cols):
            mirror[vid(r, c)] = vid(r, (cols - c) % cols)

    faces = []
    for c in range(cols):
        faces.append([0, vid(0, c), vid(0, c + 1)])
    for r in range(rings - 1):
        for c in range(cols):
            a, b = vid(r, c), vid(r, c + 1)
            a2, b2 = vid(r + 1, c), vid(r + 1, c + 1)
            faces.append([a, b2, b])
            faces.append([a, a2, b2])
    for c in range(cols):
        faces.append([nv - 1, vid(rings - 1, c + 1), vid(rings - 1, c)])
    faces = np.array(faces, dtype=np.int64)

    # enforce outward orientation via signed volume
    tri = v[faces]
    vol = np.einsum("ij,ij->i", tri[:, 0], np.cross(tri[:, 1], tri[:, 2])).sum() / 6.0
    if vol < 0:
        faces = faces[:, [0, 2, 1]]
    return v, faces, mirror


def _smoothstep01(q: np.ndarray) -> np.ndarray:
    t = np.clip(q, 0.0, 1.0)
    return t * t * (3.0 - 2.0 * t)


def _gauss_mm(p: np.ndarray, center, sigma: float) -> np.ndarray:
    """Gaussian falloff; mirrored-pair centers are summed in a fixed order so
    the result is exactly even in x."""
    cx, cy, cz = center
    dy2 = (p[:, 1] - cy) ** 2 + (p[:, 2] - cz) ** 2
    g = np.exp(-((p[:, 0] - cx) ** 2 + dy2) / (2.0 * sigma * sigma))
    if cx != 0.0:
        g = g + np.exp(-((p[:, 0] + cx) ** 2 + dy2) / (2.0 * sigma * sigma))
    return g


def _symmetrize_vectors(vec: np.ndarray, mirror: np.ndarray) -> np.ndarray:
    """Copy the x>0 side onto its mirror (x negated); zero x on the seam."""
    out = vec.copy()
    self_paired = mirror == np.arange(len(vec))
    out[self_paired, 0] = 0.0
    canon = np.nonzero(~self_paired & (np.arange(len(vec)) < mirror))[0]
    out[mirror[canon]] = out[canon] * MIRROR_SIGNS
    return out


def _hinge_transform9(angle_deg: float, pivot: np.ndarray) -> np.ndarray:
    """Rotation about the +x axis through `pivot`, encoded as a 9-vector."""
    a = math.radians(angle_deg)
    c, s = math.cos(a), math.sin(a)
    R = np.array([[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]])
    t = pivot - R @ pivot
    r6 = np.concatenate([R[:, 0], R[:, 1]])
    return np.concatenate([r6, t])


# ------------------------------------------------------------ actor builder

def _shared_params(rng: np.random.Generator, n_shapes: int) -> dict:
    """Choices that paired actors must agree on for transforms/coefficients
    to mean the same thing: shape roles, jaw angles, bump placement."""
    n_pure = min(len(_PURE_JAW_ANGLES), n_shapes - 1)
    angles = list(_PURE_JAW_ANGLES[:n_pure])
    bump_sets = [[] for _ in range(n_pure)]
    for _ in range(n_pure, n_shapes - 1):
        angles.append(float(rng.uniform(-3.0, 8.0)))
        bumps = []
        for _ in range(int(rng.integers(3, 9))):
            above_jaw = rng.random() < 0.6
            cy = float(rng.uniform(-15.0, 55.0)) if above_jaw else float(rng.uniform(-80.0, -30.0))
            cx = 0.0 if rng.random() < 0.35 else float(rng.uniform(8.0, 55.0))
            cz = float(rng.uniform(25.0, 80.0))
            bumps.append({
                "center": (cx, cy, cz),
                "sigma": float(rng.uniform(12.0, 28.0)),
                "amp": float(rng.uniform(2.5, 7.0)) * (1.0 if rng.random() < 0.7 else -1.0),
            })
        bump_sets.append(bumps)
    return {"angles": angles, "bump_sets": bump_sets, "n_pure": n_pure}


def _actor_params(rng: np.random.Generator) -> dict:
    """Per-actor geometry/texture jitter; differs across a retargeting pair."""
    return {
        "axes": np.array([75.0, 95.0, 85.0]) * rng.uniform(0.95, 1.05, 3),
        "feature_amp": rng.uniform(0.8, 1.25, 6),
        "thick_phase": rng.uniform(0.0, 2.0 * math.pi, 3),
        "bump_amp_scale": float(rng.uniform(0.85, 1.2)),
    }


def _build_actor(cfg: GenConfig, shared: dict, actor: dict,
                 noise_rng: np.random.Generator, seed: int) -> SyntheticActor:
    sphere, faces, mirror = _uv_sphere(cfg.verts)
    sx, sy, sz = sphere[:, 0], sphere[:, 1], sphere[:, 2]
    ax, ay, az = actor["axes"]

    # ellipsoid base in mm; x appears only linearly against even factors
    p = np.stack([sx * ax, sy * ay, sz * az], axis=1)

    # stylized features: radial bumps with fixed centers (pairs mirrored)
    fa = actor["feature_amp"]
    features = [
        ((0.0, -15.0, az), 14.0, 10.0 * fa[0]),        # nose
        ((0.0, 25.0, az * 0.92), 22.0, 4.0 * fa[1]),    # brow
        ((0.0, -ay * 0.88, az * 0.5), 20.0, 8.0 * fa[2]),  # chin
        ((42.0, -20.0, az * 0.75), 20.0, 5.0 * fa[3]),  # cheeks (pair)
        ((50.0, -55.0, 10.0), 25.0, 4.0 * fa[4]),       # jaw corners (pair)
        ((0.0, 10.0, -az * 0.95), 30.0, 5.0 * fa[5]),   # occiput
    ]
    amp_total = np.zeros(len(sphere))
    for center, sigma, amp in features:
        amp_total = amp_total + amp * _gauss_mm(p, center, sigma)
    p = p + sphere * amp_total[:, None]  # radial direction: x-odd, y/z-even

    x2 = p[:, 0] * p[:, 0]
    y, z = p[:, 1], p[:, 2]

    # anatomy normal: area-weighted vertex normals, then exact symmetrization
    skin0 = TriMesh(vertices=p, faces=faces, name="neutral")
    n0 = _symmetrize_vectors(vertex_normals(skin0), mirror)
    n0 = n0 / np.linalg.norm(n0, axis=1, keepdims=True)

    # soft-tissue thickness, mm, smooth and strictly inside [2, 9]
    ph = actor["thick_phase"]
    s = (0.5
         + 0.27 * np.sin(0.045 * y + ph[0]) * np.cos(0.037 * z + ph[1])
         + 0.16 * np.cos(0.0011 * x2 + ph[2]))
    d = 2.0 + 7.0 * np.clip(s, 0.05, 0.95)

    # skinning: exactly 0 above the jaw line, saturating to 1 on the chin
    q = ((-y) + 0.8 * z - 85.0) / 22.0
    k = _smoothstep01(q)

    if cfg.asymmetry > 0.0:
        p = p + cfg.asymmetry * noise_rng.normal(size=p.shape)
        d = np.maximum(d + 0.3 * cfg.asymmetry * noise_rng.normal(size=d.shape), 0.5)
        n0 = n0 + 0.02 * cfg.asymmetry * noise_rng.normal(size=n0.shape)
        n0 = n0 / np.linalg.norm(n0, axis=1, keepdims=True)

    # anatomy points, then re-derive the skin so s = b + d*n holds bitwise
    b = p - d[:, None] * n0
    skin_verts = b + d[:, None] * n0
    skin = TriMesh(vertices=skin_verts, faces=faces, name="neutral")

    skull, mandible = _split_bones(b, faces, k)

    n_shapes = cfg.shapes
    jaw_poses = np.zeros((n_shapes, 9))
    jaw_poses[0] = np.array([1.0, 0, 0, 0, 1, 0, 0, 0, 0])
    bases = np.zeros((n_shapes, len(p), 3))
    blend = np.zeros((n_shapes, len(p), 3))
    blend[0] = skin_verts
    for i in range(1, n_shapes):
        jaw_poses[i] = _hinge_transform9(shared["angles"][i - 1], JAW_PIVOT)
        amp = np.zeros(len(p))
        for bump in shared["bump_sets"][i - 1]:
            amp = amp + (bump["amp"] * actor["bump_amp_scale"]) * _gauss_mm(
                skin_verts, bump["center"], bump["sigma"])
        bases[i] = n0 * amp[:, None]
        blend[i] = lbs_points(skin_verts, jaw_poses[i], k) + bases[i]

    y_sorted = np.sort(skin_verts[:, 1])
    forehead = skin_verts[:, 1] > y_sorted[int(0.82 * len(p))]
    trusted = _trusted_mask(skin_verts, k)

    return SyntheticActor(
        skin=skin,
        skull=skull,
        mandible=mandible,
        blendshapes=blend,
        anatomy_points=b,
        thickness=d,
        anatomy_normals=n0,
        skinning=k,
        expression_bases=bases,
        jaw_poses=jaw_poses,
        trusted_mask=trusted,
        forehead_mask=forehead,
        symmetry_plane=SymmetryPlane(normal=np.array([1.0, 0.0, 0.0]), offset=0.0),
        mirror_index=mirror,
        jaw_pivot=JAW_PIVOT.copy(),
        seed=seed,
    )


def _trusted_mask(verts: np.ndarray, k: np.ndarray) -> np.ndarray:
    """Forehead cap + chin patch; sized to land constraint coverage in the
    mid single digits of the vertex count."""
    y = verts[:, 1]
    y_sorted = np.sort(y)
    cap = y > y_sorted[int(0.962 * len(y))]
    chin = (k > 0.93) & (verts[:, 2] > 30.0)
    return cap | chin


def _split_bones(b: np.ndarray, faces: np.ndarray, k: np.ndarray):
    """Offset shell split at the jaw line; straddling faces are dropped so the
    two bones stay disjoint."""
    fk = k[faces]
    mand_faces = faces[np.all(fk >= 0.5, axis=1)]
    skull_faces = faces[np.all(fk < 0.5, axis=1)]

    def compact(f):
        used, inv = np.unique(f, return_inverse=True)
        return TriMesh(vertices=b[used].copy(), faces=inv.reshape(f.shape))

    skull = compact(skull_faces)
    skull.name = "skull"
    mandible = compact(mand_faces)
    mandible.name = "mandible"
    return skull, mandible


def gen_actor(seed: int, cfg: GenConfig | None = None) -> SyntheticActor:
    """Deterministic synthetic head; same seed -> byte-identical actor."""
    cfg = cfg or GenConfig()
    if cfg.shapes < 2:
        raise ValueError("need at least 2 shapes (neutral + one)")
    ss = np.random.SeedSequence(seed)
    sh_ss, ac_ss, no_ss = ss.spawn(3)
    shared = _shared_params(np.random.Generator(np.random.PCG64(sh_ss)), cfg.shapes)
    actor = _actor_params(np.random.Generator(np.random.PCG64(ac_ss)))
    return _build_actor(cfg, shared, actor, np.random.Generator(np.random.PCG64(no_ss)), seed)


def gen_actor_pair(seed: int, cfg: GenConfig | None = None):
    """Two distinct actors sharing topology, jaw hinge, shape roles, and bump
    placement, so one actor's (head pose, jaw pose, coefficients) are directly
    meaningful on the other."""
    cfg = cfg or GenConfig()
    if cfg.shapes < 2:
        raise ValueError("need at least 2 shapes (neutral + one)")
    ss = np.random.SeedSequence(seed)
    sh_ss, a_ss, b_ss, no_a, no_b = ss.spawn(5)
    shared = _shared_params(np.random.Generator(np.random.PCG64(sh_ss)), cfg.shapes)
    pa = _actor_params(np.random.Generator(np.random.PCG64(a_ss)))
    pb = _actor_params(np.random.Generator(np.random.PCG64(b_ss)))
    a = _build_actor(cfg, shared, pa, np.random.Generator(np.random.PCG64(no_a)), seed)
    b = _build_actor(cfg, shared, pb, np.random.Generator(np.random.PCG64(no_b)), seed)
    return a, b


# ------------------------------------------------------------- performances

def actor_forward(actor: SyntheticActor, head_pose9: np.ndarray,
                  jaw_pose9: np.ndarray, coeffs: np.ndarray) -> np.ndarray:
    """Ground-truth forward: global * (skinned neutral + coefficient-blended
    offsets). The same composition the learned model evaluates."""
    coeffs = np.asarray(coeffs, dtype=np.float64).reshape(actor.n_shapes - 1)
    offsets = np.einsum("i,ivc->vc", coeffs, actor.expression_bases[1:])
    posed = lbs_points(actor.skin.vertices, jaw_pose9, actor.skinning) + offsets
    return apply_transform9(head_pose9, posed)


def _smooth_walk(rng: np.random.Generator, j: int, amp: float) -> np.ndarray:
    """Bounded smooth signal over j frames: three-harmonic sinusoid mix."""
    t = np.linspace(0.0, 1.0, j) if j > 1 else np.zeros(1)
    phases = rng.uniform(0.0, 2.0 * math.pi, 3)
    freqs = rng.uniform(0.5, 1.0, 3) * np.array([0.7, 1.3, 2.1])
    w = np.array([0.55, 0.3, 0.15])
    out = np.zeros(j)
    for wi, fi, pi in zip(w, freqs, phases):
        out += wi * np.sin(2.0 * math.pi * fi * t + pi)
    return amp * out


def gen_performance(actor: SyntheticActor, seed: int, frames: int,
                    still: bool = False) -> Performance:
    """Smooth random take: jaw swings inside +-12 degrees, mild head motion,
    low-amplitude coefficients on the non-pure shapes. `still` pins everything
    to the identity/neutral (useful as a degenerate fixture)."""
    if frames < 1:
        raise ValueError("need at least one frame")
    n = actor.n_shapes
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed)))
    identity9 = np.array([1.0, 0, 0, 0, 1, 0, 0, 0, 0])
    if still:
        angles = np.zeros(frames)
        head = np.tile(identity9, (frames, 1))
        coeffs = np.zeros((frames, n - 1))
    else:
        angles = np.clip(6.0 + _smooth_walk(rng, frames, 6.0), -12.0, 12.0)
        rot_walk = np.stack([_smooth_walk(rng, frames, math.radians(8.0)) for _ in range(3)], axis=1)
        trans_walk = np.stack([_smooth_walk(rng, frames, 15.0) for _ in range(3)], axis=1)
        head = np.zeros((frames, 9))
        for jf in range(frames):
            R = _euler_xyz(rot_walk[jf])
            head[jf] = np.concatenate([R[:, 0], R[:, 1], trans_walk[jf]])
        coeffs = np.zeros((frames, n - 1))
        n_pure = min(len(_PURE_JAW_ANGLES), n - 1)
        for i in range(n_pure, n - 1):
            coeffs[:, i] = np.clip(0.35 + _smooth_walk(rng, frames, 0.45), -0.25, 1.0)

    jawp = np.zeros((frames, 9))
    verts = np.zeros((frames, actor.n_vertices, 3))
    for jf in range(frames):
        jawp[jf] = (identity9 if still and angles[jf] == 0.0
                    else _hinge_transform9(float(angles[jf]), actor.jaw_pivot))
        verts[jf] = actor_forward(actor, head[jf], jawp[jf], coeffs[jf])
    return Performance(vertices=verts, head_poses=head, jaw_poses=jawp,
                       coeffs=coeffs, jaw_angles_deg=angles, seed=seed)


def _euler_xyz(r: np.ndarray) -> np.ndarray:
    cx, sx = math.cos(r[0]), math.sin(r[0])
    cy, sy = math.cos(r[1]), math.sin(r[1])
    cz, sz = math.cos(r[2]), math.sin(r[2])
    Rx = np.array([[1, 0, 0], [0, cx, -sx], [0, sx, cx]])
    Ry = np.array([[cy, 0, sy], [0, 1, 0], [-sy, 0, cy]])
    Rz = np.array([[cz, -sz, 0], [sz, cz, 0], [0, 0, 1]])
    return Rz @ Ry @ Rx


def hinge_angle_of(t9: np.ndarray) -> float:
    """Recover the +x hinge angle (degrees) from a 9-vector; geodesic-exact
    for transforms produced by _hinge_transform9."""
    R = rot6d_to_matrix(np.asarray(t9, dtype=np.float64)[:6])
    return math.degrees(math.atan2(R[2, 1], R[1, 1]))
