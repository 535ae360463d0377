"""Fitting a trained face model to per-frame targets, and retargeting.

Rather than optimizing per-frame pose and coefficients directly, each frame
gets a small learned code; two nets decode everything from it and are
optimized jointly with the codes:

  * ``transform_net``  code -> 18 numbers: two rigid transforms
    (head and jaw), each a 6D rotation offset from identity plus a
    damped translation;
  * ``coeff_net``      code + normalized surface point -> N-1 blending
    coefficients, so coefficients vary smoothly over the surface.

The trained face model itself stays frozen: its neutral surface, jaw
weights, and per-shape offset basis are sampled once at the target points.
Targets are either 3D point correspondences or 2D pixel landmarks with a
known camera. A fit can be played back on any model with the same shape
count, which is all retargeting is.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from . import diffnet as dn
from .geometry import TriMesh, save_mesh
from .model import AimModel, eval_anatomy, expression_offsets, skinning_weights

FIT_KIND = "aimface-fit"
TARGETS_KIND = "aimface-targets"

# Translation outputs of the transform net are damped by this factor (in
# normalized units) so early iterations stay near the identity.
TRANSLATION_DAMPING = 0.1


# ------------------------------------------------------------------ camera

@dataclass
class Camera:
    """Pinhole camera: upper-triangular intrinsics and a world->camera rigid."""

    intrinsics: np.ndarray   # (3, 3)
    rotation: np.ndarray     # (3, 3) world->camera
    translation: np.ndarray  # (3,)

    def __post_init__(self):
        self.intrinsics = np.asarray(self.intrinsics, dtype=np.float64)
        self.rotation = np.asarray(self.rotation, dtype=np.float64)
        self.translation = np.asarray(self.translation, dtype=np.float64).reshape(3)
        k = self.intrinsics
        if k.shape != (3, 3) or self.rotation.shape != (3, 3):
            raise ValueError("intrinsics and rotation must be 3x3")
        if not np.allclose(k, np.triu(k)):
            raise ValueError("intrinsics must be upper-triangular")
        if k[0, 0] <= 0.0 or k[1, 1] <= 0.0:
            raise ValueError("focal lengths must be positive")
        if k[2, 2] != 1.0:
            raise ValueError("intrinsics[2,2] must be 1")

    def _pixel_map(self) -> tuple[np.ndarray, np.ndarray]:
        k = self.intrinsics
        return (np.array([[k[0, 0], k[0, 1]], [0.0, k[1, 1]]]),
                np.array([k[0, 2], k[1, 2]]))

    def project(self, points: np.ndarray) -> np.ndarray:
        """Perspective-divide then intrinsics; rejects points behind the camera."""
        pts = np.asarray(points, dtype=np.float64)
        squeeze = pts.ndim == 1
        pts = pts.reshape(-1, 3)
        cam = pts @ self.rotation.T + self.translation
        z = cam[:, 2]
        if np.any(z <= 1e-6):
            raise ValueError("point at or behind camera plane")
        ab, offset = self._pixel_map()
        pix = (cam[:, :2] / z[:, None]) @ ab.T + offset
        return pix[0] if squeeze else pix

    def to_dict(self) -> dict:
        return {"intrinsics": self.intrinsics.tolist(),
                "rotation": self.rotation.tolist(),
                "translation": self.translation.tolist()}

    @staticmethod
    def from_dict(d: dict) -> "Camera":
        return Camera(intrinsics=np.asarray(d["intrinsics"]),
                      rotation=np.asarray(d["rotation"]),
                      translation=np.asarray(d["translation"]))


IDENTITY_CAMERA_ROTATION = np.eye(3)


# ------------------------------------------------------------------ targets

@dataclass
class FrameTarget:
    """Targets for one frame: template-vertex correspondences plus positions."""

    mode: str                       # "3d" | "2d"
    indices: np.ndarray             # (P,) template vertex indices
    targets: np.ndarray             # (P, 3) world points or (P, 2) pixels
    camera: Camera | None = None    # required in 2d mode

    def __post_init__(self):
        if self.mode not in ("3d", "2d"):
            raise ValueError(f"mode must be '3d' or '2d', got {self.mode!r}")
        self.indices = np.asarray(self.indices, dtype=np.int64).reshape(-1)
        if len(np.unique(self.indices)) != len(self.indices):
            raise ValueError("duplicate target vertex index")
        if self.indices.size == 0:
            raise ValueError("frame has no targets")
        self.targets = np.asarray(self.targets, dtype=np.float64)
        want = 3 if self.mode == "3d" else 2
        if self.targets.shape != (len(self.indices), want):
            raise ValueError(f"targets must be ({len(self.indices)}, {want}), "
                             f"got {self.targets.shape}")
        if self.mode == "2d" and self.camera is None:
            raise ValueError("2d targets need a camera")


# ------------------------------------------------------------ configuration

@dataclass
class FitConfig:
    iterations: int = 10_000
    learning_rate: float = 1e-3
    code_dim: int = 32
    hidden_dim: int = 32
    depth: int = 3               # hidden layers -> four linear layers total
    seed: int = 0
    weight_3d: float = 1.0
    weight_2d: float = 0.0
    weight_coeff: float = 0.75
    weight_temporal: float = 0.05
    log_every: int = 100

    def __post_init__(self):
        if self.weight_3d * self.weight_2d != 0.0:
            raise ValueError("exactly one of weight_3d/weight_2d may be active")


# ------------------------------------------------------------------ result

@dataclass
class FitResult:
    mode: str
    frame_indices: list[np.ndarray]      # per frame (P_j,)
    head_transforms: np.ndarray          # (J, 9) world units
    jaw_transforms: np.ndarray           # (J, 9) world units
    coeffs: list[np.ndarray]             # per frame (P_j, N-1)
    codes: np.ndarray                    # (J, f)
    transform_net: dn.MlpParams
    coeff_net: dn.MlpParams
    per_frame_errors: list[dict]
    config: FitConfig
    normalization_half_extent: float
    loss_history: list[dict] = field(default_factory=list)

    @property
    def n_frames(self) -> int:
        return len(self.frame_indices)

    @property
    def n_shapes(self) -> int:
        return self.coeff_net.out_dim + 1


def _decode_transform_rows(raw18: np.ndarray, tscale: float) -> tuple[np.ndarray, np.ndarray]:
    """Rows of transform-net output -> world (J, 9) head and jaw transforms."""
    raw18 = np.atleast_2d(raw18)
    head = np.concatenate([dn.ROT6D_IDENTITY + raw18[:, 0:6],
                           tscale * raw18[:, 6:9]], axis=1)
    jaw = np.concatenate([dn.ROT6D_IDENTITY + raw18[:, 9:15],
                          tscale * raw18[:, 15:18]], axis=1)
    return head, jaw


# ----------------------------------------------------------------- solving

@dataclass
class _FitProblem:
    frames: list[FrameTarget]
    union: np.ndarray          # sorted unique vertex indices across frames
    rows: list[np.ndarray]     # per frame, rows into the union arrays
    spans: list[tuple[int, int]]  # per frame, contiguous span in stacked rows
    skin0: np.ndarray          # (U, 3) frozen neutral surface
    weight: np.ndarray         # (U, 1) frozen jaw weights
    basis: np.ndarray          # (U, N-1, 3) frozen offset basis
    c_norm: np.ndarray         # (U, 3) normalized query coords
    stacked_rows: np.ndarray   # (sum P_j,) rows into union, frames concatenated
    frame_of_row: np.ndarray   # (sum P_j,) frame index per stacked row


def _build_problem(model: AimModel, frames: list[FrameTarget]) -> _FitProblem:
    if not frames:
        raise ValueError("empty target sequence")
    modes = {f.mode for f in frames}
    if len(modes) != 1:
        raise ValueError("mixed-mode frames rejected: all frames must share a mode")
    n_verts = model.template.n_vertices
    for j, f in enumerate(frames):
        if f.indices.min() < 0 or f.indices.max() >= n_verts:
            raise ValueError(f"frame {j}: target vertex index out of range")
    union = np.unique(np.concatenate([f.indices for f in frames]))
    pts = model.template.vertices[union]
    sample = eval_anatomy(model, pts)
    problem_rows = [np.searchsorted(union, f.indices) for f in frames]
    spans, start = [], 0
    for f in frames:
        spans.append((start, start + len(f.indices)))
        start += len(f.indices)
    stacked = np.concatenate(problem_rows)
    frame_of_row = np.concatenate([np.full(len(f.indices), j, dtype=np.int64)
                                   for j, f in enumerate(frames)])
    return _FitProblem(
        frames=frames, union=union, rows=problem_rows, spans=spans,
        skin0=sample.skin_points,
        weight=skinning_weights(model, pts).reshape(-1, 1),
        basis=expression_offsets(model, pts),
        c_norm=model.norm.to_unit(pts),
        stacked_rows=stacked, frame_of_row=frame_of_row)


def _project_graph(world, camera: Camera, tape: dn.Tape):
    cam = dn.add(dn.matmul(world, camera.rotation.T), camera.translation)
    z = dn.slice_cols(cam, 2, 3)
    if np.any(z.data <= 1e-6):
        raise ValueError("target point at or behind camera plane during fitting")
    ab, offset = camera._pixel_map()
    return dn.add(dn.matmul(dn.div(dn.slice_cols(cam, 0, 2), z), ab.T), offset)


def fit_sequence(model: AimModel, frames: list[FrameTarget],
                 config: FitConfig | None = None,
                 log_path: str | Path | None = None) -> FitResult:
    """Jointly optimize per-frame codes and the two decoding nets with Adam."""
    cfg = replace(config) if config is not None else FitConfig()
    problem = _build_problem(model, frames)
    mode = frames[0].mode
    active = cfg.weight_3d if mode == "3d" else cfg.weight_2d
    if active == 0.0:
        raise ValueError(f"{mode} targets but the {mode} loss weight is zero")

    n_frames = len(frames)
    n_coeff = model.n_shapes - 1
    h = model.norm.half_extent
    tscale = TRANSLATION_DAMPING * h
    seeds = np.random.SeedSequence(cfg.seed).generate_state(2)
    transform_net = dn.mlp_init(cfg.code_dim, cfg.hidden_dim, cfg.depth, 18,
                                "gelu", int(seeds[0]))
    coeff_net = dn.mlp_init(cfg.code_dim + 3, cfg.hidden_dim, cfg.depth,
                            n_coeff, "gelu", int(seeds[1]))
    codes = np.zeros((n_frames, cfg.code_dim))

    params = [codes, *transform_net.flat_arrays(), *coeff_net.flat_arrays()]
    opt = dn.adam_init(params, cfg.learning_rate)
    coord_rows = problem.c_norm[problem.stacked_rows]
    full_basis = problem.basis[problem.stacked_rows]
    history: list[dict] = []

    for it in range(cfg.iterations):
        tape = dn.Tape()
        codes_var = dn.leaf(codes, tape)
        t_layers = dn.wrap_layers(transform_net)
        w_layers = dn.wrap_layers(coeff_net)
        t_out = dn.mlp_forward(transform_net, codes_var, tape, t_layers)
        w_in = dn.concat([dn.gather_rows(codes_var, problem.frame_of_row),
                          coord_rows], axis=-1)
        w_all = dn.mlp_forward(coeff_net, w_in, tape, w_layers)
        off_all = dn.blend_basis(w_all, full_basis)

        data_acc = wreg_acc = None
        for j, frame in enumerate(frames):
            lo, hi = problem.spans[j]
            span = np.arange(lo, hi)
            row18 = dn.reshape(dn.gather_rows(t_out, np.array([j])), (18,))
            head6 = dn.add(dn.slice_cols(row18, 0, 6), dn.ROT6D_IDENTITY)
            head_t = dn.scale(dn.slice_cols(row18, 6, 9), tscale)
            jaw6 = dn.add(dn.slice_cols(row18, 9, 15), dn.ROT6D_IDENTITY)
            jaw_t = dn.scale(dn.slice_cols(row18, 15, 18), tscale)
            head_rot = dn.rot6d_transpose_graph(head6, tape)
            jaw_rot = dn.rot6d_transpose_graph(jaw6, tape)
            s0 = problem.skin0[problem.rows[j]]
            kj = problem.weight[problem.rows[j]]
            moved = dn.add(dn.matmul(s0, jaw_rot), jaw_t)
            skinned = dn.add(s0, dn.mul(kj, dn.sub(moved, s0)))
            posed = dn.add(skinned, dn.gather_rows(off_all, span))
            world = dn.add(dn.matmul(posed, head_rot), head_t)
            if mode == "3d":
                term = dn.mean_sq(dn.sub(world, frame.targets))
            else:
                term = dn.mean_sq(dn.sub(
                    _project_graph(world, frame.camera, tape), frame.targets))
            wreg = dn.mean_sq(dn.gather_rows(w_all, span))
            data_acc = term if data_acc is None else dn.add(data_acc, term)
            wreg_acc = wreg if wreg_acc is None else dn.add(wreg_acc, wreg)

        total = dn.add(dn.scale(data_acc, active / n_frames),
                       dn.scale(wreg_acc, cfg.weight_coeff / n_frames))
        temporal_value = 0.0
        if n_frames > 1:
            rows = np.arange(n_frames)
            dz = dn.sub(dn.gather_rows(codes_var, rows[1:]),
                        dn.gather_rows(codes_var, rows[:-1]))
            temporal = dn.mean_sq(dz)
            temporal_value = float(temporal.data)
            total = dn.add(total, dn.scale(temporal, cfg.weight_temporal))

        dn.backward(tape, total)
        grads = [dn.grad_of(codes_var)]
        for w_var, b_var in (*t_layers, *w_layers):
            grads.append(dn.grad_of(w_var))
            grads.append(dn.grad_of(b_var))
        dn.adam_step(opt, params, grads)

        if it % cfg.log_every == 0 or it == cfg.iterations - 1:
            history.append({
                "iteration": it,
                "data": float(data_acc.data) * active / n_frames,
                "coeff_reg": float(wreg_acc.data) * cfg.weight_coeff / n_frames,
                "temporal": temporal_value * cfg.weight_temporal,
                "total": float(total.data),
            })

    # decode the final state with plain numpy
    t_final = dn.mlp_forward(transform_net, codes)
    head9, jaw9 = _decode_transform_rows(t_final, tscale)
    coeffs, errors = [], []
    for j, frame in enumerate(frames):
        rows_j = problem.rows[j]
        w_in = np.concatenate([np.broadcast_to(codes[j], (len(rows_j), cfg.code_dim)),
                               problem.c_norm[rows_j]], axis=1)
        w = dn.mlp_forward(coeff_net, w_in)
        coeffs.append(w)
        s0 = problem.skin0[rows_j]
        world = dn.apply_transform9(
            head9[j],
            dn.lbs_points(s0, jaw9[j], problem.weight[rows_j][:, 0])
            + np.einsum("mk,mkc->mc", w, problem.basis[rows_j]))
        if mode == "3d":
            err = np.linalg.norm(world - frame.targets, axis=1)
        else:
            err = np.linalg.norm(frame.camera.project(world) - frame.targets,
                                 axis=1)
        errors.append({"mean": float(err.mean()), "max": float(err.max())})

    if log_path is not None:
        _write_fit_log(log_path, history)
    return FitResult(mode=mode,
                     frame_indices=[f.indices.copy() for f in frames],
                     head_transforms=head9, jaw_transforms=jaw9,
                     coeffs=coeffs, codes=codes,
                     transform_net=transform_net, coeff_net=coeff_net,
                     per_frame_errors=errors, config=cfg,
                     normalization_half_extent=h,
                     loss_history=history)


def _write_fit_log(path: str | Path, rows: list[dict]) -> None:
    import csv
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=["iteration", "data",
                                                "coeff_reg", "temporal", "total"])
        writer.writeheader()
        writer.writerows(rows)


MIN_LANDMARKS = 9


def fit_sparse(model: AimModel, frames: list[FrameTarget],
               config: FitConfig | None = None,
               log_path: str | Path | None = None) -> FitResult:
    """Same solver as :func:`fit_sequence`, for sparse landmark subsets."""
    for j, frame in enumerate(frames):
        if len(frame.indices) < MIN_LANDMARKS:
            raise ValueError(f"frame {j} has {len(frame.indices)} landmarks; "
                             f"at least {MIN_LANDMARKS} are required")
    return fit_sequence(model, frames, config, log_path)


# -------------------------------------------------------------- playback

@dataclass
class RetargetFrame:
    """One played-back frame, split into its rigid and non-rigid parts.

    ``full.vertices == apply(head, jaw_component + expression_offsets)``
    holds exactly: that is how the full surface is computed.
    """

    full: TriMesh
    jaw_only: TriMesh              # head ∘ jaw-skinned neutral, no offsets
    expression_only: TriMesh       # neutral + offsets, no rigid motion
    jaw_component: np.ndarray      # (V, 3) jaw-skinned neutral, pre-head
    expression_offsets: np.ndarray  # (V, 3)
    head_transform: np.ndarray     # (9,)
    jaw_transform: np.ndarray      # (9,)
    coeffs: np.ndarray             # (V, N-1)


def _coeffs_at(fit: FitResult, code: np.ndarray, c_norm: np.ndarray) -> np.ndarray:
    w_in = np.concatenate([np.broadcast_to(code, (len(c_norm), len(code))),
                           c_norm], axis=1)
    return dn.mlp_forward(fit.coeff_net, w_in)


def retarget(source_fit: FitResult, target_model: AimModel) -> list[RetargetFrame]:
    """Play a fitted performance back on another model of the same shape count."""
    if source_fit.n_shapes != target_model.n_shapes:
        raise ValueError(
            f"shape count mismatch: fit drives {source_fit.n_shapes} shapes, "
            f"model has {target_model.n_shapes}")
    tpl = target_model.template
    sample = eval_anatomy(target_model, tpl.vertices)
    weight = skinning_weights(target_model, tpl.vertices)
    basis = expression_offsets(target_model, tpl.vertices)
    c_norm = target_model.norm.to_unit(tpl.vertices)
    frames = []
    for j in range(source_fit.n_frames):
        head9 = source_fit.head_transforms[j]
        jaw9 = source_fit.jaw_transforms[j]
        w = _coeffs_at(source_fit, source_fit.codes[j], c_norm)
        jaw_component = dn.lbs_points(sample.skin_points, jaw9, weight)
        offsets = np.einsum("mk,mkc->mc", w, basis)
        full = dn.apply_transform9(head9, jaw_component + offsets)
        frames.append(RetargetFrame(
            full=TriMesh(vertices=full, faces=tpl.faces.copy()),
            jaw_only=TriMesh(vertices=dn.apply_transform9(head9, jaw_component),
                             faces=tpl.faces.copy()),
            expression_only=TriMesh(vertices=sample.skin_points + offsets,
                                    faces=tpl.faces.copy()),
            jaw_component=jaw_component,
            expression_offsets=offsets,
            head_transform=head9.copy(),
            jaw_transform=jaw9.copy(),
            coeffs=w))
    return frames


def coefficient_edge_spread(fit: FitResult, model: AimModel,
                            frame_index: int) -> float:
    """Largest per-edge coefficient jump on the template for one frame."""
    c_norm = model.norm.to_unit(model.template.vertices)
    w = _coeffs_at(fit, fit.codes[frame_index], c_norm)
    faces = model.template.faces
    edges = np.unique(np.sort(np.concatenate(
        [faces[:, [0, 1]], faces[:, [1, 2]], faces[:, [2, 0]]]), axis=1), axis=0)
    return float(np.abs(w[edges[:, 0]] - w[edges[:, 1]]).max())


# ---------------------------------------------------------------- file IO

def save_targets(path: str | Path, frames: list[FrameTarget]) -> None:
    doc = {"kind": TARGETS_KIND, "frames": []}
    for f in frames:
        entry = {"mode": f.mode,
                 "entries": [{"c_index": int(i), "target": t.tolist()}
                             for i, t in zip(f.indices, f.targets)]}
        if f.camera is not None:
            entry["camera"] = f.camera.to_dict()
        doc["frames"].append(entry)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(doc, indent=1))


def load_targets(path: str | Path) -> list[FrameTarget]:
    doc = json.loads(Path(path).read_text())
    if doc.get("kind") != TARGETS_KIND:
        raise ValueError(f"{path}: not a fitting-targets file")
    frames = []
    for entry in doc["frames"]:
        frames.append(FrameTarget(
            mode=entry["mode"],
            indices=np.array([e["c_index"] for e in entry["entries"]]),
            targets=np.array([e["target"] for e in entry["entries"]]),
            camera=(Camera.from_dict(entry["camera"])
                    if "camera" in entry else None)))
    return frames


def save_fit(fit: FitResult, path: str | Path) -> None:
    arrays: dict[str, np.ndarray] = {
        "codes": fit.codes,
        "head_transforms": fit.head_transforms,
        "jaw_transforms": fit.jaw_transforms,
        "frame_lengths": np.array([len(i) for i in fit.frame_indices],
                                  dtype=np.float64),
        "frame_indices": np.concatenate(fit.frame_indices).astype(np.float64),
        "coeffs": np.concatenate(fit.coeffs, axis=0),
        "per_frame_mean": np.array([e["mean"] for e in fit.per_frame_errors]),
        "per_frame_max": np.array([e["max"] for e in fit.per_frame_errors]),
        "half_extent": np.asarray(fit.normalization_half_extent),
    }
    arrays.update(dn.mlp_to_arrays("transform_net", fit.transform_net))
    arrays.update(dn.mlp_to_arrays("coeff_net", fit.coeff_net))
    meta = {"kind": FIT_KIND, "mode": fit.mode,
            "config": asdict(fit.config),
            "nets": {"transform_net": dn.mlp_meta(fit.transform_net),
                     "coeff_net": dn.mlp_meta(fit.coeff_net)},
            "loss_history": fit.loss_history}
    dn.write_arrays(path, arrays, meta)


def load_fit(path: str | Path) -> FitResult:
    arrays, meta = dn.read_arrays(path)
    if meta.get("kind") != FIT_KIND:
        raise ValueError(f"{path}: not a fit container")
    lengths = np.rint(arrays["frame_lengths"]).astype(np.int64)
    splits = np.cumsum(lengths)[:-1]
    all_idx = np.rint(arrays["frame_indices"]).astype(np.int64)
    known = {f.name for f in fields(FitConfig)}
    cfg = FitConfig(**{k: v for k, v in meta["config"].items() if k in known})
    return FitResult(
        mode=meta["mode"],
        frame_indices=[a.copy() for a in np.split(all_idx, splits)],
        head_transforms=arrays["head_transforms"].copy(),
        jaw_transforms=arrays["jaw_transforms"].copy(),
        coeffs=[a.copy() for a in np.split(arrays["coeffs"], splits)],
        codes=arrays["codes"].copy(),
        transform_net=dn.mlp_from_arrays("transform_net", arrays,
                                         meta["nets"]["transform_net"]),
        coeff_net=dn.mlp_from_arrays("coeff_net", arrays,
                                     meta["nets"]["coeff_net"]),
        per_frame_errors=[{"mean": m, "max": x} for m, x in
                          zip(arrays["per_frame_mean"], arrays["per_frame_max"])],
        config=cfg,
        normalization_half_extent=float(arrays["half_extent"]),
        loss_history=list(meta.get("loss_history", [])))


def export_fit(fit: FitResult, model: AimModel, out_dir: str | Path,
               stem: str = "fit") -> dict:
    """Container + manifest + per-frame OBJ playback of the fitted sequence."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    container = out_dir / f"{stem}.json"
    save_fit(fit, container)
    frames = retarget(fit, model)
    obj_names = []
    for j, frame in enumerate(frames):
        name = f"{stem}_frame_{j:04d}.obj"
        save_mesh(frame.full, out_dir / name)
        obj_names.append(name)
    manifest = {"kind": "aimface-fit-export", "fit": container.name,
                "mode": fit.mode, "n_frames": fit.n_frames,
                "frames": obj_names,
                "per_frame_errors": fit.per_frame_errors}
    manifest_path = out_dir / f"{stem}_manifest.json"
    manifest_path.write_text(json.dumps(manifest, indent=1))
    return manifest
