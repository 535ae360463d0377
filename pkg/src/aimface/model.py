"""Implicit anatomical face model: coordinate networks over a face template.

A face rig is represented by five small coordinate networks evaluated at
normalized template-surface points, plus one learned rigid transform per
non-neutral blendshape:

  * ``anatomy_net``    surface point -> supporting bone point        (3)
  * ``thickness_net``  surface point -> soft-tissue depth            (1, >= 0)
  * ``normal_net``     surface point -> bone-to-skin unit direction  (3)
  * ``skinning_net``   surface point -> jaw attachment weight        (1, in [0, 1])
  * ``expression_net`` surface point -> stacked per-shape offsets    (3 * (N - 1))

The neutral skin surface is composed as ``bone + depth * direction``; the
code evaluates exactly that expression, so the identity holds to the last
bit.  Shape ``i > 0`` is ``lbs(neutral, jaw_i, weight) + offset_i``.  Training
jointly fits all five networks and the jaw transforms to a registered
blendshape set, with soft anatomical constraints where bone geometry is
known, a mirror-consistency prior on the bone points, a shrink prior on the
thickness where nothing constrains it, and a zero prior on the jaw weight
over the forehead.
"""

from __future__ import annotations

import csv
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from . import diffnet as dn
from .constraints import AnatomyConstraintSet
from .geometry import SymmetryPlane, TriMesh, reflect_points, vertex_adjacency

# The thickness head emits softplus(raw) * THICKNESS_SCALE in normalized
# units; world depth is that times the normalization half-extent. The 0.1
# factor keeps raw head outputs of order one for plausible face depths.
THICKNESS_SCALE = 0.1

NET_NAMES = ("anatomy", "thickness", "normal", "skinning", "expression")
LOSS_TERM_NAMES = (
    "shape", "bone", "thickness", "direction",
    "thickness_reg", "symmetry", "attach_reg",
)

CHECKPOINT_KIND = "aimface-model"


# ------------------------------------------------------------- normalization

@dataclass(frozen=True)
class Normalization:
    """Isotropic map between world coordinates and the [-1, 1]^3 net domain."""

    center: np.ndarray  # (3,)
    half_extent: float

    @staticmethod
    def fit(points: np.ndarray) -> "Normalization":
        pts = np.asarray(points, dtype=np.float64)
        if pts.ndim != 2 or pts.shape[1] != 3 or pts.shape[0] == 0:
            raise ValueError("normalization needs a nonempty (M, 3) point set")
        lo, hi = pts.min(axis=0), pts.max(axis=0)
        half = float(np.max(hi - lo)) * 0.5
        if half <= 0.0:
            raise ValueError("degenerate point set: zero spatial extent")
        return Normalization(center=(lo + hi) * 0.5, half_extent=half)

    def to_unit(self, points: np.ndarray, clamp: bool = True) -> np.ndarray:
        c = (np.asarray(points, dtype=np.float64) - self.center) / self.half_extent
        return np.clip(c, -1.0, 1.0) if clamp else c

    def to_world(self, points: np.ndarray) -> np.ndarray:
        return self.half_extent * np.asarray(points, dtype=np.float64) + self.center


# ------------------------------------------------------------ configuration

@dataclass
class TrainConfig:
    iterations: int = 10_000
    learning_rate: float = 2e-3    # peak rate; see lr_schedule
    lr_schedule: str = "cosine"    # "cosine" decay to zero | "constant"
    hidden_dim: int = 24
    depth: int = 2                 # hidden layers per net
    activation: str = "sine"
    omega0: float = 30.0
    batch_size: int = 0            # 0 = every vertex of the sampled shape
    symmetry_samples: int = 512    # stochastic subsample for the symmetry
                                   # term during training; 0 = whole batch
    seed: int = 0
    # loss weights (applied to per-term means, world units)
    weight_shape: float = 1.0
    weight_bone: float = 1.0
    weight_thickness: float = 1.0
    weight_direction: float = 1.0
    weight_thickness_reg: float = 7.5e-4
    weight_symmetry: float = 1e-4
    weight_attach_reg: float = 1e2
    # ablation switches
    use_anatomy_losses: bool = True
    use_thickness_reg: bool = True
    use_symmetry_loss: bool = True
    use_attach_reg: bool = True
    log_every: int = 100


# ------------------------------------------------------------------- model

@dataclass
class AnatomySample:
    """Per-point anatomy fields; ``skin_points == bone_points + thickness * directions``."""

    bone_points: np.ndarray  # (M, 3) world
    thickness: np.ndarray    # (M,)   world length
    directions: np.ndarray   # (M, 3) unit, bone -> skin
    skin_points: np.ndarray  # (M, 3) world


@dataclass
class AimModel:
    anatomy_net: dn.MlpParams
    thickness_net: dn.MlpParams
    normal_net: dn.MlpParams
    skinning_net: dn.MlpParams
    expression_net: dn.MlpParams
    jaw_params: np.ndarray          # (N-1, 9); translation stored in unit scale
    norm: Normalization
    template: TriMesh
    config: TrainConfig
    symmetry_plane: SymmetryPlane | None = None
    final_losses: dict = field(default_factory=dict)

    @property
    def n_shapes(self) -> int:
        return int(self.jaw_params.shape[0]) + 1

    @property
    def jaw_transforms(self) -> np.ndarray:
        """(N-1, 9) world-unit transforms: 6D rotation seed | translation."""
        t = self.jaw_params.copy()
        t[:, 6:] *= self.norm.half_extent
        return t

    def nets(self) -> tuple[dn.MlpParams, ...]:
        return (self.anatomy_net, self.thickness_net, self.normal_net,
                self.skinning_net, self.expression_net)


def _flat_params(model: AimModel) -> list[np.ndarray]:
    out: list[np.ndarray] = []
    for net in model.nets():
        out.extend(net.flat_arrays())
    out.append(model.jaw_params)
    return out


# -------------------------------------------------------------- evaluation

def _check_points(points: np.ndarray) -> np.ndarray:
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 3:
        raise ValueError(f"points must be (M, 3), got {pts.shape}")
    return pts


def eval_anatomy(model: AimModel, points: np.ndarray) -> AnatomySample:
    """Neutral anatomy fields at world-space surface points (clamped to domain)."""
    c = model.norm.to_unit(_check_points(points))
    bone = model.norm.to_world(dn.mlp_forward(model.anatomy_net, c))
    depth_unit = THICKNESS_SCALE * dn.softplus(dn.mlp_forward(model.thickness_net, c))
    depth = model.norm.half_extent * depth_unit[:, 0]
    direction = dn.normalize_rows(dn.mlp_forward(model.normal_net, c))
    skin = bone + depth[:, None] * direction
    return AnatomySample(bone_points=bone, thickness=depth,
                         directions=direction, skin_points=skin)


def skinning_weights(model: AimModel, points: np.ndarray) -> np.ndarray:
    """Jaw attachment weight in [0, 1] per point, shape (M,)."""
    c = model.norm.to_unit(_check_points(points))
    return dn.sigmoid(dn.mlp_forward(model.skinning_net, c))[:, 0]


def expression_offsets(model: AimModel, points: np.ndarray) -> np.ndarray:
    """Per-shape displacement vectors, world units, shape (M, N-1, 3)."""
    c = model.norm.to_unit(_check_points(points))
    raw = dn.mlp_forward(model.expression_net, c)
    return (model.norm.half_extent * raw).reshape(len(c), model.n_shapes - 1, 3)


# Re-export: per-point blend toward a rigidly moved copy, in delta form
# (exact at the identity transform).
lbs = dn.lbs_points


def eval_shape(model: AimModel, shape_index: int,
               points: np.ndarray | None = None) -> np.ndarray:
    """Reconstruct blendshape ``shape_index`` at the given points (template default)."""
    if not 0 <= shape_index < model.n_shapes:
        raise IndexError(f"shape index {shape_index} out of range [0, {model.n_shapes})")
    pts = model.template.vertices if points is None else points
    sample = eval_anatomy(model, pts)
    if shape_index == 0:
        return sample.skin_points
    weight = skinning_weights(model, pts)
    offset = expression_offsets(model, pts)[:, shape_index - 1]
    posed = dn.lbs_points(sample.skin_points,
                          model.jaw_transforms[shape_index - 1], weight)
    return posed + offset


def eval_posed(model: AimModel, coeffs: np.ndarray,
               jaw_transform: np.ndarray | None = None,
               head_transform: np.ndarray | None = None,
               points: np.ndarray | None = None) -> np.ndarray:
    """Blend expression offsets, articulate the jaw, then move the head.

    ``coeffs`` is (N-1,) shared or (M, N-1) per point; either rigid transform
    may be None (identity). Returns (M, 3) world positions.
    """
    pts = model.template.vertices if points is None else _check_points(points)
    sample = eval_anatomy(model, pts)
    basis = expression_offsets(model, pts)
    w = np.asarray(coeffs, dtype=np.float64)
    if w.ndim == 1:
        w = np.broadcast_to(w, (len(pts), model.n_shapes - 1))
    if w.shape != (len(pts), model.n_shapes - 1):
        raise ValueError(f"coeffs must be ({model.n_shapes - 1},) or "
                         f"(M, {model.n_shapes - 1}), got {np.shape(coeffs)}")
    out = sample.skin_points
    if jaw_transform is not None:
        out = dn.lbs_points(out, jaw_transform, skinning_weights(model, pts))
    out = out + np.einsum("mk,mkc->mc", w, basis)
    if head_transform is not None:
        out = dn.apply_transform9(head_transform, out)
    return out


# ------------------------------------------------------------------- loss

@dataclass
class LossBatch:
    """One training batch: a shape index plus the vertices to score it on."""

    shape_index: int
    vertex_indices: np.ndarray  # sorted (M,) indices into the template
    targets: np.ndarray         # (M, 3) world positions of that shape there


@dataclass
class _LossContext:
    cfg: TrainConfig
    c_unit: np.ndarray                 # (V, 3) normalized template coords
    c_unit_mirror: np.ndarray | None   # same, for mirrored template points
    plane_normal: np.ndarray | None
    plane_offset: float
    cons_idx: np.ndarray | None        # sorted (C,)
    cons_bone: np.ndarray | None       # (C, 3)
    cons_thickness: np.ndarray | None  # (C, 1)
    cons_direction: np.ndarray | None  # (C, 3)
    forehead_idx: np.ndarray | None    # sorted (F,)


def _as_vertex_indices(mask, n_vertices: int) -> np.ndarray:
    m = np.asarray(mask)
    if m.dtype == bool:
        if m.shape != (n_vertices,):
            raise ValueError(f"boolean mask must be ({n_vertices},), got {m.shape}")
        return np.nonzero(m)[0]
    idx = np.unique(m.astype(np.int64).reshape(-1))
    if idx.size and (idx[0] < 0 or idx[-1] >= n_vertices):
        raise ValueError("vertex index out of range")
    return idx


def _locate(batch_idx: np.ndarray, wanted: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Rows of ``wanted`` inside sorted ``batch_idx``: (batch rows, wanted rows)."""
    pos = np.searchsorted(batch_idx, wanted)
    inside = pos < len(batch_idx)
    hit = inside.copy()
    hit[inside] = batch_idx[pos[inside]] == wanted[inside]
    return pos[hit].astype(np.int64), np.nonzero(hit)[0]


def _make_context(model: AimModel, constraints: AnatomyConstraintSet | None,
                  forehead_mask, symmetry_plane: SymmetryPlane | None,
                  cfg: TrainConfig) -> _LossContext:
    verts = model.template.vertices
    c_unit = model.norm.to_unit(verts)
    c_mirror = plane_n = None
    plane_off = 0.0
    if symmetry_plane is not None:
        c_mirror = model.norm.to_unit(reflect_points(verts, symmetry_plane))
        plane_n = symmetry_plane.normal
        plane_off = symmetry_plane.offset
    cons_idx = cons_b = cons_d = cons_n = None
    if constraints is not None:
        if constraints.n_vertices != model.template.n_vertices:
            raise ValueError("constraint set was cast on a different vertex count")
        cons_idx, cons_b, d, cons_n = constraints.arrays()
        cons_d = d.reshape(-1, 1)
    forehead_idx = None
    if forehead_mask is not None:
        forehead_idx = _as_vertex_indices(forehead_mask, model.template.n_vertices)
    return _LossContext(cfg=cfg, c_unit=c_unit, c_unit_mirror=c_mirror,
                        plane_normal=plane_n, plane_offset=plane_off,
                        cons_idx=cons_idx, cons_bone=cons_b,
                        cons_thickness=cons_d, cons_direction=cons_n,
                        forehead_idx=forehead_idx)


def _loss_terms(model: AimModel, ctx: _LossContext, tape: dn.Tape,
                wrapped: dict, jaw_var, shape_index: int,
                vert_idx: np.ndarray, targets: np.ndarray,
                sym_rows: np.ndarray | None = None):
    """Build the weighted loss graph for one batch; returns (total Var, floats).

    ``sym_rows`` optionally restricts the symmetry term to a subset of batch
    rows (the trainer subsamples it stochastically); None scores every row.
    """
    cfg = ctx.cfg
    h = model.norm.half_extent
    cb = ctx.c_unit[vert_idx]

    bone = dn.add(dn.scale(
        dn.mlp_forward(model.anatomy_net, cb, tape, wrapped["anatomy"]), h),
        model.norm.center)
    depth = dn.scale(dn.scale(dn.softplus(
        dn.mlp_forward(model.thickness_net, cb, tape, wrapped["thickness"])),
        THICKNESS_SCALE), h)
    direction = dn.normalize_rows(
        dn.mlp_forward(model.normal_net, cb, tape, wrapped["normal"]))
    skin = dn.add(bone, dn.mul(depth, direction))
    attach = dn.sigmoid(
        dn.mlp_forward(model.skinning_net, cb, tape, wrapped["skinning"]))

    if shape_index > 0:
        offsets_all = dn.mlp_forward(model.expression_net, cb, tape,
                                     wrapped["expression"])
        offset = dn.scale(dn.slice_cols(offsets_all, 3 * (shape_index - 1),
                                        3 * shape_index), h)
        row = dn.reshape(dn.gather_rows(jaw_var, np.array([shape_index - 1])), (9,))
        rot_t = dn.rot6d_transpose_graph(dn.slice_cols(row, 0, 6), tape)
        trans = dn.scale(dn.slice_cols(row, 6, 9), h)
        moved = dn.add(dn.matmul(skin, rot_t), trans)
        pred = dn.add(dn.add(skin, dn.mul(attach, dn.sub(moved, skin))), offset)
    else:
        pred = skin

    terms: dict[str, dn.Var] = {}
    terms["shape"] = dn.scale(dn.mean_sq(dn.sub(pred, targets)), cfg.weight_shape)

    rows_c = None
    if ctx.cons_idx is not None:
        rows_c, sel_c = _locate(vert_idx, ctx.cons_idx)
        if cfg.use_anatomy_losses and rows_c.size:
            terms["bone"] = dn.scale(dn.mean_sq(dn.sub(
                dn.gather_rows(bone, rows_c), ctx.cons_bone[sel_c])),
                cfg.weight_bone)
            terms["thickness"] = dn.scale(dn.mean_sq(dn.sub(
                dn.gather_rows(depth, rows_c), ctx.cons_thickness[sel_c])),
                cfg.weight_thickness)
            terms["direction"] = dn.scale(dn.mean_sq(dn.sub(
                dn.gather_rows(direction, rows_c), ctx.cons_direction[sel_c])),
                cfg.weight_direction)

    if cfg.use_thickness_reg:
        if rows_c is not None and rows_c.size:
            free = np.ones(len(vert_idx), dtype=bool)
            free[rows_c] = False
            free_rows = np.nonzero(free)[0]
        else:
            free_rows = np.arange(len(vert_idx))
        if free_rows.size:
            terms["thickness_reg"] = dn.scale(
                dn.mean_sq(dn.gather_rows(depth, free_rows)),
                cfg.weight_thickness_reg)

    if cfg.use_symmetry_loss and ctx.c_unit_mirror is not None:
        mirror_coords = ctx.c_unit_mirror[vert_idx]
        bone_sym = bone
        if sym_rows is not None and sym_rows.size < len(vert_idx):
            mirror_coords = mirror_coords[sym_rows]
            bone_sym = dn.gather_rows(bone, sym_rows)
        bone_at_mirror = dn.add(dn.scale(
            dn.mlp_forward(model.anatomy_net, mirror_coords,
                           tape, wrapped["anatomy"]), h), model.norm.center)
        side = dn.sub(dn.dot_rows(bone_sym, ctx.plane_normal), ctx.plane_offset)
        bone_reflected = dn.sub(bone_sym, dn.mul(dn.scale(side, 2.0), ctx.plane_normal))
        terms["symmetry"] = dn.scale(
            dn.mean_sq(dn.sub(bone_at_mirror, bone_reflected)),
            cfg.weight_symmetry)

    if cfg.use_attach_reg and ctx.forehead_idx is not None:
        rows_f, _ = _locate(vert_idx, ctx.forehead_idx)
        if rows_f.size:
            terms["attach_reg"] = dn.scale(
                dn.mean_sq(dn.gather_rows(attach, rows_f)),
                cfg.weight_attach_reg)

    total = None
    for term in terms.values():
        total = term if total is None else dn.add(total, term)
    breakdown = {name: float(terms[name].data) if name in terms else 0.0
                 for name in LOSS_TERM_NAMES}
    breakdown["total"] = float(total.data)
    return total, breakdown


def loss_model(model: AimModel, batch: LossBatch,
               constraints: AnatomyConstraintSet | None = None,
               forehead_mask=None, symmetry_plane: SymmetryPlane | None = None,
               config: TrainConfig | None = None) -> tuple[float, dict]:
    """Weighted training loss of one batch; returns (total, per-term floats)."""
    cfg = config if config is not None else model.config
    if not 0 <= batch.shape_index < model.n_shapes:
        raise IndexError(f"shape index {batch.shape_index} out of range")
    vert_idx = np.asarray(batch.vertex_indices, dtype=np.int64)
    if np.any(np.diff(vert_idx) <= 0):
        raise ValueError("batch vertex indices must be strictly increasing")
    if vert_idx.size and (vert_idx[0] < 0 or vert_idx[-1] >= model.template.n_vertices):
        raise ValueError("batch vertex index out of range")
    targets = np.asarray(batch.targets, dtype=np.float64)
    if targets.shape != (len(vert_idx), 3):
        raise ValueError(f"targets must be ({len(vert_idx)}, 3), got {targets.shape}")
    ctx = _make_context(model, constraints, forehead_mask,
                        symmetry_plane if symmetry_plane is not None
                        else model.symmetry_plane, cfg)
    tape = dn.Tape()
    wrapped = {name: dn.wrap_layers(net)
               for name, net in zip(NET_NAMES, model.nets())}
    jaw_var = dn.leaf(model.jaw_params, tape)
    total, breakdown = _loss_terms(model, ctx, tape, wrapped, jaw_var,
                                   batch.shape_index, vert_idx, targets)
    return breakdown["total"], breakdown


# ---------------------------------------------------------------- training

def _as_shape_stack(blendshapes, template: TriMesh) -> np.ndarray:
    """Normalize blendshape input to an (N, V, 3) array; row 0 is the template."""
    if isinstance(blendshapes, np.ndarray):
        shapes = np.asarray(blendshapes, dtype=np.float64)
    else:
        rows = []
        for i, m in enumerate(blendshapes):
            if isinstance(m, TriMesh):
                if not m.same_topology(template):
                    raise ValueError(f"blendshape {i} topology differs from the template")
                rows.append(m.vertices)
            else:
                rows.append(np.asarray(m, dtype=np.float64))
        shapes = np.stack(rows, axis=0)
    if shapes.ndim != 3 or shapes.shape[2] != 3:
        raise ValueError(f"blendshapes must stack to (N, V, 3), got {shapes.shape}")
    if shapes.shape[1] != template.n_vertices:
        raise ValueError(f"blendshapes have {shapes.shape[1]} vertices, "
                         f"template has {template.n_vertices}")
    if not np.allclose(shapes[0], template.vertices, rtol=0.0, atol=1e-9):
        raise ValueError("blendshape 0 must be the template (neutral) geometry")
    return shapes


def train(blendshapes, template: TriMesh,
          constraints: AnatomyConstraintSet | None = None,
          forehead_mask=None, symmetry_plane: SymmetryPlane | None = None,
          config: TrainConfig | None = None,
          log_path: str | Path | None = None) -> AimModel:
    """Fit the five networks and jaw transforms to a registered blendshape set.

    Each iteration scores one uniformly sampled shape on a vertex batch
    (default: all vertices) and takes one joint Adam step. A per-term loss
    log is written to ``log_path`` as CSV when given.
    """
    cfg = replace(config) if config is not None else TrainConfig()
    shapes = _as_shape_stack(blendshapes, template)
    n_shapes, n_verts = shapes.shape[0], shapes.shape[1]
    if n_shapes < 2:
        raise ValueError("need at least two blendshapes (neutral plus one)")

    seeds = np.random.SeedSequence(cfg.seed).generate_state(6)

    def make_net(out_dim: int, seed) -> dn.MlpParams:
        return dn.mlp_init(3, cfg.hidden_dim, cfg.depth, out_dim,
                           cfg.activation, int(seed), cfg.omega0)

    model = AimModel(
        anatomy_net=make_net(3, seeds[0]),
        thickness_net=make_net(1, seeds[1]),
        normal_net=make_net(3, seeds[2]),
        skinning_net=make_net(1, seeds[3]),
        expression_net=make_net(3 * (n_shapes - 1), seeds[4]),
        jaw_params=np.tile(dn.TRANSFORM9_IDENTITY, (n_shapes - 1, 1)),
        norm=Normalization.fit(template.vertices),
        template=template,
        config=cfg,
        symmetry_plane=symmetry_plane,
    )
    ctx = _make_context(model, constraints, forehead_mask, symmetry_plane, cfg)
    params = _flat_params(model)
    opt = dn.adam_init(params, cfg.learning_rate)
    rng = np.random.Generator(np.random.PCG64(int(seeds[5])))
    all_idx = np.arange(n_verts)
    use_subset = 0 < cfg.batch_size < n_verts

    if cfg.lr_schedule not in ("cosine", "constant"):
        raise ValueError(f"unknown lr_schedule {cfg.lr_schedule!r}")
    sym_active = (cfg.use_symmetry_loss and symmetry_plane is not None
                  and cfg.symmetry_samples > 0)

    log_rows: list[dict] = []
    for it in range(cfg.iterations):
        shape_index = int(rng.integers(n_shapes))
        vert_idx = (np.sort(rng.choice(n_verts, cfg.batch_size, replace=False))
                    if use_subset else all_idx)
        sym_rows = None
        if sym_active and cfg.symmetry_samples < len(vert_idx):
            sym_rows = np.sort(rng.choice(len(vert_idx), cfg.symmetry_samples,
                                          replace=False))
        tape = dn.Tape()
        wrapped = {name: dn.wrap_layers(net)
                   for name, net in zip(NET_NAMES, model.nets())}
        jaw_var = dn.leaf(model.jaw_params, tape)
        total, breakdown = _loss_terms(model, ctx, tape, wrapped, jaw_var,
                                       shape_index, vert_idx,
                                       shapes[shape_index, vert_idx],
                                       sym_rows=sym_rows)
        dn.backward(tape, total)
        grads: list[np.ndarray] = []
        for name in NET_NAMES:
            for w_var, b_var in wrapped[name]:
                grads.append(dn.grad_of(w_var))
                grads.append(dn.grad_of(b_var))
        grads.append(dn.grad_of(jaw_var))
        if cfg.lr_schedule == "cosine":
            opt.lr = cfg.learning_rate * 0.5 * (1.0 + np.cos(np.pi * it / cfg.iterations))
        dn.adam_step(opt, params, grads)
        if it % cfg.log_every == 0 or it == cfg.iterations - 1:
            log_rows.append({"iteration": it, "shape_index": shape_index,
                             **breakdown})

    model.final_losses = dict(log_rows[-1]) if log_rows else {}
    if log_path is not None:
        _write_loss_log(log_path, log_rows)
    return model


def _write_loss_log(path: str | Path, rows: list[dict]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    columns = ["iteration", "shape_index", *LOSS_TERM_NAMES, "total"]
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=columns)
        writer.writeheader()
        for row in rows:
            writer.writerow({k: row.get(k, 0.0) for k in columns})


# ------------------------------------------------------------------ editing

def manipulate_thickness(model: AimModel, vertex_mask, scale_factor: float,
                         coeffs: np.ndarray | None = None,
                         jaw_transform: np.ndarray | None = None,
                         head_transform: np.ndarray | None = None) -> TriMesh:
    """Rescale soft-tissue depth over a vertex region and rebuild the surface.

    Masked vertices get ``scale_factor`` exactly; their one-ring neighbors
    outside the mask get the half-way factor (weight 0.5) so the edit
    feathers out. Optional coefficients and rigid transforms pose the edited
    surface the same way :func:`eval_posed` would.
    """
    tpl = model.template
    idx = _as_vertex_indices(vertex_mask, tpl.n_vertices)
    gain = np.ones(tpl.n_vertices)
    gain[idx] = scale_factor
    in_mask = np.zeros(tpl.n_vertices, dtype=bool)
    in_mask[idx] = True
    adjacency = vertex_adjacency(tpl)
    ring = sorted({nb for v in idx for nb in adjacency[v] if not in_mask[nb]})
    if ring:
        gain[ring] = 1.0 + 0.5 * (scale_factor - 1.0)

    sample = eval_anatomy(model, tpl.vertices)
    scaled_depth = gain * sample.thickness
    out = sample.bone_points + scaled_depth[:, None] * sample.directions
    if jaw_transform is not None:
        out = dn.lbs_points(out, jaw_transform,
                            skinning_weights(model, tpl.vertices))
    if coeffs is not None:
        basis = expression_offsets(model, tpl.vertices)
        w = np.asarray(coeffs, dtype=np.float64)
        if w.ndim == 1:
            w = np.broadcast_to(w, (tpl.n_vertices, model.n_shapes - 1))
        out = out + np.einsum("mk,mkc->mc", w, basis)
    if head_transform is not None:
        out = dn.apply_transform9(head_transform, out)
    return TriMesh(vertices=out, faces=tpl.faces.copy(), name=tpl.name)


# -------------------------------------------------------------- diagnostics

def reconstruction_errors(model: AimModel, blendshapes) -> dict:
    """Per-shape vertex position error of the memorized blendshape set."""
    shapes = _as_shape_stack(blendshapes, model.template)
    per_mean, per_max = [], []
    for i in range(shapes.shape[0]):
        err = np.linalg.norm(eval_shape(model, i) - shapes[i], axis=1)
        per_mean.append(float(err.mean()))
        per_max.append(float(err.max()))
    diag = model.template.bbox_diagonal()
    mean = float(np.mean(per_mean))
    return {"per_shape_mean": per_mean, "per_shape_max": per_max,
            "mean": mean, "max": float(np.max(per_max)),
            "bbox_diagonal": diag, "relative_mean": mean / diag}


def bone_symmetry_error(model: AimModel,
                        symmetry_plane: SymmetryPlane | None = None,
                        points: np.ndarray | None = None) -> float:
    """Mean mirror-consistency error of the bone points, world units."""
    plane = symmetry_plane if symmetry_plane is not None else model.symmetry_plane
    if plane is None:
        raise ValueError("no symmetry plane available")
    pts = model.template.vertices if points is None else _check_points(points)
    bone = eval_anatomy(model, pts).bone_points
    bone_mirror = eval_anatomy(model, reflect_points(pts, plane)).bone_points
    return float(np.linalg.norm(bone_mirror - reflect_points(bone, plane),
                                axis=1).mean())


# ------------------------------------------------------------- persistence

def save_model(model: AimModel, path: str | Path) -> None:
    """Write weights, jaw transforms, normalization, and template to a container."""
    arrays: dict[str, np.ndarray] = {}
    for name, net in zip(NET_NAMES, model.nets()):
        arrays.update(dn.mlp_to_arrays(name, net))
    arrays["jaw_params"] = model.jaw_params
    arrays["norm.center"] = model.norm.center
    arrays["norm.half_extent"] = np.asarray(model.norm.half_extent)
    arrays["template.vertices"] = model.template.vertices
    arrays["template.faces"] = model.template.faces.astype(np.float64)
    meta = {
        "kind": CHECKPOINT_KIND,
        "n_shapes": model.n_shapes,
        "nets": {name: dn.mlp_meta(net)
                 for name, net in zip(NET_NAMES, model.nets())},
        "config": asdict(model.config),
        "symmetry_plane": (None if model.symmetry_plane is None else
                           {"normal": model.symmetry_plane.normal.tolist(),
                            "offset": model.symmetry_plane.offset}),
        "final_losses": model.final_losses,
    }
    dn.write_arrays(path, arrays, meta)


def load_model(path: str | Path) -> AimModel:
    arrays, meta = dn.read_arrays(path)
    if meta.get("kind") != CHECKPOINT_KIND:
        raise ValueError(f"{path}: not a model checkpoint")
    nets = {name: dn.mlp_from_arrays(name, arrays, meta["nets"][name])
            for name in NET_NAMES}
    template = TriMesh(
        vertices=arrays["template.vertices"],
        faces=np.rint(arrays["template.faces"]).astype(np.int64),
    )
    known = {f.name for f in fields(TrainConfig)}
    cfg = TrainConfig(**{k: v for k, v in meta["config"].items() if k in known})
    plane_meta = meta.get("symmetry_plane")
    plane = (None if plane_meta is None else
             SymmetryPlane(normal=np.asarray(plane_meta["normal"]),
                           offset=plane_meta["offset"]))
    return AimModel(
        anatomy_net=nets["anatomy"],
        thickness_net=nets["thickness"],
        normal_net=nets["normal"],
        skinning_net=nets["skinning"],
        expression_net=nets["expression"],
        jaw_params=arrays["jaw_params"].copy(),
        norm=Normalization(center=arrays["norm.center"].copy(),
                           half_extent=float(arrays["norm.half_extent"])),
        template=template,
        config=cfg,
        symmetry_plane=plane,
        final_losses=dict(meta.get("final_losses", {})),
    )
