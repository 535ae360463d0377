"""Tests for the coordinate-network face model: evaluation identities,
loss construction against independent numpy recomputation, training
mechanics, thickness editing, and checkpoint round trips."""

import copy
import csv

import numpy as np
import pytest

from aimface import diffnet as dn
from aimface import model as M
from aimface import synth
from aimface.constraints import compute_constraints
from aimface.geometry import SymmetryPlane, TriMesh, reflect_points


@pytest.fixture(scope="module")
def actor():
    return synth.gen_actor(5, synth.GenConfig(verts=400, shapes=5))


@pytest.fixture(scope="module")
def cset(actor):
    return compute_constraints(actor.skin, [actor.skull, actor.mandible],
                               actor.trusted_mask)


@pytest.fixture(scope="module")
def trained(actor, cset):
    cfg = M.TrainConfig(iterations=150, hidden_dim=24, depth=2, seed=11)
    return M.train(actor.blendshapes, actor.skin, cset, actor.forehead_mask,
                   actor.symmetry_plane, cfg)


@pytest.fixture(scope="module")
def init_model(actor):
    """Untrained model (zero iterations): random nets, identity jaws."""
    cfg = M.TrainConfig(iterations=0, hidden_dim=16, depth=2, seed=3)
    return M.train(actor.blendshapes, actor.skin, None, None, None, cfg)


# ------------------------------------------------------------ normalization

def test_normalization_fit_and_round_trip():
    rng = np.random.default_rng(0)
    pts = rng.uniform(-3.0, 9.0, size=(50, 3)) * np.array([1.0, 4.0, 2.0])
    norm = M.Normalization.fit(pts)
    lo, hi = pts.min(0), pts.max(0)
    assert np.allclose(norm.center, 0.5 * (lo + hi))
    assert norm.half_extent == pytest.approx(0.5 * np.max(hi - lo))
    unit = norm.to_unit(pts, clamp=False)
    assert unit.min() >= -1.0 - 1e-12 and unit.max() <= 1.0 + 1e-12
    assert np.allclose(norm.to_world(unit), pts, atol=1e-9)


def test_normalization_clamps_outside_domain():
    norm = M.Normalization(center=np.zeros(3), half_extent=1.0)
    far = np.array([[5.0, -7.0, 0.25]])
    assert np.array_equal(norm.to_unit(far), [[1.0, -1.0, 0.25]])


def test_normalization_rejects_degenerate_input():
    with pytest.raises(ValueError):
        M.Normalization.fit(np.zeros((0, 3)))
    with pytest.raises(ValueError):
        M.Normalization.fit(np.ones((4, 3)))  # zero extent


# --------------------------------------------------------------- evaluation

def test_skin_equals_bone_plus_depth_times_direction_bitwise(trained, actor):
    sample = M.eval_anatomy(trained, actor.skin.vertices)
    recomposed = sample.bone_points + sample.thickness[:, None] * sample.directions
    assert np.array_equal(sample.skin_points, recomposed)
    assert np.allclose(np.linalg.norm(sample.directions, axis=1), 1.0, atol=1e-12)
    assert np.all(sample.thickness >= 0.0)


def test_zeroed_thickness_head_collapses_skin_onto_bone(init_model, actor):
    model = copy.deepcopy(init_model)
    w, b = model.thickness_net.layers[-1]
    w[:] = 0.0
    b[:] = -1e4  # softplus underflows to exactly zero
    sample = M.eval_anatomy(model, actor.skin.vertices)
    assert np.all(sample.thickness == 0.0)
    assert np.array_equal(sample.skin_points, sample.bone_points)


def test_forced_heads_reproduce_literal_composition(init_model):
    # bone (1,0,0), depth 2, direction (0,1,0) => skin (1,2,0)
    model = copy.deepcopy(init_model)
    h = model.norm.half_extent
    for net, target in ((model.anatomy_net, (np.array([1.0, 0, 0]) - model.norm.center) / h),
                        (model.normal_net, np.array([0.0, 1.0, 0.0]))):
        w, b = net.layers[-1]
        w[:] = 0.0
        b[:] = target
    w, b = model.thickness_net.layers[-1]
    w[:] = 0.0
    b[:] = np.log(np.expm1(2.0 / (M.THICKNESS_SCALE * h)))
    sample = M.eval_anatomy(model, np.array([[3.0, -4.0, 5.0]]))
    assert np.allclose(sample.bone_points, [[1.0, 0.0, 0.0]], atol=1e-9)
    assert sample.thickness[0] == pytest.approx(2.0, abs=1e-9)
    assert np.allclose(sample.skin_points, [[1.0, 2.0, 0.0]], atol=1e-9)


def test_skinning_weights_in_unit_interval(trained, actor):
    k = M.skinning_weights(trained, actor.skin.vertices)
    assert k.shape == (actor.skin.n_vertices,)
    assert np.all((k >= 0.0) & (k <= 1.0))


def test_expression_offsets_shape(trained, actor):
    e = M.expression_offsets(trained, actor.skin.vertices)
    assert e.shape == (actor.skin.n_vertices, trained.n_shapes - 1, 3)


def test_eval_points_must_be_m_by_3(trained):
    with pytest.raises(ValueError):
        M.eval_anatomy(trained, np.zeros(3))
    with pytest.raises(ValueError):
        M.skinning_weights(trained, np.zeros((4, 2)))


# ----------------------------------------------------------------- blending

def test_lbs_weight_zero_keeps_points():
    pts = np.array([[1.0, 2.0, 3.0], [-4.0, 0.5, 2.0]])
    t9 = np.concatenate([dn.ROT6D_IDENTITY, [7.0, -1.0, 2.0]])
    assert np.array_equal(M.lbs(pts, t9, np.zeros(2)), pts)


def test_lbs_weight_one_is_the_rigid_transform():
    rng = np.random.default_rng(4)
    pts = rng.standard_normal((5, 3))
    t9 = np.concatenate([rng.standard_normal(6), [0.3, 0.1, -0.2]])
    R, t = dn.decode_transform9(t9)
    assert np.allclose(M.lbs(pts, t9, np.ones(5)), pts @ R.T + t, atol=1e-12)


def test_lbs_half_weight_translation_moves_halfway():
    pts = np.array([[10.0, -2.0, 4.0]])
    t9 = np.concatenate([dn.ROT6D_IDENTITY, [1.0, 0.0, 0.0]])
    assert np.allclose(M.lbs(pts, t9, np.array([0.5])),
                       [[10.5, -2.0, 4.0]], atol=1e-12)


def test_eval_shape_neutral_is_the_anatomy_composition(trained, actor):
    assert np.array_equal(M.eval_shape(trained, 0),
                          M.eval_anatomy(trained, actor.skin.vertices).skin_points)


def test_eval_shape_index_bounds(trained):
    with pytest.raises(IndexError):
        M.eval_shape(trained, -1)
    with pytest.raises(IndexError):
        M.eval_shape(trained, trained.n_shapes)


def test_identity_jaws_and_zero_offsets_reduce_every_shape_to_neutral(init_model):
    model = copy.deepcopy(init_model)
    w, b = model.expression_net.layers[-1]
    w[:] = 0.0
    b[:] = 0.0
    model.jaw_params[:] = dn.TRANSFORM9_IDENTITY
    neutral = M.eval_shape(model, 0)
    for i in range(1, model.n_shapes):
        assert np.array_equal(M.eval_shape(model, i), neutral)


def test_one_hot_coefficients_match_eval_shape(trained):
    n = trained.n_shapes
    for i in (1, n - 1):
        w = np.zeros(n - 1)
        w[i - 1] = 1.0
        posed = M.eval_posed(trained, w, jaw_transform=trained.jaw_transforms[i - 1])
        assert np.array_equal(posed, M.eval_shape(trained, i))


def test_zero_coefficients_identity_transforms_give_neutral(trained):
    out = M.eval_posed(trained, np.zeros(trained.n_shapes - 1),
                       jaw_transform=dn.TRANSFORM9_IDENTITY,
                       head_transform=dn.TRANSFORM9_IDENTITY)
    assert np.array_equal(out, M.eval_shape(trained, 0))


def test_head_transform_translates_rigidly(trained):
    t = np.array([5.0, -3.0, 11.0])
    out = M.eval_posed(trained, np.zeros(trained.n_shapes - 1),
                       head_transform=np.concatenate([dn.ROT6D_IDENTITY, t]))
    assert np.allclose(out, M.eval_shape(trained, 0) + t, atol=1e-12)


def test_eval_posed_accepts_per_point_coefficients(trained, actor):
    v = actor.skin.n_vertices
    w = np.zeros((v, trained.n_shapes - 1))
    w[: v // 2, 0] = 1.0
    out = M.eval_posed(trained, w)
    assert out.shape == (v, 3)
    with pytest.raises(ValueError):
        M.eval_posed(trained, np.zeros(trained.n_shapes + 3))


# --------------------------------------------------------------------- loss

def _full_batch(model, actor, shape_index):
    v = actor.skin.n_vertices
    return M.LossBatch(shape_index=shape_index,
                       vertex_indices=np.arange(v),
                       targets=actor.blendshapes[shape_index])


def test_default_config_matches_published_constants():
    cfg = M.TrainConfig()
    assert cfg.iterations == 10_000
    assert cfg.learning_rate == 2e-3
    assert cfg.weight_shape == 1.0
    assert cfg.weight_bone == 1.0
    assert cfg.weight_thickness == 1.0
    assert cfg.weight_direction == 1.0
    assert cfg.weight_thickness_reg == 7.5e-4
    assert cfg.weight_symmetry == 1e-4
    assert cfg.weight_attach_reg == 1e2
    assert cfg.activation == "sine"
    assert cfg.omega0 == 30.0
    assert cfg.batch_size == 0  # all vertices of the sampled shape


def test_perturbing_one_target_raises_shape_term_by_delta_sq_over_batch(trained, actor):
    v = actor.skin.n_vertices
    targets = M.eval_shape(trained, 0).copy()
    batch = M.LossBatch(0, np.arange(v), targets)
    _, base = M.loss_model(trained, batch)
    assert base["shape"] == 0.0
    delta = 0.37
    targets[5, 1] += delta
    _, bumped = M.loss_model(trained, M.LossBatch(0, np.arange(v), targets))
    expected = trained.config.weight_shape * delta**2 / v
    assert bumped["shape"] == pytest.approx(expected, rel=1e-12)
    for key in ("bone", "thickness", "direction", "thickness_reg",
                "symmetry", "attach_reg"):
        assert bumped[key] == base[key]


def test_loss_terms_match_independent_numpy_recomputation(trained, actor, cset):
    cfg = trained.config
    shape_index = 2
    _, got = M.loss_model(trained, _full_batch(trained, actor, shape_index),
                          constraints=cset, forehead_mask=actor.forehead_mask,
                          symmetry_plane=actor.symmetry_plane)

    pts = actor.skin.vertices
    v = len(pts)
    sample = M.eval_anatomy(trained, pts)
    weight = M.skinning_weights(trained, pts)
    offsets = M.expression_offsets(trained, pts)
    pred = dn.lbs_points(sample.skin_points,
                         trained.jaw_transforms[shape_index - 1], weight)
    pred = pred + offsets[:, shape_index - 1]
    want = {"shape": cfg.weight_shape *
            np.sum((pred - actor.blendshapes[shape_index]) ** 2) / v}
    idx, b_gt, d_gt, n_gt = cset.arrays()
    c = len(idx)
    want["bone"] = cfg.weight_bone * np.sum((sample.bone_points[idx] - b_gt) ** 2) / c
    want["thickness"] = (cfg.weight_thickness *
                         np.sum((sample.thickness[idx] - d_gt) ** 2) / c)
    want["direction"] = (cfg.weight_direction *
                         np.sum((sample.directions[idx] - n_gt) ** 2) / c)
    free = np.setdiff1d(np.arange(v), idx)
    want["thickness_reg"] = (cfg.weight_thickness_reg *
                             np.sum(sample.thickness[free] ** 2) / len(free))
    mirrored = M.eval_anatomy(trained, reflect_points(pts, actor.symmetry_plane))
    want["symmetry"] = (cfg.weight_symmetry * np.sum(
        (mirrored.bone_points -
         reflect_points(sample.bone_points, actor.symmetry_plane)) ** 2) / v)
    fore = np.nonzero(actor.forehead_mask)[0]
    want["attach_reg"] = (cfg.weight_attach_reg *
                          np.sum(weight[fore] ** 2) / len(fore))
    for key, value in want.items():
        assert got[key] == pytest.approx(value, rel=1e-9), key
    assert got["total"] == pytest.approx(sum(want.values()), rel=1e-9)


def test_loss_terms_vanish_without_their_inputs(trained, actor):
    total, got = M.loss_model(trained, _full_batch(trained, actor, 0),
                              constraints=None, forehead_mask=None)
    assert got["bone"] == got["thickness"] == got["direction"] == 0.0
    assert got["attach_reg"] == 0.0
    assert got["symmetry"] > 0.0  # falls back to the model's stored plane
    assert total == got["total"] > 0.0


def test_loss_model_validates_batch(trained, actor):
    v = actor.skin.n_vertices
    with pytest.raises(ValueError):
        M.loss_model(trained, M.LossBatch(0, np.array([3, 2, 1]),
                                          np.zeros((3, 3))))
    with pytest.raises(ValueError):
        M.loss_model(trained, M.LossBatch(0, np.array([0, v]),
                                          np.zeros((2, 3))))
    with pytest.raises(ValueError):
        M.loss_model(trained, M.LossBatch(0, np.arange(4), np.zeros((5, 3))))
    with pytest.raises(IndexError):
        M.loss_model(trained, _full_batch(trained, actor, trained.n_shapes))


def test_locate_maps_constraint_rows_into_subset_batches():
    batch = np.array([2, 5, 7, 11, 40])
    wanted = np.array([1, 5, 11, 39, 41])
    rows, sel = M._locate(batch, wanted)
    assert rows.tolist() == [1, 3]
    assert sel.tolist() == [1, 2]


# ----------------------------------------------------------------- training

def test_training_reduces_loss_and_logs_csv(actor, cset, tmp_path):
    log = tmp_path / "loss.csv"
    cfg = M.TrainConfig(iterations=60, hidden_dim=16, depth=2, seed=2,
                        log_every=20)
    model = M.train(actor.blendshapes, actor.skin, cset, actor.forehead_mask,
                    actor.symmetry_plane, cfg, log_path=log)
    with open(log) as fh:
        rows = list(csv.DictReader(fh))
    assert [int(r["iteration"]) for r in rows] == [0, 20, 40, 59]
    first, last = float(rows[0]["total"]), float(rows[-1]["total"])
    assert last < first
    assert model.final_losses["total"] == pytest.approx(last)
    terms = sum(float(rows[-1][k]) for k in M.LOSS_TERM_NAMES)
    assert terms == pytest.approx(last, rel=1e-9)


def test_training_is_deterministic(actor, cset):
    cfg = M.TrainConfig(iterations=15, hidden_dim=16, depth=2, seed=9)
    a = M.train(actor.blendshapes, actor.skin, cset, actor.forehead_mask,
                actor.symmetry_plane, cfg)
    b = M.train(actor.blendshapes, actor.skin, cset, actor.forehead_mask,
                actor.symmetry_plane, cfg)
    for pa, pb in zip(M._flat_params(a), M._flat_params(b)):
        assert np.array_equal(pa, pb)
    assert a.final_losses == b.final_losses


def test_training_seed_changes_weights(actor):
    base = M.TrainConfig(iterations=5, hidden_dim=16, depth=2, seed=0)
    other = M.TrainConfig(iterations=5, hidden_dim=16, depth=2, seed=1)
    a = M.train(actor.blendshapes, actor.skin, config=base)
    b = M.train(actor.blendshapes, actor.skin, config=other)
    assert not np.array_equal(a.anatomy_net.layers[0][0],
                              b.anatomy_net.layers[0][0])


def test_training_with_vertex_subsampling_runs(actor, cset):
    cfg = M.TrainConfig(iterations=25, hidden_dim=16, depth=2, seed=1,
                        batch_size=64)
    model = M.train(actor.blendshapes, actor.skin, cset, actor.forehead_mask,
                    actor.symmetry_plane, cfg)
    assert np.isfinite(model.final_losses["total"])


def test_training_input_validation(actor):
    with pytest.raises(ValueError):
        M.train(actor.blendshapes[:1], actor.skin)  # fewer than two shapes
    with pytest.raises(ValueError):
        M.train(actor.blendshapes[:, :-2], actor.skin)  # vertex count mismatch
    shifted = actor.blendshapes.copy()
    shifted[0] += 1.0
    with pytest.raises(ValueError):
        M.train(shifted, actor.skin)  # row 0 must be the template
    other = TriMesh(vertices=actor.skin.vertices,
                    faces=actor.skin.faces[::-1].copy())
    meshes = [other] + [TriMesh(actor.blendshapes[i], actor.skin.faces)
                        for i in range(1, 3)]
    with pytest.raises(ValueError):
        M.train(meshes, actor.skin)  # topology mismatch


def test_constraints_from_wrong_mesh_are_rejected(actor, cset):
    small = synth.gen_actor(8, synth.GenConfig(verts=200, shapes=3))
    with pytest.raises(ValueError):
        M.train(small.blendshapes, small.skin, cset)


# ------------------------------------------------------------------ editing

def test_scale_one_reproduces_the_surface_exactly(trained, actor):
    mask = np.zeros(actor.skin.n_vertices, dtype=bool)
    mask[::7] = True
    out = M.manipulate_thickness(trained, mask, 1.0)
    assert np.array_equal(out.vertices, M.eval_shape(trained, 0))
    assert out.same_topology(actor.skin)


def test_scale_two_displaces_masked_vertices_by_thickness(trained, actor):
    sample = M.eval_anatomy(trained, actor.skin.vertices)
    idx = np.array([10, 40, 80])
    out = M.manipulate_thickness(trained, idx, 2.0)
    moved = out.vertices - sample.skin_points
    expected = sample.thickness[idx, None] * sample.directions[idx]
    assert np.allclose(moved[idx], expected, atol=1e-9)
    # one-ring neighbors get exactly half the effect
    from aimface.geometry import vertex_adjacency
    ring = sorted({nb for v in idx for nb in vertex_adjacency(actor.skin)[v]}
                  - set(idx.tolist()))
    expected_ring = 0.5 * sample.thickness[ring, None] * sample.directions[ring]
    assert np.allclose(moved[ring], expected_ring, atol=1e-9)
    # everything else is bitwise untouched
    far = np.setdiff1d(np.arange(actor.skin.n_vertices),
                       np.concatenate([idx, ring]))
    assert np.array_equal(out.vertices[far], sample.skin_points[far])


def test_scale_zero_collapses_masked_vertices_onto_bone(trained, actor):
    sample = M.eval_anatomy(trained, actor.skin.vertices)
    idx = np.array([3, 25])
    out = M.manipulate_thickness(trained, idx, 0.0)
    assert np.array_equal(out.vertices[idx], sample.bone_points[idx])


def test_edited_surface_poses_like_eval_posed(trained, actor):
    w = np.full(trained.n_shapes - 1, 0.3)
    jaw = trained.jaw_transforms[0]
    head = np.concatenate([dn.ROT6D_IDENTITY, [1.0, 2.0, 3.0]])
    out = M.manipulate_thickness(trained, np.array([0]), 1.0,
                                 coeffs=w, jaw_transform=jaw,
                                 head_transform=head)
    assert np.array_equal(out.vertices,
                          M.eval_posed(trained, w, jaw, head))


def test_manipulation_mask_validation(trained, actor):
    with pytest.raises(ValueError):
        M.manipulate_thickness(trained, np.array([actor.skin.n_vertices]), 2.0)
    with pytest.raises(ValueError):
        M.manipulate_thickness(trained, np.zeros(3, dtype=bool), 2.0)


# -------------------------------------------------------------- diagnostics

def test_reconstruction_errors_report(trained, actor):
    report = M.reconstruction_errors(trained, actor.blendshapes)
    n = trained.n_shapes
    assert len(report["per_shape_mean"]) == n
    assert len(report["per_shape_max"]) == n
    assert report["bbox_diagonal"] == pytest.approx(actor.skin.bbox_diagonal())
    assert report["relative_mean"] == pytest.approx(
        report["mean"] / report["bbox_diagonal"])
    assert report["max"] >= report["mean"] > 0.0


def test_bone_symmetry_error_runs_and_requires_a_plane(trained, init_model):
    err = M.bone_symmetry_error(trained)
    assert err >= 0.0
    assert init_model.symmetry_plane is None
    with pytest.raises(ValueError):
        M.bone_symmetry_error(init_model)


# ------------------------------------------------------------- persistence

def test_checkpoint_round_trip_is_exact(trained, actor, tmp_path):
    path = tmp_path / "model.json"
    M.save_model(trained, path)
    loaded = M.load_model(path)
    for pa, pb in zip(M._flat_params(trained), M._flat_params(loaded)):
        assert np.array_equal(pa, pb)
    assert np.array_equal(loaded.template.vertices, trained.template.vertices)
    assert np.array_equal(loaded.template.faces, trained.template.faces)
    assert np.array_equal(loaded.norm.center, trained.norm.center)
    assert loaded.norm.half_extent == trained.norm.half_extent
    assert loaded.config == trained.config
    assert np.array_equal(loaded.symmetry_plane.normal,
                          trained.symmetry_plane.normal)
    assert loaded.symmetry_plane.offset == trained.symmetry_plane.offset
    assert loaded.final_losses == trained.final_losses
    for i in range(trained.n_shapes):
        assert np.array_equal(M.eval_shape(loaded, i), M.eval_shape(trained, i))


def test_checkpoint_bytes_are_deterministic(trained, tmp_path):
    a, b = tmp_path / "one" / "model.json", tmp_path / "two" / "model.json"
    M.save_model(trained, a)
    M.save_model(trained, b)
    assert a.read_bytes() == b.read_bytes()
    assert a.with_suffix(".bin").read_bytes() == b.with_suffix(".bin").read_bytes()


def test_load_rejects_foreign_containers(tmp_path):
    path = tmp_path / "other.json"
    dn.write_arrays(path, {"x": np.zeros(3)}, {"kind": "something-else"})
    with pytest.raises(ValueError):
        M.load_model(path)
