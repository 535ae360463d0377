"""HTTP service tests: metadata, binary evaluation buffers, absolute
thickness edits with per-session revisions, and anatomy field export."""

import hashlib

import numpy as np
import pytest
from fastapi.testclient import TestClient

from aimface import model as M
from aimface import synth
from aimface.service import ANATOMY_LAYOUT, create_app


@pytest.fixture(scope="module")
def actor():
    return synth.gen_actor(11, synth.GenConfig(verts=300, shapes=4))


@pytest.fixture(scope="module")
def model(actor):
    cfg = M.TrainConfig(iterations=120, hidden_dim=16, depth=2, seed=2,
                        log_every=500)
    return M.train(actor.blendshapes, actor.skin,
                   symmetry_plane=actor.symmetry_plane, config=cfg)


@pytest.fixture(scope="module")
def client(model):
    return TestClient(create_app(model=model))


def _verts(resp) -> np.ndarray:
    assert resp.headers["content-type"] == "application/octet-stream"
    n = int(resp.headers["x-vertex-count"])
    arr = np.frombuffer(resp.content, dtype="<f4")
    return arr.reshape(n, 3)


# ----------------------------------------------------------------- metadata

def test_meta_matches_checkpoint(client, model):
    r = client.get("/model/meta")
    assert r.status_code == 200
    meta = r.json()
    assert meta["vertex_count"] == model.template.n_vertices
    assert meta["n_shapes"] == model.n_shapes
    digest = hashlib.sha256(
        np.ascontiguousarray(model.template.faces, dtype="<i8").tobytes()
    ).hexdigest()
    assert meta["face_digest"] == digest
    assert meta["symmetry_plane"]["normal"] == [1.0, 0.0, 0.0]
    lo, hi = meta["bbox"]["min"], meta["bbox"]["max"]
    assert all(a < b for a, b in zip(lo, hi))


def test_meta_is_stable(client):
    assert client.get("/model/meta").json() == client.get("/model/meta").json()


def test_unloaded_service_returns_503():
    bare = TestClient(create_app())
    for call in (lambda c: c.get("/model/meta"), lambda c: c.get("/anatomy"),
                 lambda c: c.post("/evaluate"), lambda c: c.get("/model/faces")):
        r = call(bare)
        assert r.status_code == 503


def test_service_loads_model_from_path(model, tmp_path):
    M.save_model(model, tmp_path / "ckpt.json")
    lazy = TestClient(create_app(model_path=tmp_path / "ckpt.json"))
    meta = lazy.get("/model/meta")
    assert meta.status_code == 200
    assert meta.json()["vertex_count"] == model.template.n_vertices


def test_faces_buffer(client, model):
    r = client.get("/model/faces")
    assert r.status_code == 200
    faces = np.frombuffer(r.content, dtype="<u4").reshape(-1, 3)
    assert int(r.headers["x-face-count"]) == len(model.template.faces)
    assert np.array_equal(faces, model.template.faces.astype(np.uint32))


# --------------------------------------------------------------- evaluation

def test_evaluate_empty_body_is_neutral(client, model):
    r = client.post("/evaluate")
    verts = _verts(r)
    expect = M.eval_shape(model, 0).astype("<f4")
    assert np.array_equal(verts, expect)


def test_evaluate_one_hot_with_stored_jaw_matches_shape(client, model):
    i = 2
    coeffs = [0.0] * (model.n_shapes - 1)
    coeffs[i - 1] = 1.0
    jaw = model.jaw_transforms[i - 1].tolist()
    r = client.post("/evaluate", json={"coeffs": coeffs, "jaw": jaw})
    assert np.array_equal(_verts(r), M.eval_shape(model, i).astype("<f4"))


def test_evaluate_scalar_coeff_broadcast(client, model):
    r = client.post("/evaluate", json={"coeffs": 0.25})
    expect = M.eval_posed(model, np.full(model.n_shapes - 1, 0.25))
    assert np.array_equal(_verts(r), expect.astype("<f4"))


def test_evaluate_identical_payloads_identical_buffers(client):
    body = {"coeffs": 0.4}
    a = client.post("/evaluate", json=body)
    b = client.post("/evaluate", json=body)
    assert a.content == b.content
    # revision still advances per mutation
    assert int(b.headers["x-revision"]) > int(a.headers["x-revision"])


def test_evaluate_bad_coeff_length_mentions_expected(client, model):
    r = client.post("/evaluate", json={"coeffs": [0.1, 0.2]})
    assert r.status_code == 422
    assert str(model.n_shapes - 1) in r.json()["detail"]


def test_evaluate_bad_transform_rejected(client):
    r = client.post("/evaluate", json={"head": [1, 0, 0]})
    assert r.status_code == 422
    assert "9-vector" in r.json()["detail"]


def test_evaluate_non_object_body_rejected(client):
    r = client.post("/evaluate", content=b"[1,2,3]",
                    headers={"content-type": "application/json"})
    assert r.status_code == 422


# ------------------------------------------------------------------- edits

def test_edit_scale_one_equals_evaluate(client):
    base = client.post("/evaluate").content
    r = client.post("/edit/thickness", json={"mask": [1, 2, 3], "scale": 1.0})
    assert r.status_code == 200
    assert r.content == base


def test_edit_scale_zero_lands_on_bone_points(client, model):
    client.post("/evaluate")  # neutral pose
    mask = list(range(0, 40))
    r = client.post("/edit/thickness", json={"mask": mask, "scale": 0.0})
    verts = _verts(r)
    bones = M.eval_anatomy(model, model.template.vertices).bone_points
    assert np.array_equal(verts[mask], bones.astype("<f4")[mask])


def test_edits_are_absolute_not_cumulative(client):
    client.post("/evaluate")
    base = client.post("/edit/thickness", json={"mask": [], "scale": 1.0}).content
    mask = list(range(10, 60))
    client.post("/edit/thickness", json={"mask": mask, "scale": 2.0})
    back = client.post("/edit/thickness", json={"mask": mask, "scale": 1.0})
    assert back.content == base


def test_edit_respects_current_pose(client, model):
    coeffs = [0.5] * (model.n_shapes - 1)
    client.post("/evaluate", json={"coeffs": coeffs})
    mask = list(range(25))
    r = client.post("/edit/thickness", json={"mask": mask, "scale": 1.5})
    expect = M.manipulate_thickness(model, np.array(mask), 1.5,
                                    coeffs=np.array(coeffs))
    assert np.array_equal(_verts(r), expect.vertices.astype("<f4"))
    client.post("/evaluate")  # reset pose for later tests


def test_edit_validation(client, model):
    v = model.template.n_vertices
    assert client.post("/edit/thickness",
                       json={"mask": [0], "scale": -0.5}).status_code == 422
    assert client.post("/edit/thickness",
                       json={"mask": [v + 5], "scale": 1.0}).status_code == 422
    assert client.post("/edit/thickness", json={"mask": [0]}).status_code == 422
    assert client.post("/edit/thickness",
                       json={"mask": "nope", "scale": 1.0}).status_code == 422


def test_revision_strictly_increases_per_session(client):
    r1 = client.post("/evaluate", headers={"x-session-id": "abc"})
    r2 = client.post("/edit/thickness", json={"mask": [0], "scale": 1.2},
                     headers={"x-session-id": "abc"})
    r3 = client.post("/evaluate", headers={"x-session-id": "abc"})
    revs = [int(r.headers["x-revision"]) for r in (r1, r2, r3)]
    assert revs[0] < revs[1] < revs[2]


def test_sessions_are_isolated(client, model):
    a, b = {"x-session-id": "artist-a"}, {"x-session-id": "artist-b"}
    client.post("/evaluate", headers=a)
    client.post("/edit/thickness", json={"mask": list(range(30)), "scale": 3.0},
                headers=a)
    rb = client.post("/evaluate", headers=b)
    assert np.array_equal(_verts(rb), M.eval_shape(model, 0).astype("<f4"))


# ----------------------------------------------------------------- anatomy

def test_anatomy_buffers(client, model):
    r = client.get("/anatomy")
    assert r.status_code == 200
    assert r.headers["x-buffer-layout"] == ANATOMY_LAYOUT
    v = int(r.headers["x-vertex-count"])
    arr = np.frombuffer(r.content, dtype="<f4")
    assert arr.size == v * 8
    bone = arr[: 3 * v].reshape(v, 3)
    thickness = arr[3 * v: 4 * v]
    normal = arr[4 * v: 7 * v].reshape(v, 3)
    skinning = arr[7 * v:]
    assert np.all(thickness >= 0.0)
    assert np.allclose(np.linalg.norm(normal, axis=1), 1.0, atol=1e-5)
    assert np.all((skinning >= 0.0) & (skinning <= 1.0))
    neutral = client.post("/evaluate").content
    rebuilt = bone + thickness[:, None] * normal
    assert np.allclose(rebuilt,
                       np.frombuffer(neutral, dtype="<f4").reshape(v, 3),
                       atol=1e-3)
