import numpy as np
import pytest

from aimface import diffnet as dn
from aimface.diffnet import (
    AdamState,
    Tape,
    adam_init,
    adam_step,
    backward,
    decode_transform9,
    decode_transform9_graph,
    grad_of,
    leaf,
    mlp_forward,
    mlp_from_arrays,
    mlp_init,
    mlp_meta,
    mlp_to_arrays,
    read_arrays,
    rot6d_to_matrix,
    rot6d_transpose_graph,
    write_arrays,
    wrap_layers,
)

RNG = np.random.default_rng(2024)


def fd_grad(f, x: np.ndarray, h: float = 1e-6) -> np.ndarray:
    """Central-difference gradient of scalar f at x, one coordinate at a time."""
    x = x.astype(np.float64)
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    while not it.finished:
        i = it.multi_index
        xp = x.copy()
        xm = x.copy()
        xp[i] += h
        xm[i] -= h
        g[i] = (f(xp) - f(xm)) / (2 * h)
        it.iternext()
    return g


def rel_err(a: np.ndarray, b: np.ndarray) -> float:
    denom = max(np.abs(a).max(initial=0.0), np.abs(b).max(initial=0.0), 1e-8)
    return float(np.abs(a - b).max(initial=0.0) / denom)


def check_grad(build, x0: np.ndarray, tol: float = 1e-4, h: float = 1e-6):
    """build(x_var, tape) -> scalar Var; compares tape grad against FD."""
    tape = Tape()
    xv = leaf(x0.copy(), tape)
    out = build(xv, tape)
    assert out.data.ndim == 0
    backward(tape, out)
    got = grad_of(xv)

    def f(x):
        t2 = Tape()
        v = leaf(x, t2)
        return float(build(v, t2).data)

    want = fd_grad(f, x0, h=h)
    assert rel_err(got, want) < tol, f"rel err {rel_err(got, want)}"


# weight vector to turn array-valued outputs into a scalar with full coverage
def proj(shape):
    return RNG.normal(size=shape)


# ------------------------------------------------------- primitive gradients

def test_grad_add_sub_mul_div():
    a0 = RNG.normal(size=(5, 3))
    b0 = RNG.normal(size=(5, 3)) + 3.0
    w = proj((5, 3))

    check_grad(lambda v, t: dn.reduce_sum(dn.mul(dn.add(v, b0), w)), a0)
    check_grad(lambda v, t: dn.reduce_sum(dn.mul(dn.sub(b0, v), w)), a0)
    check_grad(lambda v, t: dn.reduce_sum(dn.mul(dn.mul(v, b0), w)), a0)
    check_grad(lambda v, t: dn.reduce_sum(dn.mul(dn.div(v, b0), w)), a0)
    check_grad(lambda v, t: dn.reduce_sum(dn.mul(dn.div(b0, v), w)), a0 + 5.0)


def test_grad_broadcasting():
    # (5,3) + (3,), (5,3) * (5,1), scalar * array
    a0 = RNG.normal(size=(5, 3))
    row = RNG.normal(size=(3,))
    col = RNG.normal(size=(5, 1))
    w = proj((5, 3))
    check_grad(lambda v, t: dn.reduce_sum(dn.mul(dn.add(v, row), w)), a0)
    check_grad(lambda v, t: dn.reduce_sum(dn.mul(dn.mul(v, col), w)), a0)
    # gradient w.r.t. the broadcast operand collapses correctly
    check_grad(lambda v, t: dn.reduce_sum(dn.mul(dn.add(a0, v), w)), row.copy())
    check_grad(lambda v, t: dn.reduce_sum(dn.mul(dn.mul(a0, v), w)), col.copy())


def test_grad_matmul_and_affine():
    x0 = RNG.normal(size=(4, 6))
    W = RNG.normal(size=(6, 5))
    b = RNG.normal(size=(5,))
    w = proj((4, 5))
    check_grad(lambda v, t: dn.reduce_sum(dn.mul(dn.add(dn.matmul(v, W), b), w)), x0)
    # and w.r.t. the weight matrix
    check_grad(lambda v, t: dn.reduce_sum(dn.mul(dn.add(dn.matmul(x0, v), b), w)), W.copy())
    check_grad(lambda v, t: dn.reduce_sum(dn.mul(dn.add(dn.matmul(x0, W), v), w)), b.copy())


def test_grad_reductions():
    a0 = RNG.normal(size=(7, 2))
    check_grad(lambda v, t: dn.reduce_sum(v), a0)
    check_grad(lambda v, t: dn.reduce_mean(v), a0)
    check_grad(lambda v, t: dn.sqnorm(v), a0)
    check_grad(lambda v, t: dn.mean_sq(v), a0)


def test_grad_activations():
    a0 = RNG.normal(size=(6, 4))
    a0[np.abs(a0) < 0.05] += 0.1  # keep clear of the relu kink
    w = proj((6, 4))
    check_grad(lambda v, t: dn.reduce_sum(dn.mul(dn.sin_wave(v, 30.0), w)), a0, h=1e-7)
    check_grad(lambda v, t: dn.reduce_sum(dn.mul(dn.relu(v), w)), a0)
    check_grad(lambda v, t: dn.reduce_sum(dn.mul(dn.gelu(v), w)), a0)
    check_grad(lambda v, t: dn.reduce_sum(dn.mul(dn.softplus(v), w)), a0)
    check_grad(lambda v, t: dn.reduce_sum(dn.mul(dn.sigmoid(v), w)), a0)


def test_grad_row_geometry():
    a0 = RNG.normal(size=(5, 3)) + np.array([2.0, 0, 0])
    b0 = RNG.normal(size=(5, 3))
    w3 = proj((5, 3))
    w1 = proj((5, 1))
    check_grad(lambda v, t: dn.reduce_sum(dn.mul(dn.normalize_rows(v), w3)), a0)
    check_grad(lambda v, t: dn.reduce_sum(dn.mul(dn.dot_rows(v, b0), w1)), a0)
    check_grad(lambda v, t: dn.reduce_sum(dn.mul(dn.dot_rows(b0, v), w1)), a0)
    check_grad(lambda v, t: dn.reduce_sum(dn.mul(dn.cross_rows(v, b0), w3)), a0)
    check_grad(lambda v, t: dn.reduce_sum(dn.mul(dn.cross_rows(b0, v), w3)), a0)


def test_grad_structural_ops():
    a0 = RNG.normal(size=(6, 4))
    idx = np.array([0, 2, 2, 5])
    wg = proj((4, 4))
    check_grad(lambda v, t: dn.reduce_sum(dn.mul(dn.gather_rows(v, idx), wg)), a0)
    ws = proj((6, 2))
    check_grad(lambda v, t: dn.reduce_sum(dn.mul(dn.slice_cols(v, 1, 3), ws)), a0)
    wc = proj((6, 8))
    check_grad(lambda v, t: dn.reduce_sum(dn.mul(dn.concat([v, v], axis=-1), wc)), a0)
    wr = proj((24,))
    check_grad(lambda v, t: dn.reduce_sum(dn.mul(dn.reshape(v, (24,)), wr)), a0)


def test_grad_stack_and_blend():
    a0 = RNG.normal(size=(3,))
    b0 = RNG.normal(size=(3,))
    w = proj((2, 3))
    check_grad(lambda v, t: dn.reduce_sum(dn.mul(dn.stack_vectors([v, dn.scale(v, 2.0)]), w)), a0)

    wts = RNG.normal(size=(5, 4))
    basis = RNG.normal(size=(5, 4, 3))
    wb = proj((5, 3))
    check_grad(lambda v, t: dn.reduce_sum(dn.mul(dn.blend_basis(v, basis), wb)), wts)
    # value agrees with a direct contraction
    t = Tape()
    v = leaf(wts, t)
    out = dn.blend_basis(v, basis)
    assert np.allclose(out.data, np.einsum("mk,mkc->mc", wts, basis))


def test_grad_rotation_decode():
    r0 = np.array([0.9, 0.2, -0.3, 0.1, 1.1, 0.4])
    w = proj((3, 3))
    check_grad(lambda v, t: dn.reduce_sum(dn.mul(rot6d_transpose_graph(v, t), w)), r0)

    t9 = np.concatenate([r0, [0.5, -1.0, 2.0]])
    wt = proj((3,))

    def f(v, tape):
        rt, tt = decode_transform9_graph(v, tape)
        return dn.add(dn.reduce_sum(dn.mul(rt, w)), dn.reduce_sum(dn.mul(tt, wt)))

    check_grad(f, t9)


def test_grad_mlp_composite_vs_fd():
    """End-to-end check through a small net, w.r.t. inputs and every weight."""
    for act in ("sine", "relu", "gelu"):
        params = mlp_init(3, 16, 2, 4, act, seed=9)
        x0 = RNG.normal(size=(8, 3)) * 0.5
        if act == "relu":
            x0 += 0.05
        w = proj((8, 4))

        def through_net(v, tape):
            return dn.reduce_sum(dn.mul(mlp_forward(params, v, tape=tape), w))

        check_grad(through_net, x0, tol=1e-3 if act == "sine" else 1e-4, h=1e-7)

        # gradient w.r.t. first-layer weights
        tape = Tape()
        layers = wrap_layers(params)
        out = dn.reduce_sum(dn.mul(mlp_forward(params, x0, tape=tape, layers=layers), w))
        backward(tape, out)
        got = grad_of(layers[0][0])

        def f_w0(wmat):
            p2 = mlp_init(3, 16, 2, 4, act, seed=9)
            p2.layers[0] = (wmat, p2.layers[0][1])
            return float((mlp_forward(p2, x0) * w).sum())

        want = fd_grad(f_w0, params.layers[0][0].copy(), h=1e-6)
        assert rel_err(got, want) < 1e-3


# ----------------------------------------------------------- tape mechanics

def test_unused_branch_gets_zero_grad():
    tape = Tape()
    a = leaf(np.ones(3), tape)
    b = leaf(np.ones(3), tape)
    used = dn.reduce_sum(dn.mul(a, 2.0))
    _unused = dn.mul(b, 5.0)
    backward(tape, used)
    assert np.allclose(grad_of(a), 2.0)
    assert np.allclose(grad_of(b), 0.0)


def test_grad_accumulates_over_reuse():
    tape = Tape()
    a = leaf(np.array([3.0]), tape)
    out = dn.reduce_sum(dn.add(dn.mul(a, a), dn.mul(a, 4.0)))  # a^2 + 4a
    backward(tape, out)
    assert np.allclose(grad_of(a), 2 * 3.0 + 4.0)


def test_empty_tape_backward_raises():
    tape = Tape()
    v = leaf(np.ones(2), tape)
    with pytest.raises(ValueError):
        backward(tape, v)


def test_mixed_tape_rejected():
    t1, t2 = Tape(), Tape()
    a = leaf(np.ones(2), t1)
    b = leaf(np.ones(2), t2)
    with pytest.raises(ValueError, match="different tapes"):
        dn.add(a, b)


def test_untaped_leaf_op_requires_tape():
    a = leaf(np.ones(2))
    with pytest.raises(ValueError, match="tape"):
        dn.add(a, a)


def test_operator_sugar():
    tape = Tape()
    a = leaf(np.array([2.0]), tape)
    out = dn.reduce_sum((a * 3.0 + 1.0 - a) / 2.0)
    assert out.data == pytest.approx((2 * 3 + 1 - 2) / 2)
    backward(tape, out)
    assert np.allclose(grad_of(a), 1.0)


# ----------------------------------------------------------------- MLP init

def test_mlp_shapes_and_zero_biases():
    p = mlp_init(3, 64, 3, 7, "sine", seed=1)
    dims = [(3, 64), (64, 64), (64, 64), (64, 7)]
    assert [w.shape for w, _ in p.layers] == dims
    assert all(np.all(b == 0.0) for _, b in p.layers)
    assert p.in_dim == 3 and p.out_dim == 7 and p.hidden_dim == 64 and p.depth == 3


def test_sine_init_variance_matches_frequency_rule():
    p = mlp_init(16, 256, 3, 3, "sine", seed=5, omega0=30.0)
    # hidden layers: uniform(+-sqrt(6/fan)/omega) => var = 2 / (fan * omega^2)
    w = p.layers[1][0]
    want = 2.0 / (256 * 30.0**2)
    assert np.var(w) == pytest.approx(want, rel=0.2)
    # first layer: uniform(+-1/in_dim)
    w0 = p.layers[0][0]
    assert np.abs(w0).max() <= 1.0 / 16
    assert np.var(w0) == pytest.approx((1.0 / 16) ** 2 / 3.0, rel=0.2)


def test_relu_gelu_init_variance():
    for act in ("relu", "gelu"):
        p = mlp_init(64, 256, 2, 3, act, seed=6)
        for w, _ in p.layers:
            fan = w.shape[0]
            assert np.var(w) == pytest.approx(2.0 / fan, rel=0.2)
            assert np.abs(w).max() <= np.sqrt(6.0 / fan) + 1e-12


def test_init_is_deterministic_per_seed():
    a = mlp_init(3, 32, 2, 4, "sine", seed=42)
    b = mlp_init(3, 32, 2, 4, "sine", seed=42)
    c = mlp_init(3, 32, 2, 4, "sine", seed=43)
    for (wa, ba), (wb, bb) in zip(a.layers, b.layers):
        assert np.array_equal(wa, wb) and np.array_equal(ba, bb)
    assert not np.array_equal(a.layers[0][0], c.layers[0][0])


def test_mlp_init_rejects_bad_args():
    with pytest.raises(ValueError):
        mlp_init(3, 16, 2, 3, "tanh", seed=0)
    with pytest.raises(ValueError):
        mlp_init(0, 16, 2, 3, "sine", seed=0)
    with pytest.raises(ValueError):
        mlp_init(3, 16, 0, 3, "sine", seed=0)


def test_sine_forward_closed_form():
    # hand-set weights: one hidden unit, sin(omega * 0.5 x), identity head
    p = mlp_init(1, 1, 1, 1, "sine", seed=0, omega0=30.0)
    p.layers[0] = (np.array([[0.5]]), np.zeros(1))
    p.layers[1] = (np.array([[1.0]]), np.zeros(1))
    x = np.array([[1.0], [2.0]])
    want = np.sin(30.0 * 0.5 * x)
    assert np.allclose(mlp_forward(p, x), want, atol=1e-15)


def test_taped_forward_matches_untaped_bitwise():
    for act in ("sine", "relu", "gelu"):
        p = mlp_init(3, 32, 2, 5, act, seed=8)
        x = RNG.normal(size=(17, 3))
        plain = mlp_forward(p, x)
        tape = Tape()
        rec = mlp_forward(p, x, tape=tape)
        assert np.array_equal(plain, rec.data)


def test_mlp_forward_validates_input_shape():
    p = mlp_init(3, 8, 1, 2, "relu", seed=0)
    with pytest.raises(ValueError, match="input must be"):
        mlp_forward(p, np.zeros((4, 2)))


# --------------------------------------------------------------------- Adam

def test_adam_first_step_closed_form():
    p = np.array([1.0, -2.0, 0.5])
    g = np.array([0.1, -0.4, 0.0])
    st = adam_init([p], lr=0.01)
    adam_step(st, [p], [g.copy()])
    # bias-corrected m-hat = g, v-hat = g^2 on the first step
    want = np.array([1.0, -2.0, 0.5]) - 0.01 * g / (np.abs(g) + 1e-8)
    assert np.allclose(p, want, atol=1e-12)
    assert st.step == 1


def test_adam_two_steps_match_reference():
    rng = np.random.default_rng(0)
    p = rng.normal(size=(4, 2))
    p_ref = p.copy()
    g1 = rng.normal(size=(4, 2))
    g2 = rng.normal(size=(4, 2))
    st = adam_init([p], lr=2e-3)
    adam_step(st, [p], [g1])
    adam_step(st, [p], [g2])

    # independent reference, straight from the update equations
    b1, b2, eps, lr = 0.9, 0.999, 1e-8, 2e-3
    m = np.zeros_like(p_ref)
    v = np.zeros_like(p_ref)
    for k, g in enumerate((g1, g2), start=1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        mh = m / (1 - b1**k)
        vh = v / (1 - b2**k)
        p_ref = p_ref - lr * mh / (np.sqrt(vh) + eps)
    assert np.allclose(p, p_ref, atol=1e-14)


def test_adam_zero_grad_is_identity():
    p = np.array([1.0, 2.0])
    st = adam_init([p], lr=0.1)
    adam_step(st, [p], [np.zeros(2)])
    assert np.array_equal(p, [1.0, 2.0])
    adam_step(st, [p], [None])  # missing grad treated as zero
    assert np.array_equal(p, [1.0, 2.0])


def test_adam_shape_mismatch_raises():
    p = np.zeros((2, 2))
    st = adam_init([p], lr=0.1)
    with pytest.raises(ValueError, match="shape"):
        adam_step(st, [p], [np.zeros(3)])


def test_adam_decreases_quadratic():
    p = np.array([5.0, -3.0])
    st = adam_init([p], lr=0.05)
    for _ in range(2000):
        adam_step(st, [p], [2.0 * p])
    assert np.abs(p).max() < 1e-3


# ------------------------------------------------------------- 6D rotations

def test_rot6d_identity_seed():
    assert np.array_equal(rot6d_to_matrix(dn.ROT6D_IDENTITY), np.eye(3))


def test_rot6d_thousand_random_inputs_are_rotations():
    rng = np.random.default_rng(77)
    worst_orth = 0.0
    worst_det = 0.0
    for _ in range(1000):
        r = rng.normal(size=6)
        R = rot6d_to_matrix(r)
        worst_orth = max(worst_orth, np.abs(R.T @ R - np.eye(3)).max())
        worst_det = max(worst_det, abs(np.linalg.det(R) - 1.0))
    assert worst_orth < 1e-6
    assert worst_det < 1e-6


def test_rot6d_degenerate_inputs_raise():
    with pytest.raises(ValueError, match="degenerate"):
        rot6d_to_matrix(np.array([0.0, 0, 0, 1, 0, 0]))
    with pytest.raises(ValueError, match="degenerate"):
        rot6d_to_matrix(np.array([1.0, 0, 0, 2.0, 0, 0]))
    tape = Tape()
    with pytest.raises(ValueError, match="degenerate"):
        rot6d_transpose_graph(np.array([1.0, 0, 0, -3.0, 0, 0]), tape)


def test_rot6d_graph_matches_numpy():
    rng = np.random.default_rng(3)
    for _ in range(20):
        r = rng.normal(size=6)
        R = rot6d_to_matrix(r)
        tape = Tape()
        Rt = rot6d_transpose_graph(r, tape)
        assert np.allclose(Rt.data, R.T, atol=1e-14)


def test_decode_transform9():
    r = np.array([1.0, 0, 0, 0, 1, 0, 2.0, 3.0, -1.0])
    R, t = decode_transform9(r)
    assert np.array_equal(R, np.eye(3))
    assert np.array_equal(t, [2.0, 3.0, -1.0])
    assert np.array_equal(dn.TRANSFORM9_IDENTITY[:6], dn.ROT6D_IDENTITY)
    assert np.array_equal(dn.TRANSFORM9_IDENTITY[6:], np.zeros(3))


# --------------------------------------------------------------- containers

def test_array_container_round_trip(tmp_path):
    arrays = {
        "a": RNG.normal(size=(4, 3)),
        "b": np.arange(5, dtype=np.float64),
        "scalar": np.asarray(3.75),
    }
    meta = {"kind": "test", "n": 5}
    path = tmp_path / "bundle.json"
    write_arrays(path, arrays, meta)
    back, meta2 = read_arrays(path)
    assert meta2 == meta
    assert set(back) == set(arrays)
    for k in arrays:
        assert np.array_equal(back[k], np.asarray(arrays[k], dtype=np.float64))
    assert (tmp_path / "bundle.bin").exists()


def test_array_container_rejects_foreign_json(tmp_path):
    p = tmp_path / "other.json"
    p.write_text("{\"hello\": 1}")
    with pytest.raises(ValueError, match="container"):
        read_arrays(p)


def test_mlp_container_round_trip(tmp_path):
    p = mlp_init(3, 24, 2, 6, "gelu", seed=123)
    arrays = mlp_to_arrays("net", p)
    write_arrays(tmp_path / "net.json", arrays, {"net": mlp_meta(p)})
    back, meta = read_arrays(tmp_path / "net.json")
    q = mlp_from_arrays("net", back, meta["net"])
    assert q.activation == "gelu"
    assert q.omega0 == 30.0
    x = RNG.normal(size=(9, 3))
    assert np.array_equal(mlp_forward(p, x), mlp_forward(q, x))
