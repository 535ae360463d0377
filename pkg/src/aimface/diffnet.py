"""Reverse-mode autodiff over taped numpy ops, MLPs, Adam, 6D rotations.

The op vocabulary is intentionally small: exactly what the coordinate MLPs,
the skinning/expression composition, and the training/fitting losses need.
Values are float64 numpy arrays; a Tape records result nodes in creation
order, which is already a topological order for the reverse sweep.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import erf

_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_INV_SQRT2PI = 1.0 / np.sqrt(2.0 * np.pi)


class Tape:
    """Records non-leaf nodes of one forward pass for the reverse sweep."""

    def __init__(self):
        self.nodes: list[Var] = []

    def __len__(self):
        return len(self.nodes)


class Var:
    """A value in the computation graph; leaves have no parents."""

    __slots__ = ("data", "grad", "_parents", "_bw", "tape")

    def __init__(self, data, tape: Tape | None = None, parents=(), bw=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self._parents = parents
        self._bw = bw
        self.tape = tape
        if bw is not None:
            if tape is None:
                raise ValueError("non-leaf Var requires a tape")
            tape.nodes.append(self)

    @property
    def shape(self):
        return self.data.shape

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def _data(x):
    return x.data if isinstance(x, Var) else np.asarray(x, dtype=np.float64)


def _tape_of(*xs) -> Tape | None:
    tape = None
    for x in xs:
        if isinstance(x, Var) and x.tape is not None:
            if tape is None:
                tape = x.tape
            elif tape is not x.tape:
                raise ValueError("operands recorded on different tapes")
    # leaves without a tape are fine; they just receive grads
    if tape is None:
        for x in xs:
            if isinstance(x, Var):
                return _LEAF_TAPE_ERROR
    return tape


class _LeafTapeError:
    pass


_LEAF_TAPE_ERROR = _LeafTapeError()


def _emit(tape, data, parents, bw):
    if tape is None:
        return data
    if tape is _LEAF_TAPE_ERROR:
        raise ValueError("operation on leaf Vars requires an explicit tape; "
                         "create at least one operand via tape-recorded ops or pass leaf(tape=...)")
    return Var(data, tape=tape, parents=parents, bw=bw)


def leaf(data, tape: Tape | None = None) -> Var:
    """Create a differentiable leaf (parameter or input)."""
    v = Var(data)
    v.tape = tape
    return v


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, (gs, ss) in enumerate(zip(g.shape, shape)):
        if ss == 1 and gs != 1:
            g = g.sum(axis=i, keepdims=True)
    return g.reshape(shape)


def backward(tape: Tape, output: Var, seed=None) -> None:
    """Reverse sweep; fills .grad on every reachable Var (leaves included)."""
    if not tape.nodes:
        raise ValueError("reverse sweep on an empty tape")
    if output.grad is None:
        output.grad = np.ones_like(output.data) if seed is None else np.asarray(seed, dtype=np.float64)
    for node in reversed(tape.nodes):
        if node.grad is None or node._bw is None:
            continue
        for p, g in zip(node._parents, node._bw(node.grad)):
            if isinstance(p, Var) and g is not None:
                p.grad = g if p.grad is None else p.grad + g


def grad_of(v: Var) -> np.ndarray:
    """Gradient of a Var after backward; zeros when it was off the path."""
    return v.grad if v.grad is not None else np.zeros_like(v.data)


# ---------------------------------------------------------------- primitives

def add(a, b):
    ad, bd = _data(a), _data(b)
    return _emit(_tape_of(a, b), ad + bd, (a, b),
                 lambda g: (_unbroadcast(g, ad.shape), _unbroadcast(g, bd.shape)))


def sub(a, b):
    ad, bd = _data(a), _data(b)
    return _emit(_tape_of(a, b), ad - bd, (a, b),
                 lambda g: (_unbroadcast(g, ad.shape), _unbroadcast(-g, bd.shape)))


def mul(a, b):
    ad, bd = _data(a), _data(b)
    return _emit(_tape_of(a, b), ad * bd, (a, b),
                 lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)))


def div(a, b):
    ad, bd = _data(a), _data(b)
    return _emit(_tape_of(a, b), ad / bd, (a, b),
                 lambda g: (_unbroadcast(g / bd, ad.shape),
                            _unbroadcast(-g * ad / (bd * bd), bd.shape)))


def scale(a, s: float):
    ad = _data(a)
    return _emit(_tape_of(a), s * ad, (a,), lambda g: (s * g,))


def matmul(a, b):
    ad, bd = _data(a), _data(b)
    return _emit(_tape_of(a, b), ad @ bd, (a, b),
                 lambda g: (g @ bd.T, ad.T @ g))


def reduce_sum(a):
    ad = _data(a)
    return _emit(_tape_of(a), np.asarray(ad.sum()), (a,),
                 lambda g: (np.broadcast_to(g, ad.shape).copy() if np.ndim(g) == 0 else g * np.ones_like(ad),))


def reduce_mean(a):
    ad = _data(a)
    n = ad.size
    return _emit(_tape_of(a), np.asarray(ad.mean()), (a,),
                 lambda g: (np.broadcast_to(g / n, ad.shape).copy(),))


def sin_wave(a, omega: float):
    """sin(omega * a); the frequency-scaled activation."""
    ad = _data(a)
    arg = omega * ad
    tape = _tape_of(a)
    if tape is None:
        return np.sin(arg, out=arg)
    cos_arg = np.cos(arg)  # cache for the reverse sweep
    np.multiply(cos_arg, omega, out=cos_arg)
    return _emit(tape, np.sin(arg, out=arg), (a,), lambda g: (g * cos_arg,))


def relu(a):
    ad = _data(a)
    return _emit(_tape_of(a), np.maximum(ad, 0.0), (a,),
                 lambda g: (g * (ad > 0.0),))  # subgradient 0 at 0


def gelu(a):
    """Exact Gaussian-CDF form: a * Phi(a)."""
    ad = _data(a)
    phi_cdf = 0.5 * (1.0 + erf(ad * _INV_SQRT2))
    return _emit(_tape_of(a), ad * phi_cdf, (a,),
                 lambda g: (g * (phi_cdf + ad * _INV_SQRT2PI * np.exp(-0.5 * ad * ad)),))


def _stable_sigmoid(ad: np.ndarray) -> np.ndarray:
    e = np.exp(-np.abs(ad))
    return np.where(ad >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def softplus(a):
    ad = _data(a)
    return _emit(_tape_of(a), np.logaddexp(0.0, ad), (a,),
                 lambda g: (g * _stable_sigmoid(ad),))


def sigmoid(a):
    ad = _data(a)
    s = _stable_sigmoid(ad)
    return _emit(_tape_of(a), s, (a,), lambda g: (g * s * (1.0 - s),))


def normalize_rows(a, eps: float = 1e-12):
    """Unit-normalize along the last axis."""
    ad = _data(a)
    r = np.maximum(np.linalg.norm(ad, axis=-1, keepdims=True), eps)
    u = ad / r

    def bw(g):
        return ((g - (g * u).sum(axis=-1, keepdims=True) * u) / r,)

    return _emit(_tape_of(a), u, (a,), bw)


def dot_rows(a, b):
    """Row-wise dot product along the last axis, keepdims."""
    ad, bd = _data(a), _data(b)
    out = (ad * bd).sum(axis=-1, keepdims=True)
    return _emit(_tape_of(a, b), out, (a, b),
                 lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)))


def cross_rows(a, b):
    ad, bd = _data(a), _data(b)
    return _emit(_tape_of(a, b), np.cross(ad, bd), (a, b),
                 lambda g: (_unbroadcast(np.cross(bd, g), ad.shape),
                            _unbroadcast(np.cross(g, ad), bd.shape)))


def sqnorm(a):
    """Sum of squares of all entries (scalar)."""
    ad = _data(a)
    return _emit(_tape_of(a), np.asarray((ad * ad).sum()), (a,),
                 lambda g: (g * 2.0 * ad,))


def mean_sq(a):
    """Mean over rows of the squared row norm: sum(a*a) / nrows."""
    ad = _data(a)
    n = ad.shape[0] if ad.ndim > 0 and ad.shape[0] else 1
    return _emit(_tape_of(a), np.asarray((ad * ad).sum() / n), (a,),
                 lambda g: (g * 2.0 * ad / n,))


def gather_rows(a, idx):
    ad = _data(a)
    idx = np.asarray(idx, dtype=np.int64)

    def bw(g):
        out = np.zeros_like(ad)
        np.add.at(out, idx, g)
        return (out,)

    return _emit(_tape_of(a), ad[idx], (a,), bw)


def slice_cols(a, lo: int, hi: int):
    ad = _data(a)

    def bw(g):
        out = np.zeros_like(ad)
        out[..., lo:hi] = g
        return (out,)

    return _emit(_tape_of(a), ad[..., lo:hi], (a,), bw)


def concat(vars_, axis: int = -1):
    datas = [_data(v) for v in vars_]
    sizes = [d.shape[axis] for d in datas]
    splits = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, splits, axis=axis))

    return _emit(_tape_of(*vars_), np.concatenate(datas, axis=axis), tuple(vars_), bw)


def reshape(a, shape):
    ad = _data(a)
    return _emit(_tape_of(a), ad.reshape(shape), (a,), lambda g: (g.reshape(ad.shape),))


def stack_vectors(vecs):
    """Stack k same-length 1-D vars into a (k, n) matrix."""
    datas = [_data(v) for v in vecs]

    def bw(g):
        return tuple(g[i] for i in range(len(datas)))

    return _emit(_tape_of(*vecs), np.stack(datas, axis=0), tuple(vecs), bw)


def blend_basis(w, basis: np.ndarray):
    """Blend a fixed per-point displacement basis: (M,K) x (M,K,3) -> (M,3)."""
    wd = _data(w)
    basis = np.asarray(basis, dtype=np.float64)
    out = np.einsum("mk,mkc->mc", wd, basis)
    return _emit(_tape_of(w), out, (w,),
                 lambda g: (np.einsum("mc,mkc->mk", g, basis),))


# ---------------------------------------------------------------------- MLPs

ACTIVATIONS = ("sine", "relu", "gelu")


@dataclass
class MlpParams:
    """Layer weights/biases for a fully connected net with a linear head."""

    layers: list[tuple[np.ndarray, np.ndarray]]
    activation: str
    omega0: float = 30.0
    seed: int = 0

    @property
    def in_dim(self) -> int:
        return self.layers[0][0].shape[0]

    @property
    def out_dim(self) -> int:
        return self.layers[-1][0].shape[1]

    @property
    def hidden_dim(self) -> int:
        return self.layers[0][0].shape[1]

    @property
    def depth(self) -> int:
        return len(self.layers) - 1

    def flat_arrays(self) -> list[np.ndarray]:
        out = []
        for w, b in self.layers:
            out.extend((w, b))
        return out


def mlp_init(in_dim: int, hidden_dim: int, depth: int, out_dim: int,
             activation: str, seed: int, omega0: float = 30.0) -> MlpParams:
    """depth = number of hidden layers; sine nets get frequency-scaled init."""
    if activation not in ACTIVATIONS:
        raise ValueError(f"unknown activation {activation!r}")
    if min(in_dim, hidden_dim, out_dim) < 1 or depth < 1:
        raise ValueError("dims and depth must be >= 1")
    rng = np.random.Generator(np.random.PCG64(seed))
    dims = [in_dim] + [hidden_dim] * depth + [out_dim]
    layers = []
    for li in range(len(dims) - 1):
        fan_in, fan_out = dims[li], dims[li + 1]
        if activation == "sine":
            bound = 1.0 / fan_in if li == 0 else np.sqrt(6.0 / fan_in) / omega0
        else:
            bound = np.sqrt(6.0 / fan_in)
        w = rng.uniform(-bound, bound, size=(fan_in, fan_out))
        b = np.zeros(fan_out)
        layers.append((w, b))
    return MlpParams(layers=layers, activation=activation, omega0=omega0, seed=seed)


def wrap_layers(params: MlpParams) -> list[tuple[Var, Var]]:
    """Leaf Vars for every layer, for differentiating w.r.t. the weights."""
    return [(leaf(w), leaf(b)) for w, b in params.layers]


def mlp_forward(params: MlpParams, x, tape: Tape | None = None, layers=None):
    """Forward pass; pass a tape (and optionally pre-wrapped layers) to record.

    x is (M, in_dim) as ndarray or Var. Untaped calls stay in plain numpy.
    """
    xd = _data(x)
    if xd.ndim != 2 or xd.shape[1] != params.in_dim:
        raise ValueError(f"input must be (M, {params.in_dim}), got {xd.shape}")
    act = params.activation
    om = params.omega0
    if tape is None and not isinstance(x, Var) and layers is None:
        h = xd
        last = len(params.layers) - 1
        for li, (w, b) in enumerate(params.layers):
            z = h @ w + b
            if li == last:
                return z
            if act == "sine":
                h = om * z
                np.sin(h, out=h)
            elif act == "relu":
                h = np.maximum(z, 0.0)
            else:
                zc = 0.5 * (1.0 + erf(z * _INV_SQRT2))
                h = z * zc
        return h
    if layers is None:
        layers = wrap_layers(params)
    h = x if isinstance(x, Var) else leaf(xd)
    if tape is None:
        raise ValueError("taped forward requires a tape")
    last = len(layers) - 1
    for li, (w, b) in enumerate(layers):
        z = add(matmul(_with_tape(h, tape), _with_tape(w, tape)), _with_tape(b, tape))
        if li == last:
            return z
        if act == "sine":
            h = sin_wave(z, om)
        elif act == "relu":
            h = relu(z)
        else:
            h = gelu(z)
    return h


def _with_tape(v, tape: Tape):
    if isinstance(v, Var) and v.tape is None:
        v.tape = tape
    return v


# ---------------------------------------------------------------------- Adam

@dataclass
class AdamState:
    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)


def adam_init(params: list[np.ndarray], lr: float,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> AdamState:
    return AdamState(lr=lr, beta1=beta1, beta2=beta2, eps=eps,
                     m=[np.zeros_like(p) for p in params],
                     v=[np.zeros_like(p) for p in params])


def adam_step(state: AdamState, params: list[np.ndarray], grads: list) -> tuple[list, AdamState]:
    """One bias-corrected Adam update, in place on the parameter arrays."""
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for i, (p, g) in enumerate(zip(params, grads)):
        if g is None:
            g = np.zeros_like(p)
        if g.shape != p.shape:
            raise ValueError(f"grad shape {g.shape} != param shape {p.shape}")
        state.m[i] = b1 * state.m[i] + (1.0 - b1) * g
        state.v[i] = b2 * state.v[i] + (1.0 - b2) * g * g
        p -= state.lr * (state.m[i] / c1) / (np.sqrt(state.v[i] / c2) + state.eps)
    return params, state


# ------------------------------------------------------------- 6D rotations

ROT6D_IDENTITY = np.array([1.0, 0.0, 0.0, 0.0, 1.0, 0.0])
TRANSFORM9_IDENTITY = np.concatenate([ROT6D_IDENTITY, np.zeros(3)])

_DEGENERATE_EPS = 1e-8


def rot6d_to_matrix(r: np.ndarray) -> np.ndarray:
    """Gram-Schmidt two seed columns into a proper rotation matrix."""
    r = np.asarray(r, dtype=np.float64).reshape(6)
    a1, a2 = r[:3], r[3:]
    n1 = np.linalg.norm(a1)
    if n1 <= _DEGENERATE_EPS:
        raise ValueError("degenerate 6D rotation: first seed column near zero")
    c1 = a1 / n1
    v2 = a2 - (c1 @ a2) * c1
    n2 = np.linalg.norm(v2)
    if n2 <= _DEGENERATE_EPS:
        raise ValueError("degenerate 6D rotation: seed columns near parallel")
    c2 = v2 / n2
    c3 = np.cross(c1, c2)
    return np.stack([c1, c2, c3], axis=1)


def rot6d_transpose_graph(r, tape: Tape):
    """Taped Gram-Schmidt; returns R^T (rows c1,c2,c3) for row-vector points."""
    rd = _data(r)
    a1d, a2d = rd[:3], rd[3:]
    n1 = np.linalg.norm(a1d)
    if n1 <= _DEGENERATE_EPS:
        raise ValueError("degenerate 6D rotation: first seed column near zero")
    c1d = a1d / n1
    if np.linalg.norm(a2d - (c1d @ a2d) * c1d) <= _DEGENERATE_EPS:
        raise ValueError("degenerate 6D rotation: seed columns near parallel")
    rv = _with_tape(r, tape) if isinstance(r, Var) else leaf(rd, tape)
    a1 = slice_cols(rv, 0, 3)
    a2 = slice_cols(rv, 3, 6)
    c1 = normalize_rows(a1)
    c2 = normalize_rows(sub(a2, mul(dot_rows(c1, a2), c1)))
    c3 = cross_rows(c1, c2)
    return stack_vectors([c1, c2, c3])


def decode_transform9(t9: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """9-vector (6D rotation | translation) to (R, t)."""
    t9 = np.asarray(t9, dtype=np.float64).reshape(9)
    return rot6d_to_matrix(t9[:6]), t9[6:].copy()


def decode_transform9_graph(t9, tape: Tape):
    """Taped decode; returns (R^T Var, t Var)."""
    t9v = _with_tape(t9, tape) if isinstance(t9, Var) else leaf(_data(t9), tape)
    rt = rot6d_transpose_graph(slice_cols(t9v, 0, 6), tape)
    t = slice_cols(t9v, 6, 9)
    return rt, t


def apply_transform9(t9: np.ndarray, points: np.ndarray) -> np.ndarray:
    """Rigidly move (M,3) points by a 9-vector transform: R x + t."""
    R, t = decode_transform9(t9)
    return points @ R.T + t


def lbs_points(points: np.ndarray, t9: np.ndarray, k: np.ndarray) -> np.ndarray:
    """Per-point blend toward the rigidly moved position.

    Delta form s + k((Rs+t) - s): algebraically (1-k)s + k(Rs+t), but exact
    at k arbitrary when the transform is the identity (Rs+t == s bitwise).
    """
    moved = apply_transform9(t9, points)
    k = np.asarray(k, dtype=np.float64).reshape(-1, 1)
    return points + k * (moved - points)


# ------------------------------------------------------- array container IO

CONTAINER_FORMAT = "aimface-container"


def write_arrays(json_path: str | Path, arrays: dict[str, np.ndarray], meta: dict) -> None:
    """JSON header + little-endian float64 sidecar blob, arrays in order."""
    json_path = Path(json_path)
    json_path.parent.mkdir(parents=True, exist_ok=True)
    blob_path = json_path.with_suffix(".bin")
    entries = []
    offset = 0
    chunks = []
    for name, arr in arrays.items():
        a = np.asarray(arr, dtype="<f8")  # ascontiguousarray would promote 0-d to 1-d
        a = a if a.flags.c_contiguous else np.array(a, dtype="<f8", order="C")
        entries.append({"name": name, "shape": list(a.shape), "dtype": "<f8", "offset": offset})
        offset += a.nbytes
        chunks.append(a.tobytes())
    header = {
        "format": CONTAINER_FORMAT,
        "version": 1,
        "blob": blob_path.name,
        "meta": meta,
        "arrays": entries,
    }
    blob_path.write_bytes(b"".join(chunks))
    json_path.write_text(json.dumps(header, indent=2, sort_keys=True))


def read_arrays(json_path: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    json_path = Path(json_path)
    header = json.loads(json_path.read_text())
    if header.get("format") != CONTAINER_FORMAT:
        raise ValueError(f"{json_path}: not an array container")
    blob = (json_path.parent / header["blob"]).read_bytes()
    arrays = {}
    for e in header["arrays"]:
        n = int(np.prod(e["shape"])) if e["shape"] else 1
        a = np.frombuffer(blob, dtype=e["dtype"], count=n, offset=e["offset"])
        arrays[e["name"]] = a.reshape(e["shape"]).astype(np.float64)
    return arrays, header["meta"]


def mlp_to_arrays(prefix: str, params: MlpParams) -> dict[str, np.ndarray]:
    out = {}
    for li, (w, b) in enumerate(params.layers):
        out[f"{prefix}.w{li}"] = w
        out[f"{prefix}.b{li}"] = b
    return out


def mlp_meta(params: MlpParams) -> dict:
    return {
        "activation": params.activation,
        "omega0": params.omega0,
        "seed": params.seed,
        "dims": [params.layers[0][0].shape[0]] + [w.shape[1] for w, _ in params.layers],
    }


def mlp_from_arrays(prefix: str, arrays: dict[str, np.ndarray], meta: dict) -> MlpParams:
    layers = []
    li = 0
    while f"{prefix}.w{li}" in arrays:
        layers.append((arrays[f"{prefix}.w{li}"].copy(), arrays[f"{prefix}.b{li}"].copy()))
        li += 1
    if not layers:
        raise ValueError(f"no layers found for prefix {prefix!r}")
    return MlpParams(layers=layers, activation=meta["activation"],
                     omega0=float(meta["omega0"]), seed=int(meta.get("seed", 0)))
