"""Dense tensors with tape-based reverse-mode differentiation.

Every op takes :class:`Tensor` (or plain arrays for constants), computes its
value eagerly with numpy and, when a :class:`Tape` is active and any input
requires a gradient, appends a node holding a closure for the backward rule.

Recurrent layers and attention are exposed as fused ops with hand-written
backward passes; :func:`grad_check` is the safety net for all of them.
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ConfigError, ContractError, DimensionError

__all__ = [
    "Tensor", "Tape", "GradientSet", "tensor", "param",
    "matmul", "affine", "add", "mul", "tanh", "sigmoid", "elementwise",
    "softmax", "log_softmax", "dropout", "concat", "stack", "embedding",
    "total", "mean", "cross_entropy", "masked_mean_time", "subsample_time",
    "lstm_sequence", "gru_cell", "additive_attention",
    "backward", "grad_check", "clip_grad_norm", "global_norm",
]

_ACTIVE: list["Tape"] = []


class Tensor:
    """An n-d array plus the bookkeeping the tape needs."""

    __slots__ = ("data", "requires_grad", "name", "tape_id")

    def __init__(self, data, requires_grad=False, name=None):
        self.data = np.asarray(data)
        self.requires_grad = requires_grad
        self.name = name
        self.tape_id = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def is_leaf(self):
        return self.tape_id is None

    def numpy(self):
        return self.data

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag})"

    def __add__(self, other):
        return add(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __matmul__(self, other):
        return matmul(self, other)


def tensor(data, dtype=None):
    return Tensor(np.asarray(data, dtype=dtype))


def param(data, name=None):
    return Tensor(np.asarray(data), requires_grad=True, name=name)


class _Node:
    __slots__ = ("kind", "inputs", "out", "backward")

    def __init__(self, kind, inputs, out, backward):
        self.kind = kind
        self.inputs = inputs
        self.out = out
        self.backward = backward


class Tape:
    """Records ops in execution order while used as a context manager."""

    def __init__(self):
        self.nodes: list[_Node] = []

    def __enter__(self):
        _ACTIVE.append(self)
        return self

    def __exit__(self, *exc):
        _ACTIVE.remove(self)
        return False

    def __len__(self):
        return len(self.nodes)


class GradientSet(dict):
    """name -> gradient array; an absent name means a zero gradient."""

    def norm(self):
        return global_norm(self)


def _as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _emit(kind, value, inputs, bwd):
    out = Tensor(value)
    if not _ACTIVE:
        return out
    if not any(isinstance(i, Tensor) and i.requires_grad for i in inputs):
        return out
    tape = _ACTIVE[-1]
    out.requires_grad = True
    out.tape_id = len(tape.nodes)
    tape.nodes.append(_Node(kind, tuple(inputs), out, bwd))
    return out


def _sum_to(g, shape):
    """Reduce a broadcast gradient back onto ``shape``."""
    if g.shape == shape:
        return g
    if len(shape) == 1:
        return g.reshape(-1, shape[0]).sum(axis=0)
    # per-sequence vector broadcast over the time axis
    return g.sum(axis=1)


def _check_broadcast(a, b, op):
    if a.shape == b.shape:
        return
    if b.ndim == 1 and a.ndim >= 1 and a.shape[-1] == b.shape[0]:
        return
    if a.ndim == 3 and b.shape == (a.shape[0], a.shape[2]):
        return
    raise DimensionError(f"{op}: incompatible shapes {a.shape} and {b.shape}")


# ---------------------------------------------------------------- linear algebra

def matmul(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    A, B = a.data, b.data
    if B.ndim != 2 or A.ndim < 1 or A.shape[-1] != B.shape[0]:
        raise DimensionError(f"matmul: cannot multiply {A.shape} by {B.shape}")
    out = A @ B

    def bwd(g):
        ga = g @ B.T
        gb = A.reshape(-1, A.shape[-1]).T @ g.reshape(-1, B.shape[1])
        return ga, gb

    return _emit("matmul", out, (a, b), bwd)


def affine(x, W, b=None):
    """``x @ W.T + b`` with W stored as (out, in)."""
    x, W = _as_tensor(x), _as_tensor(W)
    X, Wd = x.data, W.data
    if X.shape[-1] != Wd.shape[1]:
        raise DimensionError(f"affine: input {X.shape} does not match weight {Wd.shape}")
    out = X @ Wd.T
    if b is not None:
        b = _as_tensor(b)
        if b.shape != (Wd.shape[0],):
            raise DimensionError(f"affine: bias {b.shape} does not match weight {Wd.shape}")
        out = out + b.data

    def bwd(g):
        g2 = g.reshape(-1, Wd.shape[0])
        gx = g @ Wd
        gW = g2.T @ X.reshape(-1, Wd.shape[1])
        if b is None:
            return gx, gW
        return gx, gW, g2.sum(axis=0)

    inputs = (x, W) if b is None else (x, W, b)
    return _emit("affine", out, inputs, bwd)


def add(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a.data, b.data, "add")
    A, B = a.data, b.data
    out = A + (B[:, None, :] if B.ndim == 2 and A.ndim == 3 else B)
    shape_b = B.shape
    return _emit("add", out, (a, b), lambda g: (g, _sum_to(g, shape_b)))


def mul(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    A, B = a.data, b.data
    if A.shape != B.shape:
        raise DimensionError(f"mul: incompatible shapes {A.shape} and {B.shape}")
    return _emit("mul", A * B, (a, b), lambda g: (g * B, g * A))


def _sigmoid(x):
    return 0.5 * (np.tanh(0.5 * x) + 1.0)


def tanh(x):
    x = _as_tensor(x)
    y = np.tanh(x.data)
    return _emit("tanh", y, (x,), lambda g: (g * (1.0 - y * y),))


def sigmoid(x):
    x = _as_tensor(x)
    y = _sigmoid(x.data)
    return _emit("sigmoid", y, (x,), lambda g: (g * y * (1.0 - y),))


def elementwise(kind, *operands):
    """Dispatch by name: tanh, sigmoid, add, mul, affine."""
    table = {"tanh": tanh, "sigmoid": sigmoid, "add": add, "mul": mul, "affine": affine}
    try:
        fn = table[kind]
    except KeyError:
        raise ConfigError(f"unknown elementwise kind {kind!r}") from None
    return fn(*operands)


# ---------------------------------------------------------------- normalizers

def _softmax_np(x, axis=-1):
    z = x - x.max(axis=axis, keepdims=True)
    np.exp(z, out=z)
    z /= z.sum(axis=axis, keepdims=True)
    return z


def _log_softmax_np(x, axis=-1):
    z = x - x.max(axis=axis, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=axis, keepdims=True))


def softmax(x, axis=-1):
    x = _as_tensor(x)
    y = _softmax_np(x.data, axis)

    def bwd(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _emit("softmax", y, (x,), bwd)


def log_softmax(x, axis=-1):
    x = _as_tensor(x)
    y = _log_softmax_np(x.data, axis)

    def bwd(g):
        return (g - np.exp(y) * g.sum(axis=axis, keepdims=True),)

    return _emit("log_softmax", y, (x,), bwd)


def dropout(x, p, training, rng=None):
    """Inverted dropout: survivors scaled by 1/(1-p) so eval is the identity."""
    if not 0.0 <= p < 1.0:
        raise ConfigError(f"dropout probability must be in [0, 1), got {p}")
    x = _as_tensor(x)
    if not training or p == 0.0:
        return x
    if rng is None:
        raise ContractError("dropout in training mode needs an rng")
    keep = (rng.random(x.shape) >= p).astype(x.dtype) / (1.0 - p)
    return _emit("dropout", x.data * keep, (x,), lambda g: (g * keep,))


# ---------------------------------------------------------------- shape plumbing

def concat(xs: Sequence, axis=-1):
    xs = [_as_tensor(x) for x in xs]
    out = np.concatenate([x.data for x in xs], axis=axis)
    bounds = np.cumsum([x.shape[axis] for x in xs])[:-1]

    def bwd(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _emit("concat", out, xs, bwd)


def stack(xs: Sequence, axis=1):
    xs = [_as_tensor(x) for x in xs]
    out = np.stack([x.data for x in xs], axis=axis)

    def bwd(g):
        return tuple(np.moveaxis(g, axis, 0))

    return _emit("stack", out, xs, bwd)


def embedding(W, ids):
    """Row lookup ``W[ids]``; gradients scatter-add back into W."""
    W = _as_tensor(W)
    ids = np.asarray(ids, dtype=np.int64)
    out = W.data[ids]

    def bwd(g):
        gW = np.zeros_like(W.data)
        np.add.at(gW, ids.reshape(-1), g.reshape(-1, W.shape[1]))
        return (gW,)

    return _emit("embedding", out, (W,), bwd)


def total(x):
    x = _as_tensor(x)
    shape = x.shape
    return _emit("sum", np.asarray(x.data.sum()), (x,),
                 lambda g: (np.broadcast_to(g, shape).copy(),))


def mean(x):
    x = _as_tensor(x)
    shape, n = x.shape, x.data.size
    return _emit("mean", np.asarray(x.data.mean()), (x,),
                 lambda g: (np.full(shape, g / n, dtype=x.dtype),))


def subsample_time(x, mask):
    """Keep time steps 0, 2, 4, ... of a (B, T, D) tensor and its (B, T) mask."""
    x = _as_tensor(x)
    shape = x.shape
    out = x.data[:, ::2]

    def bwd(g):
        gx = np.zeros(shape, dtype=g.dtype)
        gx[:, ::2] = g
        return (gx,)

    return _emit("subsample", out, (x,), bwd), mask[:, ::2]


def masked_mean_time(x, mask):
    """Mean over the valid time steps of a (B, T, D) tensor."""
    x = _as_tensor(x)
    m = mask.astype(x.dtype)[:, :, None]
    n = m.sum(axis=1)
    out = (x.data * m).sum(axis=1) / n
    return _emit("masked_mean", out, (x,), lambda g: (g[:, None, :] * m / n[:, None, :],))


def cross_entropy(logits, targets, mask):
    """Mean negative log-likelihood of ``targets`` over positions where mask is 1."""
    logits = _as_tensor(logits)
    L = logits.data
    V = L.shape[-1]
    L2 = L.reshape(-1, V)
    t = np.asarray(targets, dtype=np.int64).reshape(-1)
    m = np.asarray(mask, dtype=L.dtype).reshape(-1)
    count = m.sum()
    if count <= 0:
        raise ContractError("cross_entropy: every target position is masked")
    logp = _log_softmax_np(L2)
    rows = np.arange(len(t))
    loss = -(logp[rows, t] * m).sum() / count

    def bwd(g):
        d = np.exp(logp)
        d[rows, t] -= 1.0
        d *= (m * (g / count))[:, None]
        return (d.reshape(L.shape),)

    return _emit("cross_entropy", np.asarray(loss, dtype=L.dtype), (logits,), bwd)


# ---------------------------------------------------------------- fused recurrent ops

def lstm_sequence(x, mask, W_ih, W_hh, b, h0=None, c0=None, reverse=False):
    """Run one LSTM direction over a padded batch.

    x: (B, T, D); mask: (B, T) of 0/1; W_ih: (4H, D); W_hh: (4H, H); b: (4H,).
    Gates are ordered input, forget, cell, output. Padded steps carry the
    state through unchanged and emit zeros. Returns (B, T, H).
    """
    x, W_ih, W_hh, b = (_as_tensor(v) for v in (x, W_ih, W_hh, b))
    X, Wi, Wh = x.data, W_ih.data, W_hh.data
    B, T, D = X.shape
    H = Wh.shape[1]
    if Wi.shape != (4 * H, D):
        raise DimensionError(f"lstm: input width {D} does not match weight {Wi.shape}")
    dt = X.dtype
    h = np.zeros((B, H), dt) if h0 is None else np.broadcast_to(_as_tensor(h0).data, (B, H))
    c = np.zeros((B, H), dt) if c0 is None else np.broadcast_to(_as_tensor(c0).data, (B, H))
    xp = X @ Wi.T + b.data
    M = np.asarray(mask, dtype=dt)
    out = np.zeros((B, T, H), dt)
    steps = range(T - 1, -1, -1) if reverse else range(T)
    saved = []
    for t in steps:
        m = M[:, t:t + 1]
        a = xp[:, t] + h @ Wh.T
        i = _sigmoid(a[:, :H])
        f = _sigmoid(a[:, H:2 * H])
        g = np.tanh(a[:, 2 * H:3 * H])
        o = _sigmoid(a[:, 3 * H:])
        c_new = f * c + i * g
        tc = np.tanh(c_new)
        h_new = o * tc
        saved.append((t, m, i, f, g, o, tc, h, c))
        h = m * h_new + (1.0 - m) * h
        c = m * c_new + (1.0 - m) * c
        out[:, t] = m * h_new

    def bwd(gout):
        dxp = np.zeros((B, T, 4 * H), dt)
        dWh = np.zeros_like(Wh)
        dh_next = np.zeros((B, H), dt)
        dc_next = np.zeros((B, H), dt)
        for t, m, i, f, g, o, tc, h_prev, c_prev in reversed(saved):
            dh = dh_next + m * gout[:, t]
            dh_new = m * dh
            dc_new = m * dc_next + dh_new * o * (1.0 - tc * tc)
            da = np.concatenate([
                dc_new * g * i * (1.0 - i),
                dc_new * c_prev * f * (1.0 - f),
                dc_new * i * (1.0 - g * g),
                dh_new * tc * o * (1.0 - o),
            ], axis=1)
            dWh += da.T @ h_prev
            dh_next = da @ Wh + (1.0 - m) * dh
            dc_next = dc_new * f + (1.0 - m) * dc_next
            dxp[:, t] = da
        flat = dxp.reshape(-1, 4 * H)
        grads = [dxp @ Wi, flat.T @ X.reshape(-1, D), dWh, flat.sum(axis=0)]
        if h0 is not None:
            grads.append(_sum_to(dh_next, _as_tensor(h0).shape))
        if c0 is not None:
            grads.append(_sum_to(dc_next, _as_tensor(c0).shape))
        return tuple(grads)

    inputs = [x, W_ih, W_hh, b]
    if h0 is not None:
        inputs.append(_as_tensor(h0))
    if c0 is not None:
        inputs.append(_as_tensor(c0))
    return _emit("lstm", out, inputs, bwd)


def gru_cell(x, h, W_ih, W_hh, b):
    """One GRU step, gates ordered update, reset, candidate.

    z = σ(W_z x + U_z h + b_z), r = σ(W_r x + U_r h + b_r),
    n = tanh(W_n x + U_n (r ⊙ h) + b_n), h' = (1 − z) ⊙ n + z ⊙ h.
    """
    x, h, W_ih, W_hh, b = (_as_tensor(v) for v in (x, h, W_ih, W_hh, b))
    X, Hp, Wi, Wh = x.data, h.data, W_ih.data, W_hh.data
    H = Wh.shape[1]
    if Wi.shape[1] != X.shape[-1] or Hp.shape[-1] != H:
        raise DimensionError(f"gru: input {X.shape}/state {Hp.shape} vs weights {Wi.shape}/{Wh.shape}")
    gi = X @ Wi.T + b.data
    gh = Hp @ Wh[:2 * H].T
    z = _sigmoid(gi[:, :H] + gh[:, :H])
    r = _sigmoid(gi[:, H:2 * H] + gh[:, H:])
    rh = r * Hp
    n = np.tanh(gi[:, 2 * H:] + rh @ Wh[2 * H:].T)
    out = (1.0 - z) * n + z * Hp

    def bwd(g):
        dn = g * (1.0 - z)
        dz = g * (Hp - n)
        dan = dn * (1.0 - n * n)
        drh = dan @ Wh[2 * H:]
        daz = dz * z * (1.0 - z)
        dar = drh * Hp * r * (1.0 - r)
        dgi = np.concatenate([daz, dar, dan], axis=1)
        dzr = dgi[:, :2 * H]
        dWh = np.concatenate([dzr.T @ Hp, dan.T @ rh], axis=0)
        dh = g * z + drh * r + dzr @ Wh[:2 * H]
        return dgi @ Wi, dh, dgi.T @ X, dWh, dgi.sum(axis=0)

    return _emit("gru", out, (x, h, W_ih, W_hh, b), bwd)


def additive_attention(E, keys, query, v, mask):
    """Feed-forward attention.

    score_t = v · tanh(keys_t + query), α = softmax over valid t, z = Σ α_t E_t.
    E: (B, T, H); keys: (B, T, A) (already projected); query: (B, A); v: (A,).
    Returns (z, α) where α is a plain array.
    """
    E, keys, query, v = (_as_tensor(t) for t in (E, keys, query, v))
    Ed, K, Q, Vv = E.data, keys.data, query.data, v.data
    if K.shape[:2] != Ed.shape[:2] or Q.shape != (K.shape[0], K.shape[2]) or Vv.shape != (K.shape[2],):
        raise DimensionError(
            f"attention: E {Ed.shape}, keys {K.shape}, query {Q.shape}, v {Vv.shape}")
    pre = np.tanh(K + Q[:, None, :])
    s = pre @ Vv
    valid = np.asarray(mask, dtype=bool)
    s = np.where(valid, s, -np.inf)
    alpha = _softmax_np(s, axis=1)
    z = np.einsum("bt,bth->bh", alpha, Ed)

    def bwd(g):
        dalpha = np.einsum("bh,bth->bt", g, Ed)
        dE = alpha[:, :, None] * g[:, None, :]
        ds = alpha * (dalpha - (alpha * dalpha).sum(axis=1, keepdims=True))
        dv = np.einsum("bt,bta->a", ds, pre)
        dpre = ds[:, :, None] * Vv * (1.0 - pre * pre)
        return dE, dpre, dpre.sum(axis=1), dv

    return _emit("attention", z, (E, keys, query, v), bwd), alpha


# ---------------------------------------------------------------- backward & checks

def _leaf_grads(tape, loss):
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    tid = loss.tape_id
    if tid is None or tid >= len(tape.nodes) or tape.nodes[tid].out is not loss:
        raise ContractError("loss was not recorded on this tape")
    grads = {id(loss): np.ones_like(loss.data)}
    leaves: dict[int, Tensor] = {}
    for node in reversed(tape.nodes[:tid + 1]):
        g = grads.pop(id(node.out), None)
        if g is None:
            continue
        for inp, gi in zip(node.inputs, node.backward(g)):
            if gi is None or not inp.requires_grad:
                continue
            key = id(inp)
            grads[key] = grads[key] + gi if key in grads else gi
            if inp.tape_id is None:
                leaves[key] = inp
    return [(leaf, grads[key].reshape(leaf.shape)) for key, leaf in leaves.items()]


def backward(tape: Tape, loss: Tensor) -> GradientSet:
    """Gradients of the scalar ``loss`` w.r.t. every leaf that requires them.

    Keys are leaf names; unnamed leaves get ``"#0"``, ``"#1"``, ... in the
    order the reverse sweep reaches them. A leaf shared under two names
    (tied storage) is one tensor and gets one accumulated entry.
    """
    out = GradientSet()
    unnamed = 0
    for leaf, g in _leaf_grads(tape, loss):
        name = leaf.name
        if name is None:
            name = f"#{unnamed}"
            unnamed += 1
        out[name] = g
    return out


def global_norm(grads) -> float:
    return float(np.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads.values())))


def clip_grad_norm(grads, max_norm=1.0) -> GradientSet:
    """Rescale so the global L2 norm is at most ``max_norm``."""
    if max_norm <= 0:
        raise ConfigError("max_norm must be positive")
    norm = global_norm(grads)
    if norm <= max_norm:
        return GradientSet(grads)
    scale = max_norm / norm
    return GradientSet({k: (g * scale).astype(g.dtype) for k, g in grads.items()})


def grad_check(f: Callable[[], Tensor], params: Iterable[Tensor], h=1e-5,
               max_coords=20, rng=None, abs_floor=1e-7, scale_floor=1e-3) -> float:
    """Worst relative error between backward() and central differences.

    ``f`` must rebuild the loss from the tensors in ``params`` so in-place
    perturbation is visible. At most ``max_coords`` randomly chosen
    coordinates per parameter are probed (``None`` probes all). The error at
    a coordinate is |a - n| / max(|a|, |n|, scale_floor * max|a|, abs_floor),
    where max|a| runs over the parameter: entries many orders of magnitude
    below the parameter's own gradient scale are judged against that scale,
    since central differences cannot resolve them.
    """
    params = list(params)
    rng = np.random.default_rng(0) if rng is None else rng
    with Tape() as tape:
        loss = f()
    if f().data.item() != loss.data.item():
        raise ContractError("grad_check: two forward passes differ; f is not deterministic")
    analytic = {id(leaf): g for leaf, g in _leaf_grads(tape, loss)}
    worst = 0.0
    for p in params:
        ga = analytic.get(id(p))
        ga = np.zeros(p.data.size) if ga is None else ga.reshape(-1)
        flat = p.data.reshape(-1)
        if not np.shares_memory(flat, p.data):
            raise ContractError("grad_check: parameter data must be contiguous")
        floor = max(abs_floor, scale_floor * float(np.max(np.abs(ga), initial=0.0)))
        n = flat.size
        if max_coords is None or n <= max_coords:
            idx = np.arange(n)
        else:
            idx = rng.choice(n, max_coords, replace=False)
        for k in idx:
            orig = flat[k]
            flat[k] = orig + h
            fp = float(f().data)
            flat[k] = orig - h
            fm = float(f().data)
            flat[k] = orig
            num = (fp - fm) / (2.0 * h)
            a = float(ga[k])
            worst = max(worst, abs(a - num) / max(abs(a), abs(num), floor))
    return worst
