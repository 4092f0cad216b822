"""Minimal reverse-mode automatic differentiation over numpy float64 arrays.

Operations executed inside an active :class:`Tape` are recorded together with
their backward rules; :meth:`Tape.backward` replays the record in reverse.
Outside a tape every op is a plain forward computation, which is what
rollouts and evaluation use.
"""

from __future__ import annotations

import io
import json
import struct
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

DTYPE = np.float64


class ShapeMismatch(ValueError):
    def __init__(self, op: str, a, b):
        super().__init__(f"{op}: incompatible shapes {tuple(a)} and {tuple(b)}")


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=DTYPE)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self):
        label = f" {self.name}" if self.name else ""
        return f"Tensor{label}(shape={self.shape})"

    # sugar used by the policy code
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def parameter(data, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=True, name=name)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# -- tape ---------------------------------------------------------------------

_TAPES: list["Tape"] = []


@dataclass
class _Record:
    out: Tensor
    parents: tuple[Tensor, ...]
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


class Tape:
    """Explicit computation record for one forward pass."""

    def __init__(self):
        self.records: list[_Record] = []

    def __enter__(self) -> "Tape":
        _TAPES.append(self)
        return self

    def __exit__(self, *exc):
        _TAPES.remove(self)

    def __len__(self):
        return len(self.records)

    def backward(self, loss: Tensor) -> None:
        if loss.data.size != 1:
            raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
        loss.grad = np.ones_like(loss.data)
        for rec in reversed(self.records):
            g = rec.out.grad
            if g is None:
                continue
            grads = rec.backward(g)
            for parent, pg in zip(rec.parents, grads):
                if pg is None or not parent.requires_grad:
                    continue
                if pg.shape != parent.data.shape:
                    pg = np.broadcast_to(pg, parent.data.shape)
                parent.grad = pg.copy() if parent.grad is None else parent.grad + pg
        # intermediate grads are no longer needed; parameters keep theirs
        for rec in self.records:
            rec.out.grad = None
        loss.grad = np.ones_like(loss.data)


def recording() -> bool:
    return bool(_TAPES)


def function(value: np.ndarray, parents: Sequence[Tensor],
             backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]) -> Tensor:
    """Wrap ``value`` as the output of an op with the given backward rule.

    ``backward(g)`` receives the output gradient and returns one gradient per
    parent (``None`` for parents that need none).
    """
    out = Tensor(value)
    if _TAPES and any(p.requires_grad for p in parents):
        out.requires_grad = True
        _TAPES[-1].records.append(_Record(out, tuple(parents), backward))
    return out


def no_grad_value(x) -> np.ndarray:
    return x.data if isinstance(x, Tensor) else np.asarray(x, dtype=DTYPE)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _check_broadcast(op: str, a: np.ndarray, b: np.ndarray) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeMismatch(op, a.shape, b.shape) from None


# -- elementwise --------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("add", a.data, b.data)
    return function(a.data + b.data, (a, b),
                    lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def add_broadcast(matrix, vector) -> Tensor:
    """Matrix plus a vector broadcast along its leading axes."""
    matrix, vector = as_tensor(matrix), as_tensor(vector)
    if vector.data.ndim != 1 or matrix.shape[-1] != vector.shape[0]:
        raise ShapeMismatch("add_broadcast", matrix.shape, vector.shape)
    return add(matrix, vector)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("sub", a.data, b.data)
    return function(a.data - b.data, (a, b),
                    lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("mul", a.data, b.data)
    return function(a.data * b.data, (a, b),
                    lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


elementwise_mul = mul


def scale(a, c: float) -> Tensor:
    a = as_tensor(a)
    return function(a.data * c, (a,), lambda g: (g * c,))


def square(a) -> Tensor:
    a = as_tensor(a)
    return function(a.data ** 2, (a,), lambda g: (2.0 * a.data * g,))


def tanh(a) -> Tensor:
    a = as_tensor(a)
    y = np.tanh(a.data)
    return function(y, (a,), lambda g: (g * (1.0 - y * y),))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    y = _sigmoid(a.data)
    return function(y, (a,), lambda g: (g * y * (1.0 - y),))


def exp(a) -> Tensor:
    a = as_tensor(a)
    y = np.exp(a.data)
    return function(y, (a,), lambda g: (g * y,))


def log(a) -> Tensor:
    a = as_tensor(a)
    return function(np.log(a.data), (a,), lambda g: (g / a.data,))


def leaky_relu(a, slope: float = 0.2) -> Tensor:
    a = as_tensor(a)
    pos = a.data > 0
    return function(np.where(pos, a.data, slope * a.data), (a,),
                    lambda g: (np.where(pos, g, slope * g),))


def elu(a, alpha: float = 1.0) -> Tensor:
    a = as_tensor(a)
    pos = a.data > 0
    neg = alpha * np.expm1(np.minimum(a.data, 0.0))
    y = np.where(pos, a.data, neg)
    return function(y, (a,), lambda g: (np.where(pos, g, g * (neg + alpha)),))


def dropout(a, rate: float, rng: np.random.Generator | int | None = None) -> Tensor:
    """Inverted dropout; ``rate == 0`` is the identity and draws nothing."""
    a = as_tensor(a)
    if rate <= 0.0:
        return a
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    keep = (rng.random(a.shape) >= rate) / (1.0 - rate)
    return function(a.data * keep, (a,), lambda g: (g * keep,))


# -- linear algebra -----------------------------------------------------------

def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim < 1 or b.data.ndim != 2 or a.shape[-1] != b.shape[0]:
        raise ShapeMismatch("matmul", a.shape, b.shape)

    def backward(g):
        ga = g @ b.data.T
        a2 = a.data.reshape(-1, a.shape[-1])
        gb = a2.T @ g.reshape(-1, g.shape[-1])
        return ga, gb

    return function(a.data @ b.data, (a, b), backward)


def linear(W, b, x) -> Tensor:
    """``x @ W.T + b`` for ``W`` of shape (out, in); ``b`` may be ``None``."""
    W, x = as_tensor(W), as_tensor(x)
    if W.data.ndim != 2 or x.shape[-1] != W.shape[1]:
        raise ShapeMismatch("linear", W.shape, x.shape)
    y = x.data @ W.data.T
    parents = [W, x]
    if b is not None:
        b = as_tensor(b)
        if b.shape != (W.shape[0],):
            raise ShapeMismatch("linear bias", W.shape, b.shape)
        y = y + b.data
        parents.append(b)

    def backward(g):
        g2 = g.reshape(-1, g.shape[-1])
        gW = g2.T @ x.data.reshape(-1, x.shape[-1])
        gx = g @ W.data
        grads = [gW, gx]
        if b is not None:
            grads.append(g2.sum(axis=0))
        return grads

    return function(y, parents, backward)


# -- reductions and reshaping -------------------------------------------------

def sum(a, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    a = as_tensor(a)
    y = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape),)

    return function(y, (a,), backward)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    count = a.data.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return scale(sum(a, axis, keepdims), 1.0 / float(count))


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    return function(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    inv = None if axes is None else np.argsort(axes)
    return function(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),))


def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    try:
        y = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        raise ShapeMismatch("concat", tensors[0].shape, tensors[-1].shape) from None
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    return function(y, tensors, lambda g: np.split(g, bounds, axis=axis))


def gather_rows(a, index) -> Tensor:
    """``a[index]`` along the first axis, with scatter-add backward."""
    a = as_tensor(a)
    index = np.asarray(index, dtype=np.int64)

    def backward(g):
        ga = np.zeros_like(a.data)
        np.add.at(ga, index, g)
        return (ga,)

    return function(a.data[index], (a,), backward)


def embed(table, ids) -> Tensor:
    return gather_rows(table, ids)


def pick(a, index) -> Tensor:
    """Per-row element ``a[i, index[i]]`` of a 2-D tensor."""
    a = as_tensor(a)
    index = np.asarray(index, dtype=np.int64)
    rows = np.arange(a.shape[0])

    def backward(g):
        ga = np.zeros_like(a.data)
        ga[rows, index] = g
        return (ga,)

    return function(a.data[rows, index], (a,), backward)


# -- normalisation ------------------------------------------------------------

def softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)
    return function(y, (a,), lambda g: (y * (g - (g * y).sum(axis=axis, keepdims=True)),))


def log_softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    y = z - lse
    p = np.exp(y)
    return function(y, (a,), lambda g: (g - p * g.sum(axis=axis, keepdims=True),))


def masked_log_softmax(a, mask) -> Tensor:
    """Row-wise log-softmax over entries where ``mask`` is true; others are -inf."""
    a = as_tensor(a)
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != a.shape:
        raise ShapeMismatch("masked_log_softmax", a.shape, mask.shape)
    z = np.where(mask, a.data, -np.inf)
    zmax = z.max(axis=-1, keepdims=True)
    zmax = np.where(np.isfinite(zmax), zmax, 0.0)
    e = np.where(mask, np.exp(z - zmax), 0.0)
    total = e.sum(axis=-1, keepdims=True)
    with np.errstate(divide="ignore"):
        y = np.where(mask, z - zmax - np.log(total), -np.inf)
    p = e / np.where(total > 0, total, 1.0)

    def backward(g):
        g = np.where(mask, g, 0.0)
        return (g - p * g.sum(axis=-1, keepdims=True),)

    return function(y, (a,), backward)


def masked_entropy(a, mask) -> Tensor:
    """Row-wise entropy of the softmax restricted to ``mask``; empty rows give 0."""
    a = as_tensor(a)
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != a.shape:
        raise ShapeMismatch("masked_entropy", a.shape, mask.shape)
    z = np.where(mask, a.data, -np.inf)
    zmax = z.max(axis=-1, keepdims=True)
    zmax = np.where(np.isfinite(zmax), zmax, 0.0)
    e = np.where(mask, np.exp(z - zmax), 0.0)
    total = e.sum(axis=-1, keepdims=True)
    p = e / np.where(total > 0, total, 1.0)
    logp = np.where(p > 0, np.log(np.where(p > 0, p, 1.0)), 0.0)
    H = -(p * logp).sum(axis=-1)
    return function(H, (a,), lambda g: (-g[..., None] * p * (logp + H[..., None]),))


# -- segments (variable-size groups laid out along axis 0) --------------------
def segment_sum(a, segments, num_segments: int) -> Tensor:
    a = as_tensor(a)
    segments = np.asarray(segments, dtype=np.int64)
    out = np.zeros((num_segments,) + a.shape[1:], dtype=DTYPE)
    np.add.at(out, segments, a.data)
    return function(out, (a,), lambda g: (g[segments],))


def segment_softmax(a, segments, num_segments: int) -> Tensor:
    """Softmax along axis 0 within each segment, independently per column."""
    a = as_tensor(a)
    segments = np.asarray(segments, dtype=np.int64)
    seg_max = np.full((num_segments,) + a.shape[1:], -np.inf)
    np.maximum.at(seg_max, segments, a.data)
    e = np.exp(a.data - seg_max[segments])
    denom = np.zeros_like(seg_max)
    np.add.at(denom, segments, e)
    y = e / denom[segments]

    def backward(g):
        gy = g * y
        s = np.zeros_like(seg_max)
        np.add.at(s, segments, gy)
        return (gy - y * s[segments],)

    return function(y, (a,), backward)


# -- recurrent ----------------------------------------------------------------

def gru_params(input_dim: int, hidden: int, rng: np.random.Generator, prefix: str = "gru") -> dict[str, Tensor]:
    bound = 1.0 / np.sqrt(hidden)
    u = lambda *shape: rng.uniform(-bound, bound, size=shape)  # noqa: E731
    return {
        "W_ih": parameter(u(input_dim, 3 * hidden), f"{prefix}.W_ih"),
        "W_hh": parameter(u(hidden, 3 * hidden), f"{prefix}.W_hh"),
        "b_ih": parameter(u(3 * hidden), f"{prefix}.b_ih"),
        "b_hh": parameter(u(3 * hidden), f"{prefix}.b_hh"),
    }


def gru_step(params: Mapping[str, Tensor], x, h_prev, mask=None) -> Tensor:
    """One GRU cell update for a batch of rows.

    ``mask`` (shape ``(batch,)``) freezes rows whose entry is 0, which is how
    padded positions of variable-length sequences are skipped.
    """
    x, h_prev = as_tensor(x), as_tensor(h_prev)
    W_ih, W_hh, b_ih, b_hh = (params[k] for k in ("W_ih", "W_hh", "b_ih", "b_hh"))
    H = h_prev.shape[-1]
    if x.shape[-1] != W_ih.shape[0] or W_hh.shape != (H, 3 * H) or x.shape[0] != h_prev.shape[0]:
        raise ShapeMismatch("gru_step", x.shape, h_prev.shape)
    xs = x.data @ W_ih.data + b_ih.data
    hs = h_prev.data @ W_hh.data + b_hh.data
    r = _sigmoid(xs[:, :H] + hs[:, :H])
    z = _sigmoid(xs[:, H:2 * H] + hs[:, H:2 * H])
    hn = hs[:, 2 * H:]
    n = np.tanh(xs[:, 2 * H:] + r * hn)
    h_new = (1.0 - z) * n + z * h_prev.data
    m = None if mask is None else np.asarray(mask, dtype=DTYPE)[:, None]
    out = h_new if m is None else m * h_new + (1.0 - m) * h_prev.data

    def backward(g):
        gm = g if m is None else g * m
        gh = gm * z if m is None else g * (1.0 - m) + gm * z
        dn = gm * (1.0 - z)
        dz = gm * (h_prev.data - n)
        dn_pre = dn * (1.0 - n * n)
        dr_pre = dn_pre * hn * r * (1.0 - r)
        dz_pre = dz * z * (1.0 - z)
        dxs = np.concatenate([dr_pre, dz_pre, dn_pre], axis=1)
        dhs = np.concatenate([dr_pre, dz_pre, dn_pre * r], axis=1)
        gx = dxs @ W_ih.data.T
        gh = gh + dhs @ W_hh.data.T
        return gx, gh, x.data.T @ dxs, h_prev.data.T @ dhs, dxs.sum(axis=0), dhs.sum(axis=0)

    return function(out, (x, h_prev, W_ih, W_hh, b_ih, b_hh), backward)


def gru_sequence(params: Mapping[str, Tensor], inputs, h0, lengths) -> Tensor:
    """Run a GRU over padded sequences and return each row's final state.

    ``inputs`` has shape ``(L, N, d_in)``; row ``j`` consumes its first
    ``lengths[j]`` time steps and keeps ``h0[j]`` unchanged when the length
    is 0.  Equivalent to ``L`` masked :func:`gru_step` calls, but only rows
    still inside their sequence are advanced and the input-side products
    are batched into single matrix products.
    """
    inputs, h0 = as_tensor(inputs), as_tensor(h0)
    W_ih, W_hh, b_ih, b_hh = (params[k] for k in ("W_ih", "W_hh", "b_ih", "b_hh"))
    lengths = np.asarray(lengths, dtype=np.int64)
    L, N = inputs.shape[0], inputs.shape[1] if inputs.data.ndim == 3 else 0
    H = h0.shape[-1]
    if inputs.data.ndim != 3 or inputs.shape[2] != W_ih.shape[0] or h0.shape != (N, H) or lengths.shape != (N,):
        raise ShapeMismatch("gru_sequence", inputs.shape, h0.shape)
    if lengths.size and (lengths.min() < 0 or lengths.max() > L):
        raise ShapeMismatch("gru_sequence lengths", lengths.shape, (L,))
    order = np.argsort(-lengths, kind="stable")
    active = [int((lengths > t).sum()) for t in range(L)]
    X = inputs.data[:, order]                                  # rows sorted by length
    XS = X @ W_ih.data + b_ih.data                             # (L, N, 3H)
    h = h0.data[order].copy()
    saved = []
    for t in range(L):
        n_t = active[t]
        if n_t == 0:
            break
        hp = h[:n_t]
        xs = XS[t, :n_t]
        hs = hp @ W_hh.data + b_hh.data
        r = _sigmoid(xs[:, :H] + hs[:, :H])
        z = _sigmoid(xs[:, H:2 * H] + hs[:, H:2 * H])
        hn = hs[:, 2 * H:]
        n = np.tanh(xs[:, 2 * H:] + r * hn)
        saved.append((hp.copy(), r, z, hn, n))
        h[:n_t] = (1.0 - z) * n + z * hp
    out = np.empty_like(h)
    out[order] = h

    def backward(g):
        gh = g[order].copy()
        dXS = np.zeros_like(XS)
        hps, dhss = [], []
        for t in range(len(saved) - 1, -1, -1):
            hp, r, z, hn, n = saved[t]
            n_t = hp.shape[0]
            gt = gh[:n_t]
            dn_pre = gt * (1.0 - z) * (1.0 - n * n)
            dz_pre = gt * (hp - n) * z * (1.0 - z)
            dr_pre = dn_pre * hn * r * (1.0 - r)
            dXS[t, :n_t, :H] = dr_pre
            dXS[t, :n_t, H:2 * H] = dz_pre
            dXS[t, :n_t, 2 * H:] = dn_pre
            dhs = np.concatenate([dr_pre, dz_pre, dn_pre * r], axis=1)
            gh[:n_t] = gt * z + dhs @ W_hh.data.T
            hps.append(hp)
            dhss.append(dhs)
        flat_x = X.reshape(-1, X.shape[-1])
        flat_d = dXS.reshape(-1, 3 * H)
        gX = np.empty_like(inputs.data)
        gX[:, order] = dXS @ W_ih.data.T
        g_h0 = np.empty_like(gh)
        g_h0[order] = gh
        if hps:
            gW_hh = np.concatenate(hps).T @ np.concatenate(dhss)
            gb_hh = np.concatenate(dhss).sum(axis=0)
        else:
            gW_hh, gb_hh = np.zeros_like(W_hh.data), np.zeros_like(b_hh.data)
        return gX, g_h0, flat_x.T @ flat_d, gW_hh, flat_d.sum(axis=0), gb_hh

    return function(out, (inputs, h0, W_ih, W_hh, b_ih, b_hh), backward)


# -- graph attention ----------------------------------------------------------

@dataclass
class GatLayerParams:
    weight: Tensor      # (d_in, heads * d_out)
    att_src: Tensor     # (heads, d_out)
    att_dst: Tensor     # (heads, d_out)
    heads: int
    leaky_slope: float = 0.2

    def __post_init__(self):
        if self.heads < 1:
            raise ValueError("GAT needs at least one head")
        if self.weight.shape[1] % self.heads:
            raise ShapeMismatch("gat weight", self.weight.shape, (self.heads,))
        for t in self.tensors().values():
            if not np.all(np.isfinite(t.data)):
                raise ValueError(f"non-finite GAT parameter {t.name}")

    @property
    def out_dim(self) -> int:
        return self.weight.shape[1] // self.heads

    @classmethod
    def init(cls, d_in: int, d_out: int, heads: int, rng: np.random.Generator,
             prefix: str = "gat", leaky_slope: float = 0.2) -> "GatLayerParams":
        scale_w = np.sqrt(2.0 / (d_in + d_out))
        scale_a = np.sqrt(2.0 / (1 + d_out))
        return cls(parameter(rng.normal(0, scale_w, (d_in, heads * d_out)), f"{prefix}.weight"),
                   parameter(rng.normal(0, scale_a, (heads, d_out)), f"{prefix}.att_src"),
                   parameter(rng.normal(0, scale_a, (heads, d_out)), f"{prefix}.att_dst"),
                   heads, leaky_slope)

    def tensors(self) -> dict[str, Tensor]:
        return {"weight": self.weight, "att_src": self.att_src, "att_dst": self.att_dst}


def with_self_loops(edges, n: int) -> tuple[np.ndarray, np.ndarray]:
    """Source/target index arrays for ``edges`` plus one self-loop per node."""
    edges = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
    if edges.size and (edges.min() < 0 or edges.max() >= n):
        raise ShapeMismatch("gat adjacency", (int(edges.max()),), (n,))
    loops = np.arange(n, dtype=np.int64)
    src = np.concatenate([edges[:, 0], loops])
    dst = np.concatenate([edges[:, 1], loops])
    return src, dst


def gat_forward(node_features, adjacency, params: GatLayerParams, dropout_rate: float = 0.0,
                rng: np.random.Generator | None = None) -> tuple[Tensor, Tensor]:
    """One multi-head graph attention layer.

    ``adjacency`` is a sequence of ``(source, target)`` pairs; self-loops are
    added.  Returns head-averaged ELU node embeddings ``(n, d_out)`` and the
    per-node mean received attention ``(n, heads)``.
    """
    x = as_tensor(node_features)
    n = x.shape[0]
    if x.data.ndim != 2 or x.shape[1] != params.weight.shape[0]:
        raise ShapeMismatch("gat_forward", x.shape, params.weight.shape)
    m, d = params.heads, params.out_dim
    src, dst = with_self_loops(adjacency, n)
    z = reshape(matmul(x, params.weight), (n, m, d))
    s_src = sum(mul(z, params.att_src), axis=-1)            # (n, m)
    s_dst = sum(mul(z, params.att_dst), axis=-1)
    logits = leaky_relu(add(gather_rows(s_dst, dst), gather_rows(s_src, src)), params.leaky_slope)
    alpha = segment_softmax(logits, dst, n)                  # (E, m)
    received = np.zeros((n, m))
    np.add.at(received, src, alpha.data)
    counts = np.bincount(src, minlength=n)[:, None]
    head_attention = Tensor(received / counts)
    if dropout_rate > 0.0:
        alpha = dropout(alpha, dropout_rate, rng)
    msg = mul(gather_rows(z, src), reshape(alpha, (-1, m, 1)))
    out = segment_sum(msg, dst, n)                           # (n, m, d)
    return elu(mean(out, axis=1)), head_attention


# -- gradient checking --------------------------------------------------------

@dataclass
class GradCheckReport:
    tolerance: float
    max_rel_error: dict[str, float] = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return all(err <= self.tolerance for err in self.max_rel_error.values())

    @property
    def failures(self) -> list[str]:
        return [k for k, err in self.max_rel_error.items() if err > self.tolerance]

    def __str__(self):
        lines = [f"{'PASS' if self.passed else 'FAIL'} (tolerance {self.tolerance:g})"]
        for k, err in self.max_rel_error.items():
            lines.append(f"  {k}: {err:.3e}{'  <-- exceeds' if err > self.tolerance else ''}")
        return "\n".join(lines)


def grad_check(f: Callable[[], Tensor], inputs: Mapping[str, Tensor], tolerance: float = 1e-4,
               h: float = 1e-5, max_entries: int | None = None, seed: int = 0,
               floor: float = 1e-6) -> GradCheckReport:
    """Compare tape gradients of scalar ``f()`` with central finite differences.

    Relative error per entry is ``|a - n| / max(|a|, |n|, floor)``.  With
    ``max_entries`` only a seeded random subset of each input is probed.
    """
    for name, t in inputs.items():
        if t.data.ndim and max(t.shape) > 16 and max_entries is None:
            raise ValueError(f"input {name!r} has an extent above 16; pass max_entries")
    saved = {name: t.requires_grad for name, t in inputs.items()}
    for t in inputs.values():
        t.requires_grad = True
        t.grad = None
    with Tape() as tape:
        loss = f()
    tape.backward(loss)
    rng = np.random.default_rng(seed)
    report = GradCheckReport(tolerance)
    for name, t in inputs.items():
        analytic = np.zeros_like(t.data) if t.grad is None else t.grad.copy()
        flat = t.data.reshape(-1)
        idx = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            idx = rng.choice(flat.size, max_entries, replace=False)
        worst = 0.0
        for i in idx:
            orig = flat[i]
            flat[i] = orig + h
            up = float(f().data)
            flat[i] = orig - h
            down = float(f().data)
            flat[i] = orig
            numeric = (up - down) / (2 * h)
            a = analytic.reshape(-1)[i]
            err = abs(a - numeric) / max(abs(a), abs(numeric), floor)
            if not np.isfinite(err):
                err = np.inf
            worst = max(worst, err)
        report.max_rel_error[name] = worst
    for name, t in inputs.items():
        t.requires_grad = saved[name]
        t.grad = None
    return report


# -- checkpoints --------------------------------------------------------------

CHECKPOINT_MAGIC = b"HEXCKPT\x00"
CHECKPOINT_VERSION = 1


def save_checkpoint(fp, params: Mapping[str, Tensor | np.ndarray], meta: Mapping | None = None) -> None:
    """Write ``magic | version | header length | JSON header | float64 LE blob``."""
    table = []
    blobs = []
    offset = 0
    for name in sorted(params):
        arr = np.ascontiguousarray(no_grad_value(params[name]), dtype="<f8")
        table.append({"name": name, "shape": list(arr.shape), "offset": offset, "count": int(arr.size)})
        blobs.append(arr.tobytes())
        offset += arr.size
    header = json.dumps({"meta": dict(meta or {}), "params": table}, sort_keys=True).encode("utf-8")
    close = False
    if not hasattr(fp, "write"):
        fp, close = open(fp, "wb"), True
    try:
        fp.write(CHECKPOINT_MAGIC)
        fp.write(struct.pack("<II", CHECKPOINT_VERSION, len(header)))
        fp.write(header)
        for b in blobs:
            fp.write(b)
    finally:
        if close:
            fp.close()


def load_checkpoint(fp) -> tuple[dict[str, np.ndarray], dict]:
    if not hasattr(fp, "read"):
        with open(fp, "rb") as handle:
            return load_checkpoint(handle)
    if fp.read(len(CHECKPOINT_MAGIC)) != CHECKPOINT_MAGIC:
        raise ValueError("not a hexplain checkpoint")
    version, hlen = struct.unpack("<II", fp.read(8))
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    header = json.loads(fp.read(hlen).decode("utf-8"))
    blob = np.frombuffer(fp.read(), dtype="<f8")
    params = {}
    for entry in header["params"]:
        start, count = entry["offset"], entry["count"]
        if start + count > blob.size:
            raise ValueError(f"checkpoint truncated inside {entry['name']!r}")
        params[entry["name"]] = blob[start:start + count].reshape(entry["shape"]).astype(DTYPE)
    return params, header["meta"]


def checkpoint_bytes(params: Mapping[str, Tensor | np.ndarray], meta: Mapping | None = None) -> bytes:
    buf = io.BytesIO()
    save_checkpoint(buf, params, meta)
    return buf.getvalue()


def zero_grads(tensors: Iterable[Tensor]) -> None:
    for t in tensors:
        t.grad = None
